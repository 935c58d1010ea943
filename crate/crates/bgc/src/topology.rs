//! Agent adjacency from positions: kNN graph, symmetrization with self-loops,
//! and the symmetric normalized Laplacian.
//!
//! The attention layer consumes only the boolean mask; the Laplacian is
//! exposed for inspection but not fed into attention, since per-row softmax
//! renormalizes coefficients anyway.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Boolean neighborhood mask. `mask[(i, j)]` means j is in agent i's
/// neighborhood (j contributes to i's attention row). Symmetric, with
/// self-loops on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMask {
    pub mask: Array2<bool>,
}

impl AdjacencyMask {
    pub fn n(&self) -> usize {
        self.mask.nrows()
    }

    /// Neighborhood of agent i, self included.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let row = self.mask.row(i);
        (0..self.n()).filter(move |&j| row[j])
    }

    /// True when i and j are linked (either direction) and i != j.
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        i != j && (self.mask[(i, j)] || self.mask[(j, i)])
    }

    /// Connected components of the undirected graph, as a label per node.
    pub fn components(&self) -> Vec<usize> {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = next;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if label[j] == usize::MAX && (self.mask[(i, j)] || self.mask[(j, i)]) {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
            next += 1;
        }
        label
    }
}

/// Directed kNN graph: entry (i, j) is true iff j is among the k nearest
/// other agents to i by Euclidean distance, ties broken toward the lower
/// agent index. No self edges.
///
/// `positions` is n x 2. Errors if k >= n.
pub fn knn_graph(positions: &Array2<f64>, k: usize) -> Result<Array2<bool>> {
    let n = positions.nrows();
    if n < 1 {
        return Err(Error::config("topology.k", "need at least one agent"));
    }
    if k >= n {
        return Err(Error::config(
            "topology.k",
            format!("k = {k} must be < n = {n}"),
        ));
    }
    let mut out = Array2::from_elem((n, n), false);
    let mut d2 = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            let dx = positions[[i, 0]] - positions[[j, 0]];
            let dy = positions[[i, 1]] - positions[[j, 1]];
            d2[j] = dx * dx + dy * dy;
        }
        // Selection by repeated minimum keeps the tie rule explicit: smaller
        // distance first, then smaller index.
        let mut taken = vec![false; n];
        taken[i] = true;
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..n {
                if taken[j] {
                    continue;
                }
                match best {
                    None => best = Some(j),
                    Some(b) if d2[j] < d2[b] => best = Some(j),
                    _ => {}
                }
            }
            let b = best.expect("k < n leaves a candidate");
            taken[b] = true;
            out[[i, b]] = true;
        }
    }
    Ok(out)
}

/// Undirected neighborhood mask: directed OR transpose OR identity.
pub fn symmetrize_with_self_loops(directed: &Array2<bool>) -> AdjacencyMask {
    let n = directed.nrows();
    assert_eq!(n, directed.ncols(), "directed graph must be square");
    let mut mask = Array2::from_elem((n, n), false);
    for i in 0..n {
        mask[(i, i)] = true;
        for j in 0..n {
            if directed[(i, j)] || directed[(j, i)] {
                mask[(i, j)] = true;
                mask[(j, i)] = true;
            }
        }
    }
    AdjacencyMask { mask }
}

/// Convenience: kNN, then symmetrize with self-loops.
pub fn build_mask(positions: &Array2<f64>, k: usize) -> Result<AdjacencyMask> {
    Ok(symmetrize_with_self_loops(&knn_graph(positions, k)?))
}

/// Symmetric normalized Laplacian L = I - D^(-1/2) A D^(-1/2), where A is the
/// mask without its diagonal and D the off-diagonal degree matrix. Rows of
/// isolated nodes are identity rows.
pub fn normalized_laplacian(mask: &AdjacencyMask) -> Array2<f64> {
    let n = mask.n();
    let mut degree = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && mask.mask[(i, j)] {
                degree[i] += 1.0;
            }
        }
    }
    let mut lap = Array2::zeros((n, n));
    for i in 0..n {
        lap[(i, i)] = 1.0;
        if degree[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            if i != j && mask.mask[(i, j)] && degree[j] > 0.0 {
                lap[(i, j)] = -1.0 / (degree[i] * degree[j]).sqrt();
            }
        }
    }
    lap
}
