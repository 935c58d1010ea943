//! Squad-skirmish gridworld: a desk-scale cooperative battle environment.
//!
//! A team of learning allies fights a scripted enemy squad on a small grid.
//! Allies spawn in the left third, enemies in the right third. Units move one
//! cell per step or attack an enemy within range; enemies focus-fire the
//! nearest ally and advance otherwise. The team reward is shaped from damage
//! dealt, kills, and winning, scaled so the maximum episode return is 1.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scenario parameters for the skirmish environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_width: i64,
    pub grid_height: i64,
    pub n_allies: usize,
    pub n_enemies: usize,
    /// Visibility radius in cells (closed Euclidean ball).
    pub sight_range: f64,
    /// Attack radius in cells; must not exceed `sight_range`.
    pub attack_range: f64,
    pub ally_hp: i64,
    pub enemy_hp: i64,
    /// Hit points removed per attack, both sides.
    pub damage: i64,
    pub max_steps: usize,
    /// Number of spawn clusters for allies; 0 scatters them over the left third.
    pub spawn_clusters: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_width: 8,
            grid_height: 8,
            n_allies: 4,
            n_enemies: 4,
            sight_range: 7.0,
            attack_range: 2.0,
            ally_hp: 12,
            enemy_hp: 10,
            damage: 2,
            max_steps: 50,
            spawn_clusters: 0,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_width < 1 {
            return Err(Error::config("env.grid_width", "must be >= 1"));
        }
        if self.grid_height < 1 {
            return Err(Error::config("env.grid_height", "must be >= 1"));
        }
        if self.n_allies < 1 {
            return Err(Error::config("env.n_allies", "must be >= 1"));
        }
        if self.n_enemies < 1 {
            return Err(Error::config("env.n_enemies", "must be >= 1"));
        }
        if !(self.sight_range > 0.0) {
            return Err(Error::config("env.sight_range", "must be > 0"));
        }
        if !(self.attack_range > 0.0) {
            return Err(Error::config("env.attack_range", "must be > 0"));
        }
        if self.attack_range > self.sight_range {
            return Err(Error::config(
                "env.attack_range",
                "must not exceed sight_range",
            ));
        }
        if self.ally_hp < 1 {
            return Err(Error::config("env.ally_hp", "must be >= 1"));
        }
        if self.enemy_hp < 1 {
            return Err(Error::config("env.enemy_hp", "must be >= 1"));
        }
        if self.damage < 1 {
            return Err(Error::config("env.damage", "must be >= 1"));
        }
        if self.max_steps < 1 {
            return Err(Error::config("env.max_steps", "must be >= 1"));
        }
        let third = (self.grid_width / 3).max(1) * self.grid_height;
        if (self.n_allies as i64) > third || (self.n_enemies as i64) > third {
            return Err(Error::config(
                "env.n_allies",
                "unit count exceeds spawn-third capacity",
            ));
        }
        Ok(())
    }

    /// Actions per agent: no-op, 4 moves, one attack per enemy slot.
    pub fn n_actions(&self) -> usize {
        5 + self.n_enemies
    }

    /// Length of a single agent observation vector.
    pub fn obs_len(&self) -> usize {
        5 * (self.n_allies - 1 + self.n_enemies) + 1
    }

    /// Length of the global state vector.
    pub fn state_len(&self) -> usize {
        4 * (self.n_allies + self.n_enemies) + 1
    }

    /// Denominator scaling the shaped reward: 200 + 10 * n_enemies + total enemy hp.
    pub fn reward_scale(&self) -> f64 {
        200.0 + 10.0 * self.n_enemies as f64 + (self.n_enemies as i64 * self.enemy_hp) as f64
    }
}

pub const ACTION_NOOP: usize = 0;
/// Moves in action-id order 1..=4: +y, -y, +x, -x.
const MOVE_DELTAS: [(i64, i64); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

/// Per-agent observation: fixed-length, zero-padded.
pub type Observation = Vec<f64>;
/// Flat global state vector.
pub type GlobalState = Vec<f64>;

/// Positions and alive flags of the learning agents (allies).
///
/// Dead agents carry a shared off-grid sentinel position so that kNN groups
/// them together.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPositions {
    pub xy: Vec<(f64, f64)>,
    pub alive: Vec<bool>,
}

impl AgentPositions {
    /// Positions as an n x 2 matrix, sentinel already applied for dead agents.
    pub fn as_array(&self) -> Array2<f64> {
        let n = self.xy.len();
        let mut out = Array2::zeros((n, 2));
        for i in 0..n {
            out[[i, 0]] = self.xy[i].0;
            out[[i, 1]] = self.xy[i].1;
        }
        out
    }
}

/// Everything the environment reports after one joint step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub state: GlobalState,
    pub positions: AgentPositions,
    pub reward: f64,
    pub terminated: bool,
    pub won: bool,
    pub available_actions: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Unit {
    x: i64,
    y: i64,
    hp: i64,
    hp_max: i64,
}

impl Unit {
    fn alive(&self) -> bool {
        self.hp > 0
    }
}

fn dist2(ax: i64, ay: i64, bx: i64, by: i64) -> f64 {
    let dx = (ax - bx) as f64;
    let dy = (ay - by) as f64;
    dx * dx + dy * dy
}

/// The skirmish environment. Single-threaded; one instance per rollout worker.
#[derive(Debug, Clone)]
pub struct SkirmishEnv {
    cfg: EnvConfig,
    allies: Vec<Unit>,
    enemies: Vec<Unit>,
    step_count: usize,
    terminated: bool,
    won: bool,
    /// Cluster index each ally spawned in (empty when spawn_clusters == 0).
    spawn_assignment: Vec<usize>,
}

impl SkirmishEnv {
    /// Create and reset an environment. Placement is deterministic given
    /// `(config, seed)`: allies on the left third, enemies on the right third,
    /// all units at full hp.
    pub fn reset(cfg: &EnvConfig, seed: u64) -> Result<SkirmishEnv> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e5e_5e5e_5e5e_5e5e);

        let third = (cfg.grid_width / 3).max(1);
        let mut spawn_assignment = Vec::new();
        let allies = if cfg.spawn_clusters > 1 && cfg.n_allies >= cfg.spawn_clusters {
            Self::place_clustered(cfg, third, &mut rng, &mut spawn_assignment)?
        } else {
            Self::place_scattered(cfg, 0, third, cfg.n_allies, cfg.ally_hp, &mut rng)
        };
        let enemies = Self::place_scattered(
            cfg,
            cfg.grid_width - third,
            cfg.grid_width,
            cfg.n_enemies,
            cfg.enemy_hp,
            &mut rng,
        );

        Ok(SkirmishEnv {
            cfg: cfg.clone(),
            allies,
            enemies,
            step_count: 0,
            terminated: false,
            won: false,
            spawn_assignment,
        })
    }

    fn place_scattered(
        cfg: &EnvConfig,
        x_lo: i64,
        x_hi: i64,
        count: usize,
        hp: i64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Unit> {
        let mut cells: Vec<(i64, i64)> = (x_lo..x_hi)
            .flat_map(|x| (0..cfg.grid_height).map(move |y| (x, y)))
            .collect();
        cells.shuffle(rng);
        cells
            .into_iter()
            .take(count)
            .map(|(x, y)| Unit { x, y, hp, hp_max: hp })
            .collect()
    }

    /// Place allies in `spawn_clusters` vertically separated boxes within the
    /// left third. Band spacing guarantees the gap between clusters strictly
    /// exceeds the intra-cluster diameter, so the kNN graph (k < cluster size)
    /// never links across clusters.
    fn place_clustered(
        cfg: &EnvConfig,
        third: i64,
        rng: &mut ChaCha8Rng,
        assignment: &mut Vec<usize>,
    ) -> Result<Vec<Unit>> {
        let c = cfg.spawn_clusters;
        let band = cfg.grid_height / c as i64;
        let per = cfg.n_allies.div_ceil(c);
        let box_w = third.min(3);
        let rows = (per as i64).div_ceil(box_w);
        // Vertical gap between consecutive cluster boxes is at least 5 cells.
        if band < rows + 4 {
            return Err(Error::config(
                "env.spawn_clusters",
                "grid_height too small for separated clusters",
            ));
        }
        let intra_max =
            (((box_w - 1) * (box_w - 1) + (rows - 1) * (rows - 1)) as f64).sqrt();
        if intra_max >= 5.0 {
            return Err(Error::config(
                "env.spawn_clusters",
                "cluster box too large for guaranteed separation",
            ));
        }
        let mut units = Vec::with_capacity(cfg.n_allies);
        for cluster in 0..c {
            let n_here = per.min(cfg.n_allies - units.len());
            let y0 = cluster as i64 * band + rng.gen_range(0..=band - rows - 4);
            let mut cells: Vec<(i64, i64)> = (0..box_w)
                .flat_map(|x| (y0..y0 + rows).map(move |y| (x, y)))
                .collect();
            cells.shuffle(rng);
            for &(x, y) in cells.iter().take(n_here) {
                units.push(Unit { x, y, hp: cfg.ally_hp, hp_max: cfg.ally_hp });
                assignment.push(cluster);
            }
        }
        Ok(units)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    pub fn won(&self) -> bool {
        self.won
    }

    /// Cluster index per ally for clustered spawns; empty otherwise.
    pub fn spawn_assignment(&self) -> &[usize] {
        &self.spawn_assignment
    }

    /// Global state: per unit (x, y, hp fraction, alive), allies then enemies,
    /// plus the step counter normalized by max_steps. Dead units read all-zero.
    pub fn global_state(&self) -> GlobalState {
        let mut s = Vec::with_capacity(self.cfg.state_len());
        for u in self.allies.iter().chain(self.enemies.iter()) {
            if u.alive() {
                s.push(u.x as f64 / self.cfg.grid_width as f64);
                s.push(u.y as f64 / self.cfg.grid_height as f64);
                s.push(u.hp as f64 / u.hp_max as f64);
                s.push(1.0);
            } else {
                s.extend_from_slice(&[0.0, 0.0, 0.0, 0.0]);
            }
        }
        s.push(self.step_count as f64 / self.cfg.max_steps as f64);
        s
    }

    /// Local observation for ally `agent`: per other unit within sight range
    /// (closed ball) the tuple (rel x, rel y, distance, hp fraction, is-enemy),
    /// relative coordinates and distance normalized by sight range; own hp
    /// fraction last. Out-of-range and dead units read all-zero. Dead agents
    /// observe all-zero.
    pub fn observe(&self, agent: usize) -> Result<Observation> {
        if agent >= self.cfg.n_allies {
            return Err(Error::contract(format!(
                "observe: agent index {agent} out of range"
            )));
        }
        let mut obs = vec![0.0; self.cfg.obs_len()];
        let me = &self.allies[agent];
        if !me.alive() {
            return Ok(obs);
        }
        let sight = self.cfg.sight_range;
        let mut slot = 0usize;
        for (j, u) in self.allies.iter().enumerate() {
            if j == agent {
                continue;
            }
            self.fill_unit_entry(&mut obs, slot, me, u, false, sight);
            slot += 1;
        }
        for u in &self.enemies {
            self.fill_unit_entry(&mut obs, slot, me, u, true, sight);
            slot += 1;
        }
        obs[self.cfg.obs_len() - 1] = me.hp as f64 / me.hp_max as f64;
        Ok(obs)
    }

    fn fill_unit_entry(
        &self,
        obs: &mut [f64],
        slot: usize,
        me: &Unit,
        other: &Unit,
        is_enemy: bool,
        sight: f64,
    ) {
        if !other.alive() {
            return;
        }
        let d2 = dist2(me.x, me.y, other.x, other.y);
        if d2 > sight * sight {
            return;
        }
        let base = slot * 5;
        obs[base] = (other.x - me.x) as f64 / sight;
        obs[base + 1] = (other.y - me.y) as f64 / sight;
        obs[base + 2] = d2.sqrt() / sight;
        obs[base + 3] = other.hp as f64 / other.hp_max as f64;
        obs[base + 4] = if is_enemy { 1.0 } else { 0.0 };
    }

    pub fn observe_all(&self) -> Vec<Observation> {
        (0..self.cfg.n_allies)
            .map(|i| self.observe(i).expect("index in range"))
            .collect()
    }

    /// Ally positions with the dead-agent sentinel applied.
    pub fn agent_positions(&self) -> AgentPositions {
        let sentinel = (
            -4.0 * self.cfg.grid_width as f64,
            -4.0 * self.cfg.grid_height as f64,
        );
        let xy = self
            .allies
            .iter()
            .map(|u| {
                if u.alive() {
                    (u.x as f64, u.y as f64)
                } else {
                    sentinel
                }
            })
            .collect();
        let alive = self.allies.iter().map(Unit::alive).collect();
        AgentPositions { xy, alive }
    }

    /// Availability mask for one agent. Dead agents get no-op only; moves need
    /// an in-bounds unoccupied target cell; attack-k needs enemy k alive and
    /// within attack range.
    pub fn available_actions(&self, agent: usize) -> Result<Vec<bool>> {
        if agent >= self.cfg.n_allies {
            return Err(Error::contract(format!(
                "available_actions: agent index {agent} out of range"
            )));
        }
        let mut mask = vec![false; self.cfg.n_actions()];
        mask[ACTION_NOOP] = true;
        let me = &self.allies[agent];
        if !me.alive() {
            return Ok(mask);
        }
        for (m, (dx, dy)) in MOVE_DELTAS.iter().enumerate() {
            let (nx, ny) = (me.x + dx, me.y + dy);
            if self.in_bounds(nx, ny) && !self.occupied(nx, ny) {
                mask[1 + m] = true;
            }
        }
        let r2 = self.cfg.attack_range * self.cfg.attack_range;
        for (k, e) in self.enemies.iter().enumerate() {
            if e.alive() && dist2(me.x, me.y, e.x, e.y) <= r2 {
                mask[5 + k] = true;
            }
        }
        Ok(mask)
    }

    pub fn available_actions_all(&self) -> Vec<Vec<bool>> {
        (0..self.cfg.n_allies)
            .map(|i| self.available_actions(i).expect("index in range"))
            .collect()
    }

    fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && x < self.cfg.grid_width && y >= 0 && y < self.cfg.grid_height
    }

    fn occupied(&self, x: i64, y: i64) -> bool {
        self.allies
            .iter()
            .chain(self.enemies.iter())
            .any(|u| u.alive() && u.x == x && u.y == y)
    }

    /// Advance one step with a joint ally action. Ally moves and attacks
    /// resolve in agent-index order, then enemies act by script. The reward is
    /// (hp removed + 10 per kill + 200 on win) / reward_scale.
    pub fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        if self.terminated {
            return Err(Error::contract("step called on terminated episode"));
        }
        if joint_action.len() != self.cfg.n_allies {
            return Err(Error::contract(format!(
                "step: expected {} actions, got {}",
                self.cfg.n_allies,
                joint_action.len()
            )));
        }
        for (i, &a) in joint_action.iter().enumerate() {
            if a >= self.cfg.n_actions() {
                return Err(Error::contract(format!(
                    "step: agent {i} action {a} out of range"
                )));
            }
            let avail = self.available_actions(i)?;
            if !avail[a] {
                return Err(Error::contract(format!(
                    "step: agent {i} chose unavailable action {a}"
                )));
            }
        }

        let mut damage_dealt = 0i64;
        let mut kills = 0i64;

        // Ally actions, agent-index order. Simultaneous attacks on one enemy
        // stack; damage is capped at remaining hp so overkill earns nothing.
        for (i, &a) in joint_action.iter().enumerate() {
            if !self.allies[i].alive() || a == ACTION_NOOP {
                continue;
            }
            if (1..=4).contains(&a) {
                let (dx, dy) = MOVE_DELTAS[a - 1];
                let (nx, ny) = (self.allies[i].x + dx, self.allies[i].y + dy);
                if self.in_bounds(nx, ny) && !self.occupied(nx, ny) {
                    self.allies[i].x = nx;
                    self.allies[i].y = ny;
                }
            } else {
                let k = a - 5;
                let e = &mut self.enemies[k];
                let dealt = self.cfg.damage.min(e.hp.max(0));
                e.hp -= self.cfg.damage;
                damage_dealt += dealt;
                if dealt > 0 && e.hp <= 0 {
                    kills += 1;
                }
            }
        }

        // Scripted enemies: focus-fire the nearest ally (ties to the lowest
        // ally index), otherwise step toward it.
        for k in 0..self.enemies.len() {
            if !self.enemies[k].alive() {
                continue;
            }
            let (ex, ey) = (self.enemies[k].x, self.enemies[k].y);
            let nearest = self
                .allies
                .iter()
                .enumerate()
                .filter(|(_, u)| u.alive())
                .min_by(|(ai, au), (bi, bu)| {
                    let da = dist2(ex, ey, au.x, au.y);
                    let db = dist2(ex, ey, bu.x, bu.y);
                    da.partial_cmp(&db).unwrap().then(ai.cmp(bi))
                })
                .map(|(i, _)| i);
            let Some(target) = nearest else { break };
            let t = &self.allies[target];
            let d2t = dist2(ex, ey, t.x, t.y);
            if d2t <= self.cfg.attack_range * self.cfg.attack_range {
                self.allies[target].hp -= self.cfg.damage;
            } else {
                // Greedy move: among stay + unblocked moves, minimize distance
                // to the target; ties go to the lower move id.
                let (tx, ty) = (t.x, t.y);
                let mut best = (d2t, ex, ey);
                for (dx, dy) in MOVE_DELTAS {
                    let (nx, ny) = (ex + dx, ey + dy);
                    if self.in_bounds(nx, ny) && !self.occupied(nx, ny) {
                        let d = dist2(nx, ny, tx, ty);
                        if d < best.0 {
                            best = (d, nx, ny);
                        }
                    }
                }
                self.enemies[k].x = best.1;
                self.enemies[k].y = best.2;
            }
        }

        self.step_count += 1;
        let enemies_down = self.enemies.iter().all(|u| !u.alive());
        let allies_down = self.allies.iter().all(|u| !u.alive());
        self.won = enemies_down;
        self.terminated = enemies_down || allies_down || self.step_count >= self.cfg.max_steps;

        let mut raw = damage_dealt as f64 + 10.0 * kills as f64;
        if self.won {
            raw += 200.0;
        }
        let reward = raw / self.cfg.reward_scale();

        Ok(StepResult {
            observations: self.observe_all(),
            state: self.global_state(),
            positions: self.agent_positions(),
            reward,
            terminated: self.terminated,
            won: self.won,
            available_actions: self.available_actions_all(),
        })
    }

    #[cfg(test)]
    pub(crate) fn ally_mut(&mut self, i: usize) -> &mut Unit {
        &mut self.allies[i]
    }

    #[cfg(test)]
    pub(crate) fn enemy_mut(&mut self, i: usize) -> &mut Unit {
        &mut self.enemies[i]
    }
}
