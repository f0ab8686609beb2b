use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{TargetSpec, WorldError, WorldMap};

/// Agent body radius in meters; collision keeps walls at least this far away.
pub const AGENT_RADIUS: f64 = 0.1;
/// MoveForward translation in meters.
pub const MOVE_STEP: f64 = 0.25;
/// TurnLeft/TurnRight rotation in radians (30°).
pub const TURN_ANGLE: f64 = std::f64::consts::PI / 6.0;

/// The discrete action space. The index order is the policy-logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::MoveForward, Action::TurnLeft, Action::TurnRight, Action::Stop];

    pub fn index(self) -> usize {
        match self {
            Action::MoveForward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveForward => "MoveForward",
            Action::TurnLeft => "TurnLeft",
            Action::TurnRight => "TurnRight",
            Action::Stop => "Stop",
        }
    }
}

/// Agent position and heading. `theta` is kept normalized to [0, 2π);
/// theta = 0 faces +x and TurnLeft increases theta (counterclockwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: normalize_angle(theta) }
    }

    pub fn forward(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    /// Screen-right direction (90° clockwise from forward).
    pub fn right(&self) -> (f64, f64) {
        (self.theta.sin(), -self.theta.cos())
    }
}

pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut t = theta % two_pi;
    if t < 0.0 {
        t += two_pi;
    }
    // the remainder can land exactly on 2π after the add
    if t >= two_pi {
        t = 0.0;
    }
    t
}

/// Terminal bookkeeping for one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub pose: Pose,
    pub collided: bool,
    /// Euclidean distance to the target center.
    pub d_goal: f64,
    /// Euclidean distance to the episode start position.
    pub d_start: f64,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Reward shaping constants. Defaults follow the dense goal-seeking reward:
/// +10 on a successful Stop, −0.1 per step, +1·(goal progress),
/// −0.1·(start-distance progress).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_success: f64,
    pub r_live: f64,
    pub w1: f64,
    pub w2: f64,
    pub success_radius: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { r_success: 10.0, r_live: -0.1, w1: 1.0, w2: 0.1, success_radius: 0.5 }
    }
}

/// One sampled navigation problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub start: Pose,
    pub target: TargetSpec,
    pub max_steps: usize,
    pub seed: u64,
}

/// Kinematic transition: returns the next pose and whether a MoveForward was
/// clipped by a wall. Turns and Stop never collide.
pub fn step(world: &WorldMap, pose: Pose, action: Action) -> (Pose, bool) {
    match action {
        Action::TurnLeft => (Pose::new(pose.x, pose.y, pose.theta + TURN_ANGLE), false),
        Action::TurnRight => (Pose::new(pose.x, pose.y, pose.theta - TURN_ANGLE), false),
        Action::Stop => (pose, false),
        Action::MoveForward => {
            let (dx, dy) = pose.forward();
            let free_dist = max_free_advance(world, pose.x, pose.y, dx, dy, MOVE_STEP);
            let collided = free_dist < MOVE_STEP;
            (
                Pose::new(pose.x + dx * free_dist, pose.y + dy * free_dist, pose.theta),
                collided,
            )
        }
    }
}

/// Largest advance `t ∈ [0, limit]` along the unit ray `(dx, dy)` that keeps
/// the agent disc clear of every wall: the first entering contact with any
/// wall capsule (segment dilated by [`AGENT_RADIUS`]), or `limit`.
fn max_free_advance(world: &WorldMap, x: f64, y: f64, dx: f64, dy: f64, limit: f64) -> f64 {
    let mut t_max: f64 = limit;
    for w in &world.walls {
        if let Some(t) = ray_capsule_entry(x, y, dx, dy, w.ax, w.ay, w.bx, w.by, AGENT_RADIUS) {
            t_max = t_max.min(t);
        }
    }
    t_max.max(0.0)
}

/// First `t ≥ 0` at which the point `p + t·d` (unit `d`) enters the capsule
/// around segment AB with radius `r`. Tangent grazes (no penetration) return
/// `None`. Entry exactly at the start (already touching, moving inward)
/// returns `0`.
#[allow(clippy::too_many_arguments)]
fn ray_capsule_entry(
    px: f64,
    py: f64,
    dx: f64,
    dy: f64,
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    r: f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t >= 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };

    let (ux, uy) = (bx - ax, by - ay);
    let len2 = ux * ux + uy * uy;

    // Already touching (a clipped stop parks the agent exactly on the
    // boundary, where rounding can land a hair inside) and still moving
    // toward the segment: contact is immediate. Without this the entering
    // crossing sits just behind t = 0 and the mover would tunnel through.
    {
        let s = if len2 == 0.0 {
            0.0
        } else {
            (((px - ax) * ux + (py - ay) * uy) / len2).clamp(0.0, 1.0)
        };
        let (qx, qy) = (ax + s * ux, ay + s * uy); // closest point on AB
        let (fx, fy) = (px - qx, py - qy);
        let dist0 = fx.hypot(fy);
        if dist0 <= r + 1e-9 && fx * dx + fy * dy < 0.0 {
            return Some(0.0);
        }
    }

    // Side walls of the capsule: distance to the *line* AB equals r, valid
    // only where the projection falls inside the segment.
    if len2 > 0.0 {
        let len = len2.sqrt();
        let (nx, ny) = (-uy / len, ux / len); // unit normal
        let c0 = (px - ax) * nx + (py - ay) * ny; // signed offset at t = 0
        let c1 = dx * nx + dy * ny; // offset rate
        if c1.abs() > 1e-12 {
            // entering the slab means the signed offset moves toward zero
            let boundary = if c0 >= 0.0 { r } else { -r };
            let t = (boundary - c0) / c1;
            // require actual approach: offset magnitude decreasing at t
            let approaching = c0 * c1 < 0.0;
            if approaching && t.is_finite() {
                // projection along the segment at contact time
                let cx = px + dx * t - ax;
                let cy = py + dy * t - ay;
                let s = (cx * ux + cy * uy) / len2;
                if (0.0..=1.0).contains(&s) {
                    consider(t);
                }
            }
        }
    }

    // End caps: circles of radius r at A and B.
    for (ex, ey) in [(ax, ay), (bx, by)] {
        let fx = px - ex;
        let fy = py - ey;
        let b = fx * dx + fy * dy; // half of the quadratic's b (a = |d|² = 1)
        let c = fx * fx + fy * fy - r * r;
        let disc = b * b - c;
        if disc > 1e-15 {
            let t_enter = -b - disc.sqrt();
            // only count caps we actually move toward
            if b < 0.0 {
                consider(t_enter);
            }
        }
    }

    best.filter(|&t| t.is_finite())
}

/// Dense goal-seeking reward for the transition `prev → curr` under `action`.
///
/// A Stop inside the success radius earns the terminal bonus alone; every
/// other transition pays the living cost plus the progress terms
/// `w1·(d_goal decrease) − w2·(d_start decrease)`.
pub fn reward(prev: &StepOutcome, curr: &StepOutcome, action: Action, cfg: &RewardConfig) -> f64 {
    if action == Action::Stop && curr.d_goal < cfg.success_radius {
        cfg.r_success
    } else {
        cfg.r_live + cfg.w1 * (prev.d_goal - curr.d_goal) - cfg.w2 * (prev.d_start - curr.d_start)
    }
}

/// Running episode state: tracks the pose, distances, realized path length,
/// and termination. Termination happens on a successful Stop or on the step
/// budget running out (a timeout is `done && !success`, which value
/// bootstrapping treats as truncation, not failure of the state itself).
#[derive(Debug, Clone)]
pub struct Episode<'w> {
    world: &'w WorldMap,
    pub spec: EpisodeSpec,
    cfg: RewardConfig,
    pose: Pose,
    steps: usize,
    prev: StepOutcome,
    path_length: f64,
    done: bool,
}

impl<'w> Episode<'w> {
    pub fn new(world: &'w WorldMap, spec: EpisodeSpec, cfg: RewardConfig) -> Self {
        let d_goal = (spec.start.x - spec.target.x).hypot(spec.start.y - spec.target.y);
        let prev = StepOutcome {
            pose: spec.start,
            collided: false,
            d_goal,
            d_start: 0.0,
            reward: 0.0,
            done: false,
            success: false,
        };
        Self { world, spec, cfg, pose: spec.start, steps: 0, prev, path_length: 0.0, done: false }
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn world(&self) -> &'w WorldMap {
        self.world
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Sum of realized translations (for SPL's path length p).
    pub fn path_length(&self) -> f64 {
        self.path_length
    }

    pub fn last(&self) -> &StepOutcome {
        &self.prev
    }

    /// Apply one action. Panics if the episode already ended — callers reset
    /// or swap episodes on `done`.
    pub fn step(&mut self, action: Action) -> StepOutcome {
        assert!(!self.done, "step() on a finished episode");
        let (next_pose, collided) = step(self.world, self.pose, action);
        let moved = (next_pose.x - self.pose.x).hypot(next_pose.y - self.pose.y);
        self.path_length += moved;

        let d_goal = (next_pose.x - self.spec.target.x).hypot(next_pose.y - self.spec.target.y);
        let d_start = (next_pose.x - self.spec.start.x).hypot(next_pose.y - self.spec.start.y);
        let mut curr = StepOutcome {
            pose: next_pose,
            collided,
            d_goal,
            d_start,
            reward: 0.0,
            done: false,
            success: false,
        };
        curr.reward = reward(&self.prev, &curr, action, &self.cfg);
        curr.success = action == Action::Stop && d_goal < self.cfg.success_radius;

        self.steps += 1;
        curr.done = curr.success || self.steps >= self.spec.max_steps;

        self.pose = next_pose;
        self.done = curr.done;
        self.prev = curr;
        curr
    }
}

/// Sample a non-degenerate episode: start pose and target uniformly over free
/// space, re-drawn until the geodesic start→target distance is at least 1 m.
pub fn sample_episode(
    world: &WorldMap,
    rng: &mut impl Rng,
    max_steps: usize,
) -> Result<EpisodeSpec, WorldError> {
    const MAX_TRIES: usize = 10_000;
    let seed = rng.gen::<u64>();
    for _ in 0..MAX_TRIES {
        let (sx, sy) = sample_free_point(world, rng)?;
        let (tx, ty) = sample_free_point(world, rng)?;
        let d = world.geodesic_distance(sx, sy, tx, ty)?;
        if !d.is_finite() || d < 1.0 {
            continue;
        }
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        return Ok(EpisodeSpec {
            start: Pose::new(sx, sy, theta),
            target: TargetSpec::new(tx, ty, [0, 0, 0]),
            max_steps,
            seed,
        });
    }
    Err(WorldError::GenerationFailed { seed: world.seed, attempts: MAX_TRIES as u32 })
}

fn sample_free_point(world: &WorldMap, rng: &mut impl Rng) -> Result<(f64, f64), WorldError> {
    const MAX_TRIES: usize = 10_000;
    for _ in 0..MAX_TRIES {
        let x = world.bounds.min_x + rng.gen::<f64>() * world.bounds.width();
        let y = world.bounds.min_y + rng.gen::<f64>() * world.bounds.height();
        if world.is_free(x, y) {
            return Ok((x, y));
        }
    }
    Err(WorldError::GenerationFailed { seed: world.seed, attempts: MAX_TRIES as u32 })
}
