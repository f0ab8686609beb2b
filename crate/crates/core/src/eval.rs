//! Episode evaluation: greedy rollouts with latent-trace capture, the
//! success-weighted-by-path-length (SPL) metric, and paired-seed comparison
//! tables across adaptation methods.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::policy::{ActionMode, AgentState, Policy, PolicyError};
use crate::worldsim::{
    render, render_target_card, sample_episode, Action, Episode, EpisodeSpec, ObservationConfig,
    RewardConfig, WorldError, WorldMap,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty result set")]
    Empty,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("episode case references world {got}, but only {have} worlds were supplied")]
    BadWorldIndex { got: usize, have: usize },
}

/// Everything one evaluated episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub success: bool,
    /// Realized path length p (meters; collisions shorten steps).
    pub path_length: f64,
    /// Geodesic shortest path l from start to target (meters).
    pub shortest_path: f64,
    pub steps: usize,
    /// Frame latent per step, recorded before the action was taken.
    pub latent_trace: Vec<Vec<f32>>,
    /// Euclidean distance to the goal after each step.
    pub d_goals: Vec<f64>,
    pub actions: Vec<Action>,
    pub final_d_goal: f64,
    pub total_reward: f64,
}

impl EpisodeResult {
    /// Per-episode SPL term S·l/max(p, l).
    pub fn spl_term(&self) -> f64 {
        if !self.success {
            return 0.0;
        }
        self.shortest_path / self.path_length.max(self.shortest_path)
    }
}

/// One evaluation problem: a world, an episode inside it, and the observation
/// function the agent sees it through. Comparison runs share these across
/// methods so the comparison is paired.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub world: usize,
    pub spec: EpisodeSpec,
    pub obs: ObservationConfig,
}

/// Aggregate metrics over one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub spl: f64,
    pub mean_return: f64,
    pub mean_steps: f64,
    pub n_episodes: usize,
}

/// One row of a Table-I-style comparison.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub method: String,
    pub split: String,
    pub spl: f64,
    pub success_rate: f64,
    pub n_episodes: usize,
    pub seed_set_hash: u64,
}

/// Rolls one episode to termination (successful Stop or step budget).
///
/// The latent trace records the perception output for every frame the agent
/// saw; for target-embedding policies the per-episode card latent is computed
/// once from the episode's own observation function.
pub fn run_episode(
    policy: &Policy,
    world: &WorldMap,
    spec: EpisodeSpec,
    obs: &ObservationConfig,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult, EvalError> {
    let reward_cfg = RewardConfig::default();
    let shortest =
        world.geodesic_distance(spec.start.x, spec.start.y, spec.target.x, spec.target.y)?;
    let embedding: Option<Vec<f32>> = if policy.arch().target_embedding {
        Some(policy.perceive(&render_target_card(obs))?)
    } else {
        None
    };

    let mut episode = Episode::new(world, spec, reward_cfg);
    let mut state = AgentState::zeroed(policy.arch());
    let mut result = EpisodeResult {
        success: false,
        path_length: 0.0,
        shortest_path: shortest,
        steps: 0,
        latent_trace: Vec::new(),
        d_goals: Vec::new(),
        actions: Vec::new(),
        final_d_goal: episode.last().d_goal,
        total_reward: 0.0,
    };

    while !episode.is_done() {
        let frame = render(world, episode.pose(), &spec.target, obs);
        let act = policy.act(&frame, embedding.as_deref(), &state, rng, mode)?;
        let outcome = episode.step(act.action);
        state = act.state;
        result.latent_trace.push(act.latent);
        result.actions.push(act.action);
        result.d_goals.push(outcome.d_goal);
        result.total_reward += outcome.reward;
    }
    result.steps = episode.steps_taken();
    result.path_length = episode.path_length();
    result.success = episode.last().success;
    result.final_d_goal = episode.last().d_goal;
    Ok(result)
}

/// Mean SPL: (1/N)·Σ S_i·l_i/max(p_i, l_i).
pub fn spl(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(results.iter().map(EpisodeResult::spl_term).sum::<f64>() / results.len() as f64)
}

/// Evaluates one policy over a shared case set (greedy, seeded per case so
/// repeat runs are identical).
pub fn evaluate_policy(
    policy: &Policy,
    worlds: &[WorldMap],
    cases: &[EvalCase],
    mode: ActionMode,
) -> Result<(EvalSummary, Vec<EpisodeResult>), EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut results = Vec::with_capacity(cases.len());
    for case in cases {
        let world = worlds
            .get(case.world)
            .ok_or(EvalError::BadWorldIndex { got: case.world, have: worlds.len() })?;
        let mut rng = ChaCha8Rng::seed_from_u64(case.spec.seed);
        results.push(run_episode(policy, world, case.spec, &case.obs, mode, &mut rng)?);
    }
    let n = results.len();
    let summary = EvalSummary {
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n as f64,
        spl: spl(&results)?,
        mean_return: results.iter().map(|r| r.total_reward).sum::<f64>() / n as f64,
        mean_steps: results.iter().map(|r| r.steps as f64).sum::<f64>() / n as f64,
        n_episodes: n,
    };
    Ok((summary, results))
}

/// Builds a shared evaluation set: episodes sampled round-robin over worlds
/// from a dedicated seed stream. `obs_fn` draws each case's observation
/// function (a constant closure gives a fixed-config split; a task-family
/// sampler gives a training-range split). Case lists built with the same
/// arguments are identical, which is what makes comparisons paired.
pub fn build_eval_cases(
    worlds: &[WorldMap],
    obs_fn: &mut dyn FnMut(&mut ChaCha8Rng) -> ObservationConfig,
    n_episodes: usize,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<EvalCase>, EvalError> {
    if worlds.is_empty() || n_episodes == 0 {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4556_414c_u64);
    let mut cases = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let world = i % worlds.len();
        let spec = sample_episode(&worlds[world], &mut rng, max_steps)?;
        let obs = obs_fn(&mut rng);
        cases.push(EvalCase { world, spec, obs });
    }
    Ok(cases)
}

/// Stable FNV-1a hash of the case set's identity (world index, episode seed,
/// start/target bits), so reports carry a fingerprint of what was evaluated.
pub fn seed_set_hash(cases: &[EvalCase]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for byte in x.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for case in cases {
        eat(case.world as u64);
        eat(case.spec.seed);
        eat(case.spec.start.x.to_bits());
        eat(case.spec.start.y.to_bits());
        eat(case.spec.start.theta.to_bits());
        eat(case.spec.target.x.to_bits());
        eat(case.spec.target.y.to_bits());
    }
    h
}

/// Evaluates every (name, policy) pair on every named split, greedily, with
/// the case sets shared across methods.
pub fn compare_methods(
    methods: &[(String, Policy)],
    splits: &[(String, Vec<EvalCase>)],
    worlds: &[WorldMap],
) -> Result<Vec<MetricsReport>, EvalError> {
    let mut rows = Vec::new();
    for (method, policy) in methods {
        for (split, cases) in splits {
            let (summary, _) = evaluate_policy(policy, worlds, cases, ActionMode::Greedy)?;
            rows.push(MetricsReport {
                method: method.clone(),
                split: split.clone(),
                spl: summary.spl,
                success_rate: summary.success_rate,
                n_episodes: summary.n_episodes,
                seed_set_hash: seed_set_hash(cases),
            });
        }
    }
    Ok(rows)
}

/// CSV with columns (method, split, spl, success_rate, n_episodes,
/// seed_set_hash).
pub fn comparison_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from("method,split,spl,success_rate,n_episodes,seed_set_hash\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{:016x}",
            r.method, r.split, r.spl, r.success_rate, r.n_episodes, r.seed_set_hash
        );
    }
    out
}

/// Fixed-width text table of the comparison rows.
pub fn comparison_table(rows: &[MetricsReport]) -> String {
    let method_w = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max("method".len());
    let split_w = rows.iter().map(|r| r.split.len()).max().unwrap_or(5).max("split".len());
    let mut out = format!(
        "{:<method_w$}  {:<split_w$}  {:>7}  {:>12}  {:>9}\n",
        "method", "split", "spl", "success_rate", "episodes"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<method_w$}  {:<split_w$}  {:>7.3}  {:>12.3}  {:>9}",
            r.method, r.split, r.spl, r.success_rate, r.n_episodes
        );
    }
    out
}

/// Writes the per-step latent trace: (step, latent_0.., d_goal, action).
pub fn latent_trace_csv(result: &EpisodeResult, latent_dim: usize) -> String {
    let mut out = String::from("step");
    for d in 0..latent_dim {
        let _ = write!(out, ",latent_{d}");
    }
    out.push_str(",d_goal,action\n");
    for step in 0..result.steps {
        let _ = write!(out, "{step}");
        for d in 0..latent_dim {
            let _ = write!(out, ",{:.6}", result.latent_trace[step][d]);
        }
        let _ = writeln!(out, ",{:.6},{}", result.d_goals[step], result.actions[step].name());
    }
    out
}

pub fn latent_trace_export(
    result: &EpisodeResult,
    latent_dim: usize,
    path: &Path,
) -> Result<(), EvalError> {
    fs::write(path, latent_trace_csv(result, latent_dim))?;
    Ok(())
}
