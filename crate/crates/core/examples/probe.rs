//! Throwaway probe: one-step bandit through the full PPO loop. The agent
//! starts 0.3 m from the ball; Stop yields +10, anything else ~-0.1. P(Stop)
//! must approach 1 quickly if the collect->loss->grad->adam loop is sound.

use metanav::policy::{Policy, PolicyArch};
use metanav::ppo::{ppo_update, PPOConfig, RolloutCollector};
use metanav::tensor::AdamState;
use metanav::worldsim::{
    EpisodeSpec, ObservationConfig, Pose, Rect, TargetSpec, WallSegment, WorldMap,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corridor() -> WorldMap {
    let bounds = Rect { min_x: 0.0, min_y: 0.0, max_x: 6.0, max_y: 1.5 };
    let gray = [120, 120, 120];
    let walls = vec![
        WallSegment::new(0.0, 0.0, 6.0, 0.0, gray),
        WallSegment::new(6.0, 0.0, 6.0, 1.5, gray),
        WallSegment::new(6.0, 1.5, 0.0, 1.5, gray),
        WallSegment::new(0.0, 1.5, 0.0, 0.0, gray),
    ];
    WorldMap::new(bounds, walls, [80, 80, 80], [200, 200, 200], 0).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let updates: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let horizon: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let worlds = vec![corridor()];
    let cfg = PPOConfig {
        rollout_length: 32,
        num_envs: 8,
        max_steps_per_episode: horizon,
        ..PPOConfig::default()
    };
    let nominal = ObservationConfig::default();

    let mut policy = Policy::new(PolicyArch::default(), 7).unwrap();
    // One fixed episode: start 0.3 m short of the ball, facing it.
    let spec = EpisodeSpec {
        start: Pose::new(2.0, 0.75, 0.0),
        target: TargetSpec::new(2.0 + 0.3 + 0.25 * (horizon as f64 - 1.0), 0.75, [255, 0, 0]),
        max_steps: horizon,
        seed: 99,
    };
    let pool = vec![(0usize, spec)];
    let mut sampler = |_: &mut ChaCha8Rng| nominal.clone();
    let mut collector = RolloutCollector::new(&policy, &worlds, pool, &cfg, &mut sampler, 7).unwrap();
    let mut adam = AdamState::new(policy.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(7 ^ 0x5348_5546);

    let mut recent: Vec<bool> = Vec::new();
    for update in 0..updates {
        let buffer = collector.collect(&policy, &cfg, &mut sampler).unwrap();
        recent.extend(buffer.episode_successes.iter().copied());
        let stats = ppo_update(&mut policy, &mut adam, &buffer, &cfg, update, &mut shuffle_rng).unwrap();
        if update % 5 == 4 {
            let tail: Vec<_> = recent.iter().rev().take(200).collect();
            let succ = tail.iter().filter(|&&&s| s).count() as f64 / tail.len() as f64;
            println!(
                "upd {update:>3}  succ200 {succ:>5.2}  ent {:>6.4}  pg {:>8.4}  vloss {:>7.3}  clip% {:>5.3}",
                stats.entropy, stats.policy_loss, stats.value_loss, stats.clip_fraction
            );
        }
    }
}
