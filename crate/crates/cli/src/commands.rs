//! Command implementations. Each one is a thin orchestration layer: load
//! artifacts, call into the core crate, write files under the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use metanav::adapt::{
    self, collect_paired_dataset, dr_train, inner_adapt, meta_adapt, meta_train,
    sample_support_query, save_support_archive, sl_adapt, write_meta_curve_csv, TaskSpec,
};
use metanav::config::ExperimentConfig;
use metanav::eval::{
    build_eval_cases, compare_methods, comparison_csv, comparison_table, evaluate_policy,
    latent_trace_csv, EvalCase, EpisodeResult,
};
use metanav::policy::{ActionMode, AgentState, Policy, PolicyArch};
use metanav::ppo::{train_baseline, write_curve_csv, CheckpointPlan};
use metanav::worldsim::{
    generate_world, render, render_target_card, Episode, ObservationConfig, RewardConfig, WorldMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::run::{self, RunContext};
use crate::Command;

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenWorlds { common } => {
            let ctx = run::start("gen-worlds", &common)?;
            cmd_gen_worlds(&ctx)
        }
        Command::TrainBaseline { common, worlds } => {
            let ctx = run::start("train-baseline", &common)?;
            cmd_train_baseline(&ctx, &worlds.worlds)
        }
        Command::TrainDr { common, worlds, target_embedding } => {
            let ctx = run::start("train-dr", &common)?;
            cmd_train_dr(&ctx, &worlds.worlds, target_embedding)
        }
        Command::AdaptSl { common, worlds, baseline } => {
            let ctx = run::start("adapt-sl", &common)?;
            cmd_adapt_sl(&ctx, &worlds.worlds, &baseline)
        }
        Command::RefineSlFewshot { common, worlds, baseline, sl } => {
            let ctx = run::start("refine-sl-fewshot", &common)?;
            cmd_refine_sl_fewshot(&ctx, &worlds.worlds, &baseline, &sl)
        }
        Command::MetaTrain { common, worlds, baseline } => {
            let ctx = run::start("meta-train", &common)?;
            cmd_meta_train(&ctx, &worlds.worlds, &baseline)
        }
        Command::AdaptMeta { common, worlds, baseline, meta_init } => {
            let ctx = run::start("adapt-meta", &common)?;
            cmd_adapt_meta(&ctx, &worlds.worlds, &baseline, &meta_init)
        }
        Command::Eval { common, worlds, ckpt, split, traces } => {
            let ctx = run::start("eval", &common)?;
            cmd_eval(&ctx, &worlds.worlds, &ckpt, &split, traces)
        }
        Command::Compare { common, worlds, methods } => {
            let ctx = run::start("compare", &common)?;
            cmd_compare(&ctx, &worlds.worlds, &methods)
        }
        Command::Ablate { common, worlds, axis, values, baseline, meta_init } => {
            let ctx = run::start("ablate", &common)?;
            cmd_ablate(&ctx, &worlds.worlds, &axis, &values, baseline.as_deref(), meta_init.as_deref())
        }
        Command::RenderRollout { common, worlds, ckpt, split } => {
            let ctx = run::start("render-rollout", &common)?;
            cmd_render_rollout(&ctx, &worlds.worlds, &ckpt, &split)
        }
    }
}

// ---- split construction ------------------------------------------------------

/// Observation function(s) and case-seed salt for a named evaluation split.
fn split_cases(
    cfg: &ExperimentConfig,
    worlds: &[WorldMap],
    split: &str,
) -> Result<Vec<EvalCase>> {
    let nominal = cfg.nominal_obs;
    let family = cfg.task_family;
    let (salt, mut obs_fn): (u64, Box<dyn FnMut(&mut ChaCha8Rng) -> ObservationConfig>) =
        match split {
            "nominal" => (0x4e4f_4d49, Box::new(move |_: &mut ChaCha8Rng| nominal)),
            "training-range" => (
                0x5452_4149,
                Box::new(move |rng: &mut ChaCha8Rng| family.sample_obs(&nominal, rng)),
            ),
            "testing" => {
                let held = family.held_out_obs(&nominal);
                (0x5445_5354, Box::new(move |_: &mut ChaCha8Rng| held))
            }
            other => bail!("unknown split '{other}' (expected nominal, training-range, testing)"),
        };
    Ok(build_eval_cases(
        worlds,
        &mut obs_fn,
        cfg.eval.n_episodes,
        cfg.eval.max_steps,
        cfg.master_seed ^ salt,
    )?)
}

fn save_policy(policy: &Policy, stem: &Path) -> Result<()> {
    policy.save(stem).with_context(|| format!("saving checkpoint {}", stem.display()))
}

// ---- commands ----------------------------------------------------------------

fn cmd_gen_worlds(ctx: &RunContext) -> Result<()> {
    for i in 0..ctx.cfg.n_worlds {
        let world = generate_world(ctx.cfg.world_seed.wrapping_add(i as u64), &ctx.cfg.world)?;
        world.save_json(&ctx.dir.join(format!("world_{i}.json")))?;
    }
    println!("wrote {} worlds to {}", ctx.cfg.n_worlds, ctx.dir.display());
    Ok(())
}

fn cmd_train_baseline(ctx: &RunContext, worlds_dir: &Path) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let plan = CheckpointPlan { stem: ctx.dir.join("baseline"), every_updates: 0 };
    let result = train_baseline(
        &worlds,
        &ctx.cfg.nominal_obs,
        &ctx.cfg.ppo,
        ctx.cfg.master_seed,
        Some(&plan),
    )?;
    save_policy(&result.policy, &ctx.dir.join("baseline"))?;
    write_curve_csv(&ctx.dir.join("curve.csv"), &result.curve)?;
    let last = result.curve.last();
    println!(
        "baseline trained: {} env steps, final success {:.2}, spl {:.2} -> {}",
        result.curve.last().map_or(0, |p| p.env_steps),
        last.map_or(0.0, |p| p.success_rate),
        last.map_or(0.0, |p| p.spl),
        ctx.dir.display()
    );
    Ok(())
}

fn cmd_train_dr(ctx: &RunContext, worlds_dir: &Path, target_embedding: bool) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let stem = if target_embedding { "dr_embed" } else { "dr" };
    let plan = CheckpointPlan { stem: ctx.dir.join(stem), every_updates: 0 };
    let result = dr_train(
        &worlds,
        ctx.cfg.task_family,
        &ctx.cfg.nominal_obs,
        &ctx.cfg.ppo,
        target_embedding,
        ctx.cfg.master_seed,
        Some(&plan),
    )?;
    save_policy(&result.policy, &ctx.dir.join(stem))?;
    write_curve_csv(&ctx.dir.join("curve.csv"), &result.curve)?;
    println!(
        "{stem} trained on {} tasks family={} -> {}",
        ctx.cfg.n_worlds,
        ctx.cfg.task_family.name(),
        ctx.dir.display()
    );
    Ok(())
}

fn cmd_adapt_sl(ctx: &RunContext, worlds_dir: &Path, baseline_stem: &Path) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let baseline = run::load_policy("baseline", baseline_stem)?;
    let cfg = &ctx.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed ^ 0x534c_4144);

    let mut dataset = Vec::new();
    for t in 0..cfg.sl.tasks {
        let obs = cfg.task_family.sample_obs(&cfg.nominal_obs, &mut rng);
        let world = &worlds[t % worlds.len()];
        dataset.extend(collect_paired_dataset(
            world,
            &baseline,
            &cfg.nominal_obs,
            &obs,
            cfg.sl.states_per_task,
            &mut rng,
        )?);
    }

    // A fresh perception net, trained from scratch to match the frozen
    // baseline's latents across the training range.
    let init = Policy::new(baseline.arch().clone(), cfg.master_seed ^ 0x534c_494e)?
        .perception_params();
    let (theta, curve) = sl_adapt(
        &baseline,
        &init,
        &dataset,
        cfg.sl.epochs,
        cfg.sl.lr,
        cfg.sl.batch_size,
        &mut rng,
    )?;
    let adapted = baseline.with_perception(&theta)?;
    save_policy(&adapted, &ctx.dir.join("sl"))?;

    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        let _ = writeln!(csv, "{epoch},{loss:.6}");
    }
    fs::write(ctx.dir.join("sl_loss.csv"), csv)?;
    println!(
        "sl adapted over {} samples, final epoch loss {:.4} -> {}",
        dataset.len(),
        curve.last().copied().unwrap_or(0.0),
        ctx.dir.display()
    );
    Ok(())
}

/// Samples the held-out task's support set (shared helper for the few-shot
/// commands): `shots` target-visible poses near the goal on one world.
fn held_out_support(
    cfg: &ExperimentConfig,
    worlds: &[WorldMap],
    baseline: &Policy,
    shots: usize,
) -> Result<(TaskSpec, usize, adapt::SupportQuery)> {
    let task = TaskSpec {
        family: cfg.task_family,
        obs: cfg.task_family.held_out_obs(&cfg.nominal_obs),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed ^ 0x5355_5050);
    let world_idx = rng.gen_range(0..worlds.len());
    let sq = sample_support_query(
        &worlds[world_idx],
        &task,
        baseline,
        &cfg.nominal_obs,
        shots,
        cfg.meta.query_size,
        cfg.meta.support_radius_m,
        &mut rng,
    )?;
    Ok((task, world_idx, sq))
}

fn cmd_refine_sl_fewshot(
    ctx: &RunContext,
    worlds_dir: &Path,
    baseline_stem: &Path,
    sl_stem: &Path,
) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let baseline = run::load_policy("baseline", baseline_stem)?;
    let sl = run::load_policy("sl", sl_stem)?;
    let cfg = &ctx.cfg;

    let (task, _, sq) = held_out_support(cfg, &worlds, &baseline, cfg.meta.shots)?;
    let theta = adapt::sl_few_shot_refine(
        &baseline,
        &sl.perception_params(),
        &sq.support,
        cfg.meta.inner_steps,
        cfg.meta.inner_lr,
    )?;
    let refined = baseline.with_perception(&theta)?;
    save_policy(&refined, &ctx.dir.join("sl_fewshot"))?;
    save_support_archive(&ctx.dir.join("support"), &task, &sq.support)?;
    println!(
        "sl refined with {} shots on task {} -> {}",
        sq.support.len(),
        task.describe(),
        ctx.dir.display()
    );
    Ok(())
}

fn cmd_meta_train(ctx: &RunContext, worlds_dir: &Path, baseline_stem: &Path) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let baseline = run::load_policy("baseline", baseline_stem)?;
    let cfg = &ctx.cfg;

    let result = meta_train(
        &baseline,
        &worlds,
        cfg.task_family,
        &cfg.nominal_obs,
        &cfg.meta,
        cfg.meta_iterations,
        cfg.master_seed,
    )?;
    let meta_policy = baseline.with_perception(&result.theta)?;
    save_policy(&meta_policy, &ctx.dir.join("meta_init"))?;
    write_meta_curve_csv(&ctx.dir.join("meta_curve.csv"), &result.curve)?;
    let (first, last) = (result.curve.first(), result.curve.last());
    println!(
        "meta-trained {} iterations: post-loss {:.4} -> {:.4} -> {}",
        result.curve.len(),
        first.map_or(0.0, |p| p.post_loss),
        last.map_or(0.0, |p| p.post_loss),
        ctx.dir.display()
    );
    Ok(())
}

fn cmd_adapt_meta(
    ctx: &RunContext,
    worlds_dir: &Path,
    baseline_stem: &Path,
    meta_init_stem: &Path,
) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let baseline = run::load_policy("baseline", baseline_stem)?;
    let meta_init = run::load_policy("meta-init", meta_init_stem)?;
    let cfg = &ctx.cfg;

    let (task, _, sq) = held_out_support(cfg, &worlds, &baseline, cfg.meta.shots)?;
    let outcome = meta_adapt(&baseline, &meta_init.perception_params(), &sq.support, &cfg.meta)?;
    if let Some(warning) = &outcome.warning {
        eprintln!("warning: {warning}");
    }
    let adapted = baseline.with_perception(&outcome.theta)?;
    save_policy(&adapted, &ctx.dir.join("meta_adapted"))?;
    save_support_archive(&ctx.dir.join("support"), &task, &sq.support)?;
    println!(
        "meta-adapted with {} shots on task {} -> {}",
        sq.support.len(),
        task.describe(),
        ctx.dir.display()
    );
    Ok(())
}

fn cmd_eval(
    ctx: &RunContext,
    worlds_dir: &Path,
    ckpt: &Path,
    split: &str,
    traces: usize,
) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let policy = run::load_policy("eval", ckpt)?;
    let cases = split_cases(&ctx.cfg, &worlds, split)?;

    let method = ckpt.file_name().map_or_else(|| "policy".into(), |s| s.to_string_lossy().into_owned());
    let rows = compare_methods(
        &[(method.clone(), policy)],
        &[(split.to_string(), cases.clone())],
        &worlds,
    )?;
    fs::write(ctx.dir.join("metrics.csv"), comparison_csv(&rows))?;

    if traces > 0 {
        let policy = run::load_policy("eval", ckpt)?;
        let (_, results) = evaluate_policy(&policy, &worlds, &cases, ActionMode::Greedy)?;
        for (i, result) in results.iter().take(traces).enumerate() {
            fs::write(
                ctx.dir.join(format!("trace_{i}.csv")),
                latent_trace_csv(result, policy.arch().latent_dim),
            )?;
        }
    }
    let row = &rows[0];
    println!(
        "{method} on {split}: success {:.3}, spl {:.3}, {} episodes -> {}",
        row.success_rate,
        row.spl,
        row.n_episodes,
        ctx.dir.display()
    );
    Ok(())
}

fn cmd_compare(ctx: &RunContext, worlds_dir: &Path, method_args: &[String]) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let mut methods = Vec::new();
    for arg in method_args {
        let Some((name, stem)) = arg.split_once('=') else {
            bail!("--method expects NAME=CHECKPOINT-STEM, got '{arg}'");
        };
        methods.push((name.to_string(), run::load_policy(name, Path::new(stem))?));
    }

    let splits = vec![
        ("training-range".to_string(), split_cases(&ctx.cfg, &worlds, "training-range")?),
        ("testing".to_string(), split_cases(&ctx.cfg, &worlds, "testing")?),
    ];
    let rows = compare_methods(&methods, &splits, &worlds)?;
    fs::write(ctx.dir.join("comparison.csv"), comparison_csv(&rows))?;
    let table = comparison_table(&rows);
    fs::write(ctx.dir.join("comparison.txt"), &table)?;
    println!("{table}");
    println!("-> {}", ctx.dir.display());
    Ok(())
}

fn cmd_ablate(
    ctx: &RunContext,
    worlds_dir: &Path,
    axis: &str,
    values: &str,
    baseline_stem: Option<&Path>,
    meta_init_stem: Option<&Path>,
) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let cfg = &ctx.cfg;
    let parsed: Vec<usize> = values
        .split(',')
        .map(|v| v.trim().parse().with_context(|| format!("bad --values entry '{v}'")))
        .collect::<Result<_>>()?;
    if parsed.is_empty() {
        bail!("--values must name at least one value");
    }

    let cases = split_cases(cfg, &worlds, "testing")?;
    let mut csv = format!("{axis},success_rate\n");
    match axis {
        "shots" => {
            let baseline_stem =
                baseline_stem.ok_or_else(|| anyhow::anyhow!("--axis shots needs --baseline"))?;
            let meta_init_stem =
                meta_init_stem.ok_or_else(|| anyhow::anyhow!("--axis shots needs --meta-init"))?;
            let baseline = run::load_policy("baseline", baseline_stem)?;
            let meta_init = run::load_policy("meta-init", meta_init_stem)?;
            let theta_star = meta_init.perception_params();
            for &shots in &parsed {
                // Identical sampling seed per value: the support streams are
                // shared prefixes, so more shots means strictly more data on
                // the same task instance.
                let (_, _, sq) = held_out_support(cfg, &worlds, &baseline, shots)?;
                let theta = inner_adapt(
                    &baseline,
                    &theta_star,
                    &sq.support,
                    cfg.meta.inner_steps,
                    cfg.meta.inner_lr,
                )?;
                let adapted = baseline.with_perception(&theta)?;
                let (summary, _) = evaluate_policy(&adapted, &worlds, &cases, ActionMode::Greedy)?;
                let _ = writeln!(csv, "{shots},{:.6}", summary.success_rate);
                println!("shots={shots}: success {:.3}", summary.success_rate);
            }
        }
        "latent_dim" => {
            for &dim in &parsed {
                let arch = PolicyArch { latent_dim: dim, ..PolicyArch::default() };
                let mut nominal_sampler = {
                    let nominal = cfg.nominal_obs;
                    move |_: &mut ChaCha8Rng| nominal
                };
                let trained = metanav::ppo::train_policy(
                    arch,
                    &worlds,
                    &cfg.ppo,
                    &mut nominal_sampler,
                    &cfg.nominal_obs,
                    cfg.master_seed,
                    None,
                )?;
                let meta = meta_train(
                    &trained.policy,
                    &worlds,
                    cfg.task_family,
                    &cfg.nominal_obs,
                    &cfg.meta,
                    cfg.meta_iterations,
                    cfg.master_seed,
                )?;
                let (_, _, sq) = held_out_support(cfg, &worlds, &trained.policy, cfg.meta.shots)?;
                let theta = inner_adapt(
                    &trained.policy,
                    &meta.theta,
                    &sq.support,
                    cfg.meta.inner_steps,
                    cfg.meta.inner_lr,
                )?;
                let adapted = trained.policy.with_perception(&theta)?;
                let (summary, _) = evaluate_policy(&adapted, &worlds, &cases, ActionMode::Greedy)?;
                let _ = writeln!(csv, "{dim},{:.6}", summary.success_rate);
                println!("latent_dim={dim}: success {:.3}", summary.success_rate);
            }
        }
        other => bail!("unknown --axis '{other}' (expected shots or latent_dim)"),
    }
    fs::write(ctx.dir.join("ablation.csv"), csv)?;
    println!("-> {}", ctx.dir.display());
    Ok(())
}

fn cmd_render_rollout(
    ctx: &RunContext,
    worlds_dir: &Path,
    ckpt: &Path,
    split: &str,
) -> Result<()> {
    let worlds = run::load_worlds(worlds_dir)?;
    let policy = run::load_policy("rollout", ckpt)?;
    let cfg = &ctx.cfg;
    let obs = match split {
        "nominal" => cfg.nominal_obs,
        "testing" => cfg.task_family.held_out_obs(&cfg.nominal_obs),
        other => bail!("unknown split '{other}' (expected nominal or testing)"),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed ^ 0x524f_4c4c);
    let world_idx = rng.gen_range(0..worlds.len());
    let world = &worlds[world_idx];
    let spec =
        metanav::worldsim::sample_episode(world, &mut rng, cfg.eval.max_steps)?;

    // Greedy rollout, dumping the frame the agent saw at every step.
    let embedding: Option<Vec<f32>> = policy
        .arch()
        .target_embedding
        .then(|| policy.perceive(&render_target_card(&obs)))
        .transpose()?;
    let shortest =
        world.geodesic_distance(spec.start.x, spec.start.y, spec.target.x, spec.target.y)?;
    let mut episode = Episode::new(world, spec, RewardConfig::default());
    let mut state = AgentState::zeroed(policy.arch());
    let mut result = EpisodeResult {
        success: false,
        path_length: 0.0,
        shortest_path: shortest,
        steps: 0,
        latent_trace: Vec::new(),
        d_goals: Vec::new(),
        actions: Vec::new(),
        final_d_goal: 0.0,
        total_reward: 0.0,
    };
    let mut step_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    while !episode.is_done() {
        let frame = render(world, episode.pose(), &spec.target, &obs);
        frame.write_ppm(&ctx.dir.join(format!("frame_{:03}.ppm", result.steps)))?;
        let act = policy.act(
            &frame,
            embedding.as_deref(),
            &state,
            &mut step_rng,
            ActionMode::Greedy,
        )?;
        let outcome = episode.step(act.action);
        result.latent_trace.push(act.latent);
        result.actions.push(act.action);
        result.d_goals.push(outcome.d_goal);
        result.total_reward += outcome.reward;
        result.final_d_goal = outcome.d_goal;
        result.success = outcome.success;
        result.steps += 1;
        state = act.state;
    }
    result.path_length = episode.path_length();
    fs::write(
        ctx.dir.join("trace.csv"),
        latent_trace_csv(&result, policy.arch().latent_dim),
    )?;
    println!(
        "rollout on world {world_idx} ({split}): {} steps, success {} -> {}",
        result.steps,
        result.success,
        ctx.dir.display()
    );
    Ok(())
}
