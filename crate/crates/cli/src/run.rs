//! Run bookkeeping: config resolution, run directories, artifact loading.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use metanav::config::ExperimentConfig;
use metanav::policy::Policy;
use metanav::worldsim::WorldMap;

use crate::Common;

/// A resolved run: the effective config and the directory its outputs go to.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

/// Loads the config, applies flag overrides, creates
/// `<out>/<command>/<run-id>/`, and writes the resolved config there.
pub fn start(command: &str, common: &Common) -> Result<RunContext> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }

    let run_id = match &common.run_id {
        Some(id) => id.clone(),
        None => {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
            format!("{:016x}-{ts}", cfg.fingerprint()?)
        }
    };
    let dir = cfg.out_dir.join(command).join(run_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("resolved.toml"))?;
    Ok(RunContext { cfg, dir })
}

/// Loads `world_0.json .. world_{n-1}.json` from a gen-worlds run directory.
pub fn load_worlds(dir: &Path) -> Result<Vec<WorldMap>> {
    let mut worlds = Vec::new();
    loop {
        let path = dir.join(format!("world_{}.json", worlds.len()));
        if !path.exists() {
            break;
        }
        worlds.push(
            WorldMap::load_json(&path)
                .with_context(|| format!("loading world {}", path.display()))?,
        );
    }
    if worlds.is_empty() {
        bail!("no world_<i>.json files in {} (run gen-worlds first)", dir.display());
    }
    Ok(worlds)
}

/// Loads a policy checkpoint by stem, naming the artifact on failure.
pub fn load_policy(what: &str, stem: &Path) -> Result<Policy> {
    Policy::load(stem).with_context(|| format!("loading {what} checkpoint {}", stem.display()))
}
