//! Experiment orchestration: single-seed runs that write complete archives,
//! multi-seed sweeps with resume, greedy checkpoint evaluation, and the
//! plot-data entry point.
//!
//! An archive is one directory per (experiment, seed):
//!
//! ```text
//! <out>/<name>/seed_<s>/
//!     metrics.csv            one row per iteration, flushed as it goes
//!     checkpoint.ckpt        final training state
//!     checkpoint_<i>.ckpt    periodic states when checkpoint_every > 0
//!     trajectories.jsonl     when dump_trajectories is on
//!     manifest.json          written last; its presence marks completion
//! ```
//!
//! The manifest stores a SHA-256 of the configuration file's bytes. Resume
//! compares hashes before touching anything: a completed archive with a
//! matching hash is skipped, a mismatched hash aborts the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::env::World;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, parse_metrics_csv, read_manifest, sha256_hex, write_manifest, Aggregate, Manifest,
    MetricsWriter, TrajectoryWriter, SMOOTHING_EPISODES,
};
use crate::trainer::{EvalReport, Trainer};

/// Environment variable naming the default output root (fallback: `out`).
pub const OUT_ROOT_ENV: &str = "E2C_OUT_ROOT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

/// Archive directory for one seed of one experiment.
pub fn archive_dir(out_root: &Path, name: &str, seed: u64) -> PathBuf {
    out_root.join(name).join(format!("seed_{seed}"))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    /// True when resume found a completed matching archive and did nothing.
    pub skipped: bool,
    pub iterations: u64,
    pub wall_time_s: f64,
}

/// Train one seed to completion, writing a full archive.
///
/// `raw_config` is the configuration file's exact text; its hash goes into
/// the manifest and is what resume compares. With `resume`, a completed
/// archive whose hash matches is skipped; a hash mismatch always aborts,
/// resume or not, because overwriting an archive produced by a different
/// configuration destroys provenance.
pub fn run_single(
    cfg: &RunConfig,
    raw_config: &str,
    seed: u64,
    out_root: &Path,
    iterations: u64,
    resume: bool,
) -> Result<RunOutcome> {
    let dir = archive_dir(out_root, &cfg.name, seed);
    let hash = sha256_hex(raw_config.as_bytes());
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let old = read_manifest(&manifest_path)?;
        if old.config_sha256 != hash {
            return Err(Error::config(format!(
                "archive {} was produced by a different configuration \
                 (manifest hash {}, current config {}); refusing to overwrite — \
                 point --out at a fresh directory",
                dir.display(),
                old.config_sha256,
                hash
            )));
        }
        if resume && old.iterations >= iterations {
            return Ok(RunOutcome {
                seed,
                dir,
                skipped: true,
                iterations: old.iterations,
                wall_time_s: old.wall_time_s,
            });
        }
    }
    std::fs::create_dir_all(&dir)?;

    let env = cfg.build_env::<f64>()?;
    let channels = env.cost_channels();
    let settings = cfg.trainer_settings(seed)?;
    let n_constraints = settings.constraints.len();
    let mut trainer = Trainer::new(env, settings)?;

    let mut writer = MetricsWriter::create(&dir.join("metrics.csv"), &channels, n_constraints)?;
    let mut dump = if cfg.dump_trajectories {
        Some(TrajectoryWriter::create(&dir.join("trajectories.jsonl"))?)
    } else {
        None
    };

    let start = Instant::now();
    let mut checkpoints = Vec::new();
    for it in 0..iterations {
        if let Some(dump) = dump.as_mut() {
            let (row, batch) = trainer.run_iteration_with_batch()?;
            for (e, ep) in batch.episodes.iter().enumerate() {
                dump.append_episode(it, e, &channels, ep)?;
            }
            writer.append(&row)?;
        } else {
            let row = trainer.run_iteration()?;
            writer.append(&row)?;
        }
        let done = it + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != iterations {
            let file = format!("checkpoint_{done:06}.ckpt");
            trainer.save_checkpoint(&dir.join(&file))?;
            checkpoints.push(file);
        }
    }
    trainer.save_checkpoint(&dir.join("checkpoint.ckpt"))?;
    checkpoints.push("checkpoint.ckpt".to_string());

    let wall_time_s = start.elapsed().as_secs_f64();
    write_manifest(
        &manifest_path,
        &Manifest {
            name: cfg.name.clone(),
            config_sha256: hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            iterations,
            wall_time_s,
            checkpoints,
            csv: "metrics.csv".to_string(),
        },
    )?;
    Ok(RunOutcome { seed, dir, skipped: false, iterations, wall_time_s })
}

#[derive(Debug)]
pub struct SweepReport {
    pub outcomes: Vec<RunOutcome>,
    /// Seeds that failed, with their error messages; the sweep keeps going.
    pub failures: Vec<(u64, String)>,
}

impl SweepReport {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Run every configured seed. Seeds run sequentially — each training run
/// already parallelizes episode collection internally, so stacking a second
/// layer of parallelism would oversubscribe the cores without changing any
/// result (archives are independent and runs are deterministic either way).
/// A failing seed is recorded and the remaining seeds still run.
pub fn sweep(
    cfg: &RunConfig,
    raw_config: &str,
    out_root: &Path,
    iterations: u64,
    resume: bool,
) -> Result<SweepReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("sweep requires at least one seed"));
    }
    let mut report = SweepReport { outcomes: Vec::new(), failures: Vec::new() };
    for &seed in &cfg.seeds {
        match run_single(cfg, raw_config, seed, out_root, iterations, resume) {
            Ok(outcome) => report.outcomes.push(outcome),
            Err(e) => report.failures.push((seed, e.to_string())),
        }
    }
    Ok(report)
}

/// Load a checkpoint into a freshly built trainer for this configuration and
/// replay it greedily.
pub fn eval_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Path,
    episodes: usize,
    eval_seed: u64,
) -> Result<EvalReport> {
    if !checkpoint.exists() {
        return Err(Error::config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let env = cfg.build_env::<f64>()?;
    let seed = *cfg.seeds.first().ok_or_else(|| Error::config("config lists no seeds"))?;
    let mut trainer = Trainer::new(env, cfg.trainer_settings(seed)?)?;
    trainer.load_checkpoint(checkpoint)?;
    trainer.evaluate(episodes, eval_seed)
}

/// Aggregate every completed seed archive under `<out>/<name>` into smoothed
/// mean ± standard-error curves. Returns the seeds found (ascending) and the
/// aggregate.
pub fn plot_data(out_root: &Path, name: &str) -> Result<(Vec<u64>, Aggregate)> {
    let exp_dir = out_root.join(name);
    let mut seeds = Vec::new();
    let entries = std::fs::read_dir(&exp_dir)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", exp_dir.display())))?;
    for entry in entries {
        let entry = entry?;
        let file_name = entry.file_name();
        let Some(rest) = file_name.to_string_lossy().strip_prefix("seed_").map(String::from)
        else {
            continue;
        };
        let Ok(seed) = rest.parse::<u64>() else { continue };
        // Only completed archives participate; a partial run has no manifest.
        if entry.path().join("manifest.json").exists() {
            seeds.push(seed);
        }
    }
    if seeds.is_empty() {
        return Err(Error::config(format!(
            "no completed seed archives under {}",
            exp_dir.display()
        )));
    }
    seeds.sort_unstable();
    let mut series = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let csv_path = archive_dir(out_root, name, seed).join("metrics.csv");
        let text = std::fs::read_to_string(&csv_path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", csv_path.display())))?;
        series.push(
            parse_metrics_csv(&text)
                .map_err(|e| Error::format(format!("{}: {e}", csv_path.display())))?,
        );
    }
    let agg = aggregate(&series, SMOOTHING_EPISODES)?;
    Ok((seeds, agg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ActionValue;
    use crate::rng;
    use crate::scalar::Real;
    use rand::Rng;

    const SMOKE: &str = r#"
name = "smoke"
variant = "c-mappo"
seeds = [11, 12]
iterations = 3
checkpoint_every = 2

[env]
kind = "rover"
n_rovers = 2
n_pois = 3
arena_size = 8.0
spawn_radius = 2.0
horizon = 8

[hyper]
batch_size = 24
hidden = [8, 8]
epochs = 2
minibatches = 2

[[constraint]]
channel = "collision"
scope = "team"
threshold = 0.5
"#;

    fn smoke_config() -> (RunConfig, String) {
        let cfg = crate::config::parse_run_config(SMOKE).unwrap();
        cfg.validate().unwrap();
        (cfg, SMOKE.to_string())
    }

    fn strip_wall_time(csv: &str) -> String {
        // The wall-time column is the one honest nondeterminism in a run
        // archive; determinism comparisons drop it and check checkpoints
        // byte-for-byte instead.
        csv.lines()
            .map(|l| {
                let cut = l.rfind(',').unwrap();
                &l[..cut]
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn sweep_writes_one_complete_archive_per_seed() {
        let (cfg, raw) = smoke_config();
        let out = tempfile::tempdir().unwrap();
        let report = sweep(&cfg, &raw, out.path(), cfg.iterations, false).unwrap();
        assert!(report.all_succeeded());
        assert_eq!(report.outcomes.len(), 2);
        let mut headers = Vec::new();
        for seed in [11u64, 12] {
            let dir = archive_dir(out.path(), "smoke", seed);
            let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
            assert_eq!(csv.lines().count(), 4, "header plus one row per iteration");
            headers.push(csv.lines().next().unwrap().to_string());
            assert!(dir.join("checkpoint.ckpt").exists());
            assert!(dir.join("checkpoint_000002.ckpt").exists(), "periodic checkpoint");
            let m = read_manifest(&dir.join("manifest.json")).unwrap();
            assert_eq!(m.seed, seed);
            assert_eq!(m.iterations, 3);
            assert_eq!(m.config_sha256, sha256_hex(raw.as_bytes()));
            assert_eq!(m.checkpoints.last().unwrap(), "checkpoint.ckpt");
        }
        assert_eq!(headers[0], headers[1], "identical configs give identical headers");
        // Different seeds must not produce identical learning curves.
        let a = std::fs::read_to_string(archive_dir(out.path(), "smoke", 11).join("metrics.csv"))
            .unwrap();
        let b = std::fs::read_to_string(archive_dir(out.path(), "smoke", 12).join("metrics.csv"))
            .unwrap();
        assert_ne!(strip_wall_time(&a), strip_wall_time(&b));
    }

    #[test]
    fn sweep_matches_sequential_single_runs_byte_for_byte() {
        let (cfg, raw) = smoke_config();
        let swept = tempfile::tempdir().unwrap();
        let single = tempfile::tempdir().unwrap();
        sweep(&cfg, &raw, swept.path(), cfg.iterations, false).unwrap();
        for &seed in &cfg.seeds {
            run_single(&cfg, &raw, seed, single.path(), cfg.iterations, false).unwrap();
        }
        for &seed in &cfg.seeds {
            let a = archive_dir(swept.path(), "smoke", seed);
            let b = archive_dir(single.path(), "smoke", seed);
            let csv_a = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
            let csv_b = std::fs::read_to_string(b.join("metrics.csv")).unwrap();
            assert_eq!(strip_wall_time(&csv_a), strip_wall_time(&csv_b));
            let ckpt_a = std::fs::read(a.join("checkpoint.ckpt")).unwrap();
            let ckpt_b = std::fs::read(b.join("checkpoint.ckpt")).unwrap();
            assert_eq!(ckpt_a, ckpt_b, "final checkpoints must be bitwise identical");
        }
    }

    #[test]
    fn resume_skips_completed_archives_and_reruns_deleted_ones() {
        let (cfg, raw) = smoke_config();
        let out = tempfile::tempdir().unwrap();
        sweep(&cfg, &raw, out.path(), cfg.iterations, false).unwrap();
        let seed12 = archive_dir(out.path(), "smoke", 12);
        let kept_csv = std::fs::read_to_string(
            archive_dir(out.path(), "smoke", 11).join("metrics.csv"),
        )
        .unwrap();
        std::fs::remove_dir_all(&seed12).unwrap();

        let report = sweep(&cfg, &raw, out.path(), cfg.iterations, true).unwrap();
        assert!(report.all_succeeded());
        let skipped: Vec<bool> = report.outcomes.iter().map(|o| o.skipped).collect();
        assert_eq!(skipped, vec![true, false], "seed 11 skipped, seed 12 re-executed");
        assert!(seed12.join("manifest.json").exists());
        let kept_after = std::fs::read_to_string(
            archive_dir(out.path(), "smoke", 11).join("metrics.csv"),
        )
        .unwrap();
        assert_eq!(kept_csv, kept_after, "the skipped archive is untouched");
    }

    #[test]
    fn config_hash_mismatch_aborts_before_overwriting() {
        let (cfg, raw) = smoke_config();
        let out = tempfile::tempdir().unwrap();
        run_single(&cfg, &raw, 11, out.path(), cfg.iterations, false).unwrap();
        let dir = archive_dir(out.path(), "smoke", 11);
        let before_csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let before_ckpt = std::fs::read(dir.join("checkpoint.ckpt")).unwrap();

        let edited = raw.replace("threshold = 0.5", "threshold = 0.4");
        let cfg2 = crate::config::parse_run_config(&edited).unwrap();
        for resume in [true, false] {
            let err = run_single(&cfg2, &edited, 11, out.path(), cfg.iterations, resume)
                .unwrap_err()
                .to_string();
            assert!(err.contains("different configuration"), "{err}");
        }
        assert_eq!(std::fs::read_to_string(dir.join("metrics.csv")).unwrap(), before_csv);
        assert_eq!(std::fs::read(dir.join("checkpoint.ckpt")).unwrap(), before_ckpt);
    }

    #[test]
    fn failing_seeds_do_not_stop_the_sweep() {
        let (cfg, raw) = smoke_config();
        let out = tempfile::tempdir().unwrap();
        // Poison seed 11 with a completed archive from a different config:
        // that seed aborts, the other must still run.
        let other = raw.replace("threshold = 0.5", "threshold = 0.4");
        let cfg_other = crate::config::parse_run_config(&other).unwrap();
        run_single(&cfg_other, &other, 11, out.path(), cfg.iterations, false).unwrap();

        let report = sweep(&cfg, &raw, out.path(), cfg.iterations, false).unwrap();
        assert!(!report.all_succeeded());
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].0, 11);
        assert_eq!(report.outcomes.len(), 1);
        assert_eq!(report.outcomes[0].seed, 12);
        assert!(archive_dir(out.path(), "smoke", 12).join("manifest.json").exists());
    }

    #[test]
    fn trajectory_dump_records_every_step_with_state_and_actions() {
        let raw = SMOKE.replace("checkpoint_every = 2", "dump_trajectories = true");
        let cfg = crate::config::parse_run_config(&raw).unwrap();
        let out = tempfile::tempdir().unwrap();
        run_single(&cfg, &raw, 11, out.path(), 1, false).unwrap();
        let dump = std::fs::read_to_string(
            archive_dir(out.path(), "smoke", 11).join("trajectories.jsonl"),
        )
        .unwrap();
        // batch_size 24 at horizon 8 → 3 episodes, each 8 steps + 1 terminal line.
        let lines: Vec<serde_json::Value> =
            dump.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3 * 9);
        let first = &lines[0];
        assert_eq!(first["iteration"], 0);
        assert_eq!(first["episode"], 0);
        assert_eq!(first["t"], 0);
        assert!(first["state"].is_object());
        assert_eq!(first["actions"].as_array().unwrap().len(), 2);
        assert!(first["costs"]["collision"].is_number());
        let terminal = &lines[8];
        assert_eq!(terminal["t"], 8);
        assert!(terminal["actions"].is_null());
    }

    #[test]
    fn plot_data_aggregates_completed_archives_in_seed_order() {
        let (cfg, raw) = smoke_config();
        let out = tempfile::tempdir().unwrap();
        sweep(&cfg, &raw, out.path(), cfg.iterations, false).unwrap();
        // An extra junk directory and a partial archive must both be ignored.
        std::fs::create_dir_all(out.path().join("smoke/notes")).unwrap();
        std::fs::create_dir_all(out.path().join("smoke/seed_99")).unwrap();
        let (seeds, agg) = plot_data(out.path(), "smoke").unwrap();
        assert_eq!(seeds, vec![11, 12]);
        assert_eq!(agg.seeds, 2);
        assert_eq!(agg.iterations, vec![0, 1, 2]);
        let names: Vec<&str> = agg.columns.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(
            names,
            ["mean_reward", "mean_cost_collision", "lambda_0", "policy_loss", "value_loss",
             "cost_value_loss_0"]
        );
        assert!(!names.contains(&"wall_time_s"));
    }

    #[test]
    fn eval_of_an_untrained_checkpoint_matches_a_scripted_random_rollout() {
        // Geometry chosen so the return is set by spawn randomness, not by
        // policy skill: the observation/score radius covers the whole arena,
        // so every point-of-interest is counted no matter how agents move.
        // An untrained greedy policy (near-zero actions) and a scripted
        // uniform-random agent must then score the same in expectation, and
        // the eval plumbing is what is under test.
        let text = r#"
name = "eval-oracle"
variant = "mappo"
seeds = [5]
iterations = 1

[env]
kind = "rover"
n_rovers = 2
n_pois = 4
coupling = 1
arena_size = 10.0
spawn_radius = 3.0
poi_radius = 15.0
observation_radius = 15.0
horizon = 10

[hyper]
batch_size = 20
hidden = [8, 8]
"#;
        let cfg = crate::config::parse_run_config(text).unwrap();
        cfg.validate().unwrap();
        let out = tempfile::tempdir().unwrap();
        let dir = out.path().join("ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("untrained.ckpt");
        let trainer =
            Trainer::new(cfg.build_env::<f64>().unwrap(), cfg.trainer_settings(5).unwrap())
                .unwrap();
        trainer.save_checkpoint(&ckpt).unwrap();

        let episodes = 300;
        let report = eval_checkpoint(&cfg, &ckpt, episodes, 901).unwrap();

        // Independent oracle: uniform random moves through the raw world API.
        let env = cfg.build_env::<f64>().unwrap();
        let max_step = 1.0; // rover default step clamp
        let mut returns = Vec::with_capacity(episodes);
        for ep in 0..episodes as u64 {
            let mut world = env.clone();
            let mut env_rng = rng::stream(77, "oracle-env", 0, ep);
            let mut act_rng = rng::stream(77, "oracle-act", 0, ep);
            world.reset(&mut env_rng).unwrap();
            let mut total = 0.0;
            for _ in 0..world.horizon() {
                let actions: Vec<ActionValue<f64>> = (0..world.n_agents())
                    .map(|_| {
                        ActionValue::Continuous(vec![
                            act_rng.gen_range(-max_step..=max_step),
                            act_rng.gen_range(-max_step..=max_step),
                        ])
                    })
                    .collect();
                let result = world.step(&actions, None).unwrap();
                total += result.reward.to_f64c();
            }
            returns.push(total);
        }
        let stats = |xs: &[f64]| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        };
        let (oracle_mean, oracle_se) = stats(&returns);
        let (eval_mean, eval_se) = stats(&report.episode_returns);
        assert_eq!(report.mean_reward, eval_mean);
        assert!(oracle_mean > 0.0, "the oracle geometry must actually score");
        let band = 3.0 * (oracle_se.powi(2) + eval_se.powi(2)).sqrt();
        assert!(
            (eval_mean - oracle_mean).abs() <= band,
            "untrained eval {eval_mean} vs random baseline {oracle_mean} (band {band})"
        );
    }

    #[test]
    fn eval_reports_a_missing_checkpoint_instead_of_inventing_one() {
        let (cfg, _) = smoke_config();
        let err = eval_checkpoint(&cfg, Path::new("/nonexistent/x.ckpt"), 3, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("does not exist"), "{err}");
    }

    #[test]
    fn default_out_root_prefers_the_environment_variable() {
        // Read-only check of the resolution rule; the variable itself is
        // process-global, so the test only exercises the unset path plus the
        // pure join logic.
        if std::env::var_os(OUT_ROOT_ENV).is_none() {
            assert_eq!(default_out_root(), PathBuf::from("out"));
        }
        assert_eq!(
            archive_dir(Path::new("results"), "demo", 3),
            PathBuf::from("results/demo/seed_3")
        );
    }
}
