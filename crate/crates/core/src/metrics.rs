//! Run artifacts: the fixed-header metrics CSV, the run manifest, trajectory
//! dumps, and the smoothing/aggregation step that turns per-seed CSVs into
//! plot-ready mean ± standard-error curves.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::ActionValue;
use crate::scalar::Real;
use crate::trainer::rollout::EpisodeData;
use crate::trainer::IterationRow;

/// Episode window for the trailing moving average that smooths learning
/// curves before seeds are aggregated.
pub const SMOOTHING_EPISODES: u64 = 100;

/// Column names for a run's CSV, in serialization order: iteration, episodes,
/// mean extrinsic reward, one mean episodic cost per world channel, one
/// multiplier per constraint, the two shared losses, one cost-critic loss per
/// constraint, and wall time.
pub fn csv_columns(channels: &[String], n_constraints: usize) -> Vec<String> {
    let mut cols = vec!["iteration".to_string(), "episodes".to_string(), "mean_reward".to_string()];
    for c in channels {
        cols.push(format!("mean_cost_{c}"));
    }
    for j in 0..n_constraints {
        cols.push(format!("lambda_{j}"));
    }
    cols.push("policy_loss".to_string());
    cols.push("value_loss".to_string());
    for j in 0..n_constraints {
        cols.push(format!("cost_value_loss_{j}"));
    }
    cols.push("wall_time_s".to_string());
    cols
}

pub fn csv_header(channels: &[String], n_constraints: usize) -> String {
    csv_columns(channels, n_constraints).join(",")
}

fn fmt_float(v: f64) -> String {
    format!("{v:.6}")
}

/// Serialize one row. Integer columns print raw; float columns print with six
/// decimal places, which is deterministic for identical bit patterns.
pub fn csv_row(row: &IterationRow) -> String {
    let mut fields = vec![row.iteration.to_string(), row.episodes.to_string()];
    fields.push(fmt_float(row.mean_reward));
    for (_, c) in &row.mean_costs {
        fields.push(fmt_float(*c));
    }
    for l in &row.lambdas {
        fields.push(fmt_float(*l));
    }
    fields.push(fmt_float(row.policy_loss));
    fields.push(fmt_float(row.value_loss));
    for l in &row.cost_value_losses {
        fields.push(fmt_float(*l));
    }
    fields.push(fmt_float(row.wall_time_s));
    fields.join(",")
}

/// Appends rows to a metrics CSV, flushing after every row so an aborted run
/// still leaves a complete log of the iterations it finished.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Create (truncating) the file and write the header line.
    pub fn create(path: &Path, channels: &[String], n_constraints: usize) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{}", csv_header(channels, n_constraints))?;
        file.flush()?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, row: &IterationRow) -> Result<()> {
        writeln!(self.file, "{}", csv_row(row))?;
        self.file.flush()?;
        Ok(())
    }
}

/// The archive's summary record, written once a run completes. The config
/// hash covers the configuration file byte-for-byte, so a resumed run can
/// refuse to mix archives from different configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub config_sha256: String,
    pub code_version: String,
    pub seed: u64,
    /// Iterations this archive holds.
    pub iterations: u64,
    /// Wall time of the producing run; metadata only, never part of any
    /// determinism comparison.
    pub wall_time_s: f64,
    /// Checkpoint file names, relative to the archive directory; the last one
    /// is the final state.
    pub checkpoints: Vec<String>,
    /// Metrics CSV file name, relative to the archive directory.
    pub csv: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    let mut file = File::create(path)?;
    writeln!(file, "{text}")?;
    file.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let m = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("bad manifest {}: {e}", path.display())))?;
    Ok(m)
}

fn action_json<R: Real>(a: &ActionValue<R>) -> serde_json::Value {
    match a {
        ActionValue::Discrete(i) => serde_json::json!(i),
        ActionValue::Continuous(v) => {
            serde_json::json!(v.iter().map(|x| x.to_f64c()).collect::<Vec<f64>>())
        }
    }
}

/// Writes line-delimited JSON trajectories: one object per timestep with the
/// world snapshot, the joint action, the extrinsic reward, and each cost
/// channel's team value, plus a trailing terminal-state line per episode.
pub struct TrajectoryWriter {
    file: File,
}

impl TrajectoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { file: File::create(path)? })
    }

    pub fn append_episode<R: Real>(
        &mut self,
        iteration: u64,
        episode: usize,
        channels: &[String],
        ep: &EpisodeData<R>,
    ) -> Result<()> {
        let snapshots = ep.snapshots.as_ref().ok_or_else(|| {
            Error::usage("trajectory dump requested but the episode holds no snapshots")
        })?;
        for t in 0..ep.len() {
            let costs: serde_json::Map<String, serde_json::Value> = channels
                .iter()
                .zip(&ep.team_costs)
                .map(|(name, stream)| (name.clone(), serde_json::json!(stream[t].to_f64c())))
                .collect();
            let line = serde_json::json!({
                "iteration": iteration,
                "episode": episode,
                "t": t,
                "state": snapshots[t],
                "actions": ep.actions[t].iter().map(action_json).collect::<Vec<_>>(),
                "reward": ep.rewards[t].to_f64c(),
                "costs": costs,
            });
            writeln!(self.file, "{line}")?;
        }
        let terminal = serde_json::json!({
            "iteration": iteration,
            "episode": episode,
            "t": ep.len(),
            "state": snapshots[ep.len()],
            "actions": serde_json::Value::Null,
            "reward": serde_json::Value::Null,
            "costs": serde_json::Value::Null,
        });
        writeln!(self.file, "{terminal}")?;
        self.file.flush()?;
        Ok(())
    }
}

/// One seed's parsed metrics CSV. `columns` holds every float column in file
/// order (costs, multipliers, losses, wall time); iteration and episode
/// counts are kept separately because smoothing weights by episodes.
#[derive(Debug, Clone)]
pub struct SeedSeries {
    pub iterations: Vec<u64>,
    pub episodes: Vec<u64>,
    pub columns: Vec<(String, Vec<f64>)>,
}

pub fn parse_metrics_csv(text: &str) -> Result<SeedSeries> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("metrics CSV is empty"))?;
    let names: Vec<&str> = header.split(',').collect();
    if names.first() != Some(&"iteration") || names.get(1) != Some(&"episodes") {
        return Err(Error::format(format!(
            "metrics CSV must start with iteration,episodes; got {header:?}"
        )));
    }
    let mut series = SeedSeries {
        iterations: Vec::new(),
        episodes: Vec::new(),
        columns: names[2..].iter().map(|n| (n.to_string(), Vec::new())).collect(),
    };
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::format(format!(
                "metrics CSV line {}: expected {} fields, got {}",
                lineno + 2,
                names.len(),
                fields.len()
            )));
        }
        let parse_err = |what: &str, v: &str| {
            Error::format(format!("metrics CSV line {}: bad {what} {v:?}", lineno + 2))
        };
        series
            .iterations
            .push(fields[0].parse().map_err(|_| parse_err("iteration", fields[0]))?);
        series.episodes.push(fields[1].parse().map_err(|_| parse_err("episodes", fields[1]))?);
        for (col, v) in series.columns.iter_mut().zip(&fields[2..]) {
            col.1.push(v.parse().map_err(|_| parse_err(&col.0, v))?);
        }
    }
    Ok(series)
}

/// Trailing moving average weighted by episode counts: each point averages
/// the smallest suffix of rows whose episodes sum to at least `window`
/// (all rows so far when the total is still smaller). Weighting by episodes
/// makes the result the exact mean over the underlying episodes.
pub fn smooth_trailing(values: &[f64], episodes: &[u64], window: u64) -> Vec<f64> {
    assert_eq!(values.len(), episodes.len());
    let mut out = Vec::with_capacity(values.len());
    for t in 0..values.len() {
        let mut start = t + 1;
        let mut covered = 0u64;
        while start > 0 && covered < window {
            start -= 1;
            covered += episodes[start];
        }
        let weight: f64 = episodes[start..=t].iter().map(|&e| e as f64).sum();
        let sum: f64 = (start..=t).map(|j| values[j] * episodes[j] as f64).sum();
        out.push(if weight > 0.0 { sum / weight } else { values[t] });
    }
    out
}

/// Cross-seed aggregate of smoothed curves.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub seeds: usize,
    pub iterations: Vec<u64>,
    /// Per column: name, per-iteration cross-seed mean, per-iteration
    /// standard error (sample standard deviation over √n; 0 for one seed).
    pub columns: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Smooth each seed's curves over the trailing episode window, then take the
/// per-iteration mean and standard error across seeds. Wall time is dropped:
/// it is run metadata, not a learning signal. Seed order cannot matter —
/// means and standard errors are symmetric in their inputs.
pub fn aggregate(series: &[SeedSeries], window: u64) -> Result<Aggregate> {
    let first = series.first().ok_or_else(|| Error::usage("no seed series to aggregate"))?;
    for s in series {
        if s.iterations != first.iterations {
            return Err(Error::format("seed series disagree on the iteration grid"));
        }
        let names = |s: &SeedSeries| s.columns.iter().map(|c| c.0.clone()).collect::<Vec<_>>();
        if names(s) != names(first) {
            return Err(Error::format("seed series disagree on column names"));
        }
    }
    let n = series.len();
    let rows = first.iterations.len();
    let mut columns = Vec::new();
    for (ci, (name, _)) in first.columns.iter().enumerate() {
        if name == "wall_time_s" {
            continue;
        }
        let smoothed: Vec<Vec<f64>> = series
            .iter()
            .map(|s| smooth_trailing(&s.columns[ci].1, &s.episodes, window))
            .collect();
        let mut mean = Vec::with_capacity(rows);
        let mut se = Vec::with_capacity(rows);
        for t in 0..rows {
            let m = smoothed.iter().map(|s| s[t]).sum::<f64>() / n as f64;
            let e = if n > 1 {
                let var =
                    smoothed.iter().map(|s| (s[t] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                var.sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            mean.push(m);
            se.push(e);
        }
        columns.push((name.clone(), mean, se));
    }
    Ok(Aggregate { seeds: n, iterations: first.iterations.clone(), columns })
}

/// CSV form: `iteration` then `<col>_mean,<col>_se` pairs.
pub fn aggregate_to_csv(agg: &Aggregate) -> String {
    let mut header = vec!["iteration".to_string()];
    for (name, _, _) in &agg.columns {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_se"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for (t, it) in agg.iterations.iter().enumerate() {
        let mut fields = vec![it.to_string()];
        for (_, mean, se) in &agg.columns {
            fields.push(fmt_float(mean[t]));
            fields.push(fmt_float(se[t]));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn aggregate_to_json(agg: &Aggregate) -> serde_json::Value {
    let columns: serde_json::Map<String, serde_json::Value> = agg
        .columns
        .iter()
        .map(|(name, mean, se)| {
            (name.clone(), serde_json::json!({ "mean": mean, "se": se }))
        })
        .collect();
    serde_json::json!({
        "seeds": agg.seeds,
        "smoothing_episodes": SMOOTHING_EPISODES,
        "iterations": agg.iterations,
        "columns": columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iteration: u64) -> IterationRow {
        IterationRow {
            iteration,
            episodes: 12,
            mean_reward: 1.25,
            mean_costs: vec![("collision".into(), 0.5)],
            lambdas: vec![2.0],
            policy_loss: -0.125,
            value_loss: 3.5,
            cost_value_losses: vec![0.0625],
            wall_time_s: 0.5,
        }
    }

    #[test]
    fn header_and_row_agree_on_the_column_layout() {
        let header = csv_header(&["collision".into()], 1);
        assert_eq!(
            header,
            "iteration,episodes,mean_reward,mean_cost_collision,lambda_0,\
             policy_loss,value_loss,cost_value_loss_0,wall_time_s"
        );
        let line = csv_row(&row(3));
        assert_eq!(
            line,
            "3,12,1.250000,0.500000,2.000000,-0.125000,3.500000,0.062500,0.500000"
        );
        assert_eq!(line.split(',').count(), header.split(',').count());
    }

    #[test]
    fn writer_emits_parseable_files_and_flushes_every_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path, &["collision".into()], 1).unwrap();
        w.append(&row(0)).unwrap();
        // Read back while the writer is still alive: the flush-per-row
        // contract means the row is already on disk.
        let text = std::fs::read_to_string(&path).unwrap();
        let series = parse_metrics_csv(&text).unwrap();
        assert_eq!(series.iterations, vec![0]);
        assert_eq!(series.episodes, vec![12]);
        assert_eq!(series.columns[0], ("mean_reward".to_string(), vec![1.25]));
        w.append(&row(1)).unwrap();
        let series = parse_metrics_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(series.iterations, vec![0, 1]);
    }

    #[test]
    fn manifest_round_trips_and_hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = Manifest {
            name: "demo".into(),
            config_sha256: sha256_hex(b"name = \"demo\"\n"),
            code_version: "0.1.0".into(),
            seed: 7,
            iterations: 50,
            wall_time_s: 12.5,
            checkpoints: vec!["checkpoint.ckpt".into()],
            csv: "metrics.csv".into(),
        };
        write_manifest(&path, &m).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
        // A fixed input must hash to a fixed digest (the resume check relies
        // on byte-for-byte stability).
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn smoothing_covers_the_smallest_sufficient_suffix() {
        // 60 episodes per row with a 100-episode window: the first row stands
        // alone, every later row averages exactly two rows.
        let episodes = [60, 60, 60];
        assert_eq!(smooth_trailing(&[1.0, 2.0, 3.0], &episodes, 100), vec![1.0, 1.5, 2.5]);
        // Uneven episode counts weight by episodes, not rows: with counts
        // [10, 90] the second point is (10·0 + 90·1)/100.
        assert_eq!(smooth_trailing(&[0.0, 1.0], &[10, 90], 100), vec![0.0, 0.9]);
        // A total below the window averages everything so far.
        assert_eq!(smooth_trailing(&[2.0, 4.0], &[10, 10], 100), vec![2.0, 3.0]);
    }

    fn toy_series(scale: f64) -> SeedSeries {
        SeedSeries {
            iterations: vec![0, 1, 2],
            episodes: vec![60, 60, 60],
            columns: vec![
                ("mean_reward".into(), vec![scale, 2.0 * scale, 3.0 * scale]),
                ("wall_time_s".into(), vec![9.0, 9.0, 9.0]),
            ],
        }
    }

    #[test]
    fn aggregation_matches_the_hand_worked_three_by_three_table() {
        // Three seeds with rewards [1,2,3], [2,4,6], [3,6,9] over 60-episode
        // iterations. Trailing-100-episode smoothing gives [1,1.5,2.5],
        // [2,3,5], [3,4.5,7.5]; the cross-seed means are [2,3,5] and the
        // standard errors are sample-std/√3 = {1, 1.5, 2.5}/√3.
        let series = [toy_series(1.0), toy_series(2.0), toy_series(3.0)];
        let agg = aggregate(&series, 100).unwrap();
        assert_eq!(agg.seeds, 3);
        assert_eq!(agg.columns.len(), 1, "wall time is dropped");
        let (name, mean, se) = &agg.columns[0];
        assert_eq!(name, "mean_reward");
        assert_eq!(mean, &vec![2.0, 3.0, 5.0]);
        let expect_se = [
            0.577_350_269_189_625_8,
            0.866_025_403_784_438_6,
            1.443_375_672_974_064_3,
        ];
        for (got, want) in se.iter().zip(expect_se) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn aggregation_is_invariant_to_seed_order() {
        let a = [toy_series(1.0), toy_series(2.0), toy_series(3.0)];
        let b = [toy_series(3.0), toy_series(1.0), toy_series(2.0)];
        let (a, b) = (aggregate(&a, 100).unwrap(), aggregate(&b, 100).unwrap());
        for ((_, ma, sa), (_, mb, sb)) in a.columns.iter().zip(&b.columns) {
            assert_eq!(ma, mb);
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn single_seed_aggregation_reports_zero_standard_error() {
        let agg = aggregate(&[toy_series(1.0)], 100).unwrap();
        assert_eq!(agg.columns[0].2, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn mismatched_series_are_rejected() {
        let mut other = toy_series(1.0);
        other.iterations = vec![0, 1, 3];
        assert!(aggregate(&[toy_series(1.0), other], 100).is_err());
        let mut other = toy_series(1.0);
        other.columns[0].0 = "reward".into();
        assert!(aggregate(&[toy_series(1.0), other], 100).is_err());
        assert!(aggregate(&[], 100).is_err());
    }

    #[test]
    fn aggregate_serializers_cover_every_column() {
        let agg = aggregate(&[toy_series(1.0), toy_series(2.0)], 100).unwrap();
        let csv = aggregate_to_csv(&agg);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "iteration,mean_reward_mean,mean_reward_se");
        assert_eq!(lines.clone().count(), 3);
        assert!(lines.next().unwrap().starts_with("0,1.500000,"));
        let json = aggregate_to_json(&agg);
        assert_eq!(json["seeds"], 2);
        assert_eq!(json["columns"]["mean_reward"]["mean"][2], serde_json::json!(3.75));
    }

    #[test]
    fn csv_parser_flags_structural_damage_with_line_numbers() {
        let good = "iteration,episodes,mean_reward\n0,4,1.000000\n1,4,2.000000\n";
        let s = parse_metrics_csv(good).unwrap();
        assert_eq!(s.iterations, vec![0, 1]);
        let short = "iteration,episodes,mean_reward\n0,4\n";
        let err = parse_metrics_csv(short).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let bad_float = "iteration,episodes,mean_reward\n0,4,sideways\n";
        let err = parse_metrics_csv(bad_float).unwrap_err().to_string();
        assert!(err.contains("mean_reward"), "{err}");
        let wrong_head = "time,episodes,mean_reward\n";
        assert!(parse_metrics_csv(wrong_head).is_err());
    }
}
