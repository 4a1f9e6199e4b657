//! Workflows behind the `ravn` binary: train, eval, ablate and plot.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EvalMode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    compute_metrics, evaluate, evaluation_episodes, export_report, load_records, plot_records,
    ActionMode, EpisodeRecord, MetricsReport, NetworkAgent, Split,
};
use crate::model::{load_params, Network, Parameters, Variant};
use crate::trainer::{derive_seed, train, LogRow, TrainOutcome};
use crate::world::{load_map_dir, GridMap};

pub const ABLATION_HEADER: &str =
    "variant,heard_sr,heard_spl,heard_sna,unheard_sr,unheard_spl,unheard_sna";
pub const ABLATION_RUNS_HEADER: &str =
    "variant,seed,heard_sr,heard_spl,heard_sna,unheard_sr,unheard_spl,unheard_sna";

fn maps_of(cfg: &RunConfig) -> Result<Vec<GridMap>> {
    Ok(cfg.load_maps()?.into_iter().map(|(_, m)| m).collect())
}

/// Trains per `cfg`, writing the resolved config, log and checkpoint into
/// `cfg.out_dir`. `on_row` sees every log row.
pub fn run_train(cfg: &RunConfig, on_row: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.echo()?;
    train(
        cfg.model(),
        cfg.observation(),
        cfg.reward(),
        cfg.train(),
        maps_of(cfg)?,
        Some(&cfg.out_dir),
        on_row,
    )
}

/// Greedy (or sampled) evaluation of fixed parameters on the given splits.
pub fn evaluate_params(
    cfg: &RunConfig,
    net: &Network,
    params: &Parameters,
    splits: &[Split],
) -> Result<Vec<EpisodeRecord>> {
    let maps: Arc<[GridMap]> = Arc::from(maps_of(cfg)?);
    let mut obs_cfg = cfg.observation();
    obs_cfg.freq_bins = net.config().freq_bins;
    obs_cfg.rays = net.config().rays;
    let obs_cfg = Arc::new(obs_cfg);
    let mode = match cfg.eval_mode {
        EvalMode::Greedy => ActionMode::Greedy,
        EvalMode::Sampled => ActionMode::Sampled(ChaCha8Rng::seed_from_u64(derive_seed(cfg.eval_seed, 7))),
    };
    let mut agent = NetworkAgent::new(net, params, mode);
    let mut records = Vec::new();
    for split in splits {
        let classes = match split {
            Split::Heard => &cfg.heard_classes,
            Split::Unheard => &cfg.unheard_classes,
        };
        let episodes =
            evaluation_episodes(&maps, *split, classes, cfg.eval_episodes, cfg.max_steps, cfg.eval_seed)?;
        records.extend(evaluate(&mut agent, maps.clone(), obs_cfg.clone(), &episodes)?);
    }
    Ok(records)
}

/// Evaluates a checkpoint and exports the report into `out`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, splits: &[Split], out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let (model_cfg, params) = load_params(checkpoint)?;
    let net = Network::new(model_cfg)?;
    let records = evaluate_params(cfg, &net, &params, splits)?;
    let report = compute_metrics(&records)?;
    let maps = maps_of(cfg)?;
    let mut shown = Vec::new();
    for split in splits {
        shown.extend(
            records
                .iter()
                .filter(|r| r.split == *split)
                .take(cfg.svg_episodes)
                .cloned(),
        );
    }
    export_report(&records, &report, &maps, out, 0)?;
    plot_records(&shown, &maps, out)?;
    Ok(report)
}

/// Mean metrics of one variant over the ablation seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per seed: (seed, heard [SR, SPL, SNA], unheard [SR, SPL, SNA]).
    pub runs: Vec<(u64, [f64; 3], [f64; 3])>,
}

impl AblationRow {
    pub fn mean(&self) -> ([f64; 3], [f64; 3]) {
        let n = self.runs.len() as f64;
        let mut h = [0.0; 3];
        let mut u = [0.0; 3];
        for (_, rh, ru) in &self.runs {
            for i in 0..3 {
                h[i] += rh[i] / n;
                u[i] += ru[i] / n;
            }
        }
        (h, u)
    }
}

fn triple(report: &MetricsReport, split: Split) -> Result<[f64; 3]> {
    let m = report
        .split(split)
        .ok_or_else(|| Error::Argument(format!("no {split} records")))?;
    Ok([m.sr, m.spl, m.sna])
}

/// Trains and evaluates one variant for one seed under `root`.
pub fn ablation_run(cfg: &RunConfig, variant: Variant, seed: u64, root: &Path) -> Result<([f64; 3], [f64; 3])> {
    let run_cfg = RunConfig {
        variant,
        seed,
        out_dir: root.join(variant.as_str()).join(format!("seed_{seed}")),
        ..cfg.clone()
    };
    let outcome = run_train(&run_cfg, |_| {})?;
    let records = evaluate_params(&run_cfg, &outcome.network, &outcome.params, &Split::ALL)?;
    let report = compute_metrics(&records)?;
    let maps = maps_of(&run_cfg)?;
    export_report(&records, &report, &maps, &run_cfg.out_dir.join("eval"), 0)?;
    Ok((triple(&report, Split::Heard)?, triple(&report, Split::Unheard)?))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for row in rows {
        let (h, u) = row.mean();
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            row.variant, h[0], h[1], h[2], u[0], u[1], u[2]
        );
    }
    out
}

pub fn ablation_runs_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_RUNS_HEADER}\n");
    for row in rows {
        for (seed, h, u) in &row.runs {
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                row.variant, seed, h[0], h[1], h[2], u[0], u[1], u[2]
            );
        }
    }
    out
}

/// Trains all four variants on every ablation seed with shared environment
/// and audio seeds, then writes `ablation.csv` (seed means) and
/// `ablation_runs.csv` into `cfg.out_dir`.
pub fn run_ablate(cfg: &RunConfig, mut progress: impl FnMut(Variant, u64)) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    cfg.echo()?;
    let root = cfg.out_dir.join("ablate");
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut row = AblationRow {
            variant,
            runs: Vec::new(),
        };
        for &seed in &cfg.ablate_seeds {
            progress(variant, seed);
            let (h, u) = ablation_run(cfg, variant, seed, &root)?;
            row.runs.push((seed, h, u));
        }
        rows.push(row);
    }
    write(&cfg.out_dir.join("ablation.csv"), &ablation_csv(&rows))?;
    write(&cfg.out_dir.join("ablation_runs.csv"), &ablation_runs_csv(&rows))?;
    Ok(rows)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders SVGs for every record listed in `records`.
pub fn run_plot(records: &Path, maps_dir: &Path, out: &Path) -> Result<usize> {
    let recs = load_records(records)?;
    let maps: Vec<GridMap> = load_map_dir(maps_dir)?.into_iter().map(|(_, m)| m).collect();
    plot_records(&recs, &maps, out)
}

/// Default eval output directory for a config.
pub fn eval_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("eval")
}
