//! Frozen-policy evaluation: episode records, SR / SPL / SNA and report
//! export (CSV tables, JSON-lines trajectories, SVG trajectory plots).

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, NavEnv, RewardConfig};
use crate::error::{Error, Result};
use crate::model::{GatePin, Network, Parameters};
use crate::observe::{ObsConfig, Observation};
use crate::trainer::{derive_seed, greedy_action, sample_action};
use crate::world::{min_action_count, DistanceField, sample_episode, Episode, GridMap, Pose, PoseField, Tile};

pub const METRICS_HEADER: &str = "split,episodes,sr,spl,sna";
pub const EPISODES_HEADER: &str =
    "episode_id,split,success,geodesic,path,actions,min_actions,mean_sigma2,mean_occlusion";
/// Sidecar holding full trajectories, written next to `episodes.csv`.
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const CELL_PX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Heard,
    Unheard,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Heard, Split::Unheard];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Heard => "heard",
            Split::Unheard => "unheard",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Heard => 0,
            Split::Unheard => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heard" => Ok(Split::Heard),
            "unheard" => Ok(Split::Unheard),
            other => Err(Error::Validation {
                key: "split".into(),
                reason: format!("unknown split `{other}`"),
            }),
        }
    }
}

/// An episode queued for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub id: u64,
    pub split: Split,
    pub episode: Episode,
}

/// Draws `count` evaluation episodes for one split. Identifiers live in a
/// range disjoint from training episodes.
pub fn evaluation_episodes(
    maps: &[GridMap],
    split: Split,
    classes: &[u32],
    count: usize,
    max_steps: u32,
    seed: u64,
) -> Result<Vec<EvalEpisode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5000 + split.index()));
    (0..count)
        .map(|i| {
            let map_id = rng.random_range(0..maps.len());
            let episode = sample_episode(&maps[map_id], map_id, &mut rng, classes, max_steps)?;
            Ok(EvalEpisode {
                id: (1 << 63) | (split.index() << 40) | i as u64,
                split,
                episode,
            })
        })
        .collect()
}

/// What an agent chose at one step, plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub sigma2: Option<f64>,
    pub gate_mean: Option<f64>,
}

impl Decision {
    pub fn plain(action: Action) -> Self {
        Decision {
            action,
            sigma2: None,
            gate_mean: None,
        }
    }
}

pub trait Agent {
    /// Called once before the first step of each episode.
    fn begin(&mut self, env: &NavEnv) -> Result<()>;
    fn act(&mut self, env: &NavEnv, obs: &Observation) -> Result<Decision>;
}

#[derive(Debug, Clone)]
pub enum ActionMode {
    Greedy,
    Sampled(ChaCha8Rng),
}

/// A trained network; the hidden state is zeroed per episode.
pub struct NetworkAgent<'a> {
    net: &'a Network,
    params: &'a Parameters,
    mode: ActionMode,
    h: Vec<f64>,
}

impl<'a> NetworkAgent<'a> {
    pub fn new(net: &'a Network, params: &'a Parameters, mode: ActionMode) -> Self {
        NetworkAgent {
            net,
            params,
            mode,
            h: vec![0.0; net.config().hidden],
        }
    }
}

impl Agent for NetworkAgent<'_> {
    fn begin(&mut self, _env: &NavEnv) -> Result<()> {
        self.h.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    fn act(&mut self, _env: &NavEnv, obs: &Observation) -> Result<Decision> {
        let cache = self
            .net
            .step(self.params, &obs.audio, &obs.visual, &self.h, GatePin::Free)?;
        let action = match &mut self.mode {
            ActionMode::Greedy => greedy_action(&cache.policy.logits),
            ActionMode::Sampled(rng) => sample_action(&cache.policy.logits, rng).0,
        };
        let gate_mean = cache
            .gate
            .as_ref()
            .map(|m| m.iter().sum::<f64>() / m.len() as f64);
        let sigma2 = cache.agr.as_ref().map(|a| a.log_var.exp());
        self.h = cache.policy.h;
        Ok(Decision {
            action: Action::from_index(action),
            sigma2,
            gate_mean,
        })
    }
}

/// Follows a minimal-action plan, preferring moves that stay on a shortest
/// path.
#[derive(Default)]
pub struct OptimalAgent {
    field: Option<(PoseField, DistanceField)>,
}

impl OptimalAgent {
    pub fn new() -> Self {
        Self::default()
    }

    fn plan(&self, env: &NavEnv) -> Result<Action> {
        let (field, dist) = self.field.as_ref().ok_or_else(|| Error::Protocol("act before begin".into()))?;
        let (pose, episode) = match (env.pose(), env.episode()) {
            (Some(p), Some(e)) => (p, e),
            _ => return Err(Error::Protocol("no active episode".into())),
        };
        if pose.cell() == episode.goal {
            return Ok(Action::Stop);
        }
        let map = &env.maps()[episode.map_id];
        let mut best: Option<((u32, u32), Action)> = None;
        for action in [Action::Forward, Action::TurnLeft, Action::TurnRight] {
            let next = apply(map, pose, action);
            if let (Some(m), Some(d)) = (field.moves(next), dist.get(next.cell())) {
                if best.is_none_or(|(key, _)| (m, d) < key) {
                    best = Some(((m, d), action));
                }
            }
        }
        best.map(|(_, a)| a).ok_or(Error::Unreachable {
            from: (pose.x, pose.y),
        })
    }
}

/// Pose after `action` (bumps leave it unchanged).
pub fn apply(map: &GridMap, pose: Pose, action: Action) -> Pose {
    match action {
        Action::Forward => match map.step(pose.cell(), pose.heading) {
            Some(c) => Pose::new(c.x, c.y, pose.heading),
            None => pose,
        },
        Action::TurnLeft => Pose { heading: pose.heading.turn_left(), ..pose },
        Action::TurnRight => Pose { heading: pose.heading.turn_right(), ..pose },
        Action::Stop => pose,
    }
}

impl Agent for OptimalAgent {
    fn begin(&mut self, env: &NavEnv) -> Result<()> {
        let episode = env.episode().ok_or_else(|| Error::Protocol("no active episode".into()))?;
        let map = &env.maps()[episode.map_id];
        self.field = Some((
            PoseField::new(map, episode.goal)?,
            DistanceField::new(map, episode.goal)?,
        ));
        Ok(())
    }

    fn act(&mut self, env: &NavEnv, _obs: &Observation) -> Result<Decision> {
        self.plan(env).map(Decision::plain)
    }
}

/// Stops on the first step.
pub struct StopAgent;

impl Agent for StopAgent {
    fn begin(&mut self, _env: &NavEnv) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _env: &NavEnv, _obs: &Observation) -> Result<Decision> {
        Ok(Decision::plain(Action::Stop))
    }
}

/// Takes `wander` random non-Stop actions, then plans optimally.
pub struct DetourAgent {
    rng: ChaCha8Rng,
    wander: u32,
    left: u32,
    planner: OptimalAgent,
}

impl DetourAgent {
    pub fn new(seed: u64, wander: u32) -> Self {
        DetourAgent {
            rng: ChaCha8Rng::seed_from_u64(seed),
            wander,
            left: 0,
            planner: OptimalAgent::new(),
        }
    }
}

impl Agent for DetourAgent {
    fn begin(&mut self, env: &NavEnv) -> Result<()> {
        self.left = self.wander;
        self.planner.begin(env)
    }

    fn act(&mut self, env: &NavEnv, obs: &Observation) -> Result<Decision> {
        if self.left > 0 {
            self.left -= 1;
            let a = Action::from_index(self.rng.random_range(0..3));
            return Ok(Decision::plain(a));
        }
        self.planner.act(env, obs)
    }
}

/// Uniform over all four actions.
pub struct RandomAgent {
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        RandomAgent {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn begin(&mut self, _env: &NavEnv) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _env: &NavEnv, _obs: &Observation) -> Result<Decision> {
        Ok(Decision::plain(Action::from_index(self.rng.random_range(0..Action::COUNT))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: u64,
    pub split: Split,
    pub episode: Episode,
    pub success: bool,
    /// Effective Forward moves.
    pub path_length: u32,
    pub geodesic: u32,
    pub actions: u32,
    pub min_actions: u32,
    /// Start pose followed by the pose after every action.
    pub trajectory: Vec<Pose>,
    pub action_log: Vec<Action>,
    /// Per step, empty when the agent has no distance head.
    pub sigma2: Vec<f64>,
    pub occlusion: Vec<u32>,
    pub gate_mean: Vec<f64>,
}

impl EpisodeRecord {
    pub fn mean_sigma2(&self) -> f64 {
        mean(&self.sigma2)
    }

    pub fn mean_occlusion(&self) -> f64 {
        let v: Vec<f64> = self.occlusion.iter().map(|k| f64::from(*k)).collect();
        mean(&v)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs every episode to completion, one at a time, in order.
pub fn evaluate(
    agent: &mut dyn Agent,
    maps: Arc<[GridMap]>,
    obs_cfg: Arc<ObsConfig>,
    episodes: &[EvalEpisode],
) -> Result<Vec<EpisodeRecord>> {
    let mut env = NavEnv::new(maps, obs_cfg, RewardConfig::default());
    let mut records = Vec::with_capacity(episodes.len());
    for e in episodes {
        let (mut obs, mut info) = env.reset(e.episode.clone(), e.id)?;
        let map = &env.maps()[e.episode.map_id];
        let min_actions = min_action_count(map, e.episode.start, e.episode.goal)?;
        let geodesic = info.geodesic_now;
        agent.begin(&env)?;
        let mut record = EpisodeRecord {
            id: e.id,
            split: e.split,
            episode: e.episode.clone(),
            success: false,
            path_length: 0,
            geodesic,
            actions: 0,
            min_actions,
            trajectory: vec![e.episode.start],
            action_log: Vec::new(),
            sigma2: Vec::new(),
            occlusion: Vec::new(),
            gate_mean: Vec::new(),
        };
        loop {
            let d = agent.act(&env, &obs)?;
            record.occlusion.push(info.occlusion_k);
            record.sigma2.extend(d.sigma2);
            record.gate_mean.extend(d.gate_mean);
            let r = env.step(d.action)?;
            record.action_log.push(d.action);
            record.trajectory.push(env.pose().expect("active episode"));
            if r.done {
                record.success = r.info.success;
                break;
            }
            obs = r.obs;
            info = r.info;
        }
        record.actions = env.steps();
        record.path_length = env.path_length();
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub sna: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: SplitMetrics,
    /// One entry per split present, in split order.
    pub splits: Vec<SplitMetrics>,
}

impl MetricsReport {
    pub fn split(&self, split: Split) -> Option<&SplitMetrics> {
        self.splits.iter().find(|m| m.split == split.as_str())
    }
}

fn metrics_of<'a>(name: &str, records: impl Iterator<Item = &'a EpisodeRecord>) -> SplitMetrics {
    let (mut n, mut s, mut spl, mut sna) = (0usize, 0.0, 0.0, 0.0);
    for r in records {
        n += 1;
        if r.success {
            let l = f64::from(r.geodesic);
            let p = f64::from(r.path_length);
            let nstar = f64::from(r.min_actions);
            let na = f64::from(r.actions);
            s += 1.0;
            spl += l / p.max(l);
            sna += nstar / na.max(nstar);
        }
    }
    let n_f = n as f64;
    SplitMetrics {
        split: name.into(),
        episodes: n,
        sr: 100.0 * s / n_f,
        spl: 100.0 * spl / n_f,
        sna: 100.0 * sna / n_f,
    }
}

pub fn compute_metrics(records: &[EpisodeRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Argument("no episode records".into()));
    }
    let splits = Split::ALL
        .iter()
        .filter(|s| records.iter().any(|r| r.split == **s))
        .map(|s| metrics_of(s.as_str(), records.iter().filter(|r| r.split == *s)))
        .collect();
    Ok(MetricsReport {
        overall: metrics_of("all", records.iter()),
        splits,
    })
}

/// Mean predicted variance over steps with occlusion `k >= 2` and over
/// `k == 0` steps.
pub fn sigma2_by_occlusion(records: &[EpisodeRecord]) -> (f64, f64) {
    let mut high = Vec::new();
    let mut clear = Vec::new();
    for r in records {
        for (s, k) in r.sigma2.iter().zip(&r.occlusion) {
            match k {
                0 => clear.push(*s),
                k if *k >= 2 => high.push(*s),
                _ => {}
            }
        }
    }
    (mean(&high), mean(&clear))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in &report.splits {
        out += &format!("{},{},{},{},{}\n", m.split, m.episodes, m.sr, m.spl, m.sna);
    }
    out
}

pub fn episodes_csv(records: &[EpisodeRecord]) -> String {
    let mut out = format!("{EPISODES_HEADER}\n");
    for r in records {
        out += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.split,
            u8::from(r.success),
            r.geodesic,
            r.path_length,
            r.actions,
            r.min_actions,
            r.mean_sigma2(),
            r.mean_occlusion()
        );
    }
    out
}

/// Top-down SVG: walls, start, goal, trajectory and gate means.
pub fn render_svg(map: &GridMap, record: &EpisodeRecord) -> String {
    let px = CELL_PX;
    let center = |x: usize, y: usize| (x * px + px / 2, y * px + px / 2);
    let (w, h) = (map.width() * px, map.height() * px);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n"
    );
    for y in 0..map.height() {
        for x in 0..map.width() {
            if map.tile_at(x as i64, y as i64) == Tile::Wall {
                s += &format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{px}\" height=\"{px}\" fill=\"#404040\"/>\n",
                    x * px,
                    y * px
                );
            }
        }
    }
    let start = record.episode.start;
    let goal = record.episode.goal;
    let (sx, sy) = center(start.x, start.y);
    let (gx, gy) = center(goal.x, goal.y);
    s += &format!("<circle cx=\"{sx}\" cy=\"{sy}\" r=\"6\" fill=\"#2ca02c\"/>\n");
    s += &format!("<circle cx=\"{gx}\" cy=\"{gy}\" r=\"6\" fill=\"#d62728\"/>\n");
    let points: Vec<String> = record
        .trajectory
        .iter()
        .map(|p| {
            let (x, y) = center(p.x, p.y);
            format!("{x},{y}")
        })
        .collect();
    s += &format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
        points.join(" ")
    );
    for (pose, g) in record.trajectory.iter().zip(&record.gate_mean) {
        let (x, y) = center(pose.x, pose.y);
        s += &format!(
            "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"#ff7f0e\" fill-opacity=\"{g:.3}\"><title>gate {g:.3}</title></circle>\n"
        );
    }
    s += "</svg>\n";
    s
}

/// Writes `metrics.csv`, `episodes.csv`, the trajectory sidecar and an SVG
/// for each of the first `svg_count` records.
pub fn export_report(
    records: &[EpisodeRecord],
    report: &MetricsReport,
    maps: &[GridMap],
    out_dir: &Path,
    svg_count: usize,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(report))?;
    write_file(&out_dir.join("episodes.csv"), &episodes_csv(records))?;
    let mut lines = String::new();
    for r in records {
        lines += &serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        lines.push('\n');
    }
    write_file(&out_dir.join(TRAJECTORIES_FILE), &lines)?;
    write_svgs(records.iter().take(svg_count), maps, out_dir)
}

fn write_svgs<'a>(
    records: impl Iterator<Item = &'a EpisodeRecord>,
    maps: &[GridMap],
    out_dir: &Path,
) -> Result<()> {
    for r in records {
        let map = maps.get(r.episode.map_id).ok_or_else(|| {
            Error::Argument(format!("episode {} refers to unknown map {}", r.id, r.episode.map_id))
        })?;
        write_file(&out_dir.join(format!("episode_{}.svg", r.id)), &render_svg(map, r))?;
    }
    Ok(())
}

/// Loads the records listed in an `episodes.csv` from its trajectory
/// sidecar.
pub fn load_records(episodes_csv: &Path) -> Result<Vec<EpisodeRecord>> {
    let f = fs::File::open(episodes_csv).map_err(|e| Error::io(episodes_csv, e))?;
    let mut ids = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(episodes_csv, e))?;
        if i == 0 {
            if line.trim_end() != EPISODES_HEADER {
                return Err(Error::Format(format!("{}: unexpected header", episodes_csv.display())));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let id = line
            .split(',')
            .next()
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| Error::Format(format!("line {}: bad episode id", i + 1)))?;
        ids.push(id);
    }
    let sidecar = episodes_csv.with_file_name(TRAJECTORIES_FILE);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut records = Vec::with_capacity(ids.len());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: EpisodeRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
        records.push(r);
    }
    let found: Vec<u64> = records.iter().map(|r| r.id).collect();
    if found != ids {
        return Err(Error::Format(
            "episodes.csv and its trajectory sidecar list different episodes".into(),
        ));
    }
    Ok(records)
}

/// Renders one SVG per record into `out_dir`.
pub fn plot_records(records: &[EpisodeRecord], maps: &[GridMap], out_dir: &Path) -> Result<usize> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_svgs(records.iter(), maps, out_dir)?;
    Ok(records.len())
}
