//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ravn::env::{Action, RewardConfig};
use ravn::eval::EpisodeRecord;
use ravn::model::{ModelConfig, Network, Parameters, Variant};
use ravn::observe::ObsConfig;
use ravn::trainer::{compute_gae, normalize_advantages, RolloutBatch, RolloutCollector};
use ravn::world::{benchmark_maps, load_map, Cell, GridMap, Heading, Pose, Tile};

pub fn bench() -> Vec<GridMap> {
    benchmark_maps().into_iter().map(|(_, m)| m).collect()
}

fn free(map: &GridMap, x: i64, y: i64) -> bool {
    map.tile_at(x, y) == Tile::Free
}

fn ahead(map: &GridMap, p: Pose) -> Pose {
    let (dx, dy) = match p.heading {
        Heading::North => (0, -1),
        Heading::South => (0, 1),
        Heading::East => (1, 0),
        Heading::West => (-1, 0),
    };
    let (x, y) = (p.x as i64 + dx, p.y as i64 + dy);
    if free(map, x, y) {
        Pose::new(x as usize, y as usize, p.heading)
    } else {
        p
    }
}

fn rotate(h: Heading, left: bool) -> Heading {
    let order = [Heading::North, Heading::East, Heading::South, Heading::West];
    let i = order.iter().position(|o| *o == h).unwrap();
    order[if left { (i + 3) % 4 } else { (i + 1) % 4 }]
}

/// Plain cell BFS.
pub fn bfs_geodesic(map: &GridMap, from: Cell, to: Cell) -> Option<u32> {
    let w = map.width();
    let mut dist = vec![None; w * map.height()];
    dist[from.y * w + from.x] = Some(0u32);
    let mut q = VecDeque::from([from]);
    while let Some(c) = q.pop_front() {
        let d = dist[c.y * w + c.x].unwrap();
        if c == to {
            return Some(d);
        }
        for (dx, dy) in [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)] {
            let (x, y) = (c.x as i64 + dx, c.y as i64 + dy);
            if free(map, x, y) && dist[y as usize * w + x as usize].is_none() {
                dist[y as usize * w + x as usize] = Some(d + 1);
                q.push_back(Cell::new(x as usize, y as usize));
            }
        }
    }
    None
}

/// Forward search over the pose graph; the final Stop is counted.
pub fn forward_min_actions(map: &GridMap, start: Pose, goal: Cell) -> Option<u32> {
    let mut seen = std::collections::HashSet::from([start]);
    let mut q = VecDeque::from([(start, 0u32)]);
    while let Some((p, d)) = q.pop_front() {
        if p.cell() == goal {
            return Some(d + 1);
        }
        let next = [
            ahead(map, p),
            Pose { heading: rotate(p.heading, true), ..p },
            Pose { heading: rotate(p.heading, false), ..p },
        ];
        for n in next {
            if seen.insert(n) {
                q.push_back((n, d + 1));
            }
        }
    }
    None
}

/// Episode outcome recomputed from the raw action log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replay {
    pub success: bool,
    pub path: u32,
    pub geodesic: u32,
    pub actions: u32,
    pub min_actions: u32,
}

pub fn replay(map: &GridMap, r: &EpisodeRecord) -> Replay {
    let mut pose = r.episode.start;
    let mut path = 0;
    for (i, a) in r.action_log.iter().enumerate() {
        let next = match a {
            Action::Forward => ahead(map, pose),
            Action::TurnLeft => Pose { heading: rotate(pose.heading, true), ..pose },
            Action::TurnRight => Pose { heading: rotate(pose.heading, false), ..pose },
            Action::Stop => pose,
        };
        if next.cell() != pose.cell() {
            path += 1;
        }
        pose = next;
        assert_eq!(pose, r.trajectory[i + 1], "trajectory disagrees with actions");
    }
    Replay {
        success: r.action_log.last() == Some(&Action::Stop) && pose.cell() == r.episode.goal,
        path,
        geodesic: bfs_geodesic(map, r.episode.start.cell(), r.episode.goal).unwrap(),
        actions: r.action_log.len() as u32,
        min_actions: forward_min_actions(map, r.episode.start, r.episode.goal).unwrap(),
    }
}

/// (SR, SPL, SNA) in percent.
pub fn brute_metrics(replays: &[Replay]) -> (f64, f64, f64) {
    let n = replays.len() as f64;
    let (mut s, mut spl, mut sna) = (0.0, 0.0, 0.0);
    for r in replays {
        if r.success {
            s += 1.0;
            spl += f64::from(r.geodesic) / f64::from(r.path.max(r.geodesic));
            sna += f64::from(r.min_actions) / f64::from(r.actions.max(r.min_actions));
        }
    }
    (100.0 * s / n, 100.0 * spl / n, 100.0 * sna / n)
}

/// Random map with wall density `p`; `None` when fewer than two cells are free.
pub fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Option<GridMap> {
    let text: Vec<String> = (0..h)
        .map(|_| (0..w).map(|_| if rng.random_bool(p) { '#' } else { '.' }).collect())
        .collect();
    load_map(&text.join("\n")).ok()
}

pub fn open_map(w: usize, h: usize) -> GridMap {
    load_map(&vec![".".repeat(w); h].join("\n")).unwrap()
}

/// A_t as the explicit double sum over future TD errors.
pub fn gae_double_sum(r: &[f64], v: &[f64], done: &[bool], boot: f64, gamma: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if t + 1 < n { v[t + 1] } else { boot };
            r[t] + gamma * next * if done[t] { 0.0 } else { 1.0 } - v[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for l in t..n {
                sum += w * delta[l];
                if done[l] {
                    break;
                }
                w *= gamma * lam;
            }
            sum
        })
        .collect()
}

pub fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        audio_features: 8,
        visual_features: 8,
        geo_features: 8,
        hidden: 8,
        gate_hidden: 8,
        variant,
        ..ModelConfig::default()
    }
}

/// A short seeded rollout with episode boundaries inside the segments,
/// advantages filled and normalized.
pub fn seeded_batch(net: &Network, params: &Parameters, envs: usize, steps: usize, max_steps: u32) -> RolloutBatch {
    let mut c = RolloutCollector::new(
        Arc::from(bench()),
        Arc::new(ObsConfig::default()),
        RewardConfig::default(),
        envs,
        net.config().hidden,
        &[0, 1, 2, 3],
        max_steps,
        2024,
    )
    .unwrap();
    let mut batch = c.collect(net, params, steps).unwrap();
    compute_gae(&mut batch, 0.99, 0.95);
    normalize_advantages(&mut batch);
    batch
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
