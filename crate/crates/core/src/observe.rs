//! Synthetic observations: a binaural spectrum whose panning and noise
//! degrade with occlusion, forward depth rays, and the geometric targets
//! used for auxiliary supervision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::wrap_angle;
use crate::world::{geodesic_distance, occlusion_count, Cell, GridMap, Pose, Tile};

/// Observation synthesis constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsConfig {
    /// Frequency bins per channel (F).
    pub freq_bins: usize,
    /// Depth rays (R).
    pub rays: usize,
    /// Geodesic normalizer for `y_dist`, in cells.
    pub d_max: f64,
    pub azimuth_noise_base: f64,
    pub azimuth_noise_per_wall: f64,
    /// Occlusion count at which azimuth noise saturates.
    pub azimuth_noise_cap: u32,
    pub spectral_noise_base: f64,
    pub spectral_noise_per_wall: f64,
    pub fov_degrees: f64,
    pub ray_step: f64,
    pub ray_range: f64,
    pub audio_seed: u64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        ObsConfig {
            freq_bins: 8,
            rays: 9,
            d_max: 32.0,
            azimuth_noise_base: 0.1,
            azimuth_noise_per_wall: 0.4,
            azimuth_noise_cap: 3,
            spectral_noise_base: 0.02,
            spectral_noise_per_wall: 0.02,
            fov_degrees: 90.0,
            ray_step: 0.1,
            ray_range: 10.0,
            audio_seed: 7,
        }
    }
}

impl ObsConfig {
    /// Same geometry with every noise source switched off.
    pub fn noiseless(&self) -> ObsConfig {
        ObsConfig {
            azimuth_noise_base: 0.0,
            azimuth_noise_per_wall: 0.0,
            spectral_noise_base: 0.0,
            spectral_noise_per_wall: 0.0,
            ..self.clone()
        }
    }

    pub fn audio_dim(&self) -> usize {
        2 * self.freq_bins
    }

    pub fn azimuth_sigma(&self, k: u32) -> f64 {
        self.azimuth_noise_base + self.azimuth_noise_per_wall * f64::from(k.min(self.azimuth_noise_cap))
    }

    pub fn spectral_sigma(&self, k: u32) -> f64 {
        self.spectral_noise_base + self.spectral_noise_per_wall * f64::from(k)
    }
}

/// `[left || right]` spectrum, `F` bins per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioObs {
    pub spectrum: Vec<f64>,
}

impl AudioObs {
    pub fn channels(&self) -> (&[f64], &[f64]) {
        self.spectrum.split_at(self.spectrum.len() / 2)
    }

    pub fn energy(&self) -> f64 {
        self.spectrum.iter().map(|v| v * v).sum()
    }
}

/// Normalized depth per ray, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualObs {
    pub depths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub audio: AudioObs,
    pub visual: VisualObs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricTargets {
    pub y_dist: f64,
    pub y_ang: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    pub class_id: u32,
    pub signature: Vec<f64>,
}

/// Spectral fingerprint of a sound class, keyed on `(audio_seed, class_id)`.
pub fn class_signature(class_id: u32, audio_seed: u64, bins: usize) -> ClassSignature {
    let mut rng = ChaCha8Rng::seed_from_u64(audio_seed);
    rng.set_stream(u64::from(class_id));
    let signature = (0..bins).map(|_| rng.random_range(0.1..=1.0)).collect();
    ClassSignature {
        class_id,
        signature,
    }
}

/// Generator for the audio noise of one render, keyed on the global audio
/// seed, an episode identifier and the step index.
pub fn audio_rng(audio_seed: u64, episode_id: u64, step: u32) -> ChaCha8Rng {
    // Separate the audio noise key space from the class-signature streams.
    let mut rng = ChaCha8Rng::seed_from_u64(audio_seed ^ 0x5eed_a0d1_0000_0000);
    rng.set_stream(episode_id);
    rng.set_word_pos(u128::from(step) << 16);
    rng
}

/// Direction from `pose` to `goal` in the agent frame: 0 ahead, +pi/2 to the
/// left, wrapped to `(-pi, pi]`.
pub fn relative_azimuth(pose: Pose, goal: Cell) -> Result<f64> {
    if pose.cell() == goal {
        return Err(Error::Argument("azimuth undefined on the goal cell".into()));
    }
    let dx = goal.x as f64 - pose.x as f64;
    let dy_up = pose.y as f64 - goal.y as f64;
    Ok(wrap_angle(dy_up.atan2(dx) - pose.heading.angle()))
}

/// Azimuth of the source, or 0 when the agent stands on it.
pub fn source_azimuth(pose: Pose, goal: Cell) -> f64 {
    relative_azimuth(pose, goal).unwrap_or(0.0)
}

/// Hidden acoustic state of one render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioScene {
    /// Clean relative azimuth.
    pub azimuth: f64,
    /// Geodesic distance, cells.
    pub geodesic: f64,
    pub occlusion: u32,
}

/// Channel gains of the linear panning law.
pub fn panning_gains(azimuth: f64) -> (f64, f64) {
    let s = azimuth.sin();
    ((1.0 + s) / 2.0, (1.0 - s) / 2.0)
}

/// Renders the spectrum for a known acoustic scene.
pub fn synthesize_audio<R: Rng + ?Sized>(
    scene: AudioScene,
    sig: &ClassSignature,
    rng: &mut R,
    cfg: &ObsConfig,
) -> AudioObs {
    let az_noise: f64 = rng.sample(StandardNormal);
    let azimuth = wrap_angle(scene.azimuth + cfg.azimuth_sigma(scene.occlusion) * az_noise);
    let (gl, gr) = panning_gains(azimuth);
    let amp = 1.0 / (1.0 + scene.geodesic);
    let sigma_n = cfg.spectral_sigma(scene.occlusion);
    let f = sig.signature.len();
    let mut spectrum = Vec::with_capacity(2 * f);
    for gain in [gl, gr] {
        for s in &sig.signature {
            let eta: f64 = rng.sample(StandardNormal);
            spectrum.push(amp * gain * s + sigma_n * eta);
        }
    }
    AudioObs { spectrum }
}

/// Acoustic scene between `pose` and the source at `goal`.
pub fn audio_scene(map: &GridMap, pose: Pose, goal: Cell) -> Result<AudioScene> {
    let d = geodesic_distance(map, pose.cell(), goal)?.ok_or(Error::Unreachable {
        from: (pose.x, pose.y),
    })?;
    Ok(AudioScene {
        azimuth: source_azimuth(pose, goal),
        geodesic: f64::from(d),
        occlusion: occlusion_count(map, pose.cell(), goal),
    })
}

pub fn render_audio<R: Rng + ?Sized>(
    map: &GridMap,
    pose: Pose,
    goal: Cell,
    sig: &ClassSignature,
    rng: &mut R,
    cfg: &ObsConfig,
) -> Result<AudioObs> {
    Ok(synthesize_audio(audio_scene(map, pose, goal)?, sig, rng, cfg))
}

/// Casts `cfg.rays` rays across the field of view, leftmost first.
///
/// Depth is measured from the agent's cell center to the first wall sample
/// plus half a cell, so a wall directly ahead reads one cell.
pub fn render_depth(map: &GridMap, pose: Pose, cfg: &ObsConfig) -> VisualObs {
    let fov = cfg.fov_degrees.to_radians();
    let origin = (pose.x as f64 + 0.5, pose.y as f64 + 0.5);
    let n = cfg.rays;
    let max_marches = (cfg.ray_range / cfg.ray_step).round() as usize;
    let depths = (0..n)
        .map(|i| {
            let offset = if n == 1 {
                0.0
            } else {
                fov * (0.5 - i as f64 / (n - 1) as f64)
            };
            let theta = pose.heading.angle() + offset;
            // map y grows downward
            let (dx, dy) = (theta.cos(), -theta.sin());
            let mut hit = cfg.ray_range;
            for step in 1..=max_marches {
                let t = step as f64 * cfg.ray_step;
                let (px, py) = (origin.0 + t * dx, origin.1 + t * dy);
                if map.tile_at(px.floor() as i64, py.floor() as i64) == Tile::Wall {
                    hit = t + 0.5;
                    break;
                }
            }
            (hit / cfg.ray_range).min(1.0)
        })
        .collect();
    VisualObs { depths }
}

pub fn targets(map: &GridMap, pose: Pose, goal: Cell, d_max: f64) -> Result<GeometricTargets> {
    let d = geodesic_distance(map, pose.cell(), goal)?
        .ok_or_else(|| Error::Argument("goal unreachable".into()))?;
    Ok(targets_from(pose, goal, f64::from(d), d_max))
}

/// Targets for a known geodesic distance.
pub fn targets_from(pose: Pose, goal: Cell, geodesic: f64, d_max: f64) -> GeometricTargets {
    GeometricTargets {
        y_dist: (geodesic / d_max).min(1.0),
        y_ang: source_azimuth(pose, goal),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{load_map, Heading};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn open(w: usize, h: usize) -> GridMap {
        load_map(&vec![".".repeat(w); h].join("\n")).unwrap()
    }

    #[test]
    fn signatures_are_deterministic_and_bounded() {
        let a = class_signature(0, 11, 16);
        assert_eq!(a, class_signature(0, 11, 16));
        assert_ne!(a.signature, class_signature(1, 11, 16).signature);
        for id in 0..50 {
            let s = class_signature(id, 3, 16);
            assert!(s.signature.iter().all(|v| (0.1..=1.0).contains(v)));
        }
    }

    #[test]
    fn azimuth_conventions() {
        let east = Pose::new(2, 2, Heading::East);
        assert_eq!(relative_azimuth(east, Cell::new(4, 2)).unwrap(), 0.0);
        assert!((relative_azimuth(east, Cell::new(2, 0)).unwrap() - FRAC_PI_2).abs() < 1e-12);
        let north = Pose::new(2, 2, Heading::North);
        assert_eq!(relative_azimuth(north, Cell::new(2, 4)).unwrap(), PI);
        assert!(relative_azimuth(north, Cell::new(2, 2)).is_err());
    }

    #[test]
    fn centered_render_on_goal() {
        let cfg = ObsConfig::default().noiseless();
        let m = open(5, 5);
        let sig = class_signature(2, 1, cfg.freq_bins);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = render_audio(&m, Pose::new(1, 1, Heading::East), Cell::new(1, 1), &sig, &mut rng, &cfg).unwrap();
        let (l, r) = obs.channels();
        for ((a, b), s) in l.iter().zip(r).zip(&sig.signature) {
            assert!((a - 0.5 * s).abs() < 1e-15);
            assert!((b - 0.5 * s).abs() < 1e-15);
        }
    }

    #[test]
    fn hard_left_render() {
        let cfg = ObsConfig::default().noiseless();
        let m = open(5, 5);
        let sig = class_signature(2, 1, cfg.freq_bins);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // goal two cells north of an east-facing agent
        let obs = render_audio(&m, Pose::new(1, 3, Heading::East), Cell::new(1, 1), &sig, &mut rng, &cfg).unwrap();
        let (l, r) = obs.channels();
        let a = 1.0 / 3.0;
        for ((x, y), s) in l.iter().zip(r).zip(&sig.signature) {
            assert!((x - a * s).abs() < 1e-12);
            assert!(y.abs() < 1e-12);
        }
    }

    #[test]
    fn occlusion_raises_render_variance() {
        let cfg = ObsConfig::default();
        let sig = class_signature(0, 1, cfg.freq_bins);
        let variance = |k: u32| {
            let scene = AudioScene { azimuth: 0.3, geodesic: 4.0, occlusion: k };
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let renders: Vec<AudioObs> =
                (0..1000).map(|_| synthesize_audio(scene, &sig, &mut rng, &cfg)).collect();
            let dim = renders[0].spectrum.len();
            (0..dim)
                .map(|i| {
                    let mean = renders.iter().map(|r| r.spectrum[i]).sum::<f64>() / 1000.0;
                    renders.iter().map(|r| (r.spectrum[i] - mean).powi(2)).sum::<f64>() / 999.0
                })
                .sum::<f64>()
        };
        assert!(variance(3) > variance(0));
    }

    #[test]
    fn gains_conserve_and_invert() {
        for i in 0..200 {
            let phi = -PI + i as f64 * 0.0314;
            let (gl, gr) = panning_gains(phi);
            assert!((gl + gr - 1.0).abs() < 1e-15);
        }
        let cfg = ObsConfig::default().noiseless();
        let m = open(9, 9);
        let sig = class_signature(5, 9, cfg.freq_bins);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (pose, goal) in [
            (Pose::new(4, 4, Heading::North), Cell::new(7, 1)),
            (Pose::new(0, 8, Heading::West), Cell::new(3, 2)),
            (Pose::new(2, 5, Heading::South), Cell::new(8, 8)),
        ] {
            let obs = render_audio(&m, pose, goal, &sig, &mut rng, &cfg).unwrap();
            let (l, r) = obs.channels();
            let (ls, rs): (f64, f64) = (l.iter().sum(), r.iter().sum());
            let recovered = (2.0 * ls / (ls + rs) - 1.0).asin().sin();
            let phi = relative_azimuth(pose, goal).unwrap();
            assert!((recovered - phi.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn energy_falls_with_distance() {
        let cfg = ObsConfig::default().noiseless();
        let sig = class_signature(1, 2, cfg.freq_bins);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let energies: Vec<f64> = (0..20)
            .map(|d| {
                let scene = AudioScene { azimuth: 0.7, geodesic: d as f64, occlusion: 0 };
                synthesize_audio(scene, &sig, &mut rng, &cfg).energy()
            })
            .collect();
        assert!(energies.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn audio_noise_is_reproducible() {
        let cfg = ObsConfig::default();
        let sig = class_signature(1, 2, cfg.freq_bins);
        let scene = AudioScene { azimuth: 0.1, geodesic: 3.0, occlusion: 2 };
        let a = synthesize_audio(scene, &sig, &mut audio_rng(5, 17, 3), &cfg);
        let b = synthesize_audio(scene, &sig, &mut audio_rng(5, 17, 3), &cfg);
        let c = synthesize_audio(scene, &sig, &mut audio_rng(5, 17, 4), &cfg);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn depth_examples() {
        let cfg = ObsConfig::default();
        let m = load_map("#####\n#...#\n#...#\n#####").unwrap();
        let d = render_depth(&m, Pose::new(1, 1, Heading::North), &cfg);
        let center = d.depths[cfg.rays / 2];
        assert!((center - 0.1).abs() <= cfg.ray_step / cfg.ray_range + 1e-12);
        assert_eq!(d, render_depth(&m, Pose::new(1, 1, Heading::North), &cfg));

        let void = open(30, 30);
        let d = render_depth(&void, Pose::new(15, 15, Heading::West), &cfg);
        assert!(d.depths.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn target_examples() {
        let m = open(45, 3);
        let pose = Pose::new(0, 1, Heading::East);
        let t = targets(&m, pose, Cell::new(5, 1), 20.0).unwrap();
        assert!((t.y_dist - 0.25).abs() < 1e-15);
        assert_eq!(t.y_ang, 0.0);
        let t = targets(&m, pose, Cell::new(40, 1), 20.0).unwrap();
        assert_eq!(t.y_dist, 1.0);
    }
}
