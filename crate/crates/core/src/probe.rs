//! Supervised probe of the geometry reasoner: fit the audio encoder and AGR
//! heads on (audio, target) pairs, then check whether the predicted variance
//! tracks occlusion on held-out data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ang_loss_grad, dist_nll, dist_term};
use crate::model::{GatePin, ModelConfig, Network, Parameters, StepGrad, Variant};
use crate::observe::{
    audio_rng, audio_scene, class_signature, synthesize_audio, targets_from, GeometricTargets, ObsConfig,
};
use crate::trainer::{derive_seed, Adam};
use crate::world::{sample_episode, GridMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub classes: Vec<u32>,
    pub model: ModelConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_samples: 10_000,
            test_samples: 2_000,
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 0,
            classes: (0..8).collect(),
            model: ModelConfig {
                variant: Variant::AgrNll,
                ..ModelConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub audio: Vec<f64>,
    pub targets: GeometricTargets,
    pub occlusion: u32,
}

/// Draws agent/source placements over `maps` and renders their audio.
pub fn generate_samples(
    maps: &[GridMap],
    obs_cfg: &ObsConfig,
    classes: &[u32],
    count: usize,
    seed: u64,
) -> Result<Vec<ProbeSample>> {
    if maps.is_empty() {
        return Err(Error::Argument("no maps".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let map_id = rng.random_range(0..maps.len());
        let map = &maps[map_id];
        let ep = sample_episode(map, map_id, &mut rng, classes, 1)?;
        let scene = audio_scene(map, ep.start, ep.goal)?;
        let sig = class_signature(ep.sound_class, obs_cfg.audio_seed, obs_cfg.freq_bins);
        let mut noise = audio_rng(derive_seed(seed, 0x9000), i as u64, 0);
        let audio = synthesize_audio(scene, &sig, &mut noise, obs_cfg);
        out.push(ProbeSample {
            audio: audio.spectrum,
            targets: targets_from(ep.start, ep.goal, scene.geodesic, obs_cfg.d_max),
            occlusion: scene.occlusion,
        });
    }
    Ok(out)
}

/// Mid-ranks (ties share their average rank), 1-based.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with tie correction.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub spearman: f64,
    /// Mean held-out distance NLL with predicted variances.
    pub nll: f64,
    /// Best held-out NLL with the predicted means and one shared variance.
    pub constant_nll: f64,
    pub constant_log_var: f64,
    pub train_nll: f64,
}

struct Prediction {
    mu: f64,
    log_var: f64,
}

fn predict(net: &Network, params: &Parameters, s: &ProbeSample, zeros_v: &[f64], zeros_h: &[f64]) -> Prediction {
    let c = net.step_unchecked(params.data(), &s.audio, zeros_v, zeros_h, GatePin::Free);
    let agr = c.agr.expect("probe network has a geometry reasoner");
    Prediction {
        mu: agr.mu,
        log_var: agr.log_var,
    }
}

/// Grid search over a shared log-variance for fixed means.
pub fn best_constant_nll(mu: &[f64], y: &[f64]) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut lv = -14.0;
    while lv <= 4.0 {
        let nll = mu.iter().zip(y).map(|(m, t)| dist_nll(*m, lv, *t)).sum::<f64>() / mu.len() as f64;
        if nll < best.0 {
            best = (nll, lv);
        }
        lv += 0.005;
    }
    best
}

/// Trains the probe and scores it on held-out samples.
pub fn run_probe(cfg: &ProbeConfig, maps: &[GridMap], obs_cfg: &ObsConfig) -> Result<ProbeReport> {
    if !cfg.model.variant.has_agr() {
        return Err(Error::Configuration("probe needs a geometry reasoner".into()));
    }
    let net = Network::new(cfg.model.clone())?;
    let mut params = net.init_params(derive_seed(cfg.seed, 11));
    let train = generate_samples(maps, obs_cfg, &cfg.classes, cfg.train_samples, derive_seed(cfg.seed, 12))?;
    let test = generate_samples(maps, obs_cfg, &cfg.classes, cfg.test_samples, derive_seed(cfg.seed, 13))?;
    let zeros_v = vec![0.0; cfg.model.rays];
    let zeros_h = vec![0.0; cfg.model.hidden];
    let mut adam = Adam::new(params.len(), cfg.learning_rate, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 14));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut train_nll = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = vec![0.0; params.len()];
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &train[i];
                let c = net.step_unchecked(params.data(), &s.audio, &zeros_v, &zeros_h, GatePin::Free);
                let agr = c.agr.as_ref().expect("probe network has a geometry reasoner");
                let (l, gmu, glv) = dist_term(Variant::AgrNll, agr.mu, agr.log_var, s.targets.y_dist);
                epoch_nll += l;
                let out = StepGrad {
                    d_logits: vec![0.0; 4],
                    d_mu: gmu * inv,
                    d_log_var: glv * inv,
                    d_phi: ang_loss_grad(agr.phi_hat, s.targets.y_ang) * inv,
                    ..StepGrad::default()
                };
                net.backward_step(&params, &c, &out, &zeros_h, &mut grads);
            }
            adam.step(params.data_mut(), &grads);
        }
        train_nll = epoch_nll / train.len() as f64;
        if !train_nll.is_finite() {
            return Err(Error::NonFinite {
                update: 0,
                detail: "probe training diverged".into(),
            });
        }
    }

    let preds: Vec<Prediction> = test
        .iter()
        .map(|s| predict(&net, &params, s, &zeros_v, &zeros_h))
        .collect();
    let mu: Vec<f64> = preds.iter().map(|p| p.mu).collect();
    let y: Vec<f64> = test.iter().map(|s| s.targets.y_dist).collect();
    let nll = preds
        .iter()
        .zip(&y)
        .map(|(p, t)| dist_nll(p.mu, p.log_var, *t))
        .sum::<f64>()
        / test.len() as f64;
    let (constant_nll, constant_log_var) = best_constant_nll(&mu, &y);
    let sigma2: Vec<f64> = preds.iter().map(|p| p.log_var.exp()).collect();
    let k: Vec<f64> = test.iter().map(|s| f64::from(s.occlusion)).collect();
    Ok(ProbeReport {
        spearman: spearman(&sigma2, &k),
        nll,
        constant_nll,
        constant_log_var,
        train_nll,
    })
}
