//! The navigation network: audio/visual encoders, the acoustic geometry
//! reasoner (shared encoder with distance, azimuth and projection heads),
//! the reliability gate over visual features, and the recurrent
//! actor-critic.
//!
//! All parameters live in one flat `f64` buffer addressed through named
//! tensors. Forward passes return a [`StepCache`] that [`Network::backward_step`]
//! consumes to accumulate gradients into a buffer of the same layout.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::losses::wrap_angle;
use crate::observe::{AudioObs, VisualObs};

/// Ablation ladder, from plain concatenation to the full gated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    AgrMse,
    AgrNll,
    Ravn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::AgrMse, Variant::AgrNll, Variant::Ravn];

    pub fn has_agr(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_gate(self) -> bool {
        self == Variant::Ravn
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::AgrMse => "agr_mse",
            Variant::AgrNll => "agr_nll",
            Variant::Ravn => "ravn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation {
                key: "variant".into(),
                reason: format!("unknown variant {s:?}; expected baseline, agr_mse, agr_nll or ravn"),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Spectrum bins per channel; the audio input has `2 * freq_bins` entries.
    pub freq_bins: usize,
    /// Depth rays.
    pub rays: usize,
    pub audio_features: usize,
    pub visual_features: usize,
    pub geo_features: usize,
    pub hidden: usize,
    pub gate_hidden: usize,
    pub variant: Variant,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            freq_bins: 8,
            rays: 9,
            audio_features: 32,
            visual_features: 32,
            geo_features: 16,
            hidden: 32,
            gate_hidden: 32,
            variant: Variant::Ravn,
            log_var_min: -6.0,
            log_var_max: 6.0,
        }
    }
}

impl ModelConfig {
    pub fn audio_dim(&self) -> usize {
        2 * self.freq_bins
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("freq_bins", self.freq_bins),
            ("rays", self.rays),
            ("audio_features", self.audio_features),
            ("visual_features", self.visual_features),
            ("geo_features", self.geo_features),
            ("hidden", self.hidden),
            ("gate_hidden", self.gate_hidden),
        ];
        for (key, v) in dims {
            if v == 0 {
                return Err(Error::Validation {
                    key: key.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if !(self.log_var_min < self.log_var_max) {
            return Err(Error::Validation {
                key: "log_var_min".into(),
                reason: "must be below log_var_max".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter buffer with a named-tensor index.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl Parameters {
    pub fn zeros(specs: Vec<TensorSpec>) -> Self {
        let n = specs.iter().map(TensorSpec::len).sum();
        Parameters {
            specs,
            data: vec![0.0; n],
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec(name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (o, n) = self.spec(name).map(|s| (s.offset, s.len()))?;
        Some(&mut self.data[o..o + n])
    }

    /// Copies every tensor whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &Parameters) -> usize {
        let mut copied = 0;
        for s in self.specs.clone() {
            if let Some(o) = other.spec(&s.name) {
                if o.shape == s.shape {
                    self.data[s.offset..s.offset + s.len()]
                        .copy_from_slice(&other.data[o.offset..o.offset + o.len()]);
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Affine map `y = W x + b` with `W` stored row-major at `w`.
#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Linear {
    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let w = &p[self.w..self.w + self.rows * self.cols];
        let b = &p[self.b..self.b + self.rows];
        w.chunks_exact(self.cols)
            .zip(b)
            .map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients and, when requested, `W^T dy` into `dx`.
    fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        let cols = self.cols;
        {
            let gw = &mut g[self.w..self.w + self.rows * cols];
            for (row, d) in gw.chunks_exact_mut(cols).zip(dy) {
                if *d != 0.0 {
                    for (gi, xi) in row.iter_mut().zip(x) {
                        *gi += d * xi;
                    }
                }
            }
        }
        for (gb, d) in g[self.b..self.b + self.rows].iter_mut().zip(dy) {
            *gb += d;
        }
        if let Some(dx) = dx {
            let w = &p[self.w..self.w + self.rows * cols];
            for (row, d) in w.chunks_exact(cols).zip(dy) {
                if *d != 0.0 {
                    for (o, wi) in dx.iter_mut().zip(row) {
                        *o += d * wi;
                    }
                }
            }
        }
    }
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    offset: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.offset;
        self.offset += shape.iter().product::<usize>();
        self.specs.push(TensorSpec {
            name,
            shape,
            offset,
        });
        offset
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> Linear {
        let w = self.tensor(format!("{name}.weight"), vec![rows, cols]);
        let b = self.tensor(format!("{name}.bias"), vec![rows]);
        Linear { w, b, rows, cols }
    }
}

#[derive(Debug, Clone, Copy)]
struct AgrLayers {
    encoder: Linear,
    distance: Linear,
    azimuth: Linear,
    projection: Linear,
}

/// Everything the geometry reasoner produces for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgrOutput {
    pub z_geo: Vec<f64>,
    pub g: Vec<f64>,
    pub mu: f64,
    /// Clamped log-variance.
    pub log_var: f64,
    pub phi_hat: f64,
    log_var_raw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub s: Vec<f64>,
    pub h: Vec<f64>,
    pub logits: Vec<f64>,
    pub value: f64,
}

/// Overrides the visual gate with a constant, for probing the gated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatePin {
    #[default]
    Free,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

/// Intermediate values of one full forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    audio_in: Vec<f64>,
    audio_hidden: Vec<f64>,
    pub f_a: Vec<f64>,
    visual_in: Vec<f64>,
    visual_hidden: Vec<f64>,
    pub f_v: Vec<f64>,
    pub agr: Option<AgrOutput>,
    gate_hidden: Vec<f64>,
    /// Gate actually applied (absent for ungated variants).
    pub gate: Option<Vec<f64>>,
    gate_pinned: bool,
    pub f_v_eff: Vec<f64>,
    gru: GruCache,
    pub policy: PolicyOutput,
}

/// Upstream gradient of one step's outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepGrad {
    pub d_logits: Vec<f64>,
    pub d_value: f64,
    pub d_mu: f64,
    /// With respect to the clamped log-variance.
    pub d_log_var: f64,
    pub d_phi: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn tanh_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

/// `d_pre = d_out * (1 - y^2)` for a tanh output `y`.
fn tanh_back(y: &[f64], d: &[f64]) -> Vec<f64> {
    y.iter().zip(d).map(|(y, d)| d * (1.0 - y * y)).collect()
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    specs: Vec<TensorSpec>,
    audio1: Linear,
    audio2: Linear,
    visual1: Linear,
    visual2: Linear,
    agr: Option<AgrLayers>,
    gate: Option<(Linear, Linear)>,
    gru_ih: Linear,
    gru_hh: Linear,
    actor: Linear,
    critic: Linear,
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = LayoutBuilder {
            specs: Vec::new(),
            offset: 0,
        };
        let (da, dv, dg, h) = (
            cfg.audio_features,
            cfg.visual_features,
            cfg.geo_features,
            cfg.hidden,
        );
        let audio1 = b.linear("audio.fc1", da, cfg.audio_dim());
        let audio2 = b.linear("audio.fc2", da, da);
        let visual1 = b.linear("visual.fc1", dv, cfg.rays);
        let visual2 = b.linear("visual.fc2", dv, dv);
        let agr = cfg.variant.has_agr().then(|| AgrLayers {
            encoder: b.linear("agr.encoder", dg, da),
            distance: b.linear("agr.distance", 2, dg),
            azimuth: b.linear("agr.azimuth", 1, dg),
            projection: b.linear("agr.projection", dv, dg),
        });
        let gate = cfg.variant.has_gate().then(|| {
            (
                b.linear("gate.fc1", cfg.gate_hidden, dv),
                b.linear("gate.fc2", dv, cfg.gate_hidden),
            )
        });
        let gru_ih = b.linear("gru.input", 3 * h, da + dv);
        let gru_hh = b.linear("gru.hidden", 3 * h, h);
        let actor = b.linear("actor", Action::COUNT, h);
        let critic = b.linear("critic", 1, h);
        Ok(Network {
            cfg,
            specs: b.specs,
            audio1,
            audio2,
            visual1,
            visual2,
            agr,
            gate,
            gru_ih,
            gru_hh,
            actor,
            critic,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn zero_params(&self) -> Parameters {
        Parameters::zeros(self.specs.clone())
    }

    /// Uniform fan-in initialization with zero biases; the actor starts
    /// close to a uniform policy.
    pub fn init_params(&self, seed: u64) -> Parameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.zero_params();
        for spec in &self.specs {
            if spec.shape.len() != 2 {
                continue;
            }
            let bound = 1.0 / (spec.shape[1] as f64).sqrt();
            let scale = if spec.name.starts_with("actor") { 0.1 } else { 1.0 };
            for w in &mut p.data[spec.offset..spec.offset + spec.len()] {
                *w = scale * rng.random_range(-bound..bound);
            }
        }
        p
    }

    fn check_params(&self, p: &Parameters) -> Result<()> {
        let expected = self.specs.iter().map(TensorSpec::len).sum();
        if p.len() != expected {
            return Err(Error::Shape {
                what: "parameters",
                expected,
                got: p.len(),
            });
        }
        Ok(())
    }

    fn check(what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Shape {
                what,
                expected,
                got,
            })
        }
    }

    fn audio_forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h1 = tanh_vec(self.audio1.forward(p, x));
        let out = tanh_vec(self.audio2.forward(p, &h1));
        (h1, out)
    }

    fn visual_forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h1 = tanh_vec(self.visual1.forward(p, x));
        let out = tanh_vec(self.visual2.forward(p, &h1));
        (h1, out)
    }

    pub fn encode_audio(&self, p: &Parameters, obs: &AudioObs) -> Result<Vec<f64>> {
        self.check_params(p)?;
        Self::check("audio observation", self.cfg.audio_dim(), obs.spectrum.len())?;
        Ok(self.audio_forward(&p.data, &obs.spectrum).1)
    }

    pub fn encode_visual(&self, p: &Parameters, obs: &VisualObs) -> Result<Vec<f64>> {
        self.check_params(p)?;
        Self::check("visual observation", self.cfg.rays, obs.depths.len())?;
        Ok(self.visual_forward(&p.data, &obs.depths).1)
    }

    fn agr_layers(&self) -> Result<&AgrLayers> {
        self.agr.as_ref().ok_or_else(|| {
            Error::Configuration(format!(
                "variant {} has no geometry reasoner",
                self.cfg.variant
            ))
        })
    }

    fn agr_raw(&self, layers: &AgrLayers, p: &[f64], f_a: &[f64]) -> AgrOutput {
        let z_geo = tanh_vec(layers.encoder.forward(p, f_a));
        let dist = layers.distance.forward(p, &z_geo);
        let phi_raw = layers.azimuth.forward(p, &z_geo)[0];
        let g = layers.projection.forward(p, &z_geo);
        AgrOutput {
            g,
            mu: dist[0],
            log_var: dist[1].clamp(self.cfg.log_var_min, self.cfg.log_var_max),
            log_var_raw: dist[1],
            phi_hat: wrap_angle(phi_raw),
            z_geo,
        }
    }

    pub fn agr_forward(&self, p: &Parameters, f_a: &[f64]) -> Result<AgrOutput> {
        let layers = self.agr_layers()?;
        self.check_params(p)?;
        Self::check("audio features", self.cfg.audio_features, f_a.len())?;
        Ok(self.agr_raw(layers, &p.data, f_a))
    }

    fn gate_raw(&self, layers: &(Linear, Linear), p: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden = tanh_vec(layers.0.forward(p, g));
        let m = layers.1.forward(p, &hidden).into_iter().map(sigmoid).collect();
        (hidden, m)
    }

    /// Returns the gate `m` and the modulated visual features `f_v * m`.
    pub fn ragm_modulate(&self, p: &Parameters, f_v: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let layers = self.gate.as_ref().ok_or_else(|| {
            Error::Configuration(format!("variant {} has no visual gate", self.cfg.variant))
        })?;
        self.check_params(p)?;
        Self::check("visual features", self.cfg.visual_features, f_v.len())?;
        Self::check("geometric features", self.cfg.visual_features, g.len())?;
        let (_, m) = self.gate_raw(layers, &p.data, g);
        let modulated = apply_gate(f_v, &m);
        Ok((m, modulated))
    }

    fn gru_forward(&self, p: &[f64], x: Vec<f64>, h_prev: &[f64]) -> (GruCache, Vec<f64>) {
        let h = self.cfg.hidden;
        let gi = self.gru_ih.forward(p, &x);
        let gh = self.gru_hh.forward(p, h_prev);
        let r: Vec<f64> = (0..h).map(|i| sigmoid(gi[i] + gh[i])).collect();
        let z: Vec<f64> = (0..h).map(|i| sigmoid(gi[h + i] + gh[h + i])).collect();
        let hn = gh[2 * h..].to_vec();
        let n: Vec<f64> = (0..h).map(|i| (gi[2 * h + i] + r[i] * hn[i]).tanh()).collect();
        let out = (0..h)
            .map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i])
            .collect();
        (
            GruCache {
                x,
                h_prev: h_prev.to_vec(),
                r,
                z,
                n,
                hn,
            },
            out,
        )
    }

    fn heads(&self, p: &[f64], s: Vec<f64>) -> PolicyOutput {
        let logits = self.actor.forward(p, &s);
        let value = self.critic.forward(p, &s)[0];
        PolicyOutput {
            h: s.clone(),
            s,
            logits,
            value,
        }
    }

    /// One recurrent policy step on already-encoded features.
    pub fn policy_step(&self, p: &Parameters, f_a: &[f64], f_v_eff: &[f64], h_prev: &[f64]) -> Result<PolicyOutput> {
        self.check_params(p)?;
        Self::check("audio features", self.cfg.audio_features, f_a.len())?;
        Self::check("visual features", self.cfg.visual_features, f_v_eff.len())?;
        Self::check("hidden state", self.cfg.hidden, h_prev.len())?;
        let x = [f_a, f_v_eff].concat();
        let (_, s) = self.gru_forward(&p.data, x, h_prev);
        Ok(self.heads(&p.data, s))
    }

    /// Full forward step from raw observations, wired per variant.
    pub fn step(
        &self,
        p: &Parameters,
        audio: &AudioObs,
        visual: &VisualObs,
        h_prev: &[f64],
        pin: GatePin,
    ) -> Result<StepCache> {
        self.check_params(p)?;
        Self::check("audio observation", self.cfg.audio_dim(), audio.spectrum.len())?;
        Self::check("visual observation", self.cfg.rays, visual.depths.len())?;
        Self::check("hidden state", self.cfg.hidden, h_prev.len())?;
        Ok(self.step_unchecked(&p.data, &audio.spectrum, &visual.depths, h_prev, pin))
    }

    pub(crate) fn step_unchecked(
        &self,
        p: &[f64],
        audio: &[f64],
        visual: &[f64],
        h_prev: &[f64],
        pin: GatePin,
    ) -> StepCache {
        let (audio_hidden, f_a) = self.audio_forward(p, audio);
        let (visual_hidden, f_v) = self.visual_forward(p, visual);
        let agr = self.agr.as_ref().map(|l| self.agr_raw(l, p, &f_a));
        let (gate_hidden, gate, gate_pinned) = match (&self.gate, &agr) {
            (Some(layers), Some(out)) => match pin {
                GatePin::Free => {
                    let (hid, m) = self.gate_raw(layers, p, &out.g);
                    (hid, Some(m), false)
                }
                GatePin::Zeros => (Vec::new(), Some(vec![0.0; f_v.len()]), true),
                GatePin::Ones => (Vec::new(), Some(vec![1.0; f_v.len()]), true),
            },
            _ => (Vec::new(), None, false),
        };
        let f_v_eff = match &gate {
            Some(m) => apply_gate(&f_v, m),
            None => f_v.clone(),
        };
        let x = [f_a.as_slice(), f_v_eff.as_slice()].concat();
        let (gru, s) = self.gru_forward(p, x, h_prev);
        let policy = self.heads(p, s);
        StepCache {
            audio_in: audio.to_vec(),
            audio_hidden,
            f_a,
            visual_in: visual.to_vec(),
            visual_hidden,
            f_v,
            agr,
            gate_hidden,
            gate,
            gate_pinned,
            f_v_eff,
            gru,
            policy,
        }
    }

    /// Backpropagates one step. `dh_next` is the gradient reaching this
    /// step's output state from later steps. Parameter gradients are added
    /// into `grads`; the gradient with respect to `h_prev` is returned.
    pub fn backward_step(
        &self,
        p: &Parameters,
        cache: &StepCache,
        out: &StepGrad,
        dh_next: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let p = &p.data;
        let hdim = self.cfg.hidden;
        let s = &cache.policy.s;

        // heads
        let mut ds = dh_next.to_vec();
        self.actor.backward(p, grads, s, &out.d_logits, Some(&mut ds));
        self.critic.backward(p, grads, s, &[out.d_value], Some(&mut ds));

        // GRU cell
        let g = &cache.gru;
        let mut dh_prev: Vec<f64> = (0..hdim).map(|i| ds[i] * g.z[i]).collect();
        let mut dgi = vec![0.0; 3 * hdim];
        let mut dgh = vec![0.0; 3 * hdim];
        for i in 0..hdim {
            let dn = ds[i] * (1.0 - g.z[i]);
            let dz = ds[i] * (g.h_prev[i] - g.n[i]);
            let dn_pre = dn * (1.0 - g.n[i] * g.n[i]);
            let dr = dn_pre * g.hn[i];
            dgi[i] = dr * g.r[i] * (1.0 - g.r[i]);
            dgi[hdim + i] = dz * g.z[i] * (1.0 - g.z[i]);
            dgi[2 * hdim + i] = dn_pre;
            dgh[i] = dgi[i];
            dgh[hdim + i] = dgi[hdim + i];
            dgh[2 * hdim + i] = dn_pre * g.r[i];
        }
        let mut dx = vec![0.0; g.x.len()];
        self.gru_ih.backward(p, grads, &g.x, &dgi, Some(&mut dx));
        self.gru_hh.backward(p, grads, &g.h_prev, &dgh, Some(&mut dh_prev));

        let (dfa_policy, dfv_eff) = dx.split_at(self.cfg.audio_features);
        let mut df_a = dfa_policy.to_vec();

        // gate
        let mut df_v = dfv_eff.to_vec();
        let mut dg_from_gate = None;
        if let Some(m) = &cache.gate {
            for (d, mi) in df_v.iter_mut().zip(m) {
                *d *= mi;
            }
            if !cache.gate_pinned {
                let layers = self.gate.as_ref().expect("gate cache implies gate layers");
                let d_pre: Vec<f64> = dfv_eff
                    .iter()
                    .zip(&cache.f_v)
                    .zip(m)
                    .map(|((d, fv), mi)| d * fv * mi * (1.0 - mi))
                    .collect();
                let mut d_hidden = vec![0.0; cache.gate_hidden.len()];
                layers.1.backward(p, grads, &cache.gate_hidden, &d_pre, Some(&mut d_hidden));
                let d_hidden = tanh_back(&cache.gate_hidden, &d_hidden);
                let g_in = &cache.agr.as_ref().expect("gate requires geometry").g;
                let mut dg = vec![0.0; g_in.len()];
                layers.0.backward(p, grads, g_in, &d_hidden, Some(&mut dg));
                dg_from_gate = Some(dg);
            }
        }

        // geometry reasoner
        if let (Some(layers), Some(agr)) = (&self.agr, &cache.agr) {
            let mut dz = vec![0.0; agr.z_geo.len()];
            let in_range = agr.log_var_raw >= self.cfg.log_var_min && agr.log_var_raw <= self.cfg.log_var_max;
            let d_lv = if in_range { out.d_log_var } else { 0.0 };
            layers.distance.backward(p, grads, &agr.z_geo, &[out.d_mu, d_lv], Some(&mut dz));
            layers.azimuth.backward(p, grads, &agr.z_geo, &[out.d_phi], Some(&mut dz));
            if let Some(dg) = &dg_from_gate {
                layers.projection.backward(p, grads, &agr.z_geo, dg, Some(&mut dz));
            }
            let dz_pre = tanh_back(&agr.z_geo, &dz);
            layers.encoder.backward(p, grads, &cache.f_a, &dz_pre, Some(&mut df_a));
        }

        // encoders
        let d_pre = tanh_back(&cache.f_a, &df_a);
        let mut d_hidden = vec![0.0; cache.audio_hidden.len()];
        self.audio2.backward(p, grads, &cache.audio_hidden, &d_pre, Some(&mut d_hidden));
        let d_hidden = tanh_back(&cache.audio_hidden, &d_hidden);
        self.audio1.backward(p, grads, &cache.audio_in, &d_hidden, None);

        let d_pre = tanh_back(&cache.f_v, &df_v);
        let mut d_hidden = vec![0.0; cache.visual_hidden.len()];
        self.visual2.backward(p, grads, &cache.visual_hidden, &d_pre, Some(&mut d_hidden));
        let d_hidden = tanh_back(&cache.visual_hidden, &d_hidden);
        self.visual1.backward(p, grads, &cache.visual_in, &d_hidden, None);

        dh_prev
    }
}

/// Element-wise product `f_v * m`.
pub fn apply_gate(f_v: &[f64], m: &[f64]) -> Vec<f64> {
    f_v.iter().zip(m).map(|(a, b)| a * b).collect()
}

/// Checkpoint container version.
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"RAVNCKPT";

/// Writes a checkpoint: magic, version, model config (JSON), then every
/// named tensor with its shape and little-endian `f64` data.
pub fn save_params(path: &Path, cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg_json = serde_json::to_vec(cfg).expect("model config serializes");
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(params.specs.len() as u32).to_le_bytes());
    for spec in &params.specs {
        buf.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(spec.name.as_bytes());
        buf.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for d in &spec.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &params.data[spec.offset..spec.offset + spec.len()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint written by [`save_params`] and checks it against the
/// layout implied by its stored model config.
pub fn load_params(path: &Path) -> Result<(ModelConfig, Parameters)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Corrupt(format!("model config: {e}")))?;
    let net = Network::new(cfg.clone()).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut params = net.zero_params();
    let count = r.u32()? as usize;
    if count != params.specs.len() {
        return Err(Error::Corrupt(format!(
            "expected {} tensors, found {count}",
            params.specs.len()
        )));
    }
    for i in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = params.specs[i].clone();
        if spec.name != name || spec.shape != shape {
            return Err(Error::Corrupt(format!(
                "tensor {i} is {name} {shape:?}, expected {} {:?}",
                spec.name, spec.shape
            )));
        }
        for slot in &mut params.data[spec.offset..spec.offset + spec.len()] {
            *slot = f64::from_bits(r.u64()?);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes".into()));
    }
    Ok((cfg, params))
}
