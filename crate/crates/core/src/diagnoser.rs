//! Classification model: a strided 3D conv backbone, masked channel
//! attention (MCA) and a fusion head, with its training recipe and
//! augmentation.
//!
//! The head computes `z = masked_avg_pool(F, M)`, a channel gate
//! `w = sigmoid(W2 relu(W1 z + b1) + b2)`, `F_att = F ⊗ w` and classifies
//! `concat(GAP(F), GAP(F_att))` with one affine layer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use vb_tensor::{clip_grad_norm, AdamW, Checkpoint, CosineWarmRestarts, GateVars, Graph, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::seeds::mix_seed;
use crate::volume::{flat_index, resample_nearest, voxel_count, Dims, Mask, Volume};

/// Second branch of the fusion head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// `GAP(F ⊗ w)` with the gate driven by masked pooling.
    Mca,
    /// The masked-pooled vector `z` itself, no gate.
    MaskedPool,
    /// A second `GAP(F)`; the mask is ignored.
    DoubleGap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoserConfig {
    /// Output channels of each stride-2, 3³ conv stage.
    pub backbone: Vec<usize>,
    pub mca_hidden: usize,
    pub k_classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warm_restart_t0: usize,
    pub clip_norm: f64,
    pub dropout_p: f64,
    pub label_smooth: f64,
    pub batch: usize,
    pub accum_steps: usize,
    pub mask_eps: f64,
    pub head: HeadMode,
    pub seed: u64,
}

impl Default for DiagnoserConfig {
    fn default() -> Self {
        Self {
            backbone: vec![4, 8],
            mca_hidden: 8,
            k_classes: 4,
            epochs: 60,
            lr: 5e-5,
            weight_decay: 1e-4,
            warm_restart_t0: 10,
            clip_norm: 2.0,
            dropout_p: 0.2,
            label_smooth: 0.05,
            batch: 2,
            accum_steps: 2,
            mask_eps: 1e-6,
            head: HeadMode::Mca,
            seed: 0,
        }
    }
}

fn config_err(key: &'static str, detail: String) -> Error {
    Error::Config {
        section: "diagnoser",
        key,
        detail,
    }
}

impl DiagnoserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_classes < 2 {
            return Err(config_err("k_classes", format!("{} < 2", self.k_classes)));
        }
        if self.backbone.is_empty() || self.backbone.contains(&0) {
            return Err(config_err(
                "backbone",
                format!("{:?} needs positive channel counts", self.backbone),
            ));
        }
        if self.mca_hidden == 0 {
            return Err(config_err("mca_hidden", "must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(config_err("clip_norm", format!("{} must be positive", self.clip_norm)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay", format!("{} is negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(config_err("dropout_p", format!("{} is outside [0, 1)", self.dropout_p)));
        }
        if !(0.0..1.0).contains(&self.label_smooth) {
            return Err(config_err(
                "label_smooth",
                format!("{} is outside [0, 1)", self.label_smooth),
            ));
        }
        if self.batch == 0 || self.accum_steps == 0 || self.warm_restart_t0 == 0 {
            return Err(config_err(
                "batch",
                "batch, accum_steps and warm_restart_t0 must be positive".into(),
            ));
        }
        if !(self.mask_eps > 0.0) {
            return Err(config_err("mask_eps", format!("{} must be positive", self.mask_eps)));
        }
        Ok(())
    }

    /// Total spatial downsampling of the backbone.
    pub fn downsample_factor(&self) -> usize {
        1 << self.backbone.len()
    }

    pub fn feature_dims(&self, input: Dims) -> Result<Dims> {
        let f = self.downsample_factor();
        if input.iter().any(|&n| n % f != 0) {
            return Err(Error::invalid(
                "backbone_forward",
                format!("input dims {input:?} are not divisible by the downsampling factor {f}"),
            ));
        }
        Ok(input.map(|n| n / f))
    }

    /// Parameter names and shapes, in binding order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for (s, &c) in self.backbone.iter().enumerate() {
            out.push((format!("stage{s}.weight"), vec![c, cin, 3, 3, 3]));
            out.push((format!("stage{s}.bias"), vec![c]));
            cin = c;
        }
        if self.head == HeadMode::Mca {
            out.push(("gate.w1".into(), vec![self.mca_hidden, cin]));
            out.push(("gate.b1".into(), vec![self.mca_hidden]));
            out.push(("gate.w2".into(), vec![cin, self.mca_hidden]));
            out.push(("gate.b2".into(), vec![cin]));
        }
        out.push(("head.weight".into(), vec![self.k_classes, 2 * cin]));
        out.push(("head.bias".into(), vec![self.k_classes]));
        out
    }

    fn layout(&self) -> serde_json::Value {
        serde_json::json!({
            "backbone": self.backbone,
            "mca_hidden": self.mca_hidden,
            "k_classes": self.k_classes,
            "head": self.head,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rot90_p: f64,
    pub flip_p: f64,
    pub noise_std: f64,
    pub noise_p: f64,
    pub gamma_range: [f64; 2],
    pub gamma_p: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rot90_p: 0.5,
            flip_p: 0.5,
            noise_std: 0.01,
            noise_p: 0.15,
            gamma_range: [0.9, 1.1],
            gamma_p: 0.15,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No transform is ever applied.
    pub fn disabled() -> Self {
        Self {
            rot90_p: 0.0,
            flip_p: 0.0,
            noise_p: 0.0,
            gamma_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &'static str, detail: String| Error::Config {
            section: "augment",
            key,
            detail,
        };
        for (key, p) in [
            ("rot90_p", self.rot90_p),
            ("flip_p", self.flip_p),
            ("noise_p", self.noise_p),
            ("gamma_p", self.gamma_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(key, format!("{p} is outside [0, 1]")));
            }
        }
        let [lo, hi] = self.gamma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(bad(
                "gamma_range",
                format!("{:?} must be positive and ordered", self.gamma_range),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(bad("noise_std", format!("{} must be non-negative", self.noise_std)));
        }
        Ok(())
    }
}

/// Transforms drawn for one augmentation call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    /// Number of axial quarter-turns, if rotated.
    pub rot90: Option<u8>,
    pub flip: bool,
    pub noise: bool,
    pub gamma: Option<f64>,
}

impl AugmentPlan {
    /// Draw order: rotation (applied, turns), flip, noise, gamma (applied, value).
    pub fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let rot = rng.random::<f64>() < cfg.rot90_p;
        let turns = rng.random_range(1..=3u8);
        let flip = rng.random::<f64>() < cfg.flip_p;
        let noise = rng.random::<f64>() < cfg.noise_p;
        let gamma = rng.random::<f64>() < cfg.gamma_p;
        let [lo, hi] = cfg.gamma_range;
        let g = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        Self {
            rot90: rot.then_some(turns),
            flip,
            noise,
            gamma: gamma.then_some(g),
        }
    }
}

/// One quarter-turn in the axial `(i, j)` plane; dims `[D, H, W]` → `[D, W, H]`.
pub fn rot90_axial<T: Copy>(dims: Dims, data: &[T]) -> (Dims, Vec<T>) {
    let [d, h, w] = dims;
    let out_dims = [d, w, h];
    let mut out = Vec::with_capacity(data.len());
    for a in 0..d {
        for i in 0..w {
            for j in 0..h {
                out.push(data[flat_index(dims, a, h - 1 - j, i)]);
            }
        }
    }
    (out_dims, out)
}

/// Mirror along the width (left-right) axis.
pub fn flip_sagittal<T: Copy>(dims: Dims, data: &[T]) -> Vec<T> {
    let w = dims[2];
    let mut out = data.to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Normalized gamma: `lo + (hi - lo) · ((v - lo) / (hi - lo))^γ` over the volume range.
pub fn gamma_correct(values: &mut [f32], gamma: f64) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return;
    }
    let span = f64::from(hi - lo);
    for v in values {
        let t = (f64::from(*v - lo) / span).clamp(0.0, 1.0);
        *v = (f64::from(lo) + span * t.powf(gamma)) as f32;
    }
}

/// Applies the same spatial transforms to the volume and the mask;
/// intensity transforms touch the volume only.
pub fn augment(v: &Volume, m: &Mask, cfg: &AugmentConfig, draw_seed: u64) -> Result<(Volume, Mask, AugmentPlan)> {
    if v.dims() != m.dims() {
        return Err(Error::invalid("augment", "volume and mask dims differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let plan = AugmentPlan::draw(cfg, &mut rng);
    let (mut dims, mut vox, mut bits) = (v.dims(), v.voxels().to_vec(), m.bits().to_vec());
    if let Some(k) = plan.rot90 {
        for _ in 0..k {
            let (nd, nv) = rot90_axial(dims, &vox);
            bits = rot90_axial(dims, &bits).1;
            (dims, vox) = (nd, nv);
        }
    }
    if plan.flip {
        vox = flip_sagittal(dims, &vox);
        bits = flip_sagittal(dims, &bits);
    }
    if plan.noise {
        let n = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for x in &mut vox {
            *x += n.sample(&mut rng) as f32;
        }
    }
    if let Some(g) = plan.gamma {
        gamma_correct(&mut vox, g);
    }
    let out_v = Volume::with_spacing(dims, v.spacing(), vox)?;
    let out_m = Mask::new(dims, bits)?.with_spacing(m.spacing());
    Ok((out_v, out_m, plan))
}

/// Block-averages a binary mask to feature resolution. Non-divisible dims
/// fall back to nearest-neighbour resampling.
pub fn mask_to_feature_res(m: &Mask, feature_dims: Dims) -> Result<Vec<f64>> {
    let dims = m.dims();
    if feature_dims.contains(&0) {
        return Err(Error::invalid("mask_to_feature_res", "zero feature dimension"));
    }
    if (0..3).any(|a| dims[a] % feature_dims[a] != 0) {
        log::warn!("mask dims {dims:?} are not a multiple of {feature_dims:?}; using nearest resampling");
        let r = resample_nearest(&m.to_volume(), feature_dims)?;
        return Ok(r.voxels().iter().map(|&x| f64::from(x)).collect());
    }
    let f = [0, 1, 2].map(|a| dims[a] / feature_dims[a]);
    let cell = (f[0] * f[1] * f[2]) as f64;
    let mut out = vec![0.0; voxel_count(feature_dims)];
    for (idx, &b) in m.bits().iter().enumerate() {
        if b {
            let (d, i, j) = crate::volume::unflatten(dims, idx);
            out[flat_index(feature_dims, d / f[0], i / f[1], j / f[2])] += 1.0;
        }
    }
    out.iter_mut().for_each(|x| *x /= cell);
    Ok(out)
}

/// Graph handles of the model parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stages: Vec<(Var, Var)>,
    pub gate: Option<GateVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Interprets `vars` in [`DiagnoserConfig::param_shapes`] order.
    pub fn from_slice(cfg: &DiagnoserConfig, vars: &[Var]) -> Self {
        let n = cfg.backbone.len();
        let stages = (0..n).map(|s| (vars[2 * s], vars[2 * s + 1])).collect();
        let mut k = 2 * n;
        let gate = (cfg.head == HeadMode::Mca).then(|| {
            k += 4;
            GateVars {
                w1: vars[k - 4],
                b1: vars[k - 3],
                w2: vars[k - 2],
                b2: vars[k - 1],
            }
        });
        Self {
            stages,
            gate,
            head_w: vars[k],
            head_b: vars[k + 1],
        }
    }
}

/// Handles of every intermediate a caller may want to inspect.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub features: Var,
    pub global: Var,
    pub z: Option<Var>,
    pub gate: Option<Var>,
    pub second: Var,
    pub logits: Var,
    pub probs: Var,
}

/// `F = relu(conv(… relu(conv(x)) …))`, each stage 3³ with stride 2.
pub fn backbone_forward(g: &mut Graph, x: Var, vars: &ModelVars) -> Result<Var> {
    let mut h = x;
    for &(w, b) in &vars.stages {
        let c = g.conv3d(h, w, Some(b), 2, 1)?;
        h = g.relu(c);
    }
    Ok(h)
}

/// Fusion head on features `f: [N, C, d, h, w]` and soft mask `m: [N, d, h, w]`.
pub fn head_forward(g: &mut Graph, f: Var, m: Var, vars: &ModelVars, cfg: &DiagnoserConfig) -> Result<ForwardOut> {
    let global = g.gap(f)?;
    let (z, gate, second) = match cfg.head {
        HeadMode::Mca => {
            let z = g.masked_avg_pool(f, m, cfg.mask_eps)?;
            let gv = vars
                .gate
                .ok_or_else(|| Error::invalid("head_forward", "MCA head without gate parameters"))?;
            let (w, att) = g.channel_gate(f, z, &gv)?;
            (Some(z), Some(w), g.gap(att)?)
        }
        HeadMode::MaskedPool => {
            let z = g.masked_avg_pool(f, m, cfg.mask_eps)?;
            (Some(z), None, z)
        }
        HeadMode::DoubleGap => (None, None, g.gap(f)?),
    };
    let h = g.concat(global, second)?;
    let logits = g.linear(h, vars.head_w, Some(vars.head_b))?;
    let probs = g.softmax(logits)?;
    Ok(ForwardOut {
        features: f,
        global,
        z,
        gate,
        second,
        logits,
        probs,
    })
}

/// Backbone then head. `dropout` carries the training-mode stream; dropout
/// acts on the backbone output only.
pub fn model_forward(
    g: &mut Graph,
    x: Var,
    m: Var,
    vars: &ModelVars,
    cfg: &DiagnoserConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOut> {
    let mut f = backbone_forward(g, x, vars)?;
    let feats = f;
    if let Some(rng) = dropout {
        f = g.dropout(f, cfg.dropout_p, true, rng)?;
    }
    let mut out = head_forward(g, f, m, vars, cfg)?;
    out.features = feats;
    Ok(out)
}

/// One case ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub dims: Dims,
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    pub label: usize,
}

impl Prepared {
    pub fn new(cfg: &DiagnoserConfig, v: &Volume, mask: &Mask, label: usize) -> Result<Self> {
        if v.dims() != mask.dims() {
            return Err(Error::invalid("prepare", "volume and mask dims differ"));
        }
        let fd = cfg.feature_dims(v.dims())?;
        Ok(Self {
            dims: v.dims(),
            x: v.voxels().iter().map(|&x| f64::from(x)).collect(),
            m: mask_to_feature_res(mask, fd)?,
            label,
        })
    }
}

/// Stacks cases into `x: [N, 1, D, H, W]` and `m: [N, d, h, w]`.
pub fn batch_tensors(cfg: &DiagnoserConfig, cases: &[&Prepared]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let dims = cases
        .first()
        .map(|c| c.dims)
        .ok_or_else(|| Error::invalid("batch", "empty batch"))?;
    if cases.iter().any(|c| c.dims != dims) {
        return Err(Error::invalid("batch", "mixed volume dims in one batch"));
    }
    let fd = cfg.feature_dims(dims)?;
    let n = cases.len();
    let x = Tensor::new(
        vec![n, 1, dims[0], dims[1], dims[2]],
        cases.iter().flat_map(|c| c.x.iter().copied()).collect(),
    )?;
    let m = Tensor::new(
        vec![n, fd[0], fd[1], fd[2]],
        cases.iter().flat_map(|c| c.m.iter().copied()).collect(),
    )?;
    Ok((x, m, cases.iter().map(|c| c.label).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnoser {
    pub cfg: DiagnoserConfig,
    pub params: ParamSet,
}

impl Diagnoser {
    /// Seeded initialization: uniform fan-in for weights, zero biases.
    pub fn init(cfg: &DiagnoserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1417));
        let mut params = ParamSet::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name.ends_with("bias") || name.starts_with("gate.b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let u = Uniform::new(-bound, bound).expect("positive bound");
                Tensor::from_fn(&shape, |_| u.sample(&mut rng))
            };
            params.insert(name, t);
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ModelVars::from_slice(&self.cfg, &vars)
    }

    /// Inference-mode class probabilities for a batch.
    pub fn predict_batch(&self, cases: &[&Prepared]) -> Result<Vec<Vec<f64>>> {
        let (x, m, _) = batch_tensors(&self.cfg, cases)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (xv, mv) = (g.constant(x), g.constant(m));
        let out = model_forward(&mut g, xv, mv, &vars, &self.cfg, None)?;
        let k = self.cfg.k_classes;
        Ok(g.value(out.probs).data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// Probabilities and argmax class of one case.
    pub fn predict_case(&self, v: &Volume, mask: &Mask) -> Result<(Vec<f64>, usize)> {
        let p = Prepared::new(&self.cfg, v, mask, 0)?;
        let probs = self.predict_batch(&[&p])?.remove(0);
        let cls = argmax(&probs);
        Ok((probs, cls))
    }

    /// Mean smoothed cross-entropy over all `groups` (one effective batch),
    /// with gradients accumulated one micro-batch at a time.
    pub fn accumulate(&self, groups: &[&[&Prepared]], dropout: Option<&mut ChaCha8Rng>) -> Result<StepResult> {
        let total: usize = groups.iter().map(|g| g.len()).sum();
        let mut grads: Vec<Vec<f64>> = self.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut rng = dropout;
        for micro in groups {
            let (x, m, labels) = batch_tensors(&self.cfg, micro)?;
            let mut g = Graph::new();
            let vars = self.bind(&mut g, true);
            let (xv, mv) = (g.constant(x), g.constant(m));
            let out = model_forward(&mut g, xv, mv, &vars, &self.cfg, rng.as_deref_mut())?;
            let ce = g.cross_entropy_smoothed(out.logits, &labels, self.cfg.label_smooth)?;
            let weight = micro.len() as f64 / total as f64;
            let scaled = g.scale(ce, weight);
            g.backward(scaled)?;
            loss += g.value(scaled).item();
            let k = self.cfg.k_classes;
            for (row, &y) in g.value(out.logits).data().chunks(k).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
            let all: Vec<Var> = flatten_vars(&vars);
            for (acc, v) in grads.iter_mut().zip(all) {
                if let Some(gv) = g.grad(v) {
                    acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(StepResult { loss, correct, grads })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.cfg.seed,
            layout: self.cfg.layout(),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    /// Rebuilds a model; with `expected`, the stored layout must match it.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&DiagnoserConfig>) -> Result<Self> {
        let cfg: DiagnoserConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::invalid("from_checkpoint", format!("unreadable config: {e}")))?;
        if let Some(exp) = expected {
            if exp.layout() != ck.layout {
                return Err(Error::invalid(
                    "from_checkpoint",
                    format!(
                        "checkpoint layout {} does not match config layout {}",
                        ck.layout,
                        exp.layout()
                    ),
                ));
            }
        }
        let shapes = cfg.param_shapes();
        let names_ok = shapes.len() == ck.params.len()
            && shapes
                .iter()
                .zip(ck.params.names().iter().zip(ck.params.tensors()))
                .all(|((n, s), (cn, t))| n == cn && s.as_slice() == t.shape());
        if !names_ok || cfg.layout() != ck.layout {
            return Err(Error::invalid(
                "from_checkpoint",
                "parameters do not match the stored layout",
            ));
        }
        Ok(Self {
            cfg,
            params: ck.params.clone(),
        })
    }
}

fn flatten_vars(v: &ModelVars) -> Vec<Var> {
    let mut out: Vec<Var> = v.stages.iter().flat_map(|&(w, b)| [w, b]).collect();
    if let Some(gv) = v.gate {
        out.extend([gv.w1, gv.b1, gv.w2, gv.b2]);
    }
    out.extend([v.head_w, v.head_b]);
    out
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (k, &x)| if x > best.1 { (k, x) } else { best },
        )
        .0
}

pub struct StepResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

/// Training input: a registered volume, its attention mask and label.
#[derive(Clone, Debug)]
pub struct TrainCase {
    pub volume: Volume,
    pub mask: Mask,
    pub label: usize,
}

/// Trains from scratch. Each epoch shuffles the cases, augments each one
/// with a stream derived from `(aug.seed, epoch, position)`, and performs
/// one optimizer step per `batch · accum_steps` cases.
pub fn train(cases: &[TrainCase], cfg: &DiagnoserConfig, aug: &AugmentConfig) -> Result<(Diagnoser, Vec<EpochLog>)> {
    cfg.validate()?;
    aug.validate()?;
    if cases.is_empty() {
        return Err(Error::invalid("train", "empty training split"));
    }
    if let Some(c) = cases.iter().find(|c| c.label >= cfg.k_classes) {
        return Err(Error::invalid(
            "train",
            format!("label {} outside {} classes", c.label, cfg.k_classes),
        ));
    }
    let mut model = Diagnoser::init(cfg)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let sched = CosineWarmRestarts::new(cfg.lr, cfg.warm_restart_t0);
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5a1e));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xd209));
    let identity = *aug
        == AugmentConfig {
            seed: aug.seed,
            ..AugmentConfig::disabled()
        };
    let base: Vec<Prepared> = if identity {
        cases
            .iter()
            .map(|c| Prepared::new(cfg, &c.volume, &c.mask, c.label))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = sched.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let prepared: Vec<Prepared> = if identity {
            order.iter().map(|&k| base[k].clone()).collect()
        } else {
            order
                .iter()
                .enumerate()
                .map(|(pos, &k)| {
                    let c = &cases[k];
                    let seed = mix_seed(aug.seed, (epoch * cases.len() + pos) as u64);
                    let (v, m, _) = augment(&c.volume, &c.mask, aug, seed)?;
                    Prepared::new(cfg, &v, &m, c.label)
                })
                .collect::<Result<_>>()?
        };
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for step in refs.chunks(cfg.batch * cfg.accum_steps) {
            let groups: Vec<&[&Prepared]> = step.chunks(cfg.batch).collect();
            let dropout = (cfg.dropout_p > 0.0).then_some(&mut drop_rng);
            let mut r = model.accumulate(&groups, dropout)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: r.loss,
                    config: serde_json::to_string(cfg).unwrap_or_default(),
                });
            }
            clip_grad_norm(&mut r.grads, cfg.clip_norm);
            opt.step(model.params.tensors_mut(), &r.grads, lr);
            loss_sum += r.loss * step.len() as f64;
            correct += r.correct;
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / cases.len() as f64,
            train_acc: correct as f64 / cases.len() as f64,
        };
        log::debug!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} acc {:.3}",
            entry.loss,
            entry.train_acc
        );
        log.push(entry);
    }
    Ok((model, log))
}
