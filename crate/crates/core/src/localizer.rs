//! Coarse-to-fine tumor localization.
//!
//! Slice boxes are stacked into a 3D occupancy volume, dilated and smoothed
//! into a prior map, and thresholded into pseudo-labels. A small voxel MLP
//! trained on those labels is then OR-ed with the binarized prior.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vb_tensor::{AdamW, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::oracle::{BoxPrediction, BoxPredictor, SliceQuery};
use crate::volume::{axial_slices, flat_index, voxel_count, Dims, Mask, PriorMap, Volume};

/// Number of entries in a [`VoxelFeature`] row.
pub const FEATURE_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub gaussian_sigma: f64,
    pub dilation_radius: usize,
    pub tau_pos: f64,
    pub tau_neg: f64,
    pub tau_bin: f64,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_lr: f64,
    pub neg_sample_ratio: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 2.0,
            dilation_radius: 1,
            tau_pos: 0.7,
            tau_neg: 0.1,
            tau_bin: 0.5,
            mlp_hidden: 16,
            mlp_epochs: 150,
            mlp_lr: 0.02,
            neg_sample_ratio: 8.0,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &'static str, detail: String| {
            Err(Error::Config {
                section: "localizer",
                key,
                detail,
            })
        };
        for (key, t) in [
            ("tau_pos", self.tau_pos),
            ("tau_neg", self.tau_neg),
            ("tau_bin", self.tau_bin),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return bad(key, format!("{t} is outside (0, 1)"));
            }
        }
        if !(self.tau_neg < self.tau_bin && self.tau_bin <= self.tau_pos) {
            return bad(
                "tau_bin",
                format!(
                    "need tau_neg < tau_bin <= tau_pos, got {} / {} / {}",
                    self.tau_neg, self.tau_bin, self.tau_pos
                ),
            );
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return bad("gaussian_sigma", format!("{} must be positive", self.gaussian_sigma));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden", "must be at least 1".into());
        }
        if !(self.mlp_lr > 0.0 && self.mlp_lr.is_finite()) {
            return bad("mlp_lr", format!("{} must be positive", self.mlp_lr));
        }
        if !(self.neg_sample_ratio > 0.0 && self.neg_sample_ratio.is_finite()) {
            return bad(
                "neg_sample_ratio",
                format!("{} must be positive", self.neg_sample_ratio),
            );
        }
        Ok(())
    }
}

/// Binary occupancy of all boxes, stacked along the axial axis.
pub fn stack_boxes(preds: &[BoxPrediction], dims: Dims) -> Result<Volume> {
    let [depth, h, w] = dims;
    let mut occ = Volume::zeros(dims).into_voxels();
    for p in preds {
        if p.slice_index >= depth {
            return Err(Error::invalid(
                "stack_boxes",
                format!("slice index {} outside depth {depth}", p.slice_index),
            ));
        }
        // integer rows/cols with y0 <= i < y1 and x0 <= j < x1
        let rows = (p.y0.max(0.0).ceil() as usize)..(p.y1.ceil().max(0.0) as usize).min(h);
        let cols = (p.x0.max(0.0).ceil() as usize)..(p.x1.ceil().max(0.0) as usize).min(w);
        for i in rows {
            for j in cols.clone() {
                occ[flat_index(dims, p.slice_index, i, j)] = 1.0;
            }
        }
    }
    Volume::new(dims, occ)
}

/// Offsets of the 6-connected (city-block) ball of `radius`.
pub fn ball_offsets(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let mut out = Vec::new();
    for a in -r..=r {
        for b in -r..=r {
            for c in -r..=r {
                if a.abs() + b.abs() + c.abs() <= r {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

/// Binary dilation with the 6-connected ball of `radius`.
pub fn dilate(dims: Dims, bits: &[bool], radius: usize) -> Vec<bool> {
    let offsets = ball_offsets(radius);
    let mut out = vec![false; bits.len()];
    let [dd, hh, ww] = dims.map(|x| x as i64);
    for (idx, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        let (d, i, j) = crate::volume::unflatten(dims, idx);
        for o in &offsets {
            let (a, b, c) = (d as i64 + o[0], i as i64 + o[1], j as i64 + o[2]);
            if (0..dd).contains(&a) && (0..hh).contains(&b) && (0..ww).contains(&c) {
                out[flat_index(dims, a as usize, b as usize, c as usize)] = true;
            }
        }
    }
    out
}

/// L1-normalized Gaussian taps truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian convolution with zero padding.
pub fn gaussian_smooth(dims: Dims, values: &[f64], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let mut cur = values.to_vec();
    for axis in 0..3 {
        cur = convolve_axis(dims, &cur, &k, axis);
    }
    cur
}

fn convolve_axis(dims: Dims, src: &[f64], k: &[f64], axis: usize) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let n = dims[axis] as i64;
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    } as i64;
    let mut out = vec![0.0; src.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = (idx as i64 / stride) % n;
        let mut acc = 0.0;
        for (t, &kv) in k.iter().enumerate() {
            let q = pos + t as i64 - r;
            if (0..n).contains(&q) {
                acc += kv * src[(idx as i64 + (q - pos) * stride) as usize];
            }
        }
        *o = acc;
    }
    out
}

/// Dilation then Gaussian smoothing, before the max-rescale.
pub fn smooth_and_dilate_raw(occ: &Volume, cfg: &PriorConfig) -> Vec<f64> {
    let bits: Vec<bool> = occ.voxels().iter().map(|&v| v > 0.0).collect();
    let dilated = dilate(occ.dims(), &bits, cfg.dilation_radius);
    let values: Vec<f64> = dilated.iter().map(|&b| f64::from(u8::from(b))).collect();
    gaussian_smooth(occ.dims(), &values, cfg.gaussian_sigma)
}

/// Coarse prior: dilate, smooth, rescale so the maximum is 1.
pub fn smooth_and_dilate(occ: &Volume, cfg: &PriorConfig) -> PriorMap {
    let raw = smooth_and_dilate_raw(occ, cfg);
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return PriorMap::zeros(occ.dims());
    }
    let values = raw.iter().map(|&v| ((v / max) as f32).clamp(0.0, 1.0)).collect();
    PriorMap::new(occ.dims(), values).expect("values lie in [0, 1]")
}

/// Flat voxel indices used as MLP supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

pub fn extract_pseudo_labels(prior: &PriorMap, cfg: &PriorConfig) -> Result<PseudoLabels> {
    extract_pseudo_labels_within(prior, None, cfg)
}

/// As [`extract_pseudo_labels`], drawing negatives only inside `region`.
pub fn extract_pseudo_labels_within(
    prior: &PriorMap,
    region: Option<&Mask>,
    cfg: &PriorConfig,
) -> Result<PseudoLabels> {
    let vals = prior.values();
    let positives: Vec<usize> = (0..vals.len()).filter(|&k| f64::from(vals[k]) > cfg.tau_pos).collect();
    if positives.is_empty() {
        return Err(Error::LocalizationFailed { tau_pos: cfg.tau_pos });
    }
    let pool: Vec<usize> = (0..vals.len())
        .filter(|&k| f64::from(vals[k]) < cfg.tau_neg && region.map_or(true, |m| m.bits()[k]))
        .collect();
    let want = ((cfg.neg_sample_ratio * positives.len() as f64).round() as usize).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut negatives: Vec<usize> = sample(&mut rng, pool.len(), want)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    negatives.sort_unstable();
    Ok(PseudoLabels { positives, negatives })
}

/// Per-voxel MLP input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelFeature {
    pub intensity: f64,
    pub local_mean_3: f64,
    pub local_std_3: f64,
    pub norm_coords: [f64; 3],
}

impl VoxelFeature {
    pub fn to_array(self) -> [f64; FEATURE_DIM] {
        let [a, b, c] = self.norm_coords;
        [self.intensity, self.local_mean_3, self.local_std_3, a, b, c]
    }
}

/// Features of every voxel; the 3³ statistics use in-bounds neighbours only.
pub fn voxel_features(v: &Volume) -> Vec<VoxelFeature> {
    let dims = v.dims();
    let [dd, hh, ww] = dims;
    let vox = v.voxels();
    (0..v.len())
        .map(|idx| {
            let (d, i, j) = crate::volume::unflatten(dims, idx);
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
            for a in d.saturating_sub(1)..(d + 2).min(dd) {
                for b in i.saturating_sub(1)..(i + 2).min(hh) {
                    for c in j.saturating_sub(1)..(j + 2).min(ww) {
                        let x = f64::from(vox[flat_index(dims, a, b, c)]);
                        s += x;
                        s2 += x * x;
                        n += 1.0;
                    }
                }
            }
            let mean = s / n;
            VoxelFeature {
                intensity: f64::from(vox[idx]),
                local_mean_3: mean,
                local_std_3: (s2 / n - mean * mean).max(0.0).sqrt(),
                norm_coords: [d as f64 / dd as f64, i as f64 / hh as f64, j as f64 / ww as f64],
            }
        })
        .collect()
}

/// Two-layer voxel classifier over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineModel {
    /// `[w1 (hidden×F), b1 (hidden), w2 (1×hidden), b2 (1)]`
    pub params: Vec<Tensor>,
    pub feature_mean: [f64; FEATURE_DIM],
    pub feature_std: [f64; FEATURE_DIM],
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Builds the MLP logits `[N, 1]` for a feature batch.
pub fn mlp_logits(g: &mut Graph, x: Var, p: &[Var]) -> vb_tensor::Result<Var> {
    let h = g.linear(x, p[0], Some(p[1]))?;
    let h = g.relu(h);
    g.linear(h, p[2], Some(p[3]))
}

/// Mean binary cross-entropy of the MLP on `x` against `targets`.
pub fn mlp_loss(g: &mut Graph, x: Var, p: &[Var], targets: &[f64]) -> vb_tensor::Result<Var> {
    let logits = mlp_logits(g, x, p)?;
    g.bce_with_logits(logits, targets)
}

/// Uniform fan-in initialization of an MLP with `hidden` units.
pub fn init_mlp(hidden: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut layer = |out: usize, inp: usize| {
        let bound = (6.0 / inp as f64).sqrt();
        let u = Uniform::new(-bound, bound).expect("positive bound");
        Tensor::from_fn(&[out, inp], |_| u.sample(rng))
    };
    let w1 = layer(hidden, FEATURE_DIM);
    let w2 = layer(1, hidden);
    vec![w1, Tensor::zeros(&[hidden]), w2, Tensor::zeros(&[1])]
}

impl RefineModel {
    fn standardize(&self, f: &VoxelFeature) -> [f64; FEATURE_DIM] {
        let a = f.to_array();
        std::array::from_fn(|k| (a[k] - self.feature_mean[k]) / self.feature_std[k])
    }

    fn batch(&self, feats: &[&VoxelFeature]) -> Tensor {
        let data = feats.iter().flat_map(|f| self.standardize(f)).collect();
        Tensor::new(vec![feats.len(), FEATURE_DIM], data).expect("consistent batch shape")
    }

    /// Tumor probability of every voxel.
    pub fn predict(&self, feats: &[VoxelFeature]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(feats.len());
        for chunk in feats.chunks(4096) {
            let refs: Vec<&VoxelFeature> = chunk.iter().collect();
            let mut g = Graph::new();
            let x = g.constant(self.batch(&refs));
            let p: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
            let logits = mlp_logits(&mut g, x, &p)?;
            out.extend(g.value(logits).data().iter().map(|&z| vb_tensor::sigmoid(z)));
        }
        Ok(out)
    }
}

/// Full-batch Adam on the pseudo-labelled voxels.
pub fn train_refine_mlp(feats: &[VoxelFeature], labels: &PseudoLabels, cfg: &PriorConfig) -> Result<RefineModel> {
    if labels.positives.is_empty() || labels.negatives.is_empty() {
        return Err(Error::invalid("train_refine_mlp", "both label sets must be non-empty"));
    }
    let picked: Vec<&VoxelFeature> = labels
        .positives
        .iter()
        .chain(&labels.negatives)
        .map(|&k| &feats[k])
        .collect();
    let targets: Vec<f64> = labels
        .positives
        .iter()
        .map(|_| 1.0)
        .chain(labels.negatives.iter().map(|_| 0.0))
        .collect();

    let n = picked.len() as f64;
    let mut mean = [0.0; FEATURE_DIM];
    let mut std = [0.0; FEATURE_DIM];
    for f in &picked {
        for (m, x) in mean.iter_mut().zip(f.to_array()) {
            *m += x / n;
        }
    }
    for f in &picked {
        for ((s, m), x) in std.iter_mut().zip(&mean).zip(f.to_array()) {
            *s += (x - m).powi(2) / n;
        }
    }
    let std = std.map(|s| if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6c_70);
    let mut model = RefineModel {
        params: init_mlp(cfg.mlp_hidden, &mut rng),
        feature_mean: mean,
        feature_std: std,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
    };
    let x = model.batch(&picked);
    let mut opt = AdamW::new(0.0);
    let loss_of = |params: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = mlp_loss(&mut g, xv, &p, &targets)?;
        g.backward(loss)?;
        let grads = p.iter().map(|&v| g.grad_tensor(v).into_data()).collect();
        Ok((g.value(loss).item(), grads))
    };

    let (l0, mut grads) = loss_of(&model.params)?;
    model.initial_loss = l0;
    model.final_loss = l0;
    for epoch in 0..cfg.mlp_epochs {
        opt.step(&mut model.params, &grads, cfg.mlp_lr);
        let (l, g) = loss_of(&model.params)?;
        if !l.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: l,
                config: serde_json::to_string(cfg).unwrap_or_default(),
            });
        }
        model.final_loss = l;
        grads = g;
    }
    Ok(model)
}

/// Union of the binarized prior with the thresholded MLP prediction; MLP
/// voxels outside `region` are ignored.
pub fn refine(prior: &PriorMap, probs: &[f64], region: Option<&Mask>, cfg: &PriorConfig) -> Result<Mask> {
    if probs.len() != prior.values().len() || region.is_some_and(|m| m.dims() != prior.dims()) {
        return Err(Error::invalid("refine", "prediction count does not match the prior"));
    }
    let bits = prior
        .values()
        .iter()
        .zip(probs)
        .enumerate()
        .map(|(k, (&p, &q))| f64::from(p) > cfg.tau_bin || (q > 0.5 && region.map_or(true, |m| m.bits()[k])))
        .collect();
    Mask::new(prior.dims(), bits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub coarse: PriorMap,
    pub coarse_mask: Mask,
    pub refined: Mask,
    /// Localization failed and `refined` is the brain mask.
    pub fallback: bool,
    pub failed_slices: Vec<usize>,
    pub warnings: Vec<String>,
    pub n_boxes: usize,
    pub mlp_loss: Option<(f64, f64)>,
}

/// Queries the predictor on every axial slice; failed slices contribute
/// nothing and are reported.
pub fn predict_slices(
    volume: &Volume,
    gt: Option<&Mask>,
    predictor: &dyn BoxPredictor,
) -> (Vec<BoxPrediction>, Vec<usize>, Vec<String>) {
    let stack = axial_slices(volume);
    let lo = volume.voxels().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = volume.voxels().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let gt_slices: Vec<_> = (0..stack.count()).map(|d| gt.map(|m| m.axial_slice(d))).collect();
    let results: Vec<_> = stack
        .slices
        .par_iter()
        .enumerate()
        .map(|(d, s)| {
            predictor.predict(&SliceQuery {
                slice_index: d,
                slice: s,
                intensity_range: (lo, hi),
                gt: gt_slices[d].as_ref(),
            })
        })
        .collect();
    let (mut boxes, mut failed, mut warnings) = (Vec::new(), Vec::new(), Vec::new());
    for (d, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => {
                boxes.extend(p.boxes);
                warnings.extend(p.warnings);
            }
            Err(e) => {
                log::warn!("{e}");
                warnings.push(e.to_string());
                failed.push(d);
            }
        }
    }
    (boxes, failed, warnings)
}

/// Full localization of one registered volume.
///
/// Negatives are drawn inside the brain mask and the MLP may only add brain
/// voxels; background is already excluded by brain extraction.
pub fn localize_case(
    volume: &Volume,
    brain_mask: &Mask,
    gt: Option<&Mask>,
    predictor: &dyn BoxPredictor,
    cfg: &PriorConfig,
) -> Result<Localization> {
    cfg.validate()?;
    if brain_mask.dims() != volume.dims() {
        return Err(Error::invalid(
            "localize_case",
            "brain mask dims differ from the volume",
        ));
    }
    let dims = volume.dims();
    let (boxes, failed_slices, mut warnings) = predict_slices(volume, gt, predictor);
    let occ = stack_boxes(&boxes, dims)?;
    let coarse = smooth_and_dilate(&occ, cfg);
    let coarse_mask = coarse.binarize(cfg.tau_bin);
    let mut out = Localization {
        coarse,
        coarse_mask,
        refined: Mask::empty(dims),
        fallback: false,
        failed_slices,
        warnings: Vec::new(),
        n_boxes: boxes.len(),
        mlp_loss: None,
    };

    let labels = extract_pseudo_labels_within(&out.coarse, Some(brain_mask), cfg).and_then(|l| {
        if l.negatives.is_empty() {
            Err(Error::invalid("extract_pseudo_labels", "no voxel below tau_neg"))
        } else {
            Ok(l)
        }
    });
    match labels {
        Ok(labels) => {
            let feats = voxel_features(volume);
            let model = train_refine_mlp(&feats, &labels, cfg)?;
            let probs = model.predict(&feats)?;
            out.refined = refine(&out.coarse, &probs, Some(brain_mask), cfg)?;
            out.mlp_loss = Some((model.initial_loss, model.final_loss));
        }
        Err(e) => {
            let msg = format!("localization fell back to the brain mask: {e}");
            log::warn!("{msg}");
            warnings.push(msg);
            out.refined = brain_mask.clone();
            out.fallback = true;
        }
    }
    out.warnings = warnings;
    debug_assert_eq!(out.refined.bits().len(), voxel_count(dims));
    Ok(out)
}
