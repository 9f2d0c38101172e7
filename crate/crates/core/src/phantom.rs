//! Synthetic labeled cohorts: one ellipsoidal brain, one spherical tumor
//! carrying a class signature, optional lesion mimics and corruptions.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{flat_index, unflatten, voxel_count, Dims, Mask, Volume};

/// Appearance of one tumor class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    pub intensity_mean: f64,
    /// Case-to-case spread of the tumor mean.
    pub intensity_std: f64,
    /// Cycles per voxel of the sinusoidal texture; 0 disables it.
    pub texture_frequency: f64,
    /// Intensity added on the outer shell (relative radius above 0.7).
    pub rim_strength: f64,
    /// Std of the per-voxel jitter inside the tumor.
    pub heterogeneity: f64,
}

impl ClassSignature {
    pub fn new(mean: f64, std: f64, freq: f64, rim: f64, het: f64) -> Self {
        Self {
            intensity_mean: mean,
            intensity_std: std,
            texture_frequency: freq,
            rim_strength: rim,
            heterogeneity: het,
        }
    }
}

/// Optional acquisition corruptions applied after rendering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    /// Peak log-amplitude of a random smooth multiplicative field; 0 disables.
    pub bias_field: f64,
    /// Maximum whole-head shift per axis in voxels.
    pub max_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_cases: usize,
    pub dims: Dims,
    pub n_classes: usize,
    pub class_signatures: Vec<ClassSignature>,
    pub tumor_radius_range: (f64, f64),
    pub brain_ellipsoid_margin: f64,
    pub brain_intensity: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    /// Tumor-like blobs with a random class signature that are not part of
    /// the ground-truth mask.
    pub mimic_count: usize,
    pub corruption: Corruption,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_cases: 20,
            dims: [32, 32, 32],
            n_classes: 4,
            class_signatures: default_signatures(),
            tumor_radius_range: (4.0, 6.0),
            brain_ellipsoid_margin: 0.1,
            brain_intensity: 0.5,
            texture_amplitude: 0.1,
            noise_std: 0.05,
            mimic_count: 0,
            corruption: Corruption::default(),
            seed: 0,
        }
    }
}

pub fn default_signatures() -> Vec<ClassSignature> {
    vec![
        ClassSignature::new(0.3, 0.03, 0.0, 0.0, 0.03),
        ClassSignature::new(0.75, 0.03, 0.25, 0.0, 0.05),
        ClassSignature::new(1.0, 0.03, 0.0, 0.25, 0.05),
        ClassSignature::new(1.3, 0.03, 0.15, 0.15, 0.08),
    ]
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("phantom config", detail));
        if self.n_classes < 2 {
            return bad(format!("n_classes = {} (need at least 2)", self.n_classes));
        }
        if self.n_cases < self.n_classes {
            return bad(format!("n_cases = {} < n_classes = {}", self.n_cases, self.n_classes));
        }
        if self.class_signatures.len() != self.n_classes {
            return bad(format!(
                "{} class signatures for {} classes",
                self.class_signatures.len(),
                self.n_classes
            ));
        }
        if self.dims.contains(&0) {
            return bad(format!("zero dimension in {:?}", self.dims));
        }
        for (k, s) in self.class_signatures.iter().enumerate() {
            let vals = [
                s.intensity_mean,
                s.intensity_std,
                s.texture_frequency,
                s.rim_strength,
                s.heterogeneity,
            ];
            if vals.iter().any(|v| !v.is_finite()) || s.intensity_std < 0.0 || s.heterogeneity < 0.0 {
                return bad(format!("class {k} signature is non-finite or has a negative std"));
            }
        }
        let (lo, hi) = self.tumor_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("tumor radius range ({lo}, {hi}) must satisfy 0 < min <= max"));
        }
        if !(0.0..0.5).contains(&self.brain_ellipsoid_margin) {
            return bad(format!("brain margin {} outside [0, 0.5)", self.brain_ellipsoid_margin));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() || self.texture_amplitude < 0.0 {
            return bad("noise_std and texture_amplitude must be finite and non-negative".into());
        }
        if self.corruption.bias_field < 0.0 || !self.corruption.bias_field.is_finite() {
            return bad("corruption.bias_field must be finite and non-negative".into());
        }
        let semi = self.brain_semi_axes();
        if semi.iter().any(|&a| a - hi - 1.0 <= 0.0) {
            return bad(format!(
                "tumor radius {hi} does not fit inside brain semi-axes {semi:?}"
            ));
        }
        for axis in 0..3 {
            let centre = (self.dims[axis] as f64 - 1.0) / 2.0;
            if centre - semi[axis] - (self.corruption.max_offset as f64) < -0.5 {
                return bad(format!(
                    "max_offset {} pushes the brain off axis {axis}",
                    self.corruption.max_offset
                ));
            }
        }
        Ok(())
    }

    pub fn brain_semi_axes(&self) -> [f64; 3] {
        self.dims.map(|n| n as f64 * (0.5 - self.brain_ellipsoid_margin))
    }

    pub fn class_of(&self, case_index: usize) -> usize {
        case_index % self.n_classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub class_label: usize,
    /// Relative to the manifest's directory.
    pub volume_path: PathBuf,
    pub gt_mask_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<CaseRecord>,
    pub k_classes: usize,
    pub generator_config_echo: serde_json::Value,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.cases.is_empty() {
            return Err(Error::invalid("manifest", format!("{} lists no cases", path.display())));
        }
        if let Some(c) = m.cases.iter().find(|c| c.class_label >= m.k_classes) {
            return Err(Error::invalid(
                "manifest",
                format!(
                    "case {} has label {} >= k_classes {}",
                    c.case_id, c.class_label, m.k_classes
                ),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.cases.iter().map(|c| c.class_label).collect()
    }
}

/// Geometry drawn for one case; kept so tests can check against the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseGeometry {
    pub brain_centre: [f64; 3],
    pub offset: [i64; 3],
    pub tumor_centre: [f64; 3],
    pub tumor_radius: f64,
    pub mimics: Vec<([f64; 3], f64, usize)>,
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub case_id: String,
    pub label: usize,
    pub volume: Volume,
    pub gt_mask: Mask,
    pub brain_mask: Mask,
    pub geometry: CaseGeometry,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Per-case random stream split from the master seed.
pub fn case_rng(seed: u64, case_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case_index as u64);
    rng
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn inside_ellipsoid(p: [f64; 3], centre: [f64; 3], semi: [f64; 3]) -> bool {
    (0..3).map(|k| ((p[k] - centre[k]) / semi[k]).powi(2)).sum::<f64>() <= 1.0
}

/// Uniform point inside the ellipsoid with the given semi-axes.
fn sample_in_ellipsoid(rng: &mut ChaCha8Rng, centre: [f64; 3], semi: [f64; 3]) -> [f64; 3] {
    loop {
        let u: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..=1.0));
        if u.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return [0, 1, 2].map(|k| centre[k] + u[k] * semi[k]);
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

struct Lesion {
    class: usize,
    centre: [f64; 3],
    radius: f64,
    mean: f64,
    sig: ClassSignature,
    direction: [f64; 3],
    phase: f64,
}

impl Lesion {
    fn draw(rng: &mut ChaCha8Rng, cfg: &PhantomConfig, centre: [f64; 3], radius: f64, class: usize) -> Self {
        let sig = cfg.class_signatures[class].clone();
        let z: f64 = StandardNormal.sample(rng);
        Self {
            class,
            centre,
            radius,
            mean: sig.intensity_mean + sig.intensity_std * z,
            direction: unit_vector(rng),
            phase: rng.random_range(0.0..2.0 * PI),
            sig,
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        dist2(p, self.centre) <= self.radius * self.radius
    }

    fn value(&self, p: [f64; 3], amplitude: f64, jitter: f64) -> f64 {
        let rel = dist2(p, self.centre).sqrt() / self.radius;
        let proj: f64 = (0..3).map(|k| (p[k] - self.centre[k]) * self.direction[k]).sum();
        let mut v = self.mean;
        if self.sig.texture_frequency > 0.0 {
            v += amplitude * (2.0 * PI * self.sig.texture_frequency * proj + self.phase).sin();
        }
        if rel > 0.7 {
            v += self.sig.rim_strength;
        }
        v + self.sig.heterogeneity * jitter
    }
}

/// Renders case `index` in memory. Identical for a given `(cfg, index)`
/// regardless of which other cases are generated.
pub fn generate_case(cfg: &PhantomConfig, index: usize) -> Result<PhantomCase> {
    cfg.validate()?;
    let dims = cfg.dims;
    let mut rng = case_rng(cfg.seed, index);
    let label = cfg.class_of(index);
    let semi = cfg.brain_semi_axes();

    let offset: [i64; 3] = [0, 1, 2].map(|_| {
        let m = cfg.corruption.max_offset as i64;
        if m == 0 {
            0
        } else {
            rng.random_range(-m..=m)
        }
    });
    let brain_centre: [f64; 3] = [0, 1, 2].map(|k| (dims[k] as f64 - 1.0) / 2.0 + offset[k] as f64);

    let (lo, hi) = cfg.tumor_radius_range;
    let radius = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let inner = semi.map(|a| a - radius - 1.0);
    let tumor_centre = sample_in_ellipsoid(&mut rng, brain_centre, inner);
    let tumor = Lesion::draw(&mut rng, cfg, tumor_centre, radius, label);

    let mut mimics = Vec::with_capacity(cfg.mimic_count);
    for m in 0..cfg.mimic_count {
        let mut placed = None;
        for _ in 0..1000 {
            let r = if lo == hi { lo } else { rng.random_range(lo..hi) };
            let c = sample_in_ellipsoid(&mut rng, brain_centre, semi.map(|a| a - r - 1.0));
            let clear_of_tumor = dist2(c, tumor.centre).sqrt() >= tumor.radius + r + 2.0;
            let clear_of_others = mimics
                .iter()
                .all(|o: &Lesion| dist2(c, o.centre).sqrt() >= o.radius + r + 2.0);
            if clear_of_tumor && clear_of_others {
                placed = Some((c, r));
                break;
            }
        }
        let (c, r) = placed.ok_or_else(|| {
            Error::invalid(
                "generate_cohort",
                format!("no room for lesion mimic {m} in case {index}"),
            )
        })?;
        let class = rng.random_range(0..cfg.n_classes);
        mimics.push(Lesion::draw(&mut rng, cfg, c, r, class));
    }

    let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let n = voxel_count(dims);
    let mut voxels = vec![0f32; n];
    let mut gt = vec![false; n];
    let mut brain = vec![false; n];
    for d in 0..dims[0] {
        for i in 0..dims[1] {
            for j in 0..dims[2] {
                let p = [d as f64, i as f64, j as f64];
                let idx = flat_index(dims, d, i, j);
                let mut v = 0.0;
                if inside_ellipsoid(p, brain_centre, semi) {
                    brain[idx] = true;
                    v = cfg.brain_intensity;
                    if tumor.contains(p) {
                        gt[idx] = true;
                        v = tumor.value(p, cfg.texture_amplitude, StandardNormal.sample(&mut rng));
                    } else if let Some(m) = mimics.iter().find(|m| m.contains(p)) {
                        v = m.value(p, cfg.texture_amplitude, StandardNormal.sample(&mut rng));
                    }
                }
                voxels[idx] = (v + noise.sample(&mut rng)) as f32;
            }
        }
    }

    if cfg.corruption.bias_field > 0.0 {
        let coeffs: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let norm: f64 = coeffs.iter().map(|c| c.abs()).sum();
        let scale = cfg.corruption.bias_field / norm;
        let mut log_field: Vec<f64> = (0..n)
            .map(|idx| {
                let (d, i, j) = unflatten(dims, idx);
                let pos = [d, i, j];
                let t: [f64; 3] = [0, 1, 2].map(|k| 2.0 * pos[k] as f64 / (dims[k].max(2) - 1) as f64 - 1.0);
                let terms = [
                    1.0,
                    t[0],
                    t[1],
                    t[2],
                    t[0] * t[0],
                    t[1] * t[1],
                    t[2] * t[2],
                    t[0] * t[1],
                    t[0] * t[2],
                    t[1] * t[2],
                ];
                scale * coeffs.iter().zip(terms).map(|(c, t)| c * t).sum::<f64>()
            })
            .collect();
        // zero mean over the brain keeps its overall brightness
        let inside = brain.iter().filter(|&&b| b).count().max(1) as f64;
        let mean = log_field
            .iter()
            .zip(&brain)
            .filter(|(_, &b)| b)
            .map(|(f, _)| f)
            .sum::<f64>()
            / inside;
        log_field.iter_mut().for_each(|f| *f -= mean);
        for (v, f) in voxels.iter_mut().zip(&log_field) {
            *v = (*v as f64 * f.exp()) as f32;
        }
    }

    Ok(PhantomCase {
        case_id: case_id(index),
        label,
        volume: Volume::new(dims, voxels)?,
        gt_mask: Mask::new(dims, gt)?,
        brain_mask: Mask::new(dims, brain)?,
        geometry: CaseGeometry {
            brain_centre,
            offset,
            tumor_centre: tumor.centre,
            tumor_radius: radius,
            mimics: mimics.iter().map(|m| (m.centre, m.radius, m.class)).collect(),
        },
    })
}

/// Renders the whole cohort in memory (parallel across cases).
pub fn generate_in_memory(cfg: &PhantomConfig) -> Result<Vec<PhantomCase>> {
    cfg.validate()?;
    (0..cfg.n_cases)
        .into_par_iter()
        .map(|i| generate_case(cfg, i))
        .collect()
}

/// Writes `volumes/<id>.vbv`, `masks/<id>.vbm` and `manifest.json` under `out_dir`.
pub fn generate_cohort(cfg: &PhantomConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["volumes", "masks"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let cases: Vec<CaseRecord> = (0..cfg.n_cases)
        .into_par_iter()
        .map(|i| -> Result<CaseRecord> {
            let case = generate_case(cfg, i)?;
            let volume_path = PathBuf::from("volumes").join(format!("{}.vbv", case.case_id));
            let gt_mask_path = PathBuf::from("masks").join(format!("{}.vbm", case.case_id));
            case.volume.save(out.join(&volume_path))?;
            case.gt_mask.save(out.join(&gt_mask_path))?;
            Ok(CaseRecord {
                case_id: case.case_id,
                class_label: case.label,
                volume_path,
                gt_mask_path,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        cases,
        k_classes: cfg.n_classes,
        generator_config_echo: serde_json::to_value(cfg).expect("config serializes"),
    };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}

/// Per-class tumor statistics pooled over every tumor voxel of that class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassStats {
    pub class_label: usize,
    pub n_cases: usize,
    pub n_voxels: usize,
    pub mean_intensity: f64,
    pub std_intensity: f64,
    /// Mean absolute difference between a tumor voxel and its in-tumor
    /// 6-neighbours; a texture roughness proxy.
    pub mean_neighbour_diff: f64,
}

pub fn class_separability_report(manifest: &Manifest, base_dir: impl AsRef<Path>) -> Result<Vec<ClassStats>> {
    if manifest.cases.is_empty() {
        return Err(Error::invalid("class_separability_report", "manifest lists no cases"));
    }
    let base = base_dir.as_ref();
    let mut acc: Vec<(usize, Vec<f64>, f64, usize)> = vec![(0, Vec::new(), 0.0, 0); manifest.k_classes];
    for case in &manifest.cases {
        let v = Volume::load(base.join(&case.volume_path))?;
        let m = Mask::load(base.join(&case.gt_mask_path))?;
        let slot = &mut acc[case.class_label];
        slot.0 += 1;
        let (diff_sum, diff_n) = tumor_texture(&v, &m);
        slot.2 += diff_sum;
        slot.3 += diff_n;
        slot.1.extend(
            v.voxels()
                .iter()
                .zip(m.bits())
                .filter(|(_, &b)| b)
                .map(|(&x, _)| x as f64),
        );
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.0 > 0)
        .map(|(k, (n_cases, vals, diff_sum, diff_n))| {
            let n = vals.len().max(1) as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            ClassStats {
                class_label: k,
                n_cases,
                n_voxels: vals.len(),
                mean_intensity: mean,
                std_intensity: var.sqrt(),
                mean_neighbour_diff: if diff_n == 0 { 0.0 } else { diff_sum / diff_n as f64 },
            }
        })
        .collect())
}

fn tumor_texture(v: &Volume, m: &Mask) -> (f64, usize) {
    let dims = v.dims();
    let mut sum = 0.0;
    let mut n = 0;
    for d in 0..dims[0] {
        for i in 0..dims[1] {
            for j in 0..dims[2] {
                if !m.get(d, i, j) {
                    continue;
                }
                let here = v.get(d, i, j) as f64;
                for (dd, di, dj) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (a, b, c) = (d + dd, i + di, j + dj);
                    if a < dims[0] && b < dims[1] && c < dims[2] && m.get(a, b, c) {
                        sum += (here - v.get(a, b, c) as f64).abs();
                        n += 1;
                    }
                }
            }
        }
    }
    (sum, n)
}
