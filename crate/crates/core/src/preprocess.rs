//! Reference preprocessing stages: brain extraction, bias correction and
//! template registration, composed in that fixed order.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{flat_index, unflatten, voxel_count, Dims, Mask, Volume};

/// Fraction of the template each axis of the brain bounding box may fill.
pub const TEMPLATE_FILL: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub brain_threshold_quantile: f64,
    pub bias_poly_degree: usize,
    pub template_dims: Dims,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            brain_threshold_quantile: 0.5,
            bias_poly_degree: 2,
            template_dims: [32, 32, 32],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let q = self.brain_threshold_quantile;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Config {
                section: "preprocess",
                key: "brain_threshold_quantile",
                detail: format!("{q} is outside (0, 1)"),
            });
        }
        if self.template_dims.contains(&0) {
            return Err(Error::Config {
                section: "preprocess",
                key: "template_dims",
                detail: format!("{:?} has a zero dimension", self.template_dims),
            });
        }
        Ok(())
    }
}

/// Value at quantile `q` by lower nearest rank over the sorted voxels.
pub fn quantile(values: &[f32], q: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

const NEIGHBOURS: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];

fn step(dims: Dims, idx: usize, off: (isize, isize, isize)) -> Option<usize> {
    let (d, i, j) = unflatten(dims, idx);
    let nd = d.checked_add_signed(off.0).filter(|&x| x < dims[0])?;
    let ni = i.checked_add_signed(off.1).filter(|&x| x < dims[1])?;
    let nj = j.checked_add_signed(off.2).filter(|&x| x < dims[2])?;
    Some(flat_index(dims, nd, ni, nj))
}

/// Largest 6-connected component of `bits`; ties go to the component whose
/// first voxel comes earliest in storage order.
pub fn largest_component(dims: Dims, bits: &[bool]) -> Vec<bool> {
    let mut label = vec![0u32; bits.len()];
    let mut best: Option<(usize, u32)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for seed in 0..bits.len() {
        if !bits[seed] || label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            for off in NEIGHBOURS {
                if let Some(n) = step(dims, idx, off) {
                    if bits[n] && label[n] == 0 {
                        label[n] = next;
                        queue.push_back(n);
                    }
                }
            }
        }
        if best.map_or(true, |(s, _)| size > s) {
            best = Some((size, next));
        }
    }
    match best {
        Some((_, id)) => label.iter().map(|&l| l == id).collect(),
        None => vec![false; bits.len()],
    }
}

/// Quantile threshold (ties kept) followed by the largest 6-connected
/// component. Exact zeros count as background already removed, so the stage
/// is stable on its own output.
pub fn brain_extract(v: &Volume, cfg: &PreprocessConfig) -> Result<(Volume, Mask)> {
    cfg.validate()?;
    let t = quantile(v.voxels(), cfg.brain_threshold_quantile);
    let above: Vec<bool> = v.voxels().iter().map(|&x| x >= t && x != 0.0).collect();
    if !above.iter().any(|&b| b) {
        return Err(Error::EmptyThreshold);
    }
    let bits = largest_component(v.dims(), &above);
    let voxels = v
        .voxels()
        .iter()
        .zip(&bits)
        .map(|(&x, &b)| if b { x } else { 0.0 })
        .collect();
    Ok((
        Volume::with_spacing(v.dims(), v.spacing(), voxels)?,
        Mask::new(v.dims(), bits)?.with_spacing(v.spacing()),
    ))
}

/// Exponent triples of every monomial with total degree at most `degree`.
pub fn monomials(degree: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for total in 0..=degree {
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                out.push([a, b, total - a - b]);
            }
        }
    }
    out
}

fn normalized_coord(idx: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * idx as f64 / (n - 1) as f64 - 1.0
    }
}

fn design_row(dims: Dims, idx: usize, terms: &[[usize; 3]], row: &mut [f64]) {
    let (d, i, j) = unflatten(dims, idx);
    let t = [
        normalized_coord(d, dims[0]),
        normalized_coord(i, dims[1]),
        normalized_coord(j, dims[2]),
    ];
    for (r, e) in row.iter_mut().zip(terms) {
        *r = t[0].powi(e[0] as i32) * t[1].powi(e[1] as i32) * t[2].powi(e[2] as i32);
    }
}

/// Log-domain polynomial bias field fitted inside `mask`, normalized to zero
/// mean over the mask.
pub fn fit_log_field(v: &Volume, mask: &Mask, degree: usize) -> Result<Vec<f64>> {
    if mask.dims() != v.dims() {
        return Err(Error::invalid(
            "bias_correct",
            format!("mask dims {:?} differ from volume dims {:?}", mask.dims(), v.dims()),
        ));
    }
    if mask.is_empty() {
        return Err(Error::invalid("bias_correct", "mask is empty"));
    }
    let terms = monomials(degree);
    let inside: Vec<usize> = (0..v.len()).filter(|&i| mask.bits()[i]).collect();
    if let Some(&idx) = inside.iter().find(|&&i| v.voxels()[i] <= 0.0) {
        return Err(Error::NonPositiveVoxel {
            index: idx,
            value: v.voxels()[idx],
        });
    }
    if inside.len() < terms.len() {
        return Err(Error::RankDeficient {
            mask_voxels: inside.len(),
            terms: terms.len(),
        });
    }
    let dims = v.dims();
    let rows: Vec<Vec<f64>> = inside
        .iter()
        .map(|&idx| {
            let mut row = vec![0.0; terms.len()];
            design_row(dims, idx, &terms, &mut row);
            row
        })
        .collect();
    let logs: Vec<f64> = inside.iter().map(|&i| (v.voxels()[i] as f64).ln()).collect();
    let all: Vec<usize> = (0..inside.len()).collect();
    let mut coef = least_squares(&rows, &logs, &all).ok_or(Error::RankDeficient {
        mask_voxels: inside.len(),
        terms: terms.len(),
    })?;
    // Refit without focal outliers such as lesions, which would otherwise
    // bend the smooth field towards themselves.
    for _ in 0..ROBUST_PASSES {
        let resid: Vec<f64> = rows.iter().zip(&logs).map(|(r, l)| l - dot(r, &coef)).collect();
        let centre = median(&resid);
        let mad = median(&resid.iter().map(|r| (r - centre).abs()).collect::<Vec<_>>());
        if mad == 0.0 {
            break;
        }
        let cut = OUTLIER_MADS * 1.4826 * mad;
        let inliers: Vec<usize> = (0..resid.len()).filter(|&k| (resid[k] - centre).abs() <= cut).collect();
        if inliers.len() == resid.len() {
            break;
        }
        match least_squares(&rows, &logs, &inliers) {
            Some(c) => coef = c,
            None => break,
        }
    }

    let mut row = vec![0.0; terms.len()];
    let mut field = vec![0.0; v.len()];
    for (idx, f) in field.iter_mut().enumerate() {
        design_row(dims, idx, &terms, &mut row);
        *f = dot(&row, &coef);
    }
    let mean = inside.iter().map(|&i| field[i]).sum::<f64>() / inside.len() as f64;
    field.iter_mut().for_each(|f| *f -= mean);
    Ok(field)
}

const ROBUST_PASSES: usize = 5;
const OUTLIER_MADS: f64 = 2.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares coefficients over the selected rows, or `None` when the
/// design is rank deficient.
fn least_squares(rows: &[Vec<f64>], target: &[f64], pick: &[usize]) -> Option<Vec<f64>> {
    let terms = rows[0].len();
    if pick.len() < terms {
        return None;
    }
    let a = DMatrix::from_fn(pick.len(), terms, |r, c| rows[pick[r]][c]);
    let b = DVector::from_iterator(pick.len(), pick.iter().map(|&k| target[k]));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10) {
        return None;
    }
    svd.solve(&b, 0.0).ok().map(|c| c.iter().copied().collect())
}

pub fn bias_correct(v: &Volume, mask: &Mask, cfg: &PreprocessConfig) -> Result<Volume> {
    let field = fit_log_field(v, mask, cfg.bias_poly_degree)?;
    let voxels = v
        .voxels()
        .iter()
        .zip(&field)
        .map(|(&x, f)| (x as f64 / f.exp()) as f32)
        .collect();
    Volume::with_spacing(v.dims(), v.spacing(), voxels)
}

/// Centroid translation plus isotropic scale onto the template grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub source_dims: Dims,
    pub template_dims: Dims,
    pub source_centroid: [f64; 3],
    pub scale: f64,
}

impl Registration {
    pub fn fit(mask: &Mask, template_dims: Dims) -> Result<Self> {
        let centroid = mask
            .centroid()
            .ok_or_else(|| Error::invalid("register_to_template", "mask is empty"))?;
        let scale = if mask.count() == 1 {
            1.0
        } else {
            let (lo, hi) = mask.bounding_box().expect("non-empty mask");
            (0..3)
                .map(|k| TEMPLATE_FILL * template_dims[k] as f64 / (hi[k] - lo[k] + 1) as f64)
                .fold(f64::INFINITY, f64::min)
        };
        Ok(Self {
            source_dims: mask.dims(),
            template_dims,
            source_centroid: centroid,
            scale,
        })
    }

    pub fn template_centre(&self) -> [f64; 3] {
        self.template_dims.map(|n| (n as f64 - 1.0) / 2.0)
    }

    /// Nearest source voxel for template voxel `(d, i, j)`, if it lies on the grid.
    pub fn source_of(&self, d: usize, i: usize, j: usize) -> Option<usize> {
        let c = self.template_centre();
        let o = [d as f64, i as f64, j as f64];
        let mut src = [0usize; 3];
        for k in 0..3 {
            let p = self.source_centroid[k] + (o[k] - c[k]) / self.scale;
            // nearest with ties to the lower index
            let r = (p - 0.5).ceil();
            if r < 0.0 || r >= self.source_dims[k] as f64 {
                return None;
            }
            src[k] = r as usize;
        }
        Some(flat_index(self.source_dims, src[0], src[1], src[2]))
    }

    fn map<T: Copy>(&self, src: &[T], fill: T) -> Vec<T> {
        let t = self.template_dims;
        let mut out = Vec::with_capacity(voxel_count(t));
        for d in 0..t[0] {
            for i in 0..t[1] {
                for j in 0..t[2] {
                    out.push(self.source_of(d, i, j).map_or(fill, |s| src[s]));
                }
            }
        }
        out
    }

    fn check(&self, dims: Dims) -> Result<()> {
        if dims != self.source_dims {
            return Err(Error::invalid(
                "register_to_template",
                format!("input dims {dims:?} differ from fitted dims {:?}", self.source_dims),
            ));
        }
        Ok(())
    }

    pub fn apply_volume(&self, v: &Volume) -> Result<Volume> {
        self.check(v.dims())?;
        Volume::new(self.template_dims, self.map(v.voxels(), 0.0))
    }

    pub fn apply_mask(&self, m: &Mask) -> Result<Mask> {
        self.check(m.dims())?;
        Mask::new(self.template_dims, self.map(m.bits(), false))
    }
}

pub fn register_to_template(v: &Volume, mask: &Mask, cfg: &PreprocessConfig) -> Result<Volume> {
    Registration::fit(mask, cfg.template_dims)?.apply_volume(v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageLog {
    pub stage: &'static str,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub volume: Volume,
    /// Brain mask carried through registration.
    pub brain_mask: Mask,
    pub registration: Registration,
    pub log: Vec<StageLog>,
}

impl Preprocessed {
    /// Moves a source-space mask (e.g. ground truth) into template space.
    pub fn register_mask(&self, m: &Mask) -> Result<Mask> {
        self.registration.apply_mask(m)
    }
}

/// `register(bias_correct(brain_extract(x)))`.
pub fn preprocess_pipeline(x_raw: &Volume, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let mut log = Vec::with_capacity(3);
    let (stripped, mask) = brain_extract(x_raw, cfg).map_err(|e| e.in_stage("brain_extract"))?;
    log.push(StageLog {
        stage: "brain_extract",
        detail: format!("{} of {} voxels kept", mask.count(), mask.bits().len()),
    });
    let corrected = bias_correct(&stripped, &mask, cfg).map_err(|e| e.in_stage("bias_correct"))?;
    log.push(StageLog {
        stage: "bias_correct",
        detail: format!("degree {} log-polynomial", cfg.bias_poly_degree),
    });
    let reg = Registration::fit(&mask, cfg.template_dims).map_err(|e| e.in_stage("register"))?;
    let volume = reg.apply_volume(&corrected).map_err(|e| e.in_stage("register"))?;
    let brain_mask = reg.apply_mask(&mask).map_err(|e| e.in_stage("register"))?;
    log.push(StageLog {
        stage: "register",
        detail: format!("scale {:.6}, centroid {:?}", reg.scale, reg.source_centroid),
    });
    Ok(Preprocessed {
        volume,
        brain_mask,
        registration: reg,
        log,
    })
}
