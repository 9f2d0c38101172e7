//! Stratified cross-validation, classification metrics, the five-row
//! ablation runner and 3D Grad-CAM.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vb_tensor::{Graph, Tensor};

use crate::diagnoser::{
    argmax, backbone_forward, head_forward, train, AugmentConfig, Diagnoser, DiagnoserConfig, EpochLog, HeadMode,
    Prepared, TrainCase,
};
use crate::error::{Error, Result};
use crate::seeds::mix_seed;
use crate::volume::{resample_nearest, Mask, PriorMap, Volume};

/// How per-class precision, recall and F1 are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over classes.
    #[default]
    Macro,
    /// Pooled counts; equals accuracy for single-label predictions.
    Micro,
    /// Mean over classes weighted by true-class support.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_folds: usize,
    pub averaging: Averaging,
    /// Number of correctly classified test cases per fold exported as saliency samples.
    pub saliency_cases: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            averaging: Averaging::Macro,
            saliency_cases: 2,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::Config {
                section: "eval",
                key: "k_folds",
                detail: format!("{} < 2", self.k_folds),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold index of every case, in cohort order.
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&c| self.folds[c] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&c| self.folds[c] != fold).collect()
    }

    pub fn validate(&self, n_cases: usize) -> Result<()> {
        if self.folds.len() != n_cases {
            return Err(Error::invalid(
                "folds",
                format!("{} assignments for {n_cases} cases", self.folds.len()),
            ));
        }
        if let Some(&f) = self.folds.iter().find(|&&f| f >= self.k) {
            return Err(Error::invalid("folds", format!("fold {f} outside 0..{}", self.k)));
        }
        if let Some(f) = (0..self.k).find(|&f| !self.folds.contains(&f)) {
            return Err(Error::invalid("folds", format!("fold {f} is empty")));
        }
        Ok(())
    }
}

/// Shuffles each class with a seeded stream and deals its cases round-robin.
/// The dealing position carries over between classes so fold sizes stay
/// within one of each other as well.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid("stratified_kfold", format!("k = {k} < 2")));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&c| labels[c] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::invalid(
                "stratified_kfold",
                format!("class {class} has {} cases, fewer than k = {k}", members.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class as u64));
        members.shuffle(&mut rng);
        for c in members {
            folds[c] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, folds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: Averaging,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
}

pub fn compute_metrics(preds: &[usize], labels: &[usize], k: usize, averaging: Averaging) -> Result<MetricReport> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(
            "compute_metrics",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::invalid("compute_metrics", "no predictions"));
    }
    if let Some(&v) = preds.iter().chain(labels).find(|&&v| v >= k) {
        return Err(Error::invalid("compute_metrics", format!("class {v} outside 0..{k}")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let n = preds.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut prec, mut rec, mut f1) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for c in 0..k {
        let tp = confusion[c][c];
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if predicted == 0 {
            log::info!("class {c} is never predicted; its precision counts as 0");
        }
        prec[c] = ratio(tp, predicted);
        rec[c] = ratio(tp, actual);
        f1[c] = if prec[c] + rec[c] > 0.0 {
            2.0 * prec[c] * rec[c] / (prec[c] + rec[c])
        } else {
            0.0
        };
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / n as f64;
    let support: Vec<f64> = confusion
        .iter()
        .map(|r| r.iter().sum::<usize>() as f64 / n as f64)
        .collect();
    let combine = |v: &[f64]| match averaging {
        Averaging::Macro => v.iter().sum::<f64>() / k as f64,
        Averaging::Weighted => v.iter().zip(&support).map(|(x, w)| x * w).sum(),
        Averaging::Micro => accuracy,
    };
    Ok(MetricReport {
        n,
        accuracy,
        precision: combine(&prec),
        recall: combine(&rec),
        f1: combine(&f1),
        averaging,
        per_class_precision: prec,
        per_class_recall: rec,
        per_class_f1: f1,
        confusion,
    })
}

/// Fold-level mean of the headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Sum of the per-fold confusion matrices.
    pub confusion: Vec<Vec<usize>>,
}

pub fn average_reports(reports: &[MetricReport]) -> Result<MetricSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("average_reports", "no reports"))?;
    let k = first.confusion.len();
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut confusion = vec![vec![0; k]; k];
    for r in reports {
        for (acc, row) in confusion.iter_mut().zip(&r.confusion) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    Ok(MetricSummary {
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        confusion,
    })
}

/// Which attention mask feeds the diagnoser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Brain,
    Coarse,
    Refined,
}

/// A registered case with every mask the ablation needs.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    pub label: usize,
    pub volume: Volume,
    pub brain: Mask,
    pub coarse: Mask,
    pub refined: Mask,
}

impl EvalCase {
    pub fn mask(&self, source: MaskSource) -> &Mask {
        match source {
            MaskSource::Brain => &self.brain,
            MaskSource::Coarse => &self.coarse,
            MaskSource::Refined => &self.refined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub metrics: MetricReport,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub report: FoldReport,
    pub model: Diagnoser,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: MetricSummary,
}

impl CvReport {
    pub fn fold_reports(&self) -> Vec<&FoldReport> {
        self.folds.iter().map(|f| &f.report).collect()
    }
}

/// Per-fold copies of the configs with seeds split by fold index.
pub fn fold_configs(dcfg: &DiagnoserConfig, aug: &AugmentConfig, fold: usize) -> (DiagnoserConfig, AugmentConfig) {
    (
        DiagnoserConfig {
            seed: mix_seed(dcfg.seed, fold as u64),
            ..dcfg.clone()
        },
        AugmentConfig {
            seed: mix_seed(aug.seed, fold as u64),
            ..aug.clone()
        },
    )
}

/// Trains on the complement of `fold` and evaluates on it without augmentation.
pub fn run_fold(
    cases: &[EvalCase],
    folds: &FoldAssignment,
    fold: usize,
    source: MaskSource,
    dcfg: &DiagnoserConfig,
    aug: &AugmentConfig,
    averaging: Averaging,
) -> Result<FoldResult> {
    let (cfg, aug) = fold_configs(dcfg, aug, fold);
    let train_idx = folds.train_indices(fold);
    let test_idx = folds.test_indices(fold);
    let train_cases: Vec<TrainCase> = train_idx
        .iter()
        .map(|&c| TrainCase {
            volume: cases[c].volume.clone(),
            mask: cases[c].mask(source).clone(),
            label: cases[c].label,
        })
        .collect();
    let (model, log) = train(&train_cases, &cfg, &aug)?;
    let prepared: Vec<Prepared> = test_idx
        .iter()
        .map(|&c| Prepared::new(&cfg, &cases[c].volume, cases[c].mask(source), cases[c].label))
        .collect::<Result<_>>()?;
    let mut probabilities = Vec::with_capacity(prepared.len());
    for p in &prepared {
        probabilities.extend(model.predict_batch(&[p])?);
    }
    let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let labels: Vec<usize> = test_idx.iter().map(|&c| cases[c].label).collect();
    let metrics = compute_metrics(&predictions, &labels, cfg.k_classes, averaging)?;
    let ids = |idx: &[usize]| idx.iter().map(|&c| cases[c].id.clone()).collect();
    Ok(FoldResult {
        report: FoldReport {
            fold,
            train_ids: ids(&train_idx),
            test_ids: ids(&test_idx),
            labels,
            predictions,
            probabilities,
            metrics,
            log,
        },
        model,
    })
}

/// Runs every fold (in parallel) and averages the metrics over folds. A
/// failing fold aborts the run; the folds that finished are kept in the error.
pub fn run_cv(
    cases: &[EvalCase],
    folds: &FoldAssignment,
    source: MaskSource,
    dcfg: &DiagnoserConfig,
    aug: &AugmentConfig,
    eval: &EvalConfig,
) -> std::result::Result<CvReport, CvFailure> {
    let fail = |source: Error| CvFailure {
        fold: None,
        completed: Vec::new(),
        source: Box::new(source),
    };
    folds.validate(cases.len()).map_err(fail)?;
    dcfg.validate().map_err(fail)?;
    let results: Vec<Result<FoldResult>> = (0..folds.k)
        .into_par_iter()
        .map(|f| run_fold(cases, folds, f, source, dcfg, aug, eval.averaging))
        .collect();
    let mut done = Vec::with_capacity(folds.k);
    let mut first_err = None;
    for (f, r) in results.into_iter().enumerate() {
        match r {
            Ok(x) => done.push(x),
            Err(e) if first_err.is_none() => first_err = Some((f, e)),
            Err(e) => log::warn!("fold {f} also failed: {e}"),
        }
    }
    if let Some((f, e)) = first_err {
        return Err(CvFailure {
            fold: Some(f),
            completed: done.into_iter().map(|r| r.report).collect(),
            source: Box::new(e),
        });
    }
    let reports: Vec<MetricReport> = done.iter().map(|r| r.report.metrics.clone()).collect();
    let mean = average_reports(&reports).map_err(fail)?;
    Ok(CvReport { folds: done, mean })
}

/// Cross-validation abort with the reports of the folds that completed.
#[derive(Debug, thiserror::Error)]
#[error("cross-validation aborted{}: {source}", .fold.map(|f| format!(" in fold {f}")).unwrap_or_default())]
pub struct CvFailure {
    pub fold: Option<usize>,
    pub completed: Vec<FoldReport>,
    #[source]
    pub source: Box<Error>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub index: usize,
    pub name: &'static str,
    pub head: HeadMode,
    pub source: MaskSource,
}

/// Baseline; coarse mask; coarse mask with MCA; refined mask; refined mask with MCA.
pub const ABLATION_ROWS: [AblationRow; 5] = [
    AblationRow {
        index: 1,
        name: "baseline",
        head: HeadMode::DoubleGap,
        source: MaskSource::Brain,
    },
    AblationRow {
        index: 2,
        name: "coarse",
        head: HeadMode::MaskedPool,
        source: MaskSource::Coarse,
    },
    AblationRow {
        index: 3,
        name: "coarse+mca",
        head: HeadMode::Mca,
        source: MaskSource::Coarse,
    },
    AblationRow {
        index: 4,
        name: "refined",
        head: HeadMode::MaskedPool,
        source: MaskSource::Refined,
    },
    AblationRow {
        index: 5,
        name: "refined+mca",
        head: HeadMode::Mca,
        source: MaskSource::Refined,
    },
];

pub struct AblationTable {
    pub rows: Vec<(AblationRow, CvReport)>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    #[serde(rename = "Row")]
    row: usize,
    #[serde(rename = "Configuration")]
    name: &'a str,
    #[serde(rename = "Precision")]
    precision: String,
    #[serde(rename = "Recall")]
    recall: String,
    #[serde(rename = "F1-score")]
    f1: String,
    #[serde(rename = "Accuracy")]
    accuracy: String,
}

/// Column names of the ablation CSV, after the row index and name.
pub const METRIC_COLUMNS: [&str; 4] = ["Precision", "Recall", "F1-score", "Accuracy"];

impl AblationTable {
    pub fn row(&self, index: usize) -> Option<&CvReport> {
        self.rows.iter().find(|(r, _)| r.index == index).map(|(_, c)| c)
    }

    /// Fold-averaged metrics in percent with two decimals.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        for (row, rep) in &self.rows {
            w.serialize(CsvRow {
                row: row.index,
                name: row.name,
                precision: pct(rep.mean.precision),
                recall: pct(rep.mean.recall),
                f1: pct(rep.mean.f1),
                accuracy: pct(rep.mean.accuracy),
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}

/// All five rows on one set of localizer products. Rows differ only in head
/// and mask; fold seeds are shared.
pub fn run_ablation(
    cases: &[EvalCase],
    folds: &FoldAssignment,
    base: &DiagnoserConfig,
    aug: &AugmentConfig,
    eval: &EvalConfig,
) -> std::result::Result<AblationTable, CvFailure> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for row in ABLATION_ROWS {
        let cfg = DiagnoserConfig {
            head: row.head,
            ..base.clone()
        };
        log::info!("ablation row {} ({})", row.index, row.name);
        rows.push((row, run_cv(cases, folds, row.source, &cfg, aug, eval)?));
    }
    Ok(AblationTable { rows })
}

/// Spatial mean of the gradient per channel of a `[1, C, d, h, w]` tensor.
pub fn grad_cam_weights(grad: &Tensor) -> Vec<f64> {
    let c = grad.shape()[1];
    let spatial = grad.numel() / c;
    grad.data()
        .chunks(spatial)
        .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
        .collect()
}

/// Feature-resolution map and its channel weights, before normalization.
pub fn grad_cam_raw(model: &Diagnoser, v: &Volume, mask: &Mask, target: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if target >= model.cfg.k_classes {
        return Err(Error::invalid(
            "grad_cam3d",
            format!("class {target} outside 0..{}", model.cfg.k_classes),
        ));
    }
    let p = Prepared::new(&model.cfg, v, mask, 0)?;
    let [d, h, w] = p.dims;
    let fd = model.cfg.feature_dims(p.dims)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.constant(Tensor::new(vec![1, 1, d, h, w], p.x)?);
    let m = g.constant(Tensor::new(vec![1, fd[0], fd[1], fd[2]], p.m)?);
    let f = backbone_forward(&mut g, x, &vars)?;
    let out = head_forward(&mut g, f, m, &vars, &model.cfg)?;
    let logit = g.pick(out.logits, target)?;
    g.backward(logit)?;
    let weights = grad_cam_weights(&g.grad_tensor(f));
    let feats = g.value(f).data();
    let spatial = fd.iter().product::<usize>();
    let cam = (0..spatial)
        .map(|s| {
            let acc: f64 = weights
                .iter()
                .enumerate()
                .map(|(c, wc)| wc * feats[c * spatial + s])
                .sum();
            acc.max(0.0)
        })
        .collect();
    Ok((cam, weights))
}

/// Class-discriminative heatmap of `target`'s pre-softmax logit, min-max
/// normalized and nearest-upsampled to the volume. A flat map is all zero.
pub fn grad_cam3d(model: &Diagnoser, v: &Volume, mask: &Mask, target: usize) -> Result<PriorMap> {
    let (cam, _) = grad_cam_raw(model, v, mask, target)?;
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f32> = if hi - lo > 1e-12 * hi.abs().max(1.0) {
        cam.iter()
            .map(|&c| (((c - lo) / (hi - lo)) as f32).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; cam.len()]
    };
    let fd = model.cfg.feature_dims(v.dims())?;
    let small = Volume::new(fd, norm)?;
    PriorMap::from_volume(&resample_nearest(&small, v.dims())?)
}

/// Share of heatmap mass inside `mask`; `None` for an all-zero map.
pub fn mass_fraction(map: &PriorMap, mask: &Mask) -> Option<f64> {
    let total: f64 = map.values().iter().map(|&x| f64::from(x)).sum();
    if total <= 0.0 {
        return None;
    }
    let inside: f64 = map
        .values()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &b)| b)
        .map(|(&x, _)| f64::from(x))
        .sum();
    Some(inside / total)
}

/// Writes one binary PGM per axial slice as `{stem}_{d:03}.pgm`.
pub fn write_pgm_slices(map: &PriorMap, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [depth, h, w] = map.dims();
    let mut out = Vec::with_capacity(depth);
    for (d, slice) in map.values().chunks(h * w).enumerate() {
        let bytes: Vec<u8> = slice
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("slice buffer matches its dims");
        let path = dir.join(format!("{stem}_{d:03}.pgm"));
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        image::codecs::pnm::PnmEncoder::new(&mut file)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(
                image::codecs::pnm::SampleEncoding::Binary,
            ))
            .encode(
                img.as_raw().as_slice(),
                w as u32,
                h as u32,
                image::ExtendedColorType::L8,
            )
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        out.push(path);
    }
    Ok(out)
}
