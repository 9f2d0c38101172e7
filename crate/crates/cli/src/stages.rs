//! One function per subcommand. Each reads its inputs from the run layout,
//! rewrites its own stage directory and lists what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vb_core::diagnoser::{argmax, Diagnoser, HeadMode, Prepared};
use vb_core::eval::{
    average_reports, compute_metrics, fold_configs, grad_cam3d, mass_fraction, run_ablation, run_cv, stratified_kfold,
    write_pgm_slices, AblationRow, AblationTable, EvalCase, FoldAssignment, FoldReport, MaskSource, MetricReport,
    MetricSummary,
};
use vb_core::localizer::{localize_case, PriorConfig};
use vb_core::oracle::{BoxPredictor, RemoteOracle, StubNoiseConfig, StubOracle};
use vb_core::phantom::{generate_cohort, Manifest};
use vb_core::preprocess::preprocess_pipeline;
use vb_core::seeds::mix_seed;
use vb_core::{Mask, Volume};
use vb_tensor::Checkpoint;

use crate::artifacts::{read_json, require, write_json, write_produced, write_text, Layout};
use crate::config::{OracleKind, RunConfig};

/// Effective configuration plus the output layout it writes to.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: RunConfig,
    pub layout: Layout,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        let layout = Layout::new(cfg.output_root.clone());
        Self { cfg, layout }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessEntry {
    pub case_id: String,
    pub label: usize,
    pub volume: String,
    pub brain_mask: String,
    pub gt_mask: String,
    pub log: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeEntry {
    pub case_id: String,
    pub label: usize,
    pub prior: String,
    pub coarse_mask: String,
    pub refined_mask: String,
    pub fallback: bool,
    pub failed_slices: Vec<usize>,
    pub n_boxes: usize,
    pub coarse_recall: f64,
    pub refined_recall: f64,
    pub refined_iou: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldsFile {
    pub case_ids: Vec<String>,
    pub assignment: FoldAssignment,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub head: HeadMode,
    pub mask: MaskSource,
    pub folds: Vec<MetricReport>,
    pub mean: MetricSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub mean: MetricSummary,
    pub folds: Vec<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySample {
    pub fold: usize,
    pub case_id: String,
    pub label: usize,
    pub heatmap: String,
    pub pgm_slices: usize,
    /// Share of heatmap mass inside the ground-truth tumor; absent for a flat map.
    pub tumor_mass_fraction: Option<f64>,
    pub tumor_volume_fraction: f64,
}

/// A localized case with its ground truth, as the training stages read it.
pub struct LoadedCase {
    pub case: EvalCase,
    pub gt: Mask,
}

pub fn phantom_gen(run: &Run) -> anyhow::Result<Manifest> {
    let dir = run.layout.fresh_stage("phantom", &run.cfg)?;
    let manifest = generate_cohort(&run.cfg.phantom, &dir)?;
    write_produced(&dir)?;
    log::info!("generated {} cases", manifest.cases.len());
    Ok(manifest)
}

pub fn preprocess(run: &Run) -> anyhow::Result<Vec<PreprocessEntry>> {
    let manifest_path = run.layout.manifest();
    require(&manifest_path, "vbiopsy phantom-gen")?;
    let manifest = Manifest::load(&manifest_path)?;
    let src = manifest_path
        .parent()
        .expect("manifest lives in a directory")
        .to_path_buf();
    let dir = run.layout.fresh_stage("preprocess", &run.cfg)?;
    let entries: Vec<PreprocessEntry> = manifest
        .cases
        .par_iter()
        .map(|rec| -> anyhow::Result<PreprocessEntry> {
            let id = &rec.case_id;
            let raw = Volume::load(src.join(&rec.volume_path))?;
            let gt = Mask::load(src.join(&rec.gt_mask_path))?;
            let p = preprocess_pipeline(&raw, &run.cfg.preprocess).with_context(|| format!("case {id}"))?;
            let gt = p.register_mask(&gt)?;
            let entry = PreprocessEntry {
                case_id: id.clone(),
                label: rec.class_label,
                volume: format!("{id}.vbv"),
                brain_mask: format!("{id}_brain.vbm"),
                gt_mask: format!("{id}_gt.vbm"),
                log: p.log.iter().map(|l| format!("{}: {}", l.stage, l.detail)).collect(),
            };
            p.volume.save(dir.join(&entry.volume))?;
            p.brain_mask.save(dir.join(&entry.brain_mask))?;
            gt.save(dir.join(&entry.gt_mask))?;
            Ok(entry)
        })
        .collect::<anyhow::Result<_>>()?;
    write_json(&run.layout.preprocess_index(), &entries)?;
    write_produced(&dir)?;
    Ok(entries)
}

fn case_predictor(run: &Run, index: usize) -> Box<dyn BoxPredictor> {
    match run.cfg.oracle.kind {
        OracleKind::Stub => {
            let cfg = StubNoiseConfig {
                seed: mix_seed(run.cfg.oracle.stub.seed, index as u64),
                ..run.cfg.oracle.stub.clone()
            };
            Box::new(StubOracle::new(cfg).expect("stub config validated with the run config"))
        }
        OracleKind::Remote => Box::new(RemoteOracle::new(run.cfg.oracle.remote.clone())),
    }
}

pub fn localize(run: &Run) -> anyhow::Result<Vec<LocalizeEntry>> {
    let index_path = run.layout.preprocess_index();
    require(&index_path, "vbiopsy preprocess")?;
    let pre: Vec<PreprocessEntry> = read_json(&index_path)?;
    let src = run.layout.stage("preprocess");
    let dir = run.layout.fresh_stage("localize", &run.cfg)?;
    let entries: Vec<LocalizeEntry> = pre
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> anyhow::Result<LocalizeEntry> {
            let id = &e.case_id;
            let volume = Volume::load(src.join(&e.volume))?;
            let brain = Mask::load(src.join(&e.brain_mask))?;
            let gt = Mask::load(src.join(&e.gt_mask))?;
            let predictor = case_predictor(run, i);
            let lcfg = PriorConfig {
                seed: mix_seed(run.cfg.localizer.seed, i as u64),
                ..run.cfg.localizer.clone()
            };
            let loc = localize_case(&volume, &brain, Some(&gt), predictor.as_ref(), &lcfg)
                .with_context(|| format!("case {id}"))?;
            for w in &loc.warnings {
                log::warn!("{id}: {w}");
            }
            let entry = LocalizeEntry {
                case_id: id.clone(),
                label: e.label,
                prior: format!("{id}_prior.vbv"),
                coarse_mask: format!("{id}_coarse.vbm"),
                refined_mask: format!("{id}_refined.vbm"),
                fallback: loc.fallback,
                failed_slices: loc.failed_slices.clone(),
                n_boxes: loc.n_boxes,
                coarse_recall: loc.coarse_mask.recall_against(&gt),
                refined_recall: loc.refined.recall_against(&gt),
                refined_iou: loc.refined.iou(&gt),
                warnings: loc.warnings.clone(),
            };
            loc.coarse.to_volume().save(dir.join(&entry.prior))?;
            loc.coarse_mask.save(dir.join(&entry.coarse_mask))?;
            loc.refined.save(dir.join(&entry.refined_mask))?;
            Ok(entry)
        })
        .collect::<anyhow::Result<_>>()?;
    write_json(&run.layout.localize_index(), &entries)?;
    write_produced(&dir)?;
    Ok(entries)
}

/// Registered volumes with brain, coarse, refined and ground-truth masks.
pub fn load_cases(run: &Run) -> anyhow::Result<Vec<LoadedCase>> {
    let pre_path = run.layout.preprocess_index();
    let loc_path = run.layout.localize_index();
    require(&pre_path, "vbiopsy preprocess")?;
    require(&loc_path, "vbiopsy localize")?;
    let pre: Vec<PreprocessEntry> = read_json(&pre_path)?;
    let loc: Vec<LocalizeEntry> = read_json(&loc_path)?;
    if pre.len() != loc.len() || pre.iter().zip(&loc).any(|(p, l)| p.case_id != l.case_id) {
        bail!("localize outputs are stale; rerun `vbiopsy localize`");
    }
    let pdir = run.layout.stage("preprocess");
    let ldir = run.layout.stage("localize");
    pre.par_iter()
        .zip(loc.par_iter())
        .map(|(p, l)| {
            Ok(LoadedCase {
                case: EvalCase {
                    id: p.case_id.clone(),
                    label: p.label,
                    volume: Volume::load(pdir.join(&p.volume))?,
                    brain: Mask::load(pdir.join(&p.brain_mask))?,
                    coarse: Mask::load(ldir.join(&l.coarse_mask))?,
                    refined: Mask::load(ldir.join(&l.refined_mask))?,
                },
                gt: Mask::load(pdir.join(&p.gt_mask))?,
            })
        })
        .collect()
}

fn eval_cases(loaded: &[LoadedCase]) -> Vec<EvalCase> {
    loaded.iter().map(|c| c.case.clone()).collect()
}

/// Mask the configured head attends to: the brain for the double-GAP head,
/// the refined tumor mask otherwise.
pub fn mask_source(head: HeadMode) -> MaskSource {
    match head {
        HeadMode::DoubleGap => MaskSource::Brain,
        HeadMode::MaskedPool | HeadMode::Mca => MaskSource::Refined,
    }
}

pub fn make_folds(run: &Run, cases: &[EvalCase]) -> anyhow::Result<FoldAssignment> {
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    Ok(stratified_kfold(&labels, run.cfg.eval.k_folds, run.cfg.eval.seed)?)
}

fn write_fold(run: &Run, report: &FoldReport, model: Option<&Diagnoser>) -> anyhow::Result<()> {
    let dir = run.layout.fold_dir(report.fold);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    if let Some(m) = model {
        m.to_checkpoint().save(run.layout.checkpoint(report.fold))?;
    }
    let mut jsonl = String::new();
    for e in &report.log {
        jsonl.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
        jsonl.push('\n');
    }
    write_text(&dir.join("log.jsonl"), &jsonl)?;
    write_json(&dir.join("fold.json"), report)
}

pub fn train(run: &Run) -> anyhow::Result<FoldAssignment> {
    let loaded = load_cases(run)?;
    let cases = eval_cases(&loaded);
    let folds = make_folds(run, &cases)?;
    let dir = run.layout.fresh_stage("train", &run.cfg)?;
    write_json(
        &run.layout.folds(),
        &FoldsFile {
            case_ids: cases.iter().map(|c| c.id.clone()).collect(),
            assignment: folds.clone(),
        },
    )?;
    let source = mask_source(run.cfg.diagnoser.head);
    match run_cv(
        &cases,
        &folds,
        source,
        &run.cfg.diagnoser,
        &run.cfg.augment,
        &run.cfg.eval,
    ) {
        Ok(cv) => {
            for f in &cv.folds {
                write_fold(run, &f.report, Some(&f.model))?;
            }
        }
        Err(fail) => {
            for r in &fail.completed {
                write_fold(run, r, None)?;
            }
            return Err(fail.into());
        }
    }
    write_produced(&dir)?;
    Ok(folds)
}

fn read_folds(run: &Run, cases: &[EvalCase]) -> anyhow::Result<FoldAssignment> {
    let path = run.layout.folds();
    require(&path, "vbiopsy train")?;
    let file: FoldsFile = read_json(&path)?;
    if file.case_ids.len() != cases.len() || file.case_ids.iter().zip(cases).any(|(a, c)| *a != c.id) {
        bail!(
            "{} does not match the localized cohort; rerun `vbiopsy train`",
            path.display()
        );
    }
    file.assignment.validate(cases.len())?;
    Ok(file.assignment)
}

fn load_fold_model(run: &Run, fold: usize) -> anyhow::Result<Diagnoser> {
    let path = run.layout.checkpoint(fold);
    require(&path, "vbiopsy train")?;
    let (cfg, _) = fold_configs(&run.cfg.diagnoser, &run.cfg.augment, fold);
    let ck = Checkpoint::load(&path)?;
    Diagnoser::from_checkpoint(&ck, Some(&cfg)).with_context(|| format!("loading {}", path.display()))
}

/// Reloads every fold checkpoint and scores it on its held-out cases.
pub fn evaluate(run: &Run) -> anyhow::Result<EvalReport> {
    let loaded = load_cases(run)?;
    let cases = eval_cases(&loaded);
    let folds = read_folds(run, &cases)?;
    let source = mask_source(run.cfg.diagnoser.head);
    let dir = run.layout.fresh_stage("evaluate", &run.cfg)?;
    let reports: Vec<MetricReport> = (0..folds.k)
        .into_par_iter()
        .map(|f| -> anyhow::Result<MetricReport> {
            let model = load_fold_model(run, f)?;
            let test = folds.test_indices(f);
            let mut preds = Vec::with_capacity(test.len());
            for &c in &test {
                let p = Prepared::new(&model.cfg, &cases[c].volume, cases[c].mask(source), cases[c].label)?;
                preds.push(argmax(&model.predict_batch(&[&p])?[0]));
            }
            let labels: Vec<usize> = test.iter().map(|&c| cases[c].label).collect();
            Ok(compute_metrics(
                &preds,
                &labels,
                model.cfg.k_classes,
                run.cfg.eval.averaging,
            )?)
        })
        .collect::<anyhow::Result<_>>()?;
    let report = EvalReport {
        head: run.cfg.diagnoser.head,
        mask: source,
        mean: average_reports(&reports)?,
        folds: reports,
    };
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&report))?;
    write_produced(&dir)?;
    Ok(report)
}

fn metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("fold,accuracy,precision,recall,f1\n");
    let line = |name: String, a: f64, p: f64, r: f64, f: f64| format!("{name},{a:.6},{p:.6},{r:.6},{f:.6}\n");
    for (i, m) in report.folds.iter().enumerate() {
        out.push_str(&line(i.to_string(), m.accuracy, m.precision, m.recall, m.f1));
    }
    let m = &report.mean;
    out.push_str(&line("mean".into(), m.accuracy, m.precision, m.recall, m.f1));
    out
}

/// The five ablation rows on the localized cohort, in memory.
pub fn ablation_table(run: &Run, loaded: &[LoadedCase]) -> anyhow::Result<(FoldAssignment, AblationTable)> {
    let cases = eval_cases(loaded);
    let folds = make_folds(run, &cases)?;
    let table = run_ablation(&cases, &folds, &run.cfg.diagnoser, &run.cfg.augment, &run.cfg.eval)?;
    Ok((folds, table))
}

pub fn ablate(run: &Run) -> anyhow::Result<AblationTable> {
    let loaded = load_cases(run)?;
    let dir = run.layout.fresh_stage("ablate", &run.cfg)?;
    let (_, table) = ablation_table(run, &loaded)?;
    let entries: Vec<AblationEntry> = table
        .rows
        .iter()
        .map(|(row, cv)| AblationEntry {
            row: *row,
            mean: cv.mean.clone(),
            folds: cv.folds.iter().map(|f| f.report.metrics.clone()).collect(),
        })
        .collect();
    write_text(&dir.join("ablation.csv"), &table.to_csv())?;
    write_json(&dir.join("ablation.json"), &entries)?;
    write_produced(&dir)?;
    Ok(table)
}

/// Grad-CAM of the first `saliency_cases` correctly classified test cases of
/// every fold, for the predicted class.
pub fn saliency(run: &Run) -> anyhow::Result<Vec<SaliencySample>> {
    let loaded = load_cases(run)?;
    let cases = eval_cases(&loaded);
    let folds = read_folds(run, &cases)?;
    let source = mask_source(run.cfg.diagnoser.head);
    let dir = run.layout.fresh_stage("saliency", &run.cfg)?;
    let pgm_dir = dir.join("pgm");
    let per_fold: Vec<Vec<SaliencySample>> = (0..folds.k)
        .into_par_iter()
        .map(|f| -> anyhow::Result<Vec<SaliencySample>> {
            let model = load_fold_model(run, f)?;
            let mut out = Vec::new();
            for c in folds.test_indices(f) {
                if out.len() == run.cfg.eval.saliency_cases {
                    break;
                }
                let case = &loaded[c];
                let mask = case.case.mask(source);
                let (_, pred) = model.predict_case(&case.case.volume, mask)?;
                if pred != case.case.label {
                    continue;
                }
                let map = grad_cam3d(&model, &case.case.volume, mask, pred)?;
                let id = &case.case.id;
                let heatmap = format!("{id}_cam.vbv");
                map.to_volume().save(dir.join(&heatmap))?;
                let slices = write_pgm_slices(&map, &pgm_dir, &format!("{id}_cam"))?;
                out.push(SaliencySample {
                    fold: f,
                    case_id: id.clone(),
                    label: case.case.label,
                    heatmap,
                    pgm_slices: slices.len(),
                    tumor_mass_fraction: mass_fraction(&map, &case.gt),
                    tumor_volume_fraction: case.gt.count() as f64 / case.gt.bits().len() as f64,
                });
            }
            Ok(out)
        })
        .collect::<anyhow::Result<_>>()?;
    let samples: Vec<SaliencySample> = per_fold.into_iter().flatten().collect();
    write_json(&dir.join("saliency.json"), &samples)?;
    write_produced(&dir)?;
    Ok(samples)
}

/// Every stage in order.
pub fn pipeline(run: &Run) -> anyhow::Result<()> {
    phantom_gen(run)?;
    preprocess(run)?;
    localize(run)?;
    train(run)?;
    let report = evaluate(run)?;
    log::info!(
        "cross-validated accuracy {:.4}, macro F1 {:.4}",
        report.mean.accuracy,
        report.mean.f1
    );
    ablate(run)?;
    saliency(run)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class: usize,
}

/// Classifies one registered volume. Without a mask the whole volume is attended.
pub fn predict(checkpoint: &Path, volume: &Path, mask: Option<&PathBuf>) -> anyhow::Result<Prediction> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = Diagnoser::from_checkpoint(&ck, None)?;
    let v = Volume::load(volume)?;
    let m = match mask {
        Some(p) => Mask::load(p)?,
        None => Mask::new(v.dims(), vec![true; v.voxels().len()])?,
    };
    let (probabilities, class) = model.predict_case(&v, &m)?;
    Ok(Prediction { probabilities, class })
}
