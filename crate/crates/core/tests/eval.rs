use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vb_core::diagnoser::*;
use vb_core::eval::*;
use vb_core::volume::unflatten;
use vb_core::{Mask, Volume};
use vb_tensor::{Graph, Tensor};

#[test]
fn balanced_cohort_gives_one_case_per_class_per_fold() {
    let labels: Vec<usize> = (0..20).map(|c| c % 4).collect();
    let fa = stratified_kfold(&labels, 5, 3).unwrap();
    fa.validate(20).unwrap();
    for f in 0..5 {
        let test = fa.test_indices(f);
        let mut classes: Vec<usize> = test.iter().map(|&c| labels[c]).collect();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2, 3]);
    }
    assert_eq!(fa, stratified_kfold(&labels, 5, 3).unwrap());
    assert_ne!(fa, stratified_kfold(&labels, 5, 4).unwrap());
}

#[test]
fn too_small_class_is_rejected() {
    let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1];
    assert!(stratified_kfold(&labels, 5, 0).is_err());
    assert!(stratified_kfold(&labels, 4, 0).is_ok());
}

proptest! {
    #[test]
    fn folds_partition_and_stay_stratified(
        counts in prop::collection::vec(5usize..30, 2..6),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
        let fa = stratified_kfold(&labels, k, seed).unwrap();
        let mut seen = HashSet::new();
        for f in 0..k {
            let test = fa.test_indices(f);
            let train = fa.train_indices(f);
            prop_assert_eq!(test.len() + train.len(), labels.len());
            prop_assert!(test.iter().all(|c| !train.contains(c)));
            for &c in &test {
                prop_assert!(seen.insert(c));
            }
        }
        prop_assert_eq!(seen.len(), labels.len());
        for class in 0..counts.len() {
            let per_fold: Vec<usize> = (0..k)
                .map(|f| fa.test_indices(f).iter().filter(|&&c| labels[c] == class).count())
                .collect();
            let spread = per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap();
            prop_assert!(spread <= 1, "class {} counts {:?}", class, per_fold);
        }
    }

    #[test]
    fn macro_f1_is_invariant_under_relabeling(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = compute_metrics(&preds, &labels, 4, Averaging::Macro).unwrap();
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let b = compute_metrics(&pp, &pl, 4, Averaging::Macro).unwrap();
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        let total: usize = a.confusion.iter().flatten().sum();
        prop_assert_eq!(total, pairs.len());
    }
}

#[test]
fn perfect_predictions_score_one() {
    let labels = [0, 1, 2, 3, 2, 1];
    let r = compute_metrics(&labels, &labels, 4, Averaging::Macro).unwrap();
    assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
    for (i, row) in r.confusion.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v == 0, i != j || labels.iter().all(|&l| l != i));
        }
    }
}

#[test]
fn two_class_fixture_matches_hand_computation() {
    // confusion [[3, 1], [2, 4]]
    let labels = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    let preds = [0, 0, 0, 1, 0, 0, 1, 1, 1, 1];
    let r = compute_metrics(&preds, &labels, 2, Averaging::Macro).unwrap();
    assert_eq!(r.confusion, vec![vec![3, 1], vec![2, 4]]);
    assert_eq!(r.per_class_precision, vec![3.0 / 5.0, 4.0 / 5.0]);
    assert_eq!(r.per_class_recall, vec![3.0 / 4.0, 4.0 / 6.0]);
    let f1_0 = 2.0 / (5.0 / 3.0 + 4.0 / 3.0);
    let f1_1 = 2.0 / (5.0 / 4.0 + 6.0 / 4.0);
    assert!((r.per_class_f1[0] - f1_0).abs() < 1e-15);
    assert!((r.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.per_class_f1[1] - f1_1).abs() < 1e-15);
    assert_eq!(r.accuracy, 0.7);
    assert!((r.precision - 0.7).abs() < 1e-15);
    assert!((r.recall - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
    assert!((r.f1 - (f1_0 + f1_1) / 2.0).abs() < 1e-15);

    let micro = compute_metrics(&preds, &labels, 2, Averaging::Micro).unwrap();
    assert_eq!((micro.precision, micro.recall, micro.f1), (0.7, 0.7, 0.7));
    let weighted = compute_metrics(&preds, &labels, 2, Averaging::Weighted).unwrap();
    assert!((weighted.recall - 0.7).abs() < 1e-15);
    assert!((weighted.precision - (0.4 * 0.6 + 0.6 * 0.8)).abs() < 1e-15);
}

#[test]
fn single_class_predictions_on_balanced_labels() {
    let labels: Vec<usize> = (0..12).map(|c| c % 4).collect();
    let preds = vec![2; 12];
    let r = compute_metrics(&preds, &labels, 4, Averaging::Macro).unwrap();
    assert_eq!(r.accuracy, 0.25);
    assert_eq!(r.per_class_precision, vec![0.0, 0.0, 0.25, 0.0]);
    assert_eq!(r.per_class_recall, vec![0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn metric_input_errors() {
    assert!(compute_metrics(&[0, 1], &[0], 2, Averaging::Macro).is_err());
    assert!(compute_metrics(&[0, 2], &[0, 1], 2, Averaging::Macro).is_err());
    assert!(compute_metrics(&[], &[], 2, Averaging::Macro).is_err());
}

fn report_with_accuracy(acc: f64) -> MetricReport {
    MetricReport {
        n: 10,
        accuracy: acc,
        precision: acc,
        recall: acc,
        f1: acc,
        averaging: Averaging::Macro,
        per_class_precision: vec![],
        per_class_recall: vec![],
        per_class_f1: vec![],
        confusion: vec![vec![1, 0], vec![0, 1]],
    }
}

#[test]
fn fold_averaging_is_the_plain_mean() {
    let reports: Vec<_> = [1.0, 0.8, 0.9, 1.0, 0.8].map(report_with_accuracy).to_vec();
    let s = average_reports(&reports).unwrap();
    assert!((s.accuracy - 0.9).abs() < 1e-12);
    assert!((s.f1 - 0.9).abs() < 1e-12);
    assert_eq!(s.confusion, vec![vec![5, 0], vec![0, 5]]);
    assert!(average_reports(&[]).is_err());
}

/// Noise volumes with a class-dependent bright cube inside the mask.
fn toy_cohort(n: usize) -> Vec<EvalCase> {
    let dims = [16, 16, 16];
    (0..n)
        .map(|k| {
            let label = k % 4;
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let inside = |d: usize, i: usize, j: usize| [d, i, j].iter().all(|&c| (4..10).contains(&c));
            let volume = Volume::from_fn(dims, |d, i, j| {
                let base = rng.random_range(0.0..0.2f32);
                if inside(d, i, j) {
                    base + 0.3 * label as f32
                } else {
                    base
                }
            });
            let cube = Mask::new(
                dims,
                (0..4096)
                    .map(|x| {
                        let (d, i, j) = unflatten(dims, x);
                        inside(d, i, j)
                    })
                    .collect(),
            )
            .unwrap();
            EvalCase {
                id: format!("toy_{k:03}"),
                label,
                volume,
                brain: Mask::new(dims, vec![true; 4096]).unwrap(),
                coarse: cube.clone(),
                refined: cube,
            }
        })
        .collect()
}

fn quick_cfg() -> DiagnoserConfig {
    DiagnoserConfig {
        epochs: 2,
        lr: 3e-3,
        ..DiagnoserConfig::default()
    }
}

#[test]
fn cross_validation_never_leaks_and_is_deterministic() {
    let cases = toy_cohort(20);
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    let folds = stratified_kfold(&labels, 5, 1).unwrap();
    let eval = EvalConfig::default();
    let aug = AugmentConfig::default();
    let a = run_cv(&cases, &folds, MaskSource::Refined, &quick_cfg(), &aug, &eval).unwrap();
    assert_eq!(a.folds.len(), 5);
    for f in a.fold_reports() {
        let train: HashSet<_> = f.train_ids.iter().collect();
        assert!(f.test_ids.iter().all(|id| !train.contains(id)));
        assert_eq!(f.train_ids.len() + f.test_ids.len(), 20);
        assert_eq!(f.metrics.n, 4);
    }
    let mean = a.fold_reports().iter().map(|f| f.metrics.accuracy).sum::<f64>() / 5.0;
    assert!((a.mean.accuracy - mean).abs() < 1e-15);

    let b = run_cv(&cases, &folds, MaskSource::Refined, &quick_cfg(), &aug, &eval).unwrap();
    assert_eq!(a.fold_reports(), b.fold_reports());
    for (x, y) in a.folds.iter().zip(&b.folds) {
        assert_eq!(x.model, y.model);
    }
}

#[test]
fn failing_fold_keeps_the_completed_reports() {
    let mut cases = toy_cohort(8);
    // a case with its own grid cannot share a training batch with the rest
    let odd = [16, 16, 32];
    cases[0].volume = Volume::filled(odd, 0.5);
    cases[0].refined = Mask::new(odd, vec![true; 16 * 16 * 32]).unwrap();
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    let folds = stratified_kfold(&labels, 2, 0).unwrap();
    let test_fold = folds.folds[0];
    let err = run_cv(
        &cases,
        &folds,
        MaskSource::Refined,
        &quick_cfg(),
        &AugmentConfig::disabled(),
        &EvalConfig::default(),
    )
    .unwrap_err();
    assert_eq!(err.fold, Some(1 - test_fold));
    assert_eq!(err.completed.len(), 1);
    assert_eq!(err.completed[0].fold, test_fold);
    assert!(err.source.to_string().contains("mixed volume dims"), "{}", err.source);
}

#[test]
fn ablation_produces_five_rows_with_the_table_columns() {
    let cases = toy_cohort(12);
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    let folds = stratified_kfold(&labels, 3, 2).unwrap();
    let cfg = DiagnoserConfig {
        epochs: 1,
        ..quick_cfg()
    };
    let eval = EvalConfig {
        k_folds: 3,
        ..EvalConfig::default()
    };
    let table = run_ablation(&cases, &folds, &cfg, &AugmentConfig::disabled(), &eval).unwrap();
    assert_eq!(table.rows.len(), 5);
    let heads: Vec<HeadMode> = table.rows.iter().map(|(r, _)| r.head).collect();
    assert_eq!(
        heads,
        vec![
            HeadMode::DoubleGap,
            HeadMode::MaskedPool,
            HeadMode::Mca,
            HeadMode::MaskedPool,
            HeadMode::Mca
        ]
    );
    let csv = table.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "Row,Configuration,Precision,Recall,F1-score,Accuracy"
    );
    assert_eq!(lines.count(), 5);
    assert!(table.row(5).is_some() && table.row(6).is_none());
}

fn trained_toy_model(head: HeadMode) -> (Diagnoser, Vec<EvalCase>) {
    let cases = toy_cohort(8);
    let train_cases: Vec<TrainCase> = cases
        .iter()
        .map(|c| TrainCase {
            volume: c.volume.clone(),
            mask: c.refined.clone(),
            label: c.label,
        })
        .collect();
    let cfg = DiagnoserConfig {
        head,
        epochs: 3,
        ..quick_cfg()
    };
    (train(&train_cases, &cfg, &AugmentConfig::disabled()).unwrap().0, cases)
}

#[test]
fn heatmap_is_normalized_at_volume_resolution() {
    let (model, cases) = trained_toy_model(HeadMode::Mca);
    for c in &cases[..3] {
        let map = grad_cam3d(&model, &c.volume, &c.refined, c.label).unwrap();
        assert_eq!(map.dims(), c.volume.dims());
        assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(map.max(), 1.0);
    }
    assert!(grad_cam3d(&model, &cases[0].volume, &cases[0].refined, 4).is_err());
}

#[test]
fn zero_weights_give_an_all_zero_heatmap() {
    let (mut model, cases) = trained_toy_model(HeadMode::Mca);
    model
        .params
        .tensors_mut()
        .iter_mut()
        .for_each(|t| t.data_mut().fill(0.0));
    let map = grad_cam3d(&model, &cases[1].volume, &cases[1].refined, 2).unwrap();
    assert!(map.values().iter().all(|&v| v == 0.0));
    assert_eq!(mass_fraction(&map, &cases[1].refined), None);
}

#[test]
fn channel_weights_match_the_closed_form_for_the_double_gap_head() {
    let (model, cases) = trained_toy_model(HeadMode::DoubleGap);
    let c = &cases[2];
    let target = 1;
    let (_, weights) = grad_cam_raw(&model, &c.volume, &c.refined, target).unwrap();
    // logit_t = Σ_c (W[t][c] + W[t][C + c]) · mean(F_c) + b_t
    let w = model.params.get("head.weight").unwrap();
    let ch = w.shape()[1] / 2;
    let spatial = 4.0 * 4.0 * 4.0;
    for k in 0..ch {
        let expected = (w.at(&[target, k]) + w.at(&[target, ch + k])) / spatial;
        assert!(
            (weights[k] - expected).abs() < 1e-14,
            "{k}: {} vs {expected}",
            weights[k]
        );
    }
}

fn target_logit(model: &Diagnoser, f: &Tensor, m: &Tensor, target: usize) -> f64 {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let (fv, mv) = (g.constant(f.clone()), g.constant(m.clone()));
    let out = head_forward(&mut g, fv, mv, &vars, &model.cfg).unwrap();
    g.value(out.logits).data()[target]
}

#[test]
fn channel_weights_match_finite_differences_of_the_logit() {
    let (model, cases) = trained_toy_model(HeadMode::Mca);
    let c = &cases[3];
    let target = 3;
    let (_, weights) = grad_cam_raw(&model, &c.volume, &c.refined, target).unwrap();

    let p = Prepared::new(&model.cfg, &c.volume, &c.refined, 0).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let x = g.constant(Tensor::new(vec![1, 1, 16, 16, 16], p.x.clone()).unwrap());
    let f = backbone_forward(&mut g, x, &vars).unwrap();
    let feats = g.value(f).clone();
    let m = Tensor::new(vec![1, 4, 4, 4], p.m.clone()).unwrap();

    // shifting channel k uniformly by h moves the logit by h · Σ grad = h · S · weight
    let h = 1e-6;
    let spatial = 64;
    for (k, &wk) in weights.iter().enumerate() {
        let shifted = |s: f64| {
            let mut t = feats.clone();
            t.data_mut()[k * spatial..(k + 1) * spatial]
                .iter_mut()
                .for_each(|v| *v += s);
            target_logit(&model, &t, &m, target)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h) / spatial as f64;
        assert!(
            (numeric - wk).abs() < 1e-7 * wk.abs().max(1e-3),
            "{k}: {numeric} vs {wk}"
        );
    }
}

#[test]
fn heatmap_ignores_a_shared_logit_offset() {
    let (mut model, cases) = trained_toy_model(HeadMode::Mca);
    let c = &cases[4];
    let a = grad_cam3d(&model, &c.volume, &c.refined, c.label).unwrap();
    let k = model.params.index_of("head.bias").unwrap();
    model.params.tensors_mut()[k]
        .data_mut()
        .iter_mut()
        .for_each(|b| *b += 7.5);
    let b = grad_cam3d(&model, &c.volume, &c.refined, c.label).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mass_fraction_and_pgm_export() {
    let dims = [4, 6, 8];
    let map = vb_core::PriorMap::new(dims, (0..192).map(|k| if k < 48 { 1.0 } else { 0.25 }).collect()).unwrap();
    let first_slice = Mask::new(dims, (0..192).map(|k| k < 48).collect()).unwrap();
    let frac = mass_fraction(&map, &first_slice).unwrap();
    assert!((frac - 48.0 / (48.0 + 0.25 * 144.0)).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let paths = write_pgm_slices(&map, dir.path(), "cam").unwrap();
    assert_eq!(paths.len(), 4);
    let bytes = std::fs::read(&paths[1]).unwrap();
    // binary graymap: magic, width, height, maxval, then one byte per pixel
    let body = &bytes[bytes.len() - 48..];
    let header = String::from_utf8(bytes[..bytes.len() - 48].to_vec()).unwrap();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["P5", "8", "6", "255"]);
    assert!(body.iter().all(|&b| b == 64));
}
