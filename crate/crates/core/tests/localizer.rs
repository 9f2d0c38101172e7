use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vb_core::localizer::*;
use vb_core::oracle::{BoxPrediction, BoxPredictor, SlicePrediction, SliceQuery, StubNoiseConfig, StubOracle};
use vb_core::phantom::{generate_in_memory, PhantomConfig};
use vb_core::preprocess::{preprocess_pipeline, PreprocessConfig};
use vb_core::volume::{flat_index, unflatten, voxel_count, Mask, PriorMap, Volume};
use vb_core::Error;
use vb_tensor::{GradCheck, Graph, Tensor};

fn bx(slice_index: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> BoxPrediction {
    BoxPrediction {
        slice_index,
        x0,
        y0,
        x1,
        y1,
        confidence: 1.0,
    }
}

#[test]
fn stacking_follows_box_membership() {
    let empty = stack_boxes(&[], [2, 4, 4]).unwrap();
    assert!(empty.voxels().iter().all(|&v| v == 0.0));

    let occ = stack_boxes(&[bx(0, 1.0, 1.0, 3.0, 3.0)], [2, 4, 4]).unwrap();
    let mut ones = 0;
    for d in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let inside = d == 0 && (1..3).contains(&i) && (1..3).contains(&j);
                assert_eq!(occ.get(d, i, j), if inside { 1.0 } else { 0.0 });
                ones += usize::from(inside);
            }
        }
    }
    assert_eq!(ones, 4);

    let twice = stack_boxes(&[bx(0, 1.0, 1.0, 3.0, 3.0), bx(0, 0.0, 0.0, 2.0, 2.0)], [2, 4, 4]).unwrap();
    assert!(twice.voxels().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(twice.voxels().iter().sum::<f32>(), 7.0);

    assert!(stack_boxes(&[bx(2, 0.0, 0.0, 1.0, 1.0)], [2, 4, 4]).is_err());
}

#[test]
fn empty_occupancy_gives_empty_prior() {
    let prior = smooth_and_dilate(&Volume::zeros([8, 8, 8]), &PriorConfig::default());
    assert!(prior.values().iter().all(|&v| v == 0.0));
}

/// Direct triple-sum convolution with the outer-product kernel.
fn dense_gaussian(dims: [usize; 3], src: &[f64], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let (d, i, j) = unflatten(dims, idx);
        for a in -r..=r {
            for b in -r..=r {
                for c in -r..=r {
                    let (p, q, s) = (d as i64 + a, i as i64 + b, j as i64 + c);
                    if p < 0 || q < 0 || s < 0 || p >= dims[0] as i64 || q >= dims[1] as i64 || s >= dims[2] as i64 {
                        continue;
                    }
                    let w = k[(a + r) as usize] * k[(b + r) as usize] * k[(c + r) as usize];
                    *o += w * src[flat_index(dims, p as usize, q as usize, s as usize)];
                }
            }
        }
    }
    out
}

#[test]
fn separable_gaussian_matches_dense_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (dims, sigma) in [([16, 16, 16], 2.0), ([5, 9, 7], 1.3), ([12, 3, 10], 0.7)] {
        let src: Vec<f64> = (0..voxel_count(dims)).map(|_| rng.random::<f64>()).collect();
        let fast = gaussian_smooth(dims, &src, sigma);
        let slow = dense_gaussian(dims, &src, sigma);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "{dims:?}: {err}");
    }
}

#[test]
fn impulse_without_dilation_is_the_normalized_kernel() {
    let dims = [15, 15, 15];
    let mut occ = vec![0.0f32; voxel_count(dims)];
    occ[flat_index(dims, 7, 7, 7)] = 1.0;
    let cfg = PriorConfig {
        dilation_radius: 0,
        ..PriorConfig::default()
    };
    let prior = smooth_and_dilate(&Volume::new(dims, occ).unwrap(), &cfg);
    let mut impulse = vec![0.0; voxel_count(dims)];
    impulse[flat_index(dims, 7, 7, 7)] = 1.0;
    let dense = dense_gaussian(dims, &impulse, 2.0);
    let peak = dense.iter().copied().fold(0.0, f64::max);
    let err = prior
        .values()
        .iter()
        .zip(&dense)
        .map(|(&a, &b)| (f64::from(a) - b / peak).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-6, "{err}");
    assert_eq!(prior.get(7, 7, 7), 1.0);
}

#[test]
fn dilated_impulse_is_the_city_block_ball() {
    let dims = [9, 9, 9];
    for radius in [1usize, 2, 3] {
        let mut bits = vec![false; voxel_count(dims)];
        bits[flat_index(dims, 4, 4, 4)] = true;
        let out = dilate(dims, &bits, radius);
        for (idx, &b) in out.iter().enumerate() {
            let (d, i, j) = unflatten(dims, idx);
            let dist = d.abs_diff(4) + i.abs_diff(4) + j.abs_diff(4);
            assert_eq!(b, dist <= radius, "radius {radius} at {:?}", (d, i, j));
        }
        if radius == 1 {
            assert_eq!(out.iter().filter(|&&b| b).count(), 7);
        }
    }
}

#[test]
fn adding_boxes_never_lowers_the_raw_prior() {
    let dims = [8, 12, 12];
    let cfg = PriorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut boxes = Vec::new();
    let mut prev = smooth_and_dilate_raw(&stack_boxes(&boxes, dims).unwrap(), &cfg);
    for _ in 0..6 {
        let (x0, y0) = (rng.random_range(0..10) as f64, rng.random_range(0..10) as f64);
        boxes.push(bx(rng.random_range(0..8), x0, y0, x0 + 2.0, y0 + 2.0));
        let next = smooth_and_dilate_raw(&stack_boxes(&boxes, dims).unwrap(), &cfg);
        assert!(next.iter().zip(&prev).all(|(a, b)| a >= b));
        prev = next;
    }
}

#[test]
fn pseudo_label_counts_and_failure() {
    let cfg = PriorConfig {
        neg_sample_ratio: 2.0,
        ..PriorConfig::default()
    };
    let err = extract_pseudo_labels(&PriorMap::zeros([4, 4, 4]), &cfg).unwrap_err();
    assert!(matches!(err, Error::LocalizationFailed { .. }));

    let mut vals = vec![0.0f32; 64];
    for k in [3, 10, 20, 33, 60] {
        vals[k] = 0.9;
    }
    vals[5] = 0.7;
    vals[6] = 0.4;
    let prior = PriorMap::new([4, 4, 4], vals).unwrap();
    let labels = extract_pseudo_labels(&prior, &cfg).unwrap();
    assert_eq!(labels.positives, vec![3, 10, 20, 33, 60]);
    assert_eq!(labels.negatives.len(), 10);
    assert!(labels
        .negatives
        .iter()
        .all(|k| !labels.positives.contains(k) && *k != 5 && *k != 6));
    assert_eq!(labels, extract_pseudo_labels(&prior, &cfg).unwrap());
}

#[test]
fn pseudo_labels_are_disjoint_on_random_priors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = PriorConfig::default();
    for _ in 0..20 {
        let vals: Vec<f32> = (0..512).map(|_| rng.random::<f32>()).collect();
        let l = extract_pseudo_labels(&PriorMap::new([8, 8, 8], vals).unwrap(), &cfg).unwrap();
        assert!(l.negatives.iter().all(|k| l.positives.binary_search(k).is_err()));
    }
}

fn toy_separable() -> (Vec<VoxelFeature>, PseudoLabels) {
    let dims = [8, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // bright voxels in [0.8, 1.0], dim voxels in [0.1, 0.3], interleaved
    let v = Volume::from_fn(dims, |d, i, j| {
        if (d + i + j) % 3 == 0 {
            rng.random_range(0.8..1.0)
        } else {
            rng.random_range(0.1..0.3)
        }
    });
    let feats = voxel_features(&v);
    let positives = (0..512).filter(|&k| v.voxels()[k] > 0.5).collect();
    let negatives = (0..512).filter(|&k| v.voxels()[k] < 0.5).collect();
    (feats, PseudoLabels { positives, negatives })
}

#[test]
fn mlp_separates_disjoint_intensity_ranges() {
    let (feats, labels) = toy_separable();
    let model = train_refine_mlp(&feats, &labels, &PriorConfig::default()).unwrap();
    assert!(model.final_loss < model.initial_loss);
    let p = model.predict(&feats).unwrap();
    let correct = labels.positives.iter().filter(|&&k| p[k] > 0.5).count()
        + labels.negatives.iter().filter(|&&k| p[k] <= 0.5).count();
    let acc = correct as f64 / 512.0;
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn zero_epochs_leave_the_model_at_initialization() {
    let (feats, labels) = toy_separable();
    let cfg = PriorConfig {
        mlp_epochs: 0,
        ..PriorConfig::default()
    };
    let a = train_refine_mlp(&feats, &labels, &cfg).unwrap();
    assert_eq!(a.initial_loss, a.final_loss);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6c_70);
    assert_eq!(a.params, init_mlp(cfg.mlp_hidden, &mut rng));
}

#[test]
fn mlp_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = init_mlp(5, &mut rng);
    let x = Tensor::from_fn(&[12, FEATURE_DIM], |_| rng.random_range(-1.0..1.0));
    let targets: Vec<f64> = (0..12).map(|k| f64::from(u8::from(k % 3 == 0))).collect();
    let report = GradCheck::default()
        .run(&params, |g: &mut Graph, p| {
            let xv = g.constant(x.clone());
            mlp_loss(g, xv, p, &targets)
        })
        .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn refinement_is_a_superset_of_the_binarized_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = PriorConfig::default();
    let vals: Vec<f32> = (0..512).map(|_| rng.random::<f32>()).collect();
    let prior = PriorMap::new([8, 8, 8], vals).unwrap();
    let coarse = prior.binarize(cfg.tau_bin);
    assert_eq!(refine(&prior, &vec![0.0; 512], None, &cfg).unwrap(), coarse);
    let probs: Vec<f64> = (0..512).map(|_| rng.random()).collect();
    assert!(coarse.is_subset_of(&refine(&prior, &probs, None, &cfg).unwrap()));
}

#[test]
fn invalid_thresholds_are_rejected() {
    let base = PriorConfig::default();
    assert!(PriorConfig {
        tau_neg: 0.6,
        ..base.clone()
    }
    .validate()
    .is_err());
    assert!(PriorConfig {
        tau_bin: 0.8,
        ..base.clone()
    }
    .validate()
    .is_err());
    assert!(PriorConfig {
        gaussian_sigma: 0.0,
        ..base.clone()
    }
    .validate()
    .is_err());
    assert!(PriorConfig { tau_pos: 1.0, ..base }.validate().is_err());
}

struct Silent;

impl BoxPredictor for Silent {
    fn predict(&self, _: &SliceQuery<'_>) -> vb_core::Result<SlicePrediction> {
        Ok(SlicePrediction::default())
    }
}

struct Broken;

impl BoxPredictor for Broken {
    fn predict(&self, q: &SliceQuery<'_>) -> vb_core::Result<SlicePrediction> {
        Err(Error::Oracle {
            slice_index: q.slice_index,
            detail: "unreachable".into(),
        })
    }
}

/// Registered phantom volumes with their brain and tumor masks.
fn registered_cohort(n: usize, seed: u64) -> Vec<(Volume, Mask, Mask)> {
    let cfg = PhantomConfig {
        n_cases: n,
        seed,
        ..PhantomConfig::default()
    };
    let pcfg = PreprocessConfig {
        brain_threshold_quantile: 0.7325,
        ..PreprocessConfig::default()
    };
    generate_in_memory(&cfg)
        .unwrap()
        .into_iter()
        .map(|c| {
            let p = preprocess_pipeline(&c.volume, &pcfg).unwrap();
            let gt = p.register_mask(&c.gt_mask).unwrap();
            (p.volume, p.brain_mask, gt)
        })
        .collect()
}

#[test]
fn silent_or_failing_predictor_falls_back_to_the_brain_mask() {
    let (v, brain, _) = registered_cohort(4, 1).remove(0);
    let cfg = PriorConfig::default();
    let out = localize_case(&v, &brain, None, &Silent, &cfg).unwrap();
    assert!(out.fallback);
    assert_eq!(out.refined, brain);
    let out = localize_case(&v, &brain, None, &Broken, &cfg).unwrap();
    assert!(out.fallback);
    assert_eq!(out.failed_slices.len(), v.dims()[0]);
}

#[test]
fn zero_noise_stub_localizes_every_phantom() {
    let stub = StubOracle::new(StubNoiseConfig {
        jitter_std: 0.0,
        miss_prob: 0.0,
        false_pos_prob: 0.0,
        seed: 0,
    })
    .unwrap();
    let cfg = PriorConfig::default();
    for (k, (v, brain, gt)) in registered_cohort(8, 3).into_iter().enumerate() {
        let out = localize_case(&v, &brain, Some(&gt), &stub, &cfg).unwrap();
        assert!(!out.fallback);
        let iou = out.refined.iou(&gt);
        assert!(iou >= 0.5, "case {k}: IoU {iou}");
        let again = localize_case(&v, &brain, Some(&gt), &stub, &cfg).unwrap();
        assert_eq!(out, again);
    }
}

#[test]
fn refinement_never_lowers_recall_under_misses() {
    let cfg = PriorConfig::default();
    for (k, (v, brain, gt)) in registered_cohort(8, 5).into_iter().enumerate() {
        let stub = StubOracle::new(StubNoiseConfig {
            jitter_std: 1.0,
            miss_prob: 0.3,
            false_pos_prob: 0.0,
            seed: k as u64,
        })
        .unwrap();
        let out = localize_case(&v, &brain, Some(&gt), &stub, &cfg).unwrap();
        assert!(out.coarse_mask.is_subset_of(&out.refined));
        assert!(out.refined.recall_against(&gt) >= out.coarse_mask.recall_against(&gt));
    }
}
