use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use vb_core::phantom::*;
use vb_core::volume::{Mask, Volume};

fn small_cfg(n_cases: usize) -> PhantomConfig {
    PhantomConfig {
        n_cases,
        dims: [24, 24, 24],
        tumor_radius_range: (4.0, 5.5),
        seed: 11,
        ..PhantomConfig::default()
    }
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "volumes", "masks"] {
        let dir = root.join(sub);
        let mut entries: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            let rel = p.strip_prefix(root).unwrap().display().to_string();
            out.push((rel, fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn same_seed_gives_byte_identical_cohort() {
    let cfg = small_cfg(6);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_cohort(&cfg, a.path()).unwrap();
    generate_cohort(&cfg, b.path()).unwrap();
    let ta = read_tree(a.path());
    assert_eq!(ta.len(), 1 + 2 * 6);
    assert_eq!(ta, read_tree(b.path()));

    let other = PhantomConfig { seed: 12, ..cfg };
    let c = tempfile::tempdir().unwrap();
    generate_cohort(&other, c.path()).unwrap();
    assert_ne!(ta, read_tree(c.path()));
}

#[test]
fn classes_are_balanced() {
    let m = generate_cohort(&small_cfg(8), tempfile::tempdir().unwrap().path()).unwrap();
    for k in 0..4 {
        assert_eq!(m.cases.iter().filter(|c| c.class_label == k).count(), 2);
    }
    let m = generate_cohort(&small_cfg(10), tempfile::tempdir().unwrap().path()).unwrap();
    let counts: Vec<usize> = (0..4)
        .map(|k| m.cases.iter().filter(|c| c.class_label == k).count())
        .collect();
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
}

#[test]
fn tumor_voxel_count_matches_sphere_volume() {
    for case in generate_in_memory(&small_cfg(24)).unwrap() {
        let r = case.geometry.tumor_radius;
        let analytic = 4.0 / 3.0 * PI * r.powi(3);
        // brute-force count of emitted mask bits
        let bits = case.gt_mask.bits().iter().filter(|&&b| b).count() as f64;
        let rel = (bits - analytic).abs() / analytic;
        assert!(rel <= 0.10, "{}: r={r:.3}, {bits} bits vs {analytic:.1}", case.case_id);
    }
}

#[test]
fn tumor_inside_brain_and_background_near_zero() {
    let cfg = small_cfg(8);
    for case in generate_in_memory(&cfg).unwrap() {
        assert!(case.gt_mask.is_subset_of(&case.brain_mask));
        let bg: Vec<f64> = case
            .volume
            .voxels()
            .iter()
            .zip(case.brain_mask.bits())
            .filter(|(_, &b)| !b)
            .map(|(&v, _)| v as f64)
            .collect();
        let mean = bg.iter().sum::<f64>() / bg.len() as f64;
        let standard_error = cfg.noise_std / (bg.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * standard_error, "background mean {mean}");
    }
}

#[test]
fn manifest_roundtrips_and_paths_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_cohort(&small_cfg(4), dir.path()).unwrap();
    let loaded = Manifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(m, loaded);
    assert_eq!(loaded.k_classes, 4);
    assert_eq!(loaded.generator_config_echo["seed"], 11);
    for c in &loaded.cases {
        let v = Volume::load(dir.path().join(&c.volume_path)).unwrap();
        let g = Mask::load(dir.path().join(&c.gt_mask_path)).unwrap();
        assert_eq!(v.dims(), [24, 24, 24]);
        assert!(!g.is_empty());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(PhantomConfig {
        n_cases: 3,
        ..small_cfg(3)
    }
    .validate()
    .is_err());
    assert!(PhantomConfig {
        tumor_radius_range: (9.0, 11.0),
        ..small_cfg(4)
    }
    .validate()
    .is_err());
    let mut cfg = small_cfg(4);
    cfg.class_signatures[1].intensity_std = -0.1;
    assert!(cfg.validate().is_err());
    let cfg = small_cfg(4);
    let file = tempfile::NamedTempFile::new().unwrap();
    assert!(generate_cohort(&cfg, file.path()).is_err());
}

#[test]
fn separability_report_orders_means_like_signatures() {
    let mut cfg = small_cfg(8);
    for (k, mean) in [0.4, 0.6, 0.8, 1.0].into_iter().enumerate() {
        cfg.class_signatures[k] = ClassSignature::new(mean, 0.02, 0.0, 0.0, 0.02);
    }
    let dir = tempfile::tempdir().unwrap();
    let m = generate_cohort(&cfg, dir.path()).unwrap();
    let report = class_separability_report(&m, dir.path()).unwrap();
    assert_eq!(report.len(), 4);
    for w in report.windows(2) {
        assert!(w[0].mean_intensity < w[1].mean_intensity, "{report:?}");
    }
}

#[test]
fn separability_report_of_single_case_is_that_case() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = generate_cohort(&small_cfg(4), dir.path()).unwrap();
    m.cases.truncate(1);
    let report = class_separability_report(&m, dir.path()).unwrap();
    assert_eq!(report.len(), 1);
    let v = Volume::load(dir.path().join(&m.cases[0].volume_path)).unwrap();
    let g = Mask::load(dir.path().join(&m.cases[0].gt_mask_path)).unwrap();
    let vals: Vec<f64> = (0..v.len())
        .filter(|&i| g.bits()[i])
        .map(|i| v.voxels()[i] as f64)
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert_eq!(report[0].n_cases, 1);
    assert_eq!(report[0].n_voxels, vals.len());
    assert!((report[0].mean_intensity - mean).abs() < 1e-12);
}

#[test]
fn identical_signatures_give_indistinguishable_means() {
    let mut cfg = small_cfg(16);
    cfg.class_signatures[1] = cfg.class_signatures[0].clone();
    let dir = tempfile::tempdir().unwrap();
    let m = generate_cohort(&cfg, dir.path()).unwrap();
    let report = class_separability_report(&m, dir.path()).unwrap();

    // recompute by a direct voxel scan
    let mut sums = [(0.0f64, 0usize); 2];
    for c in m.cases.iter().filter(|c| c.class_label < 2) {
        let v = Volume::load(dir.path().join(&c.volume_path)).unwrap();
        let g = Mask::load(dir.path().join(&c.gt_mask_path)).unwrap();
        for (x, &b) in v.voxels().iter().zip(g.bits()) {
            if b {
                sums[c.class_label].0 += *x as f64;
                sums[c.class_label].1 += 1;
            }
        }
    }
    let direct = sums.map(|(s, n)| s / n as f64);
    assert!((direct[0] - report[0].mean_intensity).abs() < 1e-9);
    assert!((direct[1] - report[1].mean_intensity).abs() < 1e-9);
    assert!((direct[0] - direct[1]).abs() < cfg.noise_std);
}

#[test]
fn mimics_stay_out_of_the_tumor_mask() {
    let cfg = PhantomConfig {
        mimic_count: 1,
        dims: [32, 32, 32],
        tumor_radius_range: (2.5, 3.0),
        ..small_cfg(8)
    };
    for case in generate_in_memory(&cfg).unwrap() {
        let (c, r, class) = case.geometry.mimics[0];
        assert!(class < 4);
        let t = case.geometry.tumor_centre;
        let gap = (0..3).map(|k| (c[k] - t[k]).powi(2)).sum::<f64>().sqrt();
        assert!(gap >= r + case.geometry.tumor_radius + 2.0);
        // the mimic centre voxel is bright tissue outside the truth mask
        let p = c.map(|x| x.round() as usize);
        assert!(!case.gt_mask.get(p[0], p[1], p[2]));
        assert!(case.brain_mask.get(p[0], p[1], p[2]));
    }
}

#[test]
fn offset_corruption_shifts_the_whole_head() {
    let clean = small_cfg(4);
    let shifted = PhantomConfig {
        corruption: Corruption {
            max_offset: 2,
            ..Corruption::default()
        },
        ..clean.clone()
    };
    let mut moved = 0;
    for case in generate_in_memory(&shifted).unwrap() {
        let centroid = case.brain_mask.centroid().unwrap();
        for k in 0..3 {
            let expected = (23.0 / 2.0) + case.geometry.offset[k] as f64;
            assert!((centroid[k] - expected).abs() < 0.5);
        }
        moved += case.geometry.offset.iter().filter(|&&o| o != 0).count();
    }
    assert!(moved > 0);
}
