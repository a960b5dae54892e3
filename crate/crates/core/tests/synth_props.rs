use std::collections::BTreeSet;
use std::path::Path;

use capl_core::dataset::SplitData;
use capl_core::pnm;
use capl_core::synth::{build_dataset, generate_scene, generate_split, scene_rng, CoocRule, Partition, SceneConfig};
use capl_core::{Error, LabelMask, IGNORE};
use proptest::prelude::*;

fn small() -> SceneConfig {
    SceneConfig {
        height: 24,
        width: 24,
        train_scenes: 30,
        support_per_class: 6,
        test_scenes: 12,
        ..SceneConfig::default()
    }
}

fn partner_rate(p: f64) -> f64 {
    let config = SceneConfig {
        height: 32,
        width: 32,
        ..SceneConfig::default()
    };
    let allowed: BTreeSet<u8> = (0..=8).collect();
    let rules = [CoocRule { class: 1, partner: 3, p }];
    let n = 500;
    let mut hits = 0;
    for i in 0..n {
        let mut rng = scene_rng(99, 0, Partition::Support, i);
        let (_, mask): (capl_core::Image, LabelMask) = generate_scene(&config, &allowed, Some(1), &rules, &mut rng).unwrap();
        assert!(mask.contains(1));
        hits += mask.contains(3) as usize;
    }
    hits as f64 / n as f64
}

#[test]
fn cooccurrence_frequency_tracks_probability() {
    for p in [0.3, 0.8] {
        let rate = partner_rate(p);
        assert!((rate - p).abs() <= 0.05, "p {p}: observed {rate}");
    }
    assert_eq!(partner_rate(1.0), 1.0);
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn builds_are_byte_identical_and_load_back() {
    let config = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(&config, 1, a.path()).unwrap();
    build_dataset(&config, 1, b.path()).unwrap();
    let fa = files_under(a.path());
    assert_eq!(fa.len(), 2 * (30 + 2 * 6 + 12) + 1);
    assert_eq!(fa, files_under(b.path()));

    let loaded = SplitData::<f64>::load(&a.path().join("manifest.json")).unwrap();
    let memory = generate_split::<f64>(&config, 1).unwrap();
    assert_eq!(loaded, memory);
}

#[test]
fn folds_respect_class_roles() {
    let config = small();
    for split in 0..config.folds() {
        let data = generate_split::<f64>(&config, split).unwrap();
        let novel = data.novel_ids();
        assert_eq!(novel, config.novel_classes(split).unwrap());
        let registered: BTreeSet<u8> = data.classes.iter().map(|c| c.id).collect();
        for s in &data.train {
            assert!(s.mask.classes().is_disjoint(&novel), "fold {split}: novel pixel in training mask");
        }
        for s in data.train.iter().chain(&data.support_pool).chain(&data.test) {
            assert!(s.mask.labels().iter().all(|l| *l == IGNORE || registered.contains(l)));
        }
        for &u in &novel {
            let holding = data.support_pool.iter().filter(|s| s.mask.contains(u)).count();
            assert!(holding >= config.support_per_class);
        }
        assert!(data.test.iter().any(|s| !s.mask.classes().is_disjoint(&novel)));
    }
}

#[test]
fn support_draws_depend_on_seed() {
    let data = generate_split::<f64>(&small(), 0).unwrap();
    let a = data.sample_support_set(1, 123).unwrap();
    let b = data.sample_support_set(1, 123).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples().len(), 2);
    let differs = [321u64, 456, 654, 999]
        .iter()
        .any(|&s| data.sample_support_set(1, s).unwrap() != a);
    assert!(differs);
    assert!(matches!(data.sample_support_set(7, 0), Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn mask_files_round_trip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..h * w).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let mask = LabelMask::new(h, w, labels).unwrap();
        prop_assert_eq!(pnm::decode_pgm(&pnm::encode_pgm(&mask)).unwrap(), mask);
    }
}
