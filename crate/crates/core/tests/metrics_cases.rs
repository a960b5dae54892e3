use capl_core::metrics::{miou, ConfusionMatrix, RoleFilter};
use capl_core::{LabelMask, Role, IGNORE};
use proptest::prelude::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn mask(h: usize, w: usize, labels: &[u8]) -> LabelMask {
    LabelMask::new(h, w, labels.to_vec()).unwrap()
}

const THREE: [(u8, Role); 3] = [(0, Role::Base), (1, Role::Base), (2, Role::Novel)];

// truth          pred
// 0 0 1          0 1 1
// 1 1 2          1 1 2
// 2 2 0          2 0 0
const TRUTH: [u8; 9] = [0, 0, 1, 1, 1, 2, 2, 2, 0];
const PRED: [u8; 9] = [0, 1, 1, 1, 1, 2, 2, 0, 0];

#[test]
fn three_by_three_with_two_errors() {
    let mut cm = ConfusionMatrix::new(&THREE).unwrap();
    cm.accumulate(&mask(3, 3, &PRED), &mask(3, 3, &TRUTH)).unwrap();
    let expected = [[2, 1, 0], [0, 3, 0], [1, 0, 2]];
    for t in 0..3u8 {
        for p in 0..3u8 {
            assert_eq!(cm.get(t, p), expected[t as usize][p as usize]);
        }
    }
    // IoU: class 0 = 2/4, class 1 = 3/4, class 2 = 2/3
    assert!(close(miou(&cm, RoleFilter::All).unwrap(), (0.5 + 0.75 + 2.0 / 3.0) / 3.0));
    assert!(close(miou(&cm, RoleFilter::Base).unwrap(), 0.625));
    assert!(close(miou(&cm, RoleFilter::Novel).unwrap(), 2.0 / 3.0));
}

#[test]
fn ignored_pixels_do_not_count() {
    let mut truth = TRUTH.to_vec();
    let mut pred = PRED.to_vec();
    truth.extend([IGNORE; 3]);
    pred.extend([2, 0, 1]);
    let mut cm = ConfusionMatrix::new(&THREE).unwrap();
    cm.accumulate(&mask(4, 3, &pred), &mask(4, 3, &truth)).unwrap();
    assert_eq!(cm.total(), 9);
    assert!(close(miou(&cm, RoleFilter::All).unwrap(), (0.5 + 0.75 + 2.0 / 3.0) / 3.0));
}

#[test]
fn zero_union_classes_are_excluded() {
    // class 3 never occurs; class 4 is only ever predicted (IoU 0, kept)
    let classes = [(0, Role::Base), (1, Role::Base), (3, Role::Base), (4, Role::Novel)];
    let truth = [0, 0, 0, 1, 1, 1];
    let pred = [0, 0, 4, 1, 1, 0];
    let mut cm = ConfusionMatrix::new(&classes).unwrap();
    cm.accumulate(&mask(2, 3, &pred), &mask(2, 3, &truth)).unwrap();
    // class 0: TP 2, FN 1, FP 1 -> 2/4; class 1: TP 2, FN 1 -> 2/3; class 4: 0/1
    let ious = cm.class_iou();
    assert_eq!(ious[2].iou, None);
    assert!(close(miou(&cm, RoleFilter::Base).unwrap(), (0.5 + 2.0 / 3.0) / 2.0));
    assert!(close(miou(&cm, RoleFilter::Novel).unwrap(), 0.0));
    assert!(close(miou(&cm, RoleFilter::All).unwrap(), (0.5 + 2.0 / 3.0 + 0.0) / 3.0));
}

fn random_pairs(seed: u64, n: usize) -> Vec<(LabelMask, LabelMask)> {
    let mut s = seed;
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 33) as u32
    };
    (0..n)
        .map(|_| {
            let t: Vec<u8> = (0..16).map(|_| [0, 1, 2, IGNORE][(next() % 4) as usize]).collect();
            let p: Vec<u8> = (0..16).map(|_| (next() % 3) as u8).collect();
            (mask(4, 4, &p), mask(4, 4, &t))
        })
        .collect()
}

proptest! {
    #[test]
    fn accumulation_order_does_not_matter(seed in any::<u64>(), n in 1usize..8, rot in 0usize..8) {
        let pairs = random_pairs(seed, n);
        let mut fwd = ConfusionMatrix::new(&THREE).unwrap();
        for (p, t) in &pairs {
            fwd.accumulate(p, t).unwrap();
        }
        let mut rotated = ConfusionMatrix::new(&THREE).unwrap();
        for i in 0..n {
            let (p, t) = &pairs[(i + rot) % n];
            rotated.accumulate(p, t).unwrap();
        }
        prop_assert_eq!(&fwd, &rotated);
        if let Ok(m) = miou(&fwd, RoleFilter::All) {
            let vals: Vec<f64> = fwd.class_iou().into_iter().filter_map(|c| c.iou).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-15 && m <= hi + 1e-15);
        }
    }
}
