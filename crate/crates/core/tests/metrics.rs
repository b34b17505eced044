mod common;

use cdnet::audit::{audit_rows, bundled_table, read_table, render_table, RowVerdict};
use cdnet::metrics::{
    accumulate, audit_consistency, f1_from_iou, report, round_ratio_half_up, ConfusionCounts,
    Ratio, Verdict,
};
use cdnet::tensor::Mask;
use cdnet::Error;
use common::{random_mask, rng};
use rand::Rng;

fn naive_counts(pred: &Mask, gt: &Mask) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for y in 0..gt.h {
        for x in 0..gt.w {
            match (pred.at(y, x), gt.at(y, x)) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
    }
    c
}

#[test]
fn report_matches_pixel_counting() {
    let mut r = rng(31);
    for _ in 0..100 {
        let p = r.gen_range(0.05..0.95);
        let pred = random_mask(&mut r, 16, 16, p);
        let gt = random_mask(&mut r, 16, 16, p);
        let c = accumulate(&pred, &gt, ConfusionCounts::default()).unwrap();
        let naive = naive_counts(&pred, &gt);
        assert_eq!(c, naive);
        let rep = report(&c).unwrap();
        let (tp, fp, fn_, tn) = (
            naive.tp as f64,
            naive.fp as f64,
            naive.fn_ as f64,
            naive.tn as f64,
        );
        assert_eq!(rep.iou, tp / (tp + fp + fn_));
        assert_eq!(rep.f1, 2.0 * tp / (2.0 * tp + fp + fn_));
        assert_eq!(rep.oa, (tp + tn) / 256.0);
        assert!((rep.f1 - 2.0 * rep.iou / (1.0 + rep.iou)).abs() < 1e-12);
    }
}

#[test]
fn counting_examples() {
    let z = Mask::zeros(4, 4);
    let c = accumulate(&z, &z, ConfusionCounts::default()).unwrap();
    assert_eq!(
        c,
        ConfusionCounts {
            tn: 16,
            ..Default::default()
        }
    );
    let gt = random_mask(&mut rng(1), 4, 4, 0.5);
    let c = accumulate(&gt.complement(), &gt, ConfusionCounts::default()).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));
    assert_eq!(c.fp + c.fn_, 16);
    let r = report(&accumulate(&gt, &gt, ConfusionCounts::default()).unwrap()).unwrap();
    assert_eq!((r.f1, r.iou, r.oa), (1.0, 1.0, 1.0));
}

#[test]
fn shape_mismatch_is_an_error() {
    let e = accumulate(
        &Mask::zeros(4, 4),
        &Mask::zeros(4, 5),
        ConfusionCounts::default(),
    );
    assert!(matches!(e, Err(Error::Shape(_))));
}

#[test]
fn counts_are_additive() {
    let mut r = rng(4);
    let pairs: Vec<(Mask, Mask)> = (0..6)
        .map(|_| {
            (
                random_mask(&mut r, 8, 8, 0.4),
                random_mask(&mut r, 8, 8, 0.4),
            )
        })
        .collect();
    let all = pairs
        .iter()
        .try_fold(ConfusionCounts::default(), |c, (p, g)| accumulate(p, g, c))
        .unwrap();
    let mut halves = ConfusionCounts::default();
    for chunk in pairs.chunks(4) {
        halves += chunk
            .iter()
            .try_fold(ConfusionCounts::default(), |c, (p, g)| accumulate(p, g, c))
            .unwrap();
    }
    assert_eq!(all, halves);
    let stack = |f: fn(&(Mask, Mask)) -> &Mask| {
        Mask::new(
            48,
            8,
            pairs.iter().flat_map(|p| f(p).data.clone()).collect(),
        )
    };
    let joined = accumulate(
        &stack(|p| &p.0),
        &stack(|p| &p.1),
        ConfusionCounts::default(),
    )
    .unwrap();
    assert_eq!(all, joined);
}

#[test]
fn identity_holds_for_random_counts() {
    let mut r = rng(12);
    for _ in 0..1000 {
        let c = ConfusionCounts {
            tp: r.gen_range(0..10_000),
            fp: r.gen_range(0..10_000),
            fn_: r.gen_range(0..10_000),
            tn: r.gen_range(1..100_000),
        };
        let rep = report(&c).unwrap();
        assert!((rep.f1 - f1_from_iou(rep.iou).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn f1_from_iou_examples() {
    assert_eq!(f1_from_iou(1.0).unwrap(), 1.0);
    let upper = f1_from_iou(0.8505).unwrap();
    assert_eq!(format!("{upper:.4}"), "0.9192");
    assert!(upper > 0.91921 && upper < 0.91922);
    let mid = f1_from_iou(0.850).unwrap();
    assert!(mid > 0.91891 && mid < 0.91892 + 1e-5);
    assert_eq!(format!("{mid:.5}"), "0.91892");
    let mut prev = -1.0;
    for k in 0..=1000 {
        let v = f1_from_iou(k as f64 / 1000.0).unwrap();
        assert!(v > prev);
        prev = v;
    }
}

#[test]
fn reported_pair_is_inconsistent() {
    let a = audit_consistency(0.921, 0.850, 3).unwrap();
    assert_eq!(a.verdict, Verdict::Inconsistent);
    assert_eq!(a.iou_interval.lo, Ratio::new(1699, 2000));
    assert_eq!(a.iou_interval.hi, Ratio::new(1701, 2000));
    assert!(!a.f1_interval.hi_inclusive);
    assert_eq!(a.f1_interval.lo, Ratio::new(3398, 3699));
    assert_eq!(a.f1_interval.hi, Ratio::new(3402, 3701));
    let (lo, hi) = a.f1_interval.to_f64();
    assert_eq!(format!("{hi:.4}"), "0.9192");
    assert!(lo > 0.91862 && lo < 0.91863);
    assert!(hi > 0.91921 && hi < 0.91922);
    assert!(hi < 0.9205);
}

#[test]
fn re_evaluated_pair_is_consistent() {
    assert_eq!(
        audit_consistency(0.919, 0.850, 3).unwrap().verdict,
        Verdict::Consistent
    );
    assert_eq!(
        audit_consistency(1.0, 1.0, 3).unwrap().verdict,
        Verdict::Consistent
    );
}

#[test]
fn rounded_metrics_always_audit_consistent() {
    let mut r = rng(77);
    for _ in 0..1000 {
        let (tp, fp, fn_) = (
            r.gen_range(0..5000i128),
            r.gen_range(0..5000i128),
            r.gen_range(0..5000i128),
        );
        if tp + fp + fn_ == 0 {
            continue;
        }
        let decimals = r.gen_range(2..=5);
        let f1 = round_ratio_half_up(2 * tp, 2 * tp + fp + fn_, decimals);
        let iou = round_ratio_half_up(tp, tp + fp + fn_, decimals);
        let scale = 10f64.powi(decimals as i32);
        let a = audit_consistency(f1 as f64 / scale, iou as f64 / scale, decimals).unwrap();
        assert_eq!(
            a.verdict,
            Verdict::Consistent,
            "tp {tp} fp {fp} fn {fn_} decimals {decimals}"
        );
    }
}

#[test]
fn bundled_table_verdicts() {
    let audited = audit_rows(&bundled_table()).unwrap();
    let verdicts: Vec<(String, String, RowVerdict)> = audited
        .iter()
        .map(|a| (a.row.method.clone(), a.row.dataset.clone(), a.verdict))
        .collect();
    use RowVerdict::*;
    let c = Checked(Verdict::Consistent);
    let expect = [
        ("M-CD (reported)", "WHU-CD", InsufficientData),
        (
            "M-CD (reported)",
            "LEVIR-CD",
            Checked(Verdict::Inconsistent),
        ),
        ("M-CD (reported)", "CDD", InsufficientData),
        ("M-CD (re-evaluated)", "WHU-CD", c),
        ("M-CD (re-evaluated)", "LEVIR-CD", c),
        ("M-CD (re-evaluated)", "CDD", c),
    ];
    assert_eq!(verdicts.len(), expect.len());
    for (got, want) in verdicts.iter().zip(expect) {
        assert_eq!((got.0.as_str(), got.1.as_str(), got.2), want);
    }
    let levir = audited[1].detail.unwrap();
    assert_eq!(levir.f1_interval.hi, Ratio::new(3402, 3701));
    let text = render_table(&audited);
    assert_eq!(text.lines().count(), 7);
    assert!(text.contains("[0.91863, 0.91921)"));
    assert!(text.contains("insufficient data"));
}

#[test]
fn user_table_with_inferred_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    std::fs::write(
        &p,
        "method,dataset,f1,iou,oa,decimals\nA,X,0.9192,0.8505,,\nB,Y,0.921,0.850,99.1,\n",
    )
    .unwrap();
    let rows = read_table(&p).unwrap();
    assert_eq!(rows[0].decimals, 4);
    assert_eq!(rows[1].line, 3);
    let audited = audit_rows(&rows).unwrap();
    assert_eq!(audited[0].verdict, RowVerdict::Checked(Verdict::Consistent));
    assert_eq!(
        audited[1].verdict,
        RowVerdict::Checked(Verdict::Inconsistent)
    );
}

#[test]
fn malformed_table_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(
        &p,
        "method,dataset,f1,iou,oa,decimals\nA,X,0.9,0.8,,1\nB,Y,abc,0.8,,1\n",
    )
    .unwrap();
    match read_table(&p) {
        Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a CSV error, got {other:?}"),
    }
    std::fs::write(
        &p,
        "method,dataset,f1,iou,oa,decimals\nA,X,0.9,0.8,,1\nB,Y\n",
    )
    .unwrap();
    match read_table(&p) {
        Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a CSV error, got {other:?}"),
    }
}
