//! Dice against the set-count formula, and report rendering.

use kitseg::evalreport::{
    aggregate, box_center, dice_per_case, draw_boxplot, render_reports, value_to_row, CaseResult, MEDIAN_COLOR,
};
use kitseg::volcore::{LabelVolume, Spacing, Volume};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn set_of(v: &LabelVolume, keep: impl Fn(u8) -> bool) -> HashSet<usize> {
    v.data.iter().enumerate().filter(|(_, &l)| keep(l)).map(|(i, _)| i).collect()
}

fn set_dice(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

fn random_labels(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), p: [f64; 2]) -> LabelVolume {
    let data = Array3::from_shape_fn(dims, |_| {
        let u: f64 = rng.random();
        if u < p[0] {
            1
        } else if u < p[0] + p[1] {
            2
        } else {
            0
        }
    });
    Volume::new(data, Spacing::default())
}

#[test]
fn dice_matches_set_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for i in 0..100 {
        let dims = (rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..10));
        // Every tenth pair has no tumor at all, exercising the empty case.
        let p = if i % 10 == 0 { [0.3, 0.0] } else { [rng.random_range(0.0..0.4), rng.random_range(0.0..0.3)] };
        let (a, b) = (random_labels(&mut rng, dims, p), random_labels(&mut rng, dims, p));
        let r = dice_per_case("x", &a, &b).unwrap();
        assert_eq!(r.dice_kidney_label, set_dice(&set_of(&a, |l| l == 1), &set_of(&b, |l| l == 1)));
        assert_eq!(r.dice_kidney_composite, set_dice(&set_of(&a, |l| l > 0), &set_of(&b, |l| l > 0)));
        assert_eq!(r.dice_tumor, set_dice(&set_of(&a, |l| l == 2), &set_of(&b, |l| l == 2)));
        if i % 10 == 0 {
            assert_eq!(r.dice_tumor, 1.0);
        }
    }
}

fn case(id: &str, k: f64, t: f64) -> CaseResult {
    CaseResult {
        case_id: id.into(),
        dice_kidney_label: k,
        dice_kidney_composite: k,
        dice_tumor: t,
        pred_background: 0,
        pred_kidney: 0,
        pred_tumor: 0,
        gt_background: 0,
        gt_kidney: 0,
        gt_tumor: 0,
    }
}

#[test]
fn boxplot_draws_the_aggregate_medians() {
    let results: Vec<_> = [(0.9, 0.2), (0.95, 0.6), (0.7, 0.4), (0.85, 0.8)]
        .iter()
        .enumerate()
        .map(|(i, &(k, t))| case(&format!("c{i}"), k, t))
        .collect();
    let summary = aggregate(&results).unwrap();
    let img = draw_boxplot(&summary);
    for (i, s) in summary.iter().enumerate() {
        let px = img.get_pixel(box_center(i, summary.len()), value_to_row(s.median, 0.0, 1.0));
        assert_eq!(*px, MEDIAN_COLOR, "metric {}", s.metric);
    }
}

#[test]
fn reports_are_written_and_loss_curve_is_optional() {
    let dir = tempfile::tempdir().unwrap();
    let results = vec![case("a", 0.9, 0.5), case("b", 0.8, 1.0)];
    let summary = aggregate(&results).unwrap();
    let files = render_reports(dir.path(), &summary, &results, None).unwrap();
    assert!(files.loss_curve_png.is_none());
    assert!(files.boxplot_png.is_file());
    let back: Vec<CaseResult> = kitseg::evalreport::read_csv(&files.results_csv).unwrap();
    assert_eq!(back, results);
    let text = std::fs::read_to_string(&files.summary_csv).unwrap();
    assert!(text.starts_with("metric,n,mean,std,min,q1,median,q3,max"));
}
