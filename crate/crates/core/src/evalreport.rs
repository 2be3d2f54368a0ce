//! Per-case Dice, aggregate statistics and report files.
//!
//! Files written by [`render_reports`]:
//!
//! ```text
//! results.csv        one row per case (CaseResult columns)
//! summary.csv        metric,n,mean,std,min,q1,median,q3,max
//! loss_curve.png     train (blue), validation (red), smoothed validation (green)
//! dice_boxplot.png   one box per metric: kidney label, kidney composite, tumor
//! ```
//!
//! Plots carry no text; series colours and column order are fixed as above.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::percentile;
use crate::trainer::EpochRecord;
use crate::volcore::{LabelVolume, Volume, BACKGROUND, KIDNEY, TUMOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    /// Class 1 only.
    pub dice_kidney_label: f64,
    /// Classes 1 ∪ 2; the headline kidney score.
    pub dice_kidney_composite: f64,
    pub dice_tumor: f64,
    pub pred_background: usize,
    pub pred_kidney: usize,
    pub pred_tumor: usize,
    pub gt_background: usize,
    pub gt_kidney: usize,
    pub gt_tumor: usize,
}

/// Hard Dice `2|A∩B| / (|A| + |B|)`, defined as 1 when both sets are empty.
pub fn dice<I: IntoIterator<Item = (bool, bool)>>(pairs: I) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (p, g) in pairs {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

pub fn dice_per_case(case_id: &str, pred: &LabelVolume, gt: &LabelVolume) -> Result<CaseResult> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            what: "prediction vs ground truth",
            expected: gt.shape().to_vec(),
            found: pred.shape().to_vec(),
        });
    }
    let pairs = || pred.data.iter().zip(&gt.data);
    Ok(CaseResult {
        case_id: case_id.to_string(),
        dice_kidney_label: dice(pairs().map(|(&p, &g)| (p == KIDNEY, g == KIDNEY))),
        dice_kidney_composite: dice(pairs().map(|(&p, &g)| (p != BACKGROUND, g != BACKGROUND))),
        dice_tumor: dice(pairs().map(|(&p, &g)| (p == TUMOR, g == TUMOR))),
        pred_background: pred.count(BACKGROUND),
        pred_kidney: pred.count(KIDNEY),
        pred_tumor: pred.count(TUMOR),
        gt_background: gt.count(BACKGROUND),
        gt_kidney: gt.count(KIDNEY),
        gt_tumor: gt.count(TUMOR),
    })
}

/// Distribution of one metric over cases. `std` is the population standard
/// deviation; quartiles interpolate linearly between order statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub const METRICS: [&str; 3] = ["dice_kidney_label", "dice_kidney_composite", "dice_tumor"];

fn metric_values(results: &[CaseResult], metric: &str) -> Vec<f64> {
    results
        .iter()
        .map(|r| match metric {
            "dice_kidney_label" => r.dice_kidney_label,
            "dice_kidney_composite" => r.dice_kidney_composite,
            "dice_tumor" => r.dice_tumor,
            other => unreachable!("unknown metric {other}"),
        })
        .collect()
}

pub fn summarize(metric: &str, values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::InvalidInput(format!("no values to summarize for {metric}")));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    let q = |s: &mut Vec<f64>, p: f64| percentile(s, p);
    Ok(MetricSummary {
        metric: metric.to_string(),
        n: values.len(),
        // A constant series must summarize to exactly that constant.
        mean: if values.iter().all(|&v| v == values[0]) { values[0] } else { mean },
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        q1: q(&mut sorted, 25.0),
        median: q(&mut sorted, 50.0),
        q3: q(&mut sorted, 75.0),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// One summary per entry of [`METRICS`].
pub fn aggregate(results: &[CaseResult]) -> Result<Vec<MetricSummary>> {
    METRICS.iter().map(|m| summarize(m, &metric_values(results, m))).collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file).deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Paths of everything [`render_reports`] wrote.
#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub results_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub boxplot_png: PathBuf,
    pub loss_curve_png: Option<PathBuf>,
}

pub fn render_reports(
    out_dir: &Path,
    summary: &[MetricSummary],
    results: &[CaseResult],
    training_log: Option<&[EpochRecord]>,
) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        results_csv: out_dir.join("results.csv"),
        summary_csv: out_dir.join("summary.csv"),
        boxplot_png: out_dir.join("dice_boxplot.png"),
        loss_curve_png: None,
    };
    write_csv(&files.results_csv, results)?;
    write_csv(&files.summary_csv, summary)?;
    let boxplot = draw_boxplot(summary);
    boxplot.save(&files.boxplot_png)?;
    let loss_curve_png = match training_log {
        Some(log) if !log.is_empty() => {
            let path = out_dir.join("loss_curve.png");
            draw_loss_curve(log).save(&path)?;
            Some(path)
        }
        _ => {
            log::warn!("no training log available; skipping the loss curve");
            None
        }
    };
    Ok(ReportFiles { loss_curve_png, ..files })
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const TRAIN_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
pub const VAL_COLOR: Rgb<u8> = Rgb([214, 39, 40]);
pub const EMA_COLOR: Rgb<u8> = Rgb([44, 160, 44]);
pub const BOX_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
pub const MEDIAN_COLOR: Rgb<u8> = Rgb([255, 127, 14]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, WHITE);
    for k in 0..=4 {
        let y = MARGIN + k * (HEIGHT - 2 * MARGIN) / 4;
        hline(&mut img, MARGIN, WIDTH - MARGIN, y, GRID);
    }
    hline(&mut img, MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, BLACK);
    vline(&mut img, MARGIN, MARGIN, HEIGHT - MARGIN, BLACK);
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn hline(img: &mut RgbImage, x0: u32, x1: u32, y: u32, c: Rgb<u8>) {
    for x in x0.min(x1)..=x0.max(x1) {
        put(img, x as i64, y as i64, c);
    }
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        put(img, x as i64, y as i64, c);
    }
}

/// Bresenham line, two pixels thick.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x, y + 1, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Pixel row of value `v` on a `[lo, hi]` vertical axis.
pub fn value_to_row(v: f64, lo: f64, hi: f64) -> u32 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let t = ((v - lo) / span).clamp(0.0, 1.0);
    let top = MARGIN as f64;
    let bottom = (HEIGHT - MARGIN) as f64;
    (bottom - t * (bottom - top)).round() as u32
}

/// Horizontal centre of box `i` of `n`.
pub fn box_center(i: usize, n: usize) -> u32 {
    let inner = WIDTH - 2 * MARGIN;
    MARGIN + ((2 * i + 1) as u32 * inner) / (2 * n.max(1) as u32)
}

/// Box from q1 to q3, median line, whiskers at min and max, on a [0, 1] axis.
pub fn draw_boxplot(summary: &[MetricSummary]) -> RgbImage {
    let mut img = canvas();
    let half = (WIDTH - 2 * MARGIN) / (4 * summary.len().max(1) as u32);
    for (i, s) in summary.iter().enumerate() {
        let cx = box_center(i, summary.len());
        let row = |v: f64| value_to_row(v, 0.0, 1.0);
        let (top, bottom) = (row(s.q3), row(s.q1));
        vline(&mut img, cx, row(s.max), top, BLACK);
        vline(&mut img, cx, bottom, row(s.min), BLACK);
        hline(&mut img, cx - half / 2, cx + half / 2, row(s.max), BLACK);
        hline(&mut img, cx - half / 2, cx + half / 2, row(s.min), BLACK);
        for y in top..=bottom {
            put(&mut img, (cx - half) as i64, y as i64, BOX_COLOR);
            put(&mut img, (cx + half) as i64, y as i64, BOX_COLOR);
        }
        hline(&mut img, cx - half, cx + half, top, BOX_COLOR);
        hline(&mut img, cx - half, cx + half, bottom, BOX_COLOR);
        hline(&mut img, cx - half + 1, cx + half - 1, row(s.median), MEDIAN_COLOR);
    }
    img
}

pub fn draw_loss_curve(log: &[EpochRecord]) -> RgbImage {
    let mut img = canvas();
    let series: [(Vec<f64>, Rgb<u8>); 3] = [
        (log.iter().map(|r| r.train_loss).collect(), TRAIN_COLOR),
        (log.iter().map(|r| r.val_loss).collect(), VAL_COLOR),
        (log.iter().map(|r| r.ema_val_loss).collect(), EMA_COLOR),
    ];
    let finite = series.iter().flat_map(|(s, _)| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi) } else { (0.0, 1.0) };
    let n = log.len();
    let col = |i: usize| -> i64 {
        let inner = (WIDTH - 2 * MARGIN) as f64;
        (MARGIN as f64 + if n > 1 { i as f64 / (n - 1) as f64 * inner } else { inner / 2.0 }).round() as i64
    };
    for (values, color) in &series {
        let pts: Vec<(i64, i64)> = values.iter().enumerate().map(|(i, &v)| (col(i), value_to_row(v, lo, hi) as i64)).collect();
        if pts.len() == 1 {
            line(&mut img, pts[0], pts[0], *color);
        }
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], *color);
        }
    }
    img
}

/// Axial slice with the most ground-truth foreground, grey image with
/// ground truth tinted green and prediction outlined red (kidney) / yellow
/// (tumor).
pub fn draw_overlay(image: &Volume, gt: &LabelVolume, pred: &LabelVolume) -> Result<RgbImage> {
    if image.shape() != gt.shape() || gt.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            what: "overlay inputs",
            expected: image.shape().to_vec(),
            found: pred.shape().to_vec(),
        });
    }
    let [nx, ny, _] = image.shape();
    let z = gt
        .data
        .axis_iter(Axis(2))
        .map(|s| s.iter().filter(|&&v| v != BACKGROUND).count())
        .enumerate()
        .max_by_key(|&(i, c)| (c, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (lo, hi) = (image.min_value(), image.max_value());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for x in 0..nx {
        for y in 0..ny {
            let g = ((image.data[[x, y, z]] - lo) / span * 255.0) as u8;
            let mut px = [g, g, g];
            if gt.data[[x, y, z]] != BACKGROUND {
                px[1] = px[1].saturating_add(80);
            }
            let p = pred.data[[x, y, z]];
            let edge = p != BACKGROUND
                && [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dx, dy)| {
                    let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                    qx < 0 || qy < 0 || qx >= nx as i64 || qy >= ny as i64 || pred.data[[qx as usize, qy as usize, z]] != p
                });
            if edge {
                px = if p == TUMOR { [255, 220, 0] } else { [230, 20, 20] };
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}
