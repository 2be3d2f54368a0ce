//! Filesystem-level steps behind each subcommand.
//!
//! A case directory holds one subdirectory per case containing
//! `imaging.{raw,nii,nii.gz}` and optionally `segmentation.*`. Step outputs:
//!
//! ```text
//! preprocess   <out>/dataset_stats.json, <out>/<id>/{imaging,segmentation}.raw, <out>/<id>/geometry.json
//! train        see the trainer module
//! predict      <out>/<id>/prediction.raw (+ prob_{background,kidney,tumor}.raw)
//! postprocess  <out>/<id>/prediction.raw
//! evaluate     see the evalreport module
//! pipeline     <out>/{data,preprocessed,training,predictions,postprocessed,report}
//! ```
//!
//! Each step also writes the resolved config next to its outputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalreport::{aggregate, dice_per_case, render_reports, CaseResult, MetricSummary, ReportFiles};
use crate::inference::{finalize, predict_volume};
use crate::msunet::{Checkpoint, MsUNet};
use crate::phantom::make_dataset;
use crate::postprocess::apply_rules_with;
use crate::preprocess::{compute_dataset_stats, preprocess_case, CaseGeometry, DatasetStats, PreprocessedCase};
use crate::trainer::{read_log, Case, TrainReport, Trainer};
use crate::volcore::{load_case, read_label, read_raw, write_raw, LabelVolume, Spacing, Volume};

pub const STATS_FILE: &str = "dataset_stats.json";
pub const GEOMETRY_FILE: &str = "geometry.json";
pub const PREDICTION_FILE: &str = "prediction.raw";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseFiles {
    pub id: String,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

fn find_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["raw", "nii.gz", "nii"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn dir_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Cases under `dir`, sorted by id.
pub fn discover_cases(dir: &Path) -> Result<Vec<CaseFiles>> {
    let cases: Vec<CaseFiles> = subdirs(dir)?
        .into_iter()
        .filter_map(|d| {
            find_stem(&d, "imaging").map(|image| CaseFiles {
                id: dir_id(&d),
                label: find_stem(&d, "segmentation"),
                image,
            })
        })
        .collect();
    if cases.is_empty() {
        return Err(Error::InvalidInput(format!("no cases (subdirectories with an imaging file) in {}", dir.display())));
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub fn split_cases(ids: &[String], cfg: &RunConfig) -> Result<Split> {
    let s = &cfg.split;
    if s.overfit {
        return Ok(Split {
            train: ids.to_vec(),
            validation: ids.to_vec(),
            test: ids.to_vec(),
        });
    }
    if ids.len() <= s.test_cases + s.validation_cases {
        return Err(Error::InvalidInput(format!(
            "{} cases cannot supply {} test and {} validation cases plus training cases",
            ids.len(),
            s.test_cases,
            s.validation_cases
        )));
    }
    let n_train = ids.len() - s.test_cases - s.validation_cases;
    let train = ids[..n_train].to_vec();
    let validation = if s.validation_cases == 0 {
        train.clone()
    } else {
        ids[n_train..n_train + s.validation_cases].to_vec()
    };
    Ok(Split {
        train,
        validation,
        test: ids[n_train + s.validation_cases..].to_vec(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Normalizes and resamples every case under `data_dir` into `out_dir`.
///
/// Statistics come from the labelled cases in `stats_ids` (all labelled
/// cases when `None`).
pub fn run_preprocess(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, stats_ids: Option<&[String]>) -> Result<DatasetStats> {
    let cases = discover_cases(data_dir)?;
    let mut loaded = Vec::with_capacity(cases.len());
    for c in &cases {
        let (image, label) = load_case(&c.image, c.label.as_deref())?;
        loaded.push((c.id.clone(), image, label));
    }
    let pool: Vec<(&Volume, &LabelVolume)> = loaded
        .iter()
        .filter(|(id, _, _)| stats_ids.is_none_or(|ids| ids.contains(id)))
        .filter_map(|(_, img, lab)| lab.as_ref().map(|l| (img, l)))
        .collect();
    if pool.is_empty() {
        return Err(Error::InvalidInput("no labelled cases to compute dataset statistics from".into()));
    }
    let mut stats = compute_dataset_stats(pool)?;
    if let Some(s) = cfg.preprocess.target_spacing {
        stats.target_spacing = Spacing::try_from(s)?;
    }
    write_json(&out_dir.join(STATS_FILE), &stats)?;
    for (id, image, label) in &loaded {
        let pre = preprocess_case(image, label.as_ref(), &stats);
        let dir = out_dir.join(id);
        write_raw(&dir.join("imaging.raw"), &pre.image)?;
        if let Some(l) = &pre.label {
            write_raw(&dir.join("segmentation.raw"), l)?;
        }
        write_json(&dir.join(GEOMETRY_FILE), &pre.geometry)?;
    }
    cfg.write_snapshot(out_dir)?;
    Ok(stats)
}

pub fn load_preprocessed(dir: &Path, id: &str) -> Result<PreprocessedCase> {
    let case_dir = dir.join(id);
    let image = read_raw::<f32>(&case_dir.join("imaging.raw"))?;
    let label_path = case_dir.join("segmentation.raw");
    let label = if label_path.is_file() { Some(read_label(&label_path)?) } else { None };
    let geometry: CaseGeometry = read_json(&case_dir.join(GEOMETRY_FILE))?;
    Ok(PreprocessedCase { image, label, geometry })
}

/// Ids of the cases in a preprocessed directory.
pub fn preprocessed_ids(dir: &Path) -> Result<Vec<String>> {
    let ids: Vec<String> = subdirs(dir)?.iter().filter(|d| d.join(GEOMETRY_FILE).is_file()).map(|d| dir_id(d)).collect();
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!("no preprocessed cases in {}", dir.display())));
    }
    Ok(ids)
}

fn labelled_cases(dir: &Path, ids: &[String]) -> Result<Vec<Case>> {
    ids.iter()
        .map(|id| {
            let pre = load_preprocessed(dir, id)?;
            let label = pre.label.ok_or_else(|| Error::InvalidInput(format!("case {id} has no segmentation")))?;
            Ok((pre.image, label))
        })
        .collect()
}

/// Trains on preprocessed cases; checkpoints and the log go to `out_dir`.
pub fn run_train(cfg: &RunConfig, pre_dir: &Path, out_dir: &Path, split: &Split) -> Result<TrainReport> {
    cfg.validate()?;
    let train = labelled_cases(pre_dir, &split.train)?;
    let val = labelled_cases(pre_dir, &split.validation)?;
    let net = MsUNet::<f32>::build(&cfg.network, cfg.seeds.network)?;
    let mut trainer = Trainer::new(
        cfg.trainer.clone(),
        cfg.loss.clone(),
        cfg.augment.clone(),
        cfg.seeds.training,
        &train,
        &val,
        net,
    )?;
    cfg.write_snapshot(out_dir)?;
    write_json(&out_dir.join("split.json"), split)?;
    let report = trainer.run(Some(out_dir))?;
    log::info!("training stopped ({:?}); best epoch {}", report.stop, report.best_epoch);
    Ok(report)
}

const CLASS_NAMES: [&str; 3] = ["background", "kidney", "tumor"];

/// Predicts each case in `ids` and writes labels on the original grid.
pub fn run_predict(cfg: &RunConfig, checkpoint: &Path, pre_dir: &Path, ids: &[String], out_dir: &Path) -> Result<()> {
    let net = Checkpoint::load(checkpoint)?.network()?;
    let window = cfg.window();
    net.spec().check_input(window)?;
    cfg.write_snapshot(out_dir)?;
    for id in ids {
        let pre = load_preprocessed(pre_dir, id)?;
        log::info!("predicting {id} ({:?})", pre.image.shape());
        let prob = predict_volume(&net, &pre.image, window, cfg.inference.overlap, cfg.inference.mirror_axes)?;
        let label = finalize(&prob, &pre.geometry)?;
        let dir = out_dir.join(id);
        write_raw(&dir.join(PREDICTION_FILE), &label)?;
        if cfg.inference.save_probabilities {
            for (c, name) in CLASS_NAMES.iter().enumerate() {
                let vol = Volume::new(prob.data.index_axis(Axis(0), c).to_owned(), prob.spacing);
                write_raw(&dir.join(format!("prob_{name}.raw")), &vol)?;
            }
        }
    }
    Ok(())
}

/// Ids of the cases with a prediction under `dir`.
pub fn prediction_ids(dir: &Path) -> Result<Vec<String>> {
    Ok(subdirs(dir)?.iter().filter(|d| d.join(PREDICTION_FILE).is_file()).map(|d| dir_id(d)).collect())
}

pub fn run_postprocess(cfg: &RunConfig, pred_dir: &Path, out_dir: &Path) -> Result<()> {
    let ids = prediction_ids(pred_dir)?;
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!("no predictions in {}", pred_dir.display())));
    }
    cfg.write_snapshot(out_dir)?;
    for id in &ids {
        let seg = read_label(&pred_dir.join(id).join(PREDICTION_FILE))?;
        write_raw(&out_dir.join(id).join(PREDICTION_FILE), &apply_rules_with(&seg, &cfg.postprocess))?;
    }
    Ok(())
}

/// Result of [`run_evaluate`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub results: Vec<CaseResult>,
    pub summary: Vec<MetricSummary>,
    pub files: ReportFiles,
}

/// Scores predictions against ground truth. With `ids = None` the two
/// directories must hold exactly the same cases.
pub fn run_evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    ids: Option<&[String]>,
    out_dir: &Path,
    training_log: Option<&Path>,
) -> Result<Evaluation> {
    let preds: BTreeSet<String> = prediction_ids(pred_dir)?.into_iter().collect();
    let gt_cases = discover_cases(gt_dir)?;
    let gts: BTreeSet<String> = gt_cases.iter().filter(|c| c.label.is_some()).map(|c| c.id.clone()).collect();
    let wanted: BTreeSet<String> = match ids {
        Some(ids) => ids.iter().cloned().collect(),
        None => preds.union(&gts).cloned().collect(),
    };
    let missing_pred: Vec<&String> = wanted.difference(&preds).collect();
    let missing_gt: Vec<&String> = wanted.difference(&gts).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let mut problems = Vec::new();
        if !missing_pred.is_empty() {
            problems.push(format!("no prediction for: {}", join(&missing_pred)));
        }
        if !missing_gt.is_empty() {
            problems.push(format!("no ground truth for: {}", join(&missing_gt)));
        }
        return Err(Error::InvalidInput(format!("case sets differ; {}", problems.join("; "))));
    }
    let mut results = Vec::with_capacity(wanted.len());
    for id in &wanted {
        let case = gt_cases.iter().find(|c| &c.id == id).expect("checked above");
        let gt = read_label(case.label.as_ref().expect("checked above"))?;
        let pred = read_label(&pred_dir.join(id).join(PREDICTION_FILE))?;
        results.push(dice_per_case(id, &pred, &gt)?);
    }
    let summary = aggregate(&results)?;
    let log = match training_log {
        Some(p) if p.is_file() => Some(read_log(p)?),
        _ => None,
    };
    let files = render_reports(out_dir, &summary, &results, log.as_deref())?;
    Ok(Evaluation { results, summary, files })
}

fn join(ids: &[&String]) -> String {
    ids.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
}

/// Everything [`run_pipeline`] produced.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub split: Split,
    pub training: TrainReport,
    pub evaluation: Evaluation,
}

/// Phantom generation (unless `paths.data_dir` is set), preprocessing,
/// training, prediction of the test cases, post-processing and evaluation.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    cfg.write_snapshot(out_dir)?;
    let data_dir = match &cfg.paths.data_dir {
        Some(d) => d.clone(),
        None => {
            let d = out_dir.join("data");
            make_dataset(&d, &cfg.phantom, cfg.seeds.phantom)?;
            d
        }
    };
    let ids: Vec<String> = discover_cases(&data_dir)?.into_iter().map(|c| c.id).collect();
    let split = split_cases(&ids, cfg)?;
    let stats_ids: Vec<String> = split.train.iter().chain(&split.validation).cloned().collect();
    let pre_dir = out_dir.join("preprocessed");
    run_preprocess(cfg, &data_dir, &pre_dir, Some(&stats_ids))?;
    let train_dir = out_dir.join("training");
    let training = run_train(cfg, &pre_dir, &train_dir, &split)?;
    let pred_dir = out_dir.join("predictions");
    run_predict(cfg, &train_dir.join("best.ckpt"), &pre_dir, &split.test, &pred_dir)?;
    let post_dir = out_dir.join("postprocessed");
    run_postprocess(cfg, &pred_dir, &post_dir)?;
    let evaluation = run_evaluate(
        &post_dir,
        &data_dir,
        Some(&split.test),
        &out_dir.join("report"),
        Some(&train_dir.join("training_log.csv")),
    )?;
    Ok(PipelineReport { split, training, evaluation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn split_layout() {
        let mut cfg = RunConfig::default();
        cfg.split.test_cases = 2;
        cfg.split.validation_cases = 1;
        let s = split_cases(&ids(6), &cfg).unwrap();
        assert_eq!(s.train, ids(3));
        assert_eq!(s.validation, vec!["c3"]);
        assert_eq!(s.test, vec!["c4", "c5"]);
        cfg.split.validation_cases = 0;
        assert_eq!(split_cases(&ids(6), &cfg).unwrap().validation, ids(4));
        assert!(split_cases(&ids(2), &cfg).is_err());
        cfg.split.overfit = true;
        let s = split_cases(&ids(1), &cfg).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 1, 1));
    }
}
