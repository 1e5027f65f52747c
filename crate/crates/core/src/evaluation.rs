//! Instance metrics for polygon predictions.
//!
//! Matching is greedy by descending confidence (COCO convention): each
//! prediction claims the unmatched ground truth with the highest IoU at or
//! above the threshold. Precision/recall points are taken at the end of each
//! group of equal confidences, so tied predictions form a single operating
//! point and list order never matters. AP uses 101-point interpolation.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::geometry::{self, Point, Polygon, DEFAULT_SUPERSAMPLE};
use crate::model::{Float, Model};
use crate::synthdata::{CropSample, DataRecord, GrayImage};

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Topology flags of one decoded polygon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub self_intersection: bool,
    pub duplicate_vertices: bool,
    pub too_few_vertices: bool,
    pub zero_area: bool,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        !(self.self_intersection || self.duplicate_vertices || self.too_few_vertices || self.zero_area)
    }
}

pub fn validity_checks(p: &Polygon) -> ValidityReport {
    validity_checks_raw(p.vertices())
}

/// Same flags on an unvalidated vertex list (e.g. straight out of a decoder).
pub fn validity_checks_raw(v: &[Point]) -> ValidityReport {
    let n = v.len();
    let duplicate_vertices = n > 1 && (0..n).any(|i| v[i] == v[(i + 1) % n]);
    let too_few_vertices = n < 3;
    let twice_area: i64 = (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.0 as i64 * b.1 as i64 - b.0 as i64 * a.1 as i64
        })
        .sum();
    ValidityReport {
        self_intersection: !too_few_vertices && geometry::self_intersects(v),
        duplicate_vertices,
        too_few_vertices,
        zero_area: twice_area == 0,
    }
}

/// Fraction of polygons raising each flag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidityRates {
    pub count: usize,
    pub self_intersection: f64,
    pub duplicate_vertices: f64,
    pub too_few_vertices: f64,
    pub zero_area: f64,
}

impl ValidityRates {
    pub fn aggregate(reports: &[ValidityReport]) -> Self {
        let n = reports.len();
        if n == 0 {
            return Self::default();
        }
        let rate = |f: fn(&ValidityReport) -> bool| reports.iter().filter(|r| f(r)).count() as f64 / n as f64;
        Self {
            count: n,
            self_intersection: rate(|r| r.self_intersection),
            duplicate_vertices: rate(|r| r.duplicate_vertices),
            too_few_vertices: rate(|r| r.too_few_vertices),
            zero_area: rate(|r| r.zero_area),
        }
    }
}

/// Predictions and ground truths of one image.
#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub preds: Vec<(Polygon, f64)>,
    pub gts: Vec<Polygon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub threshold: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
    pub max_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub schema_version: u32,
    pub curves: Vec<ThresholdCurve>,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub num_gt: usize,
    pub num_pred: usize,
    pub valid_decodes: usize,
    pub decode_failures: usize,
    pub mean_iou: f64,
    pub validity: ValidityRates,
}

impl EvalResult {
    /// Metrics table with the usual column names, values x100, one decimal.
    pub fn table(&self) -> String {
        format!(
            "{:>6} {:>6} {:>6} {:>6}\n{:>6.1} {:>6.1} {:>6.1} {:>6.1}\n",
            "mAP",
            "AP50",
            "AP75",
            "AR",
            self.map * 100.0,
            self.ap50 * 100.0,
            self.ap75 * 100.0,
            self.ar * 100.0
        )
    }

    pub fn ap_at(&self, t: f64) -> Option<f64> {
        self.curves.iter().find(|c| (c.threshold - t).abs() < 1e-9).map(|c| c.ap)
    }
}

fn iou_or_zero(a: &Polygon, b: &Polygon) -> f64 {
    geometry::polygon_iou(a, b, DEFAULT_SUPERSAMPLE).unwrap_or(0.0)
}

/// Greedy per-scene matching; returns (confidence, is_tp) per prediction.
fn match_scene(scene: &Scene, ious: &[Vec<f64>], t: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..scene.preds.len()).collect();
    order.sort_by(|&a, &b| scene.preds[b].1.partial_cmp(&scene.preds[a].1).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; scene.gts.len()];
    order
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in ious[p].iter().enumerate() {
                if !taken[g] && iou >= t && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (scene.preds[p].1, best.is_some())
        })
        .collect()
}

/// 101-point interpolated AP from raw (precision, recall) points.
fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        // first operating point reaching recall r
        let idx = recall.iter().position(|&x| x >= r - 1e-12);
        total += idx.map(|i| env[i]).unwrap_or(0.0);
    }
    total / 101.0
}

pub fn curve_for_threshold(scenes: &[Scene], ious: &[Vec<Vec<f64>>], t: f64) -> ThresholdCurve {
    let num_gt: usize = scenes.iter().map(|s| s.gts.len()).sum();
    let mut dets: Vec<(f64, bool)> = scenes.iter().zip(ious).flat_map(|(s, m)| match_scene(s, m, t)).collect();
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (mut precision, mut recall) = (Vec::new(), Vec::new());
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in 0..dets.len() {
        if dets[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_end = i + 1 == dets.len() || dets[i + 1].0 != dets[i].0;
        if group_end {
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(tp as f64 / num_gt as f64);
        }
    }
    let ap = interpolated_ap(&precision, &recall);
    ThresholdCurve { threshold: t, max_recall: recall.last().copied().unwrap_or(0.0), precision, recall, ap }
}

/// Scores scenes at each threshold. Scenes with missing predictions simply
/// leave their ground truths unmatched.
pub fn match_and_score(scenes: &[Scene], thresholds: &[f64]) -> Result<EvalResult> {
    let num_gt: usize = scenes.iter().map(|s| s.gts.len()).sum();
    if num_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let ious: Vec<Vec<Vec<f64>>> = scenes
        .par_iter()
        .map(|s| s.preds.iter().map(|(p, _)| s.gts.iter().map(|g| iou_or_zero(p, g)).collect()).collect())
        .collect();
    let curves: Vec<ThresholdCurve> = thresholds.iter().map(|&t| curve_for_threshold(scenes, &ious, t)).collect();
    let mean = |f: fn(&ThresholdCurve) -> f64| curves.iter().map(f).sum::<f64>() / curves.len().max(1) as f64;
    let at = |t: f64| curves.iter().find(|c| (c.threshold - t).abs() < 1e-9).map(|c| c.ap).unwrap_or(f64::NAN);
    let preds: Vec<&Polygon> = scenes.iter().flat_map(|s| s.preds.iter().map(|(p, _)| p)).collect();
    let reports: Vec<ValidityReport> = preds.iter().map(|p| validity_checks(p)).collect();
    // mean over ground truths of the best IoU any prediction reached
    let best_iou_sum: f64 = scenes
        .iter()
        .zip(&ious)
        .map(|(s, m)| (0..s.gts.len()).map(|g| m.iter().map(|row| row[g]).fold(0.0, f64::max)).sum::<f64>())
        .sum();
    Ok(EvalResult {
        schema_version: EVAL_SCHEMA_VERSION,
        map: mean(|c| c.ap),
        ap50: at(0.5),
        ap75: at(0.75),
        ar: mean(|c| c.max_recall),
        num_gt,
        num_pred: preds.len(),
        valid_decodes: preds.len(),
        decode_failures: 0,
        mean_iou: best_iou_sum / num_gt as f64,
        validity: ValidityRates::aggregate(&reports),
        curves,
    })
}

/// Anything that turns crops into answer token ids.
pub trait ContourPredictor {
    fn vocab(&self) -> &Vocab;
    fn predict(&self, crops: &[&CropSample]) -> Result<Vec<Vec<TokenId>>>;
}

/// Greedy decoding of the instruction prompt with a trained network.
pub struct GreedyPredictor<'a, T> {
    model: &'a Model<T>,
    vocab: Vocab,
    prompt: Vec<TokenId>,
    max_new: usize,
}

impl<'a, T: Float> GreedyPredictor<'a, T> {
    pub fn new(model: &'a Model<T>) -> Self {
        let vocab = model.config.vocab();
        let prompt = codec::sft_prompt(&vocab);
        let max_new = model.config.max_text_len().saturating_sub(prompt.len() - 1).max(1);
        Self { model, vocab, prompt: prompt.ids, max_new }
    }

    pub fn predict_images(&self, images: &[&GrayImage]) -> Result<Vec<Vec<TokenId>>> {
        self.model.generate(images, &self.prompt, self.max_new)
    }
}

impl<T: Float> ContourPredictor for GreedyPredictor<'_, T> {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn predict(&self, crops: &[&CropSample]) -> Result<Vec<Vec<TokenId>>> {
        let images: Vec<&GrayImage> = crops.iter().map(|c| &c.image).collect();
        self.predict_images(&images)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    OracleBox,
}

/// One line of the per-sample dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDump {
    pub source_id: String,
    pub gt: Polygon,
    pub gt_crop: Polygon,
    pub pred: Option<Polygon>,
    pub pred_crop: Option<Polygon>,
    pub iou: f64,
    pub flags: Option<ValidityReport>,
    pub tokens: String,
    pub error: Option<String>,
    pub window: Option<geometry::BBox>,
}

/// Runs the predictor on oracle-box crops, maps predictions back to source
/// coordinates and scores them. Decode failures are kept as misses.
pub fn evaluate_model<P: ContourPredictor + ?Sized>(
    model: &P,
    records: &[DataRecord],
    mode: EvalMode,
) -> Result<(EvalResult, Vec<SampleDump>)> {
    let EvalMode::OracleBox = mode;
    let crops: Vec<&CropSample> = records.iter().map(|r| &r.sample).collect();
    let outputs = model.predict(&crops)?;
    let vocab = model.vocab();
    let mut scenes = Vec::with_capacity(records.len());
    let mut dumps = Vec::with_capacity(records.len());
    let mut failures = 0;
    for (rec, ids) in records.iter().zip(&outputs) {
        let decoded = codec::decode_tokens(vocab, ids).and_then(|p| Ok((rec.sample.to_source(&p)?, p)));
        let mut scene = Scene { preds: Vec::new(), gts: vec![rec.source_gt.clone()] };
        let dump = match decoded {
            Ok((src, crop)) => {
                let iou = iou_or_zero(&src, &rec.source_gt);
                let flags = validity_checks(&src);
                scene.preds.push((src.clone(), 1.0));
                SampleDump {
                    source_id: rec.sample.source_id.clone(),
                    gt: rec.source_gt.clone(),
                    gt_crop: rec.sample.gt.clone(),
                    pred: Some(src),
                    pred_crop: Some(crop),
                    iou,
                    flags: Some(flags),
                    tokens: vocab.render(ids),
                    error: None,
                    window: rec.sample.window,
                }
            }
            Err(e) => {
                failures += 1;
                SampleDump {
                    source_id: rec.sample.source_id.clone(),
                    gt: rec.source_gt.clone(),
                    gt_crop: rec.sample.gt.clone(),
                    pred: None,
                    pred_crop: None,
                    iou: 0.0,
                    flags: None,
                    tokens: vocab.render(ids),
                    error: Some(e.to_string()),
                    window: rec.sample.window,
                }
            }
        };
        scenes.push(scene);
        dumps.push(dump);
    }
    let mut result = match_and_score(&scenes, &coco_thresholds())?;
    result.decode_failures = failures;
    result.valid_decodes = records.len() - failures;
    Ok((result, dumps))
}

pub fn write_dump(path: &Path, dumps: &[SampleDump]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dumps {
        writeln!(f, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<SampleDump>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: i32, y0: i32, x1: i32, y1: i32) -> Polygon {
        Polygon::new(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)]).unwrap()
    }

    #[test]
    fn validity_examples() {
        assert!(validity_checks(&rect(0, 0, 4, 4)).is_valid());
        let bowtie = validity_checks_raw(&[(0, 0), (4, 4), (4, 0), (0, 4)]);
        assert!(bowtie.self_intersection);
        assert!(validity_checks_raw(&[(0, 0), (0, 0), (3, 3)]).duplicate_vertices);
        assert!(validity_checks_raw(&[(0, 0), (3, 3)]).too_few_vertices);
        assert!(validity_checks_raw(&[(0, 0), (1, 1), (2, 2)]).zero_area);
    }

    #[test]
    fn validity_rates_are_means() {
        let reps = [
            validity_checks(&rect(0, 0, 4, 4)),
            validity_checks_raw(&[(0, 0), (4, 4), (4, 0), (0, 6)]),
            validity_checks_raw(&[(0, 0), (4, 4), (4, 0), (0, 6)]),
            validity_checks_raw(&[(0, 0), (1, 1), (2, 2)]),
        ];
        let r = ValidityRates::aggregate(&reps);
        // the collinear ring folds back on itself, so it also self-intersects
        assert_eq!(r.self_intersection, 0.75);
        assert_eq!(r.zero_area, 0.25);
        assert_eq!(r.too_few_vertices, 0.0);
    }

    #[test]
    fn single_instance_at_iou_point_nine() {
        // 10x10 gt vs 10x9 pred: IoU exactly 0.9
        let gt = rect(0, 0, 10, 10);
        let pred = rect(0, 0, 10, 9);
        assert!((iou_or_zero(&pred, &gt) - 0.9).abs() < 1e-12);
        let r = match_and_score(&[Scene { preds: vec![(pred, 1.0)], gts: vec![gt] }], &coco_thresholds()).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert!((r.map - 0.9).abs() < 1e-12, "{}", r.map);
        assert!((r.ar - 0.9).abs() < 1e-12);
        assert_eq!(r.ap_at(0.95), Some(0.0));
    }

    #[test]
    fn perfect_predictions() {
        let scenes: Vec<Scene> = (0..5)
            .map(|i| {
                let g = rect(i, i, i + 10, i + 7);
                Scene { preds: vec![(g.clone(), 1.0)], gts: vec![g] }
            })
            .collect();
        let r = match_and_score(&scenes, &coco_thresholds()).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.ar, 1.0);
        assert_eq!(r.mean_iou, 1.0);
    }

    #[test]
    fn missing_prediction_costs_recall() {
        let scenes = vec![
            Scene { preds: vec![(rect(0, 0, 8, 8), 1.0)], gts: vec![rect(0, 0, 8, 8)] },
            Scene { preds: vec![], gts: vec![rect(0, 0, 8, 8)] },
        ];
        let r = match_and_score(&scenes, &coco_thresholds()).unwrap();
        assert_eq!(r.ar, 0.5);
        // one operating point at precision 1, recall 0.5: 51 of 101 samples
        assert!((r.map - 51.0 / 101.0).abs() < 1e-12);
        assert!(match_and_score(&[Scene::default()], &[0.5]).is_err());
    }

    #[test]
    fn order_invariant_with_distinct_confidences() {
        let gts = vec![rect(0, 0, 10, 10), rect(20, 0, 30, 10), rect(40, 0, 50, 10)];
        let preds = vec![(rect(0, 0, 10, 9), 0.9), (rect(21, 0, 30, 10), 0.5), (rect(60, 0, 70, 10), 0.7)];
        let a = match_and_score(&[Scene { preds: preds.clone(), gts: gts.clone() }], &coco_thresholds()).unwrap();
        let mut rev = preds;
        rev.reverse();
        let b = match_and_score(&[Scene { preds: rev, gts }], &coco_thresholds()).unwrap();
        assert_eq!(a.map, b.map);
        assert!(a.ap50 >= a.map && a.map >= a.ap_at(0.95).unwrap());
    }
}
