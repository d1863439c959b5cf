//! Detection metrics: greedy matching, average precision, mAP over IoU
//! thresholds, and forgetting across incremental steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::detector::{decode, DecodeParams, Detector};
use crate::error::{Error, Result};
use crate::scenario::DatasetSplit;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Detection in global rank order with its greedy match outcome.
struct Ranked {
    score: f64,
    tp: bool,
}

/// Greedy matching per image in descending score order (ties keep input
/// order): each detection takes the highest-IoU unmatched ground truth
/// with IoU ≥ `thresh`, lowest index winning IoU ties.
fn match_images(per_image: &[(&[BBox], &[BBox])], thresh: f64) -> (Vec<Ranked>, usize) {
    let mut ranked = Vec::new();
    let mut n_gt = 0;
    for (dets, gts) in per_image {
        n_gt += gts.len();
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&i, &j| dets[j].score_or_one().total_cmp(&dets[i].score_or_one()).then(i.cmp(&j)));
        let mut taken = vec![false; gts.len()];
        for i in order {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let o = dets[i].iou(gt);
                if !taken[g] && o >= thresh && best.map_or(true, |(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            ranked.push(Ranked { score: dets[i].score_or_one(), tp: best.is_some() });
        }
    }
    (ranked, n_gt)
}

/// Precision/recall after each group of equal-score detections.
fn pr_points(mut ranked: Vec<Ranked>, n_gt: usize) -> Vec<(f64, f64)> {
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut pts = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (i, r) in ranked.iter().enumerate() {
        seen += 1;
        tp += r.tp as usize;
        if ranked.get(i + 1).map_or(true, |n| n.score != r.score) {
            pts.push((tp as f64 / seen as f64, tp as f64 / n_gt as f64));
        }
    }
    pts
}

fn area(pts: &[(f64, f64)], interp: Interpolation) -> f64 {
    match interp {
        Interpolation::AllPoint => {
            let mut env = vec![0.0; pts.len()];
            let mut run: f64 = 0.0;
            for k in (0..pts.len()).rev() {
                run = run.max(pts[k].0);
                env[k] = run;
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (k, &(_, r)) in pts.iter().enumerate() {
                ap += (r - prev_r) * env[k];
                prev_r = r;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let sum: f64 = (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    pts.iter().filter(|p| p.1 >= t).map(|p| p.0).fold(0.0, f64::max)
                })
                .sum();
            sum / 11.0
        }
    }
}

/// Single-class AP over several images; detections only match ground
/// truth of their own image.
pub fn average_precision_images(per_image: &[(&[BBox], &[BBox])], thresh: f64, interp: Interpolation) -> f64 {
    let (ranked, n_gt) = match_images(per_image, thresh);
    if n_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    area(&pr_points(ranked, n_gt), interp)
}

/// Single-class, single-image AP with all-point interpolation.
pub fn average_precision(detections: &[BBox], ground_truth: &[BBox], thresh: f64) -> f64 {
    average_precision_images(&[(detections, ground_truth)], thresh, Interpolation::AllPoint)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// AP per class, one entry per threshold.
    pub per_class: BTreeMap<usize, Vec<f64>>,
    /// AP per class at IoU 0.5.
    pub ap50: BTreeMap<usize, f64>,
    pub map50: f64,
    pub map_range: f64,
    /// Requested classes with no ground truth; left out of every mean.
    pub excluded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub step: usize,
    pub method: String,
    pub class: usize,
    pub threshold: f64,
    pub ap: f64,
}

impl EvalResult {
    /// Mean AP@0.5 over the given classes that were evaluated.
    pub fn map50_over(&self, classes: &[usize]) -> f64 {
        let v: Vec<f64> = classes.iter().filter_map(|c| self.ap50.get(c).copied()).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn rows(&self, step: usize, method: &str) -> Vec<ApRow> {
        self.per_class
            .iter()
            .flat_map(|(&class, aps)| {
                self.thresholds.iter().zip(aps).map(move |(&threshold, &ap)| ApRow {
                    step,
                    method: method.to_string(),
                    class,
                    threshold,
                    ap,
                })
            })
            .collect()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores per-image detections against complete ground truth for the
/// listed classes; other classes on either side are ignored.
pub fn evaluate_detections(
    detections: &[Vec<BBox>],
    ground_truth: &[Vec<BBox>],
    classes: &[usize],
    thresholds: &[f64],
    interp: Interpolation,
) -> Result<EvalResult> {
    if detections.len() != ground_truth.len() {
        return Err(Error::usage("detections and ground truth cover different image counts"));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::config("IoU thresholds must be a non-empty list within [0,1]"));
    }
    let mut per_class = BTreeMap::new();
    let mut ap50 = BTreeMap::new();
    let mut excluded = Vec::new();
    for &c in classes {
        let split = |v: &[BBox]| v.iter().filter(|b| b.class_id == c).copied().collect::<Vec<_>>();
        let d: Vec<Vec<BBox>> = detections.iter().map(|v| split(v)).collect();
        let g: Vec<Vec<BBox>> = ground_truth.iter().map(|v| split(v)).collect();
        if g.iter().all(Vec::is_empty) {
            excluded.push(c);
            continue;
        }
        let pairs: Vec<(&[BBox], &[BBox])> = d.iter().zip(&g).map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
        per_class.insert(c, thresholds.iter().map(|&t| average_precision_images(&pairs, t, interp)).collect::<Vec<_>>());
        ap50.insert(c, average_precision_images(&pairs, 0.5, interp));
    }
    Ok(EvalResult {
        thresholds: thresholds.to_vec(),
        map50: mean(ap50.values().copied()),
        map_range: mean(per_class.values().map(|v| mean(v.iter().copied()))),
        per_class,
        ap50,
        excluded,
    })
}

/// Decodes every test image with all task heads and scores the listed
/// classes.
pub fn evaluate_model(model: &Detector, test: &DatasetSplit, classes: &[usize], thresholds: &[f64]) -> Result<EvalResult> {
    let params = DecodeParams::default();
    let mut dets = Vec::with_capacity(test.samples.len());
    let tasks = model.all_tasks();
    for chunk in test.samples.chunks(16) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        dets.extend(model.infer(&imgs, &tasks)?.iter().map(|raw| decode(raw, &params)));
    }
    let gts: Vec<Vec<BBox>> = test.samples.iter().map(|s| s.boxes.clone()).collect();
    evaluate_detections(&dets, &gts, classes, thresholds, Interpolation::AllPoint)
}

/// Mean AP@0.5 drop of each step's old classes relative to the AP they
/// had at the end of the step that introduced them.
pub fn forgetting(per_step: &[EvalResult], step_classes: &[Vec<usize>]) -> Vec<Option<f64>> {
    per_step
        .iter()
        .enumerate()
        .map(|(s, res)| {
            let drops: Vec<f64> = step_classes[..s]
                .iter()
                .enumerate()
                .flat_map(|(t, cs)| cs.iter().map(move |c| (t, *c)))
                .filter_map(|(t, c)| Some(per_step[t].ap50.get(&c)? - res.ap50.get(&c)?))
                .collect();
            (!drops.is_empty()).then(|| mean(drops.into_iter()))
        })
        .collect()
}
