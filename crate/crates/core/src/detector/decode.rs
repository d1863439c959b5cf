use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::bbox::BBox;
use crate::detector::targets::pixel_center;
use crate::detector::RawOutputs;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { score_thresh: 0.05, nms_iou: 0.5, max_dets: 100 }
    }
}

/// Candidate before suppression; `pixel` is the global pixel index across
/// levels and drives deterministic tie-breaking.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    bbox: BBox,
    score: f64,
    pixel: usize,
}

fn rank(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.class_id.cmp(&b.bbox.class_id))
        .then(a.pixel.cmp(&b.pixel))
}

/// Turns dense outputs into scored boxes: score = σ(cls)·σ(ctr), boxes from
/// the side distances, class-wise greedy NMS over all heads pooled, then
/// the top `max_dets` by descending score.
pub fn decode(outputs: &RawOutputs, params: &DecodeParams) -> Vec<BBox> {
    let size = outputs.image_size as f64;
    let mut cands = Vec::new();
    let mut pixel_base = 0;
    for lv in &outputs.levels {
        let hw = lv.h * lv.w;
        for px in 0..hw {
            let ctr = sigmoid(lv.ctr[px]);
            let (cx, cy) = pixel_center(lv.stride, px / lv.w, px % lv.w);
            let (l, t, r, b) = (lv.ltrb[px], lv.ltrb[hw + px], lv.ltrb[2 * hw + px], lv.ltrb[3 * hw + px]);
            for head in &lv.cls {
                for c in 0..head.num_classes {
                    let score = sigmoid(head.logits[c * hw + px]) * ctr;
                    if score <= params.score_thresh {
                        continue;
                    }
                    let bbox = BBox::new(cx - l, cy - t, cx + r, cy + b, head.class_offset + c).clip(size);
                    if !bbox.is_valid() {
                        continue;
                    }
                    cands.push(Candidate { bbox: bbox.with_score(score), score, pixel: pixel_base + px });
                }
            }
        }
        pixel_base += hw;
    }
    let mut kept = nms_candidates(cands, params.nms_iou);
    kept.truncate(params.max_dets);
    kept.into_iter().map(|c| c.bbox).collect()
}

fn nms_candidates(mut cands: Vec<Candidate>, iou_thresh: f64) -> Vec<Candidate> {
    cands.sort_by(rank);
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        let suppressed = kept
            .iter()
            .any(|k| k.bbox.class_id == c.bbox.class_id && k.bbox.iou(&c.bbox) > iou_thresh);
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

/// Class-wise greedy NMS on scored boxes; input order breaks score ties.
pub fn nms(boxes: &[BBox], iou_thresh: f64) -> Vec<BBox> {
    let cands = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Candidate { bbox: *b, score: b.score_or_one(), pixel: i })
        .collect();
    nms_candidates(cands, iou_thresh).into_iter().map(|c| c.bbox).collect()
}
