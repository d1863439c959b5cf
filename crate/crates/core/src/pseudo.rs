//! Old-class pseudo annotation from the frozen previous-step model.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::detector::{decode, DecodeParams, Detector, RawOutputs};
use crate::error::{Error, Result};
use crate::scenario::{AnnotatedBox, AnnotationRecord};
use crate::tensor::Tensor;

pub const DEFAULT_CONFIDENCE: f64 = 0.5;
pub const PSEUDO_SOURCE: &str = "pseudo";

fn params(conf: f64, nms_iou: f64) -> Result<DecodeParams> {
    if !(conf > 0.0 && conf < 1.0) {
        return Err(Error::config(format!("pseudo confidence must be in (0,1), got {conf}")));
    }
    Ok(DecodeParams { score_thresh: conf, nms_iou, ..DecodeParams::default() })
}

/// Decodes already computed outputs of old heads at threshold `conf`.
pub fn pseudo_from_outputs(outputs: &RawOutputs, conf: f64, nms_iou: f64) -> Result<Vec<BBox>> {
    Ok(decode(outputs, &params(conf, nms_iou)?))
}

/// Boxes of every task head of `old_model` scoring above `conf`.
pub fn generate_pseudo(old_model: &Detector, image: &Tensor, conf: f64, nms_iou: f64) -> Result<Vec<BBox>> {
    Ok(generate_pseudo_batch(old_model, &[image], conf, nms_iou)?.pop().unwrap_or_default())
}

pub fn generate_pseudo_batch(old_model: &Detector, images: &[&Tensor], conf: f64, nms_iou: f64) -> Result<Vec<Vec<BBox>>> {
    let p = params(conf, nms_iou)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        for raw in old_model.infer(chunk, &old_model.all_tasks())? {
            out.push(decode(&raw, &p));
        }
    }
    Ok(out)
}

/// Current-step ground truth followed by old-class pseudo boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedAnnotationSet {
    pub image: String,
    pub gt_new: Vec<BBox>,
    pub pseudo_old: Vec<BBox>,
}

impl MergedAnnotationSet {
    pub fn len(&self) -> usize {
        self.gt_new.len() + self.pseudo_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training boxes; both sources are treated identically.
    pub fn boxes(&self) -> Vec<BBox> {
        self.gt_new.iter().chain(&self.pseudo_old).map(|b| BBox { score: None, ..*b }).collect()
    }

    pub fn to_record(&self) -> AnnotationRecord {
        let mut rec = AnnotationRecord::ground_truth(self.image.clone(), &self.gt_new);
        rec.boxes
            .extend(self.pseudo_old.iter().map(|&bbox| AnnotatedBox { bbox, source: Some(PSEUDO_SOURCE.into()) }));
        rec
    }
}

pub fn merge_annotations(image: impl Into<String>, gt_new: &[BBox], pseudo_old: &[BBox]) -> Result<MergedAnnotationSet> {
    if let Some(b) = pseudo_old.iter().find(|p| gt_new.iter().any(|g| g.class_id == p.class_id)) {
        return Err(Error::Protocol(format!("pseudo class {} also appears in the new ground truth", b.class_id)));
    }
    Ok(MergedAnnotationSet { image: image.into(), gt_new: gt_new.to_vec(), pseudo_old: pseudo_old.to_vec() })
}
