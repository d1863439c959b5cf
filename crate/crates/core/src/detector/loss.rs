use crate::autodiff::{Tape, Var};
use crate::detector::{Detector, OutputVars, TargetMap};
use crate::error::{Error, Result};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Focal classification loss over every active head and pixel, plus IoU
/// and center-ness losses averaged over positive pixels. All terms share
/// the normaliser `max(1, #positives)`. Regression and center-ness
/// weights are zero at non-positive pixels.
pub fn detection_loss(tape: &mut Tape, det: &Detector, outputs: &OutputVars, targets: &[TargetMap]) -> Result<Var> {
    let n = outputs.batch;
    if targets.len() != n {
        return Err(Error::config(format!("{} target maps for a batch of {n}", targets.len())));
    }
    if targets.iter().any(|t| t.levels.len() != outputs.levels.len()) {
        return Err(Error::config("target map level count differs from outputs"));
    }
    let positives: usize = targets.iter().map(TargetMap::num_positive).sum();
    let norm = 1.0 / (positives.max(1) as f64);
    let mut terms = Vec::new();
    for (level, lv) in outputs.levels.iter().enumerate() {
        let hw = lv.h * lv.w;
        for tm in targets {
            let lt = &tm.levels[level];
            if lt.h != lv.h || lt.w != lv.w {
                return Err(Error::config("target map resolution differs from outputs"));
            }
        }
        for &(task, logits) in &lv.cls {
            let k = det.task_classes[task];
            let offset = det.class_offset(task);
            let mut t = vec![0.0; n * k * hw];
            for (ni, tm) in targets.iter().enumerate() {
                for (px, label) in tm.levels[level].label.iter().enumerate() {
                    if let Some(c) = *label {
                        if (offset..offset + k).contains(&c) {
                            t[(ni * k + c - offset) * hw + px] = 1.0;
                        }
                    }
                }
            }
            terms.push(tape.focal_loss(logits, t, FOCAL_ALPHA, FOCAL_GAMMA, norm)?);
        }
        let mut weights = vec![0.0; n * hw];
        let mut ctr_t = vec![0.0; n * hw];
        let mut ltrb_t = vec![0.0; n * 4 * hw];
        for (ni, tm) in targets.iter().enumerate() {
            let lt = &tm.levels[level];
            for px in 0..hw {
                if lt.is_positive(px) {
                    weights[ni * hw + px] = norm;
                    ctr_t[ni * hw + px] = lt.centerness[px];
                    for c in 0..4 {
                        ltrb_t[(ni * 4 + c) * hw + px] = lt.ltrb[px][c];
                    }
                }
            }
        }
        terms.push(tape.iou_loss(lv.ltrb, ltrb_t, weights.clone())?);
        terms.push(tape.bce_logits(lv.ctr, ctr_t, weights)?);
    }
    let loss = tape.add_all(&terms)?;
    let v = tape.data(loss)[0];
    if !v.is_finite() {
        return Err(Error::Explosion { param: "detection_loss".into(), detail: format!("loss is {v}") });
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ltrb_iou, Bindings};
    use crate::bbox::BBox;
    use crate::detector::{assign_targets, forward, DetectorConfig, LevelVars};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    /// Builds output leaves directly so the loss can be probed in isolation.
    fn manual_outputs(
        tape: &mut Tape,
        cfg: &DetectorConfig,
        det: &Detector,
        fill: impl Fn(usize, &str, usize) -> f64,
    ) -> OutputVars {
        let mut levels = Vec::new();
        for (level, &stride) in cfg.strides.iter().enumerate() {
            let h = cfg.feature_size(level);
            let hw = h * h;
            let k = det.task_classes[0];
            let cls = Tensor::new(vec![1, k, h, h], (0..k * hw).map(|i| fill(level, "cls", i)).collect()).unwrap();
            let ctr = Tensor::new(vec![1, 1, h, h], (0..hw).map(|i| fill(level, "ctr", i)).collect()).unwrap();
            let ltrb = Tensor::new(vec![1, 4, h, h], (0..4 * hw).map(|i| fill(level, "ltrb", i)).collect()).unwrap();
            let cls = tape.leaf(cls, true);
            let ctr = tape.leaf(ctr, true);
            let ltrb = tape.leaf(ltrb, true);
            levels.push(LevelVars { stride, h, w: h, cls: vec![(0, cls)], ctr, ltrb });
        }
        OutputVars { batch: 1, levels }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let cfg = DetectorConfig::default();
        let det = Detector::new(cfg.clone(), 2, 0).unwrap();
        let boxes = [BBox::new(4.0, 4.0, 22.0, 20.0, 0), BBox::new(30.0, 34.0, 60.0, 62.0, 1)];
        let tm = assign_targets(&boxes, &cfg).unwrap();
        assert!(tm.num_positive() > 0);
        let mut tape = Tape::new();
        let out = manual_outputs(&mut tape, &cfg, &det, |level, what, i| {
            let lt = &tm.levels[level];
            let hw = lt.h * lt.w;
            match what {
                "cls" => {
                    let (c, px) = (i / hw, i % hw);
                    if lt.label[px] == Some(c) { 30.0 } else { -30.0 }
                }
                "ctr" => {
                    let c = lt.centerness[i];
                    if lt.is_positive(i) { logit(c.clamp(1e-12, 1.0 - 1e-12)) } else { 0.0 }
                }
                _ => {
                    let (c, px) = (i / hw, i % hw);
                    if lt.is_positive(px) { lt.ltrb[px][c] } else { 1.0 }
                }
            }
        });
        let loss = detection_loss(&mut tape, &det, &out, &[tm]).unwrap();
        assert!(tape.data(loss)[0] <= 1e-3, "loss {}", tape.data(loss)[0]);
    }

    #[test]
    fn background_only_uses_focal_term() {
        let cfg = DetectorConfig::default();
        let det = Detector::new(cfg.clone(), 2, 0).unwrap();
        let tm = assign_targets(&[], &cfg).unwrap();
        let mut tape = Tape::new();
        let out = manual_outputs(&mut tape, &cfg, &det, |_, what, _| if what == "cls" { -1.0 } else { 0.7 });
        let loss = detection_loss(&mut tape, &det, &out, &[tm]).unwrap();
        // all-background focal value computed by hand: every logit is −1
        let p = 1.0 / (1.0 + 1f64.exp());
        let per = -(1.0 - FOCAL_ALPHA) * p * p * (1.0 - p).ln();
        let count = 2 * (64 + 16);
        assert!((tape.data(loss)[0] - per * count as f64).abs() < 1e-12);
        tape.backward(loss).unwrap();
        for lv in &out.levels {
            assert!(tape.grad(lv.ctr).unwrap().iter().all(|&g| g == 0.0));
            assert!(tape.grad(lv.ltrb).unwrap().iter().all(|&g| g == 0.0));
        }
    }

    /// Independent box-overlap oracle on explicit corner coordinates.
    fn corner_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
        BBox::new(a[0], a[1], a[2], a[3], 0).iou(&BBox::new(b[0], b[1], b[2], b[3], 0))
    }

    #[test]
    fn doubled_prediction_iou_term() {
        let cfg = DetectorConfig::default();
        let det = Detector::new(cfg.clone(), 1, 0).unwrap();
        // single square box centred on level-0 pixel (2, 2) at (20, 20), sides 6
        let tm = assign_targets(&[BBox::new(14.0, 14.0, 26.0, 26.0, 0)], &cfg).unwrap();
        assert_eq!(tm.num_positive(), 1);
        let mut tape = Tape::new();
        let out = manual_outputs(&mut tape, &cfg, &det, |level, what, i| match what {
            "cls" => -40.0,
            "ctr" => 40.0,
            _ => {
                let lt = &tm.levels[level];
                let px = i % (lt.h * lt.w);
                if lt.is_positive(px) { 2.0 * lt.ltrb[px][i / (lt.h * lt.w)] } else { 1.0 }
            }
        });
        let before = tape.len();
        let loss = detection_loss(&mut tape, &det, &out, &[tm.clone()]).unwrap();
        assert!(tape.len() > before);
        let oracle = 1.0 - corner_iou([8.0, 8.0, 32.0, 32.0], [14.0, 14.0, 26.0, 26.0]);
        assert!((oracle - 0.75).abs() < 1e-15);
        assert!((ltrb_iou(&[12.0; 4], &[6.0; 4]) - 0.25).abs() < 1e-15);
        // isolate the IoU term: recompute with exact regression and compare
        let mut tape2 = Tape::new();
        let out2 = manual_outputs(&mut tape2, &cfg, &det, |level, what, i| match what {
            "cls" => -40.0,
            "ctr" => 40.0,
            _ => {
                let lt = &tm.levels[level];
                let px = i % (lt.h * lt.w);
                if lt.is_positive(px) { lt.ltrb[px][i / (lt.h * lt.w)] } else { 1.0 }
            }
        });
        let loss2 = detection_loss(&mut tape2, &det, &out2, &[tm]).unwrap();
        let diff = tape.data(loss)[0] - tape2.data(loss2)[0];
        assert!((diff - oracle).abs() < 1e-12, "diff {diff}");
    }

    #[test]
    fn loss_is_nonnegative_on_real_forward() {
        let cfg = DetectorConfig::default();
        let det = Detector::new(cfg.clone(), 3, 7).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[1, 1, 64, 64], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let b: Bindings = tape.bind_store(&det.params, |_| true);
        let x = tape.constant(img);
        let out = forward(&mut tape, &b, &det, x, &[0]).unwrap();
        let tm = assign_targets(&[BBox::new(10.0, 12.0, 30.0, 28.0, 2)], &cfg).unwrap();
        let loss = detection_loss(&mut tape, &det, &out, &[tm]).unwrap();
        assert!(tape.data(loss)[0] >= 0.0);
        tape.backward(loss).unwrap();
        let g = tape.grad(b.get("backbone.conv1.weight").unwrap()).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
