use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bindings, Tape, Var};
use crate::detector::DetectorConfig;
use crate::dilation;
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

/// Initial bias of classification heads, giving a low initial foreground
/// probability (σ(−2) ≈ 0.12).
pub const CLS_HEAD_BIAS: f64 = -2.0;

/// Detector parameters plus the task layout of its classification heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParameterStore,
    /// Classes owned by each task head, in task order; class ids are
    /// assigned contiguously in this order.
    pub task_classes: Vec<usize>,
    /// Task branches with index ≥ this value run through dilatable adapters.
    pub adapters_from: Option<usize>,
}

/// Classification logits of one task head at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub task: usize,
    pub class_offset: usize,
    pub num_classes: usize,
    /// `[num_classes, h, w]`, row-major.
    pub logits: Vec<f64>,
}

/// Dense head outputs of one image at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub cls: Vec<HeadLogits>,
    /// Center-ness logits, `[h, w]`.
    pub ctr: Vec<f64>,
    /// Side distances in pixels, `[4, h, w]`, strictly positive.
    pub ltrb: Vec<f64>,
}

/// Dense head outputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutputs {
    pub image_size: usize,
    pub levels: Vec<LevelOutputs>,
}

#[derive(Clone, Debug)]
pub struct LevelVars {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// `(task, logits [N, k_task, h, w])`.
    pub cls: Vec<(usize, Var)>,
    pub ctr: Var,
    pub ltrb: Var,
}

/// Tape handles for a batched forward pass.
#[derive(Clone, Debug)]
pub struct OutputVars {
    pub batch: usize,
    pub levels: Vec<LevelVars>,
}

impl Detector {
    /// Fresh base model with a single classification head of `base_classes`.
    pub fn new(config: DetectorConfig, base_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if base_classes == 0 {
            return Err(Error::config("base task needs at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let c = config.channels;
        let mut cin = config.in_channels;
        for (i, &cout) in config.backbone_widths().iter().enumerate() {
            add_conv(&mut params, &format!("backbone.conv{}", i + 1), cout, cin, 3, relu_gain(), 0.0, &mut rng)?;
            cin = cout;
        }
        for level in 0..config.levels() {
            add_conv(&mut params, &format!("fpn.{level}.lateral"), c, c, 1, 1.0, 0.0, &mut rng)?;
        }
        for d in 0..config.tower_depth {
            add_conv(&mut params, &format!("cls_tower.{d}"), c, c, 3, relu_gain(), 0.0, &mut rng)?;
        }
        for d in 0..config.tower_depth {
            add_conv(&mut params, &format!("reg_tower.{d}"), c, c, 3, relu_gain(), 0.0, &mut rng)?;
        }
        add_conv(&mut params, "ctr_head", 1, c, 3, 1.0, 0.0, &mut rng)?;
        add_conv(&mut params, "reg_head", 4, c, 3, 1.0, 0.0, &mut rng)?;
        let mut det = Detector { config, params, task_classes: Vec::new(), adapters_from: None };
        det.add_task_head(base_classes, seed)?;
        Ok(det)
    }

    pub fn num_tasks(&self) -> usize {
        self.task_classes.len()
    }

    pub fn num_classes(&self) -> usize {
        self.task_classes.iter().sum()
    }

    pub fn class_offset(&self, task: usize) -> usize {
        self.task_classes[..task].iter().sum()
    }

    pub fn classes_of_task(&self, task: usize) -> std::ops::Range<usize> {
        let off = self.class_offset(task);
        off..off + self.task_classes[task]
    }

    pub fn task_of_class(&self, class_id: usize) -> Option<usize> {
        (0..self.num_tasks()).find(|&t| self.classes_of_task(t).contains(&class_id))
    }

    /// Appends a 3×3 classification head for the next task. Returns its index.
    pub fn add_task_head(&mut self, num_classes: usize, seed: u64) -> Result<usize> {
        if num_classes == 0 {
            return Err(Error::config("a task head needs at least one class"));
        }
        let task = self.task_classes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(task as u64 + 1)));
        add_conv(
            &mut self.params,
            &format!("cls_head.{task}"),
            num_classes,
            self.config.channels,
            3,
            1.0,
            CLS_HEAD_BIAS,
            &mut rng,
        )?;
        self.task_classes.push(num_classes);
        Ok(task)
    }

    pub fn uses_adapters(&self, task: usize) -> bool {
        self.adapters_from.is_some_and(|s| task >= s)
    }

    pub fn all_tasks(&self) -> Vec<usize> {
        (0..self.num_tasks()).collect()
    }

    /// Untracked forward over a batch of `[C, H, W]` images.
    pub fn infer(&self, images: &[&Tensor], active_tasks: &[usize]) -> Result<Vec<RawOutputs>> {
        let mut tape = Tape::new();
        let b = tape.bind_store(&self.params, |_| false);
        let x = tape.constant(stack_images(images)?);
        let out = forward(&mut tape, &b, self, x, active_tasks)?;
        Ok(out.extract(&tape, self))
    }
}

fn relu_gain() -> f64 {
    2f64.sqrt()
}

#[allow(clippy::too_many_arguments)]
fn add_conv(
    store: &mut ParameterStore,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
    bias: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let fan_in = (cin * k * k) as f64;
    store.insert(format!("{prefix}.weight"), Tensor::randn(&[cout, cin, k, k], gain / fan_in.sqrt(), rng))?;
    store.insert(format!("{prefix}.bias"), Tensor::full(&[cout], bias))?;
    Ok(())
}

/// Stacks `[C, H, W]` images into one `[N, C, H, W]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::usage("empty image batch"))?;
    let s = first.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::config(format!("images must be [C,H,W], got {s:?}")));
    }
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != s.as_slice() {
            return Err(Error::config("images in a batch must share a shape"));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), s[0], s[1], s[2]], data)
}

/// `conv(x, {prefix}.weight, {prefix}.bias)`.
pub fn conv_layer(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, bias, stride, pad)
}

/// Backbone plus pyramid: returns the per-level features `F_i`.
pub fn features(tape: &mut Tape, b: &Bindings, config: &DetectorConfig, image: Var) -> Result<Vec<Var>> {
    let widths = config.backbone_widths();
    let stem = widths.len() + 1 - config.levels();
    let mut x = image;
    let mut stages = Vec::with_capacity(config.levels());
    for i in 0..widths.len() {
        let y = conv_layer(tape, b, &format!("backbone.conv{}", i + 1), x, 2, 1)?;
        x = tape.relu(y);
        if i + 1 >= stem {
            stages.push(x);
        }
    }
    let mut feats: Vec<Var> = Vec::with_capacity(stages.len());
    for (level, &stage) in stages.iter().enumerate() {
        feats.push(conv_layer(tape, b, &format!("fpn.{level}.lateral"), stage, 1, 0)?);
    }
    for level in (0..feats.len().saturating_sub(1)).rev() {
        let up = tape.upsample2x(feats[level + 1])?;
        feats[level] = tape.add(feats[level], up)?;
    }
    Ok(feats)
}

/// Shared classification tower `CONV_CH`.
pub fn cls_tower(tape: &mut Tape, b: &Bindings, config: &DetectorConfig, x: Var) -> Result<Var> {
    tower(tape, b, "cls_tower", config.tower_depth, x)
}

fn tower(tape: &mut Tape, b: &Bindings, name: &str, depth: usize, mut x: Var) -> Result<Var> {
    for d in 0..depth {
        let y = conv_layer(tape, b, &format!("{name}.{d}"), x, 1, 1)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Full forward pass over a `[N, C, H, W]` batch, evaluating the
/// classification branches of `active_tasks` and the shared regression path.
pub fn forward(tape: &mut Tape, b: &Bindings, det: &Detector, image: Var, active_tasks: &[usize]) -> Result<OutputVars> {
    for &t in active_tasks {
        if t >= det.num_tasks() {
            return Err(Error::config(format!("task {t} has no classification head")));
        }
    }
    let batch = tape.shape(image)[0];
    let feats = features(tape, b, &det.config, image)?;
    let branch_logits = dilation::all_branches_forward(tape, b, det, &feats, active_tasks)?;
    let mut levels = Vec::with_capacity(feats.len());
    for (level, &f) in feats.iter().enumerate() {
        let reg = tower(tape, b, "reg_tower", det.config.tower_depth, f)?;
        let ctr = conv_layer(tape, b, "ctr_head", reg, 1, 1)?;
        let raw = conv_layer(tape, b, "reg_head", reg, 1, 1)?;
        let e = tape.exp(raw);
        let stride = det.config.strides[level];
        let ltrb = tape.scale(e, stride as f64);
        let s = tape.shape(ctr).to_vec();
        let cls = active_tasks.iter().zip(&branch_logits).map(|(&t, per_level)| (t, per_level[level])).collect();
        levels.push(LevelVars { stride, h: s[2], w: s[3], cls, ctr, ltrb });
    }
    Ok(OutputVars { batch, levels })
}

impl OutputVars {
    /// Copies per-image dense outputs off the tape.
    pub fn extract(&self, tape: &Tape, det: &Detector) -> Vec<RawOutputs> {
        (0..self.batch)
            .map(|n| RawOutputs {
                image_size: det.config.image_size,
                levels: self
                    .levels
                    .iter()
                    .map(|lv| {
                        let hw = lv.h * lv.w;
                        LevelOutputs {
                            stride: lv.stride,
                            h: lv.h,
                            w: lv.w,
                            cls: lv
                                .cls
                                .iter()
                                .map(|&(task, v)| {
                                    let k = det.task_classes[task];
                                    HeadLogits {
                                        task,
                                        class_offset: det.class_offset(task),
                                        num_classes: k,
                                        logits: tape.data(v)[n * k * hw..(n + 1) * k * hw].to_vec(),
                                    }
                                })
                                .collect(),
                            ctr: tape.data(lv.ctr)[n * hw..(n + 1) * hw].to_vec(),
                            ltrb: tape.data(lv.ltrb)[n * 4 * hw..(n + 1) * 4 * hw].to_vec(),
                        }
                    })
                    .collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn output_shapes() {
        let det = Detector::new(DetectorConfig::default(), 4, 1).unwrap();
        let img = image(2);
        let out = det.infer(&[&img], &[0]).unwrap();
        assert_eq!(out.len(), 1);
        let lv = &out[0].levels;
        assert_eq!((lv[0].h, lv[0].w, lv[1].h, lv[1].w), (8, 8, 4, 4));
        assert_eq!(lv[0].cls[0].logits.len(), 4 * 64);
        assert_eq!(lv[1].ltrb.len(), 4 * 16);
        assert!(lv.iter().all(|l| l.ltrb.iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn zero_weight_heads_emit_bias() {
        let mut det = Detector::new(DetectorConfig::default(), 3, 1).unwrap();
        det.params.get_mut("cls_head.0.weight").unwrap().data_mut().fill(0.0);
        let out = det.infer(&[&image(3)], &[0]).unwrap();
        for lv in &out[0].levels {
            assert!(lv.cls[0].logits.iter().all(|&v| v == CLS_HEAD_BIAS));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let det = Detector::new(DetectorConfig::default(), 2, 9).unwrap();
        let img = image(4);
        let a = det.infer(&[&img], &[0]).unwrap();
        let b = det.infer(&[&img], &[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_task_is_config_error() {
        let det = Detector::new(DetectorConfig::default(), 2, 9).unwrap();
        assert!(matches!(det.infer(&[&image(1)], &[0, 1]), Err(Error::Config(_))));
    }

    #[test]
    fn batched_matches_single() {
        let det = Detector::new(DetectorConfig::default(), 2, 5).unwrap();
        let (a, b) = (image(10), image(11));
        let both = det.infer(&[&a, &b], &[0]).unwrap();
        let single = det.infer(&[&b], &[0]).unwrap();
        for (x, y) in both[1].levels[0].cls[0].logits.iter().zip(&single[0].levels[0].cls[0].logits) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn task_class_layout() {
        let mut det = Detector::new(DetectorConfig::default(), 4, 5).unwrap();
        det.add_task_head(2, 5).unwrap();
        det.add_task_head(2, 5).unwrap();
        assert_eq!(det.classes_of_task(1), 4..6);
        assert_eq!(det.task_of_class(7), Some(2));
        assert_eq!(det.num_classes(), 8);
    }
}
