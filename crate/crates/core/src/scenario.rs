//! Procedural shape scenes and class-incremental protocol construction.
//!
//! Every image draws from its own ChaCha stream keyed by (seed, split,
//! index), so a corpus is reproducible and order-independent. Geometry is
//! integer-valued and boxes are the exact extent of each object's mask.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_SCENE_ATTEMPTS: usize = 1000;
/// Positions tried for one object before the whole scene is redrawn.
pub const MAX_OBJECT_ATTEMPTS: usize = 200;
const BACKGROUND: f64 = 0.1;
const FOREGROUND: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Cross,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Hollow,
    Solid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub shape: Shape,
    pub fill: Fill,
}

impl ShapeClass {
    pub fn name(&self) -> String {
        let s = serde_json::to_value(self.shape).expect("enum serializes");
        let f = serde_json::to_value(self.fill).expect("enum serializes");
        format!("{}-{}", s.as_str().unwrap_or_default(), f.as_str().unwrap_or_default())
    }
}

/// Shape × fill classes in alphabetical order of their names.
pub fn default_vocabulary() -> Vec<ShapeClass> {
    let mut v: Vec<ShapeClass> = [Shape::Circle, Shape::Cross, Shape::Square, Shape::Triangle]
        .into_iter()
        .flat_map(|shape| [Fill::Hollow, Fill::Solid].into_iter().map(move |fill| ShapeClass { shape, fill }))
        .collect();
    v.sort_by_key(ShapeClass::name);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub vocabulary: Vec<ShapeClass>,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side as a fraction of the image side, inclusive range.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest allowed IoU between any two object boxes.
    pub occlusion: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            vocabulary: default_vocabulary(),
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            min_size: 0.38,
            max_size: 0.5,
            occlusion: 0.1,
            noise: 0.03,
        }
    }
}

impl SceneSpec {
    pub fn size_range_px(&self) -> (usize, usize) {
        let px = |f: f64| (f * self.image_size as f64).round() as usize;
        (px(self.min_size), px(self.max_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("objects per image must satisfy 1 ≤ min ≤ max"));
        }
        let (lo, hi) = self.size_range_px();
        if lo < 4 || lo > hi || hi > self.image_size {
            return Err(Error::config(format!("object size range {lo}..={hi} px does not fit the image")));
        }
        if !(0.0..=1.0).contains(&self.occlusion) || !(self.noise >= 0.0) {
            return Err(Error::config("occlusion must be in [0,1] and noise nonnegative"));
        }
        Ok(())
    }
}

/// Object placed on the integer grid: the box is `[x, x+size) × [y, y+size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub class_id: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` with values on the 8-bit grid in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

/// Which classes a scene may contain.
#[derive(Clone, Debug)]
pub struct ClassPlan {
    /// Always rendered as the first object.
    pub primary: usize,
    /// Classes for the remaining objects.
    pub pool: Vec<usize>,
    /// When non-empty, one object is drawn from here.
    pub old: Vec<usize>,
    /// When non-empty, one object is drawn from here.
    pub future: Vec<usize>,
}

fn shape_mask(shape: Shape, s: usize) -> Vec<bool> {
    let si = s as i64;
    let arm = (s / 3).max(2);
    let lo = (s - arm) / 2;
    (0..s * s)
        .map(|i| {
            let (v, u) = ((i / s) as i64, (i % s) as i64);
            match shape {
                Shape::Square => true,
                Shape::Circle => {
                    let (du, dv) = (2 * u + 1 - si, 2 * v + 1 - si);
                    du * du + dv * dv <= si * si
                }
                Shape::Cross => {
                    let inside = |c: i64| c >= lo as i64 && c < (lo + arm) as i64;
                    inside(u) || inside(v)
                }
                Shape::Triangle => (2 * u + 1 - si).abs() <= v + 1,
            }
        })
        .collect()
}

/// Keeps mask pixels within Chebyshev distance `t` of the mask boundary.
fn outline(mask: &[bool], s: usize, t: usize) -> Vec<bool> {
    let at = |u: i64, v: i64| u >= 0 && v >= 0 && (u as usize) < s && (v as usize) < s && mask[v as usize * s + u as usize];
    let t = t as i64;
    (0..s * s)
        .map(|i| {
            let (v, u) = ((i / s) as i64, (i % s) as i64);
            mask[i] && !(-t..=t).all(|dv| (-t..=t).all(|du| at(u + du, v + dv)))
        })
        .collect()
}

pub fn object_mask(class: ShapeClass, s: usize) -> Vec<bool> {
    let m = shape_mask(class.shape, s);
    match class.fill {
        Fill::Solid => m,
        Fill::Hollow => outline(&m, s, (s / 8).max(2)),
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Paints the placements in order, adds noise, and returns the image with
/// one box per object taken from the extent of its mask.
pub fn render_placements(spec: &SceneSpec, placements: &[Placement], rng: &mut impl Rng) -> Result<Sample> {
    let n = spec.image_size;
    let mut canvas = vec![BACKGROUND; n * n];
    let mut boxes = Vec::with_capacity(placements.len());
    for p in placements {
        let class = *spec
            .vocabulary
            .get(p.class_id)
            .ok_or_else(|| Error::Generation(format!("class {} is not in the vocabulary", p.class_id)))?;
        if p.size == 0 || p.x + p.size > n || p.y + p.size > n {
            return Err(Error::Generation(format!("object {p:?} leaves the image")));
        }
        let mask = object_mask(class, p.size);
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (p.x + i % p.size, p.y + i / p.size);
            canvas[y * n + x] = FOREGROUND;
            (x1, y1, x2, y2) = (x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1));
        }
        boxes.push(BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64, p.class_id));
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
        for v in canvas.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let data = canvas.into_iter().map(quantize).collect();
    Ok(Sample { image: Tensor::new(vec![1, n, n], data)?, boxes })
}

/// Rejection-samples sizes and positions until every pair of objects
/// respects the occlusion allowance, then renders.
pub fn render_scene(spec: &SceneSpec, plan: &ClassPlan, rng: &mut impl Rng) -> Result<Sample> {
    spec.validate()?;
    let extras: Vec<&Vec<usize>> = [&plan.old, &plan.future].into_iter().filter(|v| !v.is_empty()).collect();
    let count = rng.gen_range(spec.min_objects..=spec.max_objects).max(1 + extras.len());
    let mut classes = vec![plan.primary];
    for i in 1..count {
        let from = extras.get(i - 1).copied().unwrap_or(&plan.pool);
        classes.push(from[rng.gen_range(0..from.len())]);
    }
    let (lo, hi) = spec.size_range_px();
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let mut placed: Vec<Placement> = Vec::with_capacity(count);
        let mut ok = true;
        for &class_id in &classes {
            let fits = (0..MAX_OBJECT_ATTEMPTS).find_map(|_| {
                let size = rng.gen_range(lo..=hi);
                let x = rng.gen_range(0..=spec.image_size - size);
                let y = rng.gen_range(0..=spec.image_size - size);
                let p = Placement { class_id, x, y, size };
                let b = placement_box(&p);
                (!placed.iter().any(|q| placement_box(q).iou(&b) > spec.occlusion)).then_some(p)
            });
            match fits {
                Some(p) => placed.push(p),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return render_placements(spec, &placed, rng);
        }
    }
    Err(Error::Generation(format!(
        "could not place {count} objects within {MAX_SCENE_ATTEMPTS} attempts; loosen sizes or occlusion"
    )))
}

fn placement_box(p: &Placement) -> BBox {
    BBox::new(p.x as f64, p.y as f64, (p.x + p.size) as f64, (p.y + p.size) as f64, p.class_id)
}

/// Keeps exactly the boxes whose class is in `classes`, in order.
pub fn mask_annotations(full: &[BBox], classes: &[usize]) -> Vec<BBox> {
    full.iter().filter(|b| classes.contains(&b.class_id)).copied().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    pub scene: SceneSpec,
    /// Class count per step; the first entry is the base task.
    pub step_sizes: Vec<usize>,
    pub train_per_step: usize,
    pub test_size: usize,
    /// Chance that a step image also shows an (unannotated) old class.
    pub old_object_prob: f64,
    /// Chance that a step image also shows an (unannotated) class of a
    /// later step, which the model must learn to treat as background.
    pub future_object_prob: f64,
    pub seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            scene: SceneSpec::default(),
            step_sizes: vec![4, 2, 2],
            train_per_step: 512,
            test_size: 128,
            old_object_prob: 0.5,
            future_object_prob: 1.0,
            seed: 0,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.step_sizes.is_empty() || self.step_sizes.contains(&0) {
            return Err(Error::config("step sizes must be a non-empty list of positive counts"));
        }
        let total: usize = self.step_sizes.iter().sum();
        if total != self.scene.vocabulary.len() {
            return Err(Error::config(format!(
                "step sizes sum to {total} but the vocabulary has {} classes",
                self.scene.vocabulary.len()
            )));
        }
        if self.train_per_step == 0 || self.test_size == 0 {
            return Err(Error::config("split sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.old_object_prob) || !(0.0..=1.0).contains(&self.future_object_prob) {
            return Err(Error::config("co-rendering probabilities must be in [0,1]"));
        }
        Ok(())
    }

    /// Class ids introduced at each step, in vocabulary order.
    pub fn step_classes(&self) -> Vec<Vec<usize>> {
        let mut start = 0;
        self.step_sizes
            .iter()
            .map(|&k| {
                let r = (start..start + k).collect();
                start += k;
                r
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train(usize),
    Test,
}

impl SplitRole {
    fn stream(self, index: usize) -> u64 {
        let role = match self {
            SplitRole::Test => 0,
            SplitRole::Train(s) => s as u64 + 1,
        };
        (role << 32) | index as u64
    }

    pub fn dir_name(self) -> String {
        match self {
            SplitRole::Test => "test".into(),
            SplitRole::Train(s) => format!("train-step-{s}"),
        }
    }
}

pub fn image_rng(seed: u64, role: SplitRole, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role.stream(index));
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub samples: Vec<Sample>,
}

/// A materialised protocol. Training splits carry only current-step
/// annotations; the complete training annotations are held apart and are
/// reachable only through [`TaskProtocol::withheld_annotations`].
#[derive(Clone, Debug)]
pub struct TaskProtocol {
    pub spec: ProtocolSpec,
    pub class_names: Vec<String>,
    pub steps: Vec<Vec<usize>>,
    pub train: Vec<DatasetSplit>,
    pub test: DatasetSplit,
    withheld: Vec<Vec<Vec<BBox>>>,
}

impl TaskProtocol {
    pub fn build(spec: &ProtocolSpec) -> Result<Self> {
        spec.validate()?;
        let steps = spec.step_classes();
        let mut train = Vec::with_capacity(steps.len());
        let mut withheld = Vec::with_capacity(steps.len());
        for (s, classes) in steps.iter().enumerate() {
            let old: Vec<usize> = steps[..s].iter().flatten().copied().collect();
            let future: Vec<usize> = steps[s + 1..].iter().flatten().copied().collect();
            let role = SplitRole::Train(s);
            let mut samples = Vec::with_capacity(spec.train_per_step);
            let mut full = Vec::with_capacity(spec.train_per_step);
            for i in 0..spec.train_per_step {
                let mut rng = image_rng(spec.seed, role, i);
                let with_old = !old.is_empty() && rng.gen_bool(spec.old_object_prob);
                let with_future = !future.is_empty() && rng.gen_bool(spec.future_object_prob);
                let plan = ClassPlan {
                    primary: classes[i % classes.len()],
                    pool: classes.clone(),
                    old: if with_old { old.clone() } else { Vec::new() },
                    future: if with_future { future.clone() } else { Vec::new() },
                };
                let scene = render_scene(&spec.scene, &plan, &mut rng)?;
                full.push(scene.boxes.clone());
                samples.push(Sample { boxes: mask_annotations(&scene.boxes, classes), image: scene.image });
            }
            train.push(DatasetSplit { role, samples });
            withheld.push(full);
        }
        let all: Vec<usize> = (0..spec.scene.vocabulary.len()).collect();
        let test = DatasetSplit {
            role: SplitRole::Test,
            samples: (0..spec.test_size)
                .map(|i| {
                    let mut rng = image_rng(spec.seed, SplitRole::Test, i);
                    let plan = ClassPlan { primary: all[i % all.len()], pool: all.clone(), old: Vec::new(), future: Vec::new() };
                    render_scene(&spec.scene, &plan, &mut rng)
                })
                .collect::<Result<_>>()?,
        };
        Ok(TaskProtocol {
            spec: spec.clone(),
            class_names: spec.scene.vocabulary.iter().map(ShapeClass::name).collect(),
            steps,
            train,
            test,
            withheld,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Classes introduced at or before `step`.
    pub fn seen_classes(&self, step: usize) -> Vec<usize> {
        self.steps[..=step].iter().flatten().copied().collect()
    }

    /// Unmasked annotations of a training split, for evaluation and
    /// oracles only.
    pub fn withheld_annotations(&self, step: usize) -> &[Vec<BBox>] {
        &self.withheld[step]
    }

    /// Writes PNG images and one annotation file per split, with the
    /// complete training annotations under `test-only/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("protocol.json"), serde_json::to_string_pretty(&self.spec)?)?;
        for split in self.train.iter().chain(std::iter::once(&self.test)) {
            write_split(&dir.join(split.role.dir_name()), split)?;
        }
        let only = dir.join("test-only");
        fs::create_dir_all(&only)?;
        for (s, full) in self.withheld.iter().enumerate() {
            let records: Vec<AnnotationRecord> = full
                .iter()
                .enumerate()
                .map(|(i, boxes)| AnnotationRecord::ground_truth(image_file(i), boxes))
                .collect();
            fs::write(only.join(format!("train-step-{s}-full.json")), serde_json::to_string_pretty(&records)?)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`TaskProtocol::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let spec: ProtocolSpec = serde_json::from_str(&fs::read_to_string(dir.join("protocol.json"))?)?;
        spec.validate()?;
        let steps = spec.step_classes();
        let mut train = Vec::new();
        let mut withheld = Vec::new();
        for s in 0..steps.len() {
            train.push(read_split(&dir.join(SplitRole::Train(s).dir_name()), SplitRole::Train(s))?);
            let full: Vec<AnnotationRecord> =
                serde_json::from_str(&fs::read_to_string(dir.join("test-only").join(format!("train-step-{s}-full.json")))?)?;
            withheld.push(full.into_iter().map(|r| r.boxes.into_iter().map(|b| b.bbox).collect()).collect());
        }
        let test = read_split(&dir.join("test"), SplitRole::Test)?;
        Ok(TaskProtocol {
            class_names: spec.scene.vocabulary.iter().map(ShapeClass::name).collect(),
            spec,
            steps,
            train,
            test,
            withheld,
        })
    }
}

/// Box as stored on disk; pseudo labels add a `source` marker and a score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub boxes: Vec<AnnotatedBox>,
}

impl AnnotationRecord {
    pub fn ground_truth(image: String, boxes: &[BBox]) -> Self {
        AnnotationRecord { image, boxes: boxes.iter().map(|&bbox| AnnotatedBox { bbox, source: None }).collect() }
    }
}

fn image_file(i: usize) -> String {
    format!("{i:05}.png")
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::Format(format!("expected a [1,H,W] image, got {s:?}"))),
    };
    let px: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, px).expect("buffer sized from shape");
    img.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(split.samples.len());
    for (i, s) in split.samples.iter().enumerate() {
        save_png(&s.image, &dir.join(image_file(i)))?;
        records.push(AnnotationRecord::ground_truth(image_file(i), &s.boxes));
    }
    fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

fn read_split(dir: &Path, role: SplitRole) -> Result<DatasetSplit> {
    let records: Vec<AnnotationRecord> = serde_json::from_str(&fs::read_to_string(dir.join("annotations.json"))?)?;
    let samples = records
        .into_iter()
        .map(|r| {
            Ok(Sample {
                image: load_png(&dir.join(&r.image))?,
                boxes: r.boxes.into_iter().map(|b| b.bbox).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DatasetSplit { role, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(step_sizes: Vec<usize>) -> ProtocolSpec {
        ProtocolSpec { step_sizes, train_per_step: 24, test_size: 16, seed: 3, ..Default::default() }
    }

    #[test]
    fn vocabulary_is_alphabetical() {
        let names: Vec<String> = default_vocabulary().iter().map(ShapeClass::name).collect();
        assert_eq!(names.len(), 8);
        assert_eq!(names[0], "circle-hollow");
        assert_eq!(names[7], "triangle-solid");
        assert!(names.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn square_geometry() {
        let spec = SceneSpec { noise: 0.0, ..Default::default() };
        let solid_square = spec.vocabulary.iter().position(|c| c.name() == "square-solid").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = render_placements(&spec, &[Placement { class_id: solid_square, x: 10, y: 10, size: 16 }], &mut rng).unwrap();
        assert_eq!(s.boxes, vec![BBox::new(10.0, 10.0, 26.0, 26.0, solid_square)]);
        let img = s.image.data();
        assert_eq!(img[10 * 64 + 10], quantize(FOREGROUND));
        assert_eq!(img[9 * 64 + 10], quantize(BACKGROUND));
    }

    #[test]
    fn every_mask_spans_its_box() {
        for class in default_vocabulary() {
            for s in [13, 19, 24, 32] {
                let m = object_mask(class, s);
                let rows = (0..s).filter(|v| (0..s).any(|u| m[v * s + u])).count();
                let cols = (0..s).filter(|u| (0..s).any(|v| m[v * s + u])).count();
                assert_eq!((rows, cols), (s, s), "{} at {s}", class.name());
            }
        }
    }

    #[test]
    fn single_object_scenes() {
        let spec = SceneSpec { min_objects: 1, max_objects: 1, ..Default::default() };
        for i in 0..20 {
            let mut rng = image_rng(1, SplitRole::Test, i);
            let plan = ClassPlan { primary: 2, pool: vec![2], old: vec![], future: vec![] };
            assert_eq!(render_scene(&spec, &plan, &mut rng).unwrap().boxes.len(), 1);
        }
    }

    #[test]
    fn infeasible_scene_reports_generation_error() {
        let spec = SceneSpec { min_objects: 4, max_objects: 4, min_size: 0.9, max_size: 0.9, occlusion: 0.0, ..Default::default() };
        let plan = ClassPlan { primary: 0, pool: vec![0], old: vec![], future: vec![] };
        let err = render_scene(&spec, &plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn protocol_masks_and_balances() {
        let p = TaskProtocol::build(&small(vec![4, 2, 2])).unwrap();
        assert_eq!(p.steps, vec![vec![0, 1, 2, 3], vec![4, 5], vec![6, 7]]);
        let (mut saw_old, mut saw_future) = (false, false);
        for (s, split) in p.train.iter().enumerate() {
            for (i, sample) in split.samples.iter().enumerate() {
                assert!(!sample.boxes.is_empty());
                assert!(sample.boxes.iter().all(|b| p.steps[s].contains(&b.class_id)));
                let full = &p.withheld_annotations(s)[i];
                saw_old |= full.iter().any(|b| b.class_id < p.steps[s][0]);
                saw_future |= full.iter().any(|b| b.class_id > *p.steps[s].last().unwrap());
            }
            for &c in &p.steps[s] {
                let n = split.samples.iter().filter(|x| x.boxes.iter().any(|b| b.class_id == c)).count();
                assert!(n * 2 * p.steps[s].len() >= split.samples.len());
            }
        }
        assert!(saw_old && saw_future);
        let none = ProtocolSpec { future_object_prob: 0.0, ..small(vec![4, 2, 2]) };
        let q = TaskProtocol::build(&none).unwrap();
        for s in 0..3 {
            let last = *q.steps[s].last().unwrap();
            assert!(q.withheld_annotations(s).iter().flatten().all(|b| b.class_id <= last));
        }
        for sample in &p.test.samples {
            for (a, b) in sample.boxes.iter().enumerate().flat_map(|(i, a)| sample.boxes[i + 1..].iter().map(move |b| (a, b))) {
                assert!(a.iou(b) <= p.spec.scene.occlusion);
            }
        }
    }

    #[test]
    fn single_step_protocol_annotates_everything() {
        let p = TaskProtocol::build(&small(vec![8])).unwrap();
        assert_eq!(p.num_steps(), 1);
        assert_eq!(p.train[0].samples.iter().map(|s| s.boxes.clone()).collect::<Vec<_>>(), p.withheld_annotations(0));
    }

    #[test]
    fn infeasible_steps_are_config_errors() {
        assert!(matches!(TaskProtocol::build(&small(vec![4, 2])), Err(Error::Config(_))));
        assert!(matches!(TaskProtocol::build(&small(vec![8, 0])), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = TaskProtocol::build(&small(vec![4, 4])).unwrap();
        let b = TaskProtocol::build(&small(vec![4, 4])).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = TaskProtocol::build(&ProtocolSpec { seed: 4, ..small(vec![4, 4]) }).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn masking_filter() {
        let boxes: Vec<BBox> = [0, 5, 1, 6, 2].iter().map(|&c| BBox::new(0.0, 0.0, 1.0, 1.0, c)).collect();
        assert_eq!(mask_annotations(&boxes, &[0, 1, 2, 5, 6]), boxes);
        assert!(mask_annotations(&boxes, &[]).is_empty());
        let kept: Vec<usize> = mask_annotations(&boxes, &[5, 6]).iter().map(|b| b.class_id).collect();
        assert_eq!(kept, vec![5, 6]);
    }

    #[test]
    fn disk_roundtrip() {
        let p = TaskProtocol::build(&small(vec![6, 2])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let q = TaskProtocol::load(dir.path()).unwrap();
        assert_eq!(p.train, q.train);
        assert_eq!(p.test, q.test);
        assert_eq!(p.withheld_annotations(1), q.withheld_annotations(1));
        let text = fs::read_to_string(dir.path().join("test/annotations.json")).unwrap();
        assert!(text.contains("\"class\"") && text.contains("\"x1\""));
    }
}
