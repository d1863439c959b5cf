use crate::bbox::BBox;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};

/// Per-pixel training targets for one pyramid level, row-major over `h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Class of the assigned box at positive pixels.
    pub label: Vec<Option<usize>>,
    /// Side distances `[l, t, r, b]`; zero at non-positive pixels.
    pub ltrb: Vec<[f64; 4]>,
    pub centerness: Vec<f64>,
}

impl LevelTargets {
    pub fn is_positive(&self, px: usize) -> bool {
        self.label[px].is_some()
    }

    pub fn num_positive(&self) -> usize {
        self.label.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub levels: Vec<LevelTargets>,
}

impl TargetMap {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_positive).sum()
    }
}

/// Pixel center of cell `(row, col)` at `stride`.
pub(crate) fn pixel_center(stride: usize, row: usize, col: usize) -> (f64, f64) {
    let half = stride as f64 / 2.0;
    ((col * stride) as f64 + half, (row * stride) as f64 + half)
}

/// Assigns each pyramid pixel to at most one box: the pixel center must lie
/// strictly inside the box, the box's max side distance must fall in the
/// level's size range, and overlapping candidates resolve to the smallest
/// box (ties broken by coordinates then class, so the result does not
/// depend on annotation order).
pub fn assign_targets(annotations: &[BBox], config: &DetectorConfig) -> Result<TargetMap> {
    let size = config.image_size as f64;
    for b in annotations {
        if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > size || b.y2 > size {
            return Err(Error::config(format!("annotation {b:?} is invalid or outside the image")));
        }
    }
    let mut levels = Vec::with_capacity(config.levels());
    for (level, &stride) in config.strides.iter().enumerate() {
        let (h, w) = (config.feature_size(level), config.feature_size(level));
        let (lo, hi) = config.size_range(level);
        let mut label = vec![None; h * w];
        let mut ltrb = vec![[0.0; 4]; h * w];
        let mut centerness = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let (px, py) = pixel_center(stride, row, col);
                let mut best: Option<(&BBox, [f64; 4])> = None;
                for b in annotations {
                    let d = [px - b.x1, py - b.y1, b.x2 - px, b.y2 - py];
                    if d.iter().any(|&v| v <= 0.0) {
                        continue;
                    }
                    let m = d.iter().cloned().fold(0.0, f64::max);
                    if m < lo || m >= hi {
                        continue;
                    }
                    if best.map_or(true, |(cur, _)| box_order(b, cur).is_lt()) {
                        best = Some((b, d));
                    }
                }
                if let Some((b, d)) = best {
                    let idx = row * w + col;
                    label[idx] = Some(b.class_id);
                    ltrb[idx] = d;
                    centerness[idx] = centerness_of(&d);
                }
            }
        }
        levels.push(LevelTargets { stride, h, w, label, ltrb, centerness });
    }
    Ok(TargetMap { levels })
}

pub fn centerness_of(d: &[f64; 4]) -> f64 {
    let (l, t, r, b) = (d[0], d[1], d[2], d[3]);
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

fn box_order(a: &BBox, b: &BBox) -> std::cmp::Ordering {
    a.area()
        .total_cmp(&b.area())
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
        .then(a.class_id.cmp(&b.class_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_box_center_has_unit_centerness() {
        let cfg = DetectorConfig::default();
        // level-0 pixel (2, 2) has center (20, 20)
        let b = BBox::new(10.0, 10.0, 30.0, 30.0, 1);
        let tm = assign_targets(&[b], &cfg).unwrap();
        let lv = &tm.levels[0];
        let idx = 2 * lv.w + 2;
        assert_eq!(lv.label[idx], Some(1));
        assert_eq!(lv.ltrb[idx], [10.0, 10.0, 10.0, 10.0]);
        assert_eq!(lv.centerness[idx], 1.0);
    }

    #[test]
    fn outside_pixels_are_background() {
        let cfg = DetectorConfig::default();
        let tm = assign_targets(&[BBox::new(0.0, 0.0, 10.0, 10.0, 0)], &cfg).unwrap();
        let lv = &tm.levels[0];
        assert!(!lv.is_positive(7 * lv.w + 7));
        assert_eq!(lv.centerness[7 * lv.w + 7], 0.0);
    }

    #[test]
    fn hand_arithmetic_side_distances() {
        // stride-8 pixel center (20, 28) is cell (row 3, col 2)
        let cfg = DetectorConfig { level_bounds: vec![64.0], ..Default::default() };
        let tm = assign_targets(&[BBox::new(10.0, 10.0, 50.0, 50.0, 0)], &cfg).unwrap();
        let lv = &tm.levels[0];
        assert_eq!(pixel_center(8, 3, 2), (20.0, 28.0));
        assert_eq!(lv.ltrb[3 * lv.w + 2], [10.0, 18.0, 30.0, 22.0]);
        // with the default boundary of 24, max = 30 belongs to level 1 instead
        let tm = assign_targets(&[BBox::new(10.0, 10.0, 50.0, 50.0, 0)], &DetectorConfig::default()).unwrap();
        assert!(!tm.levels[0].is_positive(3 * 8 + 2));
    }

    #[test]
    fn empty_annotations_give_background() {
        let tm = assign_targets(&[], &DetectorConfig::default()).unwrap();
        assert_eq!(tm.num_positive(), 0);
    }

    #[test]
    fn overlapping_boxes_resolve_to_smallest() {
        let cfg = DetectorConfig::default();
        let big = BBox::new(4.0, 4.0, 40.0, 40.0, 0);
        let small = BBox::new(14.0, 14.0, 26.0, 26.0, 1);
        let tm = assign_targets(&[big, small], &cfg).unwrap();
        assert_eq!(tm.levels[0].label[2 * 8 + 2], Some(1));
    }

    #[test]
    fn invalid_boxes_rejected() {
        let cfg = DetectorConfig::default();
        assert!(assign_targets(&[BBox::new(5.0, 5.0, 5.0, 9.0, 0)], &cfg).is_err());
        assert!(assign_targets(&[BBox::new(5.0, 5.0, 70.0, 9.0, 0)], &cfg).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..50, 0u32..50, 4u32..30, 4u32..30, 0usize..4).prop_map(|(x, y, w, h, c)| {
            BBox::new(x as f64, y as f64, (x + w).min(64) as f64, (y + h).min(64) as f64, c)
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(boxes in prop::collection::vec(arb_box(), 0..5), seed in 0u64..1000) {
            let cfg = DetectorConfig::default();
            let a = assign_targets(&boxes, &cfg).unwrap();
            let mut shuffled = boxes.clone();
            let n = shuffled.len();
            if n > 1 {
                for i in 0..n {
                    let j = ((seed as usize).wrapping_mul(31).wrapping_add(i * 7)) % n;
                    shuffled.swap(i, j);
                }
            }
            let b = assign_targets(&shuffled, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
