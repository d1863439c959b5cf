use diode_core::autodiff::{Bindings, Tape, Var};
use diode_core::continual::{
    accumulate_importance, ewc_penalty_with_grad, fisher_importance, huber_penalty_with_grad, mas_importance,
    GroupMask, ImportanceMatrix, LossModel, Snapshot,
};
use diode_core::detector::{Detector, DetectorConfig, HeadLogits, LevelOutputs, RawOutputs};
use diode_core::dilation::{count_added_params, expand_model};
use diode_core::pseudo::{merge_annotations, pseudo_from_outputs};
use diode_core::scenario::{render_scene, ClassPlan, ProtocolSpec, SceneSpec, TaskProtocol};
use diode_core::{BBox, GroupKind, ParameterStore, Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NAMES: [&str; 5] = ["backbone.a", "fpn.0.b", "cls_tower.c", "cls_head.0.d", "reg_head.e"];

fn outputs(logits: &[f64], ctr: &[f64], ltrb: &[f64], heads: &[(usize, usize)]) -> RawOutputs {
    let hw = 16;
    let mut off = 0;
    let cls = heads
        .iter()
        .map(|&(task, k)| {
            let h = HeadLogits { task, class_offset: off, num_classes: k, logits: logits[off * hw..(off + k) * hw].to_vec() };
            off += k;
            h
        })
        .collect();
    let lv = LevelOutputs { stride: 16, h: 4, w: 4, cls, ctr: ctr.to_vec(), ltrb: ltrb.to_vec() };
    RawOutputs { image_size: 64, levels: vec![lv] }
}

fn raw_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-4.0..4.0f64, 5 * 16),
        prop::collection::vec(-4.0..4.0f64, 16),
        prop::collection::vec(1.0..30.0f64, 64),
    )
}

fn key(b: &BBox) -> [u64; 5] {
    [b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits(), b.class_id as u64]
}

fn store_of(vals: &[Vec<f64>]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (n, v) in NAMES.iter().zip(vals) {
        s.insert(*n, Tensor::new(vec![v.len()], v.clone()).unwrap()).unwrap();
    }
    s
}

fn vals(lo: f64, hi: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(lo..hi, 3), NAMES.len())
}

/// `L = Σ_j (w_j · x_j − y)²` over every scalar of the store.
struct Linear(ParameterStore);

impl LossModel for Linear {
    type Example = (Vec<f64>, f64);

    fn params(&self) -> &ParameterStore {
        &self.0
    }

    fn example_loss(&self, tape: &mut Tape, b: &Bindings, ex: &Self::Example) -> Result<Var> {
        let out = self.mas_outputs(tape, b, ex)?[0];
        let y = tape.constant(Tensor::scalar(ex.1));
        let r = tape.sub(out, y)?;
        let sq = tape.mul(r, r)?;
        Ok(tape.sum(sq))
    }

    fn mas_outputs(&self, tape: &mut Tape, b: &Bindings, ex: &Self::Example) -> Result<Vec<Var>> {
        let mut terms = Vec::new();
        let mut at = 0;
        for (name, t) in self.0.iter() {
            let x = tape.constant(Tensor::new(vec![t.len()], ex.0[at..at + t.len()].to_vec())?);
            at += t.len();
            let w = b.get(name)?;
            let p = tape.mul(w, x)?;
            terms.push(tape.sum(p));
        }
        Ok(vec![tape.add_all(&terms)?])
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pseudo_sets_shrink_as_threshold_rises((logits, ctr, ltrb) in raw_strategy(), a in 0.01..0.99f64, b in 0.01..0.99f64) {
        let raw = outputs(&logits, &ctr, &ltrb, &[(0, 3), (1, 2)]);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low: Vec<_> = pseudo_from_outputs(&raw, lo, 0.5).unwrap().iter().map(key).collect();
        let high = pseudo_from_outputs(&raw, hi, 0.5).unwrap();
        prop_assert!(high.len() <= low.len());
        for h in &high {
            prop_assert!(low.contains(&key(h)));
        }
    }

    #[test]
    fn pseudo_only_emits_old_classes((logits, ctr, ltrb) in raw_strategy(), conf in 0.01..0.99f64) {
        let raw = outputs(&logits, &ctr, &ltrb, &[(0, 3), (1, 2)]);
        for b in pseudo_from_outputs(&raw, conf, 0.5).unwrap() {
            prop_assert!(b.class_id < 5);
            prop_assert!(b.score.unwrap() > conf);
        }
    }

    #[test]
    fn merge_is_ordered_and_lossless(
        new in prop::collection::vec((0.0..30.0f64, 0.0..30.0f64, 5usize..8), 0..6),
        old in prop::collection::vec((0.0..30.0f64, 0.0..30.0f64, 0usize..5, 0.5..1.0f64), 0..6),
    ) {
        let gt: Vec<BBox> = new.iter().map(|&(x, y, c)| BBox::new(x, y, x + 10.0, y + 10.0, c)).collect();
        let ps: Vec<BBox> = old.iter().map(|&(x, y, c, s)| BBox::new(x, y, x + 8.0, y + 8.0, c).with_score(s)).collect();
        let m = merge_annotations("img", &gt, &ps).unwrap();
        prop_assert_eq!(m.len(), gt.len() + ps.len());
        let boxes = m.boxes();
        prop_assert_eq!(&boxes[..gt.len()], &gt[..]);
        for (got, want) in boxes[gt.len()..].iter().zip(&ps) {
            prop_assert_eq!(*got, BBox { score: None, ..*want });
        }
    }

    #[test]
    fn accumulation_commutes_and_associates(
        a in prop::collection::vec((0usize..5, prop::collection::vec(0u8..50, 3)), 0..5),
        b in prop::collection::vec((0usize..5, prop::collection::vec(0u8..50, 3)), 0..5),
        c in prop::collection::vec((0usize..5, prop::collection::vec(0u8..50, 3)), 0..5),
    ) {
        // Small integers keep float sums exact, so equality is bitwise.
        let m = |e: &[(usize, Vec<u8>)]| {
            ImportanceMatrix::from_entries(e.iter().map(|(i, v)| {
                (NAMES[*i].to_string(), Tensor::new(vec![3], v.iter().map(|&x| x as f64).collect()).unwrap())
            }))
            .unwrap()
        };
        let (a, b, c) = (m(&a), m(&b), m(&c));
        prop_assert_eq!(accumulate_importance(&a, &b).unwrap(), accumulate_importance(&b, &a).unwrap());
        let left = accumulate_importance(&accumulate_importance(&a, &b).unwrap(), &c).unwrap();
        let right = accumulate_importance(&a, &accumulate_importance(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn huber_gradient_bounded_by_clip(
        theta in vals(-50.0, 50.0),
        anchor in vals(-50.0, 50.0),
        weights in vals(0.0, 1e3),
        lambda in 0.0..1e4f64,
        clip in 1e-3..10.0f64,
    ) {
        let store = store_of(&theta);
        let snap = Snapshot::of(&store_of(&anchor));
        let imp = ImportanceMatrix::from_entries(store_of(&weights).iter().map(|(n, t)| (n.to_string(), t.clone()))).unwrap();
        let (_, grads) = huber_penalty_with_grad(&store, &snap, &imp, lambda, clip).unwrap();
        for g in grads.values().flatten() {
            prop_assert!(g.abs() <= clip * (1.0 + 1e-12), "{} > {}", g, clip);
        }
    }

    #[test]
    fn masked_out_parameters_get_zero_penalty_gradient(
        theta in vals(-5.0, 5.0),
        anchor in vals(-5.0, 5.0),
        weights in vals(0.0, 10.0),
        lambda in 0.0..1e3f64,
    ) {
        let store = store_of(&theta);
        let snap = Snapshot::of(&store_of(&anchor));
        let imp = ImportanceMatrix::from_entries(store_of(&weights).iter().map(|(n, t)| (n.to_string(), t.clone()))).unwrap();
        let mask = GroupMask::feature_extractor();
        let (_, grads) = ewc_penalty_with_grad(&store, &snap, &imp, lambda, &mask).unwrap();
        for (name, g) in &grads {
            let w = imp.get(name).unwrap().data();
            let (t, a) = (store.get(name).unwrap().data(), snap.get(name).unwrap().data());
            for i in 0..g.len() {
                if mask.contains_name(name) {
                    prop_assert!((g[i] - lambda * w[i] * (t[i] - a[i])).abs() <= 1e-10 * (1.0 + g[i].abs()));
                } else {
                    prop_assert_eq!(g[i].to_bits(), 0.0f64.to_bits());
                }
            }
        }
        prop_assert!(!mask.contains(&diode_core::GroupTag::from_name("cls_head.0.d")));
        prop_assert!(GroupMask::of([GroupKind::Backbone]).contains_name("backbone.a"));
    }

    #[test]
    fn importance_nonnegative_and_order_free(
        theta in vals(-2.0, 2.0),
        data in prop::collection::vec((prop::collection::vec(-2.0..2.0f64, 15), -3.0..3.0f64), 1..6),
        rot in 0usize..6,
    ) {
        let model = Linear(store_of(&theta));
        let mut rotated = data.clone();
        let r = rot % data.len();
        rotated.rotate_left(r);
        for f in [fisher_importance::<Linear>, mas_importance::<Linear>] {
            let m = f(&model, &data, data.len()).unwrap();
            prop_assert!(m.iter().all(|(_, t)| t.data().iter().all(|&v| v >= 0.0)));
            let m2 = f(&model, &rotated, data.len()).unwrap();
            for ((_, x), (_, y)) in m.iter().zip(m2.iter()) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_stay_inside_and_respect_occlusion(seed in any::<u64>(), primary in 0usize..8, with_future in any::<bool>()) {
        let spec = SceneSpec::default();
        let plan = ClassPlan {
            primary,
            pool: (0..4).collect(),
            old: Vec::new(),
            future: if with_future { vec![6, 7] } else { Vec::new() },
        };
        let s = render_scene(&spec, &plan, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let again = render_scene(&spec, &plan, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&s, &again);
        prop_assert_eq!(s.boxes[0].class_id, primary);
        let n = spec.image_size as f64;
        for (i, b) in s.boxes.iter().enumerate() {
            prop_assert!(b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= n && b.y2 <= n);
            for c in &s.boxes[..i] {
                prop_assert!(b.iou(c) <= spec.occlusion + 1e-12);
            }
        }
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v) && (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
    }

    #[test]
    fn growth_census_matches_store(steps in prop::collection::vec(1usize..4, 1..5), seed in 0u64..100) {
        let config = DetectorConfig::default();
        let growth = count_added_params(&config, &steps).unwrap();
        let mut det = Detector::new(config.clone(), steps[0], seed).unwrap();
        let mut cumulative = 0;
        for (t, &k) in steps.iter().enumerate().skip(1) {
            let before = det.params.hashes();
            expand_model(&mut det, t, k, seed).unwrap();
            let after = det.params.hashes();
            let added: usize = det.params.iter().filter(|(n, _)| !before.contains_key(*n)).map(|(_, v)| v.len()).sum();
            for (n, h) in &before {
                prop_assert_eq!(after[n], *h);
            }
            cumulative += added;
            prop_assert_eq!(growth[t].added, added);
            prop_assert_eq!(growth[t].cumulative, cumulative);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn protocol_masks_and_balances(seed in any::<u64>(), sizes in prop::sample::select(vec![vec![4, 2, 2], vec![2, 2, 2, 2], vec![4, 1, 1, 1, 1]])) {
        let spec = ProtocolSpec { step_sizes: sizes, train_per_step: 12, test_size: 4, seed, ..Default::default() };
        let p = TaskProtocol::build(&spec).unwrap();
        let again = TaskProtocol::build(&spec).unwrap();
        prop_assert!(p.train == again.train && p.test == again.test);
        for (s, split) in p.train.iter().enumerate() {
            let classes = &p.steps[s];
            for (sample, full) in split.samples.iter().zip(p.withheld_annotations(s)) {
                prop_assert!(sample.boxes.iter().all(|b| classes.contains(&b.class_id)));
                prop_assert!(sample.boxes.len() <= full.len());
            }
            for c in classes {
                let n = split.samples.iter().filter(|x| x.boxes.iter().any(|b| b.class_id == *c)).count();
                prop_assert!(2 * n * classes.len() >= spec.train_per_step, "class {} in {} images", c, n);
            }
        }
    }
}
