//! Oracle-backed checks shared by the integration tests and the acceptance
//! gate. Each returns `Err` with a description of the first violation.

use std::cell::RefCell;

use futuredet::assignment::{
    hungarian, iou, match_predictions, set_loss, Annotation, AnnotationSet, BBox, CostMatrix, HeadOutput, LossWeights,
};
use futuredet::diffcore::{ParamGroup, ParamStore, Tape, Tensor, Var};
use futuredet::evalkit::{evaluate, Detection, EvalConfig};
use futuredet::model::{
    AttentionProbe, EgoFusion, EgoMotionRecord, Model, ModelConfig, ModelInput, Placement, PredictionSet, Stage,
    Variant,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    away_from_zero, egos, gradient_check, injections, permutations, random_annotations, random_frames, random_tensor,
    rng, timestamps, tiny, LossFn,
};

pub type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

// ---------------------------------------------------------------- Hungarian

pub fn brute_force_min(cost: &CostMatrix) -> f64 {
    injections(cost.cols(), cost.rows())
        .iter()
        .map(|slots| slots.iter().enumerate().map(|(a, &s)| cost.get(s, a)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Random square and rectangular matrices up to 7×7: integer costs must
/// match the enumerated optimum exactly, real costs to 1e-12.
pub fn hungarian_exactness(matrices: usize) -> Outcome {
    let mut r = rng(1);
    for trial in 0..matrices {
        let cols = r.random_range(1..=7);
        let rows = if trial % 2 == 0 { cols } else { r.random_range(cols..=7) };
        // integer costs keep every sum exact
        let integral = trial % 3 != 0;
        let cost = CostMatrix::from_fn(rows, cols, |_, _| {
            if integral {
                r.random_range(0..20) as f64
            } else {
                r.random_range(-5.0..5.0)
            }
        });
        let a = hungarian(&cost).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure!(a.matched() == cols, "trial {trial}: {} of {cols} columns matched", a.matched());
        let mut seen = vec![false; rows];
        for (row, _) in a.pairs() {
            ensure!(!seen[row], "trial {trial}: row {row} used twice");
            seen[row] = true;
        }
        let got: f64 = a.pairs().iter().map(|&(row, c)| cost.get(row, c)).sum();
        let want = brute_force_min(&cost);
        if integral {
            ensure!(got == want, "trial {trial}: {got} vs brute force {want}");
        } else {
            ensure!((got - want).abs() < 1e-12, "trial {trial}: {got} vs brute force {want}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- set loss

pub fn oracle_giou(a: &BBox, b: &BBox) -> f64 {
    let c = |x: &BBox| [x.cx - x.w / 2.0, x.cy - x.h / 2.0, x.cx + x.w / 2.0, x.cy + x.h / 2.0];
    let (p, q) = (c(a), c(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    let hull = (p[2].max(q[2]) - p[0].min(q[0])) * (p[3].max(q[3]) - p[1].min(q[1]));
    inter / union - (hull - union) / hull
}

/// Focal loss of one layer under a given slot → annotation map, straight
/// from the definition.
pub fn oracle_layer_loss(
    logits: &[Vec<f64>],
    boxes: &[BBox],
    annos: &AnnotationSet,
    slot_of: &[usize],
    w: &LossWeights,
) -> f64 {
    let norm = annos.len().max(1) as f64;
    let mut class = 0.0;
    for (j, row) in logits.iter().enumerate() {
        for (c, &z) in row.iter().enumerate() {
            let p = 1.0 / (1.0 + (-z).exp());
            let target = slot_of
                .iter()
                .enumerate()
                .any(|(a, &s)| s == j && annos.0[a].class == c);
            class += if target {
                -w.focal_alpha * (1.0 - p).powi(2) * p.ln()
            } else {
                -(1.0 - w.focal_alpha) * p.powi(2) * (1.0 - p).ln()
            };
        }
    }
    let mut l1 = 0.0;
    let mut gi = 0.0;
    for (a, &s) in slot_of.iter().enumerate() {
        let (b, t) = (boxes[s], annos.0[a].bbox);
        l1 += (b.cx - t.cx).abs() + (b.cy - t.cy).abs() + (b.w - t.w).abs() + (b.h - t.h).abs();
        gi += 1.0 - oracle_giou(&b, &t);
    }
    (w.class * class + w.l1 * l1 + w.giou * gi) / norm
}

pub fn oracle_match_cost(p: f64, b: &BBox, a: &Annotation, w: &LossWeights) -> f64 {
    let focal = w.focal_alpha * (1.0 - p).powi(2) * -p.ln() - (1.0 - w.focal_alpha) * p.powi(2) * -(1.0 - p).ln();
    let t = a.bbox;
    let l1 = (b.cx - t.cx).abs() + (b.cy - t.cy).abs() + (b.w - t.w).abs() + (b.h - t.h).abs();
    w.class * focal + w.l1 * l1 + w.giou * (1.0 - oracle_giou(b, &t))
}

pub struct SetInstance {
    pub logits: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
    pub annos: AnnotationSet,
}

/// M ≤ 6 slots, N ≤ min(M, 4) annotations, 3 classes.
pub fn set_instance(r: &mut ChaCha8Rng) -> SetInstance {
    let m = r.random_range(1..=6);
    let n = r.random_range(0..=m.min(4));
    let classes = 3;
    SetInstance {
        logits: (0..m).map(|_| (0..classes).map(|_| r.random_range(-4.0..2.0)).collect()).collect(),
        boxes: (0..m)
            .map(|_| {
                BBox::new(
                    r.random_range(0.1..0.9),
                    r.random_range(0.1..0.9),
                    r.random_range(0.05..0.5),
                    r.random_range(0.05..0.5),
                )
            })
            .collect(),
        annos: random_annotations(r, n, classes),
    }
}

pub fn library_loss(inst: &SetInstance, w: &LossWeights) -> f64 {
    let m = inst.logits.len();
    let c = inst.logits[0].len();
    let tape = Tape::<f64>::new();
    let logits = Tensor::from_f64([m, c], &inst.logits.concat()).unwrap();
    let flat: Vec<f64> = inst.boxes.iter().flat_map(|b| b.to_array()).collect();
    let boxes = Tensor::from_f64([m, 4], &flat).unwrap();
    let head = HeadOutput {
        logits: tape.constant(logits),
        boxes: tape.constant(boxes),
    };
    set_loss(&[head], &inst.annos, w).unwrap().1.total
}

/// Loss and assignment equal the brute-force optimum over every injective
/// annotation → slot map.
pub fn set_loss_brute_force(instances: usize) -> Outcome {
    let w = LossWeights::default();
    let mut r = rng(3);
    for trial in 0..instances {
        let inst = set_instance(&mut r);
        let n = inst.annos.len();
        let best = injections(n, inst.logits.len())
            .into_iter()
            .map(|slots| {
                let cost: f64 = slots
                    .iter()
                    .enumerate()
                    .map(|(a, &s)| {
                        let z = inst.logits[s][inst.annos.0[a].class];
                        oracle_match_cost(1.0 / (1.0 + (-z).exp()), &inst.boxes[s], &inst.annos.0[a], &w)
                    })
                    .sum();
                (cost, slots)
            })
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .unwrap();
        let want = oracle_layer_loss(&inst.logits, &inst.boxes, &inst.annos, &best.1, &w);
        let got = library_loss(&inst, &w);
        ensure!((got - want).abs() < 1e-9, "trial {trial}: loss {got} vs brute force {want}");

        let probs: Vec<f64> = inst.logits.concat().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let flat: Vec<f64> = inst.boxes.iter().flat_map(|b| b.to_array()).collect();
        let preds = PredictionSet::new(
            Tensor::<f64>::from_f64([inst.logits.len(), 3], &probs).unwrap(),
            Tensor::from_f64([inst.logits.len(), 4], &flat).unwrap(),
        )
        .unwrap();
        let a = match_predictions(&preds, &inst.annos, &w).map_err(|e| e.to_string())?;
        for (s, ann) in a.pairs() {
            ensure!(best.1[ann] == s, "trial {trial}: assignment differs from brute force");
        }
    }
    Ok(())
}

/// Permuting slots and annotations leaves the loss unchanged within 1e-9.
pub fn set_loss_permutation_invariance(instances: usize) -> Outcome {
    let w = LossWeights::default();
    let mut r = rng(4);
    for trial in 0..instances {
        let inst = set_instance(&mut r);
        let base = library_loss(&inst, &w);
        let slots = permutations(inst.logits.len());
        let sp = &slots[r.random_range(0..slots.len())];
        let annos = permutations(inst.annos.len());
        let ap = &annos[r.random_range(0..annos.len())];
        let permuted = SetInstance {
            logits: sp.iter().map(|&i| inst.logits[i].clone()).collect(),
            boxes: sp.iter().map(|&i| inst.boxes[i]).collect(),
            annos: AnnotationSet(ap.iter().map(|&i| inst.annos.0[i]).collect()),
        };
        let got = library_loss(&permuted, &w);
        ensure!((got - base).abs() < 1e-9, "trial {trial}: {got} vs {base}");
    }
    Ok(())
}

// ---------------------------------------------------------------- AP

pub const AP_H: usize = 64;
pub const AP_W: usize = 64;

pub fn ap_config() -> EvalConfig {
    EvalConfig {
        class_names: vec!["a".into(), "b".into()],
        image_height: AP_H,
        image_width: AP_W,
    }
}

fn bucket(b: &BBox) -> usize {
    let area = b.w * AP_W as f64 * b.h * AP_H as f64;
    let small = (AP_H as f64 / 24.0) * (AP_W as f64 / 64.0);
    let large = (AP_H as f64 / 4.0) * (AP_W as f64 / 12.0);
    if area < small {
        0
    } else if area < large {
        1
    } else {
        2
    }
}

/// Straightforward reference: explicit greedy matching per ranked detection
/// and an O(n²) precision envelope.
pub fn reference_ap(
    dets: &[Detection],
    truth: &[(usize, AnnotationSet)],
    class: usize,
    threshold: f64,
    only_bucket: Option<usize>,
) -> Option<f64> {
    let counts = |a: &Annotation| a.class == class && only_bucket.is_none_or(|k| bucket(&a.bbox) == k);
    let n_gt: usize = truth.iter().map(|(_, s)| s.iter().filter(|a| counts(a)).count()).sum();
    let mut mine: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    if n_gt == 0 {
        return if mine.is_empty() { None } else { Some(0.0) };
    }
    // stable: equal confidences keep input order
    mine.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut outcomes: Vec<bool> = Vec::new();
    for d in mine {
        let set = &truth.iter().find(|(s, _)| *s == d.sample).unwrap().1;
        let mut best: Option<(usize, f64)> = None;
        for (k, a) in set.iter().enumerate() {
            if a.class != class || taken.contains(&(d.sample, k)) {
                continue;
            }
            let o = iou(&d.bbox, &a.bbox);
            if o >= threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, _)) => {
                taken.push((d.sample, k));
                if counts(&set.0[k]) {
                    outcomes.push(true);
                }
            }
            None => outcomes.push(false),
        }
    }
    let mut points = Vec::new();
    let mut hits = 0usize;
    for (i, &o) in outcomes.iter().enumerate() {
        hits += o as usize;
        points.push((hits as f64 / n_gt as f64, hits as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..points.len() {
        let envelope = points[i..].iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        ap += (points[i].0 - prev) * envelope;
        prev = points[i].0;
    }
    Some(ap)
}

pub fn mean(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

fn near(r: &mut ChaCha8Rng, b: &BBox) -> BBox {
    BBox::new(
        b.cx + r.random_range(-0.05..0.05),
        b.cy + r.random_range(-0.05..0.05),
        b.w * r.random_range(0.7..1.3),
        b.h * r.random_range(0.7..1.3),
    )
}

pub fn sized_box(r: &mut ChaCha8Rng) -> BBox {
    // widths span all three size buckets
    let w = r.random_range(0.02..0.5);
    let h = r.random_range(0.02..0.5);
    BBox::new(r.random_range(0.2..0.8), r.random_range(0.2..0.8), w, h)
}

/// A few samples of ground truth with noisy, partly missing and partly
/// spurious detections.
pub fn ap_instance(r: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<(usize, AnnotationSet)>) {
    let samples = r.random_range(1..=4);
    let mut truth = Vec::new();
    let mut dets = Vec::new();
    for s in 0..samples {
        let id = 10 + 3 * s;
        let annos: Vec<Annotation> = (0..r.random_range(0..=4))
            .map(|_| Annotation {
                class: r.random_range(0..2),
                bbox: sized_box(r),
            })
            .collect();
        for a in &annos {
            if r.random::<f64>() < 0.8 {
                dets.push(Detection {
                    sample: id,
                    class: if r.random::<f64>() < 0.9 { a.class } else { 1 - a.class },
                    confidence: r.random(),
                    bbox: near(r, &a.bbox),
                });
            }
        }
        for _ in 0..r.random_range(0..=3) {
            dets.push(Detection {
                sample: id,
                class: r.random_range(0..2),
                confidence: r.random(),
                bbox: sized_box(r),
            });
        }
        truth.push((id, AnnotationSet(annos)));
    }
    (dets, truth)
}

/// `evaluate` equals the reference on every metric, exactly; AP ≤ AP50.
pub fn ap_oracle_equivalence(instances: usize) -> Outcome {
    let mut r = rng(1);
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    for trial in 0..instances {
        let (dets, truth) = ap_instance(&mut r);
        let report = evaluate(&dets, &truth, &ap_config()).map_err(|e| e.to_string())?;
        for c in 0..2 {
            let got = &report.classes[c];
            let want50 = reference_ap(&dets, &truth, c, 0.5, None);
            ensure!(got.ap50 == want50, "trial {trial}: AP50 {:?} vs {want50:?}", got.ap50);
            let per: Vec<Option<f64>> = thresholds.iter().map(|&t| reference_ap(&dets, &truth, c, t, None)).collect();
            let ap = per
                .iter()
                .all(Option::is_some)
                .then(|| per.iter().flatten().sum::<f64>() / per.len() as f64);
            ensure!(got.ap == ap, "trial {trial}: AP {:?} vs {ap:?}", got.ap);
            for (k, v) in [got.small_ap50, got.medium_ap50, got.large_ap50].into_iter().enumerate() {
                let want = reference_ap(&dets, &truth, c, 0.5, Some(k));
                ensure!(v == want, "trial {trial}: bucket {k} {v:?} vs {want:?}");
            }
            if let (Some(a), Some(a50)) = (got.ap, got.ap50) {
                ensure!(a <= a50, "trial {trial}: AP {a} > AP50 {a50}");
            }
        }
        let ap50s: Vec<Option<f64>> = report.classes.iter().map(|c| c.ap50).collect();
        ensure!(report.mean.ap50 == mean(&ap50s), "trial {trial}: mean AP50");
    }
    Ok(())
}

// ---------------------------------------------------------------- model

pub const TEMPORAL: [Variant; 3] = [Variant::Joint, Variant::Sequential, Variant::Recurrent];
pub const PLACEMENTS: [Placement; 3] = [Placement::Encoder, Placement::Decoder, Placement::Both];

pub fn run_model(model: &Model<f64>, frames: &[Tensor<f64>]) -> PredictionSet<f64> {
    let ts = timestamps(frames.len());
    let e = egos(&model.config, &ts);
    model
        .predict(&ModelInput {
            frames,
            timestamps: &ts,
            egos: &e,
        })
        .unwrap()
}

pub fn bits(p: &PredictionSet<f64>) -> Vec<u64> {
    p.class_probs.data().iter().chain(p.boxes.data()).map(|v| v.to_bits()).collect()
}

/// Every temporal variant and placement at T=1 without ego-motion equals
/// the single-frame model bit for bit.
pub fn architectural_identity() -> Outcome {
    let single = Model::<f64>::new(tiny(Variant::Single, Placement::Decoder, EgoFusion::None, 1), 21).unwrap();
    for variant in TEMPORAL {
        for placement in PLACEMENTS {
            let model = Model::<f64>::new(tiny(variant, placement, EgoFusion::None, 1), 21).unwrap();
            // shared parameters carry identical values
            for p in single.params.iter() {
                let id = model.params.id(&p.name).ok_or(format!("{variant:?}/{placement:?} lacks {}", p.name))?;
                ensure!(model.params.get(id).value == p.value, "{variant:?}/{placement:?}: {} differs", p.name);
            }
            for seed in 0..3 {
                let frames = random_frames(&mut rng(seed), &model.config);
                ensure!(
                    bits(&run_model(&model, &frames)) == bits(&run_model(&single, &frames)),
                    "{variant:?}/{placement:?}, input {seed}: outputs differ"
                );
            }
        }
    }
    Ok(())
}

fn probed(cfg: &ModelConfig) -> AttentionProbe {
    let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let frames = random_frames(&mut rng(1), cfg);
    let ts = timestamps(cfg.frames);
    let probe = RefCell::new(AttentionProbe::counting());
    let tape = Tape::new();
    model
        .pass(&tape)
        .with_probe(&probe)
        .forward(
            &ModelInput {
                frames: &frames,
                timestamps: &ts,
                egos: &[],
            },
            false,
        )
        .unwrap();
    probe.into_inner()
}

/// Attention-score entries of encoder layer 0: the current frame's pass
/// and the sum over all passes.
pub fn encoder_entries(cfg: &ModelConfig) -> (usize, usize) {
    let p = probed(cfg);
    let all: usize = p
        .records
        .iter()
        .filter(|r| r.stage == Stage::Encoder && r.layer == 0)
        .map(|r| r.score_entries())
        .sum();
    (p.entries(Stage::Encoder, cfg.frames - 1, 0), all)
}

pub fn decoder_entries(cfg: &ModelConfig, layer: usize) -> usize {
    probed(cfg)
        .records
        .iter()
        .filter(|r| r.stage == Stage::Decoder && r.layer == layer)
        .map(|r| r.score_entries())
        .sum()
}

/// Per-layer encoder score entries: (T·HW)² joint, T·HW² sequential, for
/// T = 1..4 on 16 tokens per frame.
pub fn complexity_counts() -> Outcome {
    let hw = 16;
    for t in 1..=4 {
        let cfg = |v| ModelConfig {
            enc_layers: 2,
            ..tiny(v, Placement::Encoder, EgoFusion::None, t)
        };
        let (joint, _) = encoder_entries(&cfg(Variant::Joint));
        ensure!(joint == (t * hw).pow(2), "joint T={t}: {joint} entries, expected {}", (t * hw).pow(2));
        let (seq, _) = encoder_entries(&cfg(Variant::Sequential));
        ensure!(seq == t * hw * hw, "sequential T={t}: {seq} entries, expected {}", t * hw * hw);
    }
    Ok(())
}

// ---------------------------------------------------------------- gradients

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Loss = Box<dyn for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Var<'t, f64>>;

/// One differentiable op under test.
pub struct OpCase {
    pub group: &'static str,
    pub name: &'static str,
    make: std::rc::Rc<Maker>,
    loss: Loss,
}

pub fn param_store(values: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, v) in values.into_iter().enumerate() {
        s.insert(&format!("p{i}"), ParamGroup::Rest, v).unwrap();
    }
    s
}

pub fn p<'t>(tape: &'t Tape<f64>, s: &ParamStore<f64>, i: usize) -> Var<'t, f64> {
    tape.param(s, s.id(&format!("p{i}")).unwrap())
}

/// Weighted sum with fixed pseudo-random weights so every output entry
/// contributes a distinct amount.
pub fn project<'t>(x: Var<'t, f64>) -> Var<'t, f64> {
    let shape = x.shape();
    let w = Tensor::from_fn(shape, |i| ((i * 7919 % 101) as f64 / 50.0) - 1.0);
    x.mul(&x.tape().constant(w)).unwrap().sum()
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(r, shape, -1.0, 1.0)
}

/// Every differentiable op, grouped.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = Vec::new();
    let mut group = |group: &'static str, make: Maker, ops: Vec<(&'static str, Loss)>| {
        let make = std::rc::Rc::new(make);
        for (name, loss) in ops {
            cases.push(OpCase {
                group,
                name,
                make: make.clone(),
                loss,
            });
        }
    };
    group(
        "binary",
        Box::new(|r| vec![uniform(r, &[3, 4]), uniform(r, &[3, 4]), uniform(r, &[4])]),
        vec![
            ("add", Box::new(|t, s| project(p(t, s, 0).add(&p(t, s, 1)).unwrap()))),
            ("sub", Box::new(|t, s| project(p(t, s, 0).sub(&p(t, s, 1)).unwrap()))),
            ("mul", Box::new(|t, s| project(p(t, s, 0).mul(&p(t, s, 1)).unwrap()))),
            ("add broadcast", Box::new(|t, s| project(p(t, s, 0).add(&p(t, s, 2)).unwrap()))),
            ("mul broadcast", Box::new(|t, s| project(p(t, s, 2).mul(&p(t, s, 0)).unwrap()))),
        ],
    );
    group(
        "binary",
        Box::new(|r| vec![uniform(r, &[2, 5]), away_from_zero(r, &[2, 5])]),
        vec![("div", Box::new(|t, s| project(p(t, s, 0).div(&p(t, s, 1)).unwrap())))],
    );
    // operands kept apart so no entry sits at the switch point
    group(
        "binary",
        Box::new(|r| {
            let a = uniform(r, &[4, 3]);
            let gap = away_from_zero(r, &[4, 3]);
            let b = Tensor::from_fn([4, 3], |i| a.data()[i] + gap.data()[i]);
            vec![a, b]
        }),
        vec![
            ("minimum", Box::new(|t, s| project(p(t, s, 0).minimum(&p(t, s, 1)).unwrap()))),
            ("maximum", Box::new(|t, s| project(p(t, s, 0).maximum(&p(t, s, 1)).unwrap()))),
        ],
    );
    group(
        "unary",
        Box::new(|r| vec![away_from_zero(r, &[3, 5]), random_tensor(r, &[3, 5], 0.3, 2.0)]),
        vec![
            ("neg", Box::new(|t, s| project(p(t, s, 0).neg()))),
            ("relu", Box::new(|t, s| project(p(t, s, 0).relu()))),
            ("sigmoid", Box::new(|t, s| project(p(t, s, 0).sigmoid()))),
            ("log_sigmoid", Box::new(|t, s| project(p(t, s, 0).log_sigmoid()))),
            ("ln", Box::new(|t, s| project(p(t, s, 1).ln()))),
            ("exp", Box::new(|t, s| project(p(t, s, 0).exp()))),
            ("abs", Box::new(|t, s| project(p(t, s, 0).abs()))),
            ("square", Box::new(|t, s| project(p(t, s, 0).square()))),
            ("scale", Box::new(|t, s| project(p(t, s, 0).scale(-2.5)))),
            ("add_scalar", Box::new(|t, s| project(p(t, s, 0).add_scalar(0.7).square()))),
        ],
    );
    group(
        "matmul",
        Box::new(|r| {
            vec![
                uniform(r, &[3, 4]),
                uniform(r, &[4, 2]),
                uniform(r, &[2]),
                uniform(r, &[2, 3, 4]),
                uniform(r, &[2, 4, 5]),
            ]
        }),
        vec![
            ("matmul", Box::new(|t, s| project(p(t, s, 0).matmul(&p(t, s, 1)).unwrap()))),
            ("linear", Box::new(|t, s| project(p(t, s, 0).linear(&p(t, s, 1), &p(t, s, 2)).unwrap()))),
            ("batched matmul", Box::new(|t, s| project(p(t, s, 3).matmul(&p(t, s, 4)).unwrap()))),
            ("broadcast matmul", Box::new(|t, s| project(p(t, s, 3).matmul(&p(t, s, 1)).unwrap()))),
        ],
    );
    group(
        "softmax",
        Box::new(|r| vec![random_tensor(r, &[2, 3, 4], -2.0, 2.0)]),
        vec![
            ("softmax axis 0", Box::new(|t, s| project(p(t, s, 0).softmax(0).unwrap()))),
            ("softmax axis 1", Box::new(|t, s| project(p(t, s, 0).softmax(1).unwrap()))),
            ("softmax axis 2", Box::new(|t, s| project(p(t, s, 0).softmax(2).unwrap()))),
        ],
    );
    group(
        "layer_norm",
        Box::new(|r| {
            vec![
                random_tensor(r, &[3, 6], -2.0, 2.0),
                random_tensor(r, &[6], 0.5, 1.5),
                random_tensor(r, &[6], -0.5, 0.5),
            ]
        }),
        vec![(
            "layer_norm",
            Box::new(|t, s| project(p(t, s, 0).layer_norm(&p(t, s, 1), &p(t, s, 2), 1e-5).unwrap())),
        )],
    );
    group(
        "shape",
        Box::new(|r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 3, 2]), uniform(r, &[5, 3])]),
        vec![
            ("reshape", Box::new(|t, s| project(p(t, s, 0).reshape([6, 4]).unwrap().square()))),
            ("transpose", Box::new(|t, s| project(p(t, s, 0).transpose().unwrap().square()))),
            ("slice", Box::new(|t, s| project(p(t, s, 0).slice(2, 1, 2).unwrap().square()))),
            ("slice outer", Box::new(|t, s| project(p(t, s, 0).slice(0, 1, 1).unwrap().square()))),
            (
                "concat",
                Box::new(|t, s| project(t.concat(&[p(t, s, 0), p(t, s, 1)], 2).unwrap().square())),
            ),
            (
                "concat outer",
                Box::new(|t, s| project(t.concat(&[p(t, s, 0), p(t, s, 0).scale(2.0)], 0).unwrap().square())),
            ),
            (
                "select_rows",
                Box::new(|t, s| project(p(t, s, 2).select_rows(&[4, 0, 4, 2]).unwrap().square())),
            ),
            ("sum", Box::new(|t, s| p(t, s, 0).square().sum())),
            ("mean", Box::new(|t, s| p(t, s, 0).square().mean())),
        ],
    );
    group(
        "attention",
        Box::new(|r| vec![uniform(r, &[4, 8]), uniform(r, &[6, 8]), uniform(r, &[6, 8])]),
        vec![(
            "attention",
            Box::new(|t, s| {
                let scores = p(t, s, 0).matmul(&p(t, s, 1).transpose().unwrap()).unwrap().scale(0.35);
                project(scores.softmax(1).unwrap().matmul(&p(t, s, 2)).unwrap())
            }),
        )],
    );
    cases
}

/// Finite-difference check of the ops in `group` (all when `None`) on
/// `trials` random instances each; returns the number of ops checked.
pub fn op_gradients(group: Option<&str>, trials: u64) -> Result<usize, String> {
    let mut checked = 0;
    for case in op_cases().iter().filter(|c| group.is_none_or(|g| g == c.group)) {
        for seed in 0..trials {
            let s = param_store((case.make)(&mut rng(seed)));
            let c = gradient_check(&*case.loss, &s, None);
            ensure!(c.kinks == 0, "{}, trial {seed}: non-smooth probe {c:?}", case.name);
            ensure!(c.worst < OP_TOL, "{}, trial {seed}: {c:?}", case.name);
        }
        checked += 1;
    }
    Ok(checked)
}

/// Set loss through the whole tiny model (D=16, M=4, T=2, 16×16).
pub fn model_gradient(cfg: ModelConfig, seed: u64) -> Outcome {
    let base = Model::<f64>::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed);
    let frames: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&mut r, &[3, 16, 16], 0.0, 1.0)).collect();
    let timestamps = [1.5, 2.0];
    let egos: Vec<EgoMotionRecord> = if cfg.ego_fusion == EgoFusion::None {
        vec![]
    } else {
        timestamps
            .iter()
            .map(|&ts| EgoMotionRecord {
                translation: [3.0, -1.0],
                speed: 6.0,
                rotation: 0.02,
                timestamp: ts,
            })
            .collect()
    };
    let annos = random_annotations(&mut r, 2, 2);
    let weights = LossWeights::default();
    let f: LossFn<'_> = &|tape, s| {
        let mut m = base.clone();
        m.params = s.clone();
        let input = ModelInput {
            frames: &frames,
            timestamps: &timestamps,
            egos: &egos,
        };
        let out = m.pass(tape).forward(&input, false).unwrap();
        // heads carry only tape references
        let heads = out.heads.clone();
        set_loss(&heads, &annos, &weights).unwrap().0
    };
    let c = gradient_check(f, &base.params, Some(3));
    ensure!(c.worst < MODEL_TOL, "{:?}/{:?}/{:?}: {c:?}", cfg.variant, cfg.placement, cfg.ego_fusion);
    ensure!(c.kinks * 4 <= c.probes, "too many non-smooth probes: {c:?}");
    Ok(())
}

/// Model configurations of the end-to-end gradient check.
pub fn model_gradient_configs() -> Vec<(ModelConfig, u64)> {
    vec![
        (tiny(Variant::Sequential, Placement::Decoder, EgoFusion::AttendDecoder, 2), 11),
        (tiny(Variant::Joint, Placement::Both, EgoFusion::AddToFeatures, 2), 12),
        (tiny(Variant::Sequential, Placement::Encoder, EgoFusion::AttendEncoder, 2), 13),
    ]
}
