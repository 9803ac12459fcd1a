#![allow(dead_code)]

pub mod suites;

use futuredet::assignment::{Annotation, AnnotationSet, BBox};
use futuredet::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use futuredet::model::{EgoFusion, EgoMotionRecord, ModelConfig, Placement, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, with random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Scalar loss builder for the gradient checks.
pub type LossFn<'a> = &'a dyn for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Var<'t, f64>;

fn loss_value(f: LossFn<'_>, store: &ParamStore<f64>) -> f64 {
    let tape = Tape::new();
    f(&tape, store).value().item()
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug)]
pub struct GradCheck {
    pub worst: f64,
    pub at: String,
    pub probes: usize,
    /// Probes skipped because two step sizes disagree (a kink or an
    /// assignment switch lies within the step).
    pub kinks: usize,
}

/// Compares reverse-mode gradients with central differences on the checked
/// entries of every parameter, as relative error `|a - n| / max(|a|, |n|, 1e-5)`.
///
/// `per_param` limits how many entries per parameter are probed (spread
/// evenly); `None` checks all of them.
pub fn gradient_check(f: LossFn<'_>, store: &ParamStore<f64>, per_param: Option<usize>) -> GradCheck {
    let tape = Tape::new();
    let loss = f(&tape, store);
    let grads = tape.backward(loss).expect("backward");
    let central = |id: ParamId, i: usize, eps: f64| {
        let mut plus = store.clone();
        plus.get_mut(id).value.data_mut()[i] += eps;
        let mut minus = store.clone();
        minus.get_mut(id).value.data_mut()[i] -= eps;
        (loss_value(f, &plus) - loss_value(f, &minus)) / (2.0 * eps)
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-5);
    let mut out = GradCheck {
        worst: 0.0,
        at: String::new(),
        probes: 0,
        kinks: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        let n = p.value.len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k + (n / k) / 2).collect(),
            _ => (0..n).collect(),
        };
        let zeros = Tensor::zeros(p.value.shape().to_vec());
        let analytic = grads.get(id).unwrap_or(&zeros);
        for i in picks {
            out.probes += 1;
            let coarse = central(id, i, 1e-5);
            let fine = central(id, i, 2.5e-6);
            if rel(coarse, fine) > 1e-4 {
                if std::env::var("FD_DEBUG").is_ok() {
                    eprintln!("kink {}[{i}] coarse {coarse:e} fine {fine:e} analytic {:e}", p.name, analytic.data()[i]);
                }
                out.kinks += 1;
                continue;
            }
            let a = analytic.data()[i];
            let err = rel(a, fine);
            if err > out.worst {
                out.worst = err;
                out.at = format!("{}[{i}]: analytic {a:e}, numeric {fine:e}", p.name);
            }
        }
    }
    out
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Every injective map from `n` items into `0..m`.
pub fn injections(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn go(n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for j in 0..m {
            if !cur.contains(&j) {
                cur.push(j);
                go(n, m, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(n, m, &mut Vec::new(), &mut out);
    out
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
        rng.random_range(0.05..0.4),
        rng.random_range(0.05..0.4),
    )
}

pub fn random_annotations(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> AnnotationSet {
    AnnotationSet(
        (0..n)
            .map(|_| Annotation {
                class: rng.random_range(0..classes),
                bbox: random_box(rng),
            })
            .collect(),
    )
}

/// D=16, 2 heads, one encoder and two decoder layers, 4 slots, 16×16 frames.
pub fn tiny(variant: Variant, placement: Placement, ego: EgoFusion, frames: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 2,
        slots: 4,
        classes: 2,
        variant,
        placement,
        ego_fusion: ego,
        frames,
        patch: 4,
        image_height: 16,
        image_width: 16,
        ffn_dim: 32,
        ..ModelConfig::default()
    }
}

pub fn random_frames(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<Tensor<f64>> {
    (0..cfg.frames)
        .map(|_| random_tensor(rng, &[3, cfg.image_height, cfg.image_width], 0.0, 1.0))
        .collect()
}

pub fn timestamps(frames: usize) -> Vec<f64> {
    (0..frames).map(|k| 2.0 - 0.5 * (frames - 1 - k) as f64).collect()
}

pub fn egos(cfg: &ModelConfig, timestamps: &[f64]) -> Vec<EgoMotionRecord> {
    if cfg.ego_fusion == EgoFusion::None {
        return vec![];
    }
    timestamps
        .iter()
        .enumerate()
        .map(|(k, &t)| EgoMotionRecord {
            translation: [3.0 + k as f64, -1.0],
            speed: 6.0 + k as f64,
            rotation: 0.02,
            timestamp: t,
        })
        .collect()
}
