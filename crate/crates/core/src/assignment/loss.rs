use serde::{Deserialize, Serialize};

use super::boxes::{giou, AnnotationSet};
use super::hungarian::{hungarian, Assignment, CostMatrix};
use crate::diffcore::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::PredictionSet;

/// Weights of the matching cost and the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
        }
    }
}

/// Focusing exponent of the focal terms.
pub const FOCAL_GAMMA: f64 = 2.0;

const PROB_FLOOR: f64 = 1e-12;

/// Focal matching cost for assigning a slot with probability `p` of the
/// annotation's class: positive focal term minus the negative one.
pub fn focal_cost(p: f64, alpha: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let pos = alpha * (1.0 - p).powf(FOCAL_GAMMA) * -p.ln();
    let neg = (1.0 - alpha) * p.powf(FOCAL_GAMMA) * -(1.0 - p).ln();
    pos - neg
}

/// Slot × annotation matching costs.
pub fn build_cost_matrix<F: Real>(
    preds: &PredictionSet<F>,
    annos: &AnnotationSet,
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let m = preds.slots();
    let classes = preds.classes();
    if let Some(a) = annos.iter().find(|a| a.class >= classes) {
        return Err(Error::Input(format!(
            "annotation class {} outside [0, {classes})",
            a.class
        )));
    }
    let mut data = Vec::with_capacity(m * annos.len());
    for j in 0..m {
        let bj = preds.bbox(j);
        for a in annos.iter() {
            let p = preds.prob(j, a.class);
            let l1 = (bj.cx - a.bbox.cx).abs()
                + (bj.cy - a.bbox.cy).abs()
                + (bj.w - a.bbox.w).abs()
                + (bj.h - a.bbox.h).abs();
            data.push(
                weights.class * focal_cost(p, weights.focal_alpha)
                    + weights.l1 * l1
                    + weights.giou * (1.0 - giou(&bj, &a.bbox)),
            );
        }
    }
    CostMatrix::new(m, annos.len(), data)
}

/// Hungarian matching of one prediction set against its annotations.
pub fn match_predictions<F: Real>(
    preds: &PredictionSet<F>,
    annos: &AnnotationSet,
    weights: &LossWeights,
) -> Result<Assignment> {
    if annos.is_empty() {
        return Ok(Assignment::background(preds.slots()));
    }
    hungarian(&build_cost_matrix(preds, annos, weights)?)
}

/// Differentiable head outputs of one decoder layer: class logits `[M, C]`
/// and squashed boxes `[M, 4]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'t, F: Real> {
    pub logits: Var<'t, F>,
    pub boxes: Var<'t, F>,
}

impl<F: Real> HeadOutput<'_, F> {
    pub fn predictions(&self) -> PredictionSet<F> {
        PredictionSet::new(
            self.logits.value().map(|v| {
                let e = (-v.abs()).exp();
                if v >= F::zero() {
                    F::one() / (F::one() + e)
                } else {
                    e / (F::one() + e)
                }
            }),
            self.boxes.value(),
        )
        .expect("head shapes")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Weighted loss summed over the final and every auxiliary layer.
    pub total: f64,
    /// Unweighted terms of the final layer.
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Weighted totals of the auxiliary layers, shallowest first.
    pub aux_totals: Vec<f64>,
}

struct LayerLoss<'t, F: Real> {
    total: Var<'t, F>,
    class: f64,
    l1: f64,
    giou: f64,
}

fn layer_loss<'t, F: Real>(
    head: &HeadOutput<'t, F>,
    assignment: &Assignment,
    annos: &AnnotationSet,
    weights: &LossWeights,
) -> Result<LayerLoss<'t, F>> {
    let tape = head.logits.tape();
    let shape = head.logits.shape();
    let (m, c) = (shape[0], shape[1]);
    let norm = F::of(1.0 / annos.len().max(1) as f64);
    let alpha = F::of(weights.focal_alpha);

    let mut target = vec![F::zero(); m * c];
    for (slot, a) in assignment.pairs() {
        target[slot * c + annos.0[a].class] = F::one();
    }
    let target = Tensor::new(vec![m, c], target)?;
    let not_target = target.map(|t| F::one() - t);
    let target = tape.constant(target);
    let not_target = tape.constant(not_target);

    let p = head.logits.sigmoid();
    let log_p = head.logits.log_sigmoid();
    let log_not_p = head.logits.neg().log_sigmoid();
    let pos = p
        .neg()
        .add_scalar(F::one())
        .square()
        .mul(&log_p)?
        .mul(&target)?
        .scale(-alpha);
    let neg = p
        .square()
        .mul(&log_not_p)?
        .mul(&not_target)?
        .scale(alpha - F::one());
    let class = pos.add(&neg)?.sum().scale(norm);
    let mut total = class.scale(F::of(weights.class));
    let class_value = class.value().item().as_f64();

    let pairs = assignment.pairs();
    let (mut l1_value, mut giou_value) = (0.0, 0.0);
    if !pairs.is_empty() {
        let slots: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut tb = Vec::with_capacity(pairs.len() * 4);
        for &(_, a) in &pairs {
            tb.extend(annos.0[a].bbox.to_array().map(F::of));
        }
        let n = pairs.len();
        let target_boxes = Tensor::new(vec![n, 4], tb)?;
        let pred = head.boxes.select_rows(&slots)?;
        let l1 = pred
            .sub(&tape.constant(target_boxes.clone()))?
            .abs()
            .sum()
            .scale(norm);
        let gi = giou_rows(&pred, &target_boxes)?;
        let giou_term = gi.neg().add_scalar(F::one()).sum().scale(norm);
        l1_value = l1.value().item().as_f64();
        giou_value = giou_term.value().item().as_f64();
        total = total
            .add(&l1.scale(F::of(weights.l1)))?
            .add(&giou_term.scale(F::of(weights.giou)))?;
    }
    Ok(LayerLoss {
        total,
        class: class_value,
        l1: l1_value,
        giou: giou_value,
    })
}

/// Differentiable GIoU between predicted rows `[n, 4]` and constant targets.
fn giou_rows<'t, F: Real>(pred: &Var<'t, F>, target: &Tensor<F>) -> Result<Var<'t, F>> {
    let tape = pred.tape();
    let n = target.shape()[0];
    let half = F::of(0.5);
    let col = |k: usize| pred.slice(1, k, 1);
    let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let x1 = cx.sub(&w.scale(half))?;
    let y1 = cy.sub(&h.scale(half))?;
    let x2 = cx.add(&w.scale(half))?;
    let y2 = cy.add(&h.scale(half))?;

    let mut tc = [vec![], vec![], vec![], vec![]];
    let mut tarea = Vec::with_capacity(n);
    for r in 0..n {
        let b = target.row(r);
        let (bw, bh) = (b[2].max(F::zero()), b[3].max(F::zero()));
        tc[0].push(b[0] - half * bw);
        tc[1].push(b[1] - half * bh);
        tc[2].push(b[0] + half * bw);
        tc[3].push(b[1] + half * bh);
        tarea.push(bw * bh);
    }
    let konst = |v: Vec<F>| -> Result<Var<'t, F>> { Ok(tape.constant(Tensor::new(vec![n, 1], v)?)) };
    let [tx1, ty1, tx2, ty2] = tc;
    let (tx1, ty1, tx2, ty2) = (konst(tx1)?, konst(ty1)?, konst(tx2)?, konst(ty2)?);
    let tarea = konst(tarea)?;

    let iw = x2.minimum(&tx2)?.sub(&x1.maximum(&tx1)?)?.relu();
    let ih = y2.minimum(&ty2)?.sub(&y1.maximum(&ty1)?)?.relu();
    let inter = iw.mul(&ih)?;
    let area = w.relu().mul(&h.relu())?;
    let tiny = tape.constant(Tensor::scalar(F::of(1e-12)));
    let union = area.add(&tarea)?.sub(&inter)?.maximum(&tiny)?;
    let hw = x2.maximum(&tx2)?.sub(&x1.minimum(&tx1)?)?;
    let hh = y2.maximum(&ty2)?.sub(&y1.minimum(&ty1)?)?;
    let hull = hw.mul(&hh)?.maximum(&tiny)?;
    let iou = inter.div(&union)?;
    iou.sub(&hull.sub(&union)?.div(&hull)?)
}

/// Set-prediction loss with deep supervision.
///
/// `outputs` lists the head outputs of every decoder layer, final layer last;
/// each layer is matched and scored on its own. Returns the differentiable
/// total and a breakdown.
pub fn set_loss<'t, F: Real>(
    outputs: &[HeadOutput<'t, F>],
    annos: &AnnotationSet,
    weights: &LossWeights,
) -> Result<(Var<'t, F>, LossBreakdown)> {
    let (last, aux) = outputs
        .split_last()
        .ok_or_else(|| Error::Contract("set_loss needs at least one head output".into()))?;
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var<'t, F>> = None;
    for head in aux {
        let assignment = match_predictions(&head.predictions(), annos, weights)?;
        let l = layer_loss(head, &assignment, annos, weights)?;
        breakdown.aux_totals.push(l.total.value().item().as_f64());
        total = Some(match total {
            Some(t) => t.add(&l.total)?,
            None => l.total,
        });
    }
    let assignment = match_predictions(&last.predictions(), annos, weights)?;
    let l = layer_loss(last, &assignment, annos, weights)?;
    breakdown.class = l.class;
    breakdown.l1 = l.l1;
    breakdown.giou = l.giou;
    let total = match total {
        Some(t) => t.add(&l.total)?,
        None => l.total,
    };
    breakdown.total = total.value().item().as_f64();
    Ok((total, breakdown))
}
