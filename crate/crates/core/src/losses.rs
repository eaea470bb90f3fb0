//! Boundary and box objectives, both as plain functions on values and as
//! differentiable graphs.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::metrics::{to_corners, BoxCxcywh, GroundTruthTube};
use crate::tensor::{Tape, Tensor, Var};

pub const KL_EPS: f64 = 1e-12;
pub const BCE_CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_e: f64,
    pub lambda_t: f64,
    pub lambda_box: f64,
    pub lambda_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_e: 1.0,
            lambda_t: 1.0,
            lambda_box: 5.0,
            lambda_giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_s: 0.0,
            lambda_e: 0.0,
            lambda_t: 0.0,
            lambda_box: 0.0,
            lambda_giou: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_e,
            self.lambda_t,
            self.lambda_box,
            self.lambda_giou,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(config_err(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "{name} is not a probability vector (sum {s})"
        )));
    }
    Ok(())
}

/// `Σ target·ln((target+eps)/(pred+eps))`.
pub fn kl_div(target: &[f64], pred: &[f64], eps: f64) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(dim_err(format!(
            "kl_div: lengths {} and {}",
            target.len(),
            pred.len()
        )));
    }
    check_distribution("target", target)?;
    check_distribution("pred", pred)?;
    Ok(target
        .iter()
        .zip(pred)
        .map(|(t, p)| t * ((t + eps) / (p + eps)).ln())
        .sum())
}

/// Mean binary cross-entropy of per-frame confidences against a 0/1 mask.
pub fn bce_mask(mask: &[f64], conf: &[f64]) -> Result<f64> {
    if mask.len() != conf.len() || mask.is_empty() {
        return Err(dim_err(format!(
            "bce_mask: lengths {} and {}",
            mask.len(),
            conf.len()
        )));
    }
    if let Some(p) = conf.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Validation(format!("confidence {p} outside (0, 1)")));
    }
    let total: f64 = mask
        .iter()
        .zip(conf)
        .map(|(y, p)| {
            let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / mask.len() as f64)
}

/// Discrete Gaussian over frame indices centred on `t`, renormalized.
pub fn gt_boundary_distribution(t: usize, frames: usize, sigma: f64) -> Result<Vec<f64>> {
    if t >= frames {
        return Err(Error::Validation(format!(
            "boundary {t} outside {frames} frames"
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(config_err("boundary sigma must be positive"));
    }
    let raw: Vec<f64> = (0..frames)
        .map(|i| {
            let d = i as f64 - t as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / s).collect())
}

/// GIoU of two corner-form boxes `[x1, y1, x2, y2]`.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    for r in [a, b] {
        if !(r[2] > r[0] && r[3] > r[1]) {
            return Err(Error::Validation(format!("box {r:?} has no area")));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok(inter / union - (hull - union) / hull)
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

/// Graph handles for one query's predictions: `start`, `end`, `conf` are
/// `[T]`, `boxes` is `[T×4]` in `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub start: Var,
    pub end: Var,
    pub conf: Var,
    pub boxes: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub temporal: Var,
    pub spatial: Var,
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let scaled = tape.scale(v, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| config_err("empty loss"))
}

fn kl_graph(tape: &mut Tape, target: &[f64], pred: Var) -> Result<Var> {
    let constant: f64 = target.iter().map(|t| t * (t + KL_EPS).ln()).sum();
    let shifted = tape.add_scalar(pred, KL_EPS)?;
    let logp = tape.log(shifted)?;
    let tgt = tape.constant(Tensor::new(&[target.len()], target.to_vec())?);
    let prod = tape.mul(tgt, logp)?;
    let cross = tape.sum(prod)?;
    let neg = tape.scale(cross, -1.0)?;
    tape.add_scalar(neg, constant)
}

fn bce_graph(tape: &mut Tape, mask: &[f64], conf: Var) -> Result<Var> {
    let n = mask.len();
    let lo = tape.constant(Tensor::full(&[n], BCE_CLIP));
    let hi = tape.constant(Tensor::full(&[n], 1.0 - BCE_CLIP));
    let p = tape.maximum(conf, lo)?;
    let p = tape.minimum(p, hi)?;
    let logp = tape.log(p)?;
    let one_minus = tape.scale(p, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let log1mp = tape.log(one_minus)?;
    let y = tape.constant(Tensor::new(&[n], mask.to_vec())?);
    let ny = tape.constant(Tensor::new(&[n], mask.iter().map(|v| 1.0 - v).collect())?);
    let a = tape.mul(y, logp)?;
    let b = tape.mul(ny, log1mp)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s)?;
    tape.scale(s, -1.0 / n as f64)
}

/// `λ_s·KL(start) + λ_e·KL(end) + λ_t·BCE(conf)` with Gaussian boundary
/// targets of width `sigma` and the segment mask.
pub fn temporal_loss(
    tape: &mut Tape,
    pred: &PredictionVars,
    gt: &GroundTruthTube,
    w: &LossWeights,
    sigma: f64,
) -> Result<Var> {
    let frames = tape.shape(pred.start)[0];
    for v in [pred.end, pred.conf] {
        if tape.shape(v) != [frames] {
            return Err(dim_err(format!(
                "temporal_loss: expected [{frames}], got {:?}",
                tape.shape(v)
            )));
        }
    }
    if gt.t_e >= frames {
        return Err(Error::Validation(format!(
            "segment ends at {} but clip has {frames} frames",
            gt.t_e
        )));
    }
    let start_t = gt_boundary_distribution(gt.t_s, frames, sigma)?;
    let end_t = gt_boundary_distribution(gt.t_e, frames, sigma)?;
    let ks = kl_graph(tape, &start_t, pred.start)?;
    let ke = kl_graph(tape, &end_t, pred.end)?;
    let bce = bce_graph(tape, &gt.mask(frames), pred.conf)?;
    weighted_sum(
        tape,
        &[(w.lambda_s, ks), (w.lambda_e, ke), (w.lambda_t, bce)],
    )
}

fn column(tape: &mut Tape, x: Var, i: usize) -> Result<Var> {
    tape.narrow(x, i, 1)
}

/// Corner coordinates `(x1, y1, x2, y2)` as `[n×1]` columns.
fn corners_graph(tape: &mut Tape, boxes: Var) -> Result<[Var; 4]> {
    let cx = column(tape, boxes, 0)?;
    let cy = column(tape, boxes, 1)?;
    let w = column(tape, boxes, 2)?;
    let h = column(tape, boxes, 3)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    Ok([
        tape.sub(cx, hw)?,
        tape.sub(cy, hh)?,
        tape.add(cx, hw)?,
        tape.add(cy, hh)?,
    ])
}

/// Per-row GIoU of `[n×4]` box sets, shape `[n×1]`.
fn giou_graph(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let a = corners_graph(tape, pred)?;
    let b = corners_graph(tape, gt)?;
    let ix2 = tape.minimum(a[2], b[2])?;
    let ix1 = tape.maximum(a[0], b[0])?;
    let iy2 = tape.minimum(a[3], b[3])?;
    let iy1 = tape.maximum(a[1], b[1])?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let area = |tape: &mut Tape, c: &[Var; 4]| -> Result<Var> {
        let w = tape.sub(c[2], c[0])?;
        let h = tape.sub(c[3], c[1])?;
        tape.mul(w, h)
    };
    let area_a = area(tape, &a)?;
    let area_b = area(tape, &b)?;
    let union = tape.add(area_a, area_b)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let hx2 = tape.maximum(a[2], b[2])?;
    let hx1 = tape.minimum(a[0], b[0])?;
    let hy2 = tape.maximum(a[3], b[3])?;
    let hy1 = tape.minimum(a[1], b[1])?;
    let hull = area(tape, &[hx1, hy1, hx2, hy2])?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    tape.sub(iou, penalty)
}

/// Mean over in-segment frames of `λ_box·smoothL1 + λ_giou·(1 − GIoU)`;
/// smooth-L1 is summed over the four coordinates.
pub fn spatial_loss(
    tape: &mut Tape,
    boxes: Var,
    gt: &GroundTruthTube,
    w: &LossWeights,
    beta: f64,
) -> Result<Var> {
    let s = tape.shape(boxes).to_vec();
    if s.len() != 2 || s[1] != 4 {
        return Err(dim_err(format!(
            "spatial_loss: boxes must be [T×4], got {s:?}"
        )));
    }
    gt.validate()?;
    if gt.t_e >= s[0] {
        return Err(Error::Validation(format!(
            "segment ends at {} but clip has {} frames",
            gt.t_e, s[0]
        )));
    }
    let n = gt.len();
    let rows: Vec<usize> = (gt.t_s..=gt.t_e).collect();
    let pred = tape.take_rows(boxes, &rows)?;
    let gt_flat: Vec<f64> = gt.boxes.iter().flatten().copied().collect();
    let target = tape.constant(Tensor::new(&[n, 4], gt_flat)?);
    let diff = tape.sub(pred, target)?;
    let l1 = tape.smooth_l1(diff, beta)?;
    let l1 = tape.sum(l1)?;
    let l1 = tape.scale(l1, 1.0 / n as f64)?;
    let g = giou_graph(tape, pred, target)?;
    let g = tape.sum(g)?;
    // mean(1 − GIoU) = 1 − mean(GIoU)
    let g = tape.scale(g, -1.0 / n as f64)?;
    let g = tape.add_scalar(g, 1.0)?;
    weighted_sum(tape, &[(w.lambda_box, l1), (w.lambda_giou, g)])
}

/// Temporal plus spatial loss for one text query.
pub fn query_loss(
    tape: &mut Tape,
    pred: &PredictionVars,
    gt: &GroundTruthTube,
    w: &LossWeights,
    sigma: f64,
    beta: f64,
) -> Result<LossVars> {
    let temporal = temporal_loss(tape, pred, gt, w, sigma)?;
    let spatial = spatial_loss(tape, pred.boxes, gt, w, beta)?;
    let total = tape.add(temporal, spatial)?;
    Ok(LossVars {
        total,
        temporal,
        spatial,
    })
}

/// Sum of per-query losses.
pub fn total_loss(tape: &mut Tape, per_query: &[LossVars]) -> Result<LossVars> {
    let first = per_query
        .first()
        .ok_or_else(|| config_err("total_loss needs at least one query"))?;
    let mut acc = *first;
    for q in &per_query[1..] {
        acc = LossVars {
            total: tape.add(acc.total, q.total)?,
            temporal: tape.add(acc.temporal, q.temporal)?,
            spatial: tape.add(acc.spatial, q.spatial)?,
        };
    }
    Ok(acc)
}

/// Value of [`temporal_loss`] for concrete predictions.
pub fn temporal_loss_value(
    start: &[f64],
    end: &[f64],
    conf: &[f64],
    gt: &GroundTruthTube,
    w: &LossWeights,
    sigma: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mk = |tape: &mut Tape, v: &[f64]| -> Result<Var> {
        Ok(tape.constant(Tensor::new(&[v.len()], v.to_vec())?))
    };
    let start = mk(&mut tape, start)?;
    let end = mk(&mut tape, end)?;
    let conf = mk(&mut tape, conf)?;
    let boxes = tape.constant(Tensor::zeros(&[1, 4]));
    let v = temporal_loss(
        &mut tape,
        &PredictionVars {
            start,
            end,
            conf,
            boxes,
        },
        gt,
        w,
        sigma,
    )?;
    Ok(tape.data(v)[0])
}

/// Value of [`spatial_loss`] for concrete `(cx, cy, w, h)` boxes.
pub fn spatial_loss_value(
    boxes: &[BoxCxcywh],
    gt: &GroundTruthTube,
    w: &LossWeights,
    beta: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let flat: Vec<f64> = boxes.iter().flatten().copied().collect();
    let b = tape.constant(Tensor::new(&[boxes.len(), 4], flat)?);
    let v = spatial_loss(&mut tape, b, gt, w, beta)?;
    Ok(tape.data(v)[0])
}

/// GIoU of two `(cx, cy, w, h)` boxes.
pub fn giou_cxcywh(a: &BoxCxcywh, b: &BoxCxcywh) -> Result<f64> {
    giou(&to_corners(a), &to_corners(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn kl_examples() {
        assert!(kl_div(&[0.2, 0.8], &[0.2, 0.8], KL_EPS).unwrap().abs() < 1e-9);
        assert!((kl_div(&[1.0, 0.0], &[0.5, 0.5], KL_EPS).unwrap() - LN_2).abs() < 1e-9);
        assert!(matches!(
            kl_div(&[0.5, 0.6], &[0.5, 0.5], KL_EPS),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_mask(&[1.0, 1.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-9);
        assert!(bce_mask(&[1.0], &[1.0]).is_err());
        assert!(bce_mask(&[1.0, 0.0], &[1.0 - 1e-15, 1e-15]).unwrap() < 1e-10);
    }

    #[test]
    fn boundary_distribution_example() {
        let d = gt_boundary_distribution(2, 5, 1.0).unwrap();
        let expected = [0.054489, 0.244201, 0.402620, 0.244201, 0.054489];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{d:?}");
        }
        let sharp = gt_boundary_distribution(3, 6, 1e-6).unwrap();
        assert_eq!(sharp, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn giou_examples() {
        assert_eq!(
            giou(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            1.0
        );
        assert!((giou(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 2.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        assert!(giou(&[0.0, 0.0, 0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn graph_giou_matches_scalar() {
        let a = [0.4, 0.5, 0.3, 0.2];
        let b = [0.45, 0.55, 0.2, 0.3];
        let gt = GroundTruthTube::new(0, 0, vec![b]).unwrap();
        let w = LossWeights {
            lambda_giou: 1.0,
            ..LossWeights::zero()
        };
        let loss = spatial_loss_value(&[a], &gt, &w, 1.0 / 9.0).unwrap();
        assert!((loss - (1.0 - giou_cxcywh(&a, &b).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero() {
        let gt = GroundTruthTube::new(1, 2, vec![[0.5; 4]; 2]).unwrap();
        let u = [0.25; 4];
        assert_eq!(
            temporal_loss_value(&u, &u, &u, &gt, &LossWeights::zero(), 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn rejects_negative_weights() {
        assert!(LossWeights {
            lambda_box: -1.0,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
    }
}
