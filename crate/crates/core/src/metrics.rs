//! Tube representation and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Normalized `(cx, cy, w, h)` box.
pub type BoxCxcywh = [f64; 4];

/// Inclusive temporal segment plus one box per in-segment frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub t_s: usize,
    pub t_e: usize,
    pub boxes: Vec<BoxCxcywh>,
}

pub type PredictedTube = Tube;
pub type GroundTruthTube = Tube;

impl Tube {
    pub fn new(t_s: usize, t_e: usize, boxes: Vec<BoxCxcywh>) -> Result<Self> {
        let tube = Tube { t_s, t_e, boxes };
        tube.validate()?;
        Ok(tube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_s > self.t_e {
            return Err(Error::Validation(format!(
                "inverted interval [{}, {}]",
                self.t_s, self.t_e
            )));
        }
        if self.boxes.len() != self.len() {
            return Err(Error::Validation(format!(
                "tube [{}, {}] needs {} boxes, has {}",
                self.t_s,
                self.t_e,
                self.len(),
                self.boxes.len()
            )));
        }
        for b in &self.boxes {
            if b.iter().any(|v| !v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
                return Err(Error::Validation(format!("invalid box {b:?}")));
            }
        }
        Ok(())
    }

    /// Number of frames in the segment.
    pub fn len(&self) -> usize {
        self.t_e - self.t_s + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn box_at(&self, t: usize) -> Option<&BoxCxcywh> {
        if (self.t_s..=self.t_e).contains(&t) {
            self.boxes.get(t - self.t_s)
        } else {
            None
        }
    }

    /// Per-frame segment mask of length `frames`.
    pub fn mask(&self, frames: usize) -> Vec<f64> {
        (0..frames)
            .map(|t| {
                if (self.t_s..=self.t_e).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub fn to_corners(b: &BoxCxcywh) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// IoU of two `(cx, cy, w, h)` boxes; 0 when the union is empty.
pub fn box_iou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (a, b) = (to_corners(a), to_corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn check_interval(s: usize, e: usize) -> Result<()> {
    if s > e {
        return Err(Error::Validation(format!("inverted interval [{s}, {e}]")));
    }
    Ok(())
}

/// Temporal IoU of inclusive frame intervals.
pub fn t_iou(pred: (usize, usize), gt: (usize, usize)) -> Result<f64> {
    check_interval(pred.0, pred.1)?;
    check_interval(gt.0, gt.1)?;
    let inter = (pred.1.min(gt.1) + 1).saturating_sub(pred.0.max(gt.0));
    let union = (pred.1 - pred.0 + 1) + (gt.1 - gt.0 + 1) - inter;
    Ok(inter as f64 / union as f64)
}

/// Box IoU summed over the shared frames, divided by the frame count of the
/// union of both segments.
pub fn v_iou(pred: &Tube, gt: &Tube) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let lo = pred.t_s.max(gt.t_s);
    let hi = pred.t_e.min(gt.t_e);
    let inter = (hi + 1).saturating_sub(lo);
    let union = pred.len() + gt.len() - inter;
    let total: f64 = (lo..=hi)
        .filter(|_| inter > 0)
        .map(|t| box_iou(pred.box_at(t).unwrap(), gt.box_at(t).unwrap()))
        .sum();
    Ok(total / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub m_tiou: f64,
    pub m_viou: f64,
    pub viou_at_03: f64,
    pub viou_at_05: f64,
}

/// Means of per-sample tIoU and vIoU; `vIoU@R` counts samples with
/// vIoU strictly above `R`.
pub fn dataset_metrics(pairs: &[(PredictedTube, GroundTruthTube)]) -> Result<DatasetMetrics> {
    if pairs.is_empty() {
        return Err(Error::Validation("no samples to evaluate".into()));
    }
    let mut tious = Vec::with_capacity(pairs.len());
    let mut vious = Vec::with_capacity(pairs.len());
    for (p, g) in pairs {
        tious.push(t_iou((p.t_s, p.t_e), (g.t_s, g.t_e))?);
        vious.push(v_iou(p, g)?);
    }
    let n = pairs.len() as f64;
    let above = |r: f64| vious.iter().filter(|&&v| v > r).count() as f64 / n;
    Ok(DatasetMetrics {
        m_tiou: tious.iter().sum::<f64>() / n,
        m_viou: vious.iter().sum::<f64>() / n,
        viou_at_03: above(0.3),
        viou_at_05: above(0.5),
    })
}

/// Element count over all tensors with `requires_grad = true`.
pub fn count_trainable_params(store: &ParamStore) -> usize {
    store.count_trainable()
}
