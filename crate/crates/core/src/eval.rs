//! Inference over a dataset and the metrics report.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSample;
use crate::error::Result;
use crate::metrics::{dataset_metrics, PredictedTube, Tube};
use crate::model::StgdModel;
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub m_tiou: f64,
    pub m_viou: f64,
    pub viou_at_03: f64,
    pub viou_at_05: f64,
    pub tp_trainable: usize,
    pub tp_total: usize,
    pub n_samples: usize,
}

/// Metrics for `(id, prediction, ground truth)` triples, reduced in id
/// order so that the input order does not matter.
pub fn report_from_predictions(
    mut items: Vec<(usize, PredictedTube, Tube)>,
    tp_trainable: usize,
    tp_total: usize,
) -> Result<EvalReport> {
    items.sort_by_key(|(id, _, _)| *id);
    let n = items.len();
    let pairs: Vec<(Tube, Tube)> = items.into_iter().map(|(_, p, g)| (p, g)).collect();
    let m = dataset_metrics(&pairs)?;
    Ok(EvalReport {
        m_tiou: m.m_tiou,
        m_viou: m.m_viou,
        viou_at_03: m.viou_at_03,
        viou_at_05: m.viou_at_05,
        tp_trainable,
        tp_total,
        n_samples: n,
    })
}

pub fn predict_all(
    model: &StgdModel,
    store: &ParamStore,
    samples: &[SyntheticSample],
) -> Result<Vec<PredictedTube>> {
    samples
        .iter()
        .map(|s| model.predict_tube(store, &s.batch))
        .collect()
}

pub fn evaluate(
    model: &StgdModel,
    store: &ParamStore,
    samples: &[SyntheticSample],
) -> Result<EvalReport> {
    let preds = predict_all(model, store, samples)?;
    let items = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.id, p, s.tube.clone()))
        .collect();
    report_from_predictions(items, store.count_trainable(), store.count_total())
}
