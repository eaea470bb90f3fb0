//! Deterministic Adam training over the trainable parameters only.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{generate_dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{spatial_loss, temporal_loss};
use crate::model::StgdModel;
use crate::rng::{derive_seed, seeded, uniform};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamId, ParamStore};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let ids = store.trainable_ids();
        let m: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| vec![0.0; store.get(id).numel()])
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            ids,
            v: m.clone(),
            m,
        }
    }

    /// Applies the gradients accumulated in `store` and clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *p -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step: usize,
    pub total: f64,
    pub temporal: f64,
    pub spatial: f64,
    pub val: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    pub logs: Vec<TrainLog>,
}

fn non_finite(step: usize, term: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric { op, .. } => Error::NonFiniteLoss {
            step,
            term: format!("{term} ({op})"),
        },
        other => other,
    }
}

/// Loss terms of one sample; gradients are added into `store` scaled by
/// `scale`.
pub fn sample_step(
    model: &StgdModel,
    store: &mut ParamStore,
    sample: &SyntheticSample,
    scale: f64,
    step: usize,
) -> Result<(f64, f64, f64)> {
    let c = &model.cfg;
    let (grads, terms) = {
        let mut g = Graph::new(store);
        let out = model
            .forward(&mut g, &sample.batch)
            .map_err(non_finite(step, "forward"))?;
        let t = temporal_loss(
            &mut g,
            &out.pred,
            &sample.tube,
            &c.loss_weights,
            c.boundary_sigma,
        )
        .map_err(non_finite(step, "temporal"))?;
        let s = spatial_loss(
            &mut g,
            out.pred.boxes,
            &sample.tube,
            &c.loss_weights,
            c.smooth_l1_beta,
        )
        .map_err(non_finite(step, "spatial"))?;
        let total = g.add(t, s).map_err(non_finite(step, "total"))?;
        let grads = g.backward(total).map_err(non_finite(step, "gradient"))?;
        (grads, (g.data(total)[0], g.data(t)[0], g.data(s)[0]))
    };
    store.accumulate(&grads, scale)?;
    Ok(terms)
}

/// Epoch-wise shuffled sample order, drawn from the config seed.
pub fn batch_order(seed: u64, n: usize, steps: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut rng = seeded(derive_seed(seed, "batches"));
    let mut perm: Vec<usize> = Vec::new();
    let mut pos = 0;
    (0..steps)
        .map(|_| {
            (0..batch_size.min(n))
                .map(|_| {
                    if pos == perm.len() {
                        perm = (0..n).collect();
                        perm.shuffle(&mut rng);
                        pos = 0;
                    }
                    pos += 1;
                    perm[pos - 1]
                })
                .collect()
        })
        .collect()
}

/// Runs `cfg.steps` optimizer steps. Every `log_every` steps (and at the
/// last step) a [`TrainLog`] is recorded and passed to `on_log`.
pub fn train(
    model: &StgdModel,
    store: &mut ParamStore,
    train_set: &[SyntheticSample],
    val_set: Option<&[SyntheticSample]>,
    mut on_log: impl FnMut(&TrainLog),
) -> Result<TrainHistory> {
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let c = &model.cfg;
    let mut adam = Adam::new(store, c.learning_rate, c.beta1, c.beta2, c.adam_eps);
    store.zero_grads();
    let mut history = TrainHistory::default();
    for (step, batch) in batch_order(c.seed, train_set.len(), c.steps, c.batch_size)
        .into_iter()
        .enumerate()
    {
        let scale = 1.0 / batch.len() as f64;
        let (mut total, mut temporal, mut spatial) = (0.0, 0.0, 0.0);
        for i in batch {
            let (a, b, s) = sample_step(model, store, &train_set[i], scale, step)?;
            total += a * scale;
            temporal += b * scale;
            spatial += s * scale;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                term: "total".into(),
            });
        }
        adam.step(store);
        history.losses.push(total);
        let done = step + 1;
        if done % c.log_every == 0 || done == c.steps {
            let val = match val_set {
                Some(v) => Some(evaluate(model, store, v)?),
                None => None,
            };
            let log = TrainLog {
                step: done,
                total,
                temporal,
                spatial,
                val,
            };
            on_log(&log);
            history.logs.push(log);
        }
    }
    Ok(history)
}

/// Adds seeded uniform noise of half-width `scale` to every trainable
/// tensor. Zero-initialized adapter outputs otherwise make most adapter
/// gradients exactly zero.
pub fn jitter_trainable(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = seeded(seed);
    for id in store.trainable_ids() {
        let t = store.get_mut(id);
        let noise = uniform(t.shape(), scale, &mut rng);
        t.data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(p, n)| *p += n);
    }
}

/// Finite-difference check of the total loss w.r.t. every trainable tensor
/// of a freshly built, jittered model on one synthetic clip.
pub fn check_model_gradients(
    cfg: &TrainConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (model, mut store) = StgdModel::build(cfg)?;
    jitter_trainable(
        &mut store,
        derive_seed(cfg.seed, "gradcheck"),
        GRADCHECK_JITTER,
    );
    let sample = generate_dataset(cfg, 1, derive_seed(cfg.seed, "gradcheck-data"))?.remove(0);
    let ids = store.trainable_ids();
    grad_check(
        &mut store,
        &ids,
        |g| Ok(model.loss(g, &sample.batch, &sample.tube)?.total),
        opts,
    )
}

pub const GRADCHECK_JITTER: f64 = 0.05;
