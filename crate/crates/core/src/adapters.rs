//! Residual bottleneck adapters and low-rank (LoRA) projections, the only
//! trainable insertions into the frozen backbone.
//!
//! Every adapter computes `x + branch(x)` where the branch ends in a
//! down-projection that starts at zero, so a fresh adapter is an exact
//! identity map while gradients still reach every branch weight.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::rng::{derive_seed, seeded, uniform};
use crate::tensor::{linear, Graph, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// `Z + Conv1d(Z·W_up)·W_down` along time.
    Temporal,
    /// `Q + Conv1d(Δ_t(Q)·W_up)·W_down` on forward frame differences.
    TemporalDiff,
    /// Parallel per-frame conv2d and pooled conv1d branches, fused by addition.
    SpatioTemporal,
}

impl AdapterKind {
    /// Closed-form parameter count for channel width `dim`, bottleneck
    /// `hidden` and kernel size `k`.
    pub fn param_count(self, dim: usize, hidden: usize, k: usize) -> usize {
        let projections = dim * hidden + hidden + hidden * dim + dim;
        let temporal = hidden * hidden * k + hidden;
        match self {
            AdapterKind::Temporal | AdapterKind::TemporalDiff => projections + temporal,
            AdapterKind::SpatioTemporal => {
                projections + temporal + hidden * hidden * k * k + hidden
            }
        }
    }
}

/// Parameter handles for one adapter instance.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub kind: AdapterKind,
    pub dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub conv_t: (ParamId, ParamId),
    pub conv_s: Option<(ParamId, ParamId)>,
    pub w_down: ParamId,
    pub b_down: ParamId,
}

impl AdapterParams {
    pub fn ratio(&self) -> usize {
        self.dim / self.hidden
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_up, self.b_up, self.conv_t.0, self.conv_t.1];
        if let Some((w, b)) = self.conv_s {
            ids.extend([w, b]);
        }
        ids.extend([self.w_down, self.b_down]);
        ids
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| store.get(id).numel())
            .sum()
    }
}

/// Registers a fresh adapter under `prefix` with the default kernel size.
pub fn init_adapter(
    store: &mut ParamStore,
    prefix: &str,
    kind: AdapterKind,
    dim: usize,
    ratio: usize,
    seed: u64,
) -> Result<AdapterParams> {
    init_adapter_with_kernel(store, prefix, kind, dim, ratio, DEFAULT_KERNEL, seed)
}

/// Registers a fresh adapter. `W_up` and the branch kernels are drawn from
/// `U(−1/√fan_in, 1/√fan_in)`; `W_down` and every bias start at zero.
pub fn init_adapter_with_kernel(
    store: &mut ParamStore,
    prefix: &str,
    kind: AdapterKind,
    dim: usize,
    ratio: usize,
    kernel: usize,
    seed: u64,
) -> Result<AdapterParams> {
    if ratio == 0 || dim == 0 || !dim.is_multiple_of(ratio) {
        return Err(config_err(format!(
            "bottleneck ratio {ratio} must divide channel width {dim}"
        )));
    }
    if kernel.is_multiple_of(2) {
        return Err(config_err(format!(
            "adapter kernel size {kernel} must be odd"
        )));
    }
    let hidden = dim / ratio;
    let mut rng = seeded(derive_seed(seed, prefix));
    let w_up = store.trainable(
        format!("{prefix}.w_up"),
        uniform(&[dim, hidden], 1.0 / (dim as f64).sqrt(), &mut rng),
    )?;
    let b_up = store.trainable(format!("{prefix}.b_up"), Tensor::zeros(&[hidden]))?;
    let conv_s = if kind == AdapterKind::SpatioTemporal {
        let bound = 1.0 / ((hidden * kernel * kernel) as f64).sqrt();
        let w = store.trainable(
            format!("{prefix}.conv2d.weight"),
            uniform(&[hidden, hidden, kernel, kernel], bound, &mut rng),
        )?;
        let b = store.trainable(format!("{prefix}.conv2d.bias"), Tensor::zeros(&[hidden]))?;
        Some((w, b))
    } else {
        None
    };
    let bound = 1.0 / ((hidden * kernel) as f64).sqrt();
    let wt = store.trainable(
        format!("{prefix}.conv1d.weight"),
        uniform(&[hidden, hidden, kernel], bound, &mut rng),
    )?;
    let bt = store.trainable(format!("{prefix}.conv1d.bias"), Tensor::zeros(&[hidden]))?;
    let w_down = store.trainable(format!("{prefix}.w_down"), Tensor::zeros(&[hidden, dim]))?;
    let b_down = store.trainable(format!("{prefix}.b_down"), Tensor::zeros(&[dim]))?;
    Ok(AdapterParams {
        kind,
        dim,
        hidden,
        kernel,
        w_up,
        b_up,
        conv_t: (wt, bt),
        conv_s,
        w_down,
        b_down,
    })
}

fn check_width(g: &Graph<'_>, x: Var, p: &AdapterParams) -> Result<()> {
    let c = *g.shape(x).last().unwrap();
    if c != p.dim {
        return Err(dim_err(format!(
            "adapter expects width {}, input has shape {:?}",
            p.dim,
            g.shape(x)
        )));
    }
    Ok(())
}

fn temporal_branch(g: &mut Graph<'_>, x: Var, p: &AdapterParams) -> Result<Var> {
    let (w_up, b_up) = (g.param(p.w_up), g.param(p.b_up));
    let (wt, bt) = (g.param(p.conv_t.0), g.param(p.conv_t.1));
    let (w_down, b_down) = (g.param(p.w_down), g.param(p.b_down));
    let up = linear(g, x, w_up, Some(b_up))?;
    let conv = g.conv1d(up, wt, bt)?;
    linear(g, conv, w_down, Some(b_down))
}

/// Temporal adapter on `[T×D]`, or on `[T×B×D]` with weights shared across
/// the `B` token positions.
pub fn temporal_adapter(g: &mut Graph<'_>, z: Var, p: &AdapterParams) -> Result<Var> {
    check_width(g, z, p)?;
    let branch = temporal_branch(g, z, p)?;
    g.add(z, branch)
}

/// Forward difference along axis 0: row `t` is `Q[t+1] − Q[t]`, the final
/// row is zero.
pub fn temporal_diff_operator(g: &mut Graph<'_>, q: Var) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    let t = shape[0];
    let width: usize = shape[1..].iter().product();
    let mut diff = Tensor::zeros(&[t, t]);
    for i in 0..t.saturating_sub(1) {
        diff.data_mut()[i * t + i] = -1.0;
        diff.data_mut()[i * t + i + 1] = 1.0;
    }
    let diff = g.constant(diff);
    let flat = g.reshape(q, &[t, width])?;
    let out = g.matmul(diff, flat)?;
    g.reshape(out, &shape)
}

/// Temporal-difference adapter on `[T×D]` or `[T×B×D]`.
pub fn temporal_diff_adapter(g: &mut Graph<'_>, q: Var, p: &AdapterParams) -> Result<Var> {
    check_width(g, q, p)?;
    let delta = temporal_diff_operator(g, q)?;
    let branch = temporal_branch(g, delta, p)?;
    g.add(q, branch)
}

/// S-T adapter on `[T×H×W×C]`.
pub fn st_adapter(g: &mut Graph<'_>, z: Var, p: &AdapterParams) -> Result<Var> {
    check_width(g, z, p)?;
    let shape = g.shape(z).to_vec();
    let [t, h, w, _] = shape[..] else {
        return Err(dim_err(format!(
            "st_adapter expects [T×H×W×C], got {shape:?}"
        )));
    };
    let (ws, bs) = p
        .conv_s
        .ok_or_else(|| config_err("st_adapter needs a spatio-temporal adapter"))?;
    let (w_up, b_up) = (g.param(p.w_up), g.param(p.b_up));
    let (ws, bs) = (g.param(ws), g.param(bs));
    let (wt, bt) = (g.param(p.conv_t.0), g.param(p.conv_t.1));
    let (w_down, b_down) = (g.param(p.w_down), g.param(p.b_down));

    let up = linear(g, z, w_up, Some(b_up))?;
    let spatial = g.conv2d(up, ws, bs)?;
    let tokens = g.reshape(up, &[t, h * w, p.hidden])?;
    let pooled = g.mean_axis(tokens, 1)?;
    let temporal = g.conv1d(pooled, wt, bt)?;
    let spread = g.repeat_axis1(temporal, h * w)?;
    let spread = g.reshape(spread, &[t, h, w, p.hidden])?;
    let fused = g.add(spatial, spread)?;
    let down = linear(g, fused, w_down, Some(b_down))?;
    g.add(z, down)
}

/// Dispatches on the adapter kind.
pub fn apply_adapter(g: &mut Graph<'_>, x: Var, p: &AdapterParams) -> Result<Var> {
    match p.kind {
        AdapterKind::Temporal => temporal_adapter(g, x, p),
        AdapterKind::TemporalDiff => temporal_diff_adapter(g, x, p),
        AdapterKind::SpatioTemporal => st_adapter(g, x, p),
    }
}

/// Low-rank update `(α/r)·A·B` around a frozen projection.
#[derive(Clone, Debug)]
pub struct LoraParams {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraParams {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.a, self.b]
    }
}

/// Registers LoRA factors for a `d_in × d_out` projection: `A` uniform with
/// bound `1/√d_in`, `B` zero.
pub fn init_lora(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraParams> {
    if rank == 0 || rank >= d_in.min(d_out) {
        return Err(config_err(format!(
            "LoRA rank {rank} must be in [1, {})",
            d_in.min(d_out)
        )));
    }
    let mut rng = seeded(derive_seed(seed, prefix));
    let a = store.trainable(
        format!("{prefix}.lora_a"),
        uniform(&[d_in, rank], 1.0 / (d_in as f64).sqrt(), &mut rng),
    )?;
    let b = store.trainable(format!("{prefix}.lora_b"), Tensor::zeros(&[rank, d_out]))?;
    Ok(LoraParams { a, b, rank, alpha })
}

/// `x·W_frozen + (α/r)·x·A·B`.
pub fn lora_linear(g: &mut Graph<'_>, x: Var, w_frozen: Var, q: &LoraParams) -> Result<Var> {
    let (a, b) = (g.param(q.a), g.param(q.b));
    let (ws, as_, bs) = (
        g.shape(w_frozen).to_vec(),
        g.shape(a).to_vec(),
        g.shape(b).to_vec(),
    );
    if as_[0] != ws[0] || bs[1] != ws[1] || as_[1] != q.rank {
        return Err(dim_err(format!(
            "LoRA factors {as_:?}·{bs:?} do not match projection {ws:?}"
        )));
    }
    let base = linear(g, x, w_frozen, None)?;
    let low = linear(g, x, a, None)?;
    let low = linear(g, low, b, None)?;
    let low = g.scale(low, q.scaling())?;
    g.add(base, low)
}
