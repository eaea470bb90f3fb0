//! Query-guided refinement, global/local fusion, the temporal decoder and
//! the boundary and box heads. Every weight here is trainable.

use crate::backbone::top_k_indices;
use crate::config::TrainConfig;
use crate::error::{config_err, dim_err, Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::metrics::{PredictedTube, Tube};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Per-frame features after refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRepresentation {
    pub f_agg: Tensor,
    pub f_global: Tensor,
    pub f_fused: Tensor,
}

/// Concrete per-frame predictions for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPrediction {
    pub start_dist: Tensor,
    pub end_dist: Tensor,
    pub temporal_conf: Tensor,
    pub boxes: Tensor,
}

impl BoundaryPrediction {
    pub fn frames(&self) -> usize {
        self.start_dist.numel()
    }
}

/// Cosine similarity of every query `v[T×N_q×d]` to the text vector `c[d]`.
/// Zero-norm queries score 0.
pub fn relevance_scores(g: &mut Graph<'_>, v: Var, c: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    let d = *s.last().unwrap();
    if s.len() != 3 || g.shape(c) != [d] {
        return Err(dim_err(format!(
            "relevance_scores: queries {s:?} vs text {:?}",
            g.shape(c)
        )));
    }
    if g.data(c).iter().all(|x| *x == 0.0) {
        return Err(Error::DegenerateInput(
            "text query vector is all zeros".into(),
        ));
    }
    let vn = g.l2_normalize_rows(v)?;
    let vn = g.reshape(vn, &[s[0] * s[1], d])?;
    let cn = g.l2_normalize_rows(c)?;
    let cn = g.reshape(cn, &[d, 1])?;
    let sc = g.matmul(vn, cn)?;
    g.reshape(sc, &[s[0], s[1]])
}

/// Per frame, indices of the `k` highest scores in descending order.
pub fn top_k_select(scores: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let s = scores.shape();
    if s.len() != 2 {
        return Err(dim_err(format!("scores must be [T×N_q], got {s:?}")));
    }
    if k == 0 || k > s[1] {
        return Err(config_err(format!("K={k} must lie in [1, {}]", s[1])));
    }
    Ok(scores
        .data()
        .chunks(s[1])
        .map(|row| top_k_indices(row, k))
        .collect())
}

/// Softmax over the selected raw scores, then the weighted sum of the
/// selected queries. Returns `[T×d]`.
pub fn aggregate_queries(
    g: &mut Graph<'_>,
    v: Var,
    scores: Var,
    indices: &[Vec<usize>],
) -> Result<Var> {
    let s = g.shape(v).to_vec();
    let (t, nq, d) = (s[0], s[1], s[2]);
    if indices.len() != t || g.shape(scores) != [t, nq] {
        return Err(dim_err(
            "aggregate_queries: indices or scores do not match the queries",
        ));
    }
    let k = indices[0].len();
    if k == 0
        || indices
            .iter()
            .any(|row| row.len() != k || row.iter().any(|&j| j >= nq))
    {
        return Err(config_err("aggregate_queries: invalid selection indices"));
    }
    let score_idx: Vec<usize> = indices
        .iter()
        .enumerate()
        .flat_map(|(f, row)| row.iter().map(move |&j| f * nq + j))
        .collect();
    let sel_scores = g.take(scores, score_idx, &[t, 1, k])?;
    let alpha = g.softmax(sel_scores, 2)?;
    let v_idx: Vec<usize> = indices
        .iter()
        .enumerate()
        .flat_map(|(f, row)| {
            row.iter()
                .flat_map(move |&j| (f * nq + j) * d..(f * nq + j + 1) * d)
        })
        .collect();
    let sel_v = g.take(v, v_idx, &[t, k, d])?;
    let agg = g.batch_matmul(alpha, sel_v)?;
    g.reshape(agg, &[t, d])
}

/// Frame-mean of the encoder memory concatenated with `f_agg` and
/// projected back to `d`. Returns `(f_global, f_fused)`.
pub fn fuse_global_local(
    g: &mut Graph<'_>,
    f_agg: Var,
    mem_vision: Var,
    proj: &Linear,
) -> Result<(Var, Var)> {
    let (sa, sm) = (g.shape(f_agg).to_vec(), g.shape(mem_vision).to_vec());
    if sa.len() != 2 || sm.len() != 3 || sa[0] != sm[0] || sa[1] != sm[2] {
        return Err(dim_err(format!(
            "fuse_global_local: f_agg {sa:?} vs memory {sm:?}"
        )));
    }
    let f_global = g.mean_axis(mem_vision, 1)?;
    let cat = g.concat(&[f_agg, f_global])?;
    let fused = proj.forward(g, cat)?;
    Ok((f_global, fused))
}

/// `[I; 0]` projection from `2d` to `d`, so fusion starts as `f_agg`.
pub fn init_fuse_projection(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Linear> {
    let mut w = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        w.data_mut()[i * d + i] = 1.0;
    }
    Linear::from_tensors(store, prefix, w, Tensor::zeros(&[d]), true)
}

#[derive(Clone, Debug)]
struct TemporalLayer {
    attn: MultiHeadAttention,
    rel_bias: ParamId,
    ln_attn: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
}

/// Self-attention over frames with a learned per-head bias indexed by the
/// clamped relative offset `t_i − t_j`.
#[derive(Clone, Debug)]
pub struct TemporalDecoder {
    layers: Vec<TemporalLayer>,
    heads: usize,
    max_rel: usize,
}

impl TemporalDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        n_layers: usize,
        max_rel: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(config_err("temporal decoder needs at least one layer"));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Ok(TemporalLayer {
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.attn"),
                        d,
                        heads,
                        true,
                        rng,
                    )?,
                    rel_bias: store.trainable(
                        format!("{p}.rel_bias"),
                        Tensor::zeros(&[heads, 2 * max_rel + 1]),
                    )?,
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d, true)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d, true, rng)?,
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TemporalDecoder {
            layers,
            heads,
            max_rel,
        })
    }

    /// Table index of the bias between frames `i` and `j`.
    pub fn relative_index(&self, i: usize, j: usize) -> usize {
        let m = self.max_rel as i64;
        ((i as i64 - j as i64).clamp(-m, m) + m) as usize
    }

    fn bias_indices(&self, head: usize, frames: usize) -> Vec<usize> {
        let width = 2 * self.max_rel + 1;
        (0..frames * frames)
            .map(|ij| head * width + self.relative_index(ij / frames, ij % frames))
            .collect()
    }

    /// Runs every layer; also returns each layer's per-head attention weights.
    pub fn forward_with_weights(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        let frames = g.shape(x)[0];
        let mut h = x;
        let mut all_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let table = g.param(layer.rel_bias);
            let (a, w) = layer
                .attn
                .forward(g, h, h, &mut |g: &mut Graph<'_>, head| {
                    Ok(Some(g.take(
                        table,
                        self.bias_indices(head, frames),
                        &[frames, frames],
                    )?))
                })?;
            let r = g.add(h, a)?;
            let r = layer.ln_attn.forward(g, r)?;
            let f = layer.ffn.forward(g, r)?;
            let r2 = g.add(r, f)?;
            h = layer.ln_ffn.forward(g, r2)?;
            all_weights.push(w);
        }
        Ok((h, all_weights))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, x)?.0)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rel_bias_ids(&self) -> Vec<ParamId> {
        self.layers.iter().map(|l| l.rel_bias).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut ids = l.attn.param_ids();
                ids.push(l.rel_bias);
                ids.extend(l.ln_attn.param_ids());
                ids.extend(l.ffn.param_ids());
                ids.extend(l.ln_ffn.param_ids());
                ids
            })
            .collect()
    }
}

/// Start, end and confidence heads over per-frame features.
#[derive(Clone, Debug)]
pub struct BoundaryHead {
    pub start: Linear,
    pub end: Linear,
    pub conf: Linear,
}

impl BoundaryHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(BoundaryHead {
            start: Linear::new(store, &format!("{prefix}.start"), d, 1, true, rng)?,
            end: Linear::new(store, &format!("{prefix}.end"), d, 1, true, rng)?,
            conf: Linear::new(store, &format!("{prefix}.conf"), d, 1, true, rng)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [
            self.start.param_ids(),
            self.end.param_ids(),
            self.conf.param_ids(),
        ]
        .concat()
    }
}

/// Softmax start/end distributions over frames and a sigmoid confidence per
/// frame, each of shape `[T]`.
pub fn predict_boundaries(
    g: &mut Graph<'_>,
    h: Var,
    head: &BoundaryHead,
) -> Result<(Var, Var, Var)> {
    let frames = g.shape(h)[0];
    let logits = |g: &mut Graph<'_>, l: &Linear| -> Result<Var> {
        let z = l.forward(g, h)?;
        g.reshape(z, &[frames])
    };
    let s = logits(g, &head.start)?;
    let e = logits(g, &head.end)?;
    let c = logits(g, &head.conf)?;
    Ok((g.softmax(s, 0)?, g.softmax(e, 0)?, g.sigmoid(c)?))
}

/// Two-layer MLP from a query feature to box logits.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl BoxHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(BoxHead {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), d, 4, true, rng)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.hidden.param_ids(), self.out.param_ids()].concat()
    }
}

/// Per-frame index of the highest score; ties go to the lower index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let n = scores.shape()[1];
    scores
        .data()
        .chunks(n)
        .map(|row| top_k_indices(row, 1)[0])
        .collect()
}

/// Boxes from the most relevant query of each frame, `[T×4]` in
/// `(cx, cy, w, h)`. Also returns the chosen query indices.
pub fn predict_boxes(
    g: &mut Graph<'_>,
    v: Var,
    scores: &Tensor,
    head: &BoxHead,
) -> Result<(Var, Vec<usize>)> {
    let s = g.shape(v).to_vec();
    if s.len() != 3 || scores.shape() != [s[0], s[1]] {
        return Err(dim_err(format!(
            "predict_boxes: queries {s:?} vs scores {:?}",
            scores.shape()
        )));
    }
    let best = argmax_rows(scores);
    let rows: Vec<usize> = best
        .iter()
        .enumerate()
        .map(|(f, &j)| f * s[1] + j)
        .collect();
    let flat = g.reshape(v, &[s[0] * s[1], s[2]])?;
    let picked = g.take_rows(flat, &rows)?;
    let h = head.hidden.forward(g, picked)?;
    let h = g.gelu(h)?;
    let z = head.out.forward(g, h)?;
    Ok((g.sigmoid(z)?, best))
}

/// Joint argmax of `start[s]·end[e]` over `s ≤ e` with lexicographic
/// tie-breaking, plus the boxes inside the chosen segment.
pub fn extract_tube(p: &BoundaryPrediction) -> PredictedTube {
    let (st, en) = (p.start_dist.data(), p.end_dist.data());
    let (mut best, mut bs, mut be) = (f64::NEG_INFINITY, 0, 0);
    for s in 0..st.len() {
        for e in s..en.len() {
            let v = st[s] * en[e];
            if v > best {
                (best, bs, be) = (v, s, e);
            }
        }
    }
    let boxes = (bs..=be)
        .map(|t| {
            let r = &p.boxes.data()[t * 4..t * 4 + 4];
            [r[0], r[1], r[2], r[3]]
        })
        .collect();
    Tube {
        t_s: bs,
        t_e: be,
        boxes,
    }
}

/// All trainable head modules.
#[derive(Clone, Debug)]
pub struct GroundingHeads {
    pub fuse: Linear,
    pub temporal: TemporalDecoder,
    pub boundary: BoundaryHead,
    pub boxes: BoxHead,
}

impl GroundingHeads {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = seeded(derive_seed(cfg.seed, "heads"));
        let d = cfg.d_model;
        Ok(GroundingHeads {
            fuse: init_fuse_projection(store, "heads.fuse", d)?,
            temporal: TemporalDecoder::new(
                store,
                "heads.temporal",
                d,
                cfg.heads,
                cfg.temporal_layers,
                cfg.max_relative_position,
                &mut rng,
            )?,
            boundary: BoundaryHead::new(store, "heads.boundary", d, &mut rng)?,
            boxes: BoxHead::new(store, "heads.box", d, &mut rng)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fuse.param_ids();
        ids.extend(self.temporal.param_ids());
        ids.extend(self.boundary.param_ids());
        ids.extend(self.boxes.param_ids());
        ids
    }
}
