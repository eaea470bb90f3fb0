//! Frozen, seed-deterministic stand-in for an open-vocabulary detector:
//! visual encoder stages, text encoder, bi-attention fusion, language-guided
//! query selection and a cross-modality decoder. Adapters plug in at the
//! residual hooks; without them the stub runs unchanged.

use crate::adapters::{
    init_adapter, init_lora, lora_linear, st_adapter, temporal_adapter, temporal_diff_adapter,
    AdapterKind, AdapterParams, LoraParams,
};
use crate::config::TrainConfig;
use crate::error::{config_err, dim_err, Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::rng::{derive_seed, seeded, uniform};
use crate::tensor::{linear, Graph, ParamId, ParamStore, Tensor, Var};

/// One clip: visual features `[T×H×W×C]` and text tokens `[L×d_text]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub video: Tensor,
    pub text: Tensor,
}

impl FrameBatch {
    pub fn new(video: Tensor, text: Tensor) -> Result<Self> {
        if video.shape().len() != 4 {
            return Err(dim_err(format!(
                "video features must be [T×H×W×C], got {:?}",
                video.shape()
            )));
        }
        if text.shape().len() != 2 {
            return Err(dim_err(format!(
                "text tokens must be [L×d], got {:?}",
                text.shape()
            )));
        }
        if video
            .data()
            .iter()
            .chain(text.data())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation(
                "frame batch contains non-finite values".into(),
            ));
        }
        Ok(FrameBatch { video, text })
    }

    pub fn frame_count(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn token_count(&self) -> usize {
        self.text.shape()[0]
    }
}

/// Every trainable insertion: S-T adapters after both visual stages, LoRA on
/// the text projection, temporal and temporal-difference adapters around
/// fusion, one temporal adapter per decoder layer and a final
/// temporal-difference adapter after the decoder.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub st_stages: Vec<AdapterParams>,
    pub text_lora: LoraParams,
    pub fusion_temporal: AdapterParams,
    pub fusion_diff_pre: AdapterParams,
    pub fusion_diff_post: AdapterParams,
    pub decoder_temporal: Vec<AdapterParams>,
    pub decoder_diff_post: AdapterParams,
}

impl AdapterSet {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let seed = derive_seed(cfg.seed, "adapters");
        let d = cfg.d_model;
        let tr = cfg.temporal_adapter_ratio;
        let st_stages = [
            ("adapters.st_stage1", cfg.stage1_channels),
            ("adapters.st_stage2", d),
        ]
        .iter()
        .map(|&(name, c)| {
            init_adapter(
                store,
                name,
                AdapterKind::SpatioTemporal,
                c,
                cfg.st_adapter_ratio,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
        let text_lora = init_lora(
            store,
            "adapters.text",
            cfg.text_dim,
            d,
            cfg.lora_rank,
            cfg.lora_alpha,
            seed,
        )?;
        let fusion_temporal = init_adapter(
            store,
            "adapters.fusion_temporal",
            AdapterKind::Temporal,
            d,
            tr,
            seed,
        )?;
        let fusion_diff_pre = init_adapter(
            store,
            "adapters.fusion_diff_pre",
            AdapterKind::TemporalDiff,
            d,
            tr,
            seed,
        )?;
        let fusion_diff_post = init_adapter(
            store,
            "adapters.fusion_diff_post",
            AdapterKind::TemporalDiff,
            d,
            tr,
            seed,
        )?;
        let decoder_temporal = (0..cfg.decoder_layers)
            .map(|l| {
                init_adapter(
                    store,
                    &format!("adapters.decoder{l}_temporal"),
                    AdapterKind::Temporal,
                    d,
                    tr,
                    seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_diff_post = init_adapter(
            store,
            "adapters.decoder_diff_post",
            AdapterKind::TemporalDiff,
            d,
            tr,
            seed,
        )?;
        Ok(AdapterSet {
            st_stages,
            text_lora,
            fusion_temporal,
            fusion_diff_pre,
            fusion_diff_post,
            decoder_temporal,
            decoder_diff_post,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .st_stages
            .iter()
            .flat_map(AdapterParams::param_ids)
            .collect();
        ids.extend(self.text_lora.param_ids());
        for a in [
            &self.fusion_temporal,
            &self.fusion_diff_pre,
            &self.fusion_diff_post,
        ] {
            ids.extend(a.param_ids());
        }
        ids.extend(
            self.decoder_temporal
                .iter()
                .flat_map(AdapterParams::param_ids),
        );
        ids.extend(self.decoder_diff_post.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln_self: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
}

/// Frozen backbone weights. All tensors are registered with
/// `requires_grad = false` under `backbone.`.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    d_model: usize,
    visual_hw: (usize, usize),
    stages: [Linear; 2],
    pos_embed: ParamId,
    text_proj: ParamId,
    text_attn: MultiHeadAttention,
    text_ln: LayerNorm,
    text_ffn: FeedForward,
    text_ln_ffn: LayerNorm,
    vision_to_text: MultiHeadAttention,
    text_to_vision: MultiHeadAttention,
    ln_vision: LayerNorm,
    ln_text: LayerNorm,
    ffn_vision: FeedForward,
    ffn_text: FeedForward,
    ln_vision_ffn: LayerNorm,
    ln_text_ffn: LayerNorm,
    decoder: Vec<DecoderLayer>,
}

/// Fixed 2-D sinusoidal embedding: the first half of the channels encodes
/// the row, the second half the column.
fn sinusoidal_2d(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut t = Tensor::zeros(&[h * w, d]);
    let data = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let angle = (pos as f64 + 0.5) * freq * std::f64::consts::PI;
                    data[(y * w + x) * d + offset + 2 * i] = angle.sin();
                    data[(y * w + x) * d + offset + 2 * i + 1] = angle.cos();
                }
            }
        }
    }
    t
}

impl FrozenBackbone {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(derive_seed(cfg.seed, "backbone"));
        let d = cfg.d_model;
        let stages = [
            Linear::new(
                store,
                "backbone.stage1",
                cfg.channels,
                cfg.stage1_channels,
                false,
                &mut rng,
            )?,
            Linear::new(
                store,
                "backbone.stage2",
                cfg.stage1_channels,
                d,
                false,
                &mut rng,
            )?,
        ];
        let visual_hw = (cfg.height / 4, cfg.width / 4);
        let pos_embed = store.frozen(
            "backbone.pos_embed",
            sinusoidal_2d(visual_hw.0, visual_hw.1, d),
        )?;
        let text_proj = store.frozen(
            "backbone.text.proj",
            uniform(
                &[cfg.text_dim, d],
                1.0 / (cfg.text_dim as f64).sqrt(),
                &mut rng,
            ),
        )?;
        let text_attn =
            MultiHeadAttention::new(store, "backbone.text.attn", d, cfg.heads, false, &mut rng)?;
        let text_ln = LayerNorm::new(store, "backbone.text.ln", d, false)?;
        let text_ffn = FeedForward::new(
            store,
            "backbone.text.ffn",
            d,
            cfg.text_ffn_hidden,
            false,
            &mut rng,
        )?;
        let text_ln_ffn = LayerNorm::new(store, "backbone.text.ln_ffn", d, false)?;
        let vision_to_text =
            MultiHeadAttention::new(store, "backbone.fusion.v2t", d, cfg.heads, false, &mut rng)?;
        let text_to_vision =
            MultiHeadAttention::new(store, "backbone.fusion.t2v", d, cfg.heads, false, &mut rng)?;
        let ln_vision = LayerNorm::new(store, "backbone.fusion.ln_vision", d, false)?;
        let ln_text = LayerNorm::new(store, "backbone.fusion.ln_text", d, false)?;
        let ffn_vision = FeedForward::new(
            store,
            "backbone.fusion.ffn_vision",
            d,
            4 * d,
            false,
            &mut rng,
        )?;
        let ffn_text =
            FeedForward::new(store, "backbone.fusion.ffn_text", d, 4 * d, false, &mut rng)?;
        let ln_vision_ffn = LayerNorm::new(store, "backbone.fusion.ln_vision_ffn", d, false)?;
        let ln_text_ffn = LayerNorm::new(store, "backbone.fusion.ln_text_ffn", d, false)?;
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("backbone.decoder{l}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.self_attn"),
                        d,
                        cfg.heads,
                        false,
                        &mut rng,
                    )?,
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d, false)?,
                    cross_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.cross_attn"),
                        d,
                        cfg.heads,
                        false,
                        &mut rng,
                    )?,
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d, false)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, 4 * d, false, &mut rng)?,
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrozenBackbone {
            d_model: d,
            visual_hw,
            stages,
            pos_embed,
            text_proj,
            text_attn,
            text_ln,
            text_ffn,
            text_ln_ffn,
            vision_to_text,
            text_to_vision,
            ln_vision,
            ln_text,
            ffn_vision,
            ffn_text,
            ln_vision_ffn,
            ln_text_ffn,
            decoder,
        })
    }

    pub fn decoder_layers(&self) -> usize {
        self.decoder.len()
    }

    /// Two stages of projection + GELU + 2×2 average pooling, each followed
    /// by its S-T adapter when given. `[T×H×W×C] → [T×H/4×W/4×d]`.
    pub fn encode_frames(
        &self,
        g: &mut Graph<'_>,
        video: Var,
        st_adapters: Option<&[AdapterParams]>,
    ) -> Result<Var> {
        if let Some(st) = st_adapters {
            if st.len() != self.stages.len() {
                return Err(config_err(format!(
                    "expected {} S-T adapters, got {}",
                    self.stages.len(),
                    st.len()
                )));
            }
        }
        let mut x = video;
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(g, x)?;
            x = g.gelu(x)?;
            x = g.avg_pool2x2(x)?;
            if let Some(st) = st_adapters {
                let width = *g.shape(x).last().unwrap();
                if st[i].dim != width {
                    return Err(config_err(format!(
                        "S-T adapter {i} has width {}, stage output has {width}",
                        st[i].dim
                    )));
                }
                x = st_adapter(g, x, &st[i])?;
            }
        }
        Ok(x)
    }

    /// Flattens `[T×h×w×d]` into `[T×N_v×d]` tokens and adds the fixed
    /// positional embedding.
    pub fn visual_tokens(&self, g: &mut Graph<'_>, feats: Var) -> Result<Var> {
        let s = g.shape(feats).to_vec();
        let n_v = self.visual_hw.0 * self.visual_hw.1;
        if s.len() != 4 || s[1] * s[2] != n_v || s[3] != self.d_model {
            return Err(dim_err(format!(
                "visual features {s:?} do not match the stub's token grid"
            )));
        }
        let flat = g.reshape(feats, &[s[0], n_v * self.d_model])?;
        let pos = g.param(self.pos_embed);
        let pos = g.reshape(pos, &[n_v * self.d_model])?;
        let with_pos = g.add_bias(flat, pos)?;
        g.reshape(with_pos, &[s[0], n_v, self.d_model])
    }

    /// Frozen projection (LoRA-wrapped when given) and one transformer
    /// block. Returns token features `[L×d]` and their mean `[d]`.
    pub fn encode_text(
        &self,
        g: &mut Graph<'_>,
        text: Var,
        lora: Option<&LoraParams>,
    ) -> Result<(Var, Var)> {
        let w = g.param(self.text_proj);
        let x = match lora {
            Some(q) => lora_linear(g, text, w, q)?,
            None => linear(g, text, w, None)?,
        };
        let attn = self.text_attn.attend(g, x, x, None)?;
        let h = g.add(x, attn)?;
        let h = self.text_ln.forward(g, h)?;
        let f = self.text_ffn.forward(g, h)?;
        let h = g.add(h, f)?;
        let tokens = self.text_ln_ffn.forward(g, h)?;
        let cls = g.mean_axis(tokens, 0)?;
        Ok((tokens, cls))
    }

    /// Encoder-side temporal adapters, bi-attention between vision
    /// `[T×N_v×d]` and text `[L×d]`, then the post-fusion difference adapter.
    pub fn multimodal_fuse(
        &self,
        g: &mut Graph<'_>,
        vision: Var,
        text: Var,
        adapters: Option<&AdapterSet>,
    ) -> Result<(Var, Var)> {
        let vs = g.shape(vision).to_vec();
        if vs.len() != 3 || vs[2] != self.d_model || g.shape(text).get(1) != Some(&self.d_model) {
            return Err(config_err(format!(
                "fusion expects [T×N_v×{d}] and [L×{d}], got {vs:?} and {ts:?}",
                d = self.d_model,
                ts = g.shape(text)
            )));
        }
        let mut v = vision;
        if let Some(a) = adapters {
            v = temporal_adapter(g, v, &a.fusion_temporal)?;
            v = temporal_diff_adapter(g, v, &a.fusion_diff_pre)?;
        }
        let v_flat = g.reshape(v, &[vs[0] * vs[1], vs[2]])?;
        let v_att = self.vision_to_text.attend(g, v_flat, text, None)?;
        let t_att = self.text_to_vision.attend(g, text, v_flat, None)?;
        let v_sum = g.add(v_flat, v_att)?;
        let v_new = self.ln_vision.forward(g, v_sum)?;
        let v_ff = self.ffn_vision.forward(g, v_new)?;
        let v_new = g.add(v_new, v_ff)?;
        let v_new = self.ln_vision_ffn.forward(g, v_new)?;
        let t_sum = g.add(text, t_att)?;
        let t_new = self.ln_text.forward(g, t_sum)?;
        let t_ff = self.ffn_text.forward(g, t_new)?;
        let t_new = g.add(t_new, t_ff)?;
        let mem_text = self.ln_text_ffn.forward(g, t_new)?;
        let mut mem_vision = g.reshape(v_new, &vs)?;
        if let Some(a) = adapters {
            mem_vision = temporal_diff_adapter(g, mem_vision, &a.fusion_diff_post)?;
        }
        Ok((mem_vision, mem_text))
    }

    /// Per layer: temporal adapter per query slot, frozen self-attention among
    /// the queries of each frame, cross-attention to text, feed-forward. The
    /// final difference adapter runs after the last layer.
    pub fn decode_queries(
        &self,
        g: &mut Graph<'_>,
        selected: Var,
        mem_text: Var,
        adapters: Option<&AdapterSet>,
    ) -> Result<Var> {
        let s = g.shape(selected).to_vec();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(config_err(format!(
                "decoder expects [T×N_q×{}], got {s:?}",
                self.d_model
            )));
        }
        if let Some(a) = adapters {
            if a.decoder_temporal.len() != self.decoder.len() {
                return Err(config_err(
                    "one decoder temporal adapter per layer is required",
                ));
            }
        }
        let (t, nq, d) = (s[0], s[1], s[2]);
        let n = t * nq;
        // Queries only see queries of the same frame.
        let mut mask = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i / nq != j / nq {
                    mask.data_mut()[i * n + j] = -1e9;
                }
            }
        }
        let mask = g.constant(mask);
        let mut x = selected;
        for (l, layer) in self.decoder.iter().enumerate() {
            if let Some(a) = adapters {
                x = temporal_adapter(g, x, &a.decoder_temporal[l])?;
            }
            let flat = g.reshape(x, &[n, d])?;
            let sa = layer.self_attn.attend(g, flat, flat, Some(mask))?;
            let h = g.add(flat, sa)?;
            let h = layer.ln_self.forward(g, h)?;
            let ca = layer.cross_attn.attend(g, h, mem_text, None)?;
            let h2 = g.add(h, ca)?;
            let h2 = layer.ln_cross.forward(g, h2)?;
            let ff = layer.ffn.forward(g, h2)?;
            let h3 = g.add(h2, ff)?;
            let h3 = layer.ln_ffn.forward(g, h3)?;
            x = g.reshape(h3, &[t, nq, d])?;
        }
        if let Some(a) = adapters {
            x = temporal_diff_adapter(g, x, &a.decoder_diff_post)?;
        }
        Ok(x)
    }
}

/// Indices of the `k` largest values, in descending order; ties go to the
/// lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per frame, ranks visual tokens by their best raw dot product with any
/// text token and keeps the top `n_q`.
pub fn language_guided_select(
    mem_vision: &Tensor,
    mem_text: &Tensor,
    n_q: usize,
) -> Result<Vec<Vec<usize>>> {
    let vs = mem_vision.shape();
    let ts = mem_text.shape();
    if vs.len() != 3 || ts.len() != 2 || vs[2] != ts[1] {
        return Err(dim_err(format!("selection: vision {vs:?} vs text {ts:?}")));
    }
    let (t, n_v, d) = (vs[0], vs[1], vs[2]);
    if n_q == 0 || n_q > n_v {
        return Err(config_err(format!(
            "cannot select {n_q} queries from {n_v} visual tokens"
        )));
    }
    let vd = mem_vision.data();
    let td = mem_text.data();
    Ok((0..t)
        .map(|f| {
            let scores: Vec<f64> = (0..n_v)
                .map(|i| {
                    let v = &vd[(f * n_v + i) * d..][..d];
                    td.chunks(d)
                        .map(|tok| v.iter().zip(tok).map(|(a, b)| a * b).sum::<f64>())
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            top_k_indices(&scores, n_q)
        })
        .collect())
}

/// Gathers the selected tokens `[T×N_v×d] → [T×N_q×d]`.
pub fn gather_queries(g: &mut Graph<'_>, mem_vision: Var, indices: &[Vec<usize>]) -> Result<Var> {
    let s = g.shape(mem_vision).to_vec();
    let (n_v, d) = (s[1], s[2]);
    let n_q = indices.first().map_or(0, Vec::len);
    let flat: Vec<usize> = indices
        .iter()
        .enumerate()
        .flat_map(|(f, row)| {
            row.iter()
                .flat_map(move |&i| (f * n_v + i) * d..(f * n_v + i + 1) * d)
        })
        .collect();
    g.take(mem_vision, flat, &[indices.len(), n_q, d])
}
