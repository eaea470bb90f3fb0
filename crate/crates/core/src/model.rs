//! End-to-end wiring of the frozen stub, the adapters and the heads.

use crate::backbone::{
    gather_queries, language_guided_select, AdapterSet, FrameBatch, FrozenBackbone,
};
use crate::config::TrainConfig;
use crate::error::{dim_err, Result};
use crate::heads::{
    aggregate_queries, extract_tube, fuse_global_local, predict_boundaries, predict_boxes,
    relevance_scores, top_k_select, BoundaryPrediction, GroundingHeads,
};
use crate::losses::{query_loss, LossVars, PredictionVars};
use crate::metrics::{GroundTruthTube, PredictedTube};
use crate::tensor::{Graph, ParamId, ParamStore};

/// Parameter layout of the full model; the tensors themselves live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StgdModel {
    pub cfg: TrainConfig,
    pub backbone: FrozenBackbone,
    pub adapters: Option<AdapterSet>,
    pub heads: GroundingHeads,
}

/// Graph handles and selections produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pred: PredictionVars,
    pub scores: crate::tensor::Var,
    pub selected_tokens: Vec<Vec<usize>>,
    pub top_k: Vec<Vec<usize>>,
    pub box_queries: Vec<usize>,
}

impl StgdModel {
    /// Registers every tensor in `store`: the frozen stub first, then the
    /// adapters (when enabled), then the heads.
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = FrozenBackbone::new(store, cfg)?;
        let adapters = if cfg.use_adapters {
            Some(AdapterSet::new(store, cfg)?)
        } else {
            None
        };
        let heads = GroundingHeads::new(store, cfg)?;
        Ok(StgdModel {
            cfg: cfg.clone(),
            backbone,
            adapters,
            heads,
        })
    }

    pub fn build(cfg: &TrainConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, cfg)?;
        Ok((model, store))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self
            .adapters
            .as_ref()
            .map(AdapterSet::param_ids)
            .unwrap_or_default();
        ids.extend(self.heads.param_ids());
        ids
    }

    fn check_batch(&self, b: &FrameBatch) -> Result<()> {
        let c = &self.cfg;
        let expect = [c.frames, c.height, c.width, c.channels];
        if b.video.shape() != expect || b.text.shape().get(1) != Some(&c.text_dim) {
            return Err(dim_err(format!(
                "clip {:?} / text {:?} does not match config video {expect:?}, text width {}",
                b.video.shape(),
                b.text.shape(),
                c.text_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &FrameBatch) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let a = self.adapters.as_ref();
        let video = g.constant(batch.video.clone());
        let text = g.constant(batch.text.clone());
        let feats = self
            .backbone
            .encode_frames(g, video, a.map(|a| a.st_stages.as_slice()))?;
        let vis = self.backbone.visual_tokens(g, feats)?;
        let (tokens, cls) = self
            .backbone
            .encode_text(g, text, a.map(|a| &a.text_lora))?;
        let (mem_v, mem_t) = self.backbone.multimodal_fuse(g, vis, tokens, a)?;
        let selected_tokens =
            language_guided_select(g.value(mem_v), g.value(mem_t), self.cfg.num_queries)?;
        let queries = gather_queries(g, mem_v, &selected_tokens)?;
        let v = self.backbone.decode_queries(g, queries, mem_t, a)?;
        let scores = relevance_scores(g, v, cls)?;
        let top_k = top_k_select(g.value(scores), self.cfg.top_k)?;
        let f_agg = aggregate_queries(g, v, scores, &top_k)?;
        let (_, f_fused) = fuse_global_local(g, f_agg, mem_v, &self.heads.fuse)?;
        let h = self.heads.temporal.forward(g, f_fused)?;
        let (start, end, conf) = predict_boundaries(g, h, &self.heads.boundary)?;
        let score_values = g.value(scores).clone();
        let (boxes, box_queries) = predict_boxes(g, v, &score_values, &self.heads.boxes)?;
        Ok(ForwardOutput {
            pred: PredictionVars {
                start,
                end,
                conf,
                boxes,
            },
            scores,
            selected_tokens,
            top_k,
            box_queries,
        })
    }

    /// Forward plus the single-query loss against `gt`.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        batch: &FrameBatch,
        gt: &GroundTruthTube,
    ) -> Result<LossVars> {
        let out = self.forward(g, batch)?;
        let c = &self.cfg;
        query_loss(
            g,
            &out.pred,
            gt,
            &c.loss_weights,
            c.boundary_sigma,
            c.smooth_l1_beta,
        )
    }

    pub fn predict(&self, store: &ParamStore, batch: &FrameBatch) -> Result<BoundaryPrediction> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, batch)?;
        Ok(BoundaryPrediction {
            start_dist: g.value(out.pred.start).clone(),
            end_dist: g.value(out.pred.end).clone(),
            temporal_conf: g.value(out.pred.conf).clone(),
            boxes: g.value(out.pred.boxes).clone(),
        })
    }

    pub fn predict_tube(&self, store: &ParamStore, batch: &FrameBatch) -> Result<PredictedTube> {
        Ok(extract_tube(&self.predict(store, batch)?))
    }
}
