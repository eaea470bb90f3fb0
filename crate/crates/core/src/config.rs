//! The single JSON configuration document shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::losses::LossWeights;

/// Model, data, loss and optimizer settings. Missing JSON fields take the
/// defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Frames per clip (T).
    pub frames: usize,
    /// Input feature-map height (H); must be a multiple of 4.
    pub height: usize,
    /// Input feature-map width (W); must be a multiple of 4.
    pub width: usize,
    /// Input channels (C).
    pub channels: usize,
    /// Text tokens per query (L).
    pub text_tokens: usize,
    /// Raw text embedding width.
    pub text_dim: usize,
    /// Model width (d).
    pub d_model: usize,
    /// Width after the first visual stage.
    pub stage1_channels: usize,
    /// Hidden width of the frozen text block's feed-forward layer.
    pub text_ffn_hidden: usize,
    pub heads: usize,
    /// Decoder queries per frame (N_q); at most (H/4)·(W/4).
    pub num_queries: usize,
    /// Queries aggregated per frame (K).
    pub top_k: usize,
    pub decoder_layers: usize,
    pub temporal_layers: usize,
    /// Clamp for relative positions in the temporal decoder.
    pub max_relative_position: usize,
    /// Insert adapters and LoRA. `false` gives the heads-only baseline.
    pub use_adapters: bool,
    pub st_adapter_ratio: usize,
    pub temporal_adapter_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub loss_weights: LossWeights,
    /// Width of the Gaussian boundary targets, in frames.
    pub boundary_sigma: f64,
    pub smooth_l1_beta: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Distinct target patterns in synthetic data.
    pub num_patterns: usize,
    pub noise_std: f64,
    pub signal_amplitude: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            frames: 8,
            height: 8,
            width: 8,
            channels: 16,
            text_tokens: 4,
            text_dim: 32,
            d_model: 64,
            stage1_channels: 32,
            text_ffn_hidden: 6144,
            heads: 4,
            num_queries: 4,
            top_k: 2,
            decoder_layers: 2,
            temporal_layers: 2,
            max_relative_position: 32,
            use_adapters: true,
            st_adapter_ratio: 4,
            temporal_adapter_ratio: 4,
            lora_rank: 4,
            lora_alpha: 8.0,
            loss_weights: LossWeights::default(),
            boundary_sigma: 1.0,
            smooth_l1_beta: 1.0 / 9.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 500,
            batch_size: 8,
            log_every: 50,
            n_train: 64,
            n_val: 16,
            num_patterns: 4,
            noise_std: 0.1,
            signal_amplitude: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Visual tokens per frame after the two 2×2 downsampling stages.
    pub fn visual_tokens(&self) -> usize {
        (self.height / 4) * (self.width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("text_tokens", self.text_tokens),
            ("text_dim", self.text_dim),
            ("d_model", self.d_model),
            ("stage1_channels", self.stage1_channels),
            ("text_ffn_hidden", self.text_ffn_hidden),
            ("heads", self.heads),
            ("num_queries", self.num_queries),
            ("top_k", self.top_k),
            ("decoder_layers", self.decoder_layers),
            ("temporal_layers", self.temporal_layers),
            ("st_adapter_ratio", self.st_adapter_ratio),
            ("temporal_adapter_ratio", self.temporal_adapter_ratio),
            ("lora_rank", self.lora_rank),
            ("batch_size", self.batch_size),
            ("log_every", self.log_every),
            ("num_patterns", self.num_patterns),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("`{name}` must be positive")));
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(config_err(format!(
                "height and width must be multiples of 4, got {}×{}",
                self.height, self.width
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.num_queries > self.visual_tokens() {
            return Err(config_err(format!(
                "num_queries {} exceeds the {} visual tokens per frame",
                self.num_queries,
                self.visual_tokens()
            )));
        }
        if self.top_k > self.num_queries {
            return Err(config_err(format!(
                "top_k {} exceeds num_queries {}",
                self.top_k, self.num_queries
            )));
        }
        if self.num_patterns > self.channels {
            return Err(config_err("num_patterns cannot exceed channels"));
        }
        self.loss_weights.validate()?;
        let finite_pos = [
            ("boundary_sigma", self.boundary_sigma),
            ("smooth_l1_beta", self.smooth_l1_beta),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("lora_alpha", self.lora_alpha),
            ("signal_amplitude", self.signal_amplitude),
        ];
        if let Some((name, _)) = finite_pos
            .iter()
            .find(|(_, v)| !(v.is_finite() && *v > 0.0))
        {
            return Err(config_err(format!("`{name}` must be finite and positive")));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(config_err("`noise_std` must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}
