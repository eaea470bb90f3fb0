//! Parameterized building blocks shared by the frozen stub and the
//! trainable heads.

use crate::error::Result;
use crate::rng::{uniform, SeededRng};
use crate::tensor::{
    linear, scaled_dot_product_attention, Graph, ParamId, ParamStore, Tensor, Var,
};

fn register(store: &mut ParamStore, name: String, t: Tensor, trainable: bool) -> Result<ParamId> {
    if trainable {
        store.trainable(name, t)
    } else {
        store.frozen(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/√d_in` weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = uniform(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng);
        Self::from_tensors(store, prefix, w, Tensor::zeros(&[d_out]), trainable)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        prefix: &str,
        w: Tensor,
        b: Tensor,
        trainable: bool,
    ) -> Result<Self> {
        let weight = register(store, format!("{prefix}.weight"), w, trainable)?;
        let bias = register(store, format!("{prefix}.bias"), b, trainable)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        linear(g, x, w, Some(b))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, trainable: bool) -> Result<Self> {
        let gamma = register(
            store,
            format!("{prefix}.gamma"),
            Tensor::full(&[d], 1.0),
            trainable,
        )?;
        let beta = register(
            store,
            format!("{prefix}.beta"),
            Tensor::zeros(&[d]),
            trainable,
        )?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, LN_EPS)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{prefix}.up"), d, hidden, trainable, rng)?,
            down: Linear::new(store, &format!("{prefix}.down"), hidden, d, trainable, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.up.param_ids(), self.down.param_ids()].concat()
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{prefix}.q"), d, d, trainable, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), d, d, trainable, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), d, d, trainable, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), d, d, trainable, rng)?,
            heads,
        })
    }

    /// `queries[n×d]` attend over `keys[m×d]`. `bias(h)` supplies an optional
    /// additive `[n×m]` logit bias for head `h`. Returns the output and the
    /// per-head attention weights.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        keys: Var,
        bias: &mut dyn FnMut(&mut Graph<'_>, usize) -> Result<Option<Var>>,
    ) -> Result<(Var, Vec<Var>)> {
        let d = g.shape(queries)[1];
        let dh = d / self.heads;
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.narrow(q, h * dh, dh)?;
            let kh = g.narrow(k, h * dh, dh)?;
            let vh = g.narrow(v, h * dh, dh)?;
            let b = bias(g, h)?;
            let (o, w) = scaled_dot_product_attention(g, qh, kh, vh, b)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs)?
        };
        Ok((self.out.forward(g, cat)?, weights))
    }

    pub fn attend(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        keys: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward(g, queries, keys, &mut |_, _| Ok(bias))?.0)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [
            self.q.param_ids(),
            self.k.param_ids(),
            self.v.param_ids(),
            self.out.param_ids(),
        ]
        .concat()
    }
}
