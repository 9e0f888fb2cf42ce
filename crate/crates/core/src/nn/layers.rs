use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

use super::params::{Ctx, Init, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W: [d_in × d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(d_in, d_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d_out]));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = ctx.g.matmul(x, ctx.p(self.weight))?;
        ctx.g.add_bias(h, ctx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::from_fn([d], |_| T::one()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d]));
        LayerNorm { gain, bias }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.g.layer_norm(x, g, b, T::lit(LAYER_NORM_EPS))
    }
}

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub head_dim: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::config(format!(
                "model width {d} is not divisible into {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            n_heads,
            head_dim: d / n_heads,
            wq: Linear::new(store, init, &format!("{name}.wq"), d, d),
            wk: Linear::new(store, init, &format!("{name}.wk"), d, d),
            wv: Linear::new(store, init, &format!("{name}.wv"), d, d),
            wo: Linear::new(store, init, &format!("{name}.wo"), d, d),
        })
    }

    /// Queries from `q[tq×d]` attend over keys/values from `kv[tk×d]`.
    /// Self-attention is `attend(x, x, ..)`.
    pub fn attend<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        q: Var,
        kv: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        Ok(self.attend_with_weights(ctx, q, kv, key_mask)?.0)
    }

    /// As [`attend`](Self::attend), also returning the raw attention node
    /// (see [`crate::tensor::Graph::attention_weights`]).
    pub fn attend_with_weights<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        q: Var,
        kv: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let d = self.n_heads * self.head_dim;
        for v in [q, kv] {
            if ctx.g.shape(v).last() != Some(&d) {
                return Err(Error::Dimension {
                    op: "attend",
                    lhs: ctx.g.shape(v).to_vec(),
                    rhs: vec![d],
                });
            }
        }
        let qp = self.wq.forward(ctx, q)?;
        let kp = self.wk.forward(ctx, kv)?;
        let vp = self.wv.forward(ctx, kv)?;
        let a = ctx.g.attention(qp, kp, vp, self.n_heads, key_mask)?;
        Ok((self.wo.forward(ctx, a)?, a))
    }
}

/// Pre-norm residual block: attention sublayer then a gelu feed-forward
/// sublayer.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub norm_attn: LayerNorm,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d: usize,
        n_heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        if ff_mult == 0 {
            return Err(Error::config("ff_mult must be positive"));
        }
        Ok(TransformerBlock {
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, n_heads)?,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff_in: Linear::new(store, init, &format!("{name}.ff_in"), d, ff_mult * d),
            ff_out: Linear::new(store, init, &format!("{name}.ff_out"), ff_mult * d, d),
        })
    }

    /// `x = q + Attn(LN(q), LN(kv)); x + FF(LN(x))`. With `kv == q` this is
    /// a self-attention block.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        q: Var,
        kv: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let nq = self.norm_attn.forward(ctx, q)?;
        let nkv = if kv == q {
            nq
        } else {
            self.norm_attn.forward(ctx, kv)?
        };
        let a = self.attn.attend(ctx, nq, nkv, key_mask)?;
        let a = ctx.dropout(a)?;
        let x = ctx.g.add(q, a)?;
        let h = self.norm_ff.forward(ctx, x)?;
        let h = self.ff_in.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let h = self.ff_out.forward(ctx, h)?;
        let h = ctx.dropout(h)?;
        ctx.g.add(x, h)
    }
}

/// A sequence of blocks sharing the same key/value source.
#[derive(Clone, Debug)]
pub struct BlockStack {
    pub blocks: Vec<TransformerBlock>,
}

impl BlockStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        depth: usize,
        d: usize,
        n_heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config(format!("{name}: block count must be positive")));
        }
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, init, &format!("{name}.{i}"), d, n_heads, ff_mult))
            .collect::<Result<_>>()?;
        Ok(BlockStack { blocks })
    }

    /// Self-attention stack when `kv` is `None`; otherwise each block's
    /// queries attend over the fixed `kv`.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        kv: Option<Var>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(ctx, h, kv.unwrap_or(h), key_mask)?;
        }
        Ok(h)
    }
}

/// Standard sinusoidal table: even columns `sin(p / 10000^(i/d))`, odd
/// columns the matching cosine.
pub fn sinusoid_table(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for p in 0..t {
        for i in (0..d).step_by(2) {
            let angle = p as f64 / 10000f64.powf(i as f64 / d as f64);
            out[p * d + i] = angle.sin();
            if i + 1 < d {
                out[p * d + i + 1] = angle.cos();
            }
        }
    }
    out
}

/// Add sinusoidal positions to `x[t×d]`; identity when disabled.
pub fn positional_encode<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(x);
    }
    let (t, d) = match ctx.g.shape(x) {
        [t, d] => (*t, *d),
        s => {
            return Err(Error::Dimension {
                op: "positional_encode",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    if d % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoidal positions need an even width, got {d}"
        )));
    }
    let table = sinusoid_table(t, d).into_iter().map(T::lit).collect();
    let pe = ctx.g.constant([t, d], table)?;
    ctx.g.add(x, pe)
}
