//! Multi-head scaled dot-product attention and the position-wise
//! feed-forward unit, plus the residual + layer-norm sublayer wrapper.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Ctx, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// softmax(q k^T / sqrt(d_k)) v with an optional key mask.
pub fn scaled_dot_product_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (out, _) = scaled_dot_product_attention_with_weights(tape, q, k, v, key_mask)?;
    Ok(out)
}

/// Same as [`scaled_dot_product_attention`] but also returns the attention
/// weight matrix (used by invariant tests and the reduce layer).
pub fn scaled_dot_product_attention_with_weights<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let vs = tape.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::dim("attention", format!("need rank 2, got q{qs:?} k{ks:?} v{vs:?}")));
    }
    if qs[1] != ks[1] {
        return Err(Error::dim("attention", format!("q width {} vs k width {}", qs[1], ks[1])));
    }
    if ks[0] != vs[0] {
        return Err(Error::dim("attention", format!("{} keys vs {} values", ks[0], vs[0])));
    }
    let d_k = qs[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::cast(1.0 / (d_k as f64).sqrt()));
    let weights = tape.softmax_lastdim(scaled, key_mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Projection matrices for one multi-head attention unit.
///
/// The per-head query/key/value projections are stored side by side as
/// `[d, heads * head_dim]` matrices; head `i` owns columns
/// `i*head_dim .. (i+1)*head_dim`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::contract(format!(
                "attention: {heads} heads do not divide width {d_model}"
            )));
        }
        let head_dim = d_model / heads;
        let w_q = ps.add(format!("{prefix}.w_q"), xavier_uniform(rng, d_model, d_model));
        let w_k = ps.add(format!("{prefix}.w_k"), xavier_uniform(rng, d_model, d_model));
        let w_v = ps.add(format!("{prefix}.w_v"), xavier_uniform(rng, d_model, d_model));
        let w_o = ps.add(format!("{prefix}.w_o"), xavier_uniform(rng, d_model, d_model));
        Ok(MultiHeadAttention { w_q, w_k, w_v, w_o, heads, head_dim })
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (out, _) = self.forward_with_weights(ctx, q, k, v, key_mask)?;
        Ok(out)
    }

    /// Multi-head attention returning per-head weight matrices as well.
    pub fn forward_with_weights<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let d = ctx.tape.shape(q).last().copied().unwrap_or(0);
        if self.heads * self.head_dim != d {
            return Err(Error::dim(
                "multi_head_attention",
                format!("{} heads x width {} != model width {}", self.heads, self.head_dim, d),
            ));
        }
        let wq = ctx.p(self.w_q);
        let wk = ctx.p(self.w_k);
        let wv = ctx.p(self.w_v);
        let qp = ctx.tape.matmul(q, wq)?;
        let kp = ctx.tape.matmul(k, wk)?;
        let vp = ctx.tape.matmul(v, wv)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = ctx.tape.slice_cols(qp, start, self.head_dim)?;
            let kh = ctx.tape.slice_cols(kp, start, self.head_dim)?;
            let vh = ctx.tape.slice_cols(vp, start, self.head_dim)?;
            let (oh, wh) =
                scaled_dot_product_attention_with_weights(&mut ctx.tape, qh, kh, vh, key_mask)?;
            heads.push(oh);
            weights.push(wh);
        }
        let concat = ctx.tape.concat_cols(&heads)?;
        let wo = ctx.p(self.w_o);
        let out = ctx.tape.matmul(concat, wo)?;
        Ok((out, weights))
    }
}

/// Two affine maps with a ReLU in between: max(0, x W1 + b1) W2 + b2.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        if d_ff == 0 {
            return Err(Error::contract("feed_forward: inner width must be >= 1"));
        }
        let w1 = ps.add(format!("{prefix}.w1"), xavier_uniform(rng, d_model, d_ff));
        let b1 = ps.add(format!("{prefix}.b1"), Tensor::zeros(vec![d_ff]));
        let w2 = ps.add(format!("{prefix}.w2"), xavier_uniform(rng, d_ff, d_model));
        let b2 = ps.add(format!("{prefix}.b2"), Tensor::zeros(vec![d_model]));
        Ok(FeedForward { w1, b1, w2, b2 })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w1 = ctx.p(self.w1);
        let b1 = ctx.p(self.b1);
        let w2 = ctx.p(self.w2);
        let b2 = ctx.p(self.b2);
        let h = ctx.tape.matmul(x, w1)?;
        let h = ctx.tape.add_bias(h, b1)?;
        let h = ctx.tape.relu(h);
        let out = ctx.tape.matmul(h, w2)?;
        ctx.tape.add_bias(out, b2)
    }
}

/// Post-norm residual wrapper: layer_norm(x + dropout(unit(x))).
#[derive(Clone, Debug)]
pub struct SublayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl SublayerNorm {
    pub fn init<T: Real>(ps: &mut ParamSet<T>, prefix: &str, d_model: usize, eps: f64) -> Self {
        let gamma = ps.add(format!("{prefix}.ln_gamma"), Tensor::filled(vec![d_model], T::one()));
        let beta = ps.add(format!("{prefix}.ln_beta"), Tensor::zeros(vec![d_model]));
        SublayerNorm { gamma, beta, eps }
    }

    /// `unit_out` must have the same shape as `x`.
    pub fn apply<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, unit_out: Var) -> Result<Var> {
        if ctx.tape.shape(x) != ctx.tape.shape(unit_out) {
            return Err(Error::dim(
                "sublayer",
                format!(
                    "unit output {:?} vs input {:?}",
                    ctx.tape.shape(unit_out),
                    ctx.tape.shape(x)
                ),
            ));
        }
        let dropped = ctx.apply_dropout(unit_out)?;
        let summed = ctx.tape.add(x, dropped)?;
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        ctx.tape.layer_norm(summed, gamma, beta, T::cast(self.eps))
    }
}
