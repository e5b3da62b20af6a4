//! Single-layer LSTM encoder built from tape primitives.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Ctx, ParamId, ParamSet};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Weights of one LSTM layer; gate order along the 4h axis is i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        LstmParams {
            w_ih: ps.add(format!("{prefix}.w_ih"), xavier_uniform(rng, input_dim, 4 * hidden)),
            w_hh: ps.add(format!("{prefix}.w_hh"), xavier_uniform(rng, hidden, 4 * hidden)),
            bias: ps.add(format!("{prefix}.bias"), Tensor::zeros(vec![4 * hidden])),
            hidden,
        }
    }

    /// Run over `x: [len, input_dim]`, returning every hidden state as
    /// `[len, hidden]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let sh = ctx.tape.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(Error::dim("lstm", format!("need rank 2 input, got {sh:?}")));
        }
        let len = sh[0];
        let h = self.hidden;
        let w_ih = ctx.p(self.w_ih);
        let w_hh = ctx.p(self.w_hh);
        let bias = ctx.p(self.bias);
        let mut h_prev = ctx.tape.constant(vec![1, h], vec![T::zero(); h])?;
        let mut c_prev = ctx.tape.constant(vec![1, h], vec![T::zero(); h])?;
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            let x_t = ctx.tape.gather_rows(x, &[t])?;
            let zx = ctx.tape.matmul(x_t, w_ih)?;
            let zh = ctx.tape.matmul(h_prev, w_hh)?;
            let z = ctx.tape.add(zx, zh)?;
            let z = ctx.tape.add_bias(z, bias)?;
            let i_gate = {
                let s = ctx.tape.slice_cols(z, 0, h)?;
                ctx.tape.sigmoid(s)
            };
            let f_gate = {
                let s = ctx.tape.slice_cols(z, h, h)?;
                ctx.tape.sigmoid(s)
            };
            let g_gate = {
                let s = ctx.tape.slice_cols(z, 2 * h, h)?;
                ctx.tape.tanh(s)
            };
            let o_gate = {
                let s = ctx.tape.slice_cols(z, 3 * h, h)?;
                ctx.tape.sigmoid(s)
            };
            let fc = ctx.tape.mul(f_gate, c_prev)?;
            let ig = ctx.tape.mul(i_gate, g_gate)?;
            let c = ctx.tape.add(fc, ig)?;
            let ct = ctx.tape.tanh(c);
            let h_t = ctx.tape.mul(o_gate, ct)?;
            states.push(h_t);
            h_prev = h_t;
            c_prev = c;
        }
        ctx.tape.concat_rows(&states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let lstm = LstmParams::init(&mut ps, &mut rng, "lstm", 3, 5);
        let data: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = || {
            let mut ctx = Ctx::eval(&ps);
            let x = ctx.tape.constant(vec![4, 3], data.clone()).unwrap();
            let y = lstm.forward(&mut ctx, x).unwrap();
            assert_eq!(ctx.tape.shape(y), &[4, 5]);
            ctx.tape.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn prefix_states_ignore_future_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let lstm = LstmParams::init(&mut ps, &mut rng, "lstm", 2, 4);
        let data: Vec<f64> = (0..3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut ctx = Ctx::eval(&ps);
        let x = ctx.tape.constant(vec![3, 2], data.clone()).unwrap();
        let y = lstm.forward(&mut ctx, x).unwrap();
        let full = ctx.tape.data(y).to_vec();

        let mut ctx2 = Ctx::eval(&ps);
        let x2 = ctx2.tape.constant(vec![2, 2], data[..4].to_vec()).unwrap();
        let y2 = lstm.forward(&mut ctx2, x2).unwrap();
        let prefix = ctx2.tape.data(y2).to_vec();
        assert_eq!(&full[..8], &prefix[..]);
    }

    #[test]
    fn gradcheck_through_embedding_and_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let emb = ps.add("emb", xavier_uniform(&mut rng, 6, 4));
        let lstm = LstmParams::init(&mut ps, &mut rng, "lstm", 4, 8);
        let report = finite_diff_check(
            &ps,
            |ctx| {
                let table = ctx.p(emb);
                let x = ctx.tape.gather_rows(table, &[1, 4, 2])?;
                let y = lstm.forward(ctx, x)?;
                crate::gradcheck::probe_loss(&mut ctx.tape, y)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
