//! Central finite-difference oracle for the tape's backward rules.
//!
//! Checks run at 64-bit; the closure under test must be deterministic
//! (evaluation mode, no dropout).

use crate::error::{Error, Result};
use crate::params::{Ctx, ParamSet};
use crate::tape::Var;
use crate::tensor::Real;

/// Per-parameter worst relative error.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of one finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    fn from_errors(params: &ParamSet<f64>, errs: Vec<f64>, eps: f64, tol: f64) -> Self {
        let per_param: Vec<ParamCheck> = params
            .ids()
            .zip(errs)
            .map(|(id, e)| ParamCheck {
                name: params.name(id).to_string(),
                max_rel_err: e,
            })
            .collect();
        let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
        GradCheckReport {
            eps,
            tol,
            max_rel_err,
            pass: max_rel_err <= tol,
            per_param,
        }
    }
}

/// Relative error with a floored denominator.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Scalar probe for finite-difference checks: an index-weighted mean of
/// squares, scaled small. Central differences quantize in steps of
/// ulp(loss)/(2 eps); keeping the loss near 1e-2 pushes that noise below
/// the floored relative tolerance even for zero-gradient coordinates.
pub fn probe_loss<T: Real>(tape: &mut crate::tape::Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let numel: usize = shape.iter().product();
    let weights: Vec<T> = (0..numel)
        .map(|i| T::cast(0.5 + (i % 7) as f64 * 0.25))
        .collect();
    let w = tape.constant(shape, weights)?;
    let wx = tape.mul(x, w)?;
    let sq = tape.mul(wx, wx)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::cast(0.003 / numel as f64)))
}

fn eval_scalar<F>(params: &ParamSet<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let mut ctx = Ctx::eval(params);
    let loss = f(&mut ctx)?;
    if !ctx.tape.value(loss).is_scalar() {
        return Err(Error::contract("gradcheck: loss is not scalar"));
    }
    Ok(ctx.tape.scalar_value(loss).as_f64())
}

/// Gradients from one tape backward pass, aligned with `params` order.
pub fn analytic_gradients<F>(params: &ParamSet<f64>, f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let mut ctx = Ctx::eval(params);
    let loss = f(&mut ctx)?;
    if !ctx.tape.value(loss).is_scalar() {
        return Err(Error::contract("gradcheck: loss is not scalar"));
    }
    ctx.tape.backward(loss)?;
    Ok(params.ids().map(|id| ctx.grad_of(id)).collect())
}

/// Central differences (f(x+eps) - f(x-eps)) / (2 eps) per coordinate.
pub fn numeric_gradients<F>(params: &ParamSet<f64>, f: &F, eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(format!("gradcheck: eps {eps} outside (0, 1e-2]")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let numel = params.get(id).numel();
        let mut grads = vec![0.0; numel];
        for j in 0..numel {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval_scalar(&work, f)?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval_scalar(&work, f)?;
            work.get_mut(id).data_mut()[j] = orig;
            grads[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(grads);
    }
    Ok(out)
}

/// Compare precomputed gradient tables coordinate by coordinate.
pub fn compare_gradients(
    params: &ParamSet<f64>,
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let errs: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            a.iter()
                .zip(n)
                .map(|(&av, &nv)| rel_err(av, nv))
                .fold(0.0, f64::max)
        })
        .collect();
    GradCheckReport::from_errors(params, errs, eps, tol)
}

/// Check every parameter coordinate of `f` against central differences.
pub fn finite_diff_check<F>(
    params: &ParamSet<f64>,
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, &f, eps)?;
    Ok(compare_gradients(params, &analytic, &numeric, eps, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_scalar_has_zero_error() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        // At zero, f(eps) - f(-eps) is exactly 2 eps in floating point.
        let w = ps.add("w", Tensor::scalar(0.0));
        let report = finite_diff_check(&ps, |ctx| Ok(ctx.p(w)), 1e-5, 1e-4).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn matmul_sum_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let data_a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data_b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = ps.add("a", Tensor::new(vec![3, 4], data_a).unwrap());
        let b = ps.add("b", Tensor::new(vec![4, 2], data_b).unwrap());
        let report = finite_diff_check(
            &ps,
            |ctx| {
                let av = ctx.p(a);
                let bv = ctx.p(b);
                let c = ctx.tape.matmul(av, bv)?;
                Ok(ctx.tape.sum(c))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sign_flip_negative_control_fails() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let f = |ctx: &mut Ctx<f64>| {
            let wv = ctx.p(w);
            let sq = ctx.tape.mul(wv, wv)?;
            Ok(ctx.tape.sum(sq))
        };
        let mut analytic = analytic_gradients(&ps, &f).unwrap();
        for g in analytic.iter_mut().flatten() {
            *g = -*g;
        }
        let numeric = numeric_gradients(&ps, &f, 1e-5).unwrap();
        let report = compare_gradients(&ps, &analytic, &numeric, 1e-5, 1e-4);
        assert!(!report.pass);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", Tensor::scalar(1.0));
        let err = numeric_gradients(&ps, &|ctx: &mut Ctx<f64>| Ok(ctx.p(w)), 0.5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
