//! Central finite-difference gradient checking.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let value = tape
        .scalar(v)
        .ok_or_else(|| Error::shape(format!("expected scalar, got {:?}", tape.shape(v))))?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} is not finite")));
    }
    Ok(value)
}

/// Compares the tape gradient of a scalar function at `x` with central
/// differences. Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point.clone());
        let y = f(&mut tape, xv)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

/// Gradient check over every coordinate of every parameter in `params`,
/// skipping frozen rows.
///
/// `loss` builds the scalar objective on a fresh tape from a parameter set;
/// it is called once for the analytic gradient and twice per coordinate.
pub fn grad_check_params<F>(params: &ParamStore, eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let y = loss(&mut tape, store)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let y = loss(&mut tape, params)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    drop(tape);

    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for id in params.ids() {
        let n = params.get(id).len();
        let analytic = grads
            .param(id)
            .map(|g| g.to_dense(n))
            .unwrap_or_else(|| vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            if params.is_frozen(id, i) {
                continue;
            }
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(*a, (plus - minus) / (2.0 * eps)));
        }
        report.coordinates += n;
        report.max_error = report.max_error.max(worst);
        report.per_param.push((params.name(id).to_string(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn cross_entropy_of_linear_on_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let input = Tensor::vector(vec![0.5, -0.25, 1.5]);
        let err = grad_check(
            move |t, w| {
                let x = t.constant(input.clone());
                let logits = t.linear(x, w, None)?;
                t.cross_entropy(logits, 2)
            },
            &w,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let filters =
            Tensor::new(vec![2, 2, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check(
            move |t, x| {
                let f = t.constant(filters.clone());
                let b = t.constant(Tensor::vector(vec![0.1, -0.2]));
                let c = t.conv1d(x, f, b)?;
                let c = t.tanh(c);
                let u = t.constant(Tensor::vector(vec![0.4, -0.7]));
                let scores = t.matvec(c, u)?;
                let a = t.softmax(scores)?;
                let v = t.vecmat(a, c)?;
                let s = t.sigmoid(v);
                let p = t.concat(&[s, v])?;
                let q = t.sum_of_squares(p);
                let r = t.row(x, 1)?;
                let r = t.slice(r, 1, 2)?;
                let m = t.mul(r, v)?;
                let m = t.sum(m);
                t.add(q, m)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::vector(vec![1.0]);
        let res = grad_check(
            |t, x| {
                let big = t.scale(x, f64::INFINITY);
                Ok(t.sum(big))
            },
            &x,
            DEFAULT_EPS,
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn max_pool_tie_point_is_not_differentiable() {
        // At an exact tie the one-sided rule and central differences disagree.
        let x = Tensor::matrix(2, 1, vec![2.0, 2.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let p = t.max_pool_time(x)?;
                Ok(t.sum(p))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err > 1e-4, "{err}");
    }
}
