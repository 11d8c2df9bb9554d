//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Evaluates the scalar program `f` at `x` on a fresh tape.
fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out)?;
    if value.len() != 1 {
        return Err(dim_err!("grad_check needs a scalar program, got shape {:?}", value.shape()));
    }
    Ok(value.data()[0])
}

/// Max over all components of `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` builds a scalar program of its input on the given tape.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, epsilon, &all)
}

/// Like [`grad_check`] but only probes the listed flat indices of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor, epsilon: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(config_err!("grad_check epsilon must lie in [1e-7, 1e-3], got {epsilon}"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= x.len()) {
        return Err(dim_err!("grad_check index {i} out of range for {} elements", x.len()));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let analytic = if tape.requires_grad(out)? {
        let grads = tape.backward(out)?;
        grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    } else {
        let value = tape.value(out)?;
        if value.len() != 1 {
            return Err(dim_err!("grad_check needs a scalar program, got shape {:?}", value.shape()));
        }
        Tensor::zeros(x.shape())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Conv2dParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_program_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_normal([1, 2, 3, 3], 1.0, &mut rng);
        let err = grad_check(|t, v| t.sum(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn tanh_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_normal([1, 1, 4, 4], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let y = t.tanh(v)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_prelu_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_normal([2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::rand_normal([4, 3, 3, 1], 0.5, &mut rng);
        let b = Tensor::rand_normal([1, 4, 1, 1], 0.5, &mut rng);
        let slope = Tensor::vector(&[0.1, 0.2, 0.3, 0.4]);
        let p = Conv2dParams {
            stride: 2,
            dilation: (2, 1),
            padding: (2, 0),
        };
        // Gradient w.r.t. input, weight and bias in turn.
        let wrt_x = |t: &mut Tape, v: Var| {
            let (w, b, s) = (t.constant(w.clone()), t.constant(b.clone()), t.constant(slope.clone()));
            let y = t.conv2d(v, w, Some(b), p)?;
            let y = t.prelu(y, s)?;
            t.sum(y)
        };
        assert!(grad_check(wrt_x, &x, 1e-5).unwrap() < 1e-6);
        let wrt_w = |t: &mut Tape, v: Var| {
            let (xv, b, s) = (t.constant(x.clone()), t.constant(b.clone()), t.constant(slope.clone()));
            let y = t.conv2d(xv, v, Some(b), p)?;
            let y = t.prelu(y, s)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        };
        assert!(grad_check(wrt_w, &w, 1e-5).unwrap() < 1e-6);
        let wrt_slope = |t: &mut Tape, v: Var| {
            let (xv, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(xv, w, Some(b), p)?;
            let y = t.prelu(y, v)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        };
        assert!(grad_check(wrt_slope, &slope, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::zeros([1, 1, 1, 2]);
        assert!(grad_check(|t, v| t.sum(v), &x, 1e-2).is_err());
        assert!(matches!(
            grad_check(|_, v| Ok(v), &x, 1e-5),
            Err(crate::Error::Dimension(_))
        ));
    }
}
