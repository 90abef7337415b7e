//! Central finite-difference gradient checks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar from the input leaf it is handed. The error for each
/// coordinate is `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<'a, S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Graph<'a, S>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let input = g.input(x.clone());
        let out = f(&mut g, input)?;
        g.backward(out)?.get(input).to_f64_vec()
    };
    let eval = |t: Tensor<S>| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(t);
        let out = f(&mut g, input)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::shape("grad_check", "function must return a scalar"));
        }
        Ok(v.data()[0].as_f64())
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let base = x.data()[i].as_f64();
        let mut plus = x.clone();
        plus.data_mut()[i] = S::from_f64_lossy(base + eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = S::from_f64_lossy(base - eps);
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    let (max_rel_error, worst_index) = max_relative_error(&analytic, &numeric);
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{AttentionBias, AttentionShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn check<'a, F>(f: F, x: &Tensor<f64>) -> f64
    where
        F: Fn(&mut Graph<'a, f64>, Var) -> Result<Var>,
    {
        grad_check(f, x, EPS).unwrap().max_rel_error
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(random(&[3, 4], 1));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dot_gradient_is_weight() {
        let w = random(&[1, 5], 2);
        let mut g = Graph::new();
        let x = g.input(random(&[1, 5], 3));
        let wv = g.constant(w.clone());
        let p = g.mul(wv, x).unwrap();
        let s = g.sum(p).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x), w);
    }

    #[test]
    fn softmax_then_mse_matches_finite_differences() {
        let target = Tensor::from_f64(&[1, 3], &[0.2, 0.5, 0.3]).unwrap();
        let err = check(
            |g, x| {
                let s = g.softmax_rows(x)?;
                g.mse_loss(s, &target)
            },
            &Tensor::from_f64(&[1, 3], &[0.3, -1.2, 0.8]).unwrap(),
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let w = random(&[4, 3], 4);
        let err = check(
            |g, x| {
                let wv = g.constant(w.clone());
                let y = g.mul(x, wv)?;
                g.sum(y)
            },
            &random(&[4, 3], 5),
        );
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(3.0))),
            &random(&[2, 2], 6),
            EPS,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.analytic.iter().chain(&r.numeric).all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(random(&[2, 2], 7));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(random(&[2, 2], 8));
        let unused = g.input(random(&[3], 9));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[3]));
    }

    // One finite-difference check per recorded op, random inputs in [-2, 2].

    #[test]
    fn op_matmul_both_sides() {
        let b = random(&[4, 3], 11);
        assert!(check(|g, x| { let bv = g.constant(b.clone()); let y = g.matmul(x, bv)?; let y = g.gelu(y)?; g.sum(y) }, &random(&[2, 4], 12)) < TOL);
        let a = random(&[2, 4], 13);
        assert!(check(|g, x| { let av = g.constant(a.clone()); let y = g.matmul(av, x)?; let y = g.gelu(y)?; g.sum(y) }, &random(&[4, 3], 14)) < TOL);
    }

    #[test]
    fn op_add_sub_mul_scale() {
        let c = random(&[3, 3], 21);
        let err = check(
            |g, x| {
                let cv = g.constant(c.clone());
                let a = g.add(x, cv)?;
                let b = g.sub(a, x)?;
                let m = g.mul(b, x)?;
                let m2 = g.mul(m, x)?;
                let s = g.scale(m2, 0.7)?;
                g.sum(s)
            },
            &random(&[3, 3], 22),
        );
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn op_add_tiled() {
        let a = random(&[4, 3], 23);
        let err = check(
            |g, x| {
                let av = g.constant(a.clone());
                let y = g.add_tiled(av, x)?;
                let y = g.mul(y, av)?;
                g.sum(y)
            },
            &random(&[3], 24),
        );
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn op_relu_and_gelu() {
        // keep relu inputs away from the kink
        let mut x = random(&[2, 5], 25);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let target = random(&[2, 5], 26);
        assert!(check(|g, x| { let y = g.relu(x)?; g.mse_loss(y, &target) }, &x) < TOL);
        assert!(check(|g, x| { let y = g.gelu(x)?; g.mse_loss(y, &target) }, &x) < TOL);
    }

    #[test]
    fn op_transpose_reshape_mean() {
        let w = random(&[3, 2], 27);
        let err = check(
            |g, x| {
                let t = g.transpose(x)?;
                let wv = g.constant(w.clone());
                let y = g.mul(t, wv)?;
                let y = g.mul(y, y)?;
                let r = g.reshape(y, &[6])?;
                g.mean(r)
            },
            &random(&[2, 3], 28),
        );
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn op_softmax_rows() {
        let w = random(&[3, 4], 29);
        let err = check(
            |g, x| {
                let s = g.softmax_rows(x)?;
                let wv = g.constant(w.clone());
                let y = g.mul(s, wv)?;
                g.sum(y)
            },
            &random(&[3, 4], 30),
        );
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn op_layer_norm_all_inputs() {
        let x0 = random(&[3, 5], 31);
        let gain = random(&[5], 32);
        let bias = random(&[5], 33);
        let target = random(&[3, 5], 34);
        let e1 = check(
            |g, x| {
                let gv = g.constant(gain.clone());
                let bv = g.constant(bias.clone());
                let y = g.layer_norm(x, gv, bv, 1e-5)?;
                g.mse_loss(y, &target)
            },
            &x0,
        );
        let e2 = check(
            |g, gv| {
                let xv = g.constant(x0.clone());
                let bv = g.constant(bias.clone());
                let y = g.layer_norm(xv, gv, bv, 1e-5)?;
                g.mse_loss(y, &target)
            },
            &gain,
        );
        let e3 = check(
            |g, bv| {
                let xv = g.constant(x0.clone());
                let gv = g.constant(gain.clone());
                let y = g.layer_norm(xv, gv, bv, 1e-5)?;
                g.mse_loss(y, &target)
            },
            &bias,
        );
        assert!(e1 < TOL && e2 < TOL && e3 < TOL, "{e1} {e2} {e3}");
    }

    #[test]
    fn op_unfold() {
        let w = random(&[3 * 2, 4], 35);
        let err = check(
            |g, x| {
                let p = g.unfold(x, 4, 2)?;
                let wv = g.constant(w.clone());
                let y = g.mul(p, wv)?;
                let y = g.mul(y, p)?;
                g.sum(y)
            },
            &random(&[2, 8], 36),
        );
        assert!(err < TOL, "{err}");
    }

    fn attention_loss(
        g: &mut Graph<'_, f64>,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        bias: Option<&AttentionBias<f64>>,
        w: &Tensor<f64>,
    ) -> Result<Var> {
        let c = g.attention(q, k, v, shape, bias)?;
        let wv = g.constant(w.clone());
        let y = g.mul(c, wv)?;
        let y = g.mul(y, c)?;
        g.sum(y)
    }

    #[test]
    fn op_attention_each_input() {
        let shape = AttentionShape { groups: 2, tokens: 3, heads: 2, head_dim: 2 };
        let dims = [6, 4];
        let (q0, k0, v0) = (random(&dims, 41), random(&dims, 42), random(&dims, 43));
        let w = random(&dims, 44);
        let hint = AttentionBias {
            matrix: Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.5, 0.0, 1.0, 0.2, 0.3, 0.3, 1.0]).unwrap(),
            lambda: 0.4,
            renormalize: false,
        };
        let renorm = AttentionBias { renormalize: true, ..hint.clone() };
        for bias in [None, Some(&hint), Some(&renorm)] {
            let eq = check(|g, x| { let k = g.constant(k0.clone()); let v = g.constant(v0.clone()); attention_loss(g, x, k, v, shape, bias, &w) }, &q0);
            let ek = check(|g, x| { let q = g.constant(q0.clone()); let v = g.constant(v0.clone()); attention_loss(g, q, x, v, shape, bias, &w) }, &k0);
            let ev = check(|g, x| { let q = g.constant(q0.clone()); let k = g.constant(k0.clone()); attention_loss(g, q, k, x, shape, bias, &w) }, &v0);
            assert!(eq < TOL && ek < TOL && ev < TOL, "{eq} {ek} {ev}");
        }
        // shared q = k = v
        let e = check(|g, x| attention_loss(g, x, x, x, shape, Some(&hint), &w), &q0);
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let b = random(&[4, 4], 51);
            let mut g = Graph::new();
            let x = g.input(random(&[3, 4], 52));
            let bv = g.param(&b);
            let y = g.matmul(x, bv).unwrap();
            let y = g.softmax_rows(y).unwrap();
            let s = g.mse_loss(y, &Tensor::full(&[3, 4], 0.25)).unwrap();
            let grads = g.backward(s).unwrap();
            (grads.get(x), grads.get(bv))
        };
        assert_eq!(run(), run());
    }
}
