//! Central-difference gradient checking.

/// Largest relative error between the analytic gradient returned by `f` and
/// a central finite difference with step `h`, over every coordinate.
///
/// The relative error uses `max(|a|, |n|, floor)` as denominator so that
/// coordinates with vanishing gradient do not blow up the ratio.
pub fn grad_check<F>(mut f: F, point: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    const FLOOR: f64 = 1e-4;
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let mut x = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let (fp, _) = f(&x);
        x[i] = orig - h;
        let (fm, _) = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::attention::{EncoderBlock, Mhsa};
    use crate::neural::layers::*;
    use crate::neural::params::ParamStore;
    use crate::neural::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks both parameter and input gradients of a scalar loss
    /// `sum(y * probe)` built on `forward`/`backward`.
    fn check_layer(
        ps: &mut ParamStore,
        x: &Tensor,
        probe: &Tensor,
        forward: impl Fn(&ParamStore, &Tensor) -> Tensor,
        backward: impl Fn(&mut ParamStore, &Tensor, &Tensor) -> Tensor,
    ) {
        let loss = |y: &Tensor| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let base = ps.flat_values();
        let err = grad_check(
            |flat| {
                ps.set_flat_values(flat);
                ps.zero_grads();
                let y = forward(ps, x);
                backward(ps, x, probe);
                (loss(&y), ps.flat_grads())
            },
            &base,
            1e-5,
        );
        assert!(err < TOL, "parameter gradient error {err}");
        ps.set_flat_values(&base);
        let shape = x.shape().to_vec();
        let err = grad_check(
            |flat| {
                let xi = Tensor::from_vec(&shape, flat.to_vec()).unwrap();
                ps.zero_grads();
                let y = forward(ps, &xi);
                let dx = backward(ps, &xi, probe);
                (loss(&y), dx.into_data())
            },
            x.data(),
            1e-5,
        );
        assert!(err < TOL, "input gradient error {err}");
    }

    #[test]
    fn quadratic_form_is_exact() {
        let a = [[2.0, 0.5], [0.5, 1.0]];
        let f = |v: &[f64]| {
            let q = (0..2).map(|i| (0..2).map(|j| v[i] * a[i][j] * v[j]).sum::<f64>()).sum();
            let g = (0..2).map(|i| 2.0 * (0..2).map(|j| a[i][j] * v[j]).sum::<f64>()).collect();
            (q, g)
        };
        let err = grad_check(f, &[0.7, -1.3], 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut ps = ParamStore::new();
            let l = Linear::new(&mut ps, "l", 4, 3, &mut rng);
            let x = random(&[5, 4], &mut rng);
            let probe = random(&[5, 3], &mut rng);
            check_layer(&mut ps, &x, &probe, |p, x| l.forward(p, x), |p, x, d| l.backward(p, x, d));
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6);
        let x = random(&[3, 6], &mut rng);
        let probe = random(&[3, 6], &mut rng);
        check_layer(
            &mut ps,
            &x,
            &probe,
            |p, x| ln.forward(p, x).0,
            |p, x, d| {
                let (_, c) = ln.forward(p, x);
                ln.backward(p, &c, d)
            },
        );
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamStore::new();
        let conv = Conv1d::new(&mut ps, "c", 3, 2, 3, &mut rng);
        let x = random(&[6, 3], &mut rng);
        let probe = random(&[6, 2], &mut rng);
        check_layer(
            &mut ps,
            &x,
            &probe,
            |p, x| conv.forward(p, x).0,
            |p, x, d| {
                let (_, cols) = conv.forward(p, x);
                conv.backward(p, &cols, d)
            },
        );
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut ps = ParamStore::new();
        let mlp = Mlp::new(&mut ps, "m", &[4, 7, 5, 2], &mut rng);
        let x = random(&[3, 4], &mut rng);
        let probe = random(&[3, 2], &mut rng);
        check_layer(
            &mut ps,
            &x,
            &probe,
            |p, x| mlp.forward(p, x).0,
            |p, x, d| {
                let (_, c) = mlp.forward(p, x);
                mlp.backward(p, &c, d)
            },
        );
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut ps = ParamStore::new();
        let m = Mhsa::new(&mut ps, "a", 4, 2, &mut rng);
        let x = random(&[5, 4], &mut rng);
        let probe = random(&[5, 4], &mut rng);
        check_layer(
            &mut ps,
            &x,
            &probe,
            |p, x| m.forward(p, x).0,
            |p, x, d| {
                let (_, c) = m.forward(p, x);
                m.backward(p, &c, d)
            },
        );
    }

    #[test]
    fn encoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let mut ps = ParamStore::new();
            let b = EncoderBlock::new(&mut ps, "e", 4, 2, &mut rng);
            let x = random(&[3, 4], &mut rng);
            let probe = random(&[3, 4], &mut rng);
            check_layer(
                &mut ps,
                &x,
                &probe,
                |p, x| b.forward(p, x).0,
                |p, x, d| {
                    let (_, c) = b.forward(p, x);
                    b.backward(p, &c, d)
                },
            );
        }
    }

    #[test]
    fn activation_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(&[2, 3], &mut rng);
        let probe = random(&[2, 3], &mut rng);
        let dot = |y: &Tensor| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let shape = [2, 3];
        let t = |v: &[f64]| Tensor::from_vec(&shape, v.to_vec()).unwrap();
        let err = grad_check(
            |v| {
                let y = sigmoid(&t(v));
                (dot(&y), sigmoid_backward(&y, &probe).into_data())
            },
            x.data(),
            1e-5,
        );
        assert!(err < TOL);
        let err = grad_check(
            |v| {
                let y = tanh(&t(v));
                (dot(&y), tanh_backward(&y, &probe).into_data())
            },
            x.data(),
            1e-5,
        );
        assert!(err < TOL);
        let err = grad_check(
            |v| {
                let y = softmax_rows(&t(v));
                (dot(&y), softmax_rows_backward(&y, &probe).into_data())
            },
            x.data(),
            1e-5,
        );
        assert!(err < TOL);
        let target = random(&[2, 3], &mut rng);
        let err = grad_check(
            |v| {
                let (l, g) = mse_loss(&t(v), &target);
                (l, g.into_data())
            },
            x.data(),
            1e-5,
        );
        assert!(err < TOL);
        let p = x.map(|v| 0.2 + 0.3 * (v + 1.0));
        let labels = Tensor::from_vec(&shape, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let err = grad_check(
            |v| {
                let (l, g) = bce_loss(&t(v), &labels, 1e-7);
                (l, g.into_data())
            },
            p.data(),
            1e-5,
        );
        assert!(err < TOL);
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = grad_check(|v| (v[0] * v[0] + v[1], vec![2.0 * v[0], 2.0]), &[0.7, -0.3], 1e-6);
        assert!(err > 0.1, "a wrong gradient must be flagged, got {err}");
    }
}
