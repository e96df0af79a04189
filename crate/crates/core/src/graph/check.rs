//! Finite-difference gradient verification.
//!
//! The checker never touches the tape's backward pass: it only re-evaluates a
//! caller-supplied forward closure, which keeps it an independent oracle for
//! the analytic gradients.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x`, perturbing one element at a time.
pub fn central_diff_gradient(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.dims());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Largest relative error between analytic and numeric gradients, with the
/// usual `max(1, |a|, |n|)` denominator.
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.dims(), numeric.dims());
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(&a, &n)| (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn check_unary(build: impl Fn(&mut Graph<f64>, crate::graph::Var) -> crate::graph::Var, x: Tensor<f64>) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = build(&mut g, xv);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        let analytic = grads.get(xv).unwrap();
        let numeric = central_diff_gradient(&x, 1e-5, |t| {
            let mut g = Graph::new();
            let xv = g.leaf(t.clone());
            let y = build(&mut g, xv);
            let loss = g.mean_all(y);
            g.value(loss).item()
        });
        assert!(max_rel_error(analytic, &numeric) < 1e-7);
    }

    #[test]
    fn elementwise_gradients() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| (i as f64) * 0.13 - 1.1);
        check_unary(|g, x| g.sigmoid(x), x.clone());
        check_unary(|g, x| g.tanh(x), x.clone());
        check_unary(|g, x| g.leaky_relu(x, 0.2), x.clone());
        check_unary(|g, x| g.instance_norm(x, 1e-5), x.clone());
        check_unary(|g, x| g.softmax_ch(x), x.clone());
        check_unary(|g, x| g.upsample_nearest2(x), x.clone());
        check_unary(|g, x| g.avg_pool_to(x, 2, 2), x);
    }

    #[test]
    fn conv_gradients_all_inputs() {
        let x = Tensor::from_fn(&[2, 5, 5], |i| ((i * 37) % 11) as f64 * 0.1 - 0.5);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 17) % 7) as f64 * 0.1 - 0.3);
        let b = Tensor::from_fn(&[3], |i| i as f64 * 0.2);

        let run = |xt: &Tensor<f64>, wt: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(xt.clone());
            let wv = g.leaf(wt.clone());
            let bv = g.leaf(bt.clone());
            let y = g.conv2d(xv, wv, Some(bv), 2, 1);
            let y = g.tanh(y);
            let loss = g.mean_all(y);
            (g, xv, wv, bv, loss)
        };

        let (g, xv, wv, bv, loss) = run(&x, &w, &b);
        let grads = g.backward(loss);
        let eval_x = |t: &Tensor<f64>| { let (g, _, _, _, l) = run(t, &w, &b); g.value(l).item() };
        let eval_w = |t: &Tensor<f64>| { let (g, _, _, _, l) = run(&x, t, &b); g.value(l).item() };
        let eval_b = |t: &Tensor<f64>| { let (g, _, _, _, l) = run(&x, &w, t); g.value(l).item() };

        assert!(max_rel_error(grads.get(xv).unwrap(), &central_diff_gradient(&x, 1e-5, eval_x)) < 1e-7);
        assert!(max_rel_error(grads.get(wv).unwrap(), &central_diff_gradient(&w, 1e-5, eval_w)) < 1e-7);
        assert!(max_rel_error(grads.get(bv).unwrap(), &central_diff_gradient(&b, 1e-5, eval_b)) < 1e-7);
    }

    #[test]
    fn fused_cross_entropy_gradient() {
        let x = Tensor::from_fn(&[4, 3, 3], |i| ((i * 31) % 13) as f64 * 0.3 - 1.5);
        let labels: Vec<u8> = (0..9).map(|i| (i % 4) as u8).collect();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let loss = g.cross_entropy_logits(xv, &labels);
        let grads = g.backward(loss);
        let numeric = central_diff_gradient(&x, 1e-6, |t| {
            let mut g = Graph::new();
            let xv = g.leaf(t.clone());
            let loss = g.cross_entropy_logits(xv, &labels);
            g.value(loss).item()
        });
        assert!(max_rel_error(grads.get(xv).unwrap(), &numeric) < 1e-7);
    }

    #[test]
    fn region_pool_and_linear_gradients() {
        let x = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.07).sin());
        let mut wts = Tensor::zeros(&[2, 4, 4]);
        for p in 0..8 {
            wts.data_mut()[p] = 0.5 + 0.1 * p as f64;
        }
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let pooled = g.region_pool(xv, &wts);
        let flat = g.reshape(pooled, &[6]);
        let w = g.leaf(Tensor::from_fn(&[2, 6], |i| (i as f64 - 5.0) * 0.1));
        let y = g.linear(flat, w, None);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        let numeric = central_diff_gradient(&x, 1e-6, |t| {
            let mut g = Graph::new();
            let xv = g.leaf(t.clone());
            let pooled = g.region_pool(xv, &wts);
            let flat = g.reshape(pooled, &[6]);
            let w = g.leaf(Tensor::from_fn(&[2, 6], |i| (i as f64 - 5.0) * 0.1));
            let y = g.linear(flat, w, None);
            let loss = g.mean_all(y);
            g.value(loss).item()
        });
        assert!(max_rel_error(grads.get(xv).unwrap(), &numeric) < 1e-7);
    }
}
