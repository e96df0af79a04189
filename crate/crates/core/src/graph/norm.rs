//! Normalization, softmax, cross-entropy, and region pooling ops.

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Instance normalization of a CHW map: per channel, subtract the spatial
    /// mean and divide by the population standard deviation (plus `eps` under
    /// the square root). No affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: S) -> Var {
        let t = self.value(x);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        let (c, h, w) = (d[0], d[1], d[2]);
        let n = h * w;
        let nf = S::from_usize(n);
        let src = t.data();
        let mut y = vec![S::zero(); c * n];
        let mut inv_std = vec![S::zero(); c];
        for ci in 0..c {
            let plane = &src[ci * n..(ci + 1) * n];
            let mean = plane.iter().copied().sum::<S>() / nf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[ci] = is;
            for (o, &v) in y[ci * n..(ci + 1) * n].iter_mut().zip(plane) {
                *o = (v - mean) * is;
            }
        }
        let out = Tensor::new(vec![c, h, w], y);
        let xhat = out.clone();
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let xh = xhat.data();
                let mut dx = vec![S::zero(); c * n];
                for ci in 0..c {
                    let gp = &gd[ci * n..(ci + 1) * n];
                    let xp = &xh[ci * n..(ci + 1) * n];
                    let mean_g = gp.iter().copied().sum::<S>() / nf;
                    let mean_gx = gp.iter().zip(xp).map(|(&gv, &xv)| gv * xv).sum::<S>() / nf;
                    let is = inv_std[ci];
                    for ((o, &gv), &xv) in dx[ci * n..(ci + 1) * n].iter_mut().zip(gp).zip(xp) {
                        *o = is * (gv - mean_g - xv * mean_gx);
                    }
                }
                vec![Some(Tensor::new(vec![c, n / w, w], dx))]
            }),
        )
    }

    /// Per-channel affine modulation of a CHW map: `y[c] = gamma[c]·x[c] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        let (c, h, w) = (d[0], d[1], d[2]);
        let n = h * w;
        assert_eq!(self.value(gamma).numel(), c);
        assert_eq!(self.value(beta).numel(), c);
        let src = t.data();
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut y = vec![S::zero(); c * n];
        for ci in 0..c {
            for (o, &v) in y[ci * n..(ci + 1) * n].iter_mut().zip(&src[ci * n..(ci + 1) * n]) {
                *o = gm[ci] * v + bt[ci];
            }
        }
        self.push(
            Tensor::new(vec![c, h, w], y),
            vec![x, gamma, beta],
            Box::new(move |g, p, needs| {
                let gd = g.data();
                let xd = p[0].data();
                let gm = p[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); c * n];
                    for ci in 0..c {
                        for (o, &gv) in dx[ci * n..(ci + 1) * n].iter_mut().zip(&gd[ci * n..(ci + 1) * n]) {
                            *o = gv * gm[ci];
                        }
                    }
                    Tensor::new(p[0].dims().to_vec(), dx)
                });
                let dgamma = needs[1].then(|| {
                    let dg: Vec<S> = (0..c)
                        .map(|ci| {
                            gd[ci * n..(ci + 1) * n]
                                .iter()
                                .zip(&xd[ci * n..(ci + 1) * n])
                                .map(|(&gv, &xv)| gv * xv)
                                .sum()
                        })
                        .collect();
                    Tensor::new(p[1].dims().to_vec(), dg)
                });
                let dbeta = needs[2].then(|| {
                    let db: Vec<S> = (0..c).map(|ci| gd[ci * n..(ci + 1) * n].iter().copied().sum()).collect();
                    Tensor::new(p[2].dims().to_vec(), db)
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Per-pixel modulation with spatially varying parameters:
    /// `y = gamma ⊙ x ⊕ beta` where all operands are CHW.
    pub fn spatial_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let prod = self.mul(gamma, x);
        self.add(prod, beta)
    }

    /// Softmax over the leading (class) axis of an `[N, H, W]` map.
    pub fn softmax_ch(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        let (c, h, w) = (d[0], d[1], d[2]);
        let n = h * w;
        let src = t.data();
        let mut y = vec![S::zero(); c * n];
        for p in 0..n {
            let mut mx = S::neg_infinity();
            for ci in 0..c {
                mx = mx.max(src[ci * n + p]);
            }
            let mut z = S::zero();
            for ci in 0..c {
                let e = (src[ci * n + p] - mx).exp();
                y[ci * n + p] = e;
                z += e;
            }
            for ci in 0..c {
                y[ci * n + p] /= z;
            }
        }
        let out = Tensor::new(vec![c, h, w], y);
        let probs = out.clone();
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let pd = probs.data();
                let mut dx = vec![S::zero(); c * n];
                for p in 0..n {
                    let mut dotgp = S::zero();
                    for ci in 0..c {
                        dotgp += gd[ci * n + p] * pd[ci * n + p];
                    }
                    for ci in 0..c {
                        dx[ci * n + p] = pd[ci * n + p] * (gd[ci * n + p] - dotgp);
                    }
                }
                vec![Some(Tensor::new(vec![c, n / w, w], dx))]
            }),
        )
    }

    /// Mean per-pixel cross-entropy of `[N,H,W]` logits against hard labels
    /// (fused with log-softmax for stability).
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[u8]) -> Var {
        let t = self.value(logits);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        let (c, h, w) = (d[0], d[1], d[2]);
        let n = h * w;
        assert_eq!(labels.len(), n, "label count must match logit pixels");
        let src = t.data();
        let nf = S::from_usize(n);
        let mut loss = S::zero();
        let mut probs = vec![S::zero(); c * n];
        for p in 0..n {
            let mut mx = S::neg_infinity();
            for ci in 0..c {
                mx = mx.max(src[ci * n + p]);
            }
            let mut z = S::zero();
            for ci in 0..c {
                let e = (src[ci * n + p] - mx).exp();
                probs[ci * n + p] = e;
                z += e;
            }
            for ci in 0..c {
                probs[ci * n + p] /= z;
            }
            let lbl = labels[p] as usize;
            assert!(lbl < c, "label {} out of range for {} classes", lbl, c);
            loss += z.ln() + mx - src[lbl * n + p];
        }
        loss /= nf;
        let probs = Tensor::new(vec![c, h, w], probs);
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g, _, _| {
                let gv = g.item() / nf;
                let pd = probs.data();
                let mut dx = pd.iter().map(|&p| p * gv).collect::<Vec<S>>();
                for (p, &lbl) in labels.iter().enumerate() {
                    dx[lbl as usize * n + p] -= gv;
                }
                vec![Some(Tensor::new(vec![c, h, w], dx))]
            }),
        )
    }

    /// Weighted region pooling: for each of `K` weight planes, the weighted
    /// average of the CHW features over that plane. Rows with zero total
    /// weight come out exactly zero. Output is `[K, C]`.
    pub fn region_pool(&mut self, x: Var, weights: &Tensor<S>) -> Var {
        let t = self.value(x);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        let (c, h, w) = (d[0], d[1], d[2]);
        let n = h * w;
        let dw = weights.dims();
        assert_eq!(dw.len(), 3, "weights must be [K,H,W]");
        assert_eq!(&dw[1..], &[h, w], "weight planes must match feature resolution");
        let k = dw[0];
        let src = t.data();
        let wd = weights.data();
        let mut totals = vec![S::zero(); k];
        for (ki, total) in totals.iter_mut().enumerate() {
            *total = wd[ki * n..(ki + 1) * n].iter().copied().sum();
        }
        let mut y = vec![S::zero(); k * c];
        for ki in 0..k {
            if totals[ki] <= S::zero() {
                continue;
            }
            let wp = &wd[ki * n..(ki + 1) * n];
            for ci in 0..c {
                let plane = &src[ci * n..(ci + 1) * n];
                let acc: S = plane.iter().zip(wp).map(|(&v, &wv)| v * wv).sum();
                y[ki * c + ci] = acc / totals[ki];
            }
        }
        let weights = weights.clone();
        self.push(
            Tensor::new(vec![k, c], y),
            vec![x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let wd = weights.data();
                let mut dx = vec![S::zero(); c * n];
                for ki in 0..k {
                    if totals[ki] <= S::zero() {
                        continue;
                    }
                    let wp = &wd[ki * n..(ki + 1) * n];
                    for ci in 0..c {
                        let gv = gd[ki * c + ci] / totals[ki];
                        for (o, &wv) in dx[ci * n..(ci + 1) * n].iter_mut().zip(wp) {
                            *o += gv * wv;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, n / w, w], dx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_norm_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 1.0, 3.0]));
        let y = g.instance_norm(x, 0.0);
        assert_eq!(g.value(y).data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[3, 2, 2], |i| (i as f64) * 0.37 - 1.0));
        let y = g.softmax_ch(x);
        let d = g.value(y).data();
        for p in 0..4 {
            let s: f64 = (0..3).map(|c| d[c * 4 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[7, 4, 4]));
        let labels = vec![0u8; 16];
        let ce = g.cross_entropy_logits(x, &labels);
        assert!((g.value(ce).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn region_pool_zero_weight_rows_are_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 2, 2], |i| i as f64 + 1.0));
        let mut w = Tensor::zeros(&[2, 2, 2]);
        w.data_mut()[0] = 1.0; // region 0 = first pixel only; region 1 empty
        let y = g.region_pool(x, &w);
        let d = g.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 5.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.0);
    }
}
