//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value plus a closure that maps the output gradient to parent gradients.
//! Parameters enter a graph as *leaves* (gradients collected) or *constants*
//! (gradient propagation stops), which is how frozen networks and
//! per-mode parameter gating are expressed.

mod conv;
mod norm;
pub mod check;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[Tensor<S>], &[bool]) -> Vec<Option<Tensor<S>>>>;

struct OpRecord<S: Scalar> {
    parents: Vec<Var>,
    backward: BackwardFn<S>,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Option<OpRecord<S>>,
    needs_grad: bool,
}

/// Gradients keyed by [`Var`], produced by [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert a value whose gradient is never needed; propagation stops here.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, op: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value whose gradient will be collected (inputs, parameters).
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, op: None, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor<S>, parents: Vec<Var>, backward: BackwardFn<S>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op: Some(OpRecord { parents, backward }), needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Returns one gradient per reachable
    /// grad-requiring node.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.dims(), S::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let Some(op) = &self.nodes[i].op else { continue };
            let g = grads[i].clone().unwrap();
            let pvals: Vec<Tensor<S>> = op.parents.iter().map(|p| self.nodes[p.0].value.clone()).collect();
            let needs: Vec<bool> = op.parents.iter().map(|p| self.nodes[p.0].needs_grad).collect();
            let pgrads = (op.backward)(&g, &pvals, &needs);
            debug_assert_eq!(pgrads.len(), op.parents.len());
            for (p, pg) in op.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.dims(), self.nodes[p.0].value.dims(), "gradient shape mismatch");
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, vec![a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            v,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a, b],
            Box::new(|g, p, needs| {
                let da = needs[0].then(|| g.zip_map(&p[1], |gv, bv| gv * bv));
                let db = needs[1].then(|| g.zip_map(&p[0], |gv, av| gv * av));
                vec![da, db]
            }),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, vec![a], Box::new(|g, _, _| vec![Some(g.map(|x| -x))]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(
            v,
            vec![a],
            Box::new(|g, p, _| {
                vec![Some(g.zip_map(&p[0], |gv, x| {
                    if x > S::zero() {
                        gv
                    } else if x < S::zero() {
                        -gv
                    } else {
                        S::zero()
                    }
                }))]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, vec![a], Box::new(move |g, _, _| vec![Some(g.map(|x| x * c))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, vec![a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Elementwise multiply by a fixed tensor (masks, gates known at build time).
    pub fn mul_const(&mut self, a: Var, t: &Tensor<S>) -> Var {
        let v = self.value(a).zip_map(t, |x, m| x * m);
        let t = t.clone();
        self.push(v, vec![a], Box::new(move |g, _, _| vec![Some(g.zip_map(&t, |gv, m| gv * m))]))
    }

    pub fn add_const(&mut self, a: Var, t: &Tensor<S>) -> Var {
        let v = self.value(a).zip_map(t, |x, m| x + m);
        self.push(v, vec![a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(S::zero()));
        self.push(
            v,
            vec![a],
            Box::new(|g, p, _| {
                vec![Some(g.zip_map(&p[0], |gv, x| if x > S::zero() { gv } else { S::zero() }))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { x * slope });
        self.push(
            v,
            vec![a],
            Box::new(move |g, p, _| {
                vec![Some(g.zip_map(&p[0], |gv, x| if x > S::zero() { gv } else { gv * slope }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| S::one() / (S::one() + (-x).exp()));
        let out = v.clone();
        self.push(
            v,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.zip_map(&out, |gv, y| gv * y * (S::one() - y)))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let out = v.clone();
        self.push(
            v,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.zip_map(&out, |gv, y| gv * (S::one() - y * y)))]),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        let out = v.clone();
        self.push(
            v,
            vec![a],
            Box::new(move |g, _, _| {
                let two = S::from_f64(2.0);
                vec![Some(g.zip_map(&out, |gv, y| gv / (two * y)))]
            }),
        )
    }

    /// `a / s` where `s` is a scalar node (spectral norm, vector normalization).
    pub fn div_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "divisor must be scalar");
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x / sv);
        self.push(
            v,
            vec![a, s],
            Box::new(move |g, p, needs| {
                let da = needs[0].then(|| g.map(|gv| gv / sv));
                let ds = needs[1].then(|| {
                    let acc = g
                        .data()
                        .iter()
                        .zip(p[0].data().iter())
                        .map(|(&gv, &x)| gv * x)
                        .sum::<S>();
                    Tensor::new(p[1].dims().to_vec(), vec![-acc / (sv * sv)])
                });
                vec![da, ds]
            }),
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        let dims = self.value(a).dims().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Box::new(move |g, _, _| {
                let gv = g.item();
                vec![Some(Tensor::full(&dims, gv))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::from_usize(n))
    }

    /// Sum of elementwise products, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dims(), self.value(b).dims());
        let s: S = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x * y)
            .sum();
        self.push(
            Tensor::scalar(s),
            vec![a, b],
            Box::new(|g, p, needs| {
                let gv = g.item();
                let da = needs[0].then(|| p[1].map(|y| y * gv));
                let db = needs[1].then(|| p[0].map(|x| x * gv));
                vec![da, db]
            }),
        )
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let v = self.value(a).reshape(dims);
        let old = self.value(a).dims().to_vec();
        self.push(v, vec![a], Box::new(move |g, _, _| vec![Some(g.reshape(&old))]))
    }

    /// Concatenate two CHW maps along the channel axis.
    pub fn concat_ch(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.dims(), tb.dims());
        assert_eq!(da.len(), 3);
        assert_eq!(&da[1..], &db[1..], "spatial dims must match for concat");
        let (ca, cb, h, w) = (da[0], db[0], da[1], da[2]);
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        self.push(
            Tensor::new(vec![ca + cb, h, w], data),
            vec![a, b],
            Box::new(move |g, _, needs| {
                let gd = g.data();
                let split = ca * h * w;
                let da = needs[0].then(|| Tensor::new(vec![ca, h, w], gd[..split].to_vec()));
                let db = needs[1].then(|| Tensor::new(vec![cb, h, w], gd[split..].to_vec()));
                vec![da, db]
            }),
        )
    }

    /// Channels `[from, to)` of a CHW map.
    pub fn slice_ch(&mut self, a: Var, from: usize, to: usize) -> Var {
        let t = self.value(a);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        assert!(from < to && to <= d[0]);
        let (c, h, w) = (d[0], d[1], d[2]);
        let plane = h * w;
        let data = t.data()[from * plane..to * plane].to_vec();
        self.push(
            Tensor::new(vec![to - from, h, w], data),
            vec![a],
            Box::new(move |g, _, _| {
                let mut dx = vec![S::zero(); c * plane];
                dx[from * plane..to * plane].copy_from_slice(g.data());
                vec![Some(Tensor::new(vec![c, h, w], dx))]
            }),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a(m×k) · b(k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.dims(), tb.dims());
        assert_eq!(da.len(), 2);
        assert_eq!(db.len(), 2);
        assert_eq!(da[1], db[0], "matmul inner dims: {:?} vs {:?}", da, db);
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut c = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), ta.data(), k as isize, 1, tb.data(), n as isize, 1, S::zero(), &mut c);
        self.push(
            Tensor::new(vec![m, n], c),
            vec![a, b],
            Box::new(move |g, p, needs| {
                let da = needs[0].then(|| {
                    // dA = G · Bᵀ
                    let mut out = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), g.data(), n as isize, 1, p[1].data(), 1, n as isize, S::zero(), &mut out);
                    Tensor::new(vec![m, k], out)
                });
                let db = needs[1].then(|| {
                    // dB = Aᵀ · G
                    let mut out = vec![S::zero(); k * n];
                    S::gemm(k, m, n, S::one(), p[0].data(), 1, k as isize, g.data(), n as isize, 1, S::zero(), &mut out);
                    Tensor::new(vec![k, n], out)
                });
                vec![da, db]
            }),
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.dims();
        assert_eq!(d.len(), 2);
        let (m, n) = (d[0], d[1]);
        let src = t.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(
            Tensor::new(vec![n, m], out),
            vec![a],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![S::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = gd[j * m + i];
                    }
                }
                vec![Some(Tensor::new(vec![m, n], dx))]
            }),
        )
    }

    /// `W(out×in) · x(in) + b(out)`; `x` is a flat vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let dw = tw.dims();
        assert_eq!(dw.len(), 2);
        let (out_dim, in_dim) = (dw[0], dw[1]);
        assert_eq!(tx.numel(), in_dim, "linear input size mismatch");
        let xs = tx.data();
        let ws = tw.data();
        let mut y: Vec<S> = (0..out_dim)
            .map(|o| {
                let row = &ws[o * in_dim..(o + 1) * in_dim];
                row.iter().zip(xs.iter()).map(|(&wv, &xv)| wv * xv).sum()
            })
            .collect();
        if let Some(bv) = b {
            for (yo, &bo) in y.iter_mut().zip(self.value(bv).data()) {
                *yo += bo;
            }
        }
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        self.push(
            Tensor::new(vec![out_dim], y),
            parents,
            Box::new(move |g, p, needs| {
                let gd = g.data();
                let xd = p[0].data();
                let wd = p[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); in_dim];
                    for o in 0..out_dim {
                        let go = gd[o];
                        for (dxi, &wv) in dx.iter_mut().zip(&wd[o * in_dim..(o + 1) * in_dim]) {
                            *dxi += go * wv;
                        }
                    }
                    Tensor::new(p[0].dims().to_vec(), dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![S::zero(); out_dim * in_dim];
                    for o in 0..out_dim {
                        let go = gd[o];
                        for (dwi, &xv) in dw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xd) {
                            *dwi = go * xv;
                        }
                    }
                    Tensor::new(vec![out_dim, in_dim], dw)
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(needs[2].then(|| Tensor::new(vec![out_dim], gd.to_vec())));
                }
                grads
            }),
        )
    }

    // ---- composites ---------------------------------------------------

    /// `v / max(‖v‖₂, ~0)` with an epsilon inside the square root.
    pub fn l2_normalize(&mut self, v: Var) -> Var {
        let sq = self.dot(v, v);
        let sq = self.add_scalar(sq, S::from_f64(1e-12));
        let norm = self.sqrt(sq);
        self.div_scalar_var(v, norm)
    }

    /// Cosine similarity of two flat vectors, as a scalar node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let num = self.dot(a, b);
        let na_sq = self.dot(a, a);
        let na_sq = self.add_scalar(na_sq, S::from_f64(1e-12));
        let na = self.sqrt(na_sq);
        let nb_sq = self.dot(b, b);
        let nb_sq = self.add_scalar(nb_sq, S::from_f64(1e-12));
        let nb = self.sqrt(nb_sq);
        let r = self.div_scalar_var(num, na);
        self.div_scalar_var(r, nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2], vec![2.0, 3.0]));
        let b = g.leaf(Tensor::new(vec![2], vec![5.0, -1.0]));
        let p = g.mul(a, b);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, -1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn constants_block_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2], vec![2.0, 3.0]));
        let b = g.leaf(Tensor::new(vec![2], vec![5.0, -1.0]));
        let p = g.mul(a, b);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn matmul_matches_manual() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn cosine_of_same_vector_is_one() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![3], vec![0.3, -0.2, 0.9]));
        let c = g.cosine(a, a);
        assert!((g.value(c).item() - 1.0).abs() < 1e-9);
    }
}
