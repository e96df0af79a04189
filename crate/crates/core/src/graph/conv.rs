//! Spatial ops: convolution (im2col + GEMM), pooling, upsampling, cropping.

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Lower a CHW map into the `[C·k·k, Ho·Wo]` patch matrix.
fn im2col<S: Scalar>(
    x: &[S], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize,
    ho: usize, wo: usize,
) -> Vec<S> {
    let n = ho * wo;
    let mut cols = vec![S::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = ((ci * k + dy) * k + dx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst_row + ox] = plane[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a patch matrix back onto a CHW map (adjoint of [`im2col`]).
fn col2im<S: Scalar>(
    cols: &[S], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize,
    ho: usize, wo: usize,
) -> Vec<S> {
    let n = ho * wo;
    let mut x = vec![S::zero(); c * h * w];
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = ((ci * k + dy) * k + dx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + iy as usize * w;
                    let src_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst_row + ix as usize] += cols[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<S: Scalar> Graph<S> {
    /// 2-D convolution: `x` is CHW, `w` is `[Cout, Cin, k, k]`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let dx = tx.dims();
        let dw = tw.dims();
        assert_eq!(dx.len(), 3, "conv2d input must be CHW, got {:?}", dx);
        assert_eq!(dw.len(), 4, "conv2d weight must be [Cout,Cin,k,k]");
        assert_eq!(dx[0], dw[1], "conv2d channel mismatch: input {:?} weight {:?}", dx, dw);
        assert_eq!(dw[2], dw[3], "only square kernels supported");
        let (cin, h, w_in) = (dx[0], dx[1], dx[2]);
        let (cout, k) = (dw[0], dw[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(w_in, k, stride, pad);
        let n = ho * wo;
        let kk = cin * k * k;

        let cols = im2col(tx.data(), cin, h, w_in, k, stride, pad, ho, wo);
        let mut y = vec![S::zero(); cout * n];
        S::gemm(cout, kk, n, S::one(), tw.data(), kk as isize, 1, &cols, n as isize, 1, S::zero(), &mut y);
        if let Some(bv) = b {
            let bias = self.value(bv).data().to_vec();
            for (co, &bc) in bias.iter().enumerate() {
                for v in &mut y[co * n..(co + 1) * n] {
                    *v += bc;
                }
            }
        }

        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        self.push(
            Tensor::new(vec![cout, ho, wo], y),
            parents,
            Box::new(move |g, p, needs| {
                let gd = g.data();
                // Patch matrix is recomputed here rather than kept alive on the tape.
                let cols = im2col(p[0].data(), cin, h, w_in, k, stride, pad, ho, wo);
                let dxg = needs[0].then(|| {
                    // dCols = Wᵀ · G, then scatter back.
                    let mut dcols = vec![S::zero(); kk * n];
                    S::gemm(kk, cout, n, S::one(), p[1].data(), 1, kk as isize, gd, n as isize, 1, S::zero(), &mut dcols);
                    Tensor::new(
                        vec![cin, h, w_in],
                        col2im(&dcols, cin, h, w_in, k, stride, pad, ho, wo),
                    )
                });
                let dwg = needs[1].then(|| {
                    // dW = G · Colsᵀ
                    let mut dw = vec![S::zero(); cout * kk];
                    S::gemm(cout, n, kk, S::one(), gd, n as isize, 1, &cols, 1, n as isize, S::zero(), &mut dw);
                    Tensor::new(vec![cout, cin, k, k], dw)
                });
                let mut grads = vec![dxg, dwg];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let db: Vec<S> = (0..cout).map(|co| gd[co * n..(co + 1) * n].iter().copied().sum()).collect();
                        Tensor::new(vec![cout], db)
                    }));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbor 2× upsampling of a CHW map.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        let (c, h, w) = (d[0], d[1], d[2]);
        let src = t.data();
        let (h2, w2) = (h * 2, w * 2);
        let mut y = vec![S::zero(); c * h2 * w2];
        for ci in 0..c {
            for i in 0..h {
                let row = &src[ci * h * w + i * w..ci * h * w + (i + 1) * w];
                for di in 0..2 {
                    let dst = &mut y[ci * h2 * w2 + (2 * i + di) * w2..ci * h2 * w2 + (2 * i + di + 1) * w2];
                    for (j, &v) in row.iter().enumerate() {
                        dst[2 * j] = v;
                        dst[2 * j + 1] = v;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![c, h2, w2], y),
            vec![x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![S::zero(); c * h * w];
                for ci in 0..c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            dx[ci * h * w + (i / 2) * w + j / 2] += gd[ci * h2 * w2 + i * w2 + j];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], dx))]
            }),
        )
    }

    /// Adaptive average pooling of a CHW map onto a `gh × gw` grid.
    pub fn avg_pool_to(&mut self, x: Var, gh: usize, gw: usize) -> Var {
        let t = self.value(x);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        let (c, h, w) = (d[0], d[1], d[2]);
        assert!(gh <= h && gw <= w);
        let src = t.data();
        let mut y = vec![S::zero(); c * gh * gw];
        let bounds_y: Vec<(usize, usize)> = (0..gh).map(|i| (i * h / gh, (i + 1) * h / gh)).collect();
        let bounds_x: Vec<(usize, usize)> = (0..gw).map(|j| (j * w / gw, (j + 1) * w / gw)).collect();
        for ci in 0..c {
            for (i, &(y0, y1)) in bounds_y.iter().enumerate() {
                for (j, &(x0, x1)) in bounds_x.iter().enumerate() {
                    let mut acc = S::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[ci * h * w + yy * w + xx];
                        }
                    }
                    y[ci * gh * gw + i * gw + j] = acc / S::from_usize((y1 - y0) * (x1 - x0));
                }
            }
        }
        self.push(
            Tensor::new(vec![c, gh, gw], y),
            vec![x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let bounds_y: Vec<(usize, usize)> = (0..gh).map(|i| (i * h / gh, (i + 1) * h / gh)).collect();
                let bounds_x: Vec<(usize, usize)> = (0..gw).map(|j| (j * w / gw, (j + 1) * w / gw)).collect();
                let mut dx = vec![S::zero(); c * h * w];
                for ci in 0..c {
                    for (i, &(y0, y1)) in bounds_y.iter().enumerate() {
                        for (j, &(x0, x1)) in bounds_x.iter().enumerate() {
                            let gv = gd[ci * gh * gw + i * gw + j] / S::from_usize((y1 - y0) * (x1 - x0));
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[ci * h * w + yy * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], dx))]
            }),
        )
    }

    /// Spatial crop `[y0, y0+ch) × [x0, x0+cw)` of a CHW map.
    pub fn crop2d(&mut self, x: Var, y0: usize, x0: usize, ch: usize, cw: usize) -> Var {
        let t = self.value(x);
        let d = t.dims();
        assert_eq!(d.len(), 3);
        let (c, h, w) = (d[0], d[1], d[2]);
        assert!(y0 + ch <= h && x0 + cw <= w, "crop out of bounds");
        let src = t.data();
        let mut y = Vec::with_capacity(c * ch * cw);
        for ci in 0..c {
            for i in 0..ch {
                let off = ci * h * w + (y0 + i) * w + x0;
                y.extend_from_slice(&src[off..off + cw]);
            }
        }
        self.push(
            Tensor::new(vec![c, ch, cw], y),
            vec![x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![S::zero(); c * h * w];
                for ci in 0..c {
                    for i in 0..ch {
                        let dst = ci * h * w + (y0 + i) * w + x0;
                        let src = (ci * ch + i) * cw;
                        dx[dst..dst + cw].copy_from_slice(&gd[src..src + cw]);
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], dx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
        // 1x1 kernel with weight 2.0
        let w = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![2.0]));
        let y = g.conv2d(x, w, None, 1, 0);
        assert_eq!(g.value(y).dims(), &[1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 8.0);
    }

    #[test]
    fn stride2_halves_even_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 8, 8]));
        let w = g.leaf(Tensor::zeros(&[3, 2, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1);
        assert_eq!(g.value(y).dims(), &[3, 4, 4]);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[1, 2, 2], |i| i as f64 + 1.0));
        let up = g.upsample_nearest2(x);
        let down = g.avg_pool_to(up, 2, 2);
        assert_eq!(g.value(down).data(), g.value(x).data());
    }

    #[test]
    fn crop_extracts_window() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
        let y = g.crop2d(x, 1, 2, 2, 2);
        assert_eq!(g.value(y).data(), &[6.0, 7.0, 10.0, 11.0]);
    }
}
