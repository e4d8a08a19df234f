//! Raw loops behind the dense ops. All buffers are row-major.

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n×k] += g[n×m] · bᵀ` where `b` is `k×m`.
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×m] += aᵀ · g` where `a` is `n×k`, `g` is `n×m`.
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Valid cross-correlation. `x: [B,C,H,W]`, `k: [F,C,kh,kw]`, `out: [B,F,H',W']`.
///
/// The same loop nest, run with the roles of input and output swapped, is the
/// transposed convolution; see [`scatter`].
pub(crate) fn gather(x: &[f64], k: &[f64], out: &mut [f64], g: &ConvGeom) {
    let ConvGeom {
        batch,
        in_ch,
        in_h,
        in_w,
        out_ch,
        kh,
        kw,
        stride,
        out_h,
        out_w,
    } = *g;
    for b in 0..batch {
        for f in 0..out_ch {
            let obase = (b * out_ch + f) * out_h * out_w;
            for c in 0..in_ch {
                let xbase = (b * in_ch + c) * in_h * in_w;
                let kbase = (f * in_ch + c) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let kv = k[kbase + u * kw + v];
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..out_h {
                            let xrow = xbase + (i * stride + u) * in_w + v;
                            let orow = &mut out[obase + i * out_w..obase + (i + 1) * out_w];
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += kv * x[xrow + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather`] with respect to `x`: `dx += gatherᵀ(gout)`.
pub(crate) fn scatter(gout: &[f64], k: &[f64], dx: &mut [f64], g: &ConvGeom) {
    let ConvGeom {
        batch,
        in_ch,
        in_h,
        in_w,
        out_ch,
        kh,
        kw,
        stride,
        out_h,
        out_w,
    } = *g;
    for b in 0..batch {
        for f in 0..out_ch {
            let obase = (b * out_ch + f) * out_h * out_w;
            for c in 0..in_ch {
                let xbase = (b * in_ch + c) * in_h * in_w;
                let kbase = (f * in_ch + c) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let kv = k[kbase + u * kw + v];
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..out_h {
                            let xrow = xbase + (i * stride + u) * in_w + v;
                            let orow = &gout[obase + i * out_w..obase + (i + 1) * out_w];
                            for (j, &o) in orow.iter().enumerate() {
                                dx[xrow + j * stride] += kv * o;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`gather`] with respect to the kernel: `dk += Σ gout ⊗ x`.
pub(crate) fn kernel_grad(x: &[f64], gout: &[f64], dk: &mut [f64], g: &ConvGeom) {
    let ConvGeom {
        batch,
        in_ch,
        in_h,
        in_w,
        out_ch,
        kh,
        kw,
        stride,
        out_h,
        out_w,
    } = *g;
    for b in 0..batch {
        for f in 0..out_ch {
            let obase = (b * out_ch + f) * out_h * out_w;
            for c in 0..in_ch {
                let xbase = (b * in_ch + c) * in_h * in_w;
                let kbase = (f * in_ch + c) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let mut acc = 0.0;
                        for i in 0..out_h {
                            let xrow = xbase + (i * stride + u) * in_w + v;
                            let orow = &gout[obase + i * out_w..obase + (i + 1) * out_w];
                            for (j, &o) in orow.iter().enumerate() {
                                acc += o * x[xrow + j * stride];
                            }
                        }
                        dk[kbase + u * kw + v] += acc;
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
