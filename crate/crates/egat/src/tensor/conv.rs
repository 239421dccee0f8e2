//! Direct valid-mode convolution kernels (stride 1, no padding) and their two
//! adjoints. The inner loops run over contiguous rows so LLVM can vectorize
//! them; these three routines dominate training cost.

/// `y[o, i, j] = sum_{c,u,v} x[c, i+u, j+v] * w[o, c, u, v]`
pub(crate) fn forward(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    wgt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    out: &mut [f64],
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    for o in 0..cout {
        let wo = &wgt[o * cin * kh * kw..(o + 1) * cin * kh * kw];
        let yo = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..cin {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for u in 0..kh {
                for v in 0..kw {
                    let coeff = wo[(c * kh + u) * kw + v];
                    if coeff == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let xrow = &xc[(i + u) * w + v..(i + u) * w + v + ow];
                        let yrow = &mut yo[i * ow..i * ow + ow];
                        for (yv, xv) in yrow.iter_mut().zip(xrow) {
                            *yv += coeff * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint with respect to the input: `dx[c, i+u, j+v] += w[o, c, u, v] * g[o, i, j]`.
pub(crate) fn input_grad(
    g: &[f64],
    (cout, oh, ow): (usize, usize, usize),
    wgt: &[f64],
    (cin, kh, kw): (usize, usize, usize),
    out: &mut [f64],
) {
    let h = oh + kh - 1;
    let w = ow + kw - 1;
    for o in 0..cout {
        let go = &g[o * oh * ow..(o + 1) * oh * ow];
        let wo = &wgt[o * cin * kh * kw..(o + 1) * cin * kh * kw];
        for c in 0..cin {
            let xc = &mut out[c * h * w..(c + 1) * h * w];
            for u in 0..kh {
                for v in 0..kw {
                    let coeff = wo[(c * kh + u) * kw + v];
                    if coeff == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let grow = &go[i * ow..i * ow + ow];
                        let xrow = &mut xc[(i + u) * w + v..(i + u) * w + v + ow];
                        for (xv, gv) in xrow.iter_mut().zip(grow) {
                            *xv += coeff * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint with respect to the kernel: `dw[o, c, u, v] = sum_{i,j} x[c, i+u, j+v] * g[o, i, j]`.
pub(crate) fn kernel_grad(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    g: &[f64],
    (cout, oh, ow): (usize, usize, usize),
    out: &mut [f64],
) {
    let kh = h - oh + 1;
    let kw = w - ow + 1;
    for o in 0..cout {
        let go = &g[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..cin {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for u in 0..kh {
                for v in 0..kw {
                    let mut acc = 0.0;
                    for i in 0..oh {
                        let xrow = &xc[(i + u) * w + v..(i + u) * w + v + ow];
                        let grow = &go[i * ow..i * ow + ow];
                        for (xv, gv) in xrow.iter().zip(grow) {
                            acc += xv * gv;
                        }
                    }
                    out[((o * cin + c) * kh + u) * kw + v] = acc;
                }
            }
        }
    }
}
