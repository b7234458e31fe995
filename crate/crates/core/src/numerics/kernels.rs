//! Slice-level compute kernels shared by the forward and backward passes.
//!
//! Layouts are row-major: matrices `[rows × cols]`, images `[B, C, H, W]`,
//! convolution weights `[C_out, C_in, k, k]` and transposed-convolution
//! weights `[C_in, C_out, k, k]`.

/// `out[n×m] += a[n×k] · b[k×m]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
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

/// `out[k×m] += aᵀ · g` where `a` is `[n×k]` and `g` is `[n×m]`.
pub fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
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

/// `out[n×k] += g · bᵀ` where `g` is `[n×m]` and `b` is `[k×m]`.
pub fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent of a strided convolution, `None` when it would be empty.
    pub fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = len + 2 * padding;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Output extent of a transposed convolution without padding.
    pub fn deconv_out(len: usize, kernel: usize, stride: usize) -> usize {
        (len - 1) * stride + kernel
    }
}

/// Output columns `lo..hi` whose input column `o·stride + k − padding` lies
/// inside `0..len`.
fn valid_span(
    out_len: usize,
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if len + padding > k {
        ((len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
    let (k, s) = (g.kernel, g.stride);
    for b in 0..g.batch {
        for oc in 0..g.out_channels {
            let obase = (b * g.out_channels + oc) * g.out_h * g.out_w;
            for ic in 0..g.in_channels {
                let xbase = (b * g.in_channels + ic) * g.in_h * g.in_w;
                let wbase = (oc * g.in_channels + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = valid_span(g.out_h, g.in_h, ky, s, g.padding);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (ox0, ox1) = valid_span(g.out_w, g.in_w, kx, s, g.padding);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.padding;
                            let xrow = xbase + iy * g.in_w + ox0 * s + kx - g.padding;
                            let orow = obase + oy * g.out_w;
                            let dst = &mut out[orow + ox0..orow + ox1];
                            if s == 1 {
                                for (o, xv) in dst.iter_mut().zip(&x[xrow..xrow + (ox1 - ox0)]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in dst.iter_mut().enumerate() {
                                    *o += wv * x[xrow + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and its weight.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeometry,
    want_x: bool,
    want_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = if want_x {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut gw = if want_w {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    let (k, s) = (g.kernel, g.stride);
    for b in 0..g.batch {
        for oc in 0..g.out_channels {
            let obase = (b * g.out_channels + oc) * g.out_h * g.out_w;
            for ic in 0..g.in_channels {
                let xbase = (b * g.in_channels + ic) * g.in_h * g.in_w;
                let wbase = (oc * g.in_channels + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = valid_span(g.out_h, g.in_h, ky, s, g.padding);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (ox0, ox1) = valid_span(g.out_w, g.in_w, kx, s, g.padding);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let n = ox1 - ox0;
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.padding;
                            let xrow = xbase + iy * g.in_w + ox0 * s + kx - g.padding;
                            let orow = obase + oy * g.out_w + ox0;
                            let go = &gout[orow..orow + n];
                            if s == 1 {
                                if want_x {
                                    for (d, gv) in gx[xrow..xrow + n].iter_mut().zip(go) {
                                        *d += wv * gv;
                                    }
                                }
                                if want_w {
                                    acc += x[xrow..xrow + n]
                                        .iter()
                                        .zip(go)
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                            } else {
                                for (j, gv) in go.iter().enumerate() {
                                    if want_x {
                                        gx[xrow + j * s] += wv * gv;
                                    }
                                    acc += x[xrow + j * s] * gv;
                                }
                            }
                        }
                        if want_w {
                            gw[wbase + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

pub fn deconv2d_forward(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
    let k = g.kernel;
    for b in 0..g.batch {
        for ic in 0..g.in_channels {
            let xbase = (b * g.in_channels + ic) * g.in_h * g.in_w;
            for oc in 0..g.out_channels {
                let obase = (b * g.out_channels + oc) * g.out_h * g.out_w;
                let wbase = (ic * g.out_channels + oc) * k * k;
                for iy in 0..g.in_h {
                    for ix in 0..g.in_w {
                        let xv = x[xbase + iy * g.in_w + ix];
                        if xv == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let orow = obase + (iy * g.stride + ky) * g.out_w + ix * g.stride;
                            for kx in 0..k {
                                out[orow + kx] += xv * w[wbase + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn deconv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeometry,
    want_x: bool,
    want_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = if want_x {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut gw = if want_w {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    let k = g.kernel;
    for b in 0..g.batch {
        for ic in 0..g.in_channels {
            let xbase = (b * g.in_channels + ic) * g.in_h * g.in_w;
            for oc in 0..g.out_channels {
                let obase = (b * g.out_channels + oc) * g.out_h * g.out_w;
                let wbase = (ic * g.out_channels + oc) * k * k;
                for iy in 0..g.in_h {
                    for ix in 0..g.in_w {
                        let xv = x[xbase + iy * g.in_w + ix];
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let orow = obase + (iy * g.stride + ky) * g.out_w + ix * g.stride;
                            for kx in 0..k {
                                let go = gout[orow + kx];
                                if want_w {
                                    gw[wbase + ky * k + kx] += xv * go;
                                }
                                acc += w[wbase + ky * k + kx] * go;
                            }
                        }
                        if want_x {
                            gx[xbase + iy * g.in_w + ix] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Sum that does not depend on the order of `values`: the inputs are sorted
/// before accumulation, so any permutation yields the same bits.
pub fn order_invariant_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn output_extents() {
        assert_eq!(ConvGeometry::conv_out(8, 3, 1, 1), Some(8));
        assert_eq!(ConvGeometry::conv_out(8, 3, 2, 1), Some(4));
        assert_eq!(ConvGeometry::conv_out(2, 5, 1, 0), None);
        assert_eq!(ConvGeometry::deconv_out(8, 2, 2), 16);
    }

    #[test]
    fn sorted_sum_is_permutation_invariant() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 1e-3];
        let mut b = vec![3.5, -1e16, 1e-3, 1.0, 1e16];
        assert_eq!(
            order_invariant_sum(&mut a).to_bits(),
            order_invariant_sum(&mut b).to_bits()
        );
    }
}
