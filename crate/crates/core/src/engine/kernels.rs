//! Raw numeric kernels behind the tape operations. Everything here works on
//! flat row-major slices; shape checking happens in the tape layer.

/// `c = a · b + beta · c` for strided row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `[m,k] · [k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

/// `aᵀ · b` with `a: [k,m]`, `b: [k,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (1, m), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

/// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (1, k), 0.0, &mut c, (n, 1));
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Sliding-window geometry of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Self {
        Self {
            channels,
            h,
            w,
            kh,
            kw,
            pad,
            ho: h + 2 * pad + 1 - kh,
            wo: w + 2 * pad + 1 - kw,
        }
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds a batch `[B, C, H, W]` into columns `[C·kh·kw, B·ho·wo]`.
pub(crate) fn im2col(input: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let ncols = batch * p;
    let mut cols = vec![0.0; g.patch() * ncols];
    let img = g.channels * g.h * g.w;
    for c in 0..g.channels {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let src = &input[b * img + c * g.h * g.w..b * img + (c + 1) * g.h * g.w];
                    for i in 0..g.ho {
                        let y = i + u;
                        if y < g.pad || y >= g.h + g.pad {
                            continue;
                        }
                        let src_row = &src[(y - g.pad) * g.w..(y - g.pad + 1) * g.w];
                        let dst = &mut dst_row[b * p + i * g.wo..b * p + (i + 1) * g.wo];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let x = j + v;
                            if x >= g.pad && x < g.w + g.pad {
                                *d = src_row[x - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back into `[B, C, H, W]`, summing overlaps.
pub(crate) fn col2im(cols: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let ncols = batch * p;
    let img = g.channels * g.h * g.w;
    let mut out = vec![0.0; batch * img];
    for c in 0..g.channels {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let dst = &mut out[b * img + c * g.h * g.w..b * img + (c + 1) * g.h * g.w];
                    for i in 0..g.ho {
                        let y = i + u;
                        if y < g.pad || y >= g.h + g.pad {
                            continue;
                        }
                        let dst_row = &mut dst[(y - g.pad) * g.w..(y - g.pad + 1) * g.w];
                        let src = &src_row[b * p + i * g.wo..b * p + (i + 1) * g.wo];
                        for (j, s) in src.iter().enumerate() {
                            let x = j + v;
                            if x >= g.pad && x < g.w + g.pad {
                                dst_row[x - g.pad] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[B, C, P]` → `[C, B·P]`
pub(crate) fn batch_to_channel_major(x: &[f64], batch: usize, ch: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &x[(b * ch + c) * p..(b * ch + c + 1) * p];
            out[c * batch * p + b * p..c * batch * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B·P]` → `[B, C, P]`
pub(crate) fn channel_to_batch_major(x: &[f64], batch: usize, ch: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..ch {
        for b in 0..batch {
            let src = &x[c * batch * p + b * p..c * batch * p + (b + 1) * p];
            out[(b * ch + c) * p..(b * ch + c + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// Stride-1 cross-correlation. `kernel: [Cout, Cin, kh, kw]`.
pub(crate) fn conv2d(
    input: &[f64],
    batch: usize,
    g: &ConvGeom,
    kernel: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let cols = im2col(input, batch, g);
    let np = batch * g.positions();
    let mut tmp = vec![0.0; c_out * np];
    for (co, row) in tmp.chunks_mut(np).enumerate() {
        row.fill(bias[co]);
    }
    gemm(c_out, g.patch(), np, kernel, (g.patch(), 1), &cols, (np, 1), 1.0, &mut tmp, (np, 1));
    channel_to_batch_major(&tmp, batch, c_out, g.positions())
}

/// Gradients of [`conv2d`]: returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_backward(
    input: &[f64],
    batch: usize,
    g: &ConvGeom,
    kernel: &[f64],
    c_out: usize,
    d_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.positions();
    let np = batch * p;
    let dt = batch_to_channel_major(d_out, batch, c_out, p);
    let d_bias: Vec<f64> = dt.chunks(np).map(|r| r.iter().sum()).collect();
    let cols = im2col(input, batch, g);
    let d_kernel = matmul_nt(&dt, &cols, c_out, np, g.patch());
    let d_input = need_input.then(|| {
        let dcols = matmul_tn(kernel, &dt, c_out, g.patch(), np);
        col2im(&dcols, batch, g)
    });
    (d_input, d_kernel, d_bias)
}

/// Transposed convolution. `kernel: [Cin, Cout, kh, kw]`, `g` describes the
/// equivalent forward convolution from the `[Cout, H+kh-1, W+kw-1]` output
/// back onto the `[Cin, H, W]` input grid.
pub(crate) fn deconv2d(
    input: &[f64],
    batch: usize,
    c_in: usize,
    g: &ConvGeom,
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let p = g.positions();
    let np = batch * p;
    let xm = batch_to_channel_major(input, batch, c_in, p);
    let cols = matmul_tn(kernel, &xm, c_in, g.patch(), np);
    let mut out = col2im(&cols, batch, g);
    let plane = g.h * g.w;
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % g.channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Gradients of [`deconv2d`]: returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn deconv2d_backward(
    input: &[f64],
    batch: usize,
    c_in: usize,
    g: &ConvGeom,
    kernel: &[f64],
    d_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.positions();
    let np = batch * p;
    let plane = g.h * g.w;
    let mut d_bias = vec![0.0; g.channels];
    for (i, chunk) in d_out.chunks(plane).enumerate() {
        d_bias[i % g.channels] += chunk.iter().sum::<f64>();
    }
    let dcols = im2col(d_out, batch, g);
    let xm = batch_to_channel_major(input, batch, c_in, p);
    let d_kernel = matmul_nt(&xm, &dcols, c_in, np, g.patch());
    let d_input = need_input.then(|| {
        let dxm = matmul(kernel, &dcols, c_in, g.patch(), np);
        channel_to_batch_major(&dxm, batch, c_in, p)
    });
    (d_input, d_kernel, d_bias)
}

/// Non-overlapping 2×2 max pooling over `[B·C]` planes of `h × w`; trailing
/// odd rows/columns are dropped. Returns values and flat argmax indices.
pub(crate) fn maxpool2x2(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour ×2 upsampling of `[B·C]` planes.
pub(crate) fn upsample2x(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h2 * w2];
    for pl in 0..planes {
        for i in 0..h2 {
            for j in 0..w2 {
                out[pl * h2 * w2 + i * w2 + j] = input[pl * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(d_out: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut d = vec![0.0; planes * h * w];
    for pl in 0..planes {
        for i in 0..h2 {
            for j in 0..w2 {
                d[pl * h * w + (i / 2) * w + j / 2] += d_out[pl * h2 * w2 + i * w2 + j];
            }
        }
    }
    d
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
