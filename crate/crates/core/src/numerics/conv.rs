//! im2col-based 2-D cross-correlation kernels shared by the tape's forward and backward passes.

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `input` (`[c_in, h, w]`) into a `[c_in*k*k, out_h*out_w]` column matrix.
pub fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto an input-shaped buffer.
pub fn col2im(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a_t`/`b_t` select the transposed view of a row-major matrix stored with the
/// given leading dimension.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted lengths cover every index matrixmultiply touches for
    // these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward pass. Returns the output (`[c_out, out_h, out_w]`) and the column matrix
/// (empty for pointwise convs, whose columns are the input itself).
pub fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = g.out_h() * g.out_w();
    let mut out = vec![0.0; g.c_out * n];
    for (o, b) in bias.iter().enumerate() {
        out[o * n..(o + 1) * n].fill(*b);
    }
    if g.is_pointwise() {
        gemm(
            g.c_out,
            g.patch_len(),
            n,
            weight,
            false,
            input,
            false,
            1.0,
            &mut out,
        );
        (out, Vec::new())
    } else {
        let cols = im2col(g, input);
        gemm(
            g.c_out,
            g.patch_len(),
            n,
            weight,
            false,
            &cols,
            false,
            1.0,
            &mut out,
        );
        (out, cols)
    }
}

/// Gradients of a conv with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    cols: &[f64],
    weight: &[f64],
    upstream: &[f64],
    need_input: bool,
) -> ConvGrads {
    let n = g.out_h() * g.out_w();
    let p = g.patch_len();
    let cols = if g.is_pointwise() { input } else { cols };

    let mut dw = vec![0.0; g.c_out * p];
    gemm(g.c_out, n, p, upstream, false, cols, true, 0.0, &mut dw);
    let db = upstream.chunks(n).map(|row| row.iter().sum()).collect();

    let input_grad = need_input.then(|| {
        let mut dcols = vec![0.0; p * n];
        gemm(
            p, g.c_out, n, weight, true, upstream, false, 0.0, &mut dcols,
        );
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; g.c_in * g.h * g.w];
            col2im(g, &dcols, &mut dx);
            dx
        }
    });

    ConvGrads {
        input: input_grad,
        weight: dw,
        bias: db,
    }
}
