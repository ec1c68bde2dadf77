//! Compute kernels shared by the autodiff graph and the interval code.
//!
//! Everything here works on raw row-major buffers. Matrix products go
//! through `matrixmultiply::sgemm`; convolutions are lowered to GEMM with
//! an im2col buffer per sample (kernel 3, padding 1).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;

/// Strided matrix view description: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = a · b + beta · c` with `c` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f32], beta: f32) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above guarantee every strided access lands inside
    // the borrowed slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial extent of a kernel-3, padding-1 convolution.
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent + 2 * PADDING - KERNEL) / stride + 1
}

pub(crate) fn check_affine(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    if input.rank() != 2 || weight.rank() != 2 || input.shape()[1] != weight.shape()[1] {
        return Err(Error::dim("affine", input.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [weight.shape()[0]] {
            return Err(Error::dim("affine bias", weight.shape(), b.shape()));
        }
    }
    Ok(())
}

/// `out[b, i] = Σ_j weight[i, j] · input[b, j] + bias[i]`.
pub fn affine(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    check_affine(input, weight, bias)?;
    let (batch, n) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[0];
    let mut out = vec![0.0f32; batch * m];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(
        Mat::row_major(input.data(), batch, n),
        Mat::row_major(weight.data(), m, n).t(),
        &mut out,
        beta,
    );
    Ok(Tensor::from_parts(vec![batch, m], out))
}

/// Gradients of [`affine`] given the upstream gradient `grad_out[B, m]`.
pub(crate) fn affine_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (batch, n) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[0];
    let g = Mat::row_major(grad_out.data(), batch, m);
    let grad_input = need_input.then(|| {
        let mut gi = vec![0.0f32; batch * n];
        gemm(g, Mat::row_major(weight.data(), m, n), &mut gi, 0.0);
        Tensor::from_parts(vec![batch, n], gi)
    });
    let grad_weight = need_weight.then(|| {
        let mut gw = vec![0.0f32; m * n];
        gemm(g.t(), Mat::row_major(input.data(), batch, n), &mut gw, 0.0);
        Tensor::from_parts(vec![m, n], gw)
    });
    (grad_input, grad_weight)
}

/// Column sums of a `[rows, cols]` gradient, i.e. the bias gradient.
pub(crate) fn sum_rows(grad: &[f32], cols: usize) -> Tensor {
    let mut out = vec![0.0f64; cols];
    for row in grad.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v as f64;
        }
    }
    Tensor::from_parts(vec![cols], out.into_iter().map(|v| v as f32).collect())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * KERNEL * KERNEL
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
    fn in_item(&self) -> usize {
        self.in_ch * self.h * self.w
    }
}

pub(crate) fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeom> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::Contract(format!(
            "conv stride must be 1 or 2, got {stride}"
        )));
    }
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
    }
    let s = input.shape();
    let k = kernel.shape();
    if k[1] != s[1] || k[2] != KERNEL || k[3] != KERNEL {
        return Err(Error::dim("conv2d", s, k));
    }
    Ok(ConvGeom {
        batch: s[0],
        in_ch: s[1],
        h: s[2],
        w: s[3],
        out_ch: k[0],
        stride,
        oh: conv_out_extent(s[2], stride),
        ow: conv_out_extent(s[3], stride),
    })
}

/// Fills `cols[(c·9 + ky·3 + kx), oy·ow + ox]` with the padded input patch.
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((c * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - PADDING as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - PADDING as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back onto an input-shaped gradient.
fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((c * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - PADDING as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - PADDING as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with a 3×3 kernel, padding 1 and stride 1 or 2.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_ch] {
            return Err(Error::dim("conv2d bias", kernel.shape(), b.shape()));
        }
    }
    let plane = g.out_plane();
    let out_item = g.out_ch * plane;
    let mut out = vec![0.0f32; g.batch * out_item];
    let mut cols = vec![0.0f32; g.patch() * plane];
    let kmat = Mat::row_major(kernel.data(), g.out_ch, g.patch());
    for b in 0..g.batch {
        im2col(
            &input.data()[b * g.in_item()..(b + 1) * g.in_item()],
            &g,
            &mut cols,
        );
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        let beta = match bias {
            Some(bias) => {
                for (f, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                    chunk.fill(bias.data()[f]);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(kmat, Mat::row_major(&cols, g.patch(), plane), dst, beta);
    }
    Ok(Tensor::from_parts(vec![g.batch, g.out_ch, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = conv_geometry(input, kernel, stride).expect("validated in forward");
    let plane = g.out_plane();
    let out_item = g.out_ch * plane;
    let mut cols = vec![0.0f32; g.patch() * plane];
    let mut gi = need_input.then(|| vec![0.0f32; input.len()]);
    let mut gk = need_kernel.then(|| vec![0.0f32; kernel.len()]);
    let kmat = Mat::row_major(kernel.data(), g.out_ch, g.patch());
    for b in 0..g.batch {
        let go = Mat::row_major(
            &grad_out.data()[b * out_item..(b + 1) * out_item],
            g.out_ch,
            plane,
        );
        if let Some(gk) = gk.as_mut() {
            im2col(
                &input.data()[b * g.in_item()..(b + 1) * g.in_item()],
                &g,
                &mut cols,
            );
            gemm(go, Mat::row_major(&cols, g.patch(), plane).t(), gk, 1.0);
        }
        if let Some(gi) = gi.as_mut() {
            gemm(kmat.t(), go, &mut cols, 0.0);
            col2im(&cols, &g, &mut gi[b * g.in_item()..(b + 1) * g.in_item()]);
        }
    }
    (
        gi.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        gk.map(|d| Tensor::from_parts(kernel.shape().to_vec(), d)),
    )
}

/// Bias gradient of a convolution: sum over batch and spatial positions.
pub(crate) fn conv_bias_grad(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    let (f, plane) = (s[1], s[2] * s[3]);
    let mut acc = vec![0.0f64; f];
    for item in grad_out.data().chunks_exact(f * plane) {
        for (c, chunk) in item.chunks_exact(plane).enumerate() {
            acc[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Tensor::from_parts(vec![f], acc.into_iter().map(|v| v as f32).collect())
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise `max + ln Σ exp(x − max)` over the last axis of a `[B, K]` tensor.
pub fn log_sum_exp(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 2 {
        return Err(Error::dim("log_sum_exp", input.shape(), &[0, 0]));
    }
    let (batch, k) = (input.shape()[0], input.shape()[1]);
    let out = (0..batch)
        .map(|b| log_sum_exp_row(&input.data()[b * k..(b + 1) * k]) as f32)
        .collect();
    Ok(Tensor::from_parts(vec![batch], out))
}

pub(crate) fn log_sum_exp_row(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_hand_arithmetic() {
        let x = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0]).unwrap();
        assert_eq!(affine(&x, &w, Some(&b)).unwrap().data(), &[-2.0]);
    }

    #[test]
    fn affine_identity() {
        let x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let zero = Tensor::zeros(&[3]);
        assert_eq!(affine(&x, &eye, Some(&zero)).unwrap(), x);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 5]);
        match affine(&x, &w, None).unwrap_err() {
            Error::Dimension { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 5]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 1, 3, 4], (0..12).map(|v| v as f32).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k, None, 1).unwrap(), x);
    }

    #[test]
    fn conv_counts_overlaps() {
        let x = Tensor::full(&[1, 1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &k, None, 1).unwrap();
        let d = out.data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[3], 4.0);
        assert_eq!(d[1], 6.0);
        assert_eq!(d[5], 9.0);
        assert_eq!(d[10], 9.0);
    }

    #[test]
    fn conv_stride_two_extent() {
        assert_eq!(conv_out_extent(28, 2), 14);
        assert_eq!(conv_out_extent(32, 2), 16);
        assert_eq!(conv_out_extent(7, 2), 4);
        let x = Tensor::zeros(&[2, 3, 7, 5]);
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        assert_eq!(conv2d(&x, &k, None, 2).unwrap().shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, None, 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn log_sum_exp_examples() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1000.0, 0.0, -1e4, 1e4]).unwrap();
        let out = log_sum_exp(&t).unwrap();
        assert!((out.data()[0] - 2f32.ln()).abs() < 1e-7);
        assert!((out.data()[1] - 1000.0).abs() < 1e-3);
        assert!((out.data()[2] - 1e4).abs() < 1e-2);

        let t = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let oracle = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((log_sum_exp(&t).unwrap().data()[0] as f64 - oracle).abs() < 1e-5);
    }
}
