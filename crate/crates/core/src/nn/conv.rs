//! Strided 2-D convolution and its adjoint via im2col + GEMM.
//!
//! Padding follows the "half" (TensorFlow `SAME`) scheme: a stride-`s`
//! convolution maps `in` to `ceil(in / s)` and pads
//! `max((out - 1) * s + k - in, 0)` in total, `floor(total / 2)` before.
//! A transposed convolution with the same kernel and stride is the exact
//! adjoint of the convolution mapping `in * s` to `in`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Backward, Scalar, Tape, Tensor, Var};

/// Output extent and leading pad of a half-padded strided convolution.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Geometry of a forward convolution from the large (`h x w x c_in`) grid to
/// the small (`h_out x w_out x c_out`) one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, c_in: usize, kh: usize, kw: usize, c_out: usize, stride: usize) -> Self {
        let (h_out, pad_top) = same_padding(h, kh, stride);
        let (w_out, pad_left) = same_padding(w, kw, stride);
        Self {
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
            stride,
            h_out,
            w_out,
            pad_top,
            pad_left,
        }
    }

    /// Rows of the patch matrix (output positions).
    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Columns of the patch matrix.
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn input_len(&self) -> usize {
        self.h * self.w * self.c_in
    }

    fn output_len(&self) -> usize {
        self.positions() * self.c_out
    }
}

/// Gathers the patches of one `h x w x c_in` sample into `cols`
/// (`positions x patch_len`, row-major).
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let row_len = g.patch_len();
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &mut cols[(oy * g.w_out + ox) * row_len..][..row_len];
            for i in 0..g.kh {
                let iy = (oy * g.stride + i) as isize - g.pad_top as isize;
                for j in 0..g.kw {
                    let ix = (ox * g.stride + j) as isize - g.pad_left as isize;
                    let dst = &mut row[(i * g.kw + j) * g.c_in..][..g.c_in];
                    if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.c_in;
                        dst.copy_from_slice(&x[src..src + g.c_in]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch rows back onto an `h x w x c_in` sample.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let row_len = g.patch_len();
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &cols[(oy * g.w_out + ox) * row_len..][..row_len];
            for i in 0..g.kh {
                let iy = (oy * g.stride + i) as isize - g.pad_top as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for j in 0..g.kw {
                    let ix = (ox * g.stride + j) as isize - g.pad_left as isize;
                    if ix < 0 || ix as usize >= g.w {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c_in;
                    let src = &row[(i * g.kw + j) * g.c_in..][..g.c_in];
                    for (d, &s) in x[dst..dst + g.c_in].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for px in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in px.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], channels: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for px in g.chunks_exact(channels) {
        for (acc, &v) in gb.iter_mut().zip(px) {
            *acc = *acc + v;
        }
    }
    gb
}

/// Sums per-sample partial results in sample order.
fn ordered_sum<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    acc
}

fn kernel_dims<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match w.shape() {
        &[kh, kw, a, b] => Ok((kh, kw, a, b)),
        s => Err(Error::dim(format!("kernel must be Kh x Kw x C x C', got {s:?}"))),
    }
}

fn check_bias<T: Scalar>(b: &Tensor<T>, channels: usize) -> Result<()> {
    if b.shape() != [channels] {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match {channels} output channels",
            b.shape()
        )));
    }
    Ok(())
}

/// Forward convolution of an `N x H x W x Cin` batch with a
/// `Kh x Kw x Cin x Cout` kernel.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let (n, h, wd, c) = x.nhwc()?;
    let (kh, kw, cin, cout) = kernel_dims(w)?;
    if stride == 0 {
        return Err(Error::contract("stride must be at least 1"));
    }
    if c != cin {
        return Err(Error::dim(format!(
            "input has {c} channels but kernel {:?} expects {cin}",
            w.shape()
        )));
    }
    check_bias(b, cout)?;
    let g = ConvGeometry::new(h, wd, cin, kh, kw, cout, stride);
    let mut out = vec![T::zero(); n * g.output_len()];
    out.par_chunks_mut(g.output_len())
        .zip(x.data().par_chunks(g.input_len()))
        .for_each(|(o, xs)| {
            let mut cols = vec![T::zero(); g.positions() * g.patch_len()];
            im2col(xs, &g, &mut cols);
            matmul_into(
                g.positions(),
                g.patch_len(),
                cout,
                &cols,
                false,
                w.data(),
                false,
                o,
                false,
            );
            add_bias(o, b.data());
        });
    Ok((Tensor::new(&[n, g.h_out, g.w_out, cout], out)?, g))
}

/// Transposed convolution of an `N x H x W x Cin` batch with a
/// `Kh x Kw x Cout x Cin` kernel, producing `N x (H s) x (W s) x Cout`.
pub fn conv2d_transposed_forward<T: Scalar>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let (n, h, wd, c) = y.nhwc()?;
    let (kh, kw, cout, cin) = kernel_dims(w)?;
    if stride == 0 {
        return Err(Error::contract("stride must be at least 1"));
    }
    if c != cin {
        return Err(Error::dim(format!(
            "input has {c} channels but transposed kernel {:?} expects {cin}",
            w.shape()
        )));
    }
    check_bias(b, cout)?;
    let g = ConvGeometry::new(h * stride, wd * stride, cout, kh, kw, cin, stride);
    debug_assert_eq!((g.h_out, g.w_out), (h, wd));
    let mut out = vec![T::zero(); n * g.input_len()];
    out.par_chunks_mut(g.input_len())
        .zip(y.data().par_chunks(g.output_len()))
        .for_each(|(o, ys)| {
            let mut cols = vec![T::zero(); g.positions() * g.patch_len()];
            matmul_into(
                g.positions(),
                cin,
                g.patch_len(),
                ys,
                false,
                w.data(),
                true,
                &mut cols,
                false,
            );
            col2im(&cols, &g, o);
            add_bias(o, b.data());
        });
    Ok((Tensor::new(&[n, g.h, g.w, cout], out)?, g))
}

/// Input gradient and kernel gradient of one sample.
type SampleGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);

struct Conv2dBack {
    geom: ConvGeometry,
}

impl<T: Scalar> Backward<T> for Conv2dBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let geo = self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let (p, k, cout) = (geo.positions(), geo.patch_len(), geo.c_out);
        let per_sample: Vec<SampleGrads<T>> = g
            .par_chunks(geo.output_len())
            .zip(x.data().par_chunks(geo.input_len()))
            .map(|(gs, xs)| {
                let gx = needs[0].then(|| {
                    let mut gcols = vec![T::zero(); p * k];
                    matmul_into(p, cout, k, gs, false, w.data(), true, &mut gcols, false);
                    let mut gx = vec![T::zero(); geo.input_len()];
                    col2im(&gcols, &geo, &mut gx);
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut cols = vec![T::zero(); p * k];
                    im2col(xs, &geo, &mut cols);
                    let mut gw = vec![T::zero(); k * cout];
                    matmul_into(k, p, cout, &cols, true, gs, false, &mut gw, false);
                    gw
                });
                (gx, gw)
            })
            .collect();
        let (gxs, gws): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
        let gx = needs[0].then(|| gxs.into_iter().flatten().flatten().collect());
        let gw = needs[1].then(|| ordered_sum(gws.into_iter().flatten().collect(), k * cout));
        let gb = needs[2].then(|| bias_grad(g, cout));
        vec![gx, gw, gb]
    }
}

struct Conv2dTransposedBack {
    geom: ConvGeometry,
}

impl<T: Scalar> Backward<T> for Conv2dTransposedBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let geo = self.geom;
        let (y, w) = (inputs[0], inputs[1]);
        // Forward geometry: large grid has `geo.c_in` (= Cout of this op)
        // channels, small grid `geo.c_out` (= Cin of this op).
        let (p, k, cin) = (geo.positions(), geo.patch_len(), geo.c_out);
        let per_sample: Vec<SampleGrads<T>> = g
            .par_chunks(geo.input_len())
            .zip(y.data().par_chunks(geo.output_len()))
            .map(|(gs, ys)| {
                let mut gcols = vec![T::zero(); p * k];
                im2col(gs, &geo, &mut gcols);
                let gy = needs[0].then(|| {
                    let mut gy = vec![T::zero(); p * cin];
                    matmul_into(p, k, cin, &gcols, false, w.data(), false, &mut gy, false);
                    gy
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); k * cin];
                    matmul_into(k, p, cin, &gcols, true, ys, false, &mut gw, false);
                    gw
                });
                (gy, gw)
            })
            .collect();
        let (gys, gws): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
        let gy = needs[0].then(|| gys.into_iter().flatten().flatten().collect());
        let gw = needs[1].then(|| ordered_sum(gws.into_iter().flatten().collect(), k * cin));
        let gb = needs[2].then(|| bias_grad(g, geo.c_in));
        vec![gy, gw, gb]
    }
}

impl<T: Scalar> Tape<T> {
    /// Half-padded strided convolution; see [`conv2d_forward`].
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (out, geom) = conv2d_forward(self.value(x), self.value(kernel), self.value(bias), stride)?;
        self.record(&[x, kernel, bias], out, Conv2dBack { geom })
    }

    /// Adjoint of [`Tape::conv2d`] with the same kernel; see
    /// [`conv2d_transposed_forward`].
    pub fn conv2d_transposed(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (out, geom) = conv2d_transposed_forward(self.value(x), self.value(kernel), self.value(bias), stride)?;
        self.record(&[x, kernel, bias], out, Conv2dTransposedBack { geom })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_padding_shapes() {
        assert_eq!(same_padding(80, 5, 2), (40, 1));
        assert_eq!(same_padding(120, 5, 2), (60, 1));
        assert_eq!(same_padding(15, 3, 2), (8, 1));
        assert_eq!(same_padding(4, 3, 1), (4, 1));
        assert_eq!(same_padding(6, 1, 2), (3, 0));
        assert_eq!(same_padding(1, 1, 1), (1, 0));
    }

    #[test]
    fn scalar_cases() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let (y, _) = conv2d_forward(&x, &w, &Tensor::scalar(1.0), 1).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let (z, _) = conv2d_transposed_forward(&x, &w, &Tensor::scalar(0.0), 1).unwrap();
        assert_eq!(z.data(), &[6.0]);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 3, 4]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(conv2d_forward(&x, &w, &b, 1), Err(Error::Dimension(_))));
        assert!(matches!(
            conv2d_transposed_forward(&x, &w, &b, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn transposed_output_is_stride_multiple() {
        let y = Tensor::<f64>::zeros(&[1, 5, 8, 3]);
        let w = Tensor::zeros(&[3, 3, 2, 3]);
        let (z, _) = conv2d_transposed_forward(&y, &w, &Tensor::zeros(&[2]), 2).unwrap();
        assert_eq!(z.shape(), &[1, 10, 16, 2]);
    }
}
