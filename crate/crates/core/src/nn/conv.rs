//! 2-D convolution and transposed convolution via im2col + GEMM.

use super::gemm::{gemm, MatRef};
use super::params::{Grads, Initializer, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Kernel geometry of a convolution. Padding may be asymmetric so that
/// even-sized kernels can preserve spatial size at stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation: 1,
            pad_begin: pad,
            pad_end: pad,
        }
    }

    pub const fn dilated(kernel: usize, dilation: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation,
            pad_begin: pad,
            pad_end: pad,
        }
    }

    pub const fn asymmetric(kernel: usize, stride: usize, pad_begin: usize, pad_end: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation: 1,
            pad_begin,
            pad_end,
        }
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output length of the forward convolution along one axis.
    pub fn conv_output(&self, input: usize) -> Option<usize> {
        let padded = input + self.pad_begin + self.pad_end;
        if padded < self.span() {
            return None;
        }
        Some((padded - self.span()) / self.stride + 1)
    }

    /// Output length of the transposed convolution along one axis.
    pub fn transposed_output(&self, input: usize) -> Option<usize> {
        if input == 0 {
            return None;
        }
        ((input - 1) * self.stride + self.span()).checked_sub(self.pad_begin + self.pad_end)
    }
}

/// Unfolds `x` (`channels × h × w`) into a `(channels·k·k) × (oh·ow)` matrix.
fn im2col(x: &[f64], channels: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize) -> Vec<f64> {
    let k = g.kernel;
    let p = oh * ow;
    let mut cols = vec![0.0; channels * k * k * p];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad_begin as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad_begin as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, out: &mut [f64]) {
    let k = g.kernel;
    let p = oh * ow;
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad_begin as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad_begin as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution with weight `[out, in, k, k]` and bias `[out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

impl Conv2d {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
    ) -> Self {
        let k = geometry.kernel;
        let shape = vec![out_channels, in_channels, k, k];
        let weight = store.push(
            format!("{name}.weight"),
            shape,
            init.normal(out_channels * in_channels * k * k),
        );
        let bias = store.push(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]);
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geometry.conv_output(h)?, self.geometry.conv_output(w)?))
    }

    /// Returns the output and the unfolded input needed by [`Self::backward`].
    pub(crate) fn forward(&self, store: &ParamStore, x: &Tensor) -> (Tensor, Vec<f64>) {
        debug_assert_eq!(x.channels(), self.in_channels);
        let (oh, ow) = self
            .output_size(x.height(), x.width())
            .expect("input smaller than the convolution kernel");
        let cols = im2col(
            x.data(),
            self.in_channels,
            x.height(),
            x.width(),
            &self.geometry,
            oh,
            ow,
        );
        let kk = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        let p = oh * ow;
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        let bias = &store.get(self.bias).data;
        for (c, &b) in bias.iter().enumerate() {
            out.plane_mut(c).fill(b);
        }
        gemm(
            MatRef::new(&store.get(self.weight).data, self.out_channels, kk),
            MatRef::new(&cols, kk, p),
            1.0,
            out.data_mut(),
        );
        (out, cols)
    }

    /// Back-propagates `grad_out`, accumulating parameter gradients into
    /// `grads` when given, and returns the gradient w.r.t. the input.
    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        input_hw: (usize, usize),
        cols: &[f64],
        grad_out: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let kk = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        let p = grad_out.plane_len();
        let dout = MatRef::new(grad_out.data(), self.out_channels, p);
        if let Some(grads) = grads {
            gemm(dout, MatRef::new(cols, kk, p).t(), 1.0, grads.get_mut(self.weight));
            let db = grads.get_mut(self.bias);
            for (c, d) in db.iter_mut().enumerate() {
                *d += grad_out.plane(c).iter().sum::<f64>();
            }
        }
        let mut dcols = vec![0.0; kk * p];
        gemm(
            MatRef::new(&store.get(self.weight).data, self.out_channels, kk).t(),
            dout,
            0.0,
            &mut dcols,
        );
        let (h, w) = input_hw;
        let mut dx = Tensor::zeros(self.in_channels, h, w);
        col2im(
            &dcols,
            self.in_channels,
            h,
            w,
            &self.geometry,
            grad_out.height(),
            grad_out.width(),
            dx.data_mut(),
        );
        dx
    }
}

/// Transposed convolution with weight `[in, out, k, k]` and bias `[out]`.
/// `geometry` describes the forward convolution it is the adjoint of.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

impl ConvTranspose2d {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
    ) -> Self {
        let k = geometry.kernel;
        let shape = vec![in_channels, out_channels, k, k];
        let weight = store.push(
            format!("{name}.weight"),
            shape,
            init.normal(out_channels * in_channels * k * k),
        );
        let bias = store.push(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]);
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geometry.transposed_output(h)?, self.geometry.transposed_output(w)?))
    }

    pub(crate) fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels(), self.in_channels);
        let (oh, ow) = self
            .output_size(x.height(), x.width())
            .expect("transposed convolution output would be empty");
        let kk = self.out_channels * self.geometry.kernel * self.geometry.kernel;
        let p = x.plane_len();
        let mut cols = vec![0.0; kk * p];
        gemm(
            MatRef::new(&store.get(self.weight).data, self.in_channels, kk).t(),
            MatRef::new(x.data(), self.in_channels, p),
            0.0,
            &mut cols,
        );
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        col2im(
            &cols,
            self.out_channels,
            oh,
            ow,
            &self.geometry,
            x.height(),
            x.width(),
            out.data_mut(),
        );
        let bias = &store.get(self.bias).data;
        for (c, &b) in bias.iter().enumerate() {
            for v in out.plane_mut(c) {
                *v += b;
            }
        }
        out
    }

    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        input: &Tensor,
        grad_out: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let kk = self.out_channels * self.geometry.kernel * self.geometry.kernel;
        let p = input.plane_len();
        let dcols = im2col(
            grad_out.data(),
            self.out_channels,
            grad_out.height(),
            grad_out.width(),
            &self.geometry,
            input.height(),
            input.width(),
        );
        if let Some(grads) = grads {
            gemm(
                MatRef::new(input.data(), self.in_channels, p),
                MatRef::new(&dcols, kk, p).t(),
                1.0,
                grads.get_mut(self.weight),
            );
            let db = grads.get_mut(self.bias);
            for (c, d) in db.iter_mut().enumerate() {
                *d += grad_out.plane(c).iter().sum::<f64>();
            }
        }
        let mut dx = Tensor::zeros(self.in_channels, input.height(), input.width());
        gemm(
            MatRef::new(&store.get(self.weight).data, self.in_channels, kk),
            MatRef::new(&dcols, kk, p),
            0.0,
            dx.data_mut(),
        );
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn direct_conv(x: &Tensor, w: &[f64], b: &[f64], cout: usize, g: &ConvGeometry) -> Tensor {
        let k = g.kernel;
        let oh = g.conv_output(x.height()).unwrap();
        let ow = g.conv_output(x.width()).unwrap();
        let mut out = Tensor::zeros(cout, oh, ow);
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..x.channels() {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad_begin as isize;
                                let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad_begin as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height() && (ix as usize) < x.width() {
                                    acc += w[((o * x.channels() + c) * k + ki) * k + kj]
                                        * x.get(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(o, oy, ox, acc);
                }
            }
        }
        out
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for g in [
            ConvGeometry::new(3, 1, 1),
            ConvGeometry::new(4, 2, 1),
            ConvGeometry::dilated(3, 2, 2),
            ConvGeometry::asymmetric(4, 1, 1, 2),
        ] {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(3, 0.5);
            let conv = Conv2d::new(&mut store, &mut init, "c", 2, 3, g);
            store.by_name_mut("c.bias").unwrap().data = vec![0.1, -0.2, 0.3];
            let x = ramp(2, 8, 6);
            let (y, _) = conv.forward(&store, &x);
            let expected = direct_conv(&x, &store.get(conv.weight).data, &store.get(conv.bias).data, 3, &g);
            assert!(y.same_shape(&expected), "{g:?}");
            for (a, b) in y.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_sizes() {
        assert_eq!(ConvGeometry::new(4, 2, 1).conv_output(64), Some(32));
        assert_eq!(ConvGeometry::asymmetric(4, 1, 1, 2).conv_output(16), Some(16));
        assert_eq!(ConvGeometry::dilated(3, 2, 2).conv_output(16), Some(16));
        assert_eq!(ConvGeometry::new(4, 2, 1).transposed_output(16), Some(32));
        assert_eq!(ConvGeometry::new(3, 1, 0).conv_output(2), None);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias.
        let g = ConvGeometry::new(4, 2, 1);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(11, 0.3);
        let conv = Conv2d::new(&mut store, &mut init, "c", 3, 2, g);
        let w = store.get(conv.weight).data.clone();
        let mut tstore = ParamStore::new();
        let tconv = ConvTranspose2d::new(&mut tstore, &mut init, "t", 2, 3, g);
        tstore.by_name_mut("t.weight").unwrap().data = w;

        let x = ramp(3, 8, 8);
        let y = ramp(2, 4, 4).map(|v| v * 1.7 + 0.05);
        let (cx, _) = conv.forward(&store, &x);
        let ty = tconv.forward(&tstore, &y);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
