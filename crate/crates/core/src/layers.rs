//! Layer geometry plus the convolution and pooling kernels.
//!
//! Activations are always carried as `[batch, features]` matrices; conv and
//! pooling layers interpret each row as a `[channels, height, width]` volume.

use crate::error::{Result, SnnError};
use crate::tensor::{matmul, matmul_tn, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Affine {
        fan_in: usize,
        fan_out: usize,
    },
    /// Stride 1, zero padding `kernel / 2` (odd kernels keep the spatial size).
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
    /// Non-overlapping average pooling with window `size`.
    AvgPool {
        channels: usize,
        height: usize,
        width: usize,
        size: usize,
    },
    Flatten {
        features: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub followed_by_lif: bool,
}

impl LayerSpec {
    pub fn affine(fan_in: usize, fan_out: usize, lif: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Affine { fan_in, fan_out },
            followed_by_lif: lif,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, height: usize, width: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
            },
            followed_by_lif: true,
        }
    }

    pub fn avg_pool(channels: usize, height: usize, width: usize, size: usize) -> Self {
        LayerSpec {
            kind: LayerKind::AvgPool {
                channels,
                height,
                width,
                size,
            },
            followed_by_lif: false,
        }
    }

    pub fn flatten(features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Flatten { features },
            followed_by_lif: false,
        }
    }

    pub fn in_features(&self) -> usize {
        match self.kind {
            LayerKind::Affine { fan_in, .. } => fan_in,
            LayerKind::Conv2d {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
            LayerKind::AvgPool {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
            LayerKind::Flatten { features } => features,
        }
    }

    pub fn out_features(&self) -> usize {
        match self.kind {
            LayerKind::Affine { fan_out, .. } => fan_out,
            LayerKind::Conv2d {
                out_channels,
                height,
                width,
                ..
            } => out_channels * height * width,
            LayerKind::AvgPool {
                channels,
                height,
                width,
                size,
            } => channels * (height / size) * (width / size),
            LayerKind::Flatten { features } => features,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self.kind, LayerKind::Affine { .. } | LayerKind::Conv2d { .. })
    }

    /// Weight tensor shape, `None` for parameter-free layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Affine { fan_in, fan_out } => Some(vec![fan_out, fan_in]),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels * kernel * kernel]),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight_shape().map_or(0, |s| s[1])
    }

    /// Multiply-accumulates of the equivalent dense/conv layer for one sample.
    pub fn ann_ops(&self) -> u64 {
        match self.kind {
            LayerKind::Affine { fan_in, fan_out } => (fan_in * fan_out) as u64,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
            } => (out_channels * height * width * in_channels * kernel * kernel) as u64,
            _ => 0,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Affine { fan_in, fan_out } if fan_in == 0 || fan_out == 0 => {
                Err(SnnError::Config("affine layer with zero width".into()))
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
            } => {
                if in_channels * out_channels * height * width == 0 {
                    Err(SnnError::Config("conv layer with a zero dimension".into()))
                } else if kernel % 2 == 0 {
                    Err(SnnError::Config(format!("conv kernel must be odd, got {kernel}")))
                } else {
                    Ok(())
                }
            }
            LayerKind::AvgPool {
                height,
                width,
                size,
                channels,
            } => {
                if size == 0 || channels == 0 || height % size != 0 || width % size != 0 {
                    Err(SnnError::Config(format!(
                        "pool window {size} must evenly divide {height}x{width}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Forward current of a weighted layer: `x · Wᵀ` for affine, convolution otherwise.
pub(crate) fn weighted_forward(spec: &LayerSpec, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    match spec.kind {
        LayerKind::Affine { .. } => crate::tensor::matmul_nt(x, w),
        LayerKind::Conv2d { .. } => conv_forward(spec, w, x),
        _ => unreachable!("not a weighted layer"),
    }
}

/// Gradient w.r.t. the weights given the output gradient `dy` and the layer input `x`.
pub(crate) fn weighted_backward_weights(spec: &LayerSpec, dy: &Tensor, x: &Tensor) -> Result<Tensor> {
    match spec.kind {
        LayerKind::Affine { .. } => matmul_tn(dy, x),
        LayerKind::Conv2d { .. } => {
            let col = im2col(spec, x);
            let dy_rows = channels_last(spec, dy);
            matmul_tn(&dy_rows, &col)
        }
        _ => unreachable!("not a weighted layer"),
    }
}

/// Gradient w.r.t. the layer input.
pub(crate) fn weighted_backward_input(spec: &LayerSpec, w: &Tensor, dy: &Tensor) -> Result<Tensor> {
    match spec.kind {
        LayerKind::Affine { .. } => matmul(dy, w),
        LayerKind::Conv2d { .. } => {
            let dy_rows = channels_last(spec, dy);
            let dcol = matmul(&dy_rows, w)?;
            Ok(col2im(spec, &dcol, dy.shape()[0]))
        }
        _ => unreachable!("not a weighted layer"),
    }
}

fn conv_dims(spec: &LayerSpec) -> (usize, usize, usize, usize, usize) {
    match spec.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            height,
            width,
        } => (in_channels, out_channels, kernel, height, width),
        _ => unreachable!(),
    }
}

/// `[B, C*H*W]` → `[B*H*W, C*k*k]` patch matrix with zero padding.
fn im2col(spec: &LayerSpec, x: &Tensor) -> Tensor {
    let (c, _, k, h, w) = conv_dims(spec);
    let b = x.shape()[0];
    let pad = (k / 2) as isize;
    let patch = c * k * k;
    let mut col = vec![0.0; b * h * w * patch];
    let xd = x.data();
    for n in 0..b {
        let xs = &xd[n * c * h * w..(n + 1) * c * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let row = &mut col[((n * h + oy) * w + ox) * patch..][..patch];
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[(ci * k + ky) * k + kx] = xs[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * h * w, patch], col).expect("finite patches")
}

fn col2im(spec: &LayerSpec, dcol: &Tensor, b: usize) -> Tensor {
    let (c, _, k, h, w) = conv_dims(spec);
    let pad = (k / 2) as isize;
    let patch = c * k * k;
    let mut dx = vec![0.0; b * c * h * w];
    let cd = dcol.data();
    for n in 0..b {
        let xs = &mut dx[n * c * h * w..(n + 1) * c * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let row = &cd[((n * h + oy) * w + ox) * patch..][..patch];
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[(ci * h + iy as usize) * w + ix as usize] += row[(ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c * h * w], dx).expect("finite gradient")
}

/// `[B, O*H*W]` → `[B*H*W, O]`.
fn channels_last(spec: &LayerSpec, y: &Tensor) -> Tensor {
    let (_, o, _, h, w) = conv_dims(spec);
    let b = y.shape()[0];
    let mut out = vec![0.0; b * h * w * o];
    let yd = y.data();
    for n in 0..b {
        for oc in 0..o {
            for p in 0..h * w {
                out[(n * h * w + p) * o + oc] = yd[(n * o + oc) * h * w + p];
            }
        }
    }
    Tensor::new(vec![b * h * w, o], out).expect("finite")
}

fn conv_forward(spec: &LayerSpec, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (_, o, _, h, wd) = conv_dims(spec);
    let b = x.shape()[0];
    let rows = crate::tensor::matmul_nt(&im2col(spec, x), w)?;
    let rd = rows.data();
    let mut out = vec![0.0; b * o * h * wd];
    for n in 0..b {
        for p in 0..h * wd {
            for oc in 0..o {
                out[(n * o + oc) * h * wd + p] = rd[(n * h * wd + p) * o + oc];
            }
        }
    }
    Tensor::new(vec![b, o * h * wd], out)
}

pub(crate) fn pool_forward(spec: &LayerSpec, x: &Tensor) -> Tensor {
    let LayerKind::AvgPool {
        channels,
        height,
        width,
        size,
    } = spec.kind
    else {
        unreachable!()
    };
    let (oh, ow) = (height / size, width / size);
    let b = x.shape()[0];
    let norm = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; b * channels * oh * ow];
    let xd = x.data();
    for n in 0..b {
        for c in 0..channels {
            let plane = &xd[(n * channels + c) * height * width..][..height * width];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..size {
                        for dx in 0..size {
                            acc += plane[(oy * size + dy) * width + ox * size + dx];
                        }
                    }
                    out[((n * channels + c) * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
    }
    Tensor::new(vec![b, channels * oh * ow], out).expect("finite")
}

pub(crate) fn pool_backward(spec: &LayerSpec, dy: &Tensor) -> Tensor {
    let LayerKind::AvgPool {
        channels,
        height,
        width,
        size,
    } = spec.kind
    else {
        unreachable!()
    };
    let (oh, ow) = (height / size, width / size);
    let b = dy.shape()[0];
    let norm = 1.0 / (size * size) as f64;
    let mut dx = vec![0.0; b * channels * height * width];
    let dd = dy.data();
    for n in 0..b {
        for c in 0..channels {
            let plane = &mut dx[(n * channels + c) * height * width..][..height * width];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dd[((n * channels + c) * oh + oy) * ow + ox] * norm;
                    for dy_ in 0..size {
                        for dx_ in 0..size {
                            plane[(oy * size + dy_) * width + ox * size + dx_] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, channels * height * width], dx).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct convolution with explicit padding checks.
    fn naive_conv(spec: &LayerSpec, w: &Tensor, x: &Tensor) -> Vec<f64> {
        let (c, o, k, h, wd) = conv_dims(spec);
        let b = x.shape()[0];
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; b * o * h * wd];
        for n in 0..b {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad;
                                    let ix = xx as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[oc * c * k * k + (ci * k + ky) * k + kx]
                                        * x.data()[n * c * h * wd + (ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((n * o + oc) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let spec = LayerSpec::conv(2, 3, 3, 4, 5);
        let mut rng = Rng::new(4);
        let w = rng.normal_tensor(&spec.weight_shape().unwrap(), 0.0, 1.0);
        let x = rng.normal_tensor(&[2, spec.in_features()], 0.0, 1.0);
        let got = weighted_forward(&spec, &w, &x).unwrap();
        for (g, e) in got.data().iter().zip(naive_conv(&spec, &w, &x)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> = <col2im-grad, x> and = <dW, W> by linearity
        let spec = LayerSpec::conv(2, 3, 3, 4, 4);
        let mut rng = Rng::new(8);
        let w = rng.normal_tensor(&spec.weight_shape().unwrap(), 0.0, 1.0);
        let x = rng.normal_tensor(&[3, spec.in_features()], 0.0, 1.0);
        let dy = rng.normal_tensor(&[3, spec.out_features()], 0.0, 1.0);
        let y = weighted_forward(&spec, &w, &x).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let dx = weighted_backward_input(&spec, &w, &dy).unwrap();
        let rhs: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let dw = weighted_backward_weights(&spec, &dy, &x).unwrap();
        let rhs2: f64 = dw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - rhs2).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn pool_forward_and_adjoint() {
        let spec = LayerSpec::avg_pool(1, 2, 4, 2);
        let x = Tensor::new(vec![1, 8], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = pool_forward(&spec, &x);
        assert_eq!(y.data(), &[3.5, 5.5]);
        let dy = Tensor::new(vec![1, 2], vec![4.0, 8.0]).unwrap();
        let dx = pool_backward(&spec, &dy);
        assert_eq!(dx.data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }

    #[test]
    fn geometry() {
        let c = LayerSpec::conv(1, 16, 3, 28, 28);
        assert_eq!(c.out_features(), 16 * 28 * 28);
        assert_eq!(c.ann_ops(), 16 * 28 * 28 * 9);
        let p = LayerSpec::avg_pool(16, 28, 28, 2);
        assert_eq!(p.out_features(), 16 * 14 * 14);
        assert!(LayerSpec::avg_pool(1, 5, 4, 2).validate().is_err());
        assert!(LayerSpec::conv(1, 1, 2, 4, 4).validate().is_err());
    }
}
