//! Layer kernels with hand-written reverse passes.
//!
//! All convolutions use a 4x4 kernel and stride 2. `conv2d` pads by one so
//! it halves the spatial size exactly; `tconv2d` is its adjoint, i.e. a
//! transposed convolution whose raw `2n + 2` output is cropped by one
//! sample on every border.
//!
//! Kernel layouts: conv weights are `[out_ch][in_ch][4][4]`, transposed
//! conv weights are `[in_ch][out_ch][4][4]`.

use rand::Rng;

use super::tensor::{gemm, Mat, Real, Tensor};
use crate::error::{Error, Result};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
const TAPS: usize = KERNEL * KERNEL;

/// Train or inference behaviour for batch normalisation and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn conv_out_side(side: usize, pad: usize) -> Option<usize> {
    let padded = side + 2 * pad;
    (padded >= KERNEL && (padded - KERNEL) % STRIDE == 0).then(|| (padded - KERNEL) / STRIDE + 1)
}

/// Unfolds the 4x4/stride-2 windows of `x` into a
/// `(channels * 16) x (batch * ho * wo)` matrix.
fn im2col<T: Real>(x: &Tensor<T>, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let (nb, nc, h, w) = x.shape();
    let ncols = nb * ho * wo;
    let mut cols = vec![T::zero(); nc * TAPS * ncols];
    for c in 0..nc {
        for kh in 0..KERNEL {
            for kw in 0..KERNEL {
                let row = &mut cols[((c * KERNEL + kh) * KERNEL + kw) * ncols..][..ncols];
                for b in 0..nb {
                    let src = x.plane(b, c);
                    for oy in 0..ho {
                        let iy = (oy * STRIDE + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..][..w];
                        let dst = &mut row[(b * ho + oy) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * STRIDE + kw) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters window columns back onto an image of
/// shape `(batch, channels, h, w)`, summing overlaps.
fn col2im<T: Real>(cols: &[T], nb: usize, nc: usize, h: usize, w: usize, pad: usize, ho: usize, wo: usize) -> Tensor<T> {
    let ncols = nb * ho * wo;
    let mut out = Tensor::zeros(nb, nc, h, w);
    for c in 0..nc {
        for kh in 0..KERNEL {
            for kw in 0..KERNEL {
                let row = &cols[((c * KERNEL + kh) * KERNEL + kw) * ncols..][..ncols];
                for b in 0..nb {
                    let dst = out.plane_mut(b, c);
                    for oy in 0..ho {
                        let iy = (oy * STRIDE + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..][..w];
                        let src = &row[(b * ho + oy) * wo..][..wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * STRIDE + kw) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_bias<T: Real>(y: &mut Tensor<T>, bias: &[T]) {
    let per = y.batch() * y.height() * y.width();
    for (chunk, &b) in y.data_mut().chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>, dbias: &mut [T]) {
    let per = dy.batch() * dy.height() * dy.width();
    for (chunk, db) in dy.data().chunks(per).zip(dbias) {
        *db += chunk.iter().copied().sum::<T>();
    }
}

fn check_kernel<T: Real>(name: &str, weight: &[T], bias: &[T], rows: usize, cols: usize, out_ch: usize) -> Result<()> {
    if weight.len() != rows * cols || bias.len() != out_ch {
        return Err(Error::Shape(format!(
            "{name}: kernel has {} values (expected {}), bias {} (expected {out_ch})",
            weight.len(),
            rows * cols,
            bias.len()
        )));
    }
    Ok(())
}

/// Strided cross-correlation with zero padding `pad`.
pub fn conv2d_padded<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize, pad: usize) -> Result<Tensor<T>> {
    let (nb, in_ch, h, w) = x.shape();
    check_kernel("conv2d", weight, bias, out_ch, in_ch * TAPS, out_ch)?;
    let (ho, wo) = match (conv_out_side(h, pad), conv_out_side(w, pad)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => return Err(Error::Shape(format!("conv2d cannot stride over {h}x{w} with pad {pad}"))),
    };
    let cols = im2col(x, pad, ho, wo);
    let ncols = nb * ho * wo;
    let mut y = Tensor::zeros(nb, out_ch, ho, wo);
    gemm(
        Mat::new(weight, out_ch, in_ch * TAPS),
        Mat::new(&cols, in_ch * TAPS, ncols),
        T::zero(),
        y.data_mut(),
    );
    add_bias(&mut y, bias);
    Ok(y)
}

/// 4x4, stride-2, pad-1 convolution: halves height and width.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize) -> Result<Tensor<T>> {
    conv2d_padded(x, weight, bias, out_ch, 1)
}

/// Reverse pass of [`conv2d`]. Accumulates into `dweight`/`dbias` and
/// returns the input gradient.
pub fn conv2d_backward<T: Real>(x: &Tensor<T>, weight: &[T], dy: &Tensor<T>, dweight: &mut [T], dbias: &mut [T]) -> Tensor<T> {
    let (nb, in_ch, h, w) = x.shape();
    let (_, out_ch, ho, wo) = dy.shape();
    let ncols = nb * ho * wo;
    let k = in_ch * TAPS;
    let cols = im2col(x, 1, ho, wo);
    gemm(Mat::new(dy.data(), out_ch, ncols), Mat::new(&cols, k, ncols).t(), T::one(), dweight);
    bias_grad(dy, dbias);
    let mut dcols = cols;
    gemm(Mat::new(weight, out_ch, k).t(), Mat::new(dy.data(), out_ch, ncols), T::zero(), &mut dcols);
    col2im(&dcols, nb, in_ch, h, w, 1, ho, wo)
}

fn tconv2d_padded<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize, pad: usize) -> Result<Tensor<T>> {
    let (nb, in_ch, h, w) = x.shape();
    check_kernel("tconv2d", weight, bias, in_ch, out_ch * TAPS, out_ch)?;
    let (ho, wo) = ((h - 1) * STRIDE + KERNEL - 2 * pad, (w - 1) * STRIDE + KERNEL - 2 * pad);
    let ncols = nb * h * w;
    let mut cols = vec![T::zero(); out_ch * TAPS * ncols];
    gemm(
        Mat::new(weight, in_ch, out_ch * TAPS).t(),
        Mat::new(x.data(), in_ch, ncols),
        T::zero(),
        &mut cols,
    );
    let mut y = col2im(&cols, nb, out_ch, ho, wo, pad, h, w);
    add_bias(&mut y, bias);
    Ok(y)
}

/// 4x4, stride-2 transposed convolution cropped by one sample per border:
/// doubles height and width.
pub fn tconv2d<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize) -> Result<Tensor<T>> {
    if x.height() == 0 || x.width() == 0 {
        return Err(Error::Shape("tconv2d on empty input".into()));
    }
    tconv2d_padded(x, weight, bias, out_ch, 1)
}

/// Uncropped transposed convolution: side `2n + 2`.
pub fn tconv2d_raw<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize) -> Result<Tensor<T>> {
    if x.height() == 0 || x.width() == 0 {
        return Err(Error::Shape("tconv2d on empty input".into()));
    }
    tconv2d_padded(x, weight, bias, out_ch, 0)
}

/// Reverse pass of [`tconv2d`].
pub fn tconv2d_backward<T: Real>(x: &Tensor<T>, weight: &[T], dy: &Tensor<T>, dweight: &mut [T], dbias: &mut [T]) -> Tensor<T> {
    let (nb, in_ch, h, w) = x.shape();
    let out_ch = dy.channels();
    let ncols = nb * h * w;
    let k = out_ch * TAPS;
    let dcols = im2col(dy, 1, h, w);
    gemm(Mat::new(x.data(), in_ch, ncols), Mat::new(&dcols, k, ncols).t(), T::one(), dweight);
    bias_grad(dy, dbias);
    let mut dx = Tensor::zeros(nb, in_ch, h, w);
    gemm(Mat::new(weight, in_ch, k), Mat::new(&dcols, k, ncols), T::zero(), dx.data_mut());
    dx
}

/// Values kept from a training-mode batch-norm pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Per-channel batch statistics (mean, biased variance).
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Training-mode batch normalisation over batch and spatial axes.
pub fn batchnorm_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> (Tensor<T>, BnCache<T>, BnStats<T>) {
    let nc = x.channels();
    let per = x.batch() * x.height() * x.width();
    let count = T::from_usize(per).unwrap();
    let mut y = x.clone();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(nc);
    let mut stats = BnStats {
        mean: Vec::with_capacity(nc),
        var: Vec::with_capacity(nc),
    };
    for c in 0..nc {
        let src = x.channel(c);
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let istd = T::one() / (var + eps).sqrt();
        let xh = &mut xhat[c * per..][..per];
        let dst = &mut y.data_mut()[c * per..][..per];
        for ((d, h), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
            *h = (v - mean) * istd;
            *d = gamma[c] * *h + beta[c];
        }
        inv_std.push(istd);
        stats.mean.push(mean);
        stats.var.push(var);
    }
    (y, BnCache { xhat, inv_std }, stats)
}

/// Inference-mode batch normalisation with fixed statistics.
pub fn batchnorm_infer<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: T) -> Tensor<T> {
    let per = x.batch() * x.height() * x.width();
    let mut y = x.clone();
    for (c, chunk) in y.data_mut().chunks_mut(per).enumerate() {
        let scale = gamma[c] / (var[c] + eps).sqrt();
        let shift = beta[c] - mean[c] * scale;
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    y
}

/// Reverse pass of [`batchnorm_train`].
pub fn batchnorm_backward<T: Real>(dy: &Tensor<T>, cache: &BnCache<T>, gamma: &[T], dgamma: &mut [T], dbeta: &mut [T]) -> Tensor<T> {
    let per = dy.batch() * dy.height() * dy.width();
    let count = T::from_usize(per).unwrap();
    let mut dx = dy.clone();
    for (c, dxc) in dx.data_mut().chunks_mut(per).enumerate() {
        let g = dy.channel(c);
        let xh = &cache.xhat[c * per..][..per];
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        let k = gamma[c] * cache.inv_std[c] / count;
        for ((d, &gi), &xi) in dxc.iter_mut().zip(g).zip(xh) {
            *d = k * (count * gi - sum_g - xi * sum_gx);
        }
    }
    dx
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Uses the forward output (its sign matches the input's).
pub fn leaky_relu_backward<T: Real>(dy: &Tensor<T>, y: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d *= slope;
        }
    }
    dx
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(dy: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1 / (1 - rate)`); inference mode and `rate = 0` are the identity.
pub fn dropout<T: Real, R: Rng>(x: &Tensor<T>, rate: f64, mode: Mode, rng: &mut R) -> (Tensor<T>, Option<Vec<T>>) {
    if mode == Mode::Infer || rate == 0.0 {
        return (x.clone(), None);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate)).unwrap();
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
    (y, Some(mask))
}

pub fn dropout_backward<T: Real>(dy: &Tensor<T>, mask: Option<&[T]>) -> Tensor<T> {
    match mask {
        None => dy.clone(),
        Some(m) => {
            let mut dx = dy.clone();
            dx.data_mut().iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
            dx
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_channel_major(b, c, h, w, data).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct strided cross-correlation with zero padding 1.
    fn conv_oracle(x: &Tensor<f64>, w: &[f64], b: &[f64], out_ch: usize) -> Tensor<f64> {
        let (nb, in_ch, h, wd) = x.shape();
        let mut y = Tensor::zeros(nb, out_ch, h / 2, wd / 2);
        for n in 0..nb {
            for o in 0..out_ch {
                for oy in 0..h / 2 {
                    for ox in 0..wd / 2 {
                        let mut acc = b[o];
                        for c in 0..in_ch {
                            for kh in 0..4 {
                                for kw in 0..4 {
                                    let iy = (2 * oy + kh) as isize - 1;
                                    let ix = (2 * ox + kw) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.plane(n, c)[iy as usize * wd + ix as usize]
                                            * w[((o * in_ch + c) * 4 + kh) * 4 + kw];
                                    }
                                }
                            }
                        }
                        y.plane_mut(n, o)[oy * (wd / 2) + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let x = random_tensor(2, 3, 8, 6, 1);
        let w = random_vec(5 * 3 * 16, 2);
        let b = random_vec(5, 3);
        let y = conv2d(&x, &w, &b, 5).unwrap();
        let o = conv_oracle(&x, &w, &b, 5);
        assert_eq!(y.shape(), (2, 5, 4, 3));
        assert!(y.data().iter().zip(o.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn conv_zero_kernel() {
        let x = random_tensor(1, 2, 4, 4, 1);
        let y = conv2d(&x, &[0.0; 3 * 2 * 16], &[0.0; 3], 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_kernel_samples_strided_input() {
        let x = random_tensor(1, 1, 4, 4, 5);
        let mut w = [0.0; 16];
        w[4 + 1] = 1.0; // (kh, kw) = (1, 1): offset 0 in the padded window
        let y = conv2d(&x, &w, &[0.0], 1).unwrap();
        let p = x.plane(0, 0);
        assert_eq!(y.data(), &[p[0], p[2], p[8], p[10]]);
    }

    #[test]
    fn conv_output_shape() {
        let x = Tensor::<f32>::zeros(1, 1, 128, 128);
        let y = conv2d(&x, &vec![0.0; 64 * 16], &[0.0; 64], 64).unwrap();
        assert_eq!(y.shape(), (1, 64, 64, 64));
        let odd = Tensor::<f32>::zeros(1, 1, 5, 5);
        assert!(conv2d(&odd, &[0.0; 16], &[0.0], 1).is_err());
        assert!(conv2d(&x, &[0.0; 15], &[0.0], 1).is_err());
    }

    #[test]
    fn tconv_shapes_and_zero_kernel() {
        let x = random_tensor(1, 512, 1, 1, 2);
        let y = tconv2d(&x, &vec![0.0; 512 * 512 * 16], &vec![0.0; 512], 512).unwrap();
        assert_eq!(y.shape(), (1, 512, 2, 2));
        assert!(y.data().iter().all(|&v| v == 0.0));
        let r = tconv2d_raw(&random_tensor(1, 2, 3, 3, 1), &random_vec(2 * 16, 1), &[0.0], 1).unwrap();
        assert_eq!(r.shape(), (1, 1, 8, 8));
    }

    #[test]
    fn conv_and_tconv_are_adjoint() {
        let (in_ch, out_ch) = (3, 4);
        let x = random_tensor(2, in_ch, 8, 8, 10);
        let y = random_tensor(2, out_ch, 4, 4, 11);
        // A conv kernel [out][in][4][4] read as a transposed-conv kernel
        // [in'][out'][4][4] with in' = out and out' = in is its adjoint.
        let k = random_vec(out_ch * in_ch * 16, 12);
        let kt = k.clone();
        let lhs = conv2d(&x, &k, &[0.0; 4], out_ch).unwrap().dot(&y);
        let rhs = x.dot(&tconv2d(&y, &kt, &[0.0; 3], in_ch).unwrap());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");

        // Raw output pairs with the zero-padded input.
        let raw = tconv2d_raw(&y, &kt, &[0.0; 3], in_ch).unwrap();
        assert_eq!(raw.shape(), (2, 3, 10, 10));
        let mut padded = Tensor::zeros(2, in_ch, 10, 10);
        for b in 0..2 {
            for c in 0..in_ch {
                for r in 0..8 {
                    padded.plane_mut(b, c)[(r + 1) * 10 + 1..][..8].copy_from_slice(&x.plane(b, c)[r * 8..][..8]);
                }
            }
        }
        let rhs_raw = padded.dot(&raw);
        assert!((lhs - rhs_raw).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn batchnorm_train_statistics() {
        let x = random_tensor(4, 3, 5, 5, 3).map(|v| 3.0 * v + 2.0);
        let (y, _, stats) = batchnorm_train(&x, &[1.0; 3], &[0.0; 3], 1e-5);
        for c in 0..3 {
            let ch = y.channel(c);
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((std - 1.0).abs() < 1e-3);
        }
        let z = batchnorm_infer(&x, &[1.0; 3], &[0.0; 3], &stats.mean, &stats.var, 1e-5);
        assert!(z.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn batchnorm_constant_channel_gives_shift() {
        let x = Tensor::from_channel_major(2, 1, 2, 2, vec![7.0; 8]).unwrap();
        let (y, _, _) = batchnorm_train(&x, &[2.0], &[0.25], 1e-5);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn activations() {
        let x = Tensor::from_channel_major(1, 1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.2, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_modes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_channel_major(1, 1, 1000, 1000, vec![1.0; 1_000_000]).unwrap();
        let (y, m) = dropout(&x, 0.5, Mode::Infer, &mut rng);
        assert_eq!(y, x);
        assert!(m.is_none());
        let (y, _) = dropout(&x, 0.0, Mode::Train, &mut rng);
        assert_eq!(y, x);
        let (y, _) = dropout(&x, 0.5, Mode::Train, &mut rng);
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.5).abs() < 0.005);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    /// Central-difference check of a scalar function of one parameter vector.
    fn check_grad(params: &mut [f64], analytic: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) {
        let h = 1e-5;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let fp = f(params);
            params[i] = orig - h;
            let fm = f(params);
            params[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let denom = num.abs().max(analytic[i].abs()).max(1e-8);
            assert!((num - analytic[i]).abs() / denom < 1e-6, "i={i}: {num} vs {}", analytic[i]);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let x = random_tensor(2, 2, 4, 4, 20);
        let proj_c = random_tensor(2, 3, 2, 2, 21);
        let w = random_vec(3 * 2 * 16, 22);
        let b = random_vec(3, 23);

        // conv2d w.r.t. weights and input
        let y = conv2d(&x, &w, &b, 3).unwrap();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = conv2d_backward(&x, &w, &proj_c, &mut dw, &mut db);
        let _ = y;
        let mut wp = w.clone();
        check_grad(&mut wp, &dw, &mut |p| conv2d(&x, p, &b, 3).unwrap().dot(&proj_c));
        let mut bp = b.clone();
        check_grad(&mut bp, &db, &mut |p| conv2d(&x, &w, p, 3).unwrap().dot(&proj_c));
        let mut xp = x.data().to_vec();
        check_grad(&mut xp, dx.data(), &mut |p| {
            let xt = Tensor::from_channel_major(2, 2, 4, 4, p.to_vec()).unwrap();
            conv2d(&xt, &w, &b, 3).unwrap().dot(&proj_c)
        });

        // tconv2d
        let xs = random_tensor(2, 3, 2, 2, 24);
        let proj_t = random_tensor(2, 2, 4, 4, 25);
        let wt = random_vec(3 * 2 * 16, 26);
        let bt = random_vec(2, 27);
        let mut dwt = vec![0.0; wt.len()];
        let mut dbt = vec![0.0; 2];
        let dxs = tconv2d_backward(&xs, &wt, &proj_t, &mut dwt, &mut dbt);
        let mut wtp = wt.clone();
        check_grad(&mut wtp, &dwt, &mut |p| tconv2d(&xs, p, &bt, 2).unwrap().dot(&proj_t));
        let mut btp = bt.clone();
        check_grad(&mut btp, &dbt, &mut |p| tconv2d(&xs, &wt, p, 2).unwrap().dot(&proj_t));
        let mut xsp = xs.data().to_vec();
        check_grad(&mut xsp, dxs.data(), &mut |p| {
            let xt = Tensor::from_channel_major(2, 3, 2, 2, p.to_vec()).unwrap();
            tconv2d(&xt, &wt, &bt, 2).unwrap().dot(&proj_t)
        });

        // batch norm w.r.t. input, scale and shift
        let gamma = random_vec(2, 28);
        let beta = random_vec(2, 29);
        let proj_b = random_tensor(2, 2, 4, 4, 30);
        let (_, cache, _) = batchnorm_train(&x, &gamma, &beta, 1e-5);
        let mut dg = vec![0.0; 2];
        let mut dbe = vec![0.0; 2];
        let dxb = batchnorm_backward(&proj_b, &cache, &gamma, &mut dg, &mut dbe);
        let mut xp = x.data().to_vec();
        check_grad(&mut xp, dxb.data(), &mut |p| {
            let xt = Tensor::from_channel_major(2, 2, 4, 4, p.to_vec()).unwrap();
            batchnorm_train(&xt, &gamma, &beta, 1e-5).0.dot(&proj_b)
        });
        let mut gp = gamma.clone();
        check_grad(&mut gp, &dg, &mut |p| batchnorm_train(&x, p, &beta, 1e-5).0.dot(&proj_b));
        let mut bp = beta.clone();
        check_grad(&mut bp, &dbe, &mut |p| batchnorm_train(&x, &gamma, p, 1e-5).0.dot(&proj_b));

        // activations and dropout (away from the kink at zero)
        let xa = x.map(|v| if v.abs() < 0.05 { 0.3 } else { v });
        let ly = leaky_relu(&xa, 0.2);
        let dl = leaky_relu_backward(&proj_b, &ly, 0.2);
        let mut xp = xa.data().to_vec();
        check_grad(&mut xp, dl.data(), &mut |p| {
            leaky_relu(&Tensor::from_channel_major(2, 2, 4, 4, p.to_vec()).unwrap(), 0.2).dot(&proj_b)
        });
        let dr = relu_backward(&proj_b, &xa);
        let mut xp = xa.data().to_vec();
        check_grad(&mut xp, dr.data(), &mut |p| {
            relu(&Tensor::from_channel_major(2, 2, 4, 4, p.to_vec()).unwrap()).dot(&proj_b)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, mask) = dropout(&xa, 0.5, Mode::Train, &mut rng);
        let dd = dropout_backward(&proj_b, mask.as_deref());
        let mut xp = xa.data().to_vec();
        check_grad(&mut xp, dd.data(), &mut |p| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            dropout(&Tensor::from_channel_major(2, 2, 4, 4, p.to_vec()).unwrap(), 0.5, Mode::Train, &mut rng)
                .0
                .dot(&proj_b)
        });
    }
}
