//! Raw computation kernels behind the graph ops.
//!
//! All reductions accumulate in row-major order; the only parallelism here
//! is over independent output slices, so identical inputs give bit-identical
//! outputs at any thread count.

use super::{idx3, Scalar, Tensor};

/// Output extent of a strided valid convolution over a padded axis.
#[inline]
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// im2col: gather input patches into a [C*k*k, out_h*out_w] matrix.
/// Out-of-range (padding) taps are zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let cols_w = out_h * out_w;
    let mut cols = vec![T::ZERO; channels * k * k * cols_w];
    cols.chunks_mut(k * k * cols_w)
        .enumerate()
        .for_each(|(c, chunk)| {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ki * k + kj) * cols_w;
                    for oh in 0..out_h {
                        let ih = oh * stride + ki;
                        if ih < pad || ih >= height + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        for ow in 0..out_w {
                            let iw = ow * stride + kj;
                            if iw < pad || iw >= width + pad {
                                continue;
                            }
                            chunk[row + oh * out_w + ow] = x[idx3(c, ih, iw - pad, height, width)];
                        }
                    }
                }
            }
        });
    cols
}

/// Scatter a [C*k*k, out_h*out_w] column matrix back onto the input grid,
/// accumulating overlaps. Inverse layout of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let cols_w = out_h * out_w;
    let mut x = vec![T::ZERO; channels * height * width];
    x.chunks_mut(height * width)
        .enumerate()
        .for_each(|(c, chunk)| {
            let base = c * k * k * cols_w;
            for ki in 0..k {
                for kj in 0..k {
                    let row = base + (ki * k + kj) * cols_w;
                    for oh in 0..out_h {
                        let ih = oh * stride + ki;
                        if ih < pad || ih >= height + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        for ow in 0..out_w {
                            let iw = ow * stride + kj;
                            if iw < pad || iw >= width + pad {
                                continue;
                            }
                            chunk[ih * width + (iw - pad)] += cols[row + oh * out_w + ow];
                        }
                    }
                }
            }
        });
    x
}

/// Strided 2D convolution: x[Ci,H,W] * w[Co,Ci,k,k] + b -> [Co,H',W'].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let out_h = conv_out_extent(h, k, stride, pad);
    let out_w = conv_out_extent(wd, k, stride, pad);
    let l = out_h * out_w;
    let cols = im2col(x.data(), ci, h, wd, k, stride, pad, out_h, out_w);
    let mut out = vec![T::ZERO; co * l];
    T::gemm(co, ci * k * k, l, T::ONE, w.data(), &cols, T::ZERO, &mut out);
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(l).enumerate() {
            let bv = b.data()[o];
            for v in chunk.iter_mut() {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![co, out_h, out_w], out).expect("conv output shape")
}

/// Backward of [`conv2d_forward`]: gradients for input, weights and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let out_h = conv_out_extent(h, k, stride, pad);
    let out_w = conv_out_extent(wd, k, stride, pad);
    let l = out_h * out_w;

    let grad_w = if need_w {
        let cols = im2col(x.data(), ci, h, wd, k, stride, pad, out_h, out_w);
        // grad_w = G(co,l) . cols^T(l,ckk), the transpose expressed via strides
        let ckk = ci * k * k;
        let mut gw = vec![T::ZERO; co * ckk];
        T::gemm_strided(
            co,
            l,
            ckk,
            T::ONE,
            grad_out,
            l as isize,
            1,
            &cols,
            1,
            l as isize,
            T::ZERO,
            &mut gw,
            ckk as isize,
            1,
        );
        Some(gw)
    } else {
        None
    };

    let grad_b = if need_b {
        let mut gb = vec![T::ZERO; co];
        for o in 0..co {
            let mut acc = T::ZERO;
            for p in 0..l {
                acc += grad_out[o * l + p];
            }
            gb[o] = acc;
        }
        Some(gb)
    } else {
        None
    };

    let grad_x = if need_x {
        // cols_grad = W^T(ckk,co) . G(co,l), the transpose expressed via strides
        let ckk = ci * k * k;
        let mut cols_grad = vec![T::ZERO; ckk * l];
        T::gemm_strided(
            ckk,
            co,
            l,
            T::ONE,
            w.data(),
            1,
            ckk as isize,
            grad_out,
            l as isize,
            1,
            T::ZERO,
            &mut cols_grad,
            l as isize,
            1,
        );
        Some(col2im(&cols_grad, ci, h, wd, k, stride, pad, out_h, out_w))
    } else {
        None
    };

    (grad_x, grad_w, grad_b)
}

/// Depthwise convolution: channel c of the output depends only on channel c
/// of the input. x[C,H,W] * f[C,1,k,k] -> [C,H',W'], valid padding.
pub fn depthwise_forward<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = f.shape()[2];
    let out_h = conv_out_extent(h, k, stride, 0);
    let out_w = conv_out_extent(w, k, stride, 0);
    let mut out = vec![T::ZERO; c * out_h * out_w];
    out.chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(ch, chunk)| {
            let filt = &f.data()[ch * k * k..(ch + 1) * k * k];
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = T::ZERO;
                    for ki in 0..k {
                        for kj in 0..k {
                            acc += filt[ki * k + kj]
                                * x.data()[idx3(ch, oh * stride + ki, ow * stride + kj, h, w)];
                        }
                    }
                    chunk[oh * out_w + ow] = acc;
                }
            }
        });
    Tensor::new(vec![c, out_h, out_w], out).expect("depthwise output shape")
}

pub fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    f: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    need_x: bool,
    need_f: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = f.shape()[2];
    let out_h = conv_out_extent(h, k, stride, 0);
    let out_w = conv_out_extent(w, k, stride, 0);

    let grad_f = if need_f {
        let mut gf = vec![T::ZERO; c * k * k];
        gf.chunks_mut(k * k).enumerate().for_each(|(ch, chunk)| {
            for ki in 0..k {
                for kj in 0..k {
                    let mut acc = T::ZERO;
                    for oh in 0..out_h {
                        for ow in 0..out_w {
                            acc += grad_out[idx3(ch, oh, ow, out_h, out_w)]
                                * x.data()[idx3(ch, oh * stride + ki, ow * stride + kj, h, w)];
                        }
                    }
                    chunk[ki * k + kj] = acc;
                }
            }
        });
        Some(gf)
    } else {
        None
    };

    let grad_x = if need_x {
        let mut gx = vec![T::ZERO; c * h * w];
        gx.chunks_mut(h * w).enumerate().for_each(|(ch, chunk)| {
            let filt = &f.data()[ch * k * k..(ch + 1) * k * k];
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let g = grad_out[idx3(ch, oh, ow, out_h, out_w)];
                    for ki in 0..k {
                        for kj in 0..k {
                            chunk[(oh * stride + ki) * w + ow * stride + kj] += g * filt[ki * k + kj];
                        }
                    }
                }
            }
        });
        Some(gx)
    } else {
        None
    };

    (grad_x, grad_f)
}

/// Mean across the channel axis: [C,H,W] -> [1,H,W].
pub fn channel_mean_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv = T::from_f64(1.0 / c as f64);
    let mut out = vec![T::ZERO; h * w];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for (o, v) in out.iter_mut().zip(plane.iter()) {
            *o += *v;
        }
    }
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Tensor::new(vec![1, h, w], out).expect("channel_mean shape")
}

/// Window bounds for adaptive average pooling: [floor(t*n/m), ceil((t+1)*n/m)).
#[inline]
pub fn pool_window(t: usize, n: usize, m: usize) -> (usize, usize) {
    let start = t * n / m;
    let end = ((t + 1) * n).div_ceil(m);
    (start, end)
}

/// Adaptive average pooling to an (out_h, out_w) grid.
pub fn adaptive_avg_pool_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![T::ZERO; c * out_h * out_w];
    for ch in 0..c {
        for oh in 0..out_h {
            let (h0, h1) = pool_window(oh, h, out_h);
            for ow in 0..out_w {
                let (w0, w1) = pool_window(ow, w, out_w);
                let mut acc = T::ZERO;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        acc += x.data()[idx3(ch, ih, iw, h, w)];
                    }
                }
                let count = T::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                out[idx3(ch, oh, ow, out_h, out_w)] = acc / count;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("pool shape")
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    x_shape: &[usize],
    grad_out: &[T],
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let mut gx = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        for oh in 0..out_h {
            let (h0, h1) = pool_window(oh, h, out_h);
            for ow in 0..out_w {
                let (w0, w1) = pool_window(ow, w, out_w);
                let inv = T::from_f64(1.0 / ((h1 - h0) * (w1 - w0)) as f64);
                let g = grad_out[idx3(ch, oh, ow, out_h, out_w)] * inv;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        gx[idx3(ch, ih, iw, h, w)] += g;
                    }
                }
            }
        }
    }
    gx
}

/// Tanh-form GELU and its derivative.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

pub fn gelu_prime<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

/// Per-channel spatial statistics (biased variance) of a [C,H,W] tensor.
pub fn spatial_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = T::from_f64((h * w) as f64);
    let mut means = vec![T::ZERO; c];
    let mut vars = vec![T::ZERO; c];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = T::ZERO;
        for &v in plane {
            acc += v;
        }
        let mean = acc / n;
        let mut var = T::ZERO;
        for &v in plane {
            let d = v - mean;
            var += d * d;
        }
        means[ch] = mean;
        vars[ch] = var / n;
    }
    (means, vars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(shape: [usize; 3], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Direct quadruple-nested-loop convolution, the reference for conv2d.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let out_h = conv_out_extent(h, k, stride, pad);
        let out_w = conv_out_extent(wd, k, stride, pad);
        let mut out = vec![0.0; co * out_h * out_w];
        for o in 0..co {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (oh * stride + ki) as isize - pad as isize;
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + c) * k + ki) * k + kj]
                                    * x.data()[idx3(c, ih as usize, iw as usize, h, wd)];
                            }
                        }
                    }
                    out[idx3(o, oh, ow, out_h, out_w)] = acc;
                }
            }
        }
        t3([co, out_h, out_w], out)
    }

    fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x = t3([1, 4, 4], vec![1.0; 16]);
        let w = t3([1, 1, 1], vec![1.0]).reshaped(vec![1, 1, 1, 1]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), 1, 0);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_zero_weights_give_zero_output() {
        let x = seeded(&[2, 5, 5], 1);
        let w = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(&[3]);
        let y = conv2d_forward(&x, &w, Some(&b), 1, 0);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        for seed in 0..4 {
            let x = seeded(&[2, 5, 5], seed);
            let w = seeded(&[3, 2, 3, 3], 100 + seed);
            let b = seeded(&[3], 200 + seed);
            for (stride, pad) in [(1, 0), (2, 0), (1, 1), (2, 1)] {
                let got = conv2d_forward(&x, &w, Some(&b), stride, pad);
                let want = conv_oracle(&x, &w, b.data(), stride, pad);
                assert_eq!(got.shape(), want.shape());
                for (g, e) in got.data().iter().zip(want.data()) {
                    let rel = (g - e).abs() / e.abs().max(1.0);
                    assert!(rel <= 1e-12, "stride={stride} pad={pad}: {g} vs {e}");
                }
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let x = seeded(&[2, 6, 6], 7);
        let y = seeded(&[2, 6, 6], 8);
        let w = seeded(&[3, 2, 3, 3], 9);
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::from_fn(&[2, 6, 6], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv2d_forward(&mixed, &w, None, 1, 0);
        let fx = conv2d_forward(&x, &w, None, 1, 0);
        let fy = conv2d_forward(&y, &w, None, 1, 0);
        for i in 0..lhs.numel() {
            let want = a * fx.data()[i] + b * fy.data()[i];
            assert!((lhs.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn depthwise_identity_filters_pass_through() {
        let x = seeded(&[3, 4, 4], 3);
        let f = t3([3, 1, 1], vec![1.0, 1.0, 1.0])
            .reshaped(vec![3, 1, 1, 1])
            .unwrap();
        let y = depthwise_forward(&x, &f, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let x = seeded(&[4, 6, 6], 11);
        let f = seeded(&[4, 1, 3, 3], 12);
        let y = depthwise_forward(&x, &f, 1);
        for c in 0..4 {
            let xc = Tensor::new(vec![1, 6, 6], x.data()[c * 36..(c + 1) * 36].to_vec()).unwrap();
            let fc = Tensor::new(vec![1, 1, 3, 3], f.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let want = conv_oracle(&xc, &fc, &[0.0], 1, 0);
            let got = &y.data()[c * 16..(c + 1) * 16];
            for (g, e) in got.iter().zip(want.data()) {
                assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn depthwise_is_channel_permutation_equivariant() {
        let x = seeded(&[4, 5, 5], 21);
        let f = seeded(&[4, 1, 2, 2], 22);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_fn(&[4, 5, 5], |i| {
            let (c, r) = (i / 25, i % 25);
            x.data()[perm[c] * 25 + r]
        });
        let fp = Tensor::from_fn(&[4, 1, 2, 2], |i| {
            let (c, r) = (i / 4, i % 4);
            f.data()[perm[c] * 4 + r]
        });
        let y = depthwise_forward(&x, &f, 1);
        let yp = depthwise_forward(&xp, &fp, 1);
        for c in 0..4 {
            assert_eq!(&yp.data()[c * 16..(c + 1) * 16], &y.data()[perm[c] * 16..(perm[c] + 1) * 16]);
        }
    }

    #[test]
    fn channel_mean_single_channel_is_identity() {
        let x = seeded(&[1, 3, 3], 31);
        let y = channel_mean_forward(&x);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn channel_mean_of_opposite_channels_is_zero() {
        let a = seeded(&[1, 3, 3], 32);
        let x = Tensor::from_fn(&[2, 3, 3], |i| {
            if i < 9 {
                a.data()[i]
            } else {
                -a.data()[i - 9]
            }
        });
        let y = channel_mean_forward(&x);
        assert!(y.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn channel_mean_matches_elementwise_mean() {
        let x = seeded(&[5, 3, 3], 33);
        let y = channel_mean_forward(&x);
        for p in 0..9 {
            let want: f64 = (0..5).map(|c| x.data()[c * 9 + p]).sum::<f64>() / 5.0;
            assert!((y.data()[p] - want).abs() <= 1e-14);
        }
    }

    #[test]
    fn pool_full_size_is_identity_and_constant_is_preserved() {
        let x = seeded(&[2, 4, 5], 41);
        let y = adaptive_avg_pool_forward(&x, 4, 5);
        assert_eq!(y.data(), x.data());
        let c = Tensor::<f64>::full(&[3, 7, 7], 2.5);
        let p = adaptive_avg_pool_forward(&c, 3, 2);
        assert!(p.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn pool_to_single_cell_is_channel_mean() {
        let x = seeded(&[2, 7, 7], 42);
        let y = adaptive_avg_pool_forward(&x, 1, 1);
        for c in 0..2 {
            let want: f64 = x.data()[c * 49..(c + 1) * 49].iter().sum::<f64>() / 49.0;
            assert!((y.data()[c] - want).abs() <= 1e-13);
        }
    }

    #[test]
    fn pool_windows_partition_axis() {
        for (n, m) in [(7, 3), (10, 4), (5, 5), (9, 2)] {
            let mut covered = vec![0usize; n];
            for t in 0..m {
                let (a, b) = pool_window(t, n, m);
                assert!(a < b && b <= n);
                for cell in covered.iter_mut().take(b).skip(a) {
                    *cell += 1;
                }
            }
            // windows may overlap by at most the floor/ceil rule but must cover
            assert!(covered.iter().all(|&c| c >= 1));
        }
    }
}
