//! Minimal numeric primitives: matmul, softmax, convolutions, pooling.
//!
//! All ops accumulate in f32 with sequential per-dot summation so results
//! are bit-reproducible across runs and thread counts. Reference oracles in
//! the tests accumulate in f64 and compare within 1e-5..1e-6.

use crate::counters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c[i,j] = Σ_t a[i,t] * b[t,j]` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim("matmul expects rank-2 operands"));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim(format!("matmul: inner extents {k} vs {k2}")));
    }
    let mut c = Tensor::zeros(vec![m, n]);
    // i-t-j order: the accumulation over t for each (i,j) is still strictly
    // sequential, identical to a t-innermost loop, but streams b row-wise.
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = b.row(t);
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_it * bv;
            }
        }
    }
    counters::record(
        "matmul",
        2 * (m as u64) * (k as u64) * (n as u64),
        4 * (m * k + k * n + m * n) as u64,
    );
    Ok(c)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim("softmax_rows expects rank 2"));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("softmax_rows: non-finite input".into()));
    }
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let dst = out.row_mut(i);
        let mut sum = 0.0f32;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    counters::record("softmax", 5 * (m * n) as u64, 8 * (m * n) as u64);
    Ok(out)
}

/// Direct cross-correlation with zero padding.
///
/// `x: c_in×H×W`, `w: c_out×c_in×k×k`, odd `k`; output `c_out×H'×W'` with
/// `H' = (H + 2*pad - k)/stride + 1`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(Error::dim("conv2d expects x rank 3, w rank 4"));
    }
    let (c_in, h, wid) = (x.extent(0), x.extent(1), x.extent(2));
    let (c_out, wc_in, kh, kw) = (w.extent(0), w.extent(1), w.extent(2), w.extent(3));
    if wc_in != c_in {
        return Err(Error::dim(format!("conv2d: channels {c_in} vs {wc_in}")));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::dim(format!("conv2d: kernel {kh}x{kw} must be square and odd")));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d: stride 0"));
    }
    let k = kh;
    if h + 2 * pad < k || wid + 2 * pad < k {
        return Err(Error::dim("conv2d: output extent < 1"));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wid + 2 * pad - k) / stride + 1;
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::dim(format!("conv2d: bias len {} vs {c_out}", b.numel())));
        }
    }

    let mut out = Tensor::zeros(vec![c_out, oh, ow]);
    for co in 0..c_out {
        let b0 = bias.map_or(0.0, |b| b.data()[co]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b0;
                for ci in 0..c_in {
                    let plane = x.channel(ci);
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            acc += plane[iy as usize * wid + ix as usize]
                                * w.data()[((co * c_in + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out.set3(co, oy, ox, acc);
            }
        }
    }
    counters::record(
        "conv2d",
        2 * (c_out * oh * ow * c_in * k * k) as u64,
        4 * (x.numel() + w.numel() + out.numel()) as u64,
    );
    Ok(out)
}

/// Transposed convolution with a 2×2 kernel and stride 2: exact ×2 upsampling.
///
/// `x: c_in×H×W`, `w: c_in×c_out×2×2`; output `c_out×2H×2W`. Equal to the
/// gradient-of-conv formulation (zero-stuff the input, then convolve with the
/// spatially flipped kernel).
pub fn deconv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(Error::dim("deconv2d expects x rank 3, w rank 4"));
    }
    let (c_in, h, wid) = (x.extent(0), x.extent(1), x.extent(2));
    let (wc_in, c_out, kh, kw) = (w.extent(0), w.extent(1), w.extent(2), w.extent(3));
    if wc_in != c_in {
        return Err(Error::dim(format!("deconv2d: channels {c_in} vs {wc_in}")));
    }
    if kh != 2 || kw != 2 {
        return Err(Error::dim("deconv2d: kernel must be 2x2"));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::dim(format!("deconv2d: bias len {} vs {c_out}", b.numel())));
        }
    }
    let (oh, ow) = (2 * h, 2 * wid);
    let mut out = Tensor::zeros(vec![c_out, oh, ow]);
    // Stride 2 with a 2x2 kernel tiles the output: each output pixel receives
    // exactly one input contribution per channel.
    for co in 0..c_out {
        let b0 = bias.map_or(0.0, |b| b.data()[co]);
        for oy in 0..oh {
            let (iy, ky) = (oy / 2, oy % 2);
            for ox in 0..ow {
                let (ix, kx) = (ox / 2, ox % 2);
                let mut acc = b0;
                for ci in 0..c_in {
                    acc += x.at3(ci, iy, ix) * w.data()[((ci * c_out + co) * 2 + ky) * 2 + kx];
                }
                out.set3(co, oy, ox, acc);
            }
        }
    }
    counters::record(
        "deconv2d",
        2 * (c_out * oh * ow * c_in) as u64,
        4 * (x.numel() + w.numel() + out.numel()) as u64,
    );
    Ok(out)
}

/// Max pooling of a `1×H×W` plane to a fixed `1×out_h×out_w` grid.
pub fn maxpool_to(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() != 3 || x.extent(0) != 1 {
        return Err(Error::dim("maxpool_to expects 1×H×W"));
    }
    let (h, w) = (x.extent(1), x.extent(2));
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(Error::dim(format!(
            "maxpool_to: {h}x{w} not divisible into {out_h}x{out_w}"
        )));
    }
    let (wy, wx) = (h / out_h, w / out_w);
    let plane = x.channel(0);
    let mut out = Tensor::zeros(vec![1, out_h, out_w]);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut m = f32::NEG_INFINITY;
            for dy in 0..wy {
                let row = &plane[(oy * wy + dy) * w + ox * wx..];
                for dx in 0..wx {
                    m = m.max(row[dx]);
                }
            }
            out.set3(0, oy, ox, m);
        }
    }
    counters::record("maxpool", (h * w) as u64, 4 * (h * w) as u64);
    Ok(out)
}

/// 7×7 average convolution with uniform 1/49 weights and zero padding 3.
///
/// Border cells divide by the full 49 regardless of how much padding falls
/// inside the window.
pub fn uniform_avg_conv(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.rank() != 3 || x.extent(0) != 1 {
        return Err(Error::dim("uniform_avg_conv expects 1×H×W"));
    }
    if k % 2 == 0 {
        return Err(Error::dim("uniform_avg_conv: k must be odd"));
    }
    let inv = 1.0f32 / (k * k) as f32;
    let w = Tensor::filled(vec![1, 1, k, k], inv);
    conv2d(x, &w, None, 1, k / 2)
}

/// Tanh-form GELU, the activation used throughout the decoder.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = gelu(*v);
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-stuff a `c×H×W` tensor by `factor` along both spatial axes:
/// element (y,x) moves to (factor*y, factor*x), gaps are zero. Output is
/// `c×(factor*H)×(factor*W)`; the trailing zeros keep extents even so the
/// companion conv form of deconv2d lines up without cropping.
pub fn zero_stuff(x: &Tensor, factor: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim("zero_stuff expects rank 3"));
    }
    let (c, h, w) = (x.extent(0), x.extent(1), x.extent(2));
    let (oh, ow) = (factor * h, factor * w);
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.set3(ci, factor * y, factor * xx, x.at3(ci, y, xx));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Naive triple-loop matmul with f64 accumulation.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut c = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += a.at2(i, t) as f64 * b.at2(t, j) as f64;
                }
                c.row_mut(i)[j] = acc as f32;
            }
        }
        c
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn matmul_identity_bitwise() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![3, 3]);
        let i3 = Tensor::eye(3);
        assert_eq!(matmul(&i3, &x).unwrap(), x);
        assert_eq!(matmul(&x, &i3).unwrap(), x);
    }

    #[test]
    fn matmul_hand_checked() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, vec![17, 5]);
        let b = rand_tensor(&mut rng, vec![5, 9]);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(max_abs_diff(&got, &want) <= 1e-6);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-7);
        }
        let x = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() <= 1e-6);
        assert!(y.data()[1].abs() <= 1e-6);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![8, 8]);
        let got = softmax_rows(&x).unwrap();
        for i in 0..8 {
            let row = x.row(i);
            let sum: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            for j in 0..8 {
                let want = (row[j] as f64).exp() / sum;
                assert!((got.at2(i, j) as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(softmax_rows(&x).is_err());
    }

    /// Naive 6-loop conv oracle with f64 accumulation.
    fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let (c_in, h, wid) = (x.extent(0), x.extent(1), x.extent(2));
        let (c_out, k) = (w.extent(0), w.extent(2));
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wid + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(vec![c_out, oh, ow]);
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co] as f64);
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wid as isize {
                                    continue;
                                }
                                acc += x.at3(ci, iy as usize, ix as usize) as f64
                                    * w.data()[((co * c_in + ci) * k + ky) * k + kx] as f64;
                            }
                        }
                    }
                    out.set3(co, oy, ox, acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_zero_kernel() {
        let x = Tensor::filled(vec![1, 5, 5], 3.0);
        let w = Tensor::zeros(vec![1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_ones_stride2() {
        let x = Tensor::filled(vec![1, 4, 4], 1.0);
        let w = Tensor::filled(vec![1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_matches_oracle() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![3, 9, 7]);
        let w = rand_tensor(&mut rng, vec![4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, vec![4]);
        for &(s, p) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let got = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let want = conv_oracle(&x, &w, Some(&b), s, p);
            assert!(max_abs_diff(&got, &want) <= 1e-5);
        }
    }

    #[test]
    fn conv2d_linearity() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, vec![2, 6, 6]);
            let y = rand_tensor(&mut rng, vec![2, 6, 6]);
            let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
            let (a, b) = (rng.gen_range(-2.0..2.0f32), rng.gen_range(-2.0..2.0f32));
            let mix = Tensor::from_fn(vec![2, 6, 6], |i| a * x.data()[i] + b * y.data()[i]);
            let lhs = conv2d(&mix, &w, None, 1, 1).unwrap();
            let cx = conv2d(&x, &w, None, 1, 1).unwrap();
            let cy = conv2d(&y, &w, None, 1, 1).unwrap();
            let rhs = Tensor::from_fn(vec![3, 6, 6], |i| a * cx.data()[i] + b * cy.data()[i]);
            assert!(max_abs_diff(&lhs, &rhs) <= 1e-4);
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let x = Tensor::zeros(vec![1, 2, 2]);
        let w_even = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(conv2d(&x, &w_even, None, 1, 0).is_err());
        let w5 = Tensor::zeros(vec![1, 1, 5, 5]);
        assert!(conv2d(&x, &w5, None, 1, 0).is_err()); // output extent < 1
    }

    #[test]
    fn deconv2d_single_cell() {
        let x = Tensor::filled(vec![1, 1, 1], 7.0);
        let w = Tensor::filled(vec![1, 1, 2, 2], 1.0);
        let y = deconv2d(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn deconv2d_zeros() {
        let x = Tensor::zeros(vec![2, 3, 3]);
        let w = Tensor::filled(vec![2, 3, 2, 2], 0.5);
        let y = deconv2d(&x, &w, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    /// deconv2d(x) == conv2d(zero_stuffed(x), flipped w, pad k-1), 100 seeds.
    #[test]
    fn deconv2d_matches_zero_stuff_oracle() {
        for seed in 0..100u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let (c_in, c_out) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let x = rand_tensor(&mut rng, vec![c_in, h, w]);
            let wt = rand_tensor(&mut rng, vec![c_in, c_out, 2, 2]);
            let got = deconv2d(&x, &wt, None).unwrap();

            // Flip kernel spatially and swap channel axes for the conv form.
            let mut wf = Tensor::zeros(vec![c_out, c_in, 3, 3]);
            // Embed the flipped 2x2 kernel into a 3x3 odd kernel (top-left),
            // compensating with pad 1 so the geometry matches pad k-1 = 1.
            for ci in 0..c_in {
                for co in 0..c_out {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let v = wt.data()[((ci * c_out + co) * 2 + ky) * 2 + kx];
                            wf.data_mut()[((co * c_in + ci) * 3 + (1 - ky)) * 3 + (1 - kx)] = v;
                        }
                    }
                }
            }
            let stuffed = zero_stuff(&x, 2).unwrap();
            let conv = conv2d(&stuffed, &wf, None, 1, 1).unwrap();
            assert_eq!(conv.shape()[1], 2 * h);
            assert_eq!(conv.shape()[2], 2 * w);
            assert!(max_abs_diff(&got, &conv) <= 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::zeros(vec![1, 64, 64]);
        let y = maxpool_to(&x, 4, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut x = Tensor::zeros(vec![1, 32, 32]);
        x.set3(0, 0, 0, 1.0);
        let y = maxpool_to(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut rng = StdRng::seed_from_u64(6);
        let x = Tensor::from_fn(vec![1, 64, 64], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let y = maxpool_to(&x, 8, 8).unwrap();
        for oy in 0..8 {
            for ox in 0..8 {
                let mut m = 0.0f32;
                for dy in 0..8 {
                    for dx in 0..8 {
                        m = m.max(x.at3(0, oy * 8 + dy, ox * 8 + dx));
                    }
                }
                assert_eq!(y.at3(0, oy, ox), m);
            }
        }
    }

    #[test]
    fn maxpool_rejects_non_divisible() {
        let x = Tensor::zeros(vec![1, 10, 10]);
        assert!(maxpool_to(&x, 3, 3).is_err());
    }

    #[test]
    fn avg_conv_constant_interior() {
        let x = Tensor::filled(vec![1, 16, 16], 2.5);
        let y = uniform_avg_conv(&x, 7).unwrap();
        // Interior cells (≥3 from every border) see a full window of 2.5.
        for i in 3..13 {
            for j in 3..13 {
                assert!((y.at3(0, i, j) - 2.5).abs() <= 1e-6);
            }
        }
        let z = uniform_avg_conv(&Tensor::zeros(vec![1, 8, 8]), 7).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avg_conv_matches_window_sum_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = Tensor::from_fn(vec![1, 20, 20], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let y = uniform_avg_conv(&x, 7).unwrap();
        for i in 0..20i32 {
            for j in 0..20i32 {
                let mut s = 0.0f64;
                for dy in -3..=3 {
                    for dx in -3..=3 {
                        let (yy, xx) = (i + dy, j + dx);
                        if yy >= 0 && xx >= 0 && yy < 20 && xx < 20 {
                            s += x.at3(0, yy as usize, xx as usize) as f64;
                        }
                    }
                }
                assert!((y.at3(0, i as usize, j as usize) as f64 - s / 49.0).abs() <= 1e-6);
            }
        }
    }
}
