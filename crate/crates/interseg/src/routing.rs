//! Edge-map computation and edge/non-edge token partitioning.
//!
//! A pixel is an edge pixel when its 7×7 zero-padded window has nonzero
//! variance. For a binary mask that is an exact integer condition: the
//! window sum `s` (padding contributes zeros) satisfies `0 < s < 49`.
//! Deciding it in integer arithmetic avoids the numerically fragile
//! `mean(M²) − mean(M)² > 0` comparison in f32; the float formulation is
//! kept as a test oracle.

use crate::error::{Error, Result};
use crate::kernels::maxpool_to;
use crate::tensor::Tensor;

pub const EDGE_WINDOW: usize = 7;

/// Binary routing flags over the token grid plus the derived index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    h: usize,
    w: usize,
    flags: Vec<bool>,
    edge_idx: Vec<usize>,
    nonedge_idx: Vec<usize>,
}

impl EdgeMap {
    pub fn from_flags(h: usize, w: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != h * w {
            return Err(Error::dim(format!(
                "flag count {} vs grid {}x{}",
                flags.len(),
                h,
                w
            )));
        }
        let mut edge_idx = Vec::new();
        let mut nonedge_idx = Vec::new();
        for (i, &f) in flags.iter().enumerate() {
            if f {
                edge_idx.push(i);
            } else {
                nonedge_idx.push(i);
            }
        }
        Ok(EdgeMap {
            h,
            w,
            flags,
            edge_idx,
            nonedge_idx,
        })
    }

    /// Every token routed to full attention (first-step fallback).
    pub fn all_edge(h: usize, w: usize) -> Self {
        EdgeMap::from_flags(h, w, vec![true; h * w]).expect("consistent")
    }

    pub fn all_nonedge(h: usize, w: usize) -> Self {
        EdgeMap::from_flags(h, w, vec![false; h * w]).expect("consistent")
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn is_edge(&self, idx: usize) -> bool {
        self.flags[idx]
    }

    pub fn edge_idx(&self) -> &[usize] {
        &self.edge_idx
    }

    pub fn nonedge_idx(&self) -> &[usize] {
        &self.nonedge_idx
    }

    pub fn edge_count(&self) -> usize {
        self.edge_idx.len()
    }
}

/// Per-pixel edge flags of a binary mask: 7×7 zero-padded window contains
/// both a 0 and a 1. Exact integer formulation via an integral image.
pub fn edge_pixel_flags(mask: &Tensor) -> Result<Vec<bool>> {
    if mask.rank() != 2 {
        return Err(Error::dim("edge_pixel_flags expects H×W"));
    }
    if !mask.is_binary() {
        return Err(Error::input("edge map requires a binary mask"));
    }
    let (h, w) = (mask.extent(0), mask.extent(1));
    // integral[y][x] = number of ones in mask[0..y, 0..x]
    let mut integral = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row_sum = 0u32;
        for x in 0..w {
            row_sum += mask.data()[y * w + x] as u32;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row_sum;
        }
    }
    let window_sum = |y0: i64, x0: i64, y1: i64, x1: i64| -> u32 {
        // clamp the inclusive window [y0,y1]x[x0,x1] to the image
        let y0 = y0.max(0) as usize;
        let x0 = x0.max(0) as usize;
        let y1 = (y1.min(h as i64 - 1)) as usize;
        let x1 = (x1.min(w as i64 - 1)) as usize;
        integral[(y1 + 1) * (w + 1) + x1 + 1] + integral[y0 * (w + 1) + x0]
            - integral[y0 * (w + 1) + x1 + 1]
            - integral[(y1 + 1) * (w + 1) + x0]
    };
    let r = (EDGE_WINDOW / 2) as i64;
    let full = (EDGE_WINDOW * EDGE_WINDOW) as u32;
    let mut flags = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let s = window_sum(y - r, x - r, y + r, x + r);
            flags[y as usize * w + x as usize] = s > 0 && s < full;
        }
    }
    Ok(flags)
}

/// Edge map over the `h×w` token grid from the previous prediction mask.
///
/// Pixel flags are max-pooled to the token grid. An all-zero mask yields an
/// empty edge set; the pipeline substitutes an all-edge map on the first
/// interaction step when no previous mask exists.
pub fn compute_edge_map(prev_mask: &Tensor, h: usize, w: usize) -> Result<EdgeMap> {
    let (mh, mw) = (prev_mask.extent(0), prev_mask.extent(1));
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::dim(format!(
            "mask {mh}x{mw} not divisible into {h}x{w} tokens"
        )));
    }
    let flags = edge_pixel_flags(prev_mask)?;
    let flag_plane = Tensor::new(
        vec![1, mh, mw],
        flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(),
    )?;
    let pooled = maxpool_to(&flag_plane, h, w)?;
    EdgeMap::from_flags(h, w, pooled.data().iter().map(|&v| v > 0.0).collect())
}

/// Gather token rows into (edge, nonedge) blocks, ascending index order.
pub fn partition(x: &Tensor, em: &EdgeMap) -> Result<(Tensor, Tensor)> {
    if x.rank() != 2 || x.rows() != em.len() {
        return Err(Error::dim(format!(
            "partition: {:?} rows vs {} tokens",
            x.shape(),
            em.len()
        )));
    }
    let d = x.cols();
    let gather = |idx: &[usize]| {
        let mut out = Tensor::zeros(vec![idx.len(), d]);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        out
    };
    Ok((gather(&em.edge_idx), gather(&em.nonedge_idx)))
}

/// Exact inverse of [`partition`].
pub fn scatter(y_edge: &Tensor, y_nonedge: &Tensor, em: &EdgeMap) -> Result<Tensor> {
    if y_edge.rows() + y_nonedge.rows() != em.len() {
        return Err(Error::dim(format!(
            "scatter: {}+{} rows vs {} tokens",
            y_edge.rows(),
            y_nonedge.rows(),
            em.len()
        )));
    }
    if y_edge.rows() != em.edge_idx.len() {
        return Err(Error::dim("scatter: edge cardinality mismatch"));
    }
    let d = if y_edge.rows() > 0 { y_edge.cols() } else { y_nonedge.cols() };
    let mut out = Tensor::zeros(vec![em.len(), d]);
    for (r, &i) in em.edge_idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(y_edge.row(r));
    }
    for (r, &i) in em.nonedge_idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(y_nonedge.row(r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::uniform_avg_conv;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Float oracle for the edge test: variance of the 7×7 mean filter,
    /// thresholded above the f32 noise floor. The minimum true variance of a
    /// mixed window is (1/49)(48/49) ≈ 0.02, four orders above the rounding
    /// noise of summing 49 f32 terms, so 1e-4 separates them cleanly.
    fn float_edge_flags(mask: &Tensor) -> Vec<bool> {
        let (h, w) = (mask.extent(0), mask.extent(1));
        let plane = Tensor::new(vec![1, h, w], mask.data().to_vec()).unwrap();
        let sq = Tensor::new(
            vec![1, h, w],
            mask.data().iter().map(|v| v * v).collect(),
        )
        .unwrap();
        let mean = uniform_avg_conv(&plane, EDGE_WINDOW).unwrap();
        let mean_sq = uniform_avg_conv(&sq, EDGE_WINDOW).unwrap();
        mean_sq
            .data()
            .iter()
            .zip(mean.data())
            .map(|(&m2, &m)| m2 - m * m > 1e-4)
            .collect()
    }

    #[test]
    fn all_zero_mask_has_no_edges() {
        let mask = Tensor::zeros(vec![64, 64]);
        let em = compute_edge_map(&mask, 4, 4).unwrap();
        assert_eq!(em.edge_count(), 0);
        assert_eq!(em.nonedge_idx().len(), 16);
    }

    #[test]
    fn all_one_mask_flags_border_only() {
        let mask = Tensor::filled(vec![64, 64], 1.0);
        let flags = edge_pixel_flags(&mask).unwrap();
        // zero padding injects 0s into windows within 3 of the border
        for y in 0..64 {
            for x in 0..64 {
                let border = y < 3 || x < 3 || y >= 61 || x >= 61;
                assert_eq!(flags[y * 64 + x], border, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn centered_square_yields_ring() {
        let mut mask = Tensor::zeros(vec![256, 256]);
        for y in 112..144 {
            for x in 112..144 {
                mask.data_mut()[y * 256 + x] = 1.0;
            }
        }
        let em = compute_edge_map(&mask, 16, 16).unwrap();
        // The square spans tokens 7..9; edge tokens ring its boundary.
        for &i in em.edge_idx() {
            let (ty, tx) = (i / 16, i % 16);
            assert!((5..=10).contains(&ty) && (5..=10).contains(&tx), "token ({ty},{tx})");
        }
        // Ring is nonempty and leaves the far background untouched.
        assert!(em.edge_count() >= 8);
        assert!(!em.is_edge(0));
        assert!(em.edge_count() < 16 * 16);
    }

    #[test]
    fn integer_test_matches_float_oracle() {
        // Exhaustive 4x4 masks.
        for bits in 0..(1u32 << 16) {
            let mask = Tensor::from_fn(vec![4, 4], |i| ((bits >> i) & 1) as f32);
            let got = edge_pixel_flags(&mask).unwrap();
            let want = float_edge_flags(&mask);
            assert_eq!(got, want, "mask bits {bits:#06x}");
        }
        // Random 64x64 masks (the acceptance suite runs 1000; keep unit fast).
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..50 {
            let mask = Tensor::from_fn(vec![64, 64], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            assert_eq!(edge_pixel_flags(&mask).unwrap(), float_edge_flags(&mask));
        }
    }

    #[test]
    fn non_binary_mask_rejected() {
        let mask = Tensor::filled(vec![16, 16], 0.5);
        assert!(compute_edge_map(&mask, 1, 1).is_err());
    }

    #[test]
    fn edge_tokens_scale_with_perimeter() {
        let mut counts = Vec::new();
        for &side in &[48usize, 80, 112, 144, 176, 208] {
            let mut mask = Tensor::zeros(vec![256, 256]);
            let lo = (256 - side) / 2;
            for y in lo..lo + side {
                for x in lo..lo + side {
                    mask.data_mut()[y * 256 + x] = 1.0;
                }
            }
            let em = compute_edge_map(&mask, 16, 16).unwrap();
            counts.push((side, em.edge_count()));
        }
        // Monotone in the side length, and count/side stays within a small
        // constant band (perimeter growth, not area growth).
        for w in counts.windows(2) {
            assert!(w[1].1 >= w[0].1, "{counts:?}");
        }
        let ratios: Vec<f64> = counts.iter().map(|&(s, c)| c as f64 / s as f64).collect();
        let (lo, hi) = ratios
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &r| (l.min(r), h.max(r)));
        assert!(hi / lo <= 2.0, "ratios {ratios:?}");
    }

    #[test]
    fn partition_scatter_degenerate() {
        let x = Tensor::from_fn(vec![6, 3], |i| i as f32);
        let empty = EdgeMap::all_nonedge(2, 3);
        let (e, n) = partition(&x, &empty).unwrap();
        assert_eq!(e.rows(), 0);
        assert_eq!(n, x);
        assert_eq!(scatter(&e, &n, &empty).unwrap(), x);

        let full = EdgeMap::all_edge(2, 3);
        let (e, n) = partition(&x, &full).unwrap();
        assert_eq!(e, x);
        assert_eq!(n.rows(), 0);
        assert_eq!(scatter(&e, &n, &full).unwrap(), x);
    }

    #[test]
    fn partition_scatter_round_trip_bitwise() {
        let mut rng = StdRng::seed_from_u64(22);
        for _ in 0..50 {
            let flags: Vec<bool> = (0..24).map(|_| rng.gen_bool(0.4)).collect();
            let em = EdgeMap::from_flags(4, 6, flags).unwrap();
            let x = Tensor::from_fn(vec![24, 5], |_| rng.gen_range(-1.0..1.0f32));
            let (e, n) = partition(&x, &em).unwrap();
            assert_eq!(scatter(&e, &n, &em).unwrap(), x);
        }
    }

    #[test]
    fn cardinality_mismatch_rejected() {
        let em = EdgeMap::all_edge(2, 2);
        let e = Tensor::zeros(vec![3, 2]);
        let n = Tensor::zeros(vec![0, 2]);
        assert!(scatter(&e, &n, &em).is_err());
        let x = Tensor::zeros(vec![3, 2]);
        assert!(partition(&x, &em).is_err());
    }
}
