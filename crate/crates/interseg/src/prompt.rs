//! Reference-mask state and dynamic prompt embedding.
//!
//! The reference mask fuses click evidence with the latest prediction into a
//! 5-valued per-pixel state: 0/4 definite background/foreground (click disks),
//! 1/3 possible background/foreground (predictions), 2 uncertain (pixels whose
//! prediction flipped between steps). Prompt embedding crops the mask to a
//! detected box, embeds and downsamples only that region, and fills the rest
//! of the token grid with a learned background vector.

use crate::error::{Error, Result};
use crate::kernels::{conv2d, gelu_inplace};
use crate::tensor::Tensor;
use std::path::Path;

pub const CLICK_RADIUS: i64 = 5;

/// A user click: pixel coordinates plus a positive/negative label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Click {
    pub y: usize,
    pub x: usize,
    pub positive: bool,
}

impl Click {
    pub fn new(y: usize, x: usize, positive: bool) -> Self {
        Click { y, x, positive }
    }
}

/// Per-pixel prompt state in {0..4}.
///
/// `click_marked` tracks pixels fixed by click disks; those pixels are never
/// overwritten by prediction-derived values.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMask {
    h: usize,
    w: usize,
    values: Vec<u8>,
    click_marked: Vec<bool>,
}

pub const VAL_DEFINITE_BG: u8 = 0;
pub const VAL_POSSIBLE_BG: u8 = 1;
pub const VAL_UNCERTAIN: u8 = 2;
pub const VAL_POSSIBLE_FG: u8 = 3;
pub const VAL_DEFINITE_FG: u8 = 4;

impl ReferenceMask {
    pub fn empty(h: usize, w: usize) -> Self {
        ReferenceMask {
            h,
            w,
            values: vec![0; h * w],
            click_marked: vec![false; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn value_at(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.w + x]
    }

    pub fn is_click_marked(&self, y: usize, x: usize) -> bool {
        self.click_marked[y * self.w + x]
    }

    /// True where the pixel carries prompt content: any click disk or any
    /// predicted/uncertain foreground state {2,3,4}.
    fn is_prompt(&self, idx: usize) -> bool {
        self.values[idx] >= VAL_UNCERTAIN || self.click_marked[idx]
    }

    /// Export the value plane as PGM P5, maxval 4.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        crate::io::write_pgm(path, &self.values, self.h, self.w, 4)
    }

    /// Import a value plane from PGM P5 (maxval 4). Positive click disks are
    /// recovered from the 4s; negative disks are indistinguishable from plain
    /// background in this representation and import as unmarked.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let (values, h, w, maxval) = crate::io::read_pgm(path)?;
        if maxval != 4 {
            return Err(Error::Format {
                offset: 0,
                message: format!("reference mask PGM must have maxval 4, got {maxval}"),
            });
        }
        if let Some(bad) = values.iter().find(|&&v| v > 4) {
            return Err(Error::input(format!("reference mask value {bad} out of range")));
        }
        let click_marked = values.iter().map(|&v| v == VAL_DEFINITE_FG).collect();
        Ok(ReferenceMask {
            h,
            w,
            values,
            click_marked,
        })
    }

    /// Export/import the click-mark plane (PGM maxval 1) so negative disks
    /// survive a round trip through session state files.
    pub fn save_marks_pgm(&self, path: &Path) -> Result<()> {
        let marks: Vec<u8> = self.click_marked.iter().map(|&m| m as u8).collect();
        crate::io::write_pgm(path, &marks, self.h, self.w, 1)
    }

    pub fn load_marks_pgm(&mut self, path: &Path) -> Result<()> {
        let (marks, h, w, _) = crate::io::read_pgm(path)?;
        if h != self.h || w != self.w {
            return Err(Error::dim("click-mark plane extent mismatch"));
        }
        self.click_marked = marks.iter().map(|&m| m != 0).collect();
        Ok(())
    }
}

/// Apply new clicks and the latest prediction to the reference mask.
///
/// Rules: radius-5 disks of new clicks become 4 (positive) or 0 (negative)
/// and stay fixed from then on. Every other pixel re-derives from the
/// prediction: foreground becomes 3, background 1, except pixels whose
/// prediction flipped relative to the state already recorded, which become 2.
/// Uncertain pixels stay uncertain until a click disk covers them.
pub fn update_reference_mask(
    prev: &ReferenceMask,
    new_clicks: &[Click],
    prev_pred: &Tensor,
) -> Result<ReferenceMask> {
    let (h, w) = (prev.h, prev.w);
    if prev_pred.rank() != 2 || prev_pred.extent(0) != h || prev_pred.extent(1) != w {
        return Err(Error::dim(format!(
            "prediction shape {:?} vs mask {}x{}",
            prev_pred.shape(),
            h,
            w
        )));
    }
    if !prev_pred.is_binary() {
        return Err(Error::input("prediction mask must be binary"));
    }
    for c in new_clicks {
        if c.y >= h || c.x >= w {
            return Err(Error::input(format!(
                "click ({},{}) outside {}x{} image",
                c.y, c.x, h, w
            )));
        }
    }

    let mut out = prev.clone();
    // Prediction-derived values for unmarked pixels.
    for idx in 0..h * w {
        if out.click_marked[idx] {
            continue;
        }
        let fg = prev_pred.data()[idx] == 1.0;
        out.values[idx] = match prev.values[idx] {
            VAL_POSSIBLE_FG => {
                if fg {
                    VAL_POSSIBLE_FG
                } else {
                    VAL_UNCERTAIN
                }
            }
            VAL_POSSIBLE_BG => {
                if fg {
                    VAL_UNCERTAIN
                } else {
                    VAL_POSSIBLE_BG
                }
            }
            VAL_UNCERTAIN => VAL_UNCERTAIN,
            // Never-predicted pixel (fresh mask): adopt the prediction.
            _ => {
                if fg {
                    VAL_POSSIBLE_FG
                } else {
                    VAL_POSSIBLE_BG
                }
            }
        };
    }
    // Click disks dominate everything, including older marks.
    for c in new_clicks {
        let val = if c.positive { VAL_DEFINITE_FG } else { VAL_DEFINITE_BG };
        let (cy, cx) = (c.y as i64, c.x as i64);
        for dy in -CLICK_RADIUS..=CLICK_RADIUS {
            for dx in -CLICK_RADIUS..=CLICK_RADIUS {
                if dy * dy + dx * dx > CLICK_RADIUS * CLICK_RADIUS {
                    continue;
                }
                let (y, x) = (cy + dy, cx + dx);
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let idx = y as usize * w + x as usize;
                out.values[idx] = val;
                out.click_marked[idx] = true;
            }
        }
    }
    Ok(out)
}

/// Half-open pixel/token rectangle `[x1,x2) × [y1,y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptBBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl PromptBBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::input(format!("degenerate bbox [{x1},{x2})x[{y1},{y2})")));
        }
        Ok(PromptBBox { x1, y1, x2, y2 })
    }

    pub fn full(w: usize, h: usize) -> Self {
        PromptBBox {
            x1: 0,
            y1: 0,
            x2: w,
            y2: h,
        }
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn is_aligned(&self, unit: usize) -> bool {
        self.x1 % unit == 0 && self.y1 % unit == 0 && self.x2 % unit == 0 && self.y2 % unit == 0
    }
}

/// Tight box over prompt content, padded, clamped and rounded outward to
/// multiples of 16. Falls back to the full image when no prompt content
/// exists.
pub fn detect_prompt_bbox(mask: &ReferenceMask, pad_px: usize) -> PromptBBox {
    let (h, w) = (mask.h, mask.w);
    let mut lo_y = usize::MAX;
    let mut lo_x = usize::MAX;
    let mut hi_y = 0usize;
    let mut hi_x = 0usize;
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask.is_prompt(y * w + x) {
                any = true;
                lo_y = lo_y.min(y);
                lo_x = lo_x.min(x);
                hi_y = hi_y.max(y);
                hi_x = hi_x.max(x);
            }
        }
    }
    if !any {
        return PromptBBox::full(w, h);
    }
    let x1 = lo_x.saturating_sub(pad_px);
    let y1 = lo_y.saturating_sub(pad_px);
    let x2 = (hi_x + 1 + pad_px).min(w);
    let y2 = (hi_y + 1 + pad_px).min(h);
    PromptBBox {
        x1: (x1 / 16) * 16,
        y1: (y1 / 16) * 16,
        x2: (x2.div_ceil(16) * 16).min(w),
        y2: (y2.div_ceil(16) * 16).min(h),
    }
}

/// One convolution layer's parameters.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn out_channels(&self) -> usize {
        self.weight.extent(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.extent(1)
    }
}

/// Weights of the prompt-embedding path: a 5→5 value embedding table, four
/// stride-2 3×3 convolutions, and the background token embedding.
#[derive(Clone, Debug)]
pub struct DpeWeights {
    pub value_embed: Tensor,
    pub conv_stack: Vec<ConvParams>,
    pub bg_embed: Tensor,
}

impl DpeWeights {
    pub fn validate(&self) -> Result<()> {
        if self.value_embed.shape() != [5, 5] {
            return Err(Error::dim("value_embed must be 5x5"));
        }
        if self.conv_stack.len() != 4 {
            return Err(Error::dim("conv_stack must have 4 layers"));
        }
        let mut ch = 5usize;
        for (i, c) in self.conv_stack.iter().enumerate() {
            if c.in_channels() != ch {
                return Err(Error::dim(format!(
                    "conv{} expects in {}, chain has {}",
                    i,
                    c.in_channels(),
                    ch
                )));
            }
            if c.weight.extent(2) != 3 || c.weight.extent(3) != 3 {
                return Err(Error::dim("conv kernels must be 3x3"));
            }
            ch = c.out_channels();
        }
        if self.bg_embed.numel() != ch {
            return Err(Error::dim(format!(
                "bg_embed dim {} vs conv output {}",
                self.bg_embed.numel(),
                ch
            )));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.bg_embed.numel()
    }
}

/// Map a cropped value plane through the 5-d value embedding.
fn embed_values(mask: &ReferenceMask, bbox: &PromptBBox, table: &Tensor) -> Tensor {
    let (hb, wb) = (bbox.height(), bbox.width());
    let mut out = Tensor::zeros(vec![5, hb, wb]);
    for y in 0..hb {
        for x in 0..wb {
            let v = mask.value_at(bbox.y1 + y, bbox.x1 + x) as usize;
            for c in 0..5 {
                out.set3(c, y, x, table.at2(v, c));
            }
        }
    }
    out
}

/// Run the four stride-2 convolutions (GELU between layers, none after the
/// last) over an embedded crop.
fn conv_stack_forward(mut x: Tensor, stack: &[ConvParams]) -> Result<Tensor> {
    for (i, layer) in stack.iter().enumerate() {
        x = conv2d(&x, &layer.weight, Some(&layer.bias), 2, 1)?;
        if i + 1 < stack.len() {
            gelu_inplace(&mut x);
        }
    }
    Ok(x)
}

/// Full prompt embedding with no cropping: the constant-cost baseline with
/// the identical convolutional architecture.
pub fn non_dynamic_embed(mask: &ReferenceMask, w: &DpeWeights) -> Result<Tensor> {
    w.validate()?;
    if mask.h % 16 != 0 || mask.w % 16 != 0 {
        return Err(Error::input("mask extents must be divisible by 16"));
    }
    let full = PromptBBox::full(mask.w, mask.h);
    let embedded = embed_values(mask, &full, &w.value_embed);
    conv_stack_forward(embedded, &w.conv_stack)
}

/// Dynamic prompt embedding: embed and downsample the bbox crop, fill the
/// remaining token grid with the background embedding.
///
/// With a full-image bbox this equals [`non_dynamic_embed`] bit for bit.
pub fn dpe_embed(mask: &ReferenceMask, bbox: &PromptBBox, w: &DpeWeights) -> Result<Tensor> {
    w.validate()?;
    if !bbox.is_aligned(16) {
        return Err(Error::input(format!("bbox {bbox:?} not 16-aligned")));
    }
    if bbox.x2 > mask.w || bbox.y2 > mask.h || mask.h % 16 != 0 || mask.w % 16 != 0 {
        return Err(Error::input("bbox exceeds mask or mask not 16-divisible"));
    }
    let d = w.token_dim();
    let (th, tw) = (mask.h / 16, mask.w / 16);
    let embedded = embed_values(mask, bbox, &w.value_embed);
    let local = conv_stack_forward(embedded, &w.conv_stack)?;

    let (by1, bx1) = (bbox.y1 / 16, bbox.x1 / 16);
    let (bh, bw) = (bbox.height() / 16, bbox.width() / 16);
    debug_assert_eq!(local.shape(), &[d, bh, bw]);

    let mut p = Tensor::zeros(vec![d, th, tw]);
    for c in 0..d {
        let bg = w.bg_embed.data()[c];
        let plane = &mut p.data_mut()[c * th * tw..(c + 1) * th * tw];
        plane.fill(bg);
        for y in 0..bh {
            for x in 0..bw {
                plane[(by1 + y) * tw + bx1 + x] = local.at3(c, y, x);
            }
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn pred_zeros(h: usize, w: usize) -> Tensor {
        Tensor::zeros(vec![h, w])
    }

    #[test]
    fn first_click_builds_disk() {
        let mask = ReferenceMask::empty(32, 32);
        let out = update_reference_mask(&mask, &[Click::new(10, 10, true)], &pred_zeros(32, 32)).unwrap();
        for y in 0..32i64 {
            for x in 0..32i64 {
                let d2 = (y - 10) * (y - 10) + (x - 10) * (x - 10);
                let v = out.value_at(y as usize, x as usize);
                if d2 <= 25 {
                    assert_eq!(v, VAL_DEFINITE_FG);
                    assert!(out.is_click_marked(y as usize, x as usize));
                } else {
                    assert_eq!(v, VAL_POSSIBLE_BG);
                }
            }
        }
    }

    #[test]
    fn unchanged_prediction_is_fixed_point() {
        let mask = ReferenceMask::empty(16, 16);
        let mut pred = pred_zeros(16, 16);
        for i in 40..60 {
            pred.data_mut()[i] = 1.0;
        }
        let m1 = update_reference_mask(&mask, &[Click::new(3, 3, true)], &pred).unwrap();
        let m2 = update_reference_mask(&m1, &[], &pred).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn flipped_pixel_becomes_uncertain() {
        let mask = ReferenceMask::empty(16, 16);
        let mut pred = pred_zeros(16, 16);
        pred.data_mut()[100] = 1.0;
        let m1 = update_reference_mask(&mask, &[], &pred).unwrap();
        assert_eq!(m1.values()[100], VAL_POSSIBLE_FG);
        let pred2 = pred_zeros(16, 16);
        let m2 = update_reference_mask(&m1, &[], &pred2).unwrap();
        assert_eq!(m2.values()[100], VAL_UNCERTAIN);
    }

    #[test]
    fn click_out_of_bounds_rejected() {
        let mask = ReferenceMask::empty(8, 8);
        assert!(update_reference_mask(&mask, &[Click::new(8, 0, true)], &pred_zeros(8, 8)).is_err());
    }

    #[test]
    fn update_idempotent_and_in_range() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..25 {
            let mask0 = ReferenceMask::empty(48, 48);
            let pred_a = Tensor::from_fn(vec![48, 48], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let pred_b = Tensor::from_fn(vec![48, 48], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let clicks = [
                Click::new(rng.gen_range(0..48), rng.gen_range(0..48), rng.gen_bool(0.5)),
                Click::new(rng.gen_range(0..48), rng.gen_range(0..48), rng.gen_bool(0.5)),
            ];
            // Two updates with changing predictions produce 2s; from there a
            // repeated update with identical inputs must be a fixed point.
            let m1 = update_reference_mask(&mask0, &clicks[..1], &pred_a).unwrap();
            let m2 = update_reference_mask(&m1, &clicks[1..], &pred_b).unwrap();
            let m3 = update_reference_mask(&m2, &clicks[1..], &pred_b).unwrap();
            assert_eq!(m2, m3);
            assert!(m3.values().iter().all(|&v| v <= 4));
        }
    }

    #[test]
    fn bbox_single_pixel_alignment() {
        let mut mask = ReferenceMask::empty(256, 256);
        let pred = {
            let mut p = pred_zeros(256, 256);
            p.data_mut()[100 * 256 + 100] = 1.0;
            p
        };
        mask = update_reference_mask(&mask, &[], &pred).unwrap();
        let bbox = detect_prompt_bbox(&mask, 16);
        assert_eq!(bbox, PromptBBox::new(80, 80, 128, 128).unwrap());
    }

    #[test]
    fn bbox_fallbacks() {
        let mask = ReferenceMask::empty(64, 64);
        assert_eq!(detect_prompt_bbox(&mask, 16), PromptBBox::full(64, 64));

        let pred = Tensor::filled(vec![64, 64], 1.0);
        let full = update_reference_mask(&mask, &[], &pred).unwrap();
        assert_eq!(detect_prompt_bbox(&full, 16), PromptBBox::full(64, 64));
    }

    fn small_dpe_weights(rng: &mut StdRng, d: usize) -> DpeWeights {
        let chain = [5usize, 6, 7, 8, d];
        let conv_stack = (0..4)
            .map(|i| ConvParams {
                weight: Tensor::from_fn(vec![chain[i + 1], chain[i], 3, 3], |_| rng.gen_range(-0.3..0.3)),
                bias: Tensor::from_fn(vec![chain[i + 1]], |_| rng.gen_range(-0.1..0.1)),
            })
            .collect();
        DpeWeights {
            value_embed: Tensor::from_fn(vec![5, 5], |_| rng.gen_range(-1.0..1.0)),
            conv_stack,
            bg_embed: Tensor::from_fn(vec![d], |_| rng.gen_range(-1.0..1.0)),
        }
    }

    fn random_mask(rng: &mut StdRng, h: usize, w: usize) -> ReferenceMask {
        let mask = ReferenceMask::empty(h, w);
        let pred = Tensor::from_fn(vec![h, w], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let clicks = vec![Click::new(rng.gen_range(0..h), rng.gen_range(0..w), true)];
        let m1 = update_reference_mask(&mask, &clicks, &pred).unwrap();
        let pred2 = Tensor::from_fn(vec![h, w], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        update_reference_mask(&m1, &[], &pred2).unwrap()
    }

    #[test]
    fn full_bbox_equals_non_dpe_bitwise() {
        let mut rng = StdRng::seed_from_u64(12);
        let mask = random_mask(&mut rng, 64, 64);
        let w = small_dpe_weights(&mut rng, 10);
        let p = dpe_embed(&mask, &PromptBBox::full(64, 64), &w).unwrap();
        let direct = non_dynamic_embed(&mask, &w).unwrap();
        assert_eq!(p, direct);
    }

    #[test]
    fn background_fill_outside_bbox() {
        let mut rng = StdRng::seed_from_u64(13);
        let mask = ReferenceMask::empty(64, 64);
        let w = small_dpe_weights(&mut rng, 10);
        let bbox = PromptBBox::new(16, 16, 32, 32).unwrap();
        let p = dpe_embed(&mask, &bbox, &w).unwrap();
        // Exterior token columns equal e_bg exactly.
        for c in 0..10 {
            assert_eq!(p.at3(c, 0, 0), w.bg_embed.data()[c]);
            assert_eq!(p.at3(c, 3, 3), w.bg_embed.data()[c]);
        }
        // Interior is the conv of a constant-value embedding, not background.
        let interior: f32 = (0..10).map(|c| p.at3(c, 1, 1).abs()).sum();
        let bg: f32 = (0..10).map(|c| w.bg_embed.data()[c].abs()).sum();
        assert!((interior - bg).abs() > 0.0 || interior != bg);
    }

    #[test]
    fn misaligned_bbox_rejected() {
        let mut rng = StdRng::seed_from_u64(14);
        let mask = ReferenceMask::empty(64, 64);
        let w = small_dpe_weights(&mut rng, 10);
        let bbox = PromptBBox::new(8, 16, 32, 32).unwrap();
        assert!(dpe_embed(&mask, &bbox, &w).is_err());
    }

    /// Crop-interior tokens at ≥2 cells from the crop border match the
    /// full-image computation.
    #[test]
    fn crop_interior_matches_full() {
        let mut rng = StdRng::seed_from_u64(15);
        for _ in 0..10 {
            let mask = random_mask(&mut rng, 128, 128);
            let w = small_dpe_weights(&mut rng, 8);
            let full = dpe_embed(&mask, &PromptBBox::full(128, 128), &w).unwrap();
            // Random aligned bbox at least 5 cells wide.
            let bx1 = 16 * rng.gen_range(0..2usize);
            let by1 = 16 * rng.gen_range(0..2usize);
            let bx2 = bx1 + 16 * rng.gen_range(5..=(8 - bx1 / 16));
            let by2 = by1 + 16 * rng.gen_range(5..=(8 - by1 / 16));
            let bbox = PromptBBox::new(bx1, by1, bx2, by2).unwrap();
            let p = dpe_embed(&mask, &bbox, &w).unwrap();
            let (c1, r1) = (bx1 / 16, by1 / 16);
            let (c2, r2) = (bx2 / 16, by2 / 16);
            for y in r1 + 2..r2 - 2 {
                for x in c1 + 2..c2 - 2 {
                    for c in 0..8 {
                        let diff = (p.at3(c, y, x) - full.at3(c, y, x)).abs();
                        assert!(diff <= 1e-5, "token ({y},{x}) ch {c} differs by {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn pgm_round_trip() {
        let mut rng = StdRng::seed_from_u64(16);
        let mask = random_mask(&mut rng, 32, 32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.pgm");
        mask.save_pgm(&path).unwrap();
        let back = ReferenceMask::load_pgm(&path).unwrap();
        assert_eq!(back.values(), mask.values());
    }
}
