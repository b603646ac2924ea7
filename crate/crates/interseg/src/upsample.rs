//! Dynamic local upsampling: coarse token-level localization, Canny edge
//! features through a small residual CNN, and edge-guided deconvolution
//! upsampling restricted to the detected region.
//!
//! Canny and the CNN run once per image before interaction; their features
//! are cached in the session and cropped per step.

use crate::error::{Error, Result};
use crate::kernels::{conv2d, deconv2d, gelu_inplace, matmul};
use crate::prompt::{ConvParams, PromptBBox};
use crate::tensor::{chw_to_tokens, Tensor};

// ---------------------------------------------------------------------------
// Canny edge detection
// ---------------------------------------------------------------------------

/// Classical Canny over an RGB image with 0..255 values: grayscale, 5×5
/// Gaussian (σ = 1.4), Sobel gradients, non-maximum suppression and
/// double-threshold hysteresis. Thresholds live on the 0..255-ish Sobel
/// magnitude scale (max ≈ 1442 for standard ±1/±2 taps).
///
/// Blur and gradients clamp at the image border so a constant image stays
/// gradient-free everywhere.
pub fn canny(image: &Tensor, lo: f32, hi: f32) -> Result<Tensor> {
    if image.rank() != 3 || image.extent(0) != 3 {
        return Err(Error::dim("canny expects 3×H×W"));
    }
    if !(hi > lo && lo > 0.0) {
        return Err(Error::input(format!("canny thresholds need hi > lo > 0, got {lo}/{hi}")));
    }
    let (h, w) = (image.extent(1), image.extent(2));
    let mut gray = vec![0.0f32; h * w];
    for i in 0..h * w {
        gray[i] = 0.299 * image.data()[i]
            + 0.587 * image.data()[h * w + i]
            + 0.114 * image.data()[2 * h * w + i];
    }

    // 1. Gaussian blur, 5x5, sigma 1.4.
    let sigma = 1.4f32;
    let mut kernel = [[0.0f32; 5]; 5];
    let mut sum = 0.0f32;
    for (dy, row) in kernel.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f32 - 2.0, dx as f32 - 2.0);
            *v = (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    for row in kernel.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let clamp_at = |y: i64, x: i64| -> f32 {
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        gray[yy * w + xx]
    };
    let mut blurred = vec![0.0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0f32;
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    acc += kernel[(dy + 2) as usize][(dx + 2) as usize] * clamp_at(y + dy, x + dx);
                }
            }
            blurred[y as usize * w + x as usize] = acc;
        }
    }

    // 2. Sobel gradients.
    let b_at = |y: i64, x: i64| -> f32 {
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        blurred[yy * w + xx]
    };
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    let mut mag = vec![0.0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let dx = (b_at(y - 1, x + 1) + 2.0 * b_at(y, x + 1) + b_at(y + 1, x + 1))
                - (b_at(y - 1, x - 1) + 2.0 * b_at(y, x - 1) + b_at(y + 1, x - 1));
            let dy = (b_at(y + 1, x - 1) + 2.0 * b_at(y + 1, x) + b_at(y + 1, x + 1))
                - (b_at(y - 1, x - 1) + 2.0 * b_at(y - 1, x) + b_at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy);
        }
    }

    // 3. Non-maximum suppression along the quantized gradient direction.
    // Keep a pixel when it is >= its downhill neighbor and strictly > its
    // uphill neighbor; the asymmetric tie rule thins symmetric ridges to a
    // single pixel.
    let mag_at = |y: i64, x: i64| -> f32 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thinned = vec![0.0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            if mag[i] == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]);
            let octant = (angle / (std::f32::consts::PI / 4.0)).round() as i64;
            let (dx, dy) = match octant.rem_euclid(8) {
                0 => (1i64, 0i64),
                1 => (1, 1),
                2 => (0, 1),
                3 => (-1, 1),
                4 => (-1, 0),
                5 => (-1, -1),
                6 => (0, -1),
                _ => (1, -1),
            };
            let uphill = mag_at(y + dy, x + dx);
            let downhill = mag_at(y - dy, x - dx);
            if mag[i] >= downhill && mag[i] > uphill {
                thinned[i] = mag[i];
            }
        }
    }

    // 4. Hysteresis: strong seeds spread through weak 8-neighbors.
    let mut out = vec![0.0f32; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for i in 0..h * w {
        if thinned[i] >= hi && out[i] == 0.0 {
            out[i] = 1.0;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (jy, jx) = ((j / w) as i64, (j % w) as i64);
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (ny, nx) = (jy + dy, jx + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let n = ny as usize * w + nx as usize;
                        if out[n] == 0.0 && thinned[n] >= lo {
                            out[n] = 1.0;
                            stack.push(n);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![1, h, w], out)
}

// ---------------------------------------------------------------------------
// CannyNet: residual stages over the edge map
// ---------------------------------------------------------------------------

/// Pre-activation residual block: `x + conv2(gelu(conv1(gelu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut a = x.clone();
        gelu_inplace(&mut a);
        let mut b = conv2d(&a, &self.conv1.weight, Some(&self.conv1.bias), 1, 1)?;
        gelu_inplace(&mut b);
        let c = conv2d(&b, &self.conv2.weight, Some(&self.conv2.bias), 1, 1)?;
        x.add(&c)
    }
}

/// One stage: stride-2 downsampling conv followed by two residual blocks.
#[derive(Clone, Debug)]
pub struct CannyNetStage {
    pub down: ConvParams,
    pub blocks: [ResBlock; 2],
}

/// Four stages with channel dims `d/64, d/16, d/4, d`, each halving the
/// spatial resolution.
#[derive(Clone, Debug)]
pub struct CannyNetWeights {
    pub stages: Vec<CannyNetStage>,
}

impl CannyNetWeights {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::dim("cannynet needs 4 stages"));
        }
        let mut ch = 1usize;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.down.in_channels() != ch {
                return Err(Error::dim(format!("stage {i} downsample expects {ch} channels")));
            }
            ch = stage.down.out_channels();
            for block in &stage.blocks {
                if block.conv1.in_channels() != ch
                    || block.conv1.out_channels() != ch
                    || block.conv2.in_channels() != ch
                    || block.conv2.out_channels() != ch
                {
                    return Err(Error::dim(format!("stage {i} block channels must stay {ch}")));
                }
            }
        }
        Ok(())
    }

    pub fn stage_dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.down.out_channels()).collect()
    }
}

/// Multi-scale edge features at 1/2, 1/4, 1/8, 1/16 resolution.
#[derive(Clone, Debug)]
pub struct EdgeFeatures {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

impl EdgeFeatures {
    pub fn validate(&self) -> Result<()> {
        let (h2, w2) = (self.f1.extent(1), self.f1.extent(2));
        for (i, f) in [&self.f2, &self.f3, &self.f4].iter().enumerate() {
            let scale = 1usize << (i + 1);
            if f.extent(1) * scale != h2 || f.extent(2) * scale != w2 {
                return Err(Error::dim("edge feature scales must halve per stage"));
            }
        }
        Ok(())
    }
}

/// Run the residual stages over a binary edge map; `H,W` divisible by 16.
pub fn cannynet(edge_map: &Tensor, w: &CannyNetWeights) -> Result<EdgeFeatures> {
    w.validate()?;
    if edge_map.rank() != 3 || edge_map.extent(0) != 1 {
        return Err(Error::dim("cannynet expects 1×H×W"));
    }
    let (h, wid) = (edge_map.extent(1), edge_map.extent(2));
    if h % 16 != 0 || wid % 16 != 0 {
        return Err(Error::dim(format!("cannynet extents {h}x{wid} must be divisible by 16")));
    }
    let mut x = edge_map.clone();
    let mut features = Vec::with_capacity(4);
    for stage in &w.stages {
        x = conv2d(&x, &stage.down.weight, Some(&stage.down.bias), 2, 1)?;
        for block in &stage.blocks {
            x = block.forward(&x)?;
        }
        features.push(x.clone());
    }
    let f4 = features.pop().unwrap();
    let f3 = features.pop().unwrap();
    let f2 = features.pop().unwrap();
    let f1 = features.pop().unwrap();
    let ef = EdgeFeatures { f1, f2, f3, f4 };
    ef.validate()?;
    Ok(ef)
}

// ---------------------------------------------------------------------------
// DLU: localization + edge-guided upsampling
// ---------------------------------------------------------------------------

/// Deconvolution layer parameters (2×2 kernel, stride 2).
#[derive(Clone, Debug)]
pub struct DeconvParams {
    pub weight: Tensor, // c_in×c_out×2×2
    pub bias: Tensor,
}

/// Weights of the upsampling head: the token-level localization MLP, four
/// fusion convs and four deconvs with channel schedule d→d/4→d/16→d/64→1,
/// plus the CannyNet that feeds the fusion points.
#[derive(Clone, Debug)]
pub struct DluWeights {
    pub lowres_w1: Tensor, // d×hidden
    pub lowres_b1: Tensor,
    pub lowres_w2: Tensor, // hidden×1
    pub lowres_b2: Tensor,
    pub fuse: Vec<ConvParams>,    // 4 layers, channel-preserving 3×3
    pub up: Vec<DeconvParams>,    // 4 layers
    pub cannynet: CannyNetWeights,
}

impl DluWeights {
    pub fn validate(&self) -> Result<()> {
        self.cannynet.validate()?;
        if self.fuse.len() != 4 || self.up.len() != 4 {
            return Err(Error::dim("dlu needs 4 fusion convs and 4 deconvs"));
        }
        let d = self.lowres_w1.rows();
        if self.lowres_w2.cols() != 1 || self.lowres_w2.rows() != self.lowres_w1.cols() {
            return Err(Error::dim("lowres mlp must map d→hidden→1"));
        }
        // Fusion channels must meet the cannynet stage dims in reverse.
        let dims = self.cannynet.stage_dims();
        let mut ch = d;
        for i in 0..4 {
            let feat_ch = dims[3 - i];
            if ch != feat_ch {
                return Err(Error::dim(format!(
                    "fusion {i}: upsample channels {ch} vs edge feature channels {feat_ch}"
                )));
            }
            if self.fuse[i].in_channels() != ch || self.fuse[i].out_channels() != ch {
                return Err(Error::dim(format!("fusion conv {i} must preserve {ch} channels")));
            }
            if self.up[i].weight.extent(0) != ch {
                return Err(Error::dim(format!("deconv {i} expects {ch} input channels")));
            }
            ch = self.up[i].weight.extent(1);
        }
        if ch != 1 {
            return Err(Error::dim("final deconv must emit 1 channel"));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.lowres_w1.rows()
    }
}

/// Per-token localization logits: `d → hidden → 1` MLP over the token grid.
pub fn lowres_mask(f: &Tensor, w: &DluWeights) -> Result<Tensor> {
    if f.rank() != 3 || f.extent(0) != w.token_dim() {
        return Err(Error::dim(format!(
            "lowres_mask: {:?} vs token dim {}",
            f.shape(),
            w.token_dim()
        )));
    }
    let (h, wid) = (f.extent(1), f.extent(2));
    let tokens = chw_to_tokens(f)?;
    let mut hidden = matmul(&tokens, &w.lowres_w1)?;
    for i in 0..hidden.rows() {
        for (v, b) in hidden.row_mut(i).iter_mut().zip(w.lowres_b1.data()) {
            *v += b;
        }
    }
    gelu_inplace(&mut hidden);
    let mut logits = matmul(&hidden, &w.lowres_w2)?;
    let b = w.lowres_b2.data()[0];
    for v in logits.data_mut() {
        *v += b;
    }
    logits.reshape(vec![1, h, wid])
}

/// Tight token-space box over positive logits, expanded by `pad_tokens` and
/// clamped; full extent when nothing is positive.
pub fn extract_refine_bbox(mask_lowres: &Tensor, pad_tokens: usize) -> Result<PromptBBox> {
    if mask_lowres.rank() != 3 || mask_lowres.extent(0) != 1 {
        return Err(Error::dim("extract_refine_bbox expects 1×h×w"));
    }
    let (h, w) = (mask_lowres.extent(1), mask_lowres.extent(2));
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask_lowres.at3(0, y, x) > 0.0 {
                bounds = Some(match bounds {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
    }
    Ok(match bounds {
        None => PromptBBox::full(w, h),
        Some((y0, x0, y1, x1)) => PromptBBox {
            x1: x0.saturating_sub(pad_tokens),
            y1: y0.saturating_sub(pad_tokens),
            x2: (x1 + 1 + pad_tokens).min(w),
            y2: (y1 + 1 + pad_tokens).min(h),
        },
    })
}

/// Full upsampling with no cropping: the constant-cost baseline with the
/// identical fusion/deconvolution chain.
pub fn non_dynamic_upsample(f: &Tensor, ef: &EdgeFeatures, w: &DluWeights) -> Result<Tensor> {
    w.validate()?;
    ef.validate()?;
    if f.rank() != 3 || f.extent(0) != w.token_dim() {
        return Err(Error::dim(format!(
            "non_dynamic_upsample: {:?} vs token dim {}",
            f.shape(),
            w.token_dim()
        )));
    }
    let (h, wid) = (f.extent(1), f.extent(2));
    let mut x = f.clone();
    let scales = [&ef.f4, &ef.f3, &ef.f2, &ef.f1];
    for i in 0..4 {
        x = x.add(scales[i])?;
        x = conv2d(&x, &w.fuse[i].weight, Some(&w.fuse[i].bias), 1, 1)?;
        gelu_inplace(&mut x);
        x = deconv2d(&x, &w.up[i].weight, Some(&w.up[i].bias))?;
    }
    x.reshape(vec![16 * h, 16 * wid])
}

fn crop3(x: &Tensor, y1: usize, x1: usize, y2: usize, x2: usize) -> Tensor {
    let c = x.extent(0);
    let (hb, wb) = (y2 - y1, x2 - x1);
    let mut out = Tensor::zeros(vec![c, hb, wb]);
    for ch in 0..c {
        for y in 0..hb {
            for xx in 0..wb {
                out.set3(ch, y, xx, x.at3(ch, y1 + y, x1 + xx));
            }
        }
    }
    out
}

/// Edge-guided upsampling inside the token-space `bbox`.
///
/// The crop is fused with the matching crop of each edge-feature scale
/// (addition, then a 3×3 conv, then GELU) before each deconvolution, and the
/// 16×-upsampled logits are pasted into a zero canvas: pixels outside the
/// box are exactly zero. With a full-extent box this equals the full
/// ("non-dynamic") upsampling bit for bit.
pub fn dlu_upsample(f: &Tensor, bbox: &PromptBBox, ef: &EdgeFeatures, w: &DluWeights) -> Result<Tensor> {
    w.validate()?;
    ef.validate()?;
    let d = w.token_dim();
    if f.rank() != 3 || f.extent(0) != d {
        return Err(Error::dim(format!("dlu_upsample: {:?} vs token dim {d}", f.shape())));
    }
    let (h, wid) = (f.extent(1), f.extent(2));
    if bbox.x2 > wid || bbox.y2 > h {
        return Err(Error::dim(format!("bbox {bbox:?} exceeds {h}x{wid} token grid")));
    }
    if ef.f4.extent(1) != h || ef.f4.extent(2) != wid || ef.f4.extent(0) != d {
        return Err(Error::dim("edge features misaligned with token grid"));
    }

    let mut x = crop3(f, bbox.y1, bbox.x1, bbox.y2, bbox.x2);
    let scales = [&ef.f4, &ef.f3, &ef.f2, &ef.f1];
    for i in 0..4 {
        // Fuse the matching edge-feature crop: the crop at 2^i× token
        // resolution spans the same pixels as the token box.
        let s = 1usize << i;
        let feat = crop3(scales[i], bbox.y1 * s, bbox.x1 * s, bbox.y2 * s, bbox.x2 * s);
        x = x.add(&feat)?;
        x = conv2d(&x, &w.fuse[i].weight, Some(&w.fuse[i].bias), 1, 1)?;
        gelu_inplace(&mut x);
        x = deconv2d(&x, &w.up[i].weight, Some(&w.up[i].bias))?;
    }
    debug_assert_eq!(x.shape(), &[1, 16 * bbox.height(), 16 * bbox.width()]);

    let mut canvas = Tensor::zeros(vec![16 * h, 16 * wid]);
    let (py, px) = (16 * bbox.y1, 16 * bbox.x1);
    for y in 0..x.extent(1) {
        for xx in 0..x.extent(2) {
            canvas.data_mut()[(py + y) * 16 * wid + px + xx] = x.at3(0, y, xx);
        }
    }
    Ok(canvas)
}
