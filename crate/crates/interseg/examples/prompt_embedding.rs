//! Dynamic prompt embedding: clicks and a prediction build the 5-valued
//! reference mask, a padded 16-aligned box is detected around the prompt
//! content, and only that crop is embedded; everything else gets the
//! learned background vector. Compares cost and agreement against the
//! full (non-dynamic) embedding.

use interseg::pipeline::{init_weights, DecoderConfig, DecoderWeights};
use interseg::prompt::{
    detect_prompt_bbox, dpe_embed, non_dynamic_embed, update_reference_mask, Click, PromptBBox,
    ReferenceMask,
};
use interseg::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = DecoderConfig {
        height: 512,
        width: 512,
        token_dim: 256,
        ..DecoderConfig::default()
    };
    let store = init_weights(&cfg, 1).expect("init weights");
    let weights = DecoderWeights::from_store(&cfg, &store).expect("typed weights");

    // A small object: prediction disk plus one positive and one negative click.
    let pred = Tensor::from_fn(vec![512, 512], |i| {
        let (y, x) = ((i / 512) as i64, (i % 512) as i64);
        if (y - 200) * (y - 200) + (x - 260) * (x - 260) <= 40 * 40 {
            1.0
        } else {
            0.0
        }
    });
    let mask = ReferenceMask::empty(512, 512);
    let mask = update_reference_mask(
        &mask,
        &[Click::new(200, 260, true), Click::new(120, 120, false)],
        &pred,
    )
    .expect("mask update");

    let mut histogram = [0usize; 5];
    for &v in mask.values() {
        histogram[v as usize] += 1;
    }
    println!("reference mask value counts {{0..4}}: {histogram:?}");

    let bbox = detect_prompt_bbox(&mask, 16);
    println!(
        "detected prompt bbox: [{},{})x[{},{}) of 512x512 ({:.1}% of the image)",
        bbox.x1,
        bbox.x2,
        bbox.y1,
        bbox.y2,
        100.0 * (bbox.width() * bbox.height()) as f64 / (512.0 * 512.0)
    );

    let t0 = Instant::now();
    let p = dpe_embed(&mask, &bbox, &weights.dpe).expect("dpe");
    let dynamic_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let full = non_dynamic_embed(&mask, &weights.dpe).expect("full embed");
    let full_s = t0.elapsed().as_secs_f64();

    println!("dynamic embedding: {:.1} ms, full embedding: {:.1} ms ({:.1}x)", dynamic_s * 1e3, full_s * 1e3, full_s / dynamic_s);

    // Interior tokens of the crop agree with the full computation.
    let (c1, r1, c2, r2) = (bbox.x1 / 16, bbox.y1 / 16, bbox.x2 / 16, bbox.y2 / 16);
    let mut worst = 0.0f32;
    for y in r1 + 2..r2 - 2 {
        for x in c1 + 2..c2 - 2 {
            for c in 0..256 {
                worst = worst.max((p.at3(c, y, x) - full.at3(c, y, x)).abs());
            }
        }
    }
    println!("crop-interior agreement with the full embedding: max |diff| = {worst:.2e}");

    // Outside the box every token is exactly the background embedding.
    let bg_ok = (0..256).all(|c| p.at3(c, 0, 0) == weights.dpe.bg_embed.data()[c]);
    println!("corner token equals the background embedding: {bg_ok}");

    // With a full-image box the two paths coincide bit for bit.
    let p_full = dpe_embed(&mask, &PromptBBox::full(512, 512), &weights.dpe).expect("dpe full");
    println!("full-bbox embedding identical to non-dynamic: {}", p_full == full);
}
