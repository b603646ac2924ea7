//! Full interactive loop: simulated clicks drive the decoder against a
//! synthetic ground-truth disk; prints per-click IoU, routing and phase
//! latencies, then the machine-readable protocol report.

use interseg::pipeline::{
    decoder_step, init_weights, iou, simulate_click, DecoderConfig, DecoderWeights, Session,
};
use interseg::tensor::Tensor;

fn main() {
    let cfg = DecoderConfig {
        height: 256,
        width: 256,
        seed: 40,
        ..DecoderConfig::default()
    };
    let store = init_weights(&cfg, cfg.seed).expect("init");
    let weights = DecoderWeights::from_store(&cfg, &store).expect("typed weights");

    let image = Tensor::from_fn(vec![3, 256, 256], |i| {
        let pix = i % (256 * 256);
        let (y, x) = (pix / 256, pix % 256);
        let inside = (y as i64 - 128).pow(2) + (x as i64 - 140).pow(2) <= 60 * 60;
        if inside {
            200.0
        } else {
            30.0
        }
    });
    let gt = Tensor::from_fn(vec![256, 256], |i| {
        let (y, x) = ((i / 256) as i64, (i % 256) as i64);
        if (y - 128) * (y - 128) + (x - 140) * (x - 140) <= 60 * 60 {
            1.0
        } else {
            0.0
        }
    });

    let mut session = Session::new(&image, &weights).expect("session");
    println!("interactive run, untrained seeded weights, 256x256 synthetic disk:\n");
    println!(
        "  {:>5}  {:>12}  {:>7}  {:>11}  {:>9}",
        "click", "at (y,x,z)", "IoU", "edge tokens", "step ms"
    );
    let mut pred = Tensor::zeros(vec![256, 256]);
    for k in 1..=8 {
        let Some(click) = simulate_click(&gt, &pred).expect("click sim") else {
            println!("  converged");
            break;
        };
        let mask = decoder_step(&mut session, &[click], &weights).expect("step");
        let stats = session.last_stats();
        println!(
            "  {k:>5}  ({:>3},{:>3},{})  {:>6.4}  {:>4} / {:>4}  {:>9.1}",
            click.y,
            click.x,
            click.positive as u8,
            iou(&mask, &gt).expect("iou"),
            stats.edge_tokens,
            stats.total_tokens,
            stats.phase.total_s * 1e3
        );
        pred = mask;
    }

    let stats = session.last_stats();
    println!("\nlast-step phase breakdown (seconds):");
    println!("  prompt embed {:.4}", stats.phase.prompt_s);
    println!("  edge map     {:.4}", stats.phase.edge_s);
    println!("  layers       {:.4}", stats.phase.layers_s);
    println!("  upsample     {:.4}", stats.phase.upsample_s);

    println!("\n(untrained weights do not segment; the run demonstrates the protocol, routing and timing machinery; see `interseg simulate` for the JSON report)");
}
