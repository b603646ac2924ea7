//! Weight store lifecycle: seeded initialization over the manifest,
//! byte-exact save/load round trips, and manifest validation errors that
//! name every absent tensor.

use interseg::pipeline::{init_weights, manifest, validate_manifest, DecoderConfig, WeightStore};
use std::fs;

fn main() {
    let cfg = DecoderConfig {
        height: 64,
        width: 64,
        token_dim: 64,
        attn_dim: 8,
        code_bits: 4,
        experts: 2,
        layers: 2,
        heads: 1,
        seed: 77,
    };
    let names = manifest(&cfg);
    let params: usize = names.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    println!("manifest for the demo config: {} tensors, {params} parameters", names.len());
    for (name, shape) in names.iter().take(6) {
        println!("  {name:<24} {shape:?}");
    }
    println!("  ...");

    let store = init_weights(&cfg, cfg.seed).expect("init");
    let again = init_weights(&cfg, cfg.seed).expect("init");
    println!("\nsame seed twice gives identical stores: {}", store == again);

    let dir = tempfile::tempdir().expect("tempdir");
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    store.save(&p1).expect("save");
    let loaded = WeightStore::load(&p1).expect("load");
    loaded.save(&p2).expect("save again");
    println!(
        "save -> load -> save is byte-identical: {}",
        fs::read(&p1).unwrap() == fs::read(&p2).unwrap()
    );
    println!("file size: {} bytes", fs::read(&p1).unwrap().len());

    let mut partial = WeightStore::new();
    for name in ["dpe.embed", "dpe.bg"] {
        partial.insert(name, store.get(name).unwrap().clone());
    }
    match validate_manifest(&partial, &cfg) {
        Err(e) => {
            let msg = e.to_string();
            println!("\npartial store rejected; first of the missing tensors:");
            println!("  {}", &msg[..msg.len().min(120)]);
        }
        Ok(()) => println!("unexpectedly valid"),
    }
}
