//! Thin CLI over the library: weight initialization, single decoding steps,
//! full click simulations and the efficiency benchmarks.

use clap::{Parser, Subcommand};
use interseg::bench::{self, AttnMode, MoeImpl};
use interseg::counters;
use interseg::error::{Error, Result};
use interseg::io;
use interseg::pipeline::{
    decoder_step, init_weights, load_features, run_interaction_with, DecoderBackend,
    DecoderConfig, DecoderWeights, Session, WeightStore,
};
use interseg::prompt::Click;
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "interseg", about = "Adaptive-computation interactive segmentation decoder", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a seeded weight file for a configuration.
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one batch of clicks to a session kept in a state directory.
    RunStep {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Clicks as "y,x,z;y,x,z" with z ∈ {0,1}.
        #[arg(long)]
        clicks: String,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional precomputed image tokens (weight-file container).
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Run the full click-simulation protocol against a ground-truth mask.
    Simulate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 20)]
        max_clicks: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Attention wall-time scaling over doubling N.
    BenchAttn {
        #[arg(long, default_value_t = 256)]
        n_min: usize,
        #[arg(long, default_value_t = 16384)]
        n_max: usize,
        #[arg(long, default_value = "fa")]
        mode: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Hybrid-MoE wall time across expert counts.
    BenchMoe {
        /// Comma-separated expert counts, e.g. 1,4,16,64.
        #[arg(long, default_value = "1,4,16,64")]
        experts: String,
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long = "impl", default_value = "par")]
        implementation: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Prompt-embedding latency vs object area ratio.
    BenchDpe {
        /// Comma-separated ratios; defaults to 0.01..0.64 in nine steps.
        #[arg(long)]
        area_ratios: Option<String>,
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Local-upsampling latency vs object area ratio.
    BenchDlu {
        #[arg(long)]
        area_ratios: Option<String>,
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_clicks(spec: &str) -> Result<Vec<Click>> {
    let mut clicks = Vec::new();
    for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
        let fields: Vec<&str> = part.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::input(format!("click '{part}' must be y,x,z")));
        }
        let y: usize = fields[0].parse().map_err(|_| Error::input(format!("bad y in '{part}'")))?;
        let x: usize = fields[1].parse().map_err(|_| Error::input(format!("bad x in '{part}'")))?;
        let z: u8 = fields[2].parse().map_err(|_| Error::input(format!("bad z in '{part}'")))?;
        if z > 1 {
            return Err(Error::input(format!("z must be 0 or 1 in '{part}'")));
        }
        clicks.push(Click::new(y, x, z == 1));
    }
    if clicks.is_empty() {
        return Err(Error::input("no clicks given"));
    }
    Ok(clicks)
}

/// Ratios as a comma list ("0.01,0.04,0.09") or a range ("0.01..0.64")
/// that clips the default sweep; default when absent.
fn parse_ratio_list(spec: Option<&str>) -> Result<Vec<f64>> {
    let Some(s) = spec else {
        return Ok(bench::DEFAULT_AREA_RATIOS.to_vec());
    };
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: f64 = lo.trim().parse().map_err(|_| Error::Config(format!("bad ratio '{lo}'")))?;
        let hi: f64 = hi.trim().parse().map_err(|_| Error::Config(format!("bad ratio '{hi}'")))?;
        let picked: Vec<f64> = bench::DEFAULT_AREA_RATIOS
            .iter()
            .copied()
            .filter(|&r| r >= lo && r <= hi)
            .collect();
        if picked.is_empty() {
            return Err(Error::Config(format!("no sweep ratios inside {lo}..{hi}")));
        }
        return Ok(picked);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad ratio '{p}'")))
        })
        .collect()
}

fn parse_usize_list(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad count '{p}'")))
        })
        .collect()
}

/// Config for the decode commands: file if given, otherwise defaults with
/// extents taken from the image.
fn resolve_config(config: Option<&PathBuf>, image: &interseg::Tensor) -> Result<DecoderConfig> {
    let mut cfg = match config {
        Some(path) => DecoderConfig::load(path)?,
        None => DecoderConfig::default(),
    };
    if config.is_none() {
        cfg.height = image.extent(1);
        cfg.width = image.extent(2);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn build_session(
    image: &interseg::Tensor,
    weights: &DecoderWeights,
    features: Option<&PathBuf>,
) -> Result<Session> {
    match features {
        Some(path) => Session::with_tokens(image, load_features(path)?, weights),
        None => Session::new(image, weights),
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::InitWeights { config, seed, out } => {
            let cfg = match config {
                Some(path) => DecoderConfig::load(&path)?,
                None => DecoderConfig::default(),
            };
            let store = init_weights(&cfg, seed)?;
            store.save(&out)?;
            println!("wrote {} tensors to {}", store.len(), out.display());
        }
        Command::RunStep {
            weights,
            image,
            clicks,
            state,
            config,
            features,
        } => {
            let img = io::read_ppm(&image)?;
            let cfg = resolve_config(config.as_ref(), &img)?;
            let store = WeightStore::load(&weights)?;
            let decoder = DecoderWeights::from_store(&cfg, &store)?;
            let mut session = build_session(&img, &decoder, features.as_ref())?;
            if state.join("state.json").exists() {
                session.load_state(&state)?;
            }
            let clicks = parse_clicks(&clicks)?;
            counters::reset();
            let mask = decoder_step(&mut session, &clicks, &decoder)?;
            session.save_state(&state)?;
            io::write_binary_mask(&state.join("mask.pgm"), &mask)?;
            if let Some(logits) = session.last_logits() {
                io::write_f32_blob(&state.join("logits.f32"), logits.data())?;
                io::write_prob_pgm(&state.join("prob.pgm"), logits)?;
            }
            fs::write(state.join("counters.json"), counters::snapshot().to_json())?;
            let stats = session.last_stats();
            println!(
                "step {}: {} / {} edge tokens, {:.1} ms",
                session.step_count(),
                stats.edge_tokens,
                stats.total_tokens,
                stats.phase.total_s * 1e3
            );
        }
        Command::Simulate {
            weights,
            image,
            gt,
            max_clicks,
            report,
            config,
            features,
            threads,
        } => {
            let img = io::read_ppm(&image)?;
            let cfg = resolve_config(config.as_ref(), &img)?;
            let store = WeightStore::load(&weights)?;
            let decoder = DecoderWeights::from_store(&cfg, &store)?;
            let gt_mask = io::read_binary_mask(&gt)?;
            let pool = thread_pool(threads)?;
            let result = pool.install(|| -> Result<_> {
                let session = build_session(&img, &decoder, features.as_ref())?;
                let mut backend = DecoderBackend {
                    session,
                    weights: &decoder,
                };
                run_interaction_with(&gt_mask, &mut backend, max_clicks, &[0.90, 0.95])
            })?;
            fs::write(&report, result.to_json())?;
            println!(
                "{} clicks, final IoU {:.4}, report at {}",
                result.clicks_used,
                result.final_iou().unwrap_or(0.0),
                report.display()
            );
        }
        Command::BenchAttn {
            n_min,
            n_max,
            mode,
            repeats,
            csv,
            seed,
        } => {
            let mode: AttnMode = mode.parse()?;
            let points = bench::bench_attn(mode, n_min, n_max, repeats, seed)?;
            let mut out = String::from("n,seconds\n");
            for p in &points {
                out.push_str(&format!("{},{:.9}\n", p.n, p.seconds));
            }
            fs::write(&csv, out)?;
            let fit: Vec<(f64, f64)> = points.iter().map(|p| (p.n as f64, p.seconds)).collect();
            println!("log-log slope: {:.3}", bench::loglog_slope(&fit));
        }
        Command::BenchMoe {
            experts,
            tokens,
            implementation,
            repeats,
            csv,
            threads,
            seed,
        } => {
            let counts = parse_usize_list(&experts)?;
            let imp: MoeImpl = implementation.parse()?;
            let pool = thread_pool(threads)?;
            let points = pool.install(|| bench::bench_moe(&counts, tokens, imp, repeats, seed))?;
            let mut out = String::from("experts,seconds\n");
            for p in &points {
                out.push_str(&format!("{},{:.9}\n", p.experts, p.seconds));
            }
            fs::write(&csv, out)?;
            if imp == MoeImpl::Par {
                if let Some(&m) = counts.iter().max() {
                    let profile = pool.install(|| bench::moe_profile(m, tokens, seed))?;
                    let path = csv.with_extension("profile.json");
                    fs::write(&path, profile.to_json())?;
                    println!("phase profile at {}", path.display());
                }
            }
            println!("wrote {} rows to {}", points.len(), csv.display());
        }
        Command::BenchDpe {
            area_ratios,
            height,
            width,
            repeats,
            csv,
            seed,
        } => {
            let ratios = parse_ratio_list(area_ratios.as_deref())?;
            let points = bench::bench_dpe(&ratios, height, width, repeats, seed)?;
            write_area_csv(&csv, &points, "dpe_seconds,non_dpe_seconds")?;
            println!("wrote {} rows to {}", points.len(), csv.display());
        }
        Command::BenchDlu {
            area_ratios,
            height,
            width,
            repeats,
            csv,
            seed,
        } => {
            let ratios = parse_ratio_list(area_ratios.as_deref())?;
            let points = bench::bench_dlu(&ratios, height, width, repeats, seed)?;
            write_area_csv(&csv, &points, "dlu_seconds,non_dlu_seconds")?;
            println!("wrote {} rows to {}", points.len(), csv.display());
        }
    }
    Ok(())
}

fn write_area_csv(path: &PathBuf, points: &[bench::AreaBenchPoint], cols: &str) -> Result<()> {
    let mut out = format!("area_ratio,{cols}\n");
    for p in points {
        out.push_str(&format!("{},{:.9},{:.9}\n", p.ratio, p.dynamic_s, p.full_s));
    }
    fs::write(path, out)?;
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
