//! Microbenchmark helpers: median-of-repeats timing, log-log slope fitting,
//! and the workload generators behind the bench-* CLI subcommands and the
//! efficiency acceptance checks.

use crate::attention::{bsqa_linear, full_attention, BsqCodebook};
use crate::error::{Error, Result};
use crate::moe::{hmoe_parallel, hmoe_sequential, ExpertBank, Ffn};
use crate::prompt::{detect_prompt_bbox, dpe_embed, non_dynamic_embed, update_reference_mask, ConvParams, DpeWeights, PromptBBox, ReferenceMask};
use crate::tensor::Tensor;
use crate::upsample::{dlu_upsample, non_dynamic_upsample, CannyNetStage, CannyNetWeights, DeconvParams, DluWeights, EdgeFeatures, ResBlock};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Median of the sample (sorts a copy).
pub fn median(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// One untimed warmup call, then the median wall time of `repeats` calls.
pub fn time_median(repeats: usize, mut f: impl FnMut()) -> f64 {
    f();
    let samples: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    median(&samples)
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in points {
        sx += x.ln();
        sy += y.ln();
    }
    let (mx, my) = (sx / n, sy / n);
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y) in points {
        num += (x.ln() - mx) * (y.ln() - my);
        den += (x.ln() - mx) * (x.ln() - mx);
    }
    num / den
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    Fa,
    Bsqa,
}

impl std::str::FromStr for AttnMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fa" => Ok(AttnMode::Fa),
            "bsqa" => Ok(AttnMode::Bsqa),
            other => Err(Error::Config(format!("mode must be fa|bsqa, got '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnBenchPoint {
    pub n: usize,
    pub seconds: f64,
}

/// Wall time of one attention pass at Nq = N for N doubling from `n_min` to
/// `n_max`, single thread, C = 32, S = 8.
pub fn bench_attn(mode: AttnMode, n_min: usize, n_max: usize, repeats: usize, seed: u64) -> Result<Vec<AttnBenchPoint>> {
    if n_min == 0 || n_min > n_max {
        return Err(Error::Config(format!("bad range {n_min}..{n_max}")));
    }
    let c = 32usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cb = BsqCodebook::new(
        rand_tensor(&mut rng, vec![c, 8]),
        rand_tensor(&mut rng, vec![8, c]),
        rand_tensor(&mut rng, vec![8, c]),
    )?;
    let mut points = Vec::new();
    let mut n = n_min;
    while n <= n_max {
        let q = rand_tensor(&mut rng, vec![n, c]);
        let k = rand_tensor(&mut rng, vec![n, c]);
        let v = rand_tensor(&mut rng, vec![n, c]);
        let seconds = match mode {
            AttnMode::Fa => time_median(repeats, || {
                full_attention(&q, &k, &v, None).unwrap();
            }),
            AttnMode::Bsqa => time_median(repeats, || {
                bsqa_linear(&q, &k, &v, &cb).unwrap();
            }),
        };
        points.push(AttnBenchPoint { n, seconds });
        n *= 2;
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeImpl {
    Seq,
    Par,
}

impl std::str::FromStr for MoeImpl {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(MoeImpl::Seq),
            "par" => Ok(MoeImpl::Par),
            other => Err(Error::Config(format!("impl must be seq|par, got '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MoeBenchPoint {
    pub experts: usize,
    pub seconds: f64,
}

pub fn random_expert_bank(rng: &mut ChaCha8Rng, d: usize, m: usize) -> ExpertBank {
    let scale = (1.0 / d as f32).sqrt();
    let ffn = |rng: &mut ChaCha8Rng| Ffn {
        w1: Tensor::from_fn(vec![d, 4 * d], |_| rng.gen_range(-scale..scale)),
        b1: Tensor::zeros(vec![4 * d]),
        w2: Tensor::from_fn(vec![4 * d, d], |_| rng.gen_range(-scale..scale)),
        b2: Tensor::zeros(vec![d]),
    };
    ExpertBank {
        routed: (0..m).map(|_| ffn(rng)).collect(),
        shared: ffn(rng),
        centroids: rand_tensor(rng, vec![m + 1, d]),
    }
}

/// All-edge HMoE over `tokens` tokens of dim 256 for each expert count.
pub fn bench_moe(experts: &[usize], tokens: usize, imp: MoeImpl, repeats: usize, seed: u64) -> Result<Vec<MoeBenchPoint>> {
    let d = 256usize;
    let mut points = Vec::new();
    for &m in experts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ m as u64);
        let bank = random_expert_bank(&mut rng, d, m);
        // All tokens edge-routed; grid shape is irrelevant to the timing.
        let em = crate::routing::EdgeMap::all_edge(1, tokens);
        let x = rand_tensor(&mut rng, vec![tokens, d]);
        let seconds = match imp {
            MoeImpl::Seq => time_median(repeats, || {
                hmoe_sequential(&x, &em, &bank).unwrap();
            }),
            MoeImpl::Par => time_median(repeats, || {
                hmoe_parallel(&x, &em, &bank).unwrap();
            }),
        };
        points.push(MoeBenchPoint { experts: m, seconds });
    }
    Ok(points)
}

/// One profiled parallel HMoE invocation (per-phase wall clock plus group
/// sizes) at the given expert count.
pub fn moe_profile(m: usize, tokens: usize, seed: u64) -> Result<crate::moe::HmoeProfile> {
    let d = 256usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ m as u64);
    let bank = random_expert_bank(&mut rng, d, m);
    let em = crate::routing::EdgeMap::all_edge(1, tokens);
    let x = rand_tensor(&mut rng, vec![tokens, d]);
    crate::moe::hmoe_parallel_profiled(&x, &em, &bank).map(|(_, profile)| profile)
}

#[derive(Clone, Copy, Debug)]
pub struct AreaBenchPoint {
    pub ratio: f64,
    pub dynamic_s: f64,
    pub full_s: f64,
}

pub const DEFAULT_AREA_RATIOS: [f64; 8] = [0.01, 0.04, 0.09, 0.16, 0.25, 0.36, 0.49, 0.64];

fn random_dpe_weights(rng: &mut ChaCha8Rng, d: usize) -> DpeWeights {
    let chain = [5usize, 32, 64, 128, d];
    DpeWeights {
        value_embed: rand_tensor(rng, vec![5, 5]),
        conv_stack: (0..4)
            .map(|i| ConvParams {
                weight: rand_tensor(rng, vec![chain[i + 1], chain[i], 3, 3]),
                bias: Tensor::zeros(vec![chain[i + 1]]),
            })
            .collect(),
        bg_embed: rand_tensor(rng, vec![d]),
    }
}

/// Reference mask whose foreground is a centered square covering `ratio` of
/// the image.
fn square_mask(h: usize, w: usize, ratio: f64) -> ReferenceMask {
    let side = (((h * w) as f64 * ratio).sqrt() as usize).clamp(1, h.min(w));
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let pred = Tensor::from_fn(vec![h, w], |i| {
        let (y, x) = (i / w, i % w);
        if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
            1.0
        } else {
            0.0
        }
    });
    update_reference_mask(&ReferenceMask::empty(h, w), &[], &pred).expect("mask update")
}

/// Prompt-embedding latency (bbox detection + crop embedding) per area
/// ratio, against the constant full-image embedding.
pub fn bench_dpe(ratios: &[f64], h: usize, w: usize, repeats: usize, seed: u64) -> Result<Vec<AreaBenchPoint>> {
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config("extents must be multiples of 16".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = random_dpe_weights(&mut rng, 256);
    let any_mask = square_mask(h, w, 0.25);
    let full_s = time_median(repeats, || {
        non_dynamic_embed(&any_mask, &weights).unwrap();
    });
    let mut points = Vec::new();
    for &ratio in ratios {
        let mask = square_mask(h, w, ratio);
        let dynamic_s = time_median(repeats, || {
            let bbox = detect_prompt_bbox(&mask, 16);
            dpe_embed(&mask, &bbox, &weights).unwrap();
        });
        points.push(AreaBenchPoint {
            ratio,
            dynamic_s,
            full_s,
        });
    }
    Ok(points)
}

fn random_dlu_weights(rng: &mut ChaCha8Rng, d: usize) -> DluWeights {
    let chain = [d, d / 4, d / 16, d / 64, 1];
    let conv = |rng: &mut ChaCha8Rng, c_out: usize, c_in: usize| ConvParams {
        weight: rand_tensor(rng, vec![c_out, c_in, 3, 3]),
        bias: Tensor::zeros(vec![c_out]),
    };
    let dims = [1usize, d / 64, d / 16, d / 4, d];
    DluWeights {
        lowres_w1: rand_tensor(rng, vec![d, 64]),
        lowres_b1: Tensor::zeros(vec![64]),
        lowres_w2: rand_tensor(rng, vec![64, 1]),
        lowres_b2: Tensor::zeros(vec![1]),
        fuse: (0..4).map(|i| conv(rng, chain[i], chain[i])).collect(),
        up: (0..4)
            .map(|i| DeconvParams {
                weight: rand_tensor(rng, vec![chain[i], chain[i + 1], 2, 2]),
                bias: Tensor::zeros(vec![chain[i + 1]]),
            })
            .collect(),
        cannynet: CannyNetWeights {
            stages: (0..4)
                .map(|i| CannyNetStage {
                    down: conv(rng, dims[i + 1], dims[i]),
                    blocks: [
                        ResBlock {
                            conv1: conv(rng, dims[i + 1], dims[i + 1]),
                            conv2: conv(rng, dims[i + 1], dims[i + 1]),
                        },
                        ResBlock {
                            conv1: conv(rng, dims[i + 1], dims[i + 1]),
                            conv2: conv(rng, dims[i + 1], dims[i + 1]),
                        },
                    ],
                })
                .collect(),
        },
    }
}

fn random_edge_features(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> EdgeFeatures {
    EdgeFeatures {
        f1: rand_tensor(rng, vec![d / 64, 8 * h, 8 * w]),
        f2: rand_tensor(rng, vec![d / 16, 4 * h, 4 * w]),
        f3: rand_tensor(rng, vec![d / 4, 2 * h, 2 * w]),
        f4: rand_tensor(rng, vec![d, h, w]),
    }
}

/// Local-upsampling latency per area ratio against the constant full
/// upsampling. Extents are pixels; the token grid is 16× smaller.
pub fn bench_dlu(ratios: &[f64], h: usize, w: usize, repeats: usize, seed: u64) -> Result<Vec<AreaBenchPoint>> {
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config("extents must be multiples of 16".into()));
    }
    let d = 256usize;
    let (th, tw) = (h / 16, w / 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = random_dlu_weights(&mut rng, d);
    let features = rand_tensor(&mut rng, vec![d, th, tw]);
    let ef = random_edge_features(&mut rng, d, th, tw);
    let full_s = time_median(repeats, || {
        non_dynamic_upsample(&features, &ef, &weights).unwrap();
    });
    let mut points = Vec::new();
    for &ratio in ratios {
        let side = (((th * tw) as f64 * ratio).sqrt().ceil() as usize).clamp(1, th.min(tw));
        let (y0, x0) = ((th - side) / 2, (tw - side) / 2);
        let bbox = PromptBBox::new(x0, y0, x0 + side, y0 + side)?;
        let dynamic_s = time_median(repeats, || {
            dlu_upsample(&features, &bbox, &ef, &weights).unwrap();
        });
        points.push(AreaBenchPoint {
            ratio,
            dynamic_s,
            full_s,
        });
    }
    Ok(points)
}
