//! Decoder assembly and interaction protocol: configuration, weight
//! initialization/serialization, the synthetic encoder stand-in, per-click
//! decoding (prompt embedding → 2×(hybrid attention, hybrid MoE) → local
//! upsampling), click simulation and the NoC-style interaction loop.

use crate::attention::{dha_forward, AttnWeights, BsqCodebook, RopeTable};
use crate::error::{Error, Result};
use crate::moe::{hmoe_parallel, ExpertBank, Ffn};
use crate::prompt::{
    detect_prompt_bbox, dpe_embed, update_reference_mask, Click, ConvParams, DpeWeights,
    ReferenceMask,
};
use crate::routing::{compute_edge_map, EdgeMap};
use crate::tensor::{chw_to_tokens, tokens_to_chw, Tensor};
use crate::upsample::{
    canny, cannynet, dlu_upsample, extract_refine_bbox, lowres_mask, CannyNetStage,
    CannyNetWeights, DeconvParams, DluWeights, EdgeFeatures, ResBlock,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Decoder hyperparameters. Extents must be multiples of 16; `token_dim`
/// must be a multiple of 64 so the edge-feature channel chain
/// d/64 → d/16 → d/4 → d stays integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub height: usize,
    pub width: usize,
    pub token_dim: usize,
    pub attn_dim: usize,
    pub code_bits: usize,
    pub experts: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            height: 256,
            width: 256,
            token_dim: 256,
            attn_dim: 32,
            code_bits: 8,
            experts: 4,
            layers: 2,
            heads: 1,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Config(format!(
                "extents {}x{} must be positive multiples of 16",
                self.height, self.width
            )));
        }
        if self.token_dim == 0 || self.token_dim % 64 != 0 {
            return Err(Error::Config(format!(
                "token_dim {} must be a positive multiple of 64",
                self.token_dim
            )));
        }
        if self.heads == 0 || self.attn_dim % self.heads != 0 || (self.attn_dim / self.heads) % 4 != 0 {
            return Err(Error::Config(format!(
                "attn_dim {} must split into {} heads with a multiple-of-4 head dim",
                self.attn_dim, self.heads
            )));
        }
        if self.code_bits == 0 || self.code_bits > 16 || self.code_bits >= self.attn_dim / self.heads {
            return Err(Error::Config(format!(
                "code_bits {} must be in 1..=16 and below the head dim",
                self.code_bits
            )));
        }
        if self.experts == 0 || self.layers == 0 {
            return Err(Error::Config("experts and layers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / 16, self.width / 16)
    }

    /// Parse flat `key=value` lines; `#` starts a comment; unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = DecoderConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("line {}: bad value for {key}", lineno + 1)))
            };
            match key {
                "height" => cfg.height = parse_usize()?,
                "width" => cfg.width = parse_usize()?,
                "token_dim" => cfg.token_dim = parse_usize()?,
                "attn_dim" => cfg.attn_dim = parse_usize()?,
                "code_bits" => cfg.code_bits = parse_usize()?,
                "experts" => cfg.experts = parse_usize()?,
                "layers" => cfg.layers = parse_usize()?,
                "heads" => cfg.heads = parse_usize()?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| Error::Config(format!("line {}: bad seed", lineno + 1)))?
                }
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "height={}\nwidth={}\ntoken_dim={}\nattn_dim={}\ncode_bits={}\nexperts={}\nlayers={}\nheads={}\nseed={}\n",
            self.height,
            self.width,
            self.token_dim,
            self.attn_dim,
            self.code_bits,
            self.experts,
            self.layers,
            self.heads,
            self.seed
        )
    }
}

// ---------------------------------------------------------------------------
// Weight store
// ---------------------------------------------------------------------------

/// Named tensor map covering every learnable parameter of the decoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

const WEIGHT_MAGIC: &[u8; 4] = b"I2FW";
const WEIGHT_VERSION: u32 = 1;

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("missing tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Serialize: magic, version u32, count u32, then per tensor
    /// name_len u16 + UTF-8 name, rank u8, extents u64 each, dtype u8 (0 =
    /// f32), little-endian raw data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.push(0u8);
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format {
                    offset: *pos as u64,
                    message: format!("unexpected end of file, wanted {n} bytes"),
                });
            }
            let slice = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(slice)
        };
        if take(&mut pos, 4)? != WEIGHT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected I2FW".into(),
            });
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != WEIGHT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name_off = pos;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::Format {
                    offset: name_off as u64,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank_off = pos;
            let rank = take(&mut pos, 1)?[0] as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Format {
                    offset: rank_off as u64,
                    message: format!("rank {rank} out of 1..=4"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let dtype_off = pos;
            let dtype = take(&mut pos, 1)?[0];
            if dtype != 0 {
                return Err(Error::Format {
                    offset: dtype_off as u64,
                    message: format!("unsupported dtype tag {dtype}"),
                });
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, 4 * numel)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

/// Every (name, shape) the decoder requires for a configuration.
pub fn manifest(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.token_dim;
    let (c, s, m) = (cfg.attn_dim, cfg.code_bits, cfg.experts);
    let mut names: Vec<(String, Vec<usize>)> = Vec::new();

    names.push(("dpe.embed".into(), vec![5, 5]));
    let dpe_chain = [5usize, 32, 64, 128, d];
    for i in 0..4 {
        names.push((format!("dpe.conv{i}.w"), vec![dpe_chain[i + 1], dpe_chain[i], 3, 3]));
        names.push((format!("dpe.conv{i}.b"), vec![dpe_chain[i + 1]]));
    }
    names.push(("dpe.bg".into(), vec![d]));

    for l in 0..cfg.layers {
        names.push((format!("layer{l}.ln1.g"), vec![d]));
        names.push((format!("layer{l}.ln1.b"), vec![d]));
        for proj in ["wq", "wk", "wv"] {
            names.push((format!("layer{l}.attn.{proj}"), vec![d, c]));
        }
        names.push((format!("layer{l}.attn.wo"), vec![c, d]));
        names.push((format!("layer{l}.bsq.proj"), vec![c, s]));
        names.push((format!("layer{l}.bsq.base1"), vec![s, c]));
        names.push((format!("layer{l}.bsq.base0"), vec![s, c]));
        names.push((format!("layer{l}.ln2.g"), vec![d]));
        names.push((format!("layer{l}.ln2.b"), vec![d]));
        names.push((format!("layer{l}.moe.centroids"), vec![m + 1, d]));
        for e in 0..m {
            names.push((format!("layer{l}.moe.expert{e}.w1"), vec![d, 4 * d]));
            names.push((format!("layer{l}.moe.expert{e}.b1"), vec![4 * d]));
            names.push((format!("layer{l}.moe.expert{e}.w2"), vec![4 * d, d]));
            names.push((format!("layer{l}.moe.expert{e}.b2"), vec![d]));
        }
        names.push((format!("layer{l}.moe.shared.w1"), vec![d, 4 * d]));
        names.push((format!("layer{l}.moe.shared.b1"), vec![4 * d]));
        names.push((format!("layer{l}.moe.shared.w2"), vec![4 * d, d]));
        names.push((format!("layer{l}.moe.shared.b2"), vec![d]));
    }

    names.push(("dlu.mlp.w1".into(), vec![d, 64]));
    names.push(("dlu.mlp.b1".into(), vec![64]));
    names.push(("dlu.mlp.w2".into(), vec![64, 1]));
    names.push(("dlu.mlp.b2".into(), vec![1]));
    let up_chain = [d, d / 4, d / 16, d / 64, 1];
    for i in 0..4 {
        names.push((format!("dlu.fuse{i}.w"), vec![up_chain[i], up_chain[i], 3, 3]));
        names.push((format!("dlu.fuse{i}.b"), vec![up_chain[i]]));
        names.push((format!("dlu.up{i}.w"), vec![up_chain[i], up_chain[i + 1], 2, 2]));
        names.push((format!("dlu.up{i}.b"), vec![up_chain[i + 1]]));
    }
    let cnet_chain = [1, d / 64, d / 16, d / 4, d];
    for i in 0..4 {
        names.push((format!("cnet.stage{i}.down.w"), vec![cnet_chain[i + 1], cnet_chain[i], 3, 3]));
        names.push((format!("cnet.stage{i}.down.b"), vec![cnet_chain[i + 1]]));
        for b in 0..2 {
            for conv in ["c1", "c2"] {
                names.push((
                    format!("cnet.stage{i}.block{b}.{conv}.w"),
                    vec![cnet_chain[i + 1], cnet_chain[i + 1], 3, 3],
                ));
                names.push((format!("cnet.stage{i}.block{b}.{conv}.b"), vec![cnet_chain[i + 1]]));
            }
        }
    }
    names
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name.as_bytes())))
}

fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if name.ends_with(".g") {
        return Tensor::filled(shape.to_vec(), 1.0);
    }
    if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
        return Tensor::zeros(shape.to_vec());
    }
    let (fan_in, fan_out) = match shape.len() {
        1 => (shape[0], shape[0]),
        2 => (shape[0], shape[1]),
        4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
        _ => (shape.iter().product(), 1),
    };
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let mut rng = tensor_rng(seed, name);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-limit..limit))
}

/// Seeded initialization of every manifest tensor: linear/conv weights
/// uniform in ±√(6/(fan_in+fan_out)), biases and LN shifts zero, LN gains
/// one. The per-tensor stream is a 64-bit mix of the seed and the name, so
/// any one tensor's values do not depend on manifest order.
pub fn init_weights(cfg: &DecoderConfig, seed: u64) -> Result<WeightStore> {
    cfg.validate()?;
    let mut store = WeightStore::new();
    for (name, shape) in manifest(cfg) {
        store.insert(name.clone(), init_tensor(&name, &shape, seed));
    }
    Ok(store)
}

/// Check the store against the manifest; lists every absent or misshapen
/// tensor in one error.
pub fn validate_manifest(store: &WeightStore, cfg: &DecoderConfig) -> Result<()> {
    let mut problems = Vec::new();
    for (name, shape) in manifest(cfg) {
        match store.tensors.get(&name) {
            None => problems.push(format!("{name} (missing)")),
            Some(t) if t.shape() != shape.as_slice() => {
                problems.push(format!("{name} (shape {:?}, want {:?})", t.shape(), shape))
            }
            _ => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest(problems.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// Typed decoder weights
// ---------------------------------------------------------------------------

pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub attn: AttnWeights,
    pub codebook: BsqCodebook,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub bank: ExpertBank,
}

/// All module weights materialized from a [`WeightStore`], plus the rope
/// table for the configured grid.
pub struct DecoderWeights {
    pub cfg: DecoderConfig,
    pub dpe: DpeWeights,
    pub layers: Vec<LayerWeights>,
    pub dlu: DluWeights,
    pub rope: RopeTable,
}

fn conv_params(store: &WeightStore, prefix: &str) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: store.get(&format!("{prefix}.w"))?.clone(),
        bias: store.get(&format!("{prefix}.b"))?.clone(),
    })
}

fn ffn(store: &WeightStore, prefix: &str) -> Result<Ffn> {
    Ok(Ffn {
        w1: store.get(&format!("{prefix}.w1"))?.clone(),
        b1: store.get(&format!("{prefix}.b1"))?.clone(),
        w2: store.get(&format!("{prefix}.w2"))?.clone(),
        b2: store.get(&format!("{prefix}.b2"))?.clone(),
    })
}

impl DecoderWeights {
    pub fn from_store(cfg: &DecoderConfig, store: &WeightStore) -> Result<Self> {
        cfg.validate()?;
        validate_manifest(store, cfg)?;
        let dpe = DpeWeights {
            value_embed: store.get("dpe.embed")?.clone(),
            conv_stack: (0..4)
                .map(|i| conv_params(store, &format!("dpe.conv{i}")))
                .collect::<Result<Vec<_>>>()?,
            bg_embed: store.get("dpe.bg")?.clone(),
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let attn = AttnWeights {
                wq: store.get(&format!("layer{l}.attn.wq"))?.clone(),
                wk: store.get(&format!("layer{l}.attn.wk"))?.clone(),
                wv: store.get(&format!("layer{l}.attn.wv"))?.clone(),
                wo: store.get(&format!("layer{l}.attn.wo"))?.clone(),
                heads: cfg.heads,
            };
            let codebook = BsqCodebook::new(
                store.get(&format!("layer{l}.bsq.proj"))?.clone(),
                store.get(&format!("layer{l}.bsq.base1"))?.clone(),
                store.get(&format!("layer{l}.bsq.base0"))?.clone(),
            )?;
            let bank = ExpertBank {
                routed: (0..cfg.experts)
                    .map(|e| ffn(store, &format!("layer{l}.moe.expert{e}")))
                    .collect::<Result<Vec<_>>>()?,
                shared: ffn(store, &format!("layer{l}.moe.shared"))?,
                centroids: store.get(&format!("layer{l}.moe.centroids"))?.clone(),
            };
            layers.push(LayerWeights {
                ln1_g: store.get(&format!("layer{l}.ln1.g"))?.clone(),
                ln1_b: store.get(&format!("layer{l}.ln1.b"))?.clone(),
                attn,
                codebook,
                ln2_g: store.get(&format!("layer{l}.ln2.g"))?.clone(),
                ln2_b: store.get(&format!("layer{l}.ln2.b"))?.clone(),
                bank,
            });
        }
        let cannynet_w = CannyNetWeights {
            stages: (0..4)
                .map(|i| -> Result<CannyNetStage> {
                    Ok(CannyNetStage {
                        down: conv_params(store, &format!("cnet.stage{i}.down"))?,
                        blocks: [
                            ResBlock {
                                conv1: conv_params(store, &format!("cnet.stage{i}.block0.c1"))?,
                                conv2: conv_params(store, &format!("cnet.stage{i}.block0.c2"))?,
                            },
                            ResBlock {
                                conv1: conv_params(store, &format!("cnet.stage{i}.block1.c1"))?,
                                conv2: conv_params(store, &format!("cnet.stage{i}.block1.c2"))?,
                            },
                        ],
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let dlu = DluWeights {
            lowres_w1: store.get("dlu.mlp.w1")?.clone(),
            lowres_b1: store.get("dlu.mlp.b1")?.clone(),
            lowres_w2: store.get("dlu.mlp.w2")?.clone(),
            lowres_b2: store.get("dlu.mlp.b2")?.clone(),
            fuse: (0..4)
                .map(|i| conv_params(store, &format!("dlu.fuse{i}")))
                .collect::<Result<Vec<_>>>()?,
            up: (0..4)
                .map(|i| -> Result<DeconvParams> {
                    Ok(DeconvParams {
                        weight: store.get(&format!("dlu.up{i}.w"))?.clone(),
                        bias: store.get(&format!("dlu.up{i}.b"))?.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            cannynet: cannynet_w,
        };
        let (h, w) = cfg.grid();
        let rope = RopeTable::new_2d(h, w, cfg.attn_dim / cfg.heads)?;
        Ok(DecoderWeights {
            cfg: *cfg,
            dpe,
            layers,
            dlu,
            rope,
        })
    }
}

// ---------------------------------------------------------------------------
// Synthetic encoder stand-in
// ---------------------------------------------------------------------------

/// Deterministic encoder stand-in: flatten 16×16 patches (768-d), project
/// through a seed-fixed random 768→d matrix, normalize each token to zero
/// mean and unit variance.
pub fn synth_encoder(image: &Tensor, d: usize, seed: u64) -> Result<Tensor> {
    if image.rank() != 3 || image.extent(0) != 3 {
        return Err(Error::dim("synth_encoder expects 3×H×W"));
    }
    let (h, w) = (image.extent(1), image.extent(2));
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::dim(format!("image {h}x{w} not divisible by 16")));
    }
    let (th, tw) = (h / 16, w / 16);
    let patch_dim = 3 * 16 * 16;
    let mut rng = tensor_rng(seed, "synth_encoder.proj");
    let limit = (6.0 / (patch_dim + d) as f32).sqrt();
    let proj = Tensor::from_fn(vec![patch_dim, d], |_| rng.gen_range(-limit..limit));

    let mut out = Tensor::zeros(vec![d, th, tw]);
    let mut patch = vec![0.0f32; patch_dim];
    for ty in 0..th {
        for tx in 0..tw {
            let mut i = 0;
            for c in 0..3 {
                for dy in 0..16 {
                    for dx in 0..16 {
                        patch[i] = image.at3(c, 16 * ty + dy, 16 * tx + dx);
                        i += 1;
                    }
                }
            }
            let mut token = vec![0.0f32; d];
            for (p, &pv) in patch.iter().enumerate() {
                let row = proj.row(p);
                for (t, &w) in token.iter_mut().zip(row) {
                    *t += pv * w;
                }
            }
            let mean = token.iter().sum::<f32>() / d as f32;
            let var = token.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + 1e-6).sqrt();
            for (c, t) in token.iter().enumerate() {
                out.set3(c, ty, tx, (t - mean) * inv);
            }
        }
    }
    Ok(out)
}

/// Store image tokens in the weight-file container under the name "tokens".
pub fn save_features(path: &Path, tokens: &Tensor) -> Result<()> {
    let mut store = WeightStore::new();
    store.insert("tokens", tokens.clone());
    store.save(path)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let store = WeightStore::load(path)?;
    Ok(store.get("tokens")?.clone())
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = ((row[j] as f64 - mean) * inv) as f32 * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Session & decoding
// ---------------------------------------------------------------------------

/// Wall-clock seconds per decoding phase of one step.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub prompt_s: f64,
    pub edge_s: f64,
    pub layers_s: f64,
    pub upsample_s: f64,
    pub click_s: f64,
    pub total_s: f64,
}

/// Diagnostics of the most recent decoder step.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StepStats {
    pub edge_tokens: usize,
    pub total_tokens: usize,
    pub phase: PhaseTimes,
}

/// One interaction session: cached image tokens and edge features, the
/// evolving reference mask and the previous prediction. Single-writer;
/// distinct sessions may share one immutable [`DecoderWeights`].
pub struct Session {
    pub cfg: DecoderConfig,
    tokens: Tensor,
    edge_features: EdgeFeatures,
    ref_mask: ReferenceMask,
    prev_mask: Tensor,
    step: usize,
    clicks: Vec<Click>,
    last_stats: StepStats,
    last_logits: Option<Tensor>,
}

pub const CANNY_LO: f32 = 50.0;
pub const CANNY_HI: f32 = 150.0;

impl Session {
    /// Preprocess an image: synthesize tokens and cache Canny edge features.
    pub fn new(image: &Tensor, weights: &DecoderWeights) -> Result<Self> {
        let cfg = weights.cfg;
        if image.rank() != 3 || image.extent(1) != cfg.height || image.extent(2) != cfg.width {
            return Err(Error::dim(format!(
                "image {:?} vs configured {}x{}",
                image.shape(),
                cfg.height,
                cfg.width
            )));
        }
        let tokens = synth_encoder(image, cfg.token_dim, cfg.seed)?;
        Self::with_tokens(image, tokens, weights)
    }

    /// Like [`Session::new`] but with externally supplied image tokens
    /// (e.g. loaded from a feature file).
    pub fn with_tokens(image: &Tensor, tokens: Tensor, weights: &DecoderWeights) -> Result<Self> {
        let cfg = weights.cfg;
        let (th, tw) = cfg.grid();
        if tokens.shape() != [cfg.token_dim, th, tw] {
            return Err(Error::dim(format!(
                "tokens {:?} vs expected [{}, {th}, {tw}]",
                tokens.shape(),
                cfg.token_dim
            )));
        }
        let edges = canny(image, CANNY_LO, CANNY_HI)?;
        let edge_features = cannynet(&edges, &weights.dlu.cannynet)?;
        Ok(Session {
            cfg,
            tokens,
            edge_features,
            ref_mask: ReferenceMask::empty(cfg.height, cfg.width),
            prev_mask: Tensor::zeros(vec![cfg.height, cfg.width]),
            step: 0,
            clicks: Vec::new(),
            last_stats: StepStats::default(),
            last_logits: None,
        })
    }

    pub fn prev_mask(&self) -> &Tensor {
        &self.prev_mask
    }

    pub fn reference_mask(&self) -> &ReferenceMask {
        &self.ref_mask
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn last_stats(&self) -> StepStats {
        self.last_stats
    }

    /// Raw logits of the most recent step, for export/inspection.
    pub fn last_logits(&self) -> Option<&Tensor> {
        self.last_logits.as_ref()
    }

    /// Overwrite the previous prediction (testing hook for routing behavior).
    pub fn set_prev_mask(&mut self, mask: Tensor) -> Result<()> {
        if mask.shape() != [self.cfg.height, self.cfg.width] || !mask.is_binary() {
            return Err(Error::input("prev mask must be binary H×W"));
        }
        self.prev_mask = mask;
        Ok(())
    }

    /// Persist the interactive state (reference mask, marks, prediction,
    /// click history) into a directory.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.ref_mask.save_pgm(&dir.join("refmask.pgm"))?;
        self.ref_mask.save_marks_pgm(&dir.join("refmarks.pgm"))?;
        crate::io::write_binary_mask(&dir.join("prevmask.pgm"), &self.prev_mask)?;
        let meta = serde_json::json!({
            "step": self.step,
            "clicks": self.clicks.iter().map(|c| (c.y, c.x, c.positive as u8)).collect::<Vec<_>>(),
        });
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    pub fn load_state(&mut self, dir: &Path) -> Result<()> {
        let mut mask = ReferenceMask::load_pgm(&dir.join("refmask.pgm"))?;
        mask.load_marks_pgm(&dir.join("refmarks.pgm"))?;
        if mask.height() != self.cfg.height || mask.width() != self.cfg.width {
            return Err(Error::dim("state extents differ from config"));
        }
        self.ref_mask = mask;
        self.prev_mask = crate::io::read_binary_mask(&dir.join("prevmask.pgm"))?;
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)
            .map_err(|e| Error::Format {
                offset: 0,
                message: format!("state.json: {e}"),
            })?;
        self.step = meta["step"].as_u64().unwrap_or(0) as usize;
        self.clicks = meta["clicks"]
            .as_array()
            .map(|arr| {
                arr.iter()
                    .filter_map(|c| {
                        Some(Click::new(
                            c.get(0)?.as_u64()? as usize,
                            c.get(1)?.as_u64()? as usize,
                            c.get(2)?.as_u64()? != 0,
                        ))
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(())
    }
}

/// One decoding step: update the reference mask with the new clicks, embed
/// the prompt crop, route tokens by the previous mask's edge map, run the
/// alternating attention/MoE layers and upsample locally. Returns the new
/// binary mask and stores it as the session's previous prediction.
pub fn decoder_step(
    session: &mut Session,
    new_clicks: &[Click],
    weights: &DecoderWeights,
) -> Result<Tensor> {
    let cfg = session.cfg;
    let (th, tw) = cfg.grid();
    let t_start = Instant::now();
    let mut phase = PhaseTimes::default();

    // Prompt: reference mask update, crop detection, dynamic embedding.
    let t0 = Instant::now();
    let ref_mask = update_reference_mask(&session.ref_mask, new_clicks, &session.prev_mask)?;
    let bbox = detect_prompt_bbox(&ref_mask, 16);
    let p = dpe_embed(&ref_mask, &bbox, &weights.dpe)?;
    let f_p = session.tokens.add(&p)?;
    phase.prompt_s = t0.elapsed().as_secs_f64();

    // Edge routing from the previous prediction; all-edge on the first step.
    let t0 = Instant::now();
    let em = compute_edge_map(&session.prev_mask, th, tw)?;
    let em = if em.edge_count() == 0 { EdgeMap::all_edge(th, tw) } else { em };
    phase.edge_s = t0.elapsed().as_secs_f64();

    // Alternating pre-norm DHA / HMoE layers.
    let t0 = Instant::now();
    let mut x = chw_to_tokens(&f_p)?;
    for layer in &weights.layers {
        let normed = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
        let attn_out = dha_forward(&normed, &em, &layer.attn, &layer.codebook, &weights.rope)?;
        x = x.add(&attn_out)?;
        let normed = layer_norm(&x, &layer.ln2_g, &layer.ln2_b);
        let moe_out = hmoe_parallel(&normed, &em, &layer.bank)?;
        x = x.add(&moe_out)?;
    }
    let f_r = tokens_to_chw(&x, th, tw)?;
    phase.layers_s = t0.elapsed().as_secs_f64();

    // Local upsampling.
    let t0 = Instant::now();
    let low = lowres_mask(&f_r, &weights.dlu)?;
    let refine_bbox = extract_refine_bbox(&low, 2)?;
    let logits = dlu_upsample(&f_r, &refine_bbox, &session.edge_features, &weights.dlu)?;
    let mask = Tensor::from_fn(vec![cfg.height, cfg.width], |i| {
        if logits.data()[i] > 0.0 {
            1.0
        } else {
            0.0
        }
    });
    phase.upsample_s = t0.elapsed().as_secs_f64();
    phase.total_s = t_start.elapsed().as_secs_f64();

    session.ref_mask = ref_mask;
    session.prev_mask = mask.clone();
    session.last_logits = Some(logits);
    session.step += new_clicks.len();
    session.clicks.extend_from_slice(new_clicks);
    session.last_stats = StepStats {
        edge_tokens: em.edge_count(),
        total_tokens: th * tw,
        phase,
    };
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Click simulation & metrics
// ---------------------------------------------------------------------------

/// Intersection over union of two binary masks.
pub fn iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("iou: shape mismatch"));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Simulate the next user click: take the largest 4-connected component of
/// the prediction error and click the pixel farthest (4-connected BFS
/// distance) from that component's boundary; ties break to the smallest
/// (y, x). Returns `None` when prediction and ground truth already agree.
pub fn simulate_click(gt: &Tensor, pred: &Tensor) -> Result<Option<Click>> {
    if gt.rank() != 2 || gt.shape() != pred.shape() {
        return Err(Error::dim("simulate_click: shape mismatch"));
    }
    if !gt.is_binary() || !pred.is_binary() {
        return Err(Error::input("simulate_click expects binary masks"));
    }
    if gt.data().iter().all(|&v| v == 0.0) {
        return Err(Error::input("ground truth mask is empty"));
    }
    let (h, w) = (gt.extent(0), gt.extent(1));
    let error: Vec<bool> = gt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&g, &p)| (g != 0.0) != (p != 0.0))
        .collect();
    if !error.iter().any(|&e| e) {
        return Ok(None);
    }

    // Label 4-connected error components; keep the largest (first in scan
    // order on ties).
    let mut label = vec![usize::MAX; h * w];
    let mut best: (usize, usize) = (0, 0); // (size, component id)
    let mut component_count = 0usize;
    let mut queue = Vec::new();
    for start in 0..h * w {
        if !error[start] || label[start] != usize::MAX {
            continue;
        }
        let id = component_count;
        component_count += 1;
        label[start] = id;
        queue.clear();
        queue.push(start);
        let mut size = 0usize;
        let mut head = 0;
        while head < queue.len() {
            let p = queue[head];
            head += 1;
            size += 1;
            let (py, px) = (p / w, p % w);
            let neighbors = [
                (py.wrapping_sub(1), px),
                (py + 1, px),
                (py, px.wrapping_sub(1)),
                (py, px + 1),
            ];
            for (ny, nx) in neighbors {
                if ny < h && nx < w {
                    let n = ny * w + nx;
                    if error[n] && label[n] == usize::MAX {
                        label[n] = id;
                        queue.push(n);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, id);
        }
    }
    let target = best.1;

    // Multi-source BFS: distance to the nearest pixel outside the component
    // (out-of-image counts as outside).
    let in_comp = |p: usize| label[p] == target;
    let mut dist = vec![0u32; h * w];
    let mut bfs: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    for p in 0..h * w {
        if !in_comp(p) {
            continue;
        }
        let (py, px) = (p / w, p % w);
        let at_border = py == 0 || px == 0 || py == h - 1 || px == w - 1;
        let touches_outside = at_border
            || [
                (py - 1) * w + px,
                (py + 1) * w + px,
                py * w + px - 1,
                py * w + px + 1,
            ]
            .iter()
            .any(|&n| !in_comp(n));
        if touches_outside {
            dist[p] = 1;
            bfs.push_back(p);
        }
    }
    while let Some(p) = bfs.pop_front() {
        let (py, px) = (p / w, p % w);
        let neighbors = [
            (py.wrapping_sub(1), px),
            (py + 1, px),
            (py, px.wrapping_sub(1)),
            (py, px + 1),
        ];
        for (ny, nx) in neighbors {
            if ny < h && nx < w {
                let n = ny * w + nx;
                if in_comp(n) && dist[n] == 0 {
                    dist[n] = dist[p] + 1;
                    bfs.push_back(n);
                }
            }
        }
    }
    let mut click_at = 0usize;
    let mut best_d = 0u32;
    for p in 0..h * w {
        if in_comp(p) && dist[p] > best_d {
            best_d = dist[p];
            click_at = p;
        }
    }
    let (y, x) = (click_at / w, click_at % w);
    Ok(Some(Click::new(y, x, gt.data()[click_at] != 0.0)))
}

// ---------------------------------------------------------------------------
// Interaction loop
// ---------------------------------------------------------------------------

/// Anything that turns incoming clicks into the next mask. Implemented by
/// the real decoder and by stub backends in tests.
pub trait StepBackend {
    fn step(&mut self, new_clicks: &[Click]) -> Result<(Tensor, PhaseTimes)>;
}

impl<F> StepBackend for F
where
    F: FnMut(&[Click]) -> Result<(Tensor, PhaseTimes)>,
{
    fn step(&mut self, new_clicks: &[Click]) -> Result<(Tensor, PhaseTimes)> {
        self(new_clicks)
    }
}

/// Decoder-backed [`StepBackend`].
pub struct DecoderBackend<'a> {
    pub session: Session,
    pub weights: &'a DecoderWeights,
}

impl StepBackend for DecoderBackend<'_> {
    fn step(&mut self, new_clicks: &[Click]) -> Result<(Tensor, PhaseTimes)> {
        let mask = decoder_step(&mut self.session, new_clicks, self.weights)?;
        Ok((mask, self.session.last_stats().phase))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub click: (usize, usize, u8),
    pub iou: f64,
    pub phase: PhaseTimes,
}

#[derive(Clone, Debug, Serialize)]
pub struct NocEntry {
    pub target: f64,
    pub clicks: usize,
    pub reached: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct InteractionReport {
    pub steps: Vec<StepReport>,
    pub noc: Vec<NocEntry>,
    pub iou_at_5: Option<f64>,
    pub converged: bool,
    pub clicks_used: usize,
    pub threads: usize,
}

impl InteractionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn final_iou(&self) -> Option<f64> {
        self.steps.last().map(|s| s.iou)
    }
}

/// Click loop against an arbitrary backend: simulate a click, decode,
/// record IoU and latency; stop on convergence or after `max_clicks`.
/// NoC@τ reports `max_clicks` when τ is never reached.
pub fn run_interaction_with(
    gt: &Tensor,
    backend: &mut dyn StepBackend,
    max_clicks: usize,
    targets: &[f64],
) -> Result<InteractionReport> {
    let mut pred = Tensor::zeros(gt.shape().to_vec());
    let mut steps: Vec<StepReport> = Vec::new();
    let mut converged = false;
    for _ in 0..max_clicks {
        let t0 = Instant::now();
        let click = simulate_click(gt, &pred)?;
        let click_s = t0.elapsed().as_secs_f64();
        let Some(click) = click else {
            converged = true;
            break;
        };
        let (mask, mut phase) = backend.step(&[click])?;
        phase.click_s = click_s;
        phase.total_s += click_s;
        let step_iou = iou(&mask, gt)?;
        pred = mask;
        steps.push(StepReport {
            click: (click.y, click.x, click.positive as u8),
            iou: step_iou,
            phase,
        });
    }
    if !converged && simulate_click(gt, &pred)?.is_none() {
        converged = true;
    }
    let noc = targets
        .iter()
        .map(|&target| {
            let reached = steps.iter().position(|s| s.iou >= target);
            NocEntry {
                target,
                clicks: reached.map_or(max_clicks, |i| i + 1),
                reached: reached.is_some(),
            }
        })
        .collect();
    let iou_at_5 = if steps.is_empty() {
        None
    } else {
        Some(steps[..steps.len().min(5)].last().unwrap().iou)
    };
    Ok(InteractionReport {
        clicks_used: steps.len(),
        steps,
        noc,
        iou_at_5,
        converged,
        threads: rayon::current_num_threads(),
    })
}

/// Full-pipeline interaction: preprocess the image, then click until
/// convergence or the budget runs out.
pub fn run_interaction(
    gt: &Tensor,
    image: &Tensor,
    weights: &DecoderWeights,
    max_clicks: usize,
    targets: &[f64],
) -> Result<InteractionReport> {
    let session = Session::new(image, weights)?;
    let mut backend = DecoderBackend { session, weights };
    run_interaction_with(gt, &mut backend, max_clicks, targets)
}
