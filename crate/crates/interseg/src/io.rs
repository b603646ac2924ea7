//! Binary PPM (P6) / PGM (P5) codecs and raw f32 blobs for test fixtures.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

fn parse_header(data: &[u8], magic: &str) -> Result<(usize, usize, usize, usize)> {
    let mut pos = 0usize;
    let mut fields: Vec<usize> = Vec::new();
    if data.len() < 2 || &data[0..2] != magic.as_bytes() {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected {magic} magic"),
        });
    }
    pos += 2;
    while fields.len() < 3 {
        // skip whitespace and '#' comment lines
        while pos < data.len() && (data[pos].is_ascii_whitespace() || data[pos] == b'#') {
            if data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                message: "expected integer header field".into(),
            });
        }
        let text = std::str::from_utf8(&data[start..pos]).unwrap();
        fields.push(text.parse().map_err(|_| Error::Format {
            offset: start as u64,
            message: "bad integer".into(),
        })?);
    }
    // single whitespace byte separates the header from raster data
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::Format {
            offset: pos as u64,
            message: "missing raster separator".into(),
        });
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], pos))
}

/// Read a binary P6 image into a `3×H×W` tensor with values 0..=255.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let data = fs::read(path)?;
    let (w, h, maxval, pos) = parse_header(&data, "P6")?;
    if maxval > 255 {
        return Err(Error::Format {
            offset: 0,
            message: "only 8-bit PPM supported".into(),
        });
    }
    let need = 3 * w * h;
    if data.len() < pos + need {
        return Err(Error::Format {
            offset: data.len() as u64,
            message: format!("raster truncated, need {need} bytes"),
        });
    }
    let raster = &data[pos..pos + need];
    let mut t = Tensor::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.set3(c, y, x, raster[(y * w + x) * 3 + c] as f32);
            }
        }
    }
    Ok(t)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.extent(0) != 3 {
        return Err(Error::dim("write_ppm expects 3×H×W"));
    }
    let (h, w) = (img.extent(1), img.extent(2));
    let mut out = Vec::with_capacity(3 * h * w + 32);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(img.at3(c, y, x).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a binary P5 grayscale image; returns (values, h, w, maxval).
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let data = fs::read(path)?;
    let (w, h, maxval, pos) = parse_header(&data, "P5")?;
    if maxval > 255 {
        return Err(Error::Format {
            offset: 0,
            message: "only 8-bit PGM supported".into(),
        });
    }
    if data.len() < pos + w * h {
        return Err(Error::Format {
            offset: data.len() as u64,
            message: format!("raster truncated, need {} bytes", w * h),
        });
    }
    Ok((data[pos..pos + w * h].to_vec(), h, w, maxval))
}

pub fn write_pgm(path: &Path, values: &[u8], h: usize, w: usize, maxval: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::dim("write_pgm: raster length mismatch"));
    }
    let mut out = Vec::with_capacity(h * w + 32);
    write!(out, "P5\n{w} {h}\n{maxval}\n")?;
    out.extend_from_slice(values);
    fs::write(path, out)?;
    Ok(())
}

/// Read a P5 mask as a binary `H×W` tensor (pixels above maxval/2 become 1).
pub fn read_binary_mask(path: &Path) -> Result<Tensor> {
    let (values, h, w, maxval) = read_pgm(path)?;
    let thr = (maxval / 2) as u8;
    let data = values.iter().map(|&v| if v > thr { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![h, w], data)
}

/// Write a binary `H×W` mask as P5 with 0/255 values.
pub fn write_binary_mask(path: &Path, mask: &Tensor) -> Result<()> {
    if mask.rank() != 2 {
        return Err(Error::dim("write_binary_mask expects H×W"));
    }
    let values: Vec<u8> = mask.data().iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
    write_pgm(path, &values, mask.extent(0), mask.extent(1), 255)
}

/// Export logits as a probability-scaled PGM: sigmoid(logit) mapped to
/// 0..=255.
pub fn write_prob_pgm(path: &Path, logits: &Tensor) -> Result<()> {
    if logits.rank() != 2 {
        return Err(Error::dim("write_prob_pgm expects H×W"));
    }
    let values: Vec<u8> = logits
        .data()
        .iter()
        .map(|&v| (crate::kernels::sigmoid(v) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_pgm(path, &values, logits.extent(0), logits.extent(1), 255)
}

/// Raw little-endian f32 blob, no header; shape is carried out of band.
pub fn write_f32_blob(path: &Path, data: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(4 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "f32 blob length not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
