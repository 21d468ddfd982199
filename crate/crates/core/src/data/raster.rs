//! PFM and 8-bit PNG codecs for `[1, C, H, W]` rasters.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn planar_dims(what: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] | [1, c, h, w] if *c == 1 || *c == 3 => Ok((*c, *h, *w)),
        s => Err(Error::invalid(what, format!("expected [C,H,W] or [1,C,H,W] with C in {{1,3}}, got {s:?}"))),
    }
}

/// Little-endian PFM bytes: header, then bottom-to-top scanlines of
/// interleaved channels.
pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = planar_dims("write_pfm", t)?;
    if !t.all_finite() {
        return Err(Error::NonFinite { op: "write_pfm" });
    }
    let magic = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    let d = t.data();
    for i in (0..h).rev() {
        for j in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&d[ch * h * w + i * w + j].to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Splits off one whitespace-terminated header token.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos >= bytes.len() {
        return Err(Error::Truncated {
            what: "PFM header",
            detail: format!("ended after {} bytes", bytes.len()),
        });
    }
    let tok = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format {
        what: "PFM header",
        detail: "non-ASCII header".into(),
    })?;
    *pos += 1; // the single whitespace byte ending the token
    Ok(tok)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
    let c = match bytes.get(..2) {
        Some(b"PF") => 3,
        Some(b"Pf") => 1,
        _ => {
            return Err(Error::BadMagic {
                what: "PFM",
                expected: "PF or Pf".into(),
                found,
            })
        }
    };
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic.len() != 2 {
        return Err(Error::BadMagic {
            what: "PFM",
            expected: "PF or Pf".into(),
            found: magic.to_string(),
        });
    }
    let dim = |tok: &str| {
        tok.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| Error::Format {
            what: "PFM header",
            detail: format!("bad dimension {tok:?}"),
        })
    };
    let w = dim(header_token(bytes, &mut pos)?)?;
    let h = dim(header_token(bytes, &mut pos)?)?;
    let scale_tok = header_token(bytes, &mut pos)?;
    let scale: f64 = scale_tok.parse().map_err(|_| Error::Format {
        what: "PFM header",
        detail: format!("bad scale {scale_tok:?}"),
    })?;
    if scale > 0.0 {
        return Err(Error::BigEndianPfm);
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format {
            what: "PFM header",
            detail: format!("scale {scale} is not a valid endianness marker"),
        });
    }
    let payload = &bytes[pos..];
    let need = c * h * w * 4;
    if payload.len() < need {
        return Err(Error::Truncated {
            what: "PFM payload",
            detail: format!("need {need} bytes, found {}", payload.len()),
        });
    }
    let mut data = vec![0.0f32; c * h * w];
    for (k, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        let (row_from_bottom, rest) = (k / (w * c), k % (w * c));
        let (j, ch) = (rest / c, rest % c);
        data[ch * h * w + (h - 1 - row_from_bottom) * w + j] = v;
    }
    Tensor::from_vec(&[1, c, h, w], data)
}

pub fn write_pfm(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pfm(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a PFM as `[1, C, H, W]`.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Quantizes `[0, 1]` values to 8 bits, interleaving channels.
pub fn quantize(t: &Tensor) -> Result<(Vec<u8>, usize, usize, usize)> {
    let (c, h, w) = planar_dims("write_png", t)?;
    let d = t.data();
    let mut bytes = Vec::with_capacity(c * h * w);
    for s in 0..h * w {
        for ch in 0..c {
            bytes.push((d[ch * h * w + s].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((bytes, c, h, w))
}

/// Writes a 1-channel (grey) or 3-channel (RGB) raster in `[0, 1]`.
pub fn write_png(t: &Tensor, path: &Path) -> Result<()> {
    let (bytes, c, h, w) = quantize(t)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Reads a PNG as `[1, C, H, W]` in `[0, 1]`; alpha is dropped and grey
/// stays single-channel.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(png_err(path, format!("unsupported colour type {other:?}"))),
    };
    let mut data = vec![0.0f32; c * h * w];
    for s in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + s] = buf[s * stride + ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[1, c, h, w], data)
}
