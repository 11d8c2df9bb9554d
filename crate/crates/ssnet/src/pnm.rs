//! Binary PNM files: P6 color images and P5 label maps (8 or 16 bit).

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read};
use std::path::Path;

use image::codecs::pnm::{GraymapHeader, PixmapHeader, PnmDecoder, PnmEncoder, PnmHeader, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};
use ssnet_core::Tensor;

use crate::error::{format_err, io_err, Result};

/// Width and height plus raw samples in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<T>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut buf))
        .map_err(io_err(path))?;
    Ok(buf)
}

/// Decodes a binary PNM whose type and maxval must match exactly.
fn decode(path: &Path, bytes: &[u8], graymap: bool, maxval: u32) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |e: image::ImageError| format_err(path, e.to_string());
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(bad)?;
    let want = if graymap {
        PnmSubtype::Graymap(SampleEncoding::Binary)
    } else {
        PnmSubtype::Pixmap(SampleEncoding::Binary)
    };
    if dec.subtype() != want {
        let magic = String::from_utf8_lossy(dec.subtype().magic_constant()).into_owned();
        let expected = String::from_utf8_lossy(want.magic_constant()).into_owned();
        return Err(format_err(path, format!("expected {expected}, found {magic}")));
    }
    let found = dec.header().maximal_sample();
    if found != maxval {
        return Err(format_err(path, format!("expected maxval {maxval}, found {found}")));
    }
    let (w, h) = dec.dimensions();
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(bad)?;
    Ok((w as usize, h as usize, buf))
}

fn encode(path: &Path, graymap: bool, data: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    let (width, height) = (w as u32, h as u32);
    let header: PnmHeader = if graymap {
        let maxwhite = if color == ExtendedColorType::L16 { 65535 } else { 255 };
        GraymapHeader {
            encoding: SampleEncoding::Binary,
            width,
            height,
            maxwhite,
        }
        .into()
    } else {
        PixmapHeader {
            encoding: SampleEncoding::Binary,
            width,
            height,
            maxval: 255,
        }
        .into()
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_header(header)
        .write_image(data, width, height, color)
        .map_err(|e| format_err(path, e.to_string()))?;
    out.into_inner()
        .map_err(|e| io_err(path)(e.into_error()))?
        .sync_all()
        .map_err(io_err(path))
}

/// Reads a P6 image with maxval 255.
pub fn read_ppm(path: &Path) -> Result<Raster<u8>> {
    let (width, height, samples) = decode(path, &read_bytes(path)?, false, 255)?;
    Ok(Raster {
        width,
        height,
        channels: 3,
        samples,
    })
}

pub fn write_ppm(path: &Path, img: &Raster<u8>) -> Result<()> {
    check_len(path, img)?;
    encode(
        path,
        false,
        &img.samples,
        img.width,
        img.height,
        ExtendedColorType::Rgb8,
    )
}

/// Reads a P5 map with maxval 255.
pub fn read_pgm8(path: &Path) -> Result<Raster<u8>> {
    let (width, height, samples) = decode(path, &read_bytes(path)?, true, 255)?;
    Ok(Raster {
        width,
        height,
        channels: 1,
        samples,
    })
}

pub fn write_pgm8(path: &Path, img: &Raster<u8>) -> Result<()> {
    check_len(path, img)?;
    encode(
        path,
        true,
        &img.samples,
        img.width,
        img.height,
        ExtendedColorType::L8,
    )
}

/// Reads a P5 map with maxval 65535 (big-endian samples on disk).
pub fn read_pgm16(path: &Path) -> Result<Raster<u16>> {
    let (width, height, bytes) = decode(path, &read_bytes(path)?, true, 65535)?;
    // The decoder hands back native-endian samples.
    let samples = bytes.chunks_exact(2).map(|c| u16::from_ne_bytes([c[0], c[1]])).collect();
    Ok(Raster {
        width,
        height,
        channels: 1,
        samples,
    })
}

pub fn write_pgm16(path: &Path, img: &Raster<u16>) -> Result<()> {
    check_len(path, img)?;
    let bytes: Vec<u8> = img.samples.iter().flat_map(|v| v.to_ne_bytes()).collect();
    encode(
        path,
        true,
        &bytes,
        img.width,
        img.height,
        ExtendedColorType::L16,
    )
}

fn check_len<T>(path: &Path, img: &Raster<T>) -> Result<()> {
    if img.samples.len() != img.width * img.height * img.channels {
        return Err(format_err(
            path,
            format!(
                "{} samples for a {}x{}x{} raster",
                img.samples.len(),
                img.width,
                img.height,
                img.channels
            ),
        ));
    }
    Ok(())
}

/// `(1, 3, H, W)` tensor in `[0, 1]` to 8-bit interleaved RGB. Values are
/// rounded to the nearest level, so images quantized to `k / 255` survive
/// a round trip exactly.
pub fn tensor_to_rgb(t: &Tensor) -> Raster<u8> {
    let [_, _, h, w] = t.shape();
    let mut samples = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                samples.push((t.at(0, c, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Raster {
        width: w,
        height: h,
        channels: 3,
        samples,
    }
}

pub fn rgb_to_tensor(img: &Raster<u8>) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                t.set(0, c, i, j, img.samples[(i * w + j) * 3 + c] as f64 / 255.0);
            }
        }
    }
    t
}
