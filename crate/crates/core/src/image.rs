//! Grayscale image helpers: PGM I/O, padding, and resampling.
//!
//! Images are `Array2<f64>` with values in `[0, 1]`. Frames produced by the
//! simulator are quantized to 255 levels so PGM roundtrips are exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub type Image = Array2<f64>;

/// Quantize to the 8-bit grid used by PGM storage.
pub fn quantize_u8(img: &Image) -> Image {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Write a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.dim();
    let mut data = format!("P5\n{w} {h}\n255\n").into_bytes();
    data.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&data).map_err(|e| Error::io(path, e))
}

/// Read a binary (P5) PGM with maxval 255 into `[0, 1]` values.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("unexpected end of pgm header".into()));
        }
        Ok(std::str::from_utf8(&bytes[start..pos])
            .map_err(|e| Error::Format(format!("pgm header not utf-8: {e}")))?
            .to_string())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected P5 magic, got {magic}")));
    }
    let w: usize = token()?
        .parse()
        .map_err(|e| Error::Format(format!("bad pgm width: {e}")))?;
    let h: usize = token()?
        .parse()
        .map_err(|e| Error::Format(format!("bad pgm height: {e}")))?;
    let maxval: usize = token()?
        .parse()
        .map_err(|e| Error::Format(format!("bad pgm maxval: {e}")))?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported pgm maxval {maxval}")));
    }
    let data_start = pos + 1;
    if bytes.len() < data_start + w * h {
        return Err(Error::Format("truncated pgm payload".into()));
    }
    let pixels = &bytes[data_start..data_start + w * h];
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        pixels[y * w + x] as f64 / 255.0
    }))
}

/// Integer-factor bilinear upsampling with half-pixel centre alignment.
pub fn bilinear_upsample(img: &Image, factor: usize) -> Image {
    let (h, w) = img.dim();
    if factor == 1 {
        return img.clone();
    }
    let (oh, ow) = (h * factor, w * factor);
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let sy = ((oy as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((ox as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        img[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + img[[y0, x1]] * (1.0 - fy) * fx
            + img[[y1, x0]] * fy * (1.0 - fx)
            + img[[y1, x1]] * fy * fx
    })
}

/// Integer-factor area-average downsampling; dims must be divisible.
pub fn area_downsample(img: &Image, factor: usize) -> Result<Image> {
    let (h, w) = img.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Argument(format!(
            "cannot area-downsample {h}x{w} by {factor}"
        )));
    }
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img[[y * factor + dy, x * factor + dx]];
            }
        }
        acc * inv
    }))
}

/// Pad to the next multiple of `multiple` on each axis with edge replication.
/// Returns the padded image plus the original size for exact un-padding.
pub fn pad_to_multiple(img: &Image, multiple: usize) -> (Image, (usize, usize)) {
    let (h, w) = img.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return (img.clone(), (h, w));
    }
    let padded = Array2::from_shape_fn((ph, pw), |(y, x)| img[[y.min(h - 1), x.min(w - 1)]]);
    (padded, (h, w))
}
