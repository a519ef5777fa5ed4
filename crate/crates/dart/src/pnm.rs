//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Samples are mapped to `[0, 1]` floats on read and clamped back to 8-bit on
//! write. Only `maxval <= 255` is supported.

use std::path::Path;

use crate::error::{DartError, Result};
use crate::image::Image;

pub fn read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let name = path.display().to_string();
    let mut pos = 0usize;

    let magic = take_token(&bytes, &mut pos)
        .ok_or_else(|| DartError::format(&name, "missing magic"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(DartError::format(
                &name,
                format!("unsupported magic {other:?}, expected P5 or P6"),
            ))
        }
    };
    let width = take_usize(&bytes, &mut pos, &name, "width")?;
    let height = take_usize(&bytes, &mut pos, &name, "height")?;
    let maxval = take_usize(&bytes, &mut pos, &name, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(DartError::format(
            &name,
            format!("maxval {maxval} unsupported (need 1..=255)"),
        ));
    }
    // single whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(DartError::format(
            &name,
            format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let scale = 1.0 / maxval as f64;
    let data: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 * scale)
        .collect();
    Image::new(height, width, channels, data)
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    let (magic, channels) = match image.channels() {
        1 => ("P5", 1),
        3 => ("P6", 3),
        other => {
            return Err(DartError::invalid(
                "pnm write",
                format!("{other} channels (need 1 or 3)"),
            ))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.reserve(image.height() * image.width() * channels);
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..channels {
                let v = (image.get(y, x, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn take_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    // skip whitespace and # comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

fn take_usize(bytes: &[u8], pos: &mut usize, name: &str, field: &str) -> Result<usize> {
    take_token(bytes, pos)
        .ok_or_else(|| DartError::format(name, format!("missing {field}")))?
        .parse::<usize>()
        .map_err(|e| DartError::format(name, format!("bad {field}: {e}")))
}
