//! Binary PGM (`P5`, maxval 255) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale raster with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0;
    match header_token(bytes, &mut pos) {
        Some(b"P5") => {}
        Some(other) => {
            return Err(format_err(
                path,
                format!("unsupported magic `{}` (only binary P5 is accepted)", String::from_utf8_lossy(other)),
            ))
        }
        None => return Err(format_err(path, "empty file")),
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos).ok_or_else(|| format_err(path, format!("missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format_err(path, format!("{name} `{}` is not a number", String::from_utf8_lossy(tok))))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(path, format!("degenerate size {width}×{height}")));
    }
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} is not 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "truncated header"));
    }
    pos += 1;
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format_err(
            path,
            format!("truncated payload: {} of {need} bytes", raster.len()),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: raster[..need].iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}
