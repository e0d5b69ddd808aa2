//! Binary PPM (P6, maxval 255) ingestion and export. Pixels map to [0, 1]
//! by v/255 on read and quantize by round(v·255), half away from zero,
//! on write.

use std::path::Path;

use crate::tensor::ImageTensor;

use super::HarnessError;

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn integer(&mut self) -> Option<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

/// Parses a binary P6 file into an H×W×3 image.
pub fn read_ppm(path: &Path) -> Result<ImageTensor, HarnessError> {
    let bytes = std::fs::read(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_ppm(&bytes).map_err(|detail| HarnessError::Ppm {
        path: path.to_path_buf(),
        detail,
    })
}

pub(crate) fn parse_ppm(bytes: &[u8]) -> Result<ImageTensor, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err("missing P6 magic number".to_string());
    }
    let mut cursor = HeaderCursor { bytes, pos: 2 };
    let width = cursor.integer().ok_or("missing width")?;
    let height = cursor.integer().ok_or("missing height")?;
    let maxval = cursor.integer().ok_or("missing maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err(format!("degenerate dimensions {width}x{height}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cursor.pos) {
        Some(b' ' | b'\t' | b'\r' | b'\n') => cursor.pos += 1,
        _ => return Err("missing whitespace after maxval".to_string()),
    }
    let expected = width * height * 3;
    let raster = &bytes[cursor.pos..];
    if raster.len() != expected {
        return Err(format!(
            "raster has {} bytes, expected {expected} for {width}x{height} RGB",
            raster.len()
        ));
    }
    let data = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageTensor::new(height, width, 3, data).map_err(|e| e.to_string())
}

/// Writes an RGB image as binary P6 with maxval 255.
pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<(), HarnessError> {
    let (height, width, channels) = image.shape();
    if channels != 3 {
        return Err(HarnessError::Ppm {
            path: path.to_path_buf(),
            detail: format!("PPM export needs 3 channels, image has {channels}"),
        });
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}
