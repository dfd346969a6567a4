//! Binary 8-bit netpbm images: P6 (RGB) and P5 (grayscale).

use std::path::Path;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (P5) or 3 (P6).
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), 3 * width * height);
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    /// Channel mean per pixel, rounded to nearest.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels as u32;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| ((px.iter().map(|&v| v as u32).sum::<u32>() + c / 2) / c) as u8)
            .collect();
        Image::gray(self.width, self.height, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> CliResult<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::data(format!("netpbm: bad {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> CliResult<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(CliError::data("netpbm: expected P5 or P6 magic")),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(CliError::data(format!("netpbm: empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(CliError::data(format!("netpbm: maxval {maxval} unsupported (need 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(CliError::data("netpbm: missing separator after maxval"));
    }
    let raster = &bytes[c.pos + 1..];
    let need = width * height * channels;
    if raster.len() < need {
        return Err(CliError::data(format!(
            "netpbm: raster has {} bytes, {}x{}x{} needs {}",
            raster.len(),
            width,
            height,
            channels,
            need
        )));
    }
    Ok(Image {
        width,
        height,
        channels,
        data: raster[..need].to_vec(),
    })
}

pub fn read(path: &Path) -> CliResult<Image> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display()))
}

pub fn write(path: &Path, img: &Image) -> CliResult<()> {
    std::fs::write(path, img.encode()).map_err(|e| CliError::io(path, e))
}

/// Grayscale preview of a non-negative map: the maximum maps to 255.
pub fn heatmap(values: &[f64], width: usize, height: usize) -> Image {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let data = values
        .iter()
        .map(|&v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 })
        .collect();
    Image::gray(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = Image::rgb(2, 1, vec![1, 2, 3, 250, 251, 252]);
        assert_eq!(decode(&img.encode()).unwrap(), img);
        let g = Image::gray(3, 2, vec![0, 10, 20, 30, 40, 255]);
        assert_eq!(decode(&g.encode()).unwrap(), g);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut bytes = b"P5 # a comment\n 2\t2 # dims\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.data.as_slice()), (2, 2, &[1u8, 2, 3, 4][..]));
    }

    #[test]
    fn raster_byte_may_look_like_whitespace() {
        let mut bytes = b"P5\n1 1\n255\n".to_vec();
        bytes.push(b'\n');
        assert_eq!(decode(&bytes).unwrap().data, vec![b'\n']);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn gray_from_rgb_averages() {
        let img = Image::rgb(1, 1, vec![10, 20, 31]).to_gray();
        assert_eq!(img.data, vec![20]);
    }

    #[test]
    fn heatmap_scales_max_to_255() {
        let h = heatmap(&[0.0, 0.5, 2.0, 1.0], 2, 2);
        assert_eq!(h.data, vec![0, 64, 255, 128]);
        assert_eq!(heatmap(&[0.0; 4], 2, 2).data, vec![0; 4]);
    }
}
