//! Portable graymap (P2 ascii / P5 binary) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major, `y * width + x`.
    pub pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>) -> Self {
        let maxval = pixels.iter().copied().max().unwrap_or(0).max(255);
        Self {
            width,
            height,
            maxval,
            pixels,
        }
    }

    /// Quantises `[0, 1]` values as `round(255·v)`, rounding halves up.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        let pixels = values
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u16)
            .collect();
        Self {
            width,
            height,
            maxval: 255,
            pixels,
        }
    }

    /// Binary P5; two bytes per sample (big-endian) when maxval exceeds 255.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            out.extend(self.pixels.iter().flat_map(|p| p.to_be_bytes()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes).map_err(|msg| Error::Pgm {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
        let binary = match magic.as_str() {
            "P2" => false,
            "P5" => true,
            other => return Err(format!("unsupported magic {other:?}")),
        };
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            let tok = next_token(bytes, &mut pos).ok_or("truncated header")?;
            *h = tok.parse().map_err(|_| format!("bad header field {tok:?}"))?;
        }
        let [width, height, maxval] = header;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(format!("bad dimensions {width}x{height} maxval {maxval}"));
        }
        let n = width * height;
        let pixels = if binary {
            // exactly one whitespace byte separates the header from the raster
            pos += 1;
            let wide = maxval > 255;
            let need = if wide { 2 * n } else { n };
            let raster = bytes.get(pos..pos + need).ok_or("truncated raster")?;
            if wide {
                raster.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
            } else {
                raster.iter().map(|&b| b as u16).collect()
            }
        } else {
            (0..n)
                .map(|_| {
                    let tok = next_token(bytes, &mut pos).ok_or("truncated raster")?;
                    tok.parse::<u16>().map_err(|_| format!("bad sample {tok:?}"))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?
        };
        if pixels.iter().any(|&p| p as usize > maxval) {
            return Err("sample exceeds maxval".into());
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_comments() {
        let src = b"P2\n# a comment\n3 2\n# another\n9\n0 1 2\n3 4 9\n";
        let img = GrayImage::decode(src).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (3, 2, 9));
        assert_eq!(img.pixels, vec![0, 1, 2, 3, 4, 9]);
    }

    #[test]
    fn binary_round_trip() {
        let img = GrayImage::new(2, 2, vec![0, 7, 255, 3]);
        assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
        let wide = GrayImage::new(2, 1, vec![300, 1]);
        assert_eq!(wide.maxval, 300);
        assert_eq!(GrayImage::decode(&wide.encode()).unwrap(), wide);
    }

    #[test]
    fn half_rounds_up() {
        let img = GrayImage::from_unit(2, 1, &[0.5, 1.0]);
        assert_eq!(img.pixels, vec![128, 255]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(GrayImage::decode(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(GrayImage::decode(b"P5\n4 4\n255\n\0").is_err());
        assert!(GrayImage::decode(b"P2\n1 1\n3\n7\n").is_err());
    }
}
