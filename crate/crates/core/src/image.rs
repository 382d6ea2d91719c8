//! RGB frames in `[0, 1]` and the netpbm files used to emit them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BitMatrix;

/// Row-major `height x width x 3` image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// 8-bit quantization, `round(255 * clamp(x))`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_u8());
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ppm(&bytes).map_err(|msg| Error::Parse {
            file: path.display().to_string(),
            line: 1,
            msg,
        })
    }

    pub fn parse_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(format!("unsupported netpbm header {fields:?}"));
        }
        let w: usize = fields[1].parse().map_err(|_| "bad width")?;
        let h: usize = fields[2].parse().map_err(|_| "bad height")?;
        let body = &bytes[pos + 1..];
        if body.len() != w * h * 3 {
            return Err(format!("expected {} pixel bytes, found {}", w * h * 3, body.len()));
        }
        Self::from_u8(w, h, body).map_err(|e| e.to_string())
    }
}

/// Binary PGM (P5) with 255 for set bits and 0 elsewhere.
pub fn bitmatrix_to_pgm(m: &BitMatrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.push(if m.get(r, c) { 255 } else { 0 });
        }
    }
    out
}
