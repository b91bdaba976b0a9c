//! On-disk frame codecs: binary P5 PGM for silhouettes/depths and ASCII
//! XYZ for point clouds.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::geometry::Vec3;
use crate::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize) -> Self {
        GrayImage {
            h,
            w,
            pixels: vec![0; h * w],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.pixels[r * self.w + c] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0).count()
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut buf = Vec::with_capacity(img.pixels.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", img.w, img.h).expect("in-memory write");
    buf.extend_from_slice(&img.pixels);
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&bytes).map_err(|(offset, detail)| Error::Format {
        what: "PGM",
        offset,
        detail: format!("{}: {detail}", path.display()),
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, (u64, String)> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<String, (u64, String)> {
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
        if start == *pos {
            return Err((start as u64, "unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err((0, format!("expected P5 magic, got {magic:?}")));
    }
    let w: usize = token(&mut pos)?
        .parse()
        .map_err(|e| (pos as u64, format!("bad width: {e}")))?;
    let h: usize = token(&mut pos)?
        .parse()
        .map_err(|e| (pos as u64, format!("bad height: {e}")))?;
    let maxval: usize = token(&mut pos)?
        .parse()
        .map_err(|e| (pos as u64, format!("bad maxval: {e}")))?;
    if maxval != 255 {
        return Err((pos as u64, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header from raster
    pos += 1;
    if bytes.len() < pos + h * w {
        return Err((
            bytes.len() as u64,
            format!(
                "truncated raster: need {} bytes, have {}",
                h * w,
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    Ok(GrayImage {
        h,
        w,
        pixels: bytes[pos..pos + h * w].to_vec(),
    })
}

/// One `x y z` float triple per line, six decimal places.
pub fn write_xyz(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut buf = String::with_capacity(points.len() * 32);
    for p in points {
        buf.push_str(&format!("{:.6} {:.6} {:.6}\n", p.x, p.y, p.z));
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut points = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let mut it = trimmed.split_ascii_whitespace();
            let mut coord = |what: &str| -> Result<f64> {
                it.next()
                    .ok_or_else(|| Error::Format {
                        what: "XYZ",
                        offset,
                        detail: format!("{}: missing {what}", path.display()),
                    })?
                    .parse()
                    .map_err(|e| Error::Format {
                        what: "XYZ",
                        offset,
                        detail: format!("{}: bad {what}: {e}", path.display()),
                    })
            };
            let (x, y, z) = (coord("x")?, coord("y")?, coord("z")?);
            points.push(Vec3 { x, y, z });
        }
        offset += line.len() as u64 + 1;
    }
    Ok(points)
}
