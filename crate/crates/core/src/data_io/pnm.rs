//! Binary netpbm codec: P6 (RGB) and P5 (gray), maxval 255 only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// `P5`, one channel.
    Gray,
    /// `P6`, three interleaved channels.
    Rgb,
}

impl PnmKind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            PnmKind::Gray => b"P5",
            PnmKind::Rgb => b"P6",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

/// Decoded 8-bit raster with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                detail: format!("{what} out of range"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut cur = Cursor { bytes, pos: 0 };
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err(cur.err("expected P5 or P6 magic")),
    };
    cur.pos = 2;
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: maxval_at,
            detail: format!("empty image {width}x{height}"),
        });
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected a single whitespace byte after maxval")),
    }
    let need = width * height * kind.channels();
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        });
    }
    Ok(Raster {
        kind,
        width,
        height,
        pixels: payload[..need].to_vec(),
    })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(r.pixels.len() + 20);
    out.extend_from_slice(r.kind.magic());
    out.extend_from_slice(format!("\n{} {}\n255\n", r.width, r.height).as_bytes());
    out.extend_from_slice(&r.pixels);
    out
}

/// `[0, 1]` to 8-bit, rounding to nearest.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn tensor_to_raster(t: &Tensor<f32>, kind: PnmKind) -> Result<Raster> {
    let d = t.dims();
    if d.n != 1 || d.c != kind.channels() {
        return Err(Error::shape(
            "channel",
            format!("{:?} image needs dims (1, {}, h, w), got {d}", kind, kind.channels()),
        ));
    }
    let mut pixels = Vec::with_capacity(d.len());
    for y in 0..d.h {
        for x in 0..d.w {
            for c in 0..d.c {
                pixels.push(quantize(t.at(0, c, y, x)));
            }
        }
    }
    Ok(Raster {
        kind,
        width: d.w,
        height: d.h,
        pixels,
    })
}

fn raster_to_tensor(r: &Raster) -> Tensor<f32> {
    let c = r.kind.channels();
    Tensor::from_fn(Dims::new(1, c, r.height, r.width), |_, ch, y, x| {
        dequantize(r.pixels[(y * r.width + x) * c + ch])
    })
}

fn read_kind(path: &Path, kind: PnmKind) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let r = decode(&bytes)?;
    if r.kind != kind {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("{}: expected {:?} netpbm, found {:?}", path.display(), kind, r.kind),
        });
    }
    Ok(raster_to_tensor(&r))
}

fn write_kind(path: &Path, t: &Tensor<f32>, kind: PnmKind) -> Result<()> {
    let r = tensor_to_raster(t, kind)?;
    std::fs::write(path, encode(&r)).map_err(|e| Error::io(path, e))
}

/// Reads a P6 file as a `(1, 3, h, w)` tensor with values `byte / 255`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_kind(path.as_ref(), PnmKind::Rgb)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    write_kind(path.as_ref(), image, PnmKind::Rgb)
}

/// Reads a P5 file as a `(1, 1, h, w)` tensor with values `byte / 255`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_kind(path.as_ref(), PnmKind::Gray)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    write_kind(path.as_ref(), map, PnmKind::Gray)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_bytes_map_to_unit_interval() {
        let bytes = [b"P5\n2 2\n255\n".as_slice(), &[0, 255, 128, 64]].concat();
        let r = decode(&bytes).unwrap();
        let t = raster_to_tensor(&r);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn rejects_wide_maxval() {
        let bytes = [b"P5 2 2 65535\n".as_slice(), &[0; 8]].concat();
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedMaxval(65535))));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = [b"P6\n2 1\n255\n".as_slice(), &[1, 2, 3, 4]].concat();
        match decode(&bytes) {
            Err(Error::Parse { offset, detail }) => {
                assert_eq!(offset, bytes.len());
                assert!(detail.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_header_reports_offset() {
        match decode(b"P6\n2 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"P3\n1 1\n255\n"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = [b"P5\n# made by hand\n1 1\n255\n".as_slice(), &[7]].concat();
        assert_eq!(decode(&bytes).unwrap().pixels, vec![7]);
    }

    #[test]
    fn quantize_inverts_dequantize() {
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
        }
    }
}
