//! On-disk formats: the `HSTN` tensor container, binary PGM label maps and
//! binary PPM renderings.
//!
//! `HSTN` layout (all integers little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `HSTN` |
//! | 4 | 1 | version, `1` |
//! | 5 | 1 | dtype, `1` = f32 |
//! | 6 | 1 | rank |
//! | 7 | 4·rank | extents, u32 each |
//! | … | 4·product | row-major f32 payload |

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::metrics::LabelMap;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"HSTN";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::InvalidArgument(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&[TENSOR_VERSION, DTYPE_F32, rank]);
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "value {v} does not fit in a 32-bit float"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], offset: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(offset..offset + n).ok_or_else(|| {
        Error::format(
            bytes.len(),
            format!("truncated {what}: need {n} bytes at offset {offset}"),
        )
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if take(bytes, 0, 4, "magic")? != TENSOR_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HSTN\""));
    }
    let head = take(bytes, 4, 3, "header")?;
    if head[0] != TENSOR_VERSION {
        return Err(Error::format(4, format!("unsupported version {}", head[0])));
    }
    if head[1] != DTYPE_F32 {
        return Err(Error::format(5, format!("unsupported dtype {}", head[1])));
    }
    let rank = head[2] as usize;
    if rank == 0 {
        return Err(Error::format(6, "rank must be at least 1"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(take(bytes, off, 4, "extent")?.try_into().unwrap());
        if d == 0 {
            return Err(Error::format(off, "empty extent"));
        }
        count = count
            .checked_mul(d as u64)
            .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= usize::MAX as u64))
            .ok_or_else(|| Error::format(off, "extent overflow"))?;
        dims.push(d as usize);
    }
    let start = 7 + 4 * rank;
    let count = count as usize;
    let payload = take(bytes, start, 4 * count, "payload")?;
    if bytes.len() != start + 4 * count {
        return Err(Error::format(
            start + 4 * count,
            format!("{} trailing bytes", bytes.len() - start - 4 * count),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(start + 4 * i, "non-finite value"));
        }
        data.push(v as f64);
    }
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Cursor over a netpbm header.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start, format!("{what} is too large")))
    }

    /// Consumes the single whitespace byte that separates header and raster.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(self.pos, "expected whitespace after header")),
        }
    }
}

struct Netpbm<'a> {
    width: usize,
    height: usize,
    maxval: usize,
    raster: &'a [u8],
    raster_offset: usize,
}

fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<Netpbm<'a>> {
    if bytes.get(..2) != Some(&magic[..]) {
        return Err(Error::format(
            0,
            format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap()),
        ));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(2, "empty image extent"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::format(maxval_at, format!("maxval {maxval} out of range")));
    }
    let start = h.end()?;
    let sample = if maxval > 255 { 2 } else { 1 };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels * sample))
        .ok_or_else(|| Error::format(2, "extent overflow"))?;
    let raster = take(bytes, start, need, "raster")?;
    Ok(Netpbm {
        width,
        height,
        maxval,
        raster,
        raster_offset: start,
    })
}

fn samples(img: &Netpbm<'_>) -> Result<Vec<u32>> {
    let wide = img.maxval > 255;
    let step = if wide { 2 } else { 1 };
    img.raster
        .chunks_exact(step)
        .enumerate()
        .map(|(i, c)| {
            let v = if wide {
                u16::from_be_bytes([c[0], c[1]]) as u32
            } else {
                c[0] as u32
            };
            if v as usize > img.maxval {
                Err(Error::format(
                    img.raster_offset + i * step,
                    format!("sample {v} exceeds maxval {}", img.maxval),
                ))
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// Reads a binary PGM (`P5`) whose samples are class ids.
pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let img = parse_netpbm(bytes, b"P5", 1)?;
    LabelMap::new(img.height, img.width, samples(&img)?)
}

/// Writes a binary PGM with maxval 255 when every label fits a byte, 65535 otherwise.
pub fn encode_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    let max = labels.data().iter().copied().max().unwrap_or(0);
    if max > 65535 {
        return Err(Error::InvalidArgument(format!(
            "label {max} does not fit a 16-bit PGM"
        )));
    }
    let maxval = if max <= 255 { 255 } else { 65535 };
    let mut out = format!("P5\n{} {}\n{maxval}\n", labels.width(), labels.height()).into_bytes();
    for &l in labels.data() {
        if maxval == 255 {
            out.push(l as u8);
        } else {
            out.extend_from_slice(&(l as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_label_map(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels)?)?;
    Ok(())
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        encode_ppm(self.width, self.height, &self.rgb, &[])
    }
}

/// Binary PPM (`P6`, maxval 255); each comment becomes a `# ` header line.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8], comments: &[String]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = b"P6\n".to_vec();
    for c in comments {
        out.extend_from_slice(format!("# {}\n", c.replace('\n', " ")).as_bytes());
    }
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(rgb);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let img = parse_netpbm(bytes, b"P6", 3)?;
    if img.maxval != 255 {
        return Err(Error::format(2, "only maxval 255 PPM is supported"));
    }
    Ok(RgbImage {
        width: img.width,
        height: img.height,
        rgb: img.raster.to_vec(),
    })
}

/// Deterministic class colour; never black, which is reserved for ignored pixels.
pub fn palette_color(class: u32, palette_seed: u64) -> [u8; 3] {
    let mut rng = stream(palette_seed, &[class as u64]);
    let mut c: [u8; 3] = rng.gen();
    if c.iter().all(|&v| v < 48) {
        c[class as usize % 3] |= 0x80;
    }
    c
}

pub fn render_labels(
    labels: &LabelMap,
    num_classes: usize,
    ignore_label: Option<u32>,
    palette_seed: u64,
) -> Result<RgbImage> {
    let mut rgb = Vec::with_capacity(labels.data().len() * 3);
    for &l in labels.data() {
        if Some(l) == ignore_label {
            rgb.extend_from_slice(&[0, 0, 0]);
        } else if (l as usize) < num_classes {
            rgb.extend_from_slice(&palette_color(l, palette_seed));
        } else {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
    }
    Ok(RgbImage {
        width: labels.width(),
        height: labels.height(),
        rgb,
    })
}
