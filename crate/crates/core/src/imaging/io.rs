//! Image and mask file formats.
//!
//! - `F32I`: magic `F32I\n`, an ASCII line `width height spacing_mm\n`, then
//!   `width * height` little-endian `f32` pixels in row-major order.
//! - PGM (`P5`) with 8- or 16-bit samples; masks are written as 8-bit 0/255.
//! - 16-bit (or 8-bit) grayscale PNG, read only.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BitGrid, Image};
use crate::error::{Error, Result};

pub const F32I_MAGIC: &[u8] = b"F32I\n";

pub fn encode_f32i(img: &Image) -> Vec<u8> {
    let header = format!("{} {} {}\n", img.width(), img.height(), img.spacing_mm());
    let mut out = Vec::with_capacity(F32I_MAGIC.len() + header.len() + 4 * img.pixels().len());
    out.extend_from_slice(F32I_MAGIC);
    out.extend_from_slice(header.as_bytes());
    for v in img.pixels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32i(bytes: &[u8], path: &Path) -> Result<Image> {
    let rest = bytes
        .strip_prefix(F32I_MAGIC)
        .ok_or_else(|| Error::format(path, "missing F32I magic"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "unterminated F32I header"))?;
    let header = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::format(path, "header is not ASCII"))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::format(path, format!("expected `width height spacing_mm`, got `{header}`")));
    }
    let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad dimension `{s}`")));
    let width = parse_dim(fields[0])?;
    let height = parse_dim(fields[1])?;
    let spacing: f64 = fields[2]
        .parse()
        .map_err(|_| Error::format(path, format!("bad spacing `{}`", fields[2])))?;
    let data = &rest[nl + 1..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if data.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} pixel bytes for {width}x{height}, found {}", data.len()),
        ));
    }
    let pixels = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Image::new(width, height, spacing, pixels).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_f32i(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_f32i(img))
}

pub fn read_f32i(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32i(&bytes, path)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Raw PGM samples: width, height, maxval and the samples widened to `u16`.
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
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
    if start == *pos {
        return Err(Error::format(path, "truncated PGM header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format(path, "non-ASCII PGM header"))
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos, path)? != "P5" {
        return Err(Error::format(path, "only binary PGM (P5) is supported"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let tok = pgm_token(bytes, &mut pos, path)?;
        tok.parse()
            .map_err(|_| Error::format(path, format!("bad PGM {what} `{tok}`")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, "invalid PGM header values"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    let data = bytes.get(pos..).unwrap_or(&[]);
    let samples: Vec<u16> = if maxval < 256 {
        if data.len() < n {
            return Err(Error::format(path, "truncated PGM raster"));
        }
        data[..n].iter().map(|&b| b as u16).collect()
    } else {
        if data.len() < 2 * n {
            return Err(Error::format(path, "truncated PGM raster"));
        }
        data[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_mask_pgm(mask: &BitGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn write_mask_pgm(path: &Path, mask: &BitGrid) -> Result<()> {
    write_bytes(path, &encode_mask_pgm(mask))
}

/// Reads a 0/255 PGM mask; any nonzero sample counts as set.
pub fn read_mask_pgm(path: &Path) -> Result<BitGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let pgm = decode_pgm(&bytes, path)?;
    BitGrid::new(pgm.width, pgm.height, pgm.samples.iter().map(|&s| s > 0).collect())
}

fn read_png(path: &Path, spacing_mm: f64) -> Result<Image> {
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let gray = decoded.into_luma16();
    let (w, h) = gray.dimensions();
    let pixels = gray.into_raw().into_iter().map(|v| v as f32).collect();
    Image::new(w as usize, h as usize, spacing_mm, pixels)
}

/// Reads an image by extension: `.f32i` carries its own spacing; `.png` and
/// `.pgm` use `default_spacing_mm`. Integer samples are kept as raw counts.
pub fn read_image(path: &Path, default_spacing_mm: f64) -> Result<Image> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("f32i") => read_f32i(path),
        Some("png") => read_png(path, default_spacing_mm),
        Some("pgm") => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let pgm = decode_pgm(&bytes, path)?;
            Image::new(
                pgm.width,
                pgm.height,
                default_spacing_mm,
                pgm.samples.iter().map(|&s| s as f32).collect(),
            )
        }
        _ => Err(Error::format(path, "unknown image extension (expected .f32i, .png or .pgm)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32i_layout() {
        let img = Image::new(2, 1, 0.2, vec![1.0, -0.5]).unwrap();
        let bytes = encode_f32i(&img);
        let mut expected = b"F32I\n2 1 0.2\n".to_vec();
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_f32i(&bytes, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn f32i_rejects_truncation() {
        let img = Image::filled(3, 3, 0.1, 2.0).unwrap();
        let bytes = encode_f32i(&img);
        assert!(decode_f32i(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode_f32i(b"F32X\n1 1 1\n\0\0\0\0", Path::new("x")).is_err());
    }

    #[test]
    fn pgm_mask_and_16_bit() {
        let mask = BitGrid::from_fn(3, 2, |x, y| x == y);
        let bytes = encode_mask_pgm(&mask);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        let pgm = decode_pgm(&bytes, Path::new("m")).unwrap();
        assert_eq!(pgm.samples, vec![255, 0, 0, 0, 255, 0]);

        let mut wide = b"P5\n# comment\n2 1\n65535\n".to_vec();
        wide.extend_from_slice(&[0x12, 0x34, 0xff, 0xff]);
        let pgm = decode_pgm(&wide, Path::new("w")).unwrap();
        assert_eq!(pgm.samples, vec![0x1234, 0xffff]);
    }

    #[test]
    fn reads_16_bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 2, vec![0u16, 1000, 40000, 65535]).unwrap();
        buf.save(&path).unwrap();
        let img = read_image(&path, 0.07).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1000.0, 40000.0, 65535.0]);
        assert_eq!(img.spacing_mm(), 0.07);
    }
}
