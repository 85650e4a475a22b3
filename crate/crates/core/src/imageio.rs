//! 8-bit RGB and grayscale images with binary PPM/PGM codecs (bit-exact) and PNG export.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` planar tensor with values in `[0, 1]`.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let plane = self.width * self.height;
        let mut out = vec![S::zero(); 3 * plane];
        let inv = S::of(1.0 / 255.0);
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = S::of(px[c] as f64) * inv;
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("image tensor")
    }

    /// Inverse of [`RgbImage::to_tensor`]; values are clamped to `[0, 1]` and rounded.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let &[c, height, width] = t.shape() else {
            return Err(shape_err!("image tensor must be [3, H, W], got {:?}", t.shape()));
        };
        if c != 3 {
            return Err(shape_err!("image tensor must have 3 channels, got {c}"));
        }
        let plane = width * height;
        let mut data = vec![0u8; plane * 3];
        for p in 0..plane {
            for ch in 0..3 {
                let v = t.data()[ch * plane + p].f64();
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                data[p * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm(r: impl Read) -> Result<Self> {
        let (width, height, data) = read_netpbm(r, "P6", 3)?;
        Ok(Self { width, height, data })
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image(e.to_string()))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }

    /// Saves as PNG when the extension is `.png`, binary PPM otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if has_extension(path, "png") {
            self.save_png(path)
        } else {
            self.save_ppm(path)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if has_extension(path, "png") {
            Self::load_png(path)
        } else {
            Self::load_ppm(path)
        }
    }
}

impl GrayImage {
    pub fn write_pgm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_pgm(r: impl Read) -> Result<Self> {
        let (width, height, data) = read_netpbm(r, "P5", 1)?;
        Ok(Self { width, height, data })
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(f))
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_pgm(std::fs::File::open(path)?)
    }

    /// Nonzero pixels as a row-major boolean mask.
    pub fn to_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0).collect()
    }

    pub fn from_mask(width: usize, height: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != width * height {
            return Err(shape_err!("mask of {} cells for {width}×{height}", mask.len()));
        }
        Ok(Self {
            width,
            height,
            data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        })
    }
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn read_netpbm(r: impl Read, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(r);
    let mut fields: Vec<String> = Vec::with_capacity(4);
    let mut token = String::new();
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            return Err(Error::Truncated("netpbm header".into()));
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            let mut comment = Vec::new();
            r.read_until(b'\n', &mut comment)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if !token.is_empty() {
                fields.push(std::mem::take(&mut token));
            }
        } else {
            token.push(b as char);
        }
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected {magic} image, found {:?}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad netpbm header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(invalid!("only 8-bit netpbm images are supported (maxval {maxval})"));
    }
    let mut data = vec![0u8; width * height * channels];
    r.read_exact(&mut data)
        .map_err(|_| Error::Truncated(format!("{magic} pixel data")))?;
    Ok((width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let mut img = RgbImage::filled(5, 3, [1, 2, 3]);
        img.set_pixel(4, 2, [255, 0, 128]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert_eq!(RgbImage::read_ppm(&buf[..]).unwrap(), img);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut buf = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[9, 8, 7, 6, 5, 4]);
        let img = RgbImage::read_ppm(&buf[..]).unwrap();
        assert_eq!(img.pixel(1, 0), [6, 5, 4]);
    }

    #[test]
    fn truncated_ppm_fails() {
        let buf = b"P6\n2 2\n255\n\x00\x01".to_vec();
        assert!(matches!(RgbImage::read_ppm(&buf[..]), Err(Error::Truncated(_))));
    }

    #[test]
    fn pgm_roundtrip_and_mask() {
        let g = GrayImage::from_mask(3, 2, &[true, false, false, false, true, true]).unwrap();
        let mut buf = Vec::new();
        g.write_pgm(&mut buf).unwrap();
        let back = GrayImage::read_pgm(&buf[..]).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_mask(), vec![true, false, false, false, true, true]);
    }

    #[test]
    fn tensor_roundtrip() {
        let mut img = RgbImage::filled(4, 4, [10, 200, 33]);
        img.set_pixel(0, 3, [0, 255, 77]);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[3, 4, 4]);
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
    }
}
