//! Grayscale NIR rasters and their binary PGM (P5) encoding.
//!
//! Files are 8-bit P5 with maxval 255. The physical pixel pitch travels in a
//! sidecar `<stem>.meta` file holding a `pixel_pitch_mm=<float>` line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Pixel pitch used when no sidecar is present, in mm per pixel.
pub const DEFAULT_PIXEL_PITCH: f64 = 0.1;

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NirImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    pixel_pitch: f64,
}

impl NirImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, pixel_pitch: f64) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Format(format!(
                "{} pixels supplied for a {width}x{height} image",
                pixels.len()
            )));
        }
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::Format(format!("pixel pitch {pixel_pitch} must be positive")));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            pixel_pitch,
        })
    }

    /// Builds an image from arbitrary values, clamping each into `[0, 1]`
    /// (NaN becomes 0).
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f64>, pixel_pitch: f64) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(width, height, pixels, pixel_pitch)
    }

    pub fn filled(width: usize, height: usize, value: f64, pixel_pitch: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], pixel_pitch)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn with_pixel_pitch(mut self, pitch: f64) -> Result<Self> {
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::Format(format!("pixel pitch {pitch} must be positive")));
        }
        self.pixel_pitch = pitch;
        Ok(self)
    }

    /// Bilinear sample at fractional pixel coordinates, or `None` outside
    /// the pixel-centre hull.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if self.width == 0 || self.height == 0 {
            return None;
        }
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.pixels.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

/// Decodes an 8-bit binary PGM using the default pixel pitch.
pub fn load_pgm(bytes: &[u8]) -> Result<NirImage> {
    load_pgm_with_pitch(bytes, DEFAULT_PIXEL_PITCH)
}

pub fn load_pgm_with_pitch(bytes: &[u8], pixel_pitch: f64) -> Result<NirImage> {
    let mut cursor = HeaderCursor { bytes, pos: 0 };
    let magic = cursor.token()?;
    if magic != b"P5" {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected P5",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = cursor.number("width")?;
    let height = cursor.number("height")?;
    let maxval = cursor.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedDepth(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let (width, height) = (width as usize, height as usize);
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let payload = &bytes[cursor.pos..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "truncated payload: {} of {count} bytes",
            payload.len()
        )));
    }
    let pixels = payload[..count].iter().map(|&b| f64::from(b) / 255.0).collect();
    NirImage::new(width, height, pixels, pixel_pitch)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("invalid {what} {:?}", String::from_utf8_lossy(tok))))
    }
}

/// Encodes as `P5\n<w> <h>\n255\n` followed by `round(255 * v)` bytes,
/// rounding halves up.
pub fn save_pgm(img: &NirImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(img.pixels.iter().map(|&v| quantize(v)));
    out
}

#[inline]
fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Affine rescale so the darkest pixel maps to 0 and the brightest to 1.
/// Constant images come back unchanged.
pub fn normalize_contrast(img: &NirImage) -> NirImage {
    let Some((lo, hi)) = img.min_max() else {
        return img.clone();
    };
    if hi <= lo {
        return img.clone();
    }
    let span = hi - lo;
    let pixels = img
        .pixels
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect();
    NirImage {
        pixels,
        ..img.clone()
    }
}

/// Sidecar path for an image file: the same path with a `.meta` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn parse_sidecar(text: &str) -> Result<Option<f64>> {
    for line in text.lines() {
        let line = line.trim();
        if let Some(value) = line.strip_prefix("pixel_pitch_mm=") {
            let pitch: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("invalid pixel pitch {value:?}")))?;
            if !(pitch > 0.0 && pitch.is_finite()) {
                return Err(Error::Format(format!("pixel pitch {pitch} must be positive")));
            }
            return Ok(Some(pitch));
        }
    }
    Ok(None)
}

/// Reads a PGM file, taking the pixel pitch from its sidecar when present.
pub fn read_pgm_file(path: &Path) -> Result<NirImage> {
    let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
    let meta = sidecar_path(path);
    let pitch = match fs::read_to_string(&meta) {
        Ok(text) => parse_sidecar(&text)?.unwrap_or(DEFAULT_PIXEL_PITCH),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => DEFAULT_PIXEL_PITCH,
        Err(e) => return Err(Error::read(meta, e)),
    };
    load_pgm_with_pitch(&bytes, pitch)
}

/// Writes the PGM and its pitch sidecar.
pub fn write_pgm_file(path: &Path, img: &NirImage) -> Result<()> {
    fs::write(path, save_pgm(img)).map_err(|e| Error::write(path, e))?;
    let meta = sidecar_path(path);
    fs::write(&meta, format!("pixel_pitch_mm={}\n", img.pixel_pitch)).map_err(|e| Error::write(meta, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, px: Vec<f64>) -> NirImage {
        NirImage::new(w, h, px, DEFAULT_PIXEL_PITCH).unwrap()
    }

    #[test]
    fn endpoints_map_to_unit_interval() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let im = load_pgm(&bytes).unwrap();
        assert_eq!((im.width(), im.height()), (2, 1));
        assert_eq!(im.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend([0u8, 0]);
        assert!(matches!(load_pgm(&bytes), Err(Error::UnsupportedDepth(65535))));
    }

    #[test]
    fn malformed_and_truncated() {
        assert!(matches!(load_pgm(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(load_pgm(b"P5\n1"), Err(Error::Format(_))));
        assert!(matches!(load_pgm(b"P5\nx 1\n255\n"), Err(Error::Format(_))));
        assert!(matches!(load_pgm(b"P5\n4 4\n255\n\x01\x02"), Err(Error::Format(_))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# scanner 7\n1 1\n255\n".to_vec();
        bytes.push(51);
        assert_eq!(load_pgm(&bytes).unwrap().pixels(), &[0.2]);
    }

    #[test]
    fn save_rounds_half_up() {
        assert_eq!(save_pgm(&img(1, 1, vec![1.0])), b"P5\n1 1\n255\n\xff");
        assert_eq!(*save_pgm(&img(1, 1, vec![0.5])).last().unwrap(), 128);
    }

    #[test]
    fn normalize_endpoints_and_constant() {
        let n = normalize_contrast(&img(2, 1, vec![0.2, 0.6]));
        assert_eq!(n.pixels(), &[0.0, 1.0]);
        let c = img(3, 2, vec![0.5; 6]);
        assert_eq!(normalize_contrast(&c), c);
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("finger.pgm");
        let im = img(2, 2, vec![0.0, 0.25, 0.5, 1.0]).with_pixel_pitch(0.05).unwrap();
        write_pgm_file(&path, &im).unwrap();
        assert!(dir.path().join("finger.meta").exists());
        let back = read_pgm_file(&path).unwrap();
        assert_eq!(back.pixel_pitch(), 0.05);
        std::fs::remove_file(dir.path().join("finger.meta")).unwrap();
        assert_eq!(read_pgm_file(&path).unwrap().pixel_pitch(), DEFAULT_PIXEL_PITCH);
    }

    fn raster() -> impl Strategy<Value = NirImage> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0.0f64..=1.0, w * h).prop_map(move |px| img(w, h, px))
        })
    }

    proptest! {
        #[test]
        fn load_inverts_save(im in raster()) {
            let back = load_pgm(&save_pgm(&im)).unwrap();
            prop_assert_eq!(back.width(), im.width());
            for (a, b) in back.pixels().iter().zip(im.pixels()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }

        #[test]
        fn normalize_spans_unit_range_and_is_idempotent(im in raster()) {
            let n = normalize_contrast(&im);
            let (lo, hi) = im.min_max().unwrap();
            if hi > lo {
                let (nlo, nhi) = n.min_max().unwrap();
                prop_assert_eq!(nlo, 0.0);
                prop_assert_eq!(nhi, 1.0);
            }
            prop_assert_eq!(normalize_contrast(&n), n);
        }
    }
}
