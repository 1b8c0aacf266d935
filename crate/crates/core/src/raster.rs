//! Grayscale rasters, binary masks and square-neighborhood binary morphology.
//!
//! Pixels are stored row-major with the origin at the top-left corner.
//! Morphological neighborhoods are clipped at the image border: pixels
//! outside the image are simply not part of any neighborhood.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("crop {x},{y} {w}x{h} lies outside a {width}x{height} image")]
    CropOutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("failed to read graymap {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write graymap {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self, RasterError> {
        let len = width as usize * height as usize;
        Self::new(width, height, vec![value; len])
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> u8,
    ) -> Result<Self, RasterError> {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    /// Copy out the `w`x`h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<GrayImage, RasterError> {
        let fits = w > 0
            && h > 0
            && x.checked_add(w).is_some_and(|r| r <= self.width)
            && y.checked_add(h).is_some_and(|b| b <= self.height);
        if !fits {
            return Err(RasterError::CropOutOfBounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w as usize * h as usize);
        for row in y..y + h {
            let start = self.index(x, row);
            data.extend_from_slice(&self.data[start..start + w as usize]);
        }
        GrayImage::new(w, h, data)
    }

    /// Load an 8-bit portable graymap. Any other PNM flavour is converted to luma.
    pub fn load_pgm(path: &Path) -> Result<Self, RasterError> {
        let decoded = image::ImageReader::open(path)
            .map_err(|e| RasterError::Decode {
                path: path.display().to_string(),
                source: image::ImageError::IoError(e),
            })?
            .with_guessed_format()
            .map_err(|e| RasterError::Decode {
                path: path.display().to_string(),
                source: image::ImageError::IoError(e),
            })?
            .decode()
            .map_err(|source| RasterError::Decode {
                path: path.display().to_string(),
                source,
            })?
            .into_luma8();
        let (w, h) = decoded.dimensions();
        GrayImage::new(w, h, decoded.into_raw())
    }

    /// Write the image as a binary (P5) portable graymap.
    pub fn save_pgm(&self, path: &Path) -> Result<(), RasterError> {
        let encode_err = |source| RasterError::Encode {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(|e| encode_err(image::ImageError::IoError(e)))?;
        PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .encode(&self.data[..], self.width, self.height, image::ExtendedColorType::L8)
            .map_err(encode_err)
    }
}

/// Foreground/background mask with the same layout as [`GrayImage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self, RasterError> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, RasterError> {
        Self::new(width, height, vec![false; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = y as usize * self.width as usize + x as usize;
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&p| p).count()
    }

    /// True when every foreground pixel of `self` is also foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryImage) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

fn check_dims(width: u32, height: u32, len: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyDimensions { width, height });
    }
    let expected = width as usize * height as usize;
    if len != expected {
        return Err(RasterError::BufferSize {
            expected,
            actual: len,
        });
    }
    Ok(())
}

/// Square `(2r+1)x(2r+1)` neighborhood. Radius 0 is the identity element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct StructuringElement {
    pub radius: u32,
}

impl StructuringElement {
    pub const fn square(radius: u32) -> Self {
        Self { radius }
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(1)
    }
}

/// Foreground iff intensity is strictly above `t`.
pub fn threshold(img: &GrayImage, t: u8) -> BinaryImage {
    BinaryImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| v > t).collect(),
    }
}

pub fn invert(mask: &BinaryImage) -> BinaryImage {
    BinaryImage {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().map(|&p| !p).collect(),
    }
}

pub fn dilate(mask: &BinaryImage, se: StructuringElement) -> BinaryImage {
    sweep(mask, se.radius, true)
}

pub fn erode(mask: &BinaryImage, se: StructuringElement) -> BinaryImage {
    sweep(mask, se.radius, false)
}

/// Dilation followed by erosion with the same element.
pub fn close(mask: &BinaryImage, se: StructuringElement) -> BinaryImage {
    erode(&dilate(mask, se), se)
}

// The square neighborhood is separable: a horizontal pass followed by a
// vertical pass. `any` selects dilation (OR over the window) versus erosion
// (AND over the window). Clipping is applied in each pass independently,
// which is equivalent to clipping the full square.
fn sweep(mask: &BinaryImage, radius: u32, any: bool) -> BinaryImage {
    if radius == 0 {
        return mask.clone();
    }
    let w = mask.width as usize;
    let h = mask.height as usize;
    let r = radius as usize;

    // prefix counts of foreground pixels make each window query O(1)
    let mut horiz = vec![false; w * h];
    let mut prefix = vec![0u32; w.max(h) + 1];
    for y in 0..h {
        let row = &mask.data[y * w..(y + 1) * w];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x] as u32;
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let fg = prefix[hi + 1] - prefix[lo];
            horiz[y * w + x] = if any { fg > 0 } else { fg as usize == hi - lo + 1 };
        }
    }

    let mut out = vec![false; w * h];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + horiz[y * w + x] as u32;
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            let fg = prefix[hi + 1] - prefix[lo];
            out[y * w + x] = if any { fg > 0 } else { fg as usize == hi - lo + 1 };
        }
    }

    BinaryImage {
        width: mask.width,
        height: mask.height,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(width: u32, height: u32, on: &[(u32, u32)]) -> BinaryImage {
        let mut m = BinaryImage::empty(width, height).unwrap();
        for &(x, y) in on {
            m.set(x, y, true);
        }
        m
    }

    // direct neighborhood scan, used to check the separable implementation
    fn brute(mask: &BinaryImage, r: i64, any: bool) -> BinaryImage {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let mut out = BinaryImage::empty(mask.width(), mask.height()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let mut hit = !any;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let v = mask.get(nx as u32, ny as u32);
                        if any && v {
                            hit = true;
                        }
                        if !any && !v {
                            hit = false;
                        }
                    }
                }
                out.set(x as u32, y as u32, hit);
            }
        }
        out
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(GrayImage::new(0, 3, vec![]).is_err());
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
        assert!(BinaryImage::new(2, 2, vec![false; 5]).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let img = GrayImage::filled(4, 4, 40).unwrap();
        assert_eq!(threshold(&img, 35).count(), 16);
        assert_eq!(threshold(&img, 40).count(), 0);

        let pair = GrayImage::new(2, 1, vec![30, 200]).unwrap();
        assert_eq!(threshold(&pair, 72).as_slice(), &[false, true]);
    }

    #[test]
    fn invert_checkerboard() {
        let m = BinaryImage::new(2, 2, vec![true, false, false, true]).unwrap();
        let inv = invert(&m);
        assert_eq!(inv.as_slice(), &[false, true, true, false]);
        assert_eq!(invert(&inv), m);
        let full = BinaryImage::new(3, 1, vec![true; 3]).unwrap();
        assert_eq!(invert(&full).count(), 0);
    }

    #[test]
    fn dilate_single_pixel() {
        let m = mask_from(5, 5, &[(2, 2)]);
        let d = dilate(&m, StructuringElement::square(1));
        assert_eq!(d.count(), 9);
        for y in 1..=3 {
            for x in 1..=3 {
                assert!(d.get(x, y));
            }
        }
        let empty = BinaryImage::empty(5, 5).unwrap();
        assert_eq!(dilate(&empty, StructuringElement::square(1)), empty);
        assert_eq!(dilate(&m, StructuringElement::square(0)), m);
    }

    #[test]
    fn erode_block_to_center() {
        let block: Vec<_> = (1..=3).flat_map(|y| (1..=3).map(move |x| (x, y))).collect();
        let m = mask_from(5, 5, &block);
        let e = erode(&m, StructuringElement::square(1));
        assert_eq!(e, mask_from(5, 5, &[(2, 2)]));

        let full = BinaryImage::new(4, 4, vec![true; 16]).unwrap();
        assert_eq!(erode(&full, StructuringElement::square(0)), full);
        // clipped border: a full mask survives erosion everywhere
        assert_eq!(erode(&full, StructuringElement::square(1)), full);

        let single = mask_from(5, 5, &[(2, 2)]);
        assert_eq!(erode(&single, StructuringElement::square(1)).count(), 0);
    }

    #[test]
    fn separable_matches_brute_force() {
        let mut state = 12345u64;
        for r in 0..4 {
            for &(w, h) in &[(1, 1), (7, 3), (9, 11), (16, 16)] {
                let data: Vec<bool> = (0..w * h)
                    .map(|_| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        (state >> 33).is_multiple_of(3)
                    })
                    .collect();
                let m = BinaryImage::new(w, h, data).unwrap();
                let se = StructuringElement::square(r);
                assert_eq!(dilate(&m, se), brute(&m, r as i64, true));
                assert_eq!(erode(&m, se), brute(&m, r as i64, false));
            }
        }
    }

    #[test]
    fn crop_window() {
        let img = GrayImage::from_fn(4, 3, |x, y| (y * 4 + x) as u8).unwrap();
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[5, 6, 9, 10]);
        assert!(img.crop(3, 0, 2, 1).is_err());
        assert!(img.crop(0, 0, 0, 1).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let img = GrayImage::from_fn(13, 7, |x, y| (x * 17 + y * 3) as u8).unwrap();
        img.save_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..2], b"P5");
        assert_eq!(GrayImage::load_pgm(&path).unwrap(), img);
    }
}
