#![allow(dead_code)]

use num::{BigInt, BigRational, Zero};
use pitwear::raster::{BinaryImage, GrayImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exhaustive between-class-variance maximizer in exact rational arithmetic.
/// Classes are `{v <= t}` and `{v > t}`; the smallest maximizer wins and an
/// image without any valid split returns its first pixel.
pub fn otsu_oracle(img: &GrayImage) -> u8 {
    let px = img.pixels();
    let mut hist = [0u64; 256];
    for &v in px {
        hist[v as usize] += 1;
    }
    let r = |x: u64| BigRational::from_integer(BigInt::from(x));
    let n = r(px.len() as u64);
    let mut best: Option<(u8, BigRational)> = None;
    for t in 0..=255u8 {
        let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
        for (v, &c) in hist.iter().enumerate() {
            if v <= t as usize {
                n0 += c;
                s0 += v as u64 * c;
            } else {
                n1 += c;
                s1 += v as u64 * c;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let w0 = r(n0) / &n;
        let w1 = r(n1) / &n;
        let d = r(s0) / r(n0) - r(s1) / r(n1);
        let var = w0 * w1 * &d * &d;
        if best.as_ref().is_none_or(|(_, b)| var > *b) {
            best = Some((t, var));
        }
    }
    match best {
        Some((t, v)) if !v.is_zero() => t,
        _ => px[0],
    }
}

pub fn uniform_image(rng: &mut impl Rng, w: u32, h: u32, lo: u8, hi: u8) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.random_range(lo..=hi)).unwrap()
}

/// Two Gaussian intensity modes with a random mixing weight.
pub fn bimodal_image(rng: &mut impl Rng, w: u32, h: u32, m0: f64, m1: f64, sigma: f64) -> GrayImage {
    let p: f64 = rng.random_range(0.1..0.9);
    let a = Normal::new(m0, sigma).unwrap();
    let b = Normal::new(m1, sigma).unwrap();
    GrayImage::from_fn(w, h, |_, _| {
        let v = if rng.random_bool(p) { a.sample(rng) } else { b.sample(rng) };
        v.round().clamp(0.0, 255.0) as u8
    })
    .unwrap()
}

/// Dark disc on a noisy background.
pub fn blob_image(rng: &mut impl Rng, w: u32, h: u32) -> GrayImage {
    let cx = rng.random_range(0.0..w as f64);
    let cy = rng.random_range(0.0..h as f64);
    let r = rng.random_range(5.0..w as f64 / 2.0);
    let bg: f64 = rng.random_range(100.0..220.0);
    let fg: f64 = rng.random_range(0.0..90.0);
    let noise = Normal::new(0.0, rng.random_range(0.0..25.0)).unwrap();
    GrayImage::from_fn(w, h, |x, y| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let base = if d <= r { fg } else { bg };
        (base + noise.sample(rng)).round().clamp(0.0, 255.0) as u8
    })
    .unwrap()
}

pub fn random_mask(rng: &mut impl Rng, w: u32, h: u32, density: f64) -> BinaryImage {
    let mut m = BinaryImage::empty(w, h).unwrap();
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(density) {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// Ordinary least squares line through `(t, y)` by the normal equations.
pub fn ols_line(ts: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = ts.len() as f64;
    let st: f64 = ts.iter().sum();
    let sy: f64 = ys.iter().sum();
    let stt: f64 = ts.iter().map(|t| t * t).sum();
    let sty: f64 = ts.iter().zip(ys).map(|(t, y)| t * y).sum();
    let slope = (n * sty - st * sy) / (n * stt - st * st);
    ((sy - slope * st) / n, slope)
}
