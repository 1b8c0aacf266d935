mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use pitwear::detect::BoundingBox;
use pitwear::expert::{correct, AreaSeries, CorrectionCase, ExpertConfig};
use pitwear::raster::{self, GrayImage, StructuringElement};
use pitwear::segment::{self, Calibration, Morphology};
use pitwear::threshold::{
    otsu, predict_class, train_classifier, ThresholdClass, ThresholdDecision,
};

fn shuffled(img: &GrayImage, seed: u64) -> GrayImage {
    let mut px = img.pixels().to_vec();
    px.shuffle(&mut common::rng(seed));
    GrayImage::new(img.width(), img.height(), px).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closing_is_idempotent_and_extensive(seed: u64, w in 1u32..40, h in 1u32..40, r in 0u32..4, d in 0.0f64..1.0) {
        let m = common::random_mask(&mut common::rng(seed), w, h, d);
        let se = StructuringElement::square(r);
        let c = raster::close(&m, se);
        prop_assert!(m.is_subset_of(&c));
        prop_assert_eq!(raster::close(&c, se), c);
    }

    #[test]
    fn dilation_erosion_bracket_and_duality(seed: u64, w in 1u32..40, h in 1u32..40, r in 0u32..4, d in 0.0f64..1.0) {
        let m = common::random_mask(&mut common::rng(seed), w, h, d);
        let se = StructuringElement::square(r);
        let e = raster::erode(&m, se);
        prop_assert!(e.is_subset_of(&m));
        prop_assert!(m.is_subset_of(&raster::dilate(&m, se)));
        prop_assert_eq!(e, raster::invert(&raster::dilate(&raster::invert(&m), se)));
    }

    #[test]
    fn threshold_is_antitone(seed: u64, t1: u8, t2: u8) {
        let img = common::uniform_image(&mut common::rng(seed), 16, 12, 0, 255);
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        prop_assert!(raster::threshold(&img, hi).is_subset_of(&raster::threshold(&img, lo)));
    }

    #[test]
    fn otsu_ignores_pixel_order(seed: u64) {
        let img = common::bimodal_image(&mut common::rng(seed), 20, 15, 50.0, 150.0, 25.0);
        prop_assert_eq!(otsu(&img), otsu(&shuffled(&img, seed ^ 1)));
    }

    #[test]
    fn grown_box_contains_original(x in 0u32..100, y in 0u32..100, w in 1u32..60, h in 1u32..60, grow in 1.0f64..3.0) {
        let (bw, bh) = (160, 160);
        let b = BoundingBox::new(x, y, w, h).clip(bw, bh).unwrap();
        let g = b.grown(grow, bw, bh);
        prop_assert!(g.contains(&b));
        prop_assert!(g.right() <= bw && g.bottom() <= bh);
    }

    #[test]
    fn corrected_series_never_decreases(raw in prop::collection::vec(0.0f64..5.0, 1..40), ratio in 1.05f64..3.0) {
        let pts: Vec<(u32, f64)> = raw.iter().enumerate().map(|(i, &a)| (i as u32, a)).collect();
        let s = AreaSeries::from_areas(0, &pts).unwrap();
        let c = correct(&s, &ExpertConfig::new(ratio).unwrap()).unwrap();
        prop_assert_eq!(c.len(), raw.len());
        prop_assert!(c.points.windows(2).all(|w| w[0].area <= w[1].area));
        for k in 1..=raw.len() {
            let p = AreaSeries::from_areas(0, &pts[..k]).unwrap();
            prop_assert_eq!(correct(&p, &ExpertConfig::new(ratio).unwrap()).unwrap(), c.prefix(k));
        }
    }

    #[test]
    fn measured_area_is_translation_equivariant(seed: u64, dx in 0u32..30, dy in 0u32..30) {
        let mut rng = common::rng(seed);
        let (w, h) = (24u32, 20u32);
        let blob = GrayImage::from_fn(w, h, |x, y| {
            let inside = (4..w - 4).contains(&x) && (4..h - 4).contains(&y) && rng.random_bool(0.8);
            if inside { 20 } else { 180 }
        }).unwrap();
        let big = GrayImage::from_fn(w + 40, h + 40, |x, y| {
            let (lx, ly) = (x as i64 - 5 - dx as i64, y as i64 - 5 - dy as i64);
            if (0..w as i64).contains(&lx) && (0..h as i64).contains(&ly) {
                blob.get(lx as u32, ly as u32)
            } else {
                180
            }
        }).unwrap();
        let d = ThresholdDecision::fixed(ThresholdClass::from_value(52).unwrap());
        let m = Morphology::default();
        let cal = Calibration::default();
        prop_assert_eq!(
            segment::measure(&blob, d, m, cal).area_px,
            segment::measure(&big, d, m, cal).area_px
        );
    }

    #[test]
    fn preprocessed_mask_grows_with_threshold(seed: u64, a in 0usize..6, b in 0usize..6) {
        let img = common::blob_image(&mut common::rng(seed), 40, 40);
        let lo = ThresholdClass::from_index(a.min(b)).unwrap().value();
        let hi = ThresholdClass::from_index(a.max(b)).unwrap().value();
        let m = Morphology::default();
        prop_assert!(segment::preprocess(&img, lo, m).is_subset_of(&segment::preprocess(&img, hi, m)));
    }
}

fn training_set(seed: u64) -> Vec<(GrayImage, ThresholdClass)> {
    let mut rng = common::rng(seed);
    ThresholdClass::all()
        .flat_map(|c| {
            let center = c.value() as f64;
            (0..3)
                .map(|_| {
                    let img = common::bimodal_image(&mut rng, 24, 24, center - 15.0, center + 90.0, 6.0);
                    (img, c)
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn classifier_ignores_pixel_and_sample_order() {
    let samples = training_set(11);
    let model = train_classifier(&samples).unwrap();
    let mut reordered = samples.clone();
    reordered.reverse();
    reordered.shuffle(&mut common::rng(5));
    let other = train_classifier(&reordered).unwrap();
    for (a, b) in model.classes.iter().zip(&other.classes) {
        assert_eq!(a.value, b.value);
        assert_eq!(a.samples, b.samples);
        for (x, y) in a.centroid.iter().zip(&b.centroid) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let mut rng = common::rng(99);
    for k in 0..30u64 {
        let img = common::blob_image(&mut rng, 30, 30);
        let d = predict_class(&model, &img);
        assert_eq!(d, predict_class(&model, &shuffled(&img, k)));
        assert_eq!(d.threshold, predict_class(&other, &img).threshold);
    }
}

#[test]
fn compliant_series_pass_through() {
    let mut rng = common::rng(21);
    for _ in 0..200 {
        let mut a = rng.random_range(0.01..1.0);
        let pts: Vec<(u32, f64)> = (0..rng.random_range(1..30))
            .map(|t| {
                let v = a;
                a *= rng.random_range(1.0..1.5);
                (t, v)
            })
            .collect();
        let s = AreaSeries::from_areas(0, &pts).unwrap();
        let c = correct(&s, &ExpertConfig::default()).unwrap();
        for (p, &(t, v)) in c.points.iter().zip(&pts) {
            assert_eq!((p.t, p.area), (t, v));
            assert!(matches!(p.case, CorrectionCase::First | CorrectionCase::Accepted));
        }
    }
}
