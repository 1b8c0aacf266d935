mod common;

use common::{ols_line, otsu_oracle};
use pitwear::expert::Measurement;
use pitwear::forecast::{
    aggregate_loss, fit, predict_crossing, prefix_errors, select_model, CandidateKind, LossConfig,
};
use pitwear::raster::GrayImage;
use pitwear::threshold::otsu;

fn series(ts: impl Iterator<Item = u32>, f: impl Fn(f64) -> f64) -> Vec<Measurement> {
    ts.map(|t| Measurement::new(t, f(t as f64))).collect()
}

#[test]
fn otsu_matches_rational_oracle_on_small_images() {
    let mut rng = common::rng(7);
    for _ in 0..40 {
        let img = common::bimodal_image(&mut rng, 24, 17, 40.0, 170.0, 20.0);
        assert_eq!(otsu(&img).threshold, otsu_oracle(&img));
        let img = common::uniform_image(&mut rng, 9, 9, 0, 255);
        assert_eq!(otsu(&img).threshold, otsu_oracle(&img));
    }
}

#[test]
fn otsu_two_levels_and_constant() {
    let img = GrayImage::from_fn(10, 10, |x, _| if x < 3 { 20 } else { 200 }).unwrap();
    assert_eq!(otsu_oracle(&img), 20);
    assert_eq!(otsu(&img).threshold, 20);
    assert!(!otsu(&img).degenerate);

    let flat = GrayImage::filled(8, 8, 50).unwrap();
    assert_eq!(otsu_oracle(&flat), 50);
    let d = otsu(&flat);
    assert_eq!(d.threshold, 50);
    assert!(d.degenerate);
}

#[test]
fn linear_fit_matches_normal_equations() {
    let mut rng = common::rng(3);
    for _ in 0..20 {
        use rand::Rng;
        let pts: Vec<Measurement> = (0..9)
            .map(|t| Measurement::new(t * 2 + 1, rng.random_range(0.0..1.0)))
            .collect();
        let ts: Vec<f64> = pts.iter().map(|m| m.t as f64).collect();
        let ys: Vec<f64> = pts.iter().map(|m| m.area).collect();
        let (c0, c1) = ols_line(&ts, &ys);
        let f = fit(CandidateKind::Linear, &pts).unwrap();
        assert!((f.coefficients[0] - c0).abs() < 1e-10);
        assert!((f.coefficients[1] - c1).abs() < 1e-10);
    }
}

#[test]
fn exact_curves_are_recovered() {
    let quad = series(0..8, |t| 0.05 + 0.01 * t + 0.002 * t * t);
    let f = fit(CandidateKind::Poly2, &quad).unwrap();
    for (c, e) in f.coefficients.iter().zip([0.05, 0.01, 0.002]) {
        assert!((c - e).abs() < 1e-10, "{:?}", f.coefficients);
    }
    let exp = series(1..9, |t| 0.02 * (0.3 * t).exp());
    let f = fit(CandidateKind::Exponential, &exp).unwrap();
    assert!((f.coefficients[0] - 0.02).abs() < 1e-12);
    assert!((f.coefficients[1] - 0.3).abs() < 1e-12);
}

// Five points leave a single prefix (beta = 4) scored on one point at j = 1.
#[test]
fn single_prefix_loss_by_hand() {
    let pts = vec![
        Measurement::new(0, 0.10),
        Measurement::new(1, 0.13),
        Measurement::new(2, 0.15),
        Measurement::new(3, 0.19),
        Measurement::new(4, 0.30),
    ];
    let (c0, c1) = ols_line(&[0.0, 1.0, 2.0, 3.0], &[0.10, 0.13, 0.15, 0.19]);
    let pred = c0 + c1 * 4.0;
    let f1 = (-0.15f64 * 9.0).exp();
    let expected = (f1 * (pred - 0.30).powi(2)).sqrt() / 4.0;
    let cfg = LossConfig::default();
    let got = aggregate_loss(CandidateKind::Linear, &pts, &cfg).unwrap();
    assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
}

// Two prefixes with a horizon of one: each scores only the next point.
#[test]
fn horizon_truncates_window() {
    let pts = series(0..6, |t| 0.1 + 0.02 * t + if t as u32 == 4 { 0.05 } else { 0.0 });
    let cfg = LossConfig {
        horizon: Some(1),
        ..LossConfig::default()
    };
    let terms = prefix_errors(CandidateKind::Linear, &pts, &cfg).unwrap();
    assert_eq!(terms.len(), 2);
    let f1 = (-0.15f64 * 9.0).exp().sqrt();
    // beta = 4: exact line predicts 0.18 at t=4, truth 0.23
    assert!((terms[0].1 - f1 * 0.05).abs() < 1e-12);
    let ts = [0.0, 1.0, 2.0, 3.0, 4.0];
    let ys: Vec<f64> = pts[..5].iter().map(|m| m.area).collect();
    let (c0, c1) = ols_line(&ts, &ys);
    assert!((terms[1].1 - f1 * (c0 + 5.0 * c1 - pts[5].area).abs()).abs() < 1e-12);
}

#[test]
fn linear_crossing_closed_form() {
    let f = fit(CandidateKind::Linear, &series(1..13, |t| 0.03 * t)).unwrap();
    let c = predict_crossing(&f, 0.9, 0.2);
    // 0.72 / 0.03, 0.9 / 0.03, 1.08 / 0.03
    for (got, want) in [(c.t_low, 24.0), (c.t_star, 30.0), (c.t_high, 36.0)] {
        assert!((got.unwrap() - want).abs() < 1e-5, "{got:?} vs {want}");
    }
}

#[test]
fn generating_class_is_selected_on_exact_data() {
    let cfg = LossConfig::default();
    let lin = series(0..10, |t| 0.1 + 0.03 * t);
    assert_eq!(select_model(&lin, &cfg).unwrap().selected, CandidateKind::Linear);
    let exp = series(0..10, |t| 0.05 * (0.25 * t).exp());
    assert_eq!(select_model(&exp, &cfg).unwrap().selected, CandidateKind::Exponential);
}
