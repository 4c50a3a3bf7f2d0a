use proptest::prelude::*;
use vstain_core::metrics::{evaluate_pairs, hist_corr, integrated_od, iod_deviation, psnr, vif, MetricsConfig};
use vstain_core::Image;

fn image(side: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(-1.0f32..=1.0, side * side * 3).prop_map(move |d| Image::new(side, side, 3, d).unwrap())
}

fn permuted(img: &Image, order: &[usize]) -> Image {
    let c = img.channels();
    let mut data = Vec::with_capacity(img.data().len());
    for &p in order {
        data.extend_from_slice(&img.data()[p * c..(p + 1) * c]);
    }
    Image::new(img.height(), img.width(), c, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_is_symmetric(a in image(6), b in image(6)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn iod_deviation_is_antisymmetric(a in image(8), b in image(8), th in 0.05f64..0.6) {
        let ab = iod_deviation(&a, &b, th).unwrap();
        let ba = iod_deviation(&b, &a, th).unwrap();
        prop_assert!(ab.is_finite());
        prop_assert_eq!(ab, -ba);
    }

    #[test]
    fn hist_corr_is_bounded_and_ignores_pixel_order(
        a in image(6),
        b in image(6),
        order in Just((0..36usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let h = hist_corr(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&h));
        prop_assert!((hist_corr(&permuted(&a, &order), &b).unwrap() - h).abs() < 1e-12);
        prop_assert!((hist_corr(&permuted(&a, &order), &permuted(&b, &order)).unwrap() - h).abs() < 1e-12);
        prop_assert!((hist_corr(&a, &permuted(&a, &order)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blank_generation_loses_all_ground_truth_density(gt in image(8)) {
        let white = Image::filled(8, 8, 3, 1.0);
        let th = MetricsConfig::default().od_threshold;
        prop_assert_eq!(iod_deviation(&white, &gt, th).unwrap(), -integrated_od(&gt, th).unwrap());
    }
}

/// Smooth 64x64 test pattern with a little texture.
fn pattern(contrast: f32) -> Image {
    Image::from_fn(64, 64, 3, |y, x, c| {
        let v = ((x as f32 * 0.3).sin() * (y as f32 * 0.2).cos() + 0.3 * ((x + 2 * y + c) as f32 * 1.7).sin()) * 0.6;
        v * contrast
    })
}

#[test]
fn vif_is_reference_first() {
    let reference = pattern(1.0);
    let flat = pattern(0.5);
    let forward = vif(&reference, &flat).unwrap();
    let backward = vif(&flat, &reference).unwrap();
    assert!(forward > 0.0 && forward < 1.0, "{forward}");
    assert!(backward > forward, "{backward} vs {forward}");
    // Reports use the ground truth as the reference.
    let report = evaluate_pairs(&[("p".into(), flat.clone(), reference.clone())], &MetricsConfig::default()).unwrap();
    assert_eq!(report.records[0].vif, forward);
    assert!((vif(&reference, &reference).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn metrics_stay_finite_on_extreme_images() {
    let cases = [Image::filled(64, 64, 3, -1.0), Image::filled(64, 64, 3, 1.0), pattern(1.0), pattern(0.0)];
    let pairs: Vec<(String, Image, Image)> = cases
        .iter()
        .enumerate()
        .flat_map(|(i, a)| cases.iter().enumerate().map(move |(j, b)| (format!("{i}-{j}"), a.clone(), b.clone())))
        .collect();
    let report = evaluate_pairs(&pairs, &MetricsConfig::default()).unwrap();
    assert_eq!(report.failures(), 0);
    for r in &report.records {
        assert!(r.psnr.is_finite() && r.vif.is_finite() && r.hist.is_finite() && r.iod_dev.is_finite(), "{r:?}");
    }
}
