use image::{Rgb, RgbImage};
use proptest::prelude::*;
use synthsat_core::acquisition::TimeOfDay;
use synthsat_core::composite::{
    degrade_resolution_f64, generate_clouds, mood_blend, over_into, over_layer, reduced_size, CoverageLevel,
    FloatImage, FloatLayer,
};

fn layer(px: Vec<([f64; 3], f64)>) -> FloatLayer {
    FloatLayer {
        width: px.len() as u32,
        height: 1,
        rgb: px.iter().map(|p| p.0).collect(),
        alpha: px.iter().map(|p| p.1).collect(),
    }
}

fn pixel() -> impl Strategy<Value = ([f64; 3], f64)> {
    (prop::array::uniform3(0.0f64..255.0), 0.0f64..=1.0)
}

proptest! {
    #[test]
    fn merged_layers_composite_like_sequential(
        a in prop::collection::vec(pixel(), 8),
        b in prop::collection::vec(pixel(), 8),
        base in prop::collection::vec(prop::array::uniform3(0.0f64..255.0), 8),
    ) {
        let (la, lb) = (layer(a), layer(b));
        let base = FloatImage { width: 8, height: 1, data: base };
        let mut seq = base.clone();
        over_into(&mut seq, &lb).unwrap();
        over_into(&mut seq, &la).unwrap();
        let mut merged = base;
        over_into(&mut merged, &over_layer(&la, &lb).unwrap()).unwrap();
        for (s, m) in seq.data.iter().zip(&merged.data) {
            for k in 0..3 {
                prop_assert!((s[k] - m[k]).abs() < 1e-9, "{s:?} vs {m:?}");
            }
        }
    }

    #[test]
    fn composite_stays_between_inputs(p in pixel(), base in prop::array::uniform3(0.0f64..255.0)) {
        let mut img = FloatImage { width: 1, height: 1, data: vec![base] };
        over_into(&mut img, &layer(vec![p])).unwrap();
        for k in 0..3 {
            let (lo, hi) = (base[k].min(p.0[k]), base[k].max(p.0[k]));
            prop_assert!(img.data[0][k] >= lo - 1e-9 && img.data[0][k] <= hi + 1e-9);
        }
    }

    #[test]
    fn zero_mood_weight_is_identity(vals in prop::collection::vec(any::<[u8; 3]>(), 16)) {
        let img = RgbImage::from_fn(4, 4, |x, y| Rgb(vals[(y * 4 + x) as usize]));
        for tag in TimeOfDay::ALL {
            prop_assert_eq!(&mood_blend(&img, tag, 0.0).unwrap(), &img);
        }
    }

    #[test]
    fn degradation_preserves_mean_and_shrinks(factor in 1.0f64..4.0, sigma in 0.0f64..2.0, v in 0.0f64..255.0) {
        let img = FloatImage { width: 32, height: 32, data: vec![[v, v * 0.5, 255.0 - v]; 1024] };
        let out = degrade_resolution_f64(&img, 1.0, factor, sigma).unwrap();
        let n = reduced_size(32, factor);
        prop_assert_eq!(out.dimensions(), (n, n));
        let (m0, m1) = (img.mean(), out.mean());
        for k in 0..3 {
            prop_assert!((m0[k] - m1[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn day_mood_is_neutral() {
    let img = RgbImage::from_pixel(3, 3, Rgb([10, 120, 240]));
    assert_eq!(mood_blend(&img, TimeOfDay::Day, 1.0).unwrap(), img);
    let night = mood_blend(&img, TimeOfDay::Night, 1.0).unwrap();
    assert!(night.get_pixel(0, 0)[1] < 120);
    assert!(mood_blend(&img, TimeOfDay::Night, 1.5).is_err());
}

#[test]
fn finer_target_gsd_is_rejected() {
    let img = FloatImage { width: 4, height: 4, data: vec![[0.0; 3]; 16] };
    assert!(degrade_resolution_f64(&img, 2.0, 1.0, 0.5).is_err());
    assert!(degrade_resolution_f64(&img, 2.0, 2.0, -1.0).is_err());
}

#[test]
fn clouds_are_seeded_and_ordered_by_level() {
    let a = generate_clouds(CoverageLevel::Medium, 9, 64);
    let b = generate_clouds(CoverageLevel::Medium, 9, 64);
    assert_eq!(a, b);
    assert_ne!(a.alpha, generate_clouds(CoverageLevel::Medium, 10, 64).alpha);
    let mut last = 0.0;
    for level in CoverageLevel::ALL {
        let c = generate_clouds(level, 9, 64);
        assert!(c.measured_coverage > last);
        assert!(c.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        last = c.measured_coverage;
    }
}

#[test]
fn layer_resolution_must_match() {
    let mut img = FloatImage { width: 2, height: 2, data: vec![[0.0; 3]; 4] };
    assert!(over_into(&mut img, &layer(vec![([1.0; 3], 1.0); 3])).is_err());
}
