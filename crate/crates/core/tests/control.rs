mod common;

use image::{GrayImage, Luma, RgbImage};
use proptest::prelude::*;
use synthsat_core::acquisition::{resolve_pose, sun_for_time, AcquisitionParams, TimeOfDay};
use synthsat_core::control::{
    canny_edges, color_block_map, depth_to_control, sketch_map, to_gray, ControlBundle, ExtractorParams,
};
use synthsat_core::raster::DepthMap;
use synthsat_core::render::{build_geometry, render};
use synthsat_core::scene::{generate_layout, reference_counts, GridSpec};
use synthsat_core::vec3::Vec3;

fn default_render(px: u32) -> synthsat_core::render::RenderOutput {
    let grid = GridSpec::new(8, 8, 30.0).unwrap();
    let layout = generate_layout(grid, &reference_counts(), 11).unwrap();
    let params = AcquisitionParams { altitude_m: 5e5, off_nadir_deg: 15.0, azimuth_deg: 120.0, fov_deg: 0.03, image_px: px };
    let pose = resolve_pose(&params, Vec3::new(120.0, 120.0, 0.0)).unwrap();
    render(&build_geometry(&layout), &pose, &sun_for_time(TimeOfDay::Day), px).unwrap()
}

fn edges(img: &GrayImage) -> usize {
    img.pixels().filter(|p| p[0] == 255).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn depth8_spans_full_range(vals in prop::collection::vec(1.0f64..1e6, 4..64)) {
        let w = vals.len() as u32;
        let d = DepthMap::from_vec(w, 1, vals.clone()).unwrap();
        let g = depth_to_control(&d).unwrap();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (x, v) in vals.iter().enumerate() {
            let p = g.get_pixel(x as u32, 0)[0];
            if hi > lo {
                let expect = (255.0 * (hi - v) / (hi - lo)).round() as u8;
                prop_assert_eq!(p, expect);
            } else {
                prop_assert_eq!(p, 255);
            }
        }
    }

    #[test]
    fn canny_matches_reference(seed: u64, lo in 10u64..60, span in 10u64..80) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let img = GrayImage::from_fn(20, 17, |_, _| Luma([rand::Rng::random_range(&mut rng, 0..=255u8)]));
        let hi = lo + span;
        let got = canny_edges(&img, lo as f64, hi as f64).unwrap();
        let want = common::reference_canny(&img, lo, hi);
        for (p, w) in got.pixels().zip(want) {
            prop_assert_eq!(p[0] == 255, w);
        }
    }

    #[test]
    fn maps_are_binary_and_sized(seed: u64, px in 8u32..40) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let rgb = RgbImage::from_fn(px, px, |_, _| image::Rgb(rand::Rng::random(&mut rng)));
        let s = sketch_map(&rgb);
        prop_assert_eq!(s.dimensions(), (px, px));
        prop_assert!(s.pixels().all(|p| p[0] == 0 || p[0] == 255));
        let c = canny_edges(&to_gray(&rgb), 50.0, 150.0).unwrap();
        prop_assert!(c.pixels().all(|p| p[0] == 0 || p[0] == 255));
        let blocks = color_block_map(&rgb, 4).unwrap();
        prop_assert_eq!(blocks.dimensions(), (px, px));
    }

    #[test]
    fn color_blocks_are_flat(seed: u64, block in 1u32..9) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let rgb = RgbImage::from_fn(24, 24, |_, _| image::Rgb(rand::Rng::random(&mut rng)));
        let m = color_block_map(&rgb, block).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                let origin = m.get_pixel(x - x % block, y - y % block);
                prop_assert_eq!(m.get_pixel(x, y), origin);
            }
        }
    }
}

#[test]
fn constant_depth_is_white() {
    let g = depth_to_control(&DepthMap::filled(5, 5, 42.0)).unwrap();
    assert!(g.pixels().all(|p| p[0] == 255));
}

#[test]
fn invalid_depth_is_rejected() {
    assert!(depth_to_control(&DepthMap::filled(2, 2, 0.0)).is_err());
    assert!(depth_to_control(&DepthMap::filled(2, 2, f64::NAN)).is_err());
}

#[test]
fn uniform_image_has_no_edges() {
    assert_eq!(edges(&canny_edges(&GrayImage::from_pixel(16, 16, Luma([90])), 50.0, 150.0).unwrap()), 0);
}

#[test]
fn sketch_is_sparser_than_canny_on_default_scene() {
    let r = default_render(128);
    let b = ControlBundle::from_render(&r, &ExtractorParams::default()).unwrap();
    let (c, s) = (edges(&b.canny), edges(&b.sketch));
    assert!(c > 0, "scene produced no canny edges");
    assert!(s > 0 && s <= c, "sketch {s} edges vs canny {c}");
    assert!(b.sketch.pixels().zip(b.canny.pixels()).all(|(s, c)| s[0] <= c[0]));
}

#[test]
fn bundle_maps_share_resolution() {
    let r = default_render(64);
    let mut p = ExtractorParams::default();
    p.extract_px = Some(32);
    let b = ControlBundle::from_render(&r, &p).unwrap();
    assert_eq!(b.resolution(), (32, 32));
    for d in [b.depth8.dimensions(), b.sketch.dimensions(), b.color_blocks.dimensions()] {
        assert_eq!(d, (32, 32));
    }
}
