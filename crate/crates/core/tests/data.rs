//! Image and mask I/O, composition and mask-generation properties.

use inpaint_core::imaging::{colormap_image, load_image, load_mask, save_image, save_mask};
use inpaint_core::maskgen::{augment_mask, dilate, generate_stroke_mask, CropRect};
use inpaint_core::*;
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = ImageTensor> {
    (1usize..9, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(n, c)| {
        prop::collection::vec(0u8..=255, n * n * c)
            .prop_map(move |b| ImageTensor::from_u8_interleaved(n, n, c, &b).unwrap())
    })
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = MaskTensor> {
    prop::collection::vec(0u8..=1, h * w).prop_map(move |d| MaskTensor::new(h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eight_bit_images_survive_a_png_round_trip(img in image_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        // Same size, so the bilinear resize is the identity.
        let loaded = load_image(&path, img.height()).unwrap();
        prop_assert_eq!(loaded.channels(), img.channels());
        prop_assert_eq!(loaded.to_u8_interleaved(), img.to_u8_interleaved());
    }

    #[test]
    fn masks_survive_a_png_round_trip(m in mask_strategy(7, 7)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_mask(&m, &path).unwrap();
        prop_assert_eq!(load_mask(&path, 7).unwrap(), m);
    }

    #[test]
    fn compose_then_composite_restores_valid_pixels(
        m in mask_strategy(5, 5),
        data in prop::collection::vec(0.0..1.0f64, 75),
        gen in prop::collection::vec(0.0..1.0f64, 75),
    ) {
        let gt = ImageTensor::new(Tensor::from_vec(3, 5, 5, data).unwrap()).unwrap();
        let out = ImageTensor::new(Tensor::from_vec(3, 5, 5, gen).unwrap()).unwrap();
        let i_in = compose_input(&gt, &m).unwrap();
        let comp = composite_output(&out, &gt, &m).unwrap();
        for c in 0..3 {
            for (i, &hole) in m.data().iter().enumerate() {
                let k = c * 25 + i;
                if hole == 1 {
                    prop_assert_eq!(i_in.data()[k], 1.0);
                    prop_assert_eq!(comp.data()[k], out.data()[k]);
                } else {
                    prop_assert_eq!(i_in.data()[k], gt.data()[k]);
                    prop_assert_eq!(comp.data()[k], gt.data()[k]);
                }
            }
        }
        // Composite of the ground truth with itself is the ground truth.
        prop_assert_eq!(composite_output(&gt, &gt, &m).unwrap(), gt);
    }

    #[test]
    fn buckets_partition_their_range(r in 0.0..=1.0f64) {
        let hits = RATIO_BUCKETS.iter().filter(|b| b.contains(r)).count();
        prop_assert!(hits <= 1);
        prop_assert_eq!(hits == 1, r > 0.01 && r <= 0.6);
        prop_assert_eq!(bucket_of(r).unwrap().is_some(), hits == 1);
    }

    #[test]
    fn stroke_masks_are_deterministic_and_binary(seed in 0u64..500, size in 8usize..40) {
        let cfg = MaskGenConfig::for_size(size, seed);
        let a = generate_stroke_mask(&cfg).unwrap();
        prop_assert_eq!(&a, &generate_stroke_mask(&cfg).unwrap());
        prop_assert_eq!((a.height(), a.width()), (size, size));
        prop_assert!(a.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn dilation_only_adds_holes(m in mask_strategy(9, 9), radius in 0usize..3) {
        let d = dilate(&m, radius);
        prop_assert!(m.data().iter().zip(d.data()).all(|(&a, &b)| b >= a));
        prop_assert!(mask_ratio(&d) >= mask_ratio(&m));
    }

    #[test]
    fn augmentation_keeps_size_and_binarity(m in mask_strategy(12, 12), deg in 0.0..360.0f64, side in 6usize..=12) {
        let crop = CropRect { top: 12 - side, left: 0, height: side, width: side };
        let a = augment_mask(&m, deg, 1, crop).unwrap();
        prop_assert_eq!((a.height(), a.width()), (12, 12));
        prop_assert!(a.data().iter().all(|&v| v <= 1));
    }
}

#[test]
fn zero_valuation_renders_uniform_blue() {
    let img = colormap_image(&ValuationMap::filled(4, 6, 0.0).unwrap());
    assert_eq!((img.width(), img.height()), (6, 4));
    assert!(img.pixels().all(|p| p.0 == [0, 0, 255]));
}

#[test]
fn border_constrained_masks_leave_the_margin_empty() {
    for seed in 0..20 {
        let mut cfg = MaskGenConfig::for_size(64, seed);
        cfg.border_constrained = true;
        let m = generate_stroke_mask(&cfg).unwrap();
        let k = cfg.margin();
        for y in 0..64 {
            for x in 0..64 {
                if y < k || x < k || y >= 64 - k || x >= 64 - k {
                    assert_eq!(m.get(y, x), 0, "seed {seed} ({y}, {x})");
                }
            }
        }
    }
}
