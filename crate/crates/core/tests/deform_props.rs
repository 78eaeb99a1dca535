use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdan_core::{
    conv2d, deform_conv_backward, deform_conv_forward, validity_mask, ConvParams, OffsetField, OffsetMode, Shape, Tensor,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_offsets_reduce_to_plain_conv(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4, h in 2usize..8, w in 2usize..8, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let f = Tensor::<f64>::random_uniform(Shape::new(n, cin, h, w), -1.0, 1.0, &mut r);
        let p = ConvParams::fan_in_uniform(cin, cout, 3, &mut r);
        let plain = conv2d(&f, &p).unwrap();
        for mode in [OffsetMode::Squared, OffsetMode::PerPoint] {
            let out = deform_conv_forward(&f, &OffsetField::zeros(mode, n, h, w, 3), &p).unwrap();
            prop_assert!(out.max_abs_diff(&plain).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn shared_per_point_offsets_match_squared(
        n in 1usize..3, cin in 1usize..3, cout in 1usize..3, h in 2usize..7, w in 2usize..7, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let f = Tensor::<f64>::random_uniform(Shape::new(n, cin, h, w), -1.0, 1.0, &mut r);
        let p = ConvParams::fan_in_uniform(cin, cout, 3, &mut r);
        let sq = OffsetField::new(
            OffsetMode::Squared,
            Tensor::random_uniform(Shape::new(n, 2, h, w), -2.5, 2.5, &mut r),
        ).unwrap();
        let pp = sq.broadcast_to_taps(3).unwrap();
        let a = deform_conv_forward(&f, &sq, &p).unwrap();
        let b = deform_conv_forward(&f, &pp, &p).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);

        let g = Tensor::random_uniform(a.shape(), -1.0, 1.0, &mut r);
        let ga = deform_conv_backward(&f, &sq, &p, &g).unwrap();
        let gb = deform_conv_backward(&f, &pp, &p, &g).unwrap();
        let summed = OffsetField::new(OffsetMode::PerPoint, gb.offsets).unwrap().sum_over_taps();
        prop_assert!(summed.max_abs_diff(&ga.offsets).unwrap() <= 1e-6);
        prop_assert!(ga.feature.max_abs_diff(&gb.feature).unwrap() <= 1e-6);
        prop_assert!(ga.weight.max_abs_diff(&gb.weight).unwrap() <= 1e-6);
    }

    #[test]
    fn integer_offset_is_a_zero_padded_shift(
        c in 1usize..3, h in 1usize..8, w in 1usize..8, dy in -4i32..5, dx in -4i32..5, seed in any::<u64>()
    ) {
        let f = Tensor::<f32>::random_uniform(Shape::new(1, c, h, w), -1.0, 1.0, &mut rng(seed));
        let off = OffsetField::constant(1, h, w, dy as f32, dx as f32);
        let out = deform_conv_forward(&f, &off, &ConvParams::identity(c, 3)).unwrap();
        let mask = validity_mask(&off, h, w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as i32 + dy, x as i32 + dx);
                let inside = sy >= 0 && sy < h as i32 && sx >= 0 && sx < w as i32;
                prop_assert_eq!(mask.data.at(0, 0, y, x), if inside { 1.0 } else { 0.0 });
                for ch in 0..c {
                    let expect = if inside { f.at(0, ch, sy as usize, sx as usize) } else { 0.0 };
                    prop_assert_eq!(out.at(0, ch, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn masks_are_binary_and_shrink_as_offsets_grow(
        n in 1usize..3, h in 1usize..9, w in 1usize..9, grow in 1.0f64..4.0, per_point in any::<bool>(), seed in any::<u64>()
    ) {
        let mode = if per_point { OffsetMode::PerPoint } else { OffsetMode::Squared };
        let data = Tensor::<f64>::random_uniform(Shape::new(n, mode.channels(3), h, w), -6.0, 6.0, &mut rng(seed));
        let small = OffsetField::new(mode, data.clone()).unwrap();
        let large = OffsetField::new(mode, data.map(|v| v * grow)).unwrap();
        let (ms, ml) = (validity_mask(&small, h, w), validity_mask(&large, h, w));
        prop_assert!(ms.is_binary() && ml.is_binary());
        for (a, b) in ms.data.data().iter().zip(ml.data.data()) {
            prop_assert!(!(*a == 0.0 && *b == 1.0));
        }
    }
}
