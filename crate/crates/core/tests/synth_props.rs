use proptest::prelude::*;
use sdan_core::model::misaligned_l1;
use sdan_core::synth::{
    bayer_mosaic, bayer_pack, bayer_unpack, generate_pairs, load_sources, procedural_source, synth_pair, DataMode,
    GenConfig,
};
use sdan_core::Shape;

fn cfg(scale: usize, crop_lr: usize, shift_max: usize, mode: DataMode) -> GenConfig {
    GenConfig {
        synthetic_sources: 1,
        scale,
        crop_lr,
        shift_max,
        count: 4,
        mode,
        ..GenConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pairs_close_the_loop(
        scale in prop_oneof![Just(1usize), Just(2usize), Just(4usize)],
        dy in -3i32..4, dx in -3i32..4, fy in 0.0f64..1.0, fx in 0.0f64..1.0,
        fractional in any::<bool>(), seed in any::<u64>()
    ) {
        let c = cfg(scale, 10, 4, DataMode::Rgb);
        // the same side length load_sources uses
        let src = procedural_source(c.min_source_size().max(256), seed);
        let shift = if fractional { (dy as f64 + fy * 0.9, dx as f64 - fx * 0.9) } else { (dy as f64, dx as f64) };
        let origin = (4 * scale, 4 * scale);
        let p = synth_pair(&src, shift, &c, origin, "p").unwrap();
        prop_assert_eq!(p.hr.shape(), Shape::new(1, 3, 10 * scale, 10 * scale));
        prop_assert_eq!(p.lr.shape(), Shape::new(1, 3, 10, 10));
        let err = misaligned_l1(&p.lr, &p.yref, shift).unwrap();
        let tol = if fractional { 1e-3 } else { 1e-6 };
        prop_assert!(err <= tol, "shift {:?}: {}", shift, err);
    }

    #[test]
    fn raw_packing_matches_the_sampled_mosaic(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let src = procedural_source(2 * h.max(w), seed);
        let rgb = sdan_core::Tensor::from_fn(Shape::new(1, 3, 2 * h, 2 * w), |n, c, y, x| src.at(n, c, y, x));
        let packed = bayer_pack(&rgb).unwrap();
        prop_assert_eq!(packed.shape(), Shape::new(1, 4, h, w));
        prop_assert_eq!(bayer_unpack(&packed).unwrap(), bayer_mosaic(&rgb).unwrap());
    }

    #[test]
    fn generation_is_a_pure_function(seed in any::<u64>(), raw in any::<bool>(), fractional in any::<bool>()) {
        let c = GenConfig {
            seed,
            fractional,
            ..cfg(2, 8, 2, if raw { DataMode::Raw } else { DataMode::Rgb })
        };
        let sources = load_sources(&c).unwrap().0;
        let a = generate_pairs(&c, &sources).unwrap();
        let b = generate_pairs(&c, &load_sources(&c).unwrap().0).unwrap();
        prop_assert_eq!(&a, &b);
        for p in &a {
            let factor = if raw { 4 } else { 2 };
            prop_assert_eq!(p.hr.shape().h, factor * p.lr.shape().h);
            prop_assert_eq!(p.hr.shape().w, factor * p.lr.shape().w);
        }
    }
}
