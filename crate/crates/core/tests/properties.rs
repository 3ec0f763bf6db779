use proptest::prelude::*;

use tmamba::metrics::{metric_en, metric_qabf, metric_sd, metric_sf, mutual_information, Gray8};
use tmamba::{Graph, Tensor};

fn image(h: usize, w: usize, levels: u32) -> impl Strategy<Value = Gray8> {
    prop::collection::vec(0..levels, h * w)
        .prop_map(move |v| Gray8::new(h, w, v.into_iter().map(|x| x as u8).collect()).unwrap())
}

fn triple() -> impl Strategy<Value = (Gray8, Gray8, Gray8)> {
    (3usize..20, 3usize..20, 1u32..=256)
        .prop_flat_map(|(h, w, l)| (image(h, w, l), image(h, w, l), image(h, w, l)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        amp in 0.1f64..200.0,
    ) {
        let mut s = seed;
        let t = Tensor::from_fn(&[rows, cols], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            amp * ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        });
        let g = Graph::new();
        let y = g.softmax(g.constant(t), 1).unwrap();
        let y = g.value(y);
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn qabf_is_bounded((f, a, b) in triple()) {
        let q = metric_qabf(&f, &a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&q), "{q}");
    }

    #[test]
    fn mutual_information_is_bounded_by_entropy((f, a, _) in triple()) {
        let mi = mutual_information(&f, &a).unwrap();
        prop_assert!(mi >= -1e-12);
        prop_assert!(mi <= metric_en(&f).min(metric_en(&a)) + 1e-9);
        prop_assert!((mi - mutual_information(&a, &f).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn entropy_and_spread_ignore_pixel_order(
        img in (2usize..16, 2usize..16).prop_flat_map(|(h, w)| image(h, w, 256)),
        perm_seed in any::<u64>(),
    ) {
        let mut d = img.data().to_vec();
        let mut s = perm_seed | 1;
        for i in (1..d.len()).rev() {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            d.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let p = Gray8::new(img.height(), img.width(), d).unwrap();
        prop_assert_eq!(metric_en(&p), metric_en(&img));
        prop_assert!((metric_sd(&p) - metric_sd(&img)).abs() < 1e-9);
        prop_assert!(metric_sf(&p) >= 0.0);
    }

    #[test]
    fn quantize_round_trips_8bit_images(img in (1usize..10, 1usize..10).prop_flat_map(|(h, w)| image(h, w, 256))) {
        prop_assert_eq!(Gray8::quantize(&img.to_tensor()).unwrap(), img);
    }
}
