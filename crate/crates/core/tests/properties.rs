use arconv::arconv::select_from_means;
use arconv::metrics::{ergas, hqnr, sam};
use arconv::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn image(values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(Shape::new(1, 4, 4, 4), values.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn hqnr_is_symmetric(a in 0.0..1.0f64, b in 0.0..1.0f64) {
        prop_assert_eq!(hqnr(a, b), hqnr(b, a));
    }

    #[test]
    fn hqnr_decreases_in_each_argument(a in 0.0..1.0f64, b in 0.0..1.0f64, d in 1e-6..0.5f64) {
        let a2 = (a + d).min(1.0);
        prop_assert!(hqnr(a2, b) <= hqnr(a, b));
        prop_assert!(hqnr(b, a2) <= hqnr(b, a));
    }

    #[test]
    fn selected_points_are_odd_and_bounded(h in 1.0..63.0f64, w in 1.0..63.0f64, n in 0.5..8.0f64, m in 0.5..8.0f64) {
        let s = select_from_means(h, w, n, m, 7).unwrap();
        for k in [s.kh, s.kw] {
            prop_assert!(k % 2 == 1 && (1..=7).contains(&k));
        }
    }

    #[test]
    fn sam_ignores_per_pixel_positive_scaling(
        gt in prop::collection::vec(0.05..1.0f64, 64),
        scale in prop::collection::vec(0.1..10.0f64, 16),
    ) {
        let g = image(&gt);
        let f = Tensor::from_fn(g.shape(), |n, c, y, x| g.at(n, c, y, x) * scale[y * 4 + x]);
        prop_assert!(sam(&f, &g).unwrap() < 1e-5);
        prop_assert_eq!(sam(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn ergas_is_zero_only_for_equal_images(
        gt in prop::collection::vec(0.05..1.0f64, 64),
        i in 0usize..64,
        d in 1e-3..0.5f64,
    ) {
        let g = image(&gt);
        prop_assert_eq!(ergas(&g, &g, 4.0).unwrap(), 0.0);
        let mut f = g.clone();
        f.data_mut()[i] += d;
        prop_assert!(ergas(&f, &g, 4.0).unwrap() > 0.0);
    }
}
