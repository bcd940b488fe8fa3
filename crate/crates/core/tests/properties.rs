use mixadc::airlink::{apply_masks, hard_sign_array, SelectionMasks};
use mixadc::channel::{real_stack, stack_rows};
use mixadc::config::ExperimentConfig;
use mixadc::pdnet::normalize_power;
use mixadc::selnet::{khot_certificate, khot_residuals, top_k, Certificate, SelectionState};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;

fn complex_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<Complex64>> {
    prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), rows * cols).prop_map(move |v| {
        Array2::from_shape_vec(
            (rows, cols),
            v.into_iter().map(|(re, im)| Complex64::new(re, im)).collect(),
        )
        .unwrap()
    })
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..7, 1usize..4, 1usize..7)
}

proptest! {
    #[test]
    fn real_stacking_preserves_products(
        (h, x) in dims().prop_flat_map(|(m, k, n)| (complex_matrix(m, k), complex_matrix(k, n)))
    ) {
        let (ht, target) = real_stack(h.view());
        let lhs = ht.dot(&stack_rows(x.view()));
        let rhs = stack_rows(h.dot(&x).view());
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let k = h.ncols();
        prop_assert_eq!(target, ht.slice(ndarray::s![.., ..k]).to_owned());
    }

    #[test]
    fn normalized_pilot_has_fixed_energy(
        raw in prop::collection::vec(-5.0..5.0f64, 24),
        rho in 0.1..10.0f64,
    ) {
        prop_assume!(raw.iter().any(|v| v.abs() > 1e-6));
        let raw = Array2::from_shape_vec((4, 6), raw).unwrap();
        let p = normalize_power(&raw, rho).unwrap();
        let energy: f64 = p.iter().map(|v| v * v).sum();
        prop_assert!((energy - 6.0 * rho).abs() <= 1e-10 * 6.0 * rho);
    }

    #[test]
    fn masks_split_every_antenna_exactly_once(
        (m, set_a, z) in (1usize..10).prop_flat_map(|m| (
            Just(m),
            prop::sample::subsequence((0..m).collect::<Vec<_>>(), 0..=m),
            prop::collection::vec(-2.0..2.0f64, 2 * m * 3),
        ))
    ) {
        let masks = SelectionMasks::from_set_a(m, &set_a).unwrap();
        prop_assert_eq!(masks.a().sum() as usize, set_a.len());
        prop_assert_eq!(masks.m_a(), set_a.len());
        for (a, b) in masks.a().iter().zip(masks.b().iter()) {
            prop_assert_eq!(a + b, 1.0);
        }
        let z = Array3::from_shape_vec((1, 2 * m, 3), z).unwrap();
        let (ya, yb) = apply_masks(z.view(), hard_sign_array(&z).view(), &masks);
        prop_assert!(ya.iter().zip(yb.iter()).all(|(a, b)| a * b == 0.0));
        prop_assert!(yb.iter().all(|&v| v == 0.0 || v.abs() == 1.0));
    }

    #[test]
    fn selection_is_invariant_to_logit_shift(
        v in prop::collection::vec(-4.0..4.0f64, 2..12),
        shift in -50.0..50.0f64,
        frac in 0.0..1.0f64,
    ) {
        let m = v.len();
        let m_a = 1 + ((m - 1) as f64 * frac) as usize;
        let s0 = SelectionState::from_logits(&v, m_a).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let s1 = SelectionState::from_logits(&shifted, m_a).unwrap();
        prop_assert_eq!(&s0.masks, &s1.masks);
        prop_assert!((s0.u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((s0.u_tilde.iter().sum::<f64>() - m_a as f64).abs() < 1e-12);
        prop_assert_eq!(s0.masks.m_a(), m_a);
    }

    #[test]
    fn top_k_picks_the_largest_entries(u in prop::collection::vec(0.0..1.0f64, 1..12), frac in 0.0..1.0f64) {
        let k = (u.len() as f64 * frac) as usize;
        let idx = top_k(&u, k);
        prop_assert_eq!(idx.len(), k);
        let chosen_min = idx.iter().map(|&i| u[i]).fold(f64::INFINITY, f64::min);
        for (i, &x) in u.iter().enumerate() {
            if !idx.contains(&i) {
                prop_assert!(x <= chosen_min);
            }
        }
    }

    #[test]
    fn khot_vectors_certify_and_have_zero_residuals(
        (m, ones) in (1usize..9).prop_flat_map(|m| (
            Just(m),
            prop::sample::subsequence((0..m).collect::<Vec<_>>(), 1..=m),
        ))
    ) {
        let mut x = vec![0.0; m];
        for &i in &ones {
            x[i] = 1.0;
        }
        let (r2, r3) = khot_residuals(&x, ones.len());
        prop_assert_eq!((r2, r3), (0.0, 0.0));
        let c = khot_certificate(&x, ones.len(), 1.0, 2.0, 3.0, 1e-12).unwrap();
        prop_assert_eq!(c, Certificate::KHot { max_gap: 0.0 });
    }

    #[test]
    fn gamma3_schedule_is_monotone_and_capped(a in 0usize..300, b in 0usize..300) {
        let c = ExperimentConfig::desk_scale();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(c.gamma3(lo) <= c.gamma3(hi));
        prop_assert!(c.gamma3(hi) <= c.gamma3_max);
    }
}
