use nlperim::energy::{interaction_double_loop, interaction_fft, k_perimeter_total, submodularity_defect, whole_space_perimeter};
use nlperim::flow::{diffuse, PeriodicStencil};
use nlperim::grid::{from_pbm, to_pbm};
use nlperim::mincut::{build_graph, enumerate_minimizers, minimize};
use nlperim::{build_weights, DomainMask, Grid, GridSet, InteractionWeights, KernelSpec};
use proptest::prelude::*;
use std::sync::OnceLock;

fn world() -> &'static (Grid, InteractionWeights) {
    static W: OnceLock<(Grid, InteractionWeights)> = OnceLock::new();
    W.get_or_init(|| {
        let g = Grid::cube(2, 10, 0.1).unwrap();
        let k = KernelSpec::fractional(2, 0.4).build().unwrap();
        let w = build_weights(&k, &[10, 10], 0.1, 5.0).unwrap();
        (g, w)
    })
}

fn set_of(bits: Vec<bool>) -> GridSet {
    GridSet::from_bits(&world().0, bits).unwrap()
}

fn bits() -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(any::<bool>(), 100)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn submodularity_holds(e in bits(), f in bits(), ext in bits(), r in 0.1f64..0.5) {
        let (g, w) = world();
        let omega = DomainMask::ball(set_of(ext), &[0.0, 0.0], r);
        let rep = submodularity_defect(&set_of(e), &set_of(f), &omega, w).unwrap();
        prop_assert!(rep.defect.abs() <= 1e-10 * (rep.p_e + rep.p_f).max(1e-300));
        prop_assert_eq!(g.len(), 100);
    }

    #[test]
    fn complement_symmetric(e in bits(), r in 0.1f64..0.6) {
        let (g, w) = world();
        let omega = DomainMask::ball(GridSet::empty(g), &[0.0, 0.0], r);
        let e = set_of(e);
        let a = k_perimeter_total(&e, &omega, w).unwrap();
        let b = k_perimeter_total(&e.complement(), &omega, w).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
    }

    #[test]
    fn fft_matches_double_loop(a in bits(), b in bits()) {
        let (g, w) = world();
        let x = interaction_double_loop(&a, &b, g, w);
        let y = interaction_fft(&a, &b, g, w);
        prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
    }

    #[test]
    fn whole_space_perimeter_translation_invariant(cx in -0.1f64..0.1, cy in -0.1f64..0.1, r in 0.05f64..0.2, dx in -2i64..3, dy in -2i64..3) {
        let (g, w) = world();
        let e = GridSet::ball(g, &[cx, cy], r);
        let t = e.shifted([dx, dy, 0], false);
        prop_assume!(t.count() == e.count());
        let a = whole_space_perimeter(&e, w);
        let b = whole_space_perimeter(&t, w);
        prop_assert!((a - b).abs() <= 1e-10 * a);
    }

    #[test]
    fn pbm_round_trip(e in bits()) {
        let e = set_of(e);
        prop_assert_eq!(from_pbm(&to_pbm(&e), &world().0).unwrap(), e);
    }

    #[test]
    fn diffusion_is_order_preserving(u in proptest::collection::vec(0.0f64..1.0, 100), bump in proptest::collection::vec(0.0f64..0.5, 100)) {
        let (g, w) = world();
        let st = PeriodicStencil::new(g, w).unwrap();
        let v: Vec<f64> = u.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let omega = 0.002;
        let m = st.substeps_for(omega);
        let du = diffuse(&u, &st, omega, m).unwrap();
        let dv = diffuse(&v, &st, omega, m).unwrap();
        prop_assert!(du.iter().zip(&dv).all(|(a, b)| a <= b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Push-relabel against exhaustive enumeration on irregular small domains.
    #[test]
    fn max_flow_matches_enumeration(ext in bits(), cells in proptest::collection::btree_set(0usize..100, 1..15), s in 0.1f64..0.9) {
        let (g, _) = world();
        let k = KernelSpec::fractional(2, s).build().unwrap();
        let w = build_weights(&k, &[10, 10], 0.1, 4.0).unwrap();
        let mut omega = DomainMask::full(g).with_exterior(set_of(ext)).unwrap();
        for (i, m) in omega.omega.iter_mut().enumerate() {
            *m = cells.contains(&i);
        }
        let graph = build_graph(&omega, &w).unwrap();
        let en = enumerate_minimizers(&graph).unwrap();
        let res = minimize(&omega, &w).unwrap();
        prop_assert_eq!(res.cut_units, en.best);
        prop_assert!(res.e_min.is_subset(&res.e_max));
    }
}
