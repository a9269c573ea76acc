//! End-to-end invariants of the factorization on randomized geometries.

use std::f64::consts::{FRAC_PI_4, TAU};
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rskel::geometry::{presets, Boundary, CurveId, Edit, Perturbation, Point};
use rskel::kernels::Pde;
use rskel::skel::{FactorOptions, Factorization};
use rskel::tree::RootBox;

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn pde_strategy() -> impl Strategy<Value = Pde> {
    prop_oneof![Just(Pde::LaplaceNeumann), Just(Pde::StokesDirichlet)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// The solution satisfies the exact dense system to the requested tolerance.
    #[test]
    fn residual_against_dense_operator(
        pde in pde_strategy(),
        t1 in 0.0..TAU,
        gap in (FRAC_PI_4 + 0.1)..(TAU - FRAC_PI_4 - 0.1),
        n in 300usize..700,
        tol_exp in 6i32..11,
        seed in any::<u64>(),
    ) {
        let tol = 10f64.powi(-tol_exp);
        let b = Arc::new(Boundary::build(&presets::starfish_with_holes(n, t1, t1 + gap)).unwrap());
        let f = Factorization::factor_default_root(pde, b, FactorOptions::with_tol(tol)).unwrap();
        let rhs = random_vec(f.n_dofs(), seed);
        let (mu, lambda) = f.solve(&rhs).unwrap();
        let r = f.residual(&rhs, &mu, &lambda);
        prop_assert!(r <= 100.0 * tol, "residual {r:e} at tol {tol:e}");
    }

    /// Updating after a hole translation reproduces a fresh factorization bit for bit.
    #[test]
    fn update_after_translation_is_exact(
        pde in pde_strategy(),
        hole in 1u32..3,
        dx in -0.08f64..0.08,
        dy in -0.08f64..0.08,
        seed in any::<u64>(),
    ) {
        let b = Arc::new(Boundary::build(&presets::starfish_with_holes(640, 0.4, 2.9)).unwrap());
        let root = RootBox::enclosing(&b);
        let opts = FactorOptions { leaf_cap: 24, ..FactorOptions::with_tol(1e-9) };
        let f = Factorization::factor(pde, b.clone(), root, opts.clone()).unwrap();
        let p = Perturbation {
            edits: vec![Edit::MoveHole { curve: CurveId(hole), translation: Point::new(dx, dy) }],
        };
        let moved = b.apply_perturbation(&p);
        prop_assume!(moved.is_ok());
        let (nb, delta) = moved.unwrap();
        let nb = Arc::new(nb);
        let up = f.update(nb.clone(), &delta).unwrap();
        let fresh = Factorization::factor(pde, nb, root, opts).unwrap();
        let rhs = random_vec(up.n_dofs(), seed);
        prop_assert_eq!(up.solve(&rhs).unwrap(), fresh.solve(&rhs).unwrap());
        prop_assert_eq!(up.root_skeleton(), fresh.root_skeleton());
    }
}

#[test]
fn solve_scales_linearly() {
    let b = Arc::new(Boundary::build(&presets::starfish_with_holes(512, 1.0, 4.0)).unwrap());
    let f = Factorization::factor_default_root(Pde::StokesDirichlet, b, FactorOptions::with_tol(1e-10)).unwrap();
    let x = random_vec(f.n_dofs(), 1);
    let y = random_vec(f.n_dofs(), 2);
    let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
    let (sx, lx) = f.solve(&x).unwrap();
    let (sy, ly) = f.solve(&y).unwrap();
    let (sc, lc) = f.solve(&combo).unwrap();
    let expect = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| 2.0 * p - 3.0 * q).collect::<Vec<f64>>();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff(&sc, &expect(&sx, &sy)) < 1e-9);
    assert!(diff(&lc, &expect(&lx, &ly)) < 1e-9);
}
