mod common;

use adafish::linalg::{spd_solve, SeededRng};
use adafish::optim::{
    adafish_step, adamw_step, momentum_step, AdaFishState, AdamWState, Hyperparams, MomentumState, Schedule,
};
use adafish::DenseMatrix;
use common::{rel_err, spectral_norm_psd};
use proptest::prelude::*;

fn hp_with(beta1: f64, beta2: f64, gamma: f64, delta: f64, lambda: f64) -> Hyperparams {
    Hyperparams {
        eta0: 0.1,
        eta_min: 0.0,
        total_steps: 100,
        lambda,
        gamma,
        beta1,
        beta2,
        delta,
        schedule: Schedule::Constant,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn first_step_moments_are_exact(
        seed in 0u64..100_000,
        beta1 in 0.01f64..0.99,
        beta2 in 0.01f64..0.999,
        r in 1usize..5,
        n in 1usize..9,
    ) {
        let mut rng = SeededRng::new(seed);
        let g = rng.gaussian_matrix(r, n, 0.0, 2.0);
        let mut theta = rng.gaussian_matrix(r, n, 0.0, 1.0);
        let mut st = AdaFishState::new(r, n);
        adafish_step(&mut theta, &g, &mut st, &hp_with(beta1, beta2, 2e-4, 1e-15, 0.1), 0.1).unwrap();
        prop_assert_eq!(st.m_hat(), &g);
        prop_assert_eq!(st.h_hat(), &g.gram_rows());
    }

    #[test]
    fn zero_gradient_only_decays(
        seed in 0u64..100_000,
        k in 1usize..40,
        eta in 0.0f64..1.0,
        lambda in 0.0f64..1.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let theta0 = rng.gaussian_matrix(3, 4, 0.0, 1.0);
        let mut theta = theta0.clone();
        let mut st = AdaFishState::new(3, 4);
        let hp = hp_with(0.8, 0.99, 2e-4, 1e-15, lambda);
        let zero = DenseMatrix::zeros(3, 4);
        let mut want = theta0.clone();
        for _ in 0..k {
            adafish_step(&mut theta, &zero, &mut st, &hp, eta).unwrap();
            want.scale_in_place(1.0 - eta * lambda);
        }
        prop_assert_eq!(&theta, &want);
        // and the closed form up to rounding of the power
        let closed = theta0.scaled((1.0 - eta * lambda).powi(k as i32));
        prop_assert!(theta.sub(&closed).unwrap().max_abs() <= 1e-13 * theta0.max_abs().max(1.0));
    }

    #[test]
    fn unit_preconditioner_matches_momentum(
        seed in 0u64..100_000,
        beta1 in 0.01f64..0.99,
        lambda in 0.0f64..0.5,
        steps in 1usize..40,
    ) {
        let mut rng = SeededRng::new(seed);
        let mut a = rng.gaussian_matrix(2, 5, 0.0, 1.0);
        let mut b = a.clone();
        let hp = hp_with(beta1, 0.99, 0.0, 1.0, lambda);
        let mut sa = AdaFishState::new(2, 5);
        let mut sb = MomentumState::new(2, 5);
        for s in 0..steps {
            let g = rng.gaussian_matrix(2, 5, 0.0, 1.0);
            let eta = 0.1 / (1.0 + s as f64);
            adafish_step(&mut a, &g, &mut sa, &hp, eta).unwrap();
            momentum_step(&mut b, &g, &mut sb, beta1, eta, lambda).unwrap();
            prop_assert_eq!(&a, &b);
        }
    }

    #[test]
    fn gram_ema_stays_in_convex_hull(seed in 0u64..100_000, beta2 in 0.01f64..0.999, steps in 2usize..30) {
        let mut rng = SeededRng::new(seed);
        let hp = hp_with(0.8, beta2, 2e-4, 1e-15, 0.0);
        let mut theta = DenseMatrix::zeros(3, 6);
        let mut st = AdaFishState::new(3, 6);
        let mut prev = DenseMatrix::zeros(3, 3);
        for _ in 0..steps {
            let sd = 0.1 + 3.0 * rng.uniform();
            let g = rng.gaussian_matrix(3, 6, 0.0, sd);
            adafish_step(&mut theta, &g, &mut st, &hp, 1e-3).unwrap();
            let h = st.h(beta2);
            let bound = spectral_norm_psd(&prev).max(spectral_norm_psd(&g.gram_rows()));
            prop_assert!(spectral_norm_psd(&h) <= bound * (1.0 + 1e-10));
            prev = h;
        }
    }

    #[test]
    fn gradient_scaling_covariance(seed in 0u64..100_000, s in 0.01f64..100.0, steps in 1usize..20) {
        let mut rng = SeededRng::new(seed);
        let hp = hp_with(0.8, 0.99, 1.0, 1e-300, 0.0);
        let grads: Vec<DenseMatrix> = (0..steps).map(|_| rng.gaussian_matrix(3, 8, 0.0, 1.0)).collect();
        let mut st1 = AdaFishState::new(3, 8);
        let mut st2 = AdaFishState::new(3, 8);
        let mut t1 = DenseMatrix::zeros(3, 8);
        let mut t2 = DenseMatrix::zeros(3, 8);
        for g in &grads {
            adafish_step(&mut t1, g, &mut st1, &hp, 0.0).unwrap();
            adafish_step(&mut t2, &g.scaled(s), &mut st2, &hp, 0.0).unwrap();
        }
        prop_assert!(rel_err(&st2.m(hp.beta1), &st1.m(hp.beta1).scaled(s)) <= 1e-12);
        prop_assert!(rel_err(&st2.h(hp.beta2), &st1.h(hp.beta2).scaled(s * s)) <= 1e-12);
        let d1 = spd_solve(&st1.h_hat().scaled(hp.gamma), st1.m_hat(), 0.0).unwrap();
        let d2 = spd_solve(&st2.h_hat().scaled(hp.gamma), st2.m_hat(), 0.0).unwrap();
        prop_assert!(rel_err(&d2, &d1.scaled(1.0 / s)) <= 1e-9);
    }

    #[test]
    fn adamw_is_invariant_to_gradient_scale(seed in 0u64..100_000, s in 0.5f64..100.0) {
        let mut rng = SeededRng::new(seed);
        let hp = Hyperparams::adamw_default(10);
        let mut a = rng.gaussian_matrix(2, 3, 0.0, 1.0);
        let mut b = a.clone();
        let mut sa = AdamWState::new(2, 3);
        let mut sb = AdamWState::new(2, 3);
        for _ in 0..10 {
            let g = rng.gaussian_matrix(2, 3, 0.0, 1.0);
            adamw_step(&mut a, &g, &mut sa, &hp, 0.01).unwrap();
            adamw_step(&mut b, &g.scaled(s), &mut sb, &hp, 0.01).unwrap();
        }
        prop_assert!(rel_err(&b, &a) <= 1e-6);
    }
}

#[test]
fn quadratic_descent_with_default_hyperparameters() {
    let (r, n, steps) = (4, 64, 200);
    for seed in 0..10 {
        let mut rng = SeededRng::new(seed);
        let target = rng.gaussian_matrix(r, n, 0.0, 1.0);
        let mut theta = rng.gaussian_matrix(r, n, 0.0, 1.0);
        let hp = Hyperparams::adafish_default(steps);
        assert_eq!(hp.eta0, 0.1);
        let mut st = AdaFishState::new(r, n);
        let f0 = 0.5 * theta.sub(&target).unwrap().frobenius_norm_sq();
        for step in 0..steps {
            let g = theta.sub(&target).unwrap();
            adafish_step(&mut theta, &g, &mut st, &hp, hp.lr(step)).unwrap();
        }
        let f = 0.5 * theta.sub(&target).unwrap().frobenius_norm_sq();
        assert!(f <= 1e-6 * f0, "seed {seed}: {f0} -> {f}");
    }
}
