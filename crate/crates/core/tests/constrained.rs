use nalgebra::{DMatrix, DVector};
use nlc_core::constrained::{iterproj_nlc, project_constraint, sample_ddnm_nlc, IterProjConfig, LinearOperator};
use nlc_core::neural::Denoiser;
use nlc_core::numeric::{distance, norm, Rng, Vec64};
use nlc_core::sampler::{Algorithm, Nlc, NlcMode, SamplerConfig};
use nlc_core::schedule::default_train_schedule;
use proptest::prelude::*;

/// `x − Aᵀ(AAᵀ)⁻¹(Ax − y)` for a full-row-rank `A`.
fn reference_projection(op: &LinearOperator, y: &[f64], x: &[f64]) -> Vec<f64> {
    let a = DMatrix::from_row_slice(op.rows(), op.cols(), op.a().as_slice());
    let x = DVector::from_column_slice(x);
    let resid = &a * &x - DVector::from_column_slice(y);
    let gram = (&a * a.transpose()).cholesky().expect("full row rank");
    (x - a.transpose() * gram.solve(&resid)).iter().copied().collect()
}

fn scaled(v: Vec64, s: f64) -> Vec64 {
    v.iter().map(|x| x * s).collect::<Vec<_>>().into()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_is_idempotent_and_non_expansive(seed in any::<u64>(), rows in 1usize..=20, s in 0.1f64..10.0) {
        let mut rng = Rng::new(seed);
        let op = LinearOperator::random_rows(rows, 40, &mut rng).unwrap();
        let y = rng.gaussian_vec(rows);
        let x = scaled(rng.gaussian_vec(40), s);
        let z = scaled(rng.gaussian_vec(40), s);
        let px = project_constraint(&op, &y, &x).unwrap();
        let pz = project_constraint(&op, &y, &z).unwrap();
        let reference = reference_projection(&op, &y, &x);
        prop_assert!(distance(&px, &reference) <= 1e-8 * (1.0 + norm(&x)));
        prop_assert!(distance(&project_constraint(&op, &y, &px).unwrap(), &px) <= 1e-10 * (1.0 + norm(&x)));
        prop_assert!(distance(&px, &pz) <= distance(&x, &z) + 1e-10);
        prop_assert!(op.consistency(&px, &y).unwrap() <= 1e-8 * (1.0 + norm(&y)));
    }

    #[test]
    fn ddnm_estimates_satisfy_the_constraint_every_step(seed in any::<u64>(), rows in 1usize..=8, eta in 0.0f64..=1.0) {
        let n = 16;
        let mut rng = Rng::new(seed);
        let op = LinearOperator::random_rows(rows, n, &mut rng).unwrap();
        let y = rng.gaussian_vec(rows);
        let net = Denoiser::init(n, &mut rng).unwrap();
        let r = |x: &[f64], s: f64| 0.2 * (x[1] - s).tanh();
        let mut cfg = SamplerConfig::new(Algorithm::Ddim, NlcMode::Network, seed);
        cfg.eta = eta;
        let sched = default_train_schedule().subsample(10).unwrap();
        let (_, traj) = sample_ddnm_nlc(&net, &Nlc::Network(&r), &sched, &op, &y, &cfg, &mut rng).unwrap();
        for rec in &traj.records[..10] {
            prop_assert!(rec.consistency.unwrap() <= 1e-8 * (1.0 + norm(&y)));
        }
    }

    #[test]
    fn iterproj_levels_and_feasibility(seed in any::<u64>(), rows in 1usize..=8, alpha in 0.5f64..0.99) {
        let n = 16;
        let mut rng = Rng::new(seed);
        let op = LinearOperator::random_rows(rows, n, &mut rng).unwrap();
        let y = rng.gaussian_vec(rows);
        let net = Denoiser::init(n, &mut rng).unwrap();
        let mut cfg = IterProjConfig::for_dim(n);
        cfg.alpha = alpha;
        cfg.k_max = 150;
        let run = iterproj_nlc(&net, &Nlc::Off, &op, &y, &cfg, &mut rng).unwrap();
        for rec in &run.records {
            prop_assert!(rec.consistency <= 1e-8 * (1.0 + norm(&y)));
            prop_assert!(rec.sigma >= cfg.sigma_min * cfg.alpha && rec.sigma <= cfg.sigma_max);
        }
        for w in run.records.windows(2) {
            let decayed = cfg.alpha * w[0].sigma;
            if decayed < cfg.sigma_min {
                prop_assert_eq!(w[1].sigma, cfg.sigma_restart);
                prop_assert!(w[1].restarted);
            } else {
                prop_assert_eq!(w[1].sigma, decayed);
                prop_assert!(!w[1].restarted);
            }
        }
        prop_assert_eq!(run.sample.clone(), run.records.last().unwrap().x0.clone());
    }
}

#[test]
fn mixed_noise_keeps_squared_norm_near_n() {
    // Total constraint with y = 0 makes every projected estimate 0, so each
    // iterate is σ ε̃ and the model x/σ reports ‖ε̃‖ as its raw norm.
    let n = 64;
    let op = LinearOperator::coordinate_mask(n, &(0..n).collect::<Vec<_>>()).unwrap();
    let y = vec![0.0; n];
    let model = |x: &[f64], s: f64| -> Vec64 { x.iter().map(|v| v / s).collect::<Vec<_>>().into() };
    for eta in [0.0, 0.2, 0.7, 1.0] {
        let mut cfg = IterProjConfig::for_dim(n);
        cfg.eta = eta;
        cfg.stop_tol = 0.0;
        cfg.k_max = 400;
        let run = iterproj_nlc(&model, &Nlc::Off, &op, &y, &cfg, &mut Rng::new(9)).unwrap();
        let sq: Vec<f64> = run.records[1..].iter().map(|r| r.dir_norm * r.dir_norm / n as f64).collect();
        let mean = sq.iter().sum::<f64>() / sq.len() as f64;
        // Var(‖ε̃‖²/n) = 2η⁴/n for ‖ε̂‖² = n and independent ω
        let se = (2.0 * eta.powi(4) / n as f64 / sq.len() as f64).sqrt();
        assert!((mean - 1.0).abs() <= 4.0 * se + 1e-12, "eta {eta}: mean {mean}");
    }
}

#[test]
fn single_row_operator_round_trips_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let op = LinearOperator::random_rows(1, 100, &mut Rng::new(4)).unwrap();
    let path = dir.path().join("op.bin");
    op.save(&path).unwrap();
    let back = LinearOperator::load(&path).unwrap();
    assert_eq!(back.a(), op.a());
    assert_eq!(back.a_pinv(), op.a_pinv());
}
