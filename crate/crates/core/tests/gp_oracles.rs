//! Independent oracles for the GP layer: adaptive integration, Monte Carlo
//! KL estimates, dense linear algebra and finite differences.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use dkl_core::gp::{
    expected_log_lik, kl_whitened, predict_marginals, predict_proba, predictive_marginals, elbo,
    GpPredictive, PredictiveVars, RbfKernel, RbfKernelParams, VariationalState,
};
use dkl_core::quadrature::GaussHermite;
use dkl_core::tensor::{finite_diff_check_many, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson integration of `E[g(f)]`, `f ~ N(mu, var)`, over ±14σ.
fn gaussian_expectation(mu: f64, var: f64, g: impl Fn(f64) -> f64) -> f64 {
    if var == 0.0 {
        return g(mu);
    }
    let sd = var.sqrt();
    let dens = |x: f64| (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let f = |x: f64| g(x) * dens(x);
    let (a, b) = (mu - 14.0 * sd, mu + 14.0 * sd);
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, a, b, fa, fm, fb, whole, 1e-12, 40)
}

#[test]
fn predict_proba_matches_adaptive_integration() {
    let rule = GaussHermite::standard();
    let mut worst = 0.0_f64;
    for i in 0..=16 {
        let mu = -4.0 + 0.5 * i as f64;
        for j in 0..=18 {
            let var = 0.5 * j as f64;
            let p = predict_proba(&GpPredictive { mean: vec![mu], variance: vec![var] }, rule)[0];
            worst = worst.max((p - gaussian_expectation(mu, var, sigmoid)).abs());
        }
    }
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn expected_log_lik_matches_adaptive_integration() {
    let rule = GaussHermite::standard();
    let tape = Tape::new();
    let mut worst = 0.0_f64;
    for i in 0..=16 {
        let mu = -4.0 + 0.5 * i as f64;
        for j in 0..=18 {
            let var = (0.5 * j as f64).max(1e-12);
            for y in [0.0, 1.0] {
                let pred = PredictiveVars {
                    mean: tape.constant(Tensor::column(vec![mu])),
                    variance: tape.constant(Tensor::column(vec![var])),
                };
                let v = expected_log_lik(&pred, &[y], rule).unwrap().value().item();
                let exact = gaussian_expectation(mu, 0.5 * j as f64, |f| log_sigmoid((2.0 * y - 1.0) * f));
                worst = worst.max((v - exact).abs());
            }
        }
    }
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn specific_predictive_value_is_moderated() {
    let rule = GaussHermite::standard();
    let p = predict_proba(&GpPredictive { mean: vec![2.0], variance: vec![9.0] }, rule)[0];
    let exact = gaussian_expectation(2.0, 9.0, sigmoid);
    assert!((p - exact).abs() < 1e-6);
    assert!((p - 0.5).abs() < (sigmoid(2.0) - 0.5).abs());
    let tape = Tape::new();
    let pred = PredictiveVars {
        mean: tape.constant(Tensor::column(vec![1.0])),
        variance: tape.constant(Tensor::column(vec![4.0])),
    };
    let v = expected_log_lik(&pred, &[1.0], rule).unwrap().value().item();
    assert!((v - gaussian_expectation(1.0, 4.0, log_sigmoid)).abs() < 1e-6);
}

#[test]
fn moderation_is_strictly_monotone_in_variance() {
    let rule = GaussHermite::standard();
    for mu in [-3.0, -1.0, -0.2, 0.2, 1.5, 4.0] {
        let grid: Vec<f64> = (0..20).map(|k| 9.0 * k as f64 / 19.0).collect();
        let pred = GpPredictive { mean: vec![mu; 20], variance: grid };
        let p = predict_proba(&pred, rule);
        for w in p.windows(2) {
            assert!((w[1] - 0.5).abs() < (w[0] - 0.5).abs(), "mu={mu}: {w:?}");
        }
    }
}

fn random_state(rng: &mut ChaCha8Rng, m: usize, d: usize) -> VariationalState {
    let z = Tensor::new(vec![m, d], (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut state = VariationalState::prior(z);
    for v in state.mean.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for i in 0..m {
        for j in 0..=i {
            state.chol_raw.set(i, j, rng.random_range(-0.5..0.5));
        }
    }
    state
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let m = 5;
    for _ in 0..10 {
        let state = random_state(&mut rng, m, 2);
        let tape = Tape::new();
        let sv = state.map(&mut |t| tape.constant(t.clone()));
        let closed = kl_whitened(&sv).unwrap().value().item();
        let l = state.chol();
        let mean = state.mean.data();
        let logdet: f64 = (0..m).map(|i| l.get(i, i).ln()).sum();
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let eps: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
            // v = m + L ε; log q(v) − log p(v) = −½‖ε‖² − log|L| + ½‖v‖²
            let mut q = -logdet;
            for i in 0..m {
                let vi = mean[i] + (0..=i).map(|k| l.get(i, k) * eps[k]).sum::<f64>();
                q += 0.5 * vi * vi - 0.5 * eps[i] * eps[i];
            }
            sum += q;
            sum_sq += q * q;
        }
        let est = sum / n as f64;
        let se = ((sum_sq / n as f64 - est * est) / n as f64).sqrt();
        assert!((closed - est).abs() < 3.0 * se, "closed {closed} mc {est} se {se}");
        assert!(closed >= 0.0);
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn dense_solve(a: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| {
        let mut r = a.row(i).to_vec();
        r.push(b[i]);
        r
    }).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

fn dense_kernel(k: &RbfKernelParams, x: &Tensor, y: &Tensor) -> Tensor {
    let ell = k.lengthscales()[0];
    let os = k.outputscale();
    let mut out = Tensor::zeros(&[x.rows(), y.rows()]);
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let d2: f64 = x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            out.set(i, j, os * (-d2 / (2.0 * ell * ell)).exp());
        }
    }
    out
}

#[test]
fn predictive_mean_at_inducing_row_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut state = random_state(&mut rng, 6, 3);
    // L_v → 0
    for i in 0..6 {
        for j in 0..i {
            state.chol_raw.set(i, j, 0.0);
        }
        state.chol_raw.set(i, i, -30.0);
    }
    let k = RbfKernelParams {
        log_lengthscale: Tensor::scalar(0.2),
        log_outputscale: Tensor::scalar(0.3),
    };
    let j = 4;
    let f = Tensor::matrix(1, 3, state.inducing.row(j).to_vec()).unwrap();
    let pred = predict_marginals(&k, &state, &f).unwrap();

    let mut kzz = dense_kernel(&k, &state.inducing, &state.inducing);
    let jitter = 1e-6 * k.outputscale();
    for i in 0..6 {
        let v = kzz.get(i, i) + jitter;
        kzz.set(i, i, v);
    }
    // μ = k_zfᵀ L_z⁻ᵀ m_v = k_zfᵀ K_zz⁻¹ (L_z m_v), L_z from a hand-rolled factorization
    let lz = dkl_core::tensor::cholesky_lower(kzz.data(), 6).unwrap();
    let lm: Vec<f64> = (0..6).map(|r| (0..=r).map(|c| lz[r * 6 + c] * state.mean.data()[c]).sum()).collect();
    let w = dense_solve(&kzz, &lm);
    let kzf = dense_kernel(&k, &state.inducing, &f);
    let mu: f64 = (0..6).map(|r| kzf.get(r, 0) * w[r]).sum();
    assert!((pred.mean[0] - mu).abs() < 1e-8, "{} vs {mu}", pred.mean[0]);
    assert!(pred.variance[0] < 1e-5);
}

#[test]
fn duplicate_rows_give_identical_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = random_state(&mut rng, 5, 2);
    let k = RbfKernelParams::unit(2, false);
    let f = Tensor::matrix(3, 2, vec![0.4, -0.1, 0.4, -0.1, 0.4, -0.1]).unwrap();
    let pred = predict_marginals(&k, &state, &f).unwrap();
    assert!(pred.mean.iter().all(|&m| m.to_bits() == pred.mean[0].to_bits()));
    assert!(pred.variance.iter().all(|&v| v.to_bits() == pred.variance[0].to_bits()));
}

#[test]
fn variance_is_invariant_to_inducing_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = 5;
    let state = random_state(&mut rng, m, 2);
    let k = RbfKernelParams {
        log_lengthscale: Tensor::scalar(-0.2),
        log_outputscale: Tensor::scalar(0.1),
    };
    let f = Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let base = predict_marginals(&k, &state, &f).unwrap();

    // Permuting Z changes the prior factor L_z, so express the same q(u) in the
    // permuted whitened coordinates: S_u = L_z S_v L_zᵀ, then re-whiten.
    let perm = [3, 0, 4, 1, 2];
    let kzz = {
        let mut kk = dense_kernel(&k, &state.inducing, &state.inducing);
        for i in 0..m {
            let v = kk.get(i, i) * (1.0 + 1e-6);
            kk.set(i, i, v);
        }
        kk
    };
    let lz = Tensor::matrix(m, m, dkl_core::tensor::cholesky_lower(kzz.data(), m).unwrap()).unwrap();
    let lv = state.chol();
    let a = lz.matmul(&lv).unwrap();
    let su = a.matmul(&a.transpose()).unwrap();
    let mu_u = lz.matmul(&state.mean).unwrap();
    let p = |t: &Tensor| {
        let mut o = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..m {
                o.set(i, j, t.get(perm[i], perm[j]));
            }
        }
        o
    };
    let su_p = p(&su);
    let kzz_p = p(&kzz);
    let lzp = Tensor::matrix(m, m, dkl_core::tensor::cholesky_lower(kzz_p.data(), m).unwrap()).unwrap();
    // whitened covariance: L_zp⁻¹ S_up L_zp⁻ᵀ
    let mut x = su_p.into_data();
    dkl_core::tensor::solve_lower_in_place(lzp.data(), m, &mut x, m, false);
    let mut xt = Tensor::matrix(m, m, x).unwrap().transpose().into_data();
    dkl_core::tensor::solve_lower_in_place(lzp.data(), m, &mut xt, m, false);
    let sv_p = Tensor::matrix(m, m, xt).unwrap();
    let lv_p = Tensor::matrix(m, m, dkl_core::tensor::cholesky_lower(sv_p.data(), m).unwrap()).unwrap();
    let mut mv_p: Vec<f64> = perm.iter().map(|&i| mu_u.data()[i]).collect();
    dkl_core::tensor::solve_lower_in_place(lzp.data(), m, &mut mv_p, 1, false);
    let mut zp = Tensor::zeros(&[m, 2]);
    for i in 0..m {
        zp.set(i, 0, state.inducing.get(perm[i], 0));
        zp.set(i, 1, state.inducing.get(perm[i], 1));
    }
    let permuted = VariationalState::from_cholesky(zp, Tensor::column(mv_p), &lv_p).unwrap();
    let other = predict_marginals(&k, &permuted, &f).unwrap();
    for i in 0..4 {
        assert!((base.variance[i] - other.variance[i]).abs() < 1e-8);
        assert!((base.mean[i] - other.mean[i]).abs() < 1e-8);
    }
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let state = random_state(&mut rng, 5, 3);
    let kernel = RbfKernelParams {
        log_lengthscale: Tensor::scalar(0.1),
        log_outputscale: Tensor::scalar(-0.2),
    };
    let feats = Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels = [1.0, 0.0, 0.0, 1.0];
    let rule = GaussHermite::standard();
    let inputs = vec![
        kernel.log_lengthscale.clone(),
        kernel.log_outputscale.clone(),
        state.inducing.clone(),
        state.mean.clone(),
        state.chol_raw.clone(),
        feats,
    ];
    let err = finite_diff_check_many(
        |_, v| {
            let k = RbfKernel { log_lengthscale: v[0], log_outputscale: v[1] };
            let s = dkl_core::gp::Variational { inducing: v[2], mean: v[3], chol_raw: v[4] };
            elbo(&k, &s, v[5], &labels, 10, rule).map_err(|e| match e {
                dkl_core::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn ard_lengthscales_reduce_to_shared_when_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let state = random_state(&mut rng, 4, 3);
    let shared = RbfKernelParams { log_lengthscale: Tensor::scalar(0.4), log_outputscale: Tensor::scalar(0.0) };
    let ard = RbfKernelParams { log_lengthscale: Tensor::vector(vec![0.4; 3]), log_outputscale: Tensor::scalar(0.0) };
    let f = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let a = predict_marginals(&shared, &state, &f).unwrap();
    let b = predict_marginals(&ard, &state, &f).unwrap();
    for i in 0..2 {
        assert!((a.mean[i] - b.mean[i]).abs() < 1e-14);
    }
    let tape = Tape::new();
    let kv = ard.map(&mut |t| tape.constant(t.clone()));
    let sv = state.map(&mut |t| tape.constant(t.clone()));
    assert!(predictive_marginals(&kv, &sv, tape.constant(f)).is_ok());
}
