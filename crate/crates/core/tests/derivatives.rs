//! Finite-difference validation of the site summary derivatives.
//!
//! The exchanged score and Hessian are total derivatives of the penalized
//! marginal log-likelihood in which the random-intercept mode is re-solved
//! at every parameter value. The oracle here does exactly that: central
//! differences of the evaluated objective (for the score and dtau) and of
//! the analytic score (for the Hessian), with a fresh mode search at each
//! perturbed point.

use nalgebra::DVector;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use fedglmm_core::{
    site_summary, ApproximationMethod, SiteData, SummaryOptions, Theta,
};

fn random_instance(rng: &mut ChaCha12Rng) -> (SiteData, Theta) {
    let n = rng.random_range(5..40);
    let p = rng.random_range(2..6);
    let mut rows = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![1.0];
        for _ in 1..p {
            row.push(rng.sample::<f64, _>(StandardNormal));
        }
        rows.push(row);
        outcomes.push(u8::from(rng.random::<f64>() < 0.5));
    }
    let site = SiteData::new("fd", rows, outcomes).unwrap();
    let beta =
        DVector::from_fn(p, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let tau = (0.3 + 2.7 * rng.random::<f64>()).max(0.05);
    (site, Theta::new(beta, tau).unwrap())
}

fn loglik_at(
    site: &SiteData,
    theta: &Theta,
    method: ApproximationMethod,
    opts: &SummaryOptions,
) -> f64 {
    site_summary(site, theta, method, opts).unwrap().loglik
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let num = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let den = want.iter().map(|v| v.abs()).fold(1e-8_f64, f64::max);
    num / den
}

#[test]
fn summary_derivatives_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_d1ff);
    let h = 1e-5;
    let methods = [
        ApproximationMethod::Laplace,
        ApproximationMethod::GaussHermite(2),
        ApproximationMethod::GaussHermite(4),
    ];
    for instance in 0..25 {
        let (site, theta) = random_instance(&mut rng);
        let p = theta.beta.len();
        for method in methods {
            for lambda in [0.0, 2.0] {
                let opts = SummaryOptions { lambda, ..Default::default() };
                let summary = site_summary(&site, &theta, method, &opts).unwrap();

                let mut fd_score = vec![0.0; p];
                let mut fd_hess = vec![vec![0.0; p]; p];
                for j in 0..p {
                    let mut up = theta.clone();
                    up.beta[j] += h;
                    let mut dn = theta.clone();
                    dn.beta[j] -= h;
                    fd_score[j] = (loglik_at(&site, &up, method, &opts)
                        - loglik_at(&site, &dn, method, &opts))
                        / (2.0 * h);
                    let s_up = site_summary(&site, &up, method, &opts).unwrap().score;
                    let s_dn = site_summary(&site, &dn, method, &opts).unwrap().score;
                    for i in 0..p {
                        fd_hess[i][j] = (s_up[i] - s_dn[i]) / (2.0 * h);
                    }
                }
                let up = Theta::new(theta.beta.clone(), theta.tau + h).unwrap();
                let dn = Theta::new(theta.beta.clone(), theta.tau - h).unwrap();
                let fd_dtau = (loglik_at(&site, &up, method, &opts)
                    - loglik_at(&site, &dn, method, &opts))
                    / (2.0 * h);

                let se = rel_err(summary.score.as_slice(), &fd_score);
                assert!(
                    se < 1e-5,
                    "instance {instance} {method:?} lambda {lambda}: score rel err {se:.2e}"
                );
                let analytic: Vec<f64> = (0..p)
                    .flat_map(|i| (0..p).map(move |j| (i, j)))
                    .map(|(i, j)| summary.hessian[(i, j)])
                    .collect();
                let oracle: Vec<f64> =
                    (0..p).flat_map(|i| fd_hess[i].clone()).collect();
                let he = rel_err(&analytic, &oracle);
                assert!(
                    he < 1e-5,
                    "instance {instance} {method:?} lambda {lambda}: hessian rel err {he:.2e}"
                );
                let te = rel_err(&[summary.dtau], &[fd_dtau]);
                assert!(
                    te < 1e-5,
                    "instance {instance} {method:?} lambda {lambda}: dtau rel err {te:.2e}"
                );
            }
        }
    }
}

#[test]
fn hessian_is_symmetric() {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    for _ in 0..10 {
        let (site, theta) = random_instance(&mut rng);
        let s = site_summary(
            &site,
            &theta,
            ApproximationMethod::GaussHermite(3),
            &SummaryOptions::default(),
        )
        .unwrap();
        let p = theta.beta.len();
        for i in 0..p {
            for j in 0..i {
                assert_eq!(
                    s.hessian[(i, j)],
                    s.hessian[(j, i)],
                    "asymmetry at ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn loglik_decreases_with_penalty() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let (site, theta) = random_instance(&mut rng);
    let base = loglik_at(
        &site,
        &theta,
        ApproximationMethod::Laplace,
        &SummaryOptions::default(),
    );
    let pen = loglik_at(
        &site,
        &theta,
        ApproximationMethod::Laplace,
        &SummaryOptions { lambda: 3.0, ..Default::default() },
    );
    let norm2: f64 = theta.beta.iter().skip(1).map(|b| b * b).sum();
    assert!((pen - (base - 3.0 * norm2)).abs() < 1e-12);
}
