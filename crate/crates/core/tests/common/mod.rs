//! Independent oracles shared by the integration suites.
//!
//! The oracle computations (solver, IRLS, rank statistics, erf, Simpson)
//! are written from scratch against textbook definitions rather than
//! through the crate's numeric dependencies, so agreement with the
//! library is evidence rather than tautology.

#![allow(dead_code)]

use fedglmm_core::{sigmoid, SiteData, Theta};
use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Solve `a x = b` with partial-pivot Gaussian elimination.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, rhs)| {
            let mut r = row.clone();
            r.push(*rhs);
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty column");
        assert!(m[pivot][col].abs() > 1e-12, "singular system in oracle");
        m.swap(col, pivot);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = m[row][n];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x
}

/// Plain (no random effect) logistic maximum likelihood via
/// iteratively-reweighted least squares. Newton on the full data:
/// beta <- beta + (X'WX)^{-1} X'(y - pi).
pub fn irls_logistic(rows: &[Vec<f64>], outcomes: &[u8]) -> Vec<f64> {
    let p = rows[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut grad = vec![0.0; p];
        let mut info = vec![vec![0.0; p]; p];
        for (x, &y) in rows.iter().zip(outcomes) {
            let z: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let pi = sigmoid(z);
            let w = pi * (1.0 - pi);
            for i in 0..p {
                grad[i] += x[i] * (f64::from(y) - pi);
                for j in 0..p {
                    info[i][j] += w * x[i] * x[j];
                }
            }
        }
        let step = solve_dense(&info, &grad);
        let mut max_step = 0.0f64;
        for (bi, si) in beta.iter_mut().zip(&step) {
            *bi += si;
            max_step = max_step.max(si.abs());
        }
        if max_step < 1e-12 {
            break;
        }
    }
    beta
}

/// Tie-corrected Mann-Whitney AUC through midranks: the probability a
/// random positive outscores a random negative, counting ties as 1/2.
pub fn mann_whitney_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie block shares the average rank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &row in &order[i..j] {
            ranks[row] = midrank;
        }
        i = j;
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n0 = n as f64 - n1;
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0)
}

/// Maclaurin series for erf, term-recurrence form. Accurate to full f64
/// precision for |x| up to about 4, which covers every case the tests
/// feed it.
pub fn erf_series(x: f64) -> f64 {
    let two_over_sqrt_pi = 1.128379167095512573896;
    let x2 = x * x;
    let mut term = x;
    let mut sum = 0.0;
    for n in 0..200 {
        let contribution = term / (2 * n + 1) as f64;
        sum += contribution;
        if contribution.abs() < 1e-18 * sum.abs() {
            break;
        }
        term *= -x2 / (n + 1) as f64;
    }
    two_over_sqrt_pi * sum
}

/// Two-sided normal p-value for a z statistic via the series erf.
pub fn p_value_series(z: f64) -> f64 {
    1.0 - erf_series(z.abs() / std::f64::consts::SQRT_2)
}

/// log of the integral of exp(g) over [lo, hi] by composite Simpson with
/// `panels` subintervals (panels must be even). The max of g is factored
/// out so the sum never overflows.
pub fn simpson_log_integral(g: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    assert!(panels % 2 == 0 && panels >= 2);
    let h = (hi - lo) / panels as f64;
    let values: Vec<f64> = (0..=panels).map(|k| g(lo + h * k as f64)).collect();
    let peak = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (k, v) in values.iter().enumerate() {
        let weight = if k == 0 || k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += weight * (v - peak).exp();
    }
    peak + (sum * h / 3.0).ln()
}

/// Joint log density of one site's outcomes and a random-intercept value,
/// written directly from the model definition for oracle use.
pub fn joint_log_density(site: &SiteData, theta: &Theta, mu: f64) -> f64 {
    let mut g = 0.0;
    for j in 0..site.len() {
        let z: f64 = site
            .row(j)
            .iter()
            .zip(theta.beta.iter())
            .map(|(x, b)| x * b)
            .sum::<f64>()
            + mu;
        // y*z - log(1 + e^z), stable on both sides.
        g += f64::from(site.outcome(j)) * z - softplus(z);
    }
    let tau = theta.tau;
    g - 0.5 * (mu / tau).powi(2) - tau.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Random site with n rows, p columns (intercept first), fresh each call.
pub fn random_site(rng: &mut ChaCha12Rng, id: &str, n: usize, p: usize) -> SiteData {
    let mut rows = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![1.0];
        for _ in 1..p {
            row.push(rng.sample::<f64, _>(StandardNormal));
        }
        rows.push(row);
        outcomes.push(u8::from(rng.random::<f64>() < 0.4));
    }
    SiteData::new(id, rows, outcomes).expect("generated site is valid")
}

/// Random parameter point with moderate scale.
pub fn random_theta(rng: &mut ChaCha12Rng, p: usize) -> Theta {
    let beta = nalgebra::DVector::from_iterator(
        p,
        (0..p).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)),
    );
    let tau = rng.random_range(0.4..2.0);
    Theta::new(beta, tau).expect("valid theta")
}

/// Arbitrary f64 covering the values the wire must carry bit-exactly:
/// ordinary magnitudes, huge and tiny scales, negative zero, infinities,
/// and NaN.
pub fn random_wire_f64(rng: &mut ChaCha12Rng) -> f64 {
    match rng.random_range(0..10u32) {
        0 => 0.0,
        1 => -0.0,
        2 => f64::INFINITY,
        3 => f64::NEG_INFINITY,
        4 => f64::NAN,
        5 => 2e300 * (rng.random::<f64>() - 0.5),
        6 => 5e-310 * rng.random::<f64>(),
        _ => 50.0 * (rng.random::<f64>() - 0.5),
    }
}

fn random_wire_string(rng: &mut ChaCha12Rng) -> String {
    let alphabet: Vec<char> =
        "abcXYZ019 _-.\\\"[];=,\u{e9}\u{4e2d}".chars().collect();
    let len = rng.random_range(0..12usize);
    (0..len)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect()
}

fn random_vector(rng: &mut ChaCha12Rng, n: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_iterator(n, (0..n).map(|_| random_wire_f64(rng)))
}

fn random_summary(rng: &mut ChaCha12Rng, p: usize) -> fedglmm_core::SiteSummary {
    fedglmm_core::SiteSummary {
        p,
        n_i: rng.random_range(0..5000usize),
        loglik: random_wire_f64(rng),
        score: random_vector(rng, p),
        hessian: nalgebra::DMatrix::from_fn(p, p, |_, _| random_wire_f64(rng)),
        mu_hat: random_wire_f64(rng),
        dtau: random_wire_f64(rng),
        beta_echo: random_vector(rng, p),
        lambda_echo: random_wire_f64(rng),
        k_echo: rng.random_range(1..=20usize),
    }
}

/// Randomized message of every protocol type, for round-trip corpora.
pub fn random_message(rng: &mut ChaCha12Rng) -> fedglmm_core::federation::Message {
    use fedglmm_core::federation::{Message, ResultPayload, SessionConfig};
    use fedglmm_core::{ApproximationMethod, Partition};
    let p = rng.random_range(1..8usize);
    match rng.random_range(0..7u32) {
        0 => Message::Hello {
            site_id: random_wire_string(rng),
            n_i: rng.random_range(1..1_000_000u64),
            p: p as u64,
            protocol_version: rng.random_range(0..5u64),
        },
        1 => Message::Config(SessionConfig {
            method: if rng.random::<bool>() {
                ApproximationMethod::Laplace
            } else {
                ApproximationMethod::GaussHermite(rng.random_range(1..=20usize))
            },
            lambda: random_wire_f64(rng).abs(),
            penalize_intercept: rng.random::<bool>(),
            partition: if rng.random::<bool>() { Partition::Train } else { Partition::Validation },
            split_ratio: rng.random::<f64>(),
            split_seed: rng.random::<u64>(),
        }),
        2 => Message::Compute {
            round: rng.random::<u64>(),
            beta: random_vector(rng, p),
            tau: random_wire_f64(rng),
        },
        3 => Message::Summary { round: rng.random::<u64>(), payload: random_summary(rng, p) },
        4 => Message::Result(ResultPayload {
            beta: random_vector(rng, p),
            tau: random_wire_f64(rng),
            lambda: random_wire_f64(rng),
            loglik: random_wire_f64(rng),
            aic: random_wire_f64(rng),
            bic: random_wire_f64(rng),
            val_loglik: random_wire_f64(rng),
            val_aic: random_wire_f64(rng),
            val_bic: random_wire_f64(rng),
            se: random_vector(rng, p),
            z: random_vector(rng, p),
            p_values: random_vector(rng, p),
            ci_lower: random_vector(rng, p),
            ci_upper: random_vector(rng, p),
            n_train: rng.random::<u64>(),
            n_validation: rng.random::<u64>(),
            iterations: rng.random::<u64>(),
            converged: rng.random::<bool>(),
        }),
        5 => Message::Abort { reason: random_wire_string(rng) },
        _ => Message::Bye,
    }
}

/// Directory holding the frozen wire-format byte vectors.
pub fn golden_dir() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// One pinned message per protocol frame type, never to change: the byte
/// files alongside them freeze the wire format.
pub fn pinned_messages() -> Vec<(&'static str, fedglmm_core::federation::Message)> {
    use fedglmm_core::federation::{Message, ResultPayload, SessionConfig};
    use fedglmm_core::{ApproximationMethod, Partition, SiteSummary};
    use nalgebra::{DMatrix, DVector};
    vec![
        (
            "hello",
            Message::Hello {
                site_id: "site-A".to_string(),
                n_i: 120,
                p: 3,
                protocol_version: 1,
            },
        ),
        (
            "config",
            Message::Config(SessionConfig {
                method: ApproximationMethod::GaussHermite(4),
                lambda: 2.0,
                penalize_intercept: false,
                partition: Partition::Train,
                split_ratio: 0.7,
                split_seed: 42,
            }),
        ),
        (
            "compute",
            Message::Compute {
                round: 3,
                beta: DVector::from_vec(vec![0.25, -1.5, 3.0]),
                tau: 0.8,
            },
        ),
        (
            "summary",
            Message::Summary {
                round: 3,
                payload: SiteSummary {
                    p: 2,
                    n_i: 84,
                    loglik: -55.5,
                    score: DVector::from_vec(vec![1.5, -2.25]),
                    hessian: DMatrix::from_row_slice(2, 2, &[-4.0, 0.5, 0.5, -3.0]),
                    mu_hat: 0.125,
                    dtau: 0.0625,
                    beta_echo: DVector::from_vec(vec![0.25, -1.5]),
                    lambda_echo: 2.0,
                    k_echo: 4,
                },
            },
        ),
        (
            "result",
            Message::Result(ResultPayload {
                beta: DVector::from_vec(vec![0.5, -0.25]),
                tau: 1.5,
                lambda: 0.0,
                loglik: -100.25,
                aic: 206.5,
                bic: 212.75,
                val_loglik: f64::NAN,
                val_aic: f64::NAN,
                val_bic: f64::NAN,
                se: DVector::from_vec(vec![0.1, 0.2]),
                z: DVector::from_vec(vec![5.0, -1.25]),
                p_values: DVector::from_vec(vec![0.25, 0.5]),
                ci_lower: DVector::from_vec(vec![0.3, -0.6]),
                ci_upper: DVector::from_vec(vec![0.7, 0.1]),
                n_train: 70,
                n_validation: 30,
                iterations: 12,
                converged: true,
            }),
        ),
        (
            "abort",
            Message::Abort { reason: "site \"3\" failed\\path".to_string() },
        ),
        ("bye", Message::Bye),
    ]
}
