//! Scratch: single-component horseshoe posterior vs brute-force quadrature.
use blipmeta_core::federation::{MapWeight, SiteSummary, SummaryEntry};
use blipmeta_core::mcmc::{mean, quantile};
use blipmeta_core::stage_two::*;

fn hc(x: f64) -> f64 {
    2.0 / (std::f64::consts::PI * (1.0 + x * x))
}

fn main() {
    // Data: K=3 identity sites on one component with a horseshoe prior.
    let xi = [-0.65f64, -0.35, -0.55];
    let sd = [0.22f64, 0.25, 0.2];

    // Density of u = tau * lambda (product of two standard half-Cauchys),
    // tabulated by 1-D quadrature.
    let n_t = 4000;
    let u_grid: Vec<f64> = (0..600).map(|i| 1e-4 + i as f64 * 0.02).collect();
    let p_u: Vec<f64> = u_grid
        .iter()
        .map(|&u| {
            let mut acc = 0.0;
            for i in 0..n_t {
                let t = 1e-5 + (i as f64 + 0.5) * (60.0 / n_t as f64);
                acc += hc(t) * hc(u / t) / t * (60.0 / n_t as f64);
            }
            acc
        })
        .collect();

    // 3-D quadrature over (psi, sigma, u).
    let (mut mass, mut m1, mut m2) = (0.0, 0.0, 0.0);
    let mut cdf_grid: Vec<(f64, f64)> = Vec::new();
    let n_psi = 1200;
    let n_sig = 400;
    for ip in 0..n_psi {
        let psi = -3.0 + 5.0 * (ip as f64 + 0.5) / n_psi as f64;
        let mut w_psi = 0.0;
        for is in 0..n_sig {
            let sig = 1e-5 + 8.0 * (is as f64 + 0.5) / n_sig as f64;
            let mut loglik = hc(sig).ln();
            for (x, s) in xi.iter().zip(&sd) {
                let var = s * s + sig * sig;
                loglik += -0.5 * var.ln() - (x - psi) * (x - psi) / (2.0 * var);
            }
            let lik = loglik.exp();
            // integrate the horseshoe prior density of psi over u
            let mut prior = 0.0;
            for (k, &u) in u_grid.iter().enumerate() {
                let pd = (-psi * psi / (2.0 * u * u)).exp() / (u * (2.0 * std::f64::consts::PI).sqrt());
                prior += pd * p_u[k] * 0.02;
            }
            w_psi += lik * prior;
        }
        mass += w_psi;
        m1 += w_psi * psi;
        m2 += w_psi * psi * psi;
        cdf_grid.push((psi, mass));
    }
    let qmean = m1 / mass;
    let qsd = (m2 / mass - qmean * qmean).sqrt();
    let q = |p: f64| {
        let target = p * mass;
        cdf_grid.iter().find(|(_, c)| *c >= target).map(|(x, _)| *x).unwrap()
    };
    println!("quadrature: mean {qmean:.4} sd {qsd:.4} CI [{:.4}, {:.4}]", q(0.025), q(0.975));

    // Sampler on the same model: one horseshoe component.
    let summaries: Vec<SiteSummary> = xi.iter().zip(&sd).enumerate().map(|(i, (&estimate, &sdv))| SiteSummary {
        protocol_version: 1, site_id: format!("s{i}"), model_fingerprint: "fp".into(),
        n_obs: 100, dof: 95,
        entries: vec![SummaryEntry { label: "a*x1".into(), estimate, sd: sdv,
            map_row: vec![MapWeight { psi_index: 0, weight: 1.0 }] }],
    }).collect();
    let graph = assemble_likelihood(&summaries, 1).unwrap();
    let priors = ResolvedPriors {
        mean: vec![MeanPrior::Horseshoe],
        variance: vec![VariancePrior::HalfCauchy { scale: 1.0 }],
    };
    let settings = McmcSettings { n_chains: 2, n_warmup: 2000, n_kept: 50_000, seed: 4 };
    let post = run_mcmc(&graph, &priors, &["a*x1".to_string()], &settings).unwrap();
    let d = post.draws(0);
    println!("sampler:    mean {:.4} sd {:.4} CI [{:.4}, {:.4}]",
        mean(&d), blipmeta_core::mcmc::sample_sd(&d), quantile(&d, 0.025), quantile(&d, 0.975));
}
