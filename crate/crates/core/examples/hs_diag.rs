//! Scratch: which parameters carry the worst split R-hat.
use blipmeta_core::simgen::*;
use blipmeta_core::stage_one::run_site_pipeline;
use blipmeta_core::stage_two::*;

fn main() {
    let sc = Scenario {
        setting: Setting::ManyCovariates,
        n_covariates: 10,
        k_sites: 10,
        n_mean: 200,
        confounding_scenario: 1,
        heterogeneity: Heterogeneity::varying_effects(0.1),
        true_theta: None,
        sigma_eps2: 1.0,
        seed: 808,
    };
    let spec = sc.model_spec();
    let labels = spec.psi_labels();
    let priors = PriorConfig::horseshoe(&spec).resolve(&labels).unwrap();
    let mut worst: Vec<(f64, String, u32)> = Vec::new();
    for rep in 0..60u32 {
        let data = generate_replicate(&sc, rep).unwrap();
        let summaries: Vec<_> = data.sites.iter().map(|s| run_site_pipeline(&spec, s).unwrap()).collect();
        let graph = assemble_likelihood(&summaries, spec.n_blip()).unwrap();
        let settings = McmcSettings { n_chains: 2, n_warmup: 1000, n_kept: 1000, seed: 9000 + rep as u64 };
        let post = run_mcmc(&graph, &priors, &labels, &settings).unwrap();
        for pidx in 0..post.n_params() {
            let r = post.rhat(pidx);
            worst.push((r, post.param_names[pidx].clone(), rep));
        }
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (r, name, rep) in worst.iter().take(12) {
        println!("rhat {:.4} {} (rep {})", r, name, rep);
    }
}
