//! Likelihood graph assembled from validated site summaries.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::federation::{MapWeight, SiteSummary};

/// One observation node: `estimate ~ N(sum_t weights[t] * psi_site[t], sd^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNode {
    pub label: String,
    pub estimate: f64,
    pub sd: f64,
    pub weights: Vec<MapWeight>,
}

/// One site's contribution: its observation nodes and the set of global
/// parameter indices it carries site effects for.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteBlock {
    pub site_id: String,
    /// Parameter indices with nonzero weight in at least one node, ascending.
    pub active: Vec<usize>,
    pub nodes: Vec<ObsNode>,
}

/// The full pooling likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGraph {
    pub n_psi: usize,
    pub sites: Vec<SiteBlock>,
    /// Parameter indices that appear in no map row of any site: they carry
    /// prior-only nodes and their posteriors equal their priors.
    pub inestimable: Vec<usize>,
}

impl LikelihoodGraph {
    /// Number of sites carrying a site effect for index `t`.
    pub fn n_sites_active(&self, t: usize) -> usize {
        self.sites
            .iter()
            .filter(|s| s.active.binary_search(&t).is_ok())
            .count()
    }
}

/// Builds the likelihood graph: one observation node per transmitted blip
/// entry, site effects only for the parameters a site's rows reference.
///
/// Rejects duplicate site ids, zero standard deviations (a saturated
/// stage-one fit carries infinite precision and cannot enter the
/// likelihood), out-of-range parameter indices, and zero map rows.
pub fn assemble_likelihood(summaries: &[SiteSummary], n_psi: usize) -> Result<LikelihoodGraph> {
    let mut seen = BTreeSet::new();
    let mut sites = Vec::with_capacity(summaries.len());
    let mut covered = vec![false; n_psi];

    for summary in summaries {
        if !seen.insert(summary.site_id.clone()) {
            return Err(Error::DuplicateSite(summary.site_id.clone()));
        }
        let mut active = BTreeSet::new();
        let mut nodes = Vec::with_capacity(summary.entries.len());
        for entry in &summary.entries {
            if !(entry.sd > 0.0) {
                return Err(Error::DegenerateSd {
                    site_id: summary.site_id.clone(),
                    label: entry.label.clone(),
                });
            }
            if entry.map_row.iter().all(|w| w.weight == 0.0) {
                return Err(Error::UnmappableSparsity {
                    column: entry.label.clone(),
                    reason: "zero map row".into(),
                });
            }
            for w in &entry.map_row {
                if w.psi_index >= n_psi {
                    return Err(Error::PsiIndexOutOfRange {
                        site_id: summary.site_id.clone(),
                        label: entry.label.clone(),
                        index: w.psi_index,
                        len: n_psi,
                    });
                }
                if w.weight != 0.0 {
                    active.insert(w.psi_index);
                    covered[w.psi_index] = true;
                }
            }
            nodes.push(ObsNode {
                label: entry.label.clone(),
                estimate: entry.estimate,
                sd: entry.sd,
                weights: entry.map_row.clone(),
            });
        }
        sites.push(SiteBlock {
            site_id: summary.site_id.clone(),
            active: active.into_iter().collect(),
            nodes,
        });
    }

    let inestimable = covered
        .iter()
        .enumerate()
        .filter(|(_, c)| !**c)
        .map(|(i, _)| i)
        .collect();

    Ok(LikelihoodGraph {
        n_psi,
        sites,
        inestimable,
    })
}
