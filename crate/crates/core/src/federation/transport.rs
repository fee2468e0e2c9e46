//! In-process summary provider: every site engine lives in this process.
//!
//! This is the centralized execution mode. It runs the identical per-site
//! code as the TCP agent, in the same ascending site-id order the network
//! coordinator uses, so a federated fit and an in-process fit of the same
//! partitioned data agree to the last bit.

use crate::coordinator::{SplitSite, SummaryProvider};
use crate::error::{Error, Result};
use crate::model::Theta;
use crate::site::{ApproximationMethod, Partition, SiteEngine, SiteSummary};

pub struct InProcessProvider {
    engines: Vec<SiteEngine>,
    method: ApproximationMethod,
    penalize_intercept: bool,
}

impl InProcessProvider {
    /// Build from split site data; engines are ordered by site id.
    pub fn new(
        splits: Vec<SplitSite>,
        method: ApproximationMethod,
        penalize_intercept: bool,
    ) -> Result<Self> {
        let engines = splits
            .into_iter()
            .map(|s| SiteEngine::new(s.train, s.validation))
            .collect();
        Self::from_engines(engines, method, penalize_intercept)
    }

    pub fn from_engines(
        mut engines: Vec<SiteEngine>,
        method: ApproximationMethod,
        penalize_intercept: bool,
    ) -> Result<Self> {
        if engines.is_empty() {
            return Err(Error::invalid_argument("InProcessProvider: no sites"));
        }
        engines.sort_by(|a, b| a.site_id().cmp(b.site_id()));
        for pair in engines.windows(2) {
            if pair[0].site_id() == pair[1].site_id() {
                return Err(Error::invalid_argument(format!(
                    "InProcessProvider: duplicate site id '{}'",
                    pair[0].site_id()
                )));
            }
        }
        let p = engines[0].dim();
        if let Some(e) = engines.iter().find(|e| e.dim() != p) {
            return Err(Error::invalid_argument(format!(
                "InProcessProvider: site '{}' has {} covariates, expected {}",
                e.site_id(),
                e.dim(),
                p
            )));
        }
        Ok(InProcessProvider { engines, method, penalize_intercept })
    }

    pub fn total_rows(&self) -> usize {
        self.engines.iter().map(SiteEngine::total_rows).sum()
    }
}

impl SummaryProvider for InProcessProvider {
    fn site_count(&self) -> usize {
        self.engines.len()
    }

    fn dim(&self) -> usize {
        self.engines[0].dim()
    }

    fn site_ids(&self) -> Vec<String> {
        self.engines.iter().map(|e| e.site_id().to_string()).collect()
    }

    fn collect(
        &mut self,
        theta: &Theta,
        lambda: f64,
        partition: Partition,
    ) -> Result<Vec<SiteSummary>> {
        let method = self.method;
        let penalize = self.penalize_intercept;
        self.engines
            .iter_mut()
            .map(|e| e.summary(theta, method, lambda, penalize, partition))
            .collect()
    }
}
