//! Greedy per-(state, feature) parent selection from pairwise MI tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};
use crate::infotheory::{Candidate, MiStats};
use crate::io::SCHEMA;

/// Ranking rule for candidate parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranking {
    /// Sort by `I(X;Z|Q=q) - I(X;Z)` with all three admission criteria.
    #[default]
    Ear,
    /// Sort by `I(X;Z|Q=q)` alone; the marginal criterion is not applied.
    Cmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InductionConfig {
    /// Maximum parents per (state, feature).
    #[serde(rename = "M")]
    pub max_parents: usize,
    pub tau: f64,
    pub theta_f: f64,
    pub theta_cmi: f64,
    pub theta_mi: f64,
    pub ranking: Ranking,
}

impl Default for InductionConfig {
    fn default() -> Self {
        InductionConfig {
            max_parents: 3,
            tau: 0.8,
            theta_f: 0.0,
            theta_cmi: 0.01,
            theta_mi: 0.05,
            ranking: Ranking::Ear,
        }
    }
}

impl InductionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(DbmError::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        for (name, v) in [("theta_cmi", self.theta_cmi), ("theta_mi", self.theta_mi)] {
            if !(v >= 0.0) {
                return Err(DbmError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.theta_f.is_finite() {
            return Err(DbmError::Config("theta_f must be finite".into()));
        }
        Ok(())
    }
}

/// Parent lists for every (state, feature), in admission order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct DependencySpec {
    n_states: usize,
    dim: usize,
    parents: Vec<Vec<Candidate>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRepr {
    schema: String,
    n_states: usize,
    dim: usize,
    max_lag: usize,
    entries: Vec<SpecEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecEntry {
    state: usize,
    feature: usize,
    parents: Vec<Candidate>,
}

impl From<DependencySpec> for SpecRepr {
    fn from(s: DependencySpec) -> Self {
        let max_lag = s.max_lag();
        let entries = s
            .parents
            .into_iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty())
            .map(|(k, parents)| SpecEntry { state: k / s.dim, feature: k % s.dim, parents })
            .collect();
        SpecRepr { schema: SCHEMA.to_string(), n_states: s.n_states, dim: s.dim, max_lag, entries }
    }
}

impl TryFrom<SpecRepr> for DependencySpec {
    type Error = DbmError;

    fn try_from(r: SpecRepr) -> Result<Self> {
        if r.schema != SCHEMA {
            return Err(DbmError::Invalid(format!("unsupported schema {:?}", r.schema)));
        }
        let mut spec = DependencySpec::empty(r.n_states, r.dim);
        for e in r.entries {
            spec.set(e.state, e.feature, e.parents)?;
        }
        if spec.max_lag() != r.max_lag {
            return Err(DbmError::Invalid(format!(
                "max_lag {} does not match the largest parent lag {}",
                r.max_lag,
                spec.max_lag()
            )));
        }
        Ok(spec)
    }
}

impl DependencySpec {
    /// No parents anywhere: the plain HMM.
    pub fn empty(n_states: usize, dim: usize) -> Self {
        DependencySpec { n_states, dim, parents: vec![Vec::new(); n_states * dim] }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parents(&self, q: usize, i: usize) -> &[Candidate] {
        &self.parents[q * self.dim + i]
    }

    pub fn set(&mut self, q: usize, i: usize, parents: Vec<Candidate>) -> Result<()> {
        if q >= self.n_states || i >= self.dim {
            return Err(DbmError::Invalid(format!(
                "parent entry (state {q}, feature {i}) outside {}x{}",
                self.n_states, self.dim
            )));
        }
        for (k, p) in parents.iter().enumerate() {
            if p.lag == 0 {
                return Err(DbmError::Invalid(format!("state {q}, feature {i}: lag 0 parent")));
            }
            if p.source >= self.dim {
                return Err(DbmError::Invalid(format!("state {q}, feature {i}: source {} out of range", p.source)));
            }
            if parents[..k].contains(p) {
                return Err(DbmError::Invalid(format!(
                    "state {q}, feature {i}: duplicate parent (lag {}, source {})",
                    p.lag, p.source
                )));
            }
        }
        self.parents[q * self.dim + i] = parents;
        Ok(())
    }

    /// Largest lag used by any parent (0 for the empty spec).
    pub fn max_lag(&self) -> usize {
        self.parents.iter().flatten().map(|p| p.lag).max().unwrap_or(0)
    }

    pub fn total_edges(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    pub fn max_parents(&self) -> usize {
        self.parents.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.total_edges() == 0
    }

    /// Every `(state, feature, parent)` triple.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, Candidate)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .flat_map(move |(k, ps)| ps.iter().map(move |&p| (k / self.dim, k % self.dim, p)))
    }
}

/// Criterion 2: the candidate is admitted only if, for every already
/// admitted parent `z`, `I(candidate; z | Q) < tau * I(candidate; X_i | Q)`.
/// Missing redundancy estimates count as redundant.
pub fn pairwise_redundancy_check(
    stats: &MiStats,
    target: usize,
    candidate: usize,
    admitted: &[usize],
    tau: f64,
) -> bool {
    if admitted.is_empty() {
        return true;
    }
    let Some(relevance) = stats.pooled_conditional(target, candidate) else {
        return false;
    };
    admitted.iter().all(|&z| stats.redundancy(candidate, z).is_some_and(|r| r < tau * relevance))
}

/// Parent list for target feature `i` under state `q`, in admission order.
pub fn improved_pairwise(stats: &MiStats, q: usize, i: usize, config: &InductionConfig) -> Vec<Candidate> {
    if config.max_parents == 0 || q >= stats.n_states {
        return Vec::new();
    }
    let d = stats.n_candidates();
    let mut ranked: Vec<(f64, usize, f64, Option<f64>)> = (0..d)
        .filter_map(|c| {
            let cond = stats.conditional(q, i, c)?;
            let marg = stats.marginal(i, c);
            let score = match config.ranking {
                Ranking::Ear => cond - marg?,
                Ranking::Cmi => cond,
            };
            Some((score, c, cond, marg))
        })
        .collect();
    // Candidate index order is (lag, source) order, so it is the tie-break.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut admitted: Vec<usize> = Vec::new();
    for (score, c, cond, marg) in ranked {
        if score < config.theta_f {
            break;
        }
        if cond <= config.theta_cmi {
            continue;
        }
        if !pairwise_redundancy_check(stats, i, c, &admitted, config.tau) {
            continue;
        }
        if config.ranking == Ranking::Ear && !marg.is_some_and(|m| m < config.theta_mi) {
            continue;
        }
        admitted.push(c);
        if admitted.len() == config.max_parents {
            break;
        }
    }
    admitted.into_iter().map(|c| Candidate::from_index(c, stats.dim)).collect()
}

/// Runs [`improved_pairwise`] for every (state, feature) pair.
pub fn induce_all(stats: &MiStats, config: &InductionConfig) -> Result<DependencySpec> {
    config.validate()?;
    let lists: Vec<Vec<Candidate>> = (0..stats.n_states * stats.dim)
        .into_par_iter()
        .map(|k| improved_pairwise(stats, k / stats.dim, k % stats.dim, config))
        .collect();
    let mut spec = DependencySpec::empty(stats.n_states, stats.dim);
    for (k, parents) in lists.into_iter().enumerate() {
        spec.set(k / stats.dim, k % stats.dim, parents)?;
    }
    Ok(spec)
}
