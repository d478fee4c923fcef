//! Forward-backward, Viterbi and classification.
//!
//! Parents are observed, so given the frames the hidden chain is still
//! first-order Markov. These are the standard log-domain recursions run over
//! a precomputed `T x N` emission table.

use rayon::prelude::*;

use crate::datamodel::{Frames, SequenceDataset};
use crate::error::{DbmError, Result};
use crate::infotheory::Alignment;
use crate::model::{log_sum_exp, ChainTopology, DbmModel, EmissionEval};

/// Posteriors of one sequence under one class chain. Indices are local to
/// the class (`0..N`).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    pub n_states: usize,
    pub n_mix: usize,
    /// `T x N` state posteriors.
    pub gamma: Vec<f64>,
    /// `(T-1) x N x N` transition posteriors.
    pub xi: Vec<f64>,
    /// `T x N x n_mix` (state, component) posteriors; components a state
    /// lacks stay 0.
    pub gamma_m: Vec<f64>,
    pub loglik: f64,
}

impl PosteriorSet {
    pub fn gamma(&self, t: usize, k: usize) -> f64 {
        self.gamma[t * self.n_states + k]
    }

    pub fn xi(&self, t: usize, j: usize, k: usize) -> f64 {
        self.xi[(t * self.n_states + j) * self.n_states + k]
    }

    pub fn gamma_m(&self, t: usize, k: usize, m: usize) -> f64 {
        self.gamma_m[(t * self.n_states + k) * self.n_mix + m]
    }
}

fn log_matrix(topo: &ChainTopology) -> (Vec<f64>, Vec<f64>) {
    let n = topo.n_states();
    let init = topo.init.iter().map(|p| p.ln()).collect();
    let mut trans = Vec::with_capacity(n * n);
    for row in &topo.trans {
        trans.extend(row.iter().map(|p| p.ln()));
    }
    (init, trans)
}

fn check_dim(model: &DbmModel, frames: &Frames) -> Result<()> {
    if frames.dim() != model.dim {
        return Err(DbmError::Invalid(format!("sequence has {} features, model expects {}", frames.dim(), model.dim)));
    }
    if frames.is_empty() {
        return Err(DbmError::Invalid("empty sequence".into()));
    }
    Ok(())
}

/// Emission log-densities `T x N_c` for class `class`.
pub fn emission_matrix(model: &DbmModel, class: usize, frames: &Frames) -> Vec<f64> {
    EmissionEval::new(model).matrix(class, frames)
}

/// Forward log-likelihood given a `T x N` emission table.
pub fn forward_from_emissions(topo: &ChainTopology, emis: &[f64]) -> f64 {
    let n = topo.n_states();
    let (li, lt) = log_matrix(topo);
    let t_len = emis.len() / n;
    let mut alpha: Vec<f64> = (0..n).map(|k| li[k] + emis[k]).collect();
    let mut next = vec![0.0; n];
    for t in 1..t_len {
        for k in 0..n {
            let col = (0..n).map(|j| alpha[j] + lt[j * n + k]);
            let mut terms = col.filter(|x| *x != f64::NEG_INFINITY);
            let Some(mut m) = terms.next() else {
                next[k] = f64::NEG_INFINITY;
                continue;
            };
            let mut s = 1.0;
            for x in terms {
                if x > m {
                    s = s * (m - x).exp() + 1.0;
                    m = x;
                } else {
                    s += (x - m).exp();
                }
            }
            next[k] = m + s.ln() + emis[t * n + k];
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    log_sum_exp(&alpha)
}

/// `ln p(x_{1:T} | class)`.
pub fn forward_loglik(model: &DbmModel, class: usize, frames: &Frames) -> Result<f64> {
    check_dim(model, frames)?;
    let emis = emission_matrix(model, class, frames);
    Ok(forward_from_emissions(&model.classes[class].topology, &emis))
}

/// Log-domain forward and backward tables plus the likelihood from each end.
struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    loglik: f64,
    backward_loglik: f64,
}

fn lattice(topo: &ChainTopology, emis: &[f64]) -> Lattice {
    let n = topo.n_states();
    let (li, lt) = log_matrix(topo);
    let t_len = emis.len() / n;
    let mut alpha = vec![0.0; t_len * n];
    let mut beta = vec![0.0; t_len * n];
    let mut terms = vec![0.0; n];
    for k in 0..n {
        alpha[k] = li[k] + emis[k];
    }
    for t in 1..t_len {
        for k in 0..n {
            for j in 0..n {
                terms[j] = alpha[(t - 1) * n + j] + lt[j * n + k];
            }
            alpha[t * n + k] = log_sum_exp(&terms) + emis[t * n + k];
        }
    }
    for t in (0..t_len - 1).rev() {
        for j in 0..n {
            for k in 0..n {
                terms[k] = lt[j * n + k] + emis[(t + 1) * n + k] + beta[(t + 1) * n + k];
            }
            beta[t * n + j] = log_sum_exp(&terms);
        }
    }
    let loglik = log_sum_exp(&alpha[(t_len - 1) * n..]);
    for k in 0..n {
        terms[k] = li[k] + emis[k] + beta[k];
    }
    let backward_loglik = log_sum_exp(&terms);
    Lattice { alpha, beta, loglik, backward_loglik }
}

/// Likelihood computed by the backward pass, for consistency checks.
pub fn backward_loglik(model: &DbmModel, class: usize, frames: &Frames) -> Result<f64> {
    check_dim(model, frames)?;
    let emis = emission_matrix(model, class, frames);
    Ok(lattice(&model.classes[class].topology, &emis).backward_loglik)
}

pub fn forward_backward(model: &DbmModel, class: usize, frames: &Frames) -> Result<PosteriorSet> {
    check_dim(model, frames)?;
    let topo = &model.classes[class].topology;
    let states = model.class_states(class);
    let n = states.len();
    let t_len = frames.len();
    let eval = EmissionEval::new(model);
    let n_mix = states.clone().map(|q| model.states[q].len()).max().unwrap_or(1);

    // Component terms are needed for the mixture posteriors anyway.
    let mut comp = vec![f64::NEG_INFINITY; t_len * n * n_mix];
    let mut emis = vec![0.0; t_len * n];
    for t in 0..t_len {
        for (k, q) in states.clone().enumerate() {
            let m = model.states[q].len();
            let slot = &mut comp[(t * n + k) * n_mix..(t * n + k) * n_mix + m];
            eval.component_logprobs(q, frames, t, slot);
            emis[t * n + k] = log_sum_exp(slot);
        }
    }
    let lat = lattice(topo, &emis);
    let ll = lat.loglik;
    if !ll.is_finite() {
        return Err(DbmError::Numerical(format!("non-finite sequence log-likelihood {ll}")));
    }
    let (_, lt) = log_matrix(topo);
    let mut gamma = vec![0.0; t_len * n];
    let mut gamma_m = vec![0.0; t_len * n * n_mix];
    for t in 0..t_len {
        for k in 0..n {
            let g = (lat.alpha[t * n + k] + lat.beta[t * n + k] - ll).exp();
            gamma[t * n + k] = g;
            let e = emis[t * n + k];
            for m in 0..n_mix {
                let c = comp[(t * n + k) * n_mix + m];
                if c > f64::NEG_INFINITY {
                    gamma_m[(t * n + k) * n_mix + m] = g * (c - e).exp();
                }
            }
        }
    }
    let mut xi = vec![0.0; t_len.saturating_sub(1) * n * n];
    for t in 0..t_len.saturating_sub(1) {
        for j in 0..n {
            for k in 0..n {
                let v = lat.alpha[t * n + j] + lt[j * n + k] + emis[(t + 1) * n + k] + lat.beta[(t + 1) * n + k] - ll;
                xi[(t * n + j) * n + k] = v.exp();
            }
        }
    }
    Ok(PosteriorSet { n_states: n, n_mix, gamma, xi, gamma_m, loglik: ll })
}

/// Most probable local state path and its joint log-score. Among equally
/// good predecessors or final states the lower index wins.
pub fn viterbi_from_emissions(topo: &ChainTopology, emis: &[f64]) -> (Vec<usize>, f64) {
    let n = topo.n_states();
    let (li, lt) = log_matrix(topo);
    let t_len = emis.len() / n;
    let mut delta: Vec<f64> = (0..n).map(|k| li[k] + emis[k]).collect();
    let mut next = vec![0.0; n];
    let mut back = vec![0usize; t_len * n];
    for t in 1..t_len {
        for k in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for j in 0..n {
                let v = delta[j] + lt[j * n + k];
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            next[k] = best + emis[t * n + k];
            back[t * n + k] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut arg = 0;
    for k in 1..n {
        if delta[k] > delta[arg] {
            arg = k;
        }
    }
    let score = delta[arg];
    let mut path = vec![0; t_len];
    path[t_len - 1] = arg;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t * n + path[t]];
    }
    (path, score)
}

/// Viterbi path in local state indices and its log-score.
pub fn viterbi(model: &DbmModel, class: usize, frames: &Frames) -> Result<(Vec<usize>, f64)> {
    check_dim(model, frames)?;
    let emis = emission_matrix(model, class, frames);
    Ok(viterbi_from_emissions(&model.classes[class].topology, &emis))
}

/// Predicted label and per-class log-scores (likelihood plus a uniform
/// class prior). Ties go to the lexicographically smallest label.
pub fn classify(model: &DbmModel, frames: &Frames) -> Result<(String, Vec<(String, f64)>)> {
    let prior = -(model.n_classes() as f64).ln();
    let scores: Vec<(String, f64)> = (0..model.n_classes())
        .map(|c| Ok((model.classes[c].label.clone(), forward_loglik(model, c, frames)? + prior)))
        .collect::<Result<_>>()?;
    let mut best: Option<&(String, f64)> = None;
    for s in &scores {
        best = match best {
            None => Some(s),
            Some(b) if s.1 > b.1 || (s.1 == b.1 && s.0 < b.0) => Some(s),
            keep => keep,
        };
    }
    let label = best.expect("model has at least one class").0.clone();
    Ok((label, scores))
}

/// Log-likelihood of each sequence under its own class chain.
pub fn dataset_loglik(model: &DbmModel, data: &SequenceDataset) -> Result<Vec<f64>> {
    data.sequences
        .par_iter()
        .map(|s| {
            let c = model
                .class_index(&s.label)
                .ok_or_else(|| DbmError::Invalid(format!("model has no class {:?}", s.label)))?;
            forward_loglik(model, c, &s.frames)
        })
        .collect()
}

/// Viterbi path of every sequence under its own class, in global state ids.
pub fn viterbi_alignment(model: &DbmModel, data: &SequenceDataset) -> Result<Alignment> {
    let paths = data
        .sequences
        .par_iter()
        .map(|s| {
            let c = model
                .class_index(&s.label)
                .ok_or_else(|| DbmError::Invalid(format!("model has no class {:?}", s.label)))?;
            let offset = model.class_states(c).start;
            let (path, _) = viterbi(model, c, &s.frames)?;
            Ok(path.into_iter().map(|k| k + offset).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok(Alignment { n_states: model.n_states(), paths })
}
