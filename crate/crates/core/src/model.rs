//! Per-class left-to-right chains with per-state Gaussian-mixture
//! linear-regression emissions over lagged parents.
//!
//! States are numbered globally: class 0 owns states `0..N_0`, class 1 the
//! next `N_1`, and so on. The dependency spec and emission tables use these
//! global ids. All densities are evaluated on standardized frames.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Frames, Sequence, Standardizer};
use crate::error::{DbmError, Result};
use crate::infotheory::Candidate;
use crate::io::{read_json, write_json, SCHEMA};
use crate::structure::DependencySpec;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

/// `ln(sum(exp(v)))`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut sum = 0.0;
    for &x in v {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainTopology {
    /// Row-stochastic `N x N` transition matrix.
    pub trans: Vec<Vec<f64>>,
    pub init: Vec<f64>,
}

impl ChainTopology {
    /// Single entry state, self-loop probability `stay` everywhere but the
    /// absorbing last state.
    pub fn left_to_right(n: usize, stay: f64) -> Self {
        let mut trans = vec![vec![0.0; n]; n];
        for (q, row) in trans.iter_mut().enumerate() {
            if q + 1 < n {
                row[q] = stay;
                row[q + 1] = 1.0 - stay;
            } else {
                row[q] = 1.0;
            }
        }
        let mut init = vec![0.0; n];
        init[0] = 1.0;
        ChainTopology { trans, init }
    }

    pub fn n_states(&self) -> usize {
        self.init.len()
    }

    fn free_params(&self) -> usize {
        let free = |row: &[f64]| row.iter().filter(|&&p| p > 0.0).count().saturating_sub(1);
        free(&self.init) + self.trans.iter().map(|r| free(r)).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionComponent {
    pub weight: f64,
    /// Row `i` holds one coefficient per parent of feature `i`, then the
    /// intercept.
    pub coefs: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl EmissionComponent {
    /// Intercept-only component.
    pub fn gaussian(weight: f64, mean: &[f64], variances: &[f64]) -> Self {
        EmissionComponent { weight, coefs: mean.iter().map(|&m| vec![m]).collect(), variances: variances.to_vec() }
    }

    pub fn intercept(&self, i: usize) -> f64 {
        *self.coefs[i].last().expect("coefficient row has an intercept")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassChain {
    pub label: String,
    pub topology: ChainTopology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbmModel {
    pub version: String,
    pub dim: usize,
    pub classes: Vec<ClassChain>,
    pub spec: DependencySpec,
    /// Mixture components for every global state.
    pub states: Vec<Vec<EmissionComponent>>,
    pub standardizer: Standardizer,
    pub variance_floor: f64,
}

/// Fills `out` with the parent vector for frame `t`: one value per parent
/// (0 where the lag reaches before the first frame) then the constant 1.
pub fn assemble_z(frames: &Frames, t: usize, parents: &[Candidate], out: &mut Vec<f64>) {
    out.clear();
    out.extend(parents.iter().map(|p| if t >= p.lag { frames.get(t - p.lag, p.source) } else { 0.0 }));
    out.push(1.0);
}

/// Component constants hoisted out of the per-frame loop.
struct ComponentCache {
    log_norm: f64,
    half_precision: Vec<f64>,
}

/// Per-state emission evaluator.
pub(crate) struct EmissionEval<'a> {
    model: &'a DbmModel,
    cache: Vec<Vec<ComponentCache>>,
}

impl<'a> EmissionEval<'a> {
    pub(crate) fn new(model: &'a DbmModel) -> Self {
        let cache = model
            .states
            .iter()
            .map(|comps| {
                comps
                    .iter()
                    .map(|c| ComponentCache {
                        log_norm: c.weight.ln() - 0.5 * c.variances.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>(),
                        half_precision: c.variances.iter().map(|v| 0.5 / v).collect(),
                    })
                    .collect()
            })
            .collect();
        EmissionEval { model, cache }
    }

    /// Joint log-density `ln p(m|q) + ln p(x_t|m, z, q)` per component.
    pub(crate) fn component_logprobs(&self, q: usize, frames: &Frames, t: usize, out: &mut [f64]) {
        let model = self.model;
        let x = frames.row(t);
        for ((comp, cache), o) in model.states[q].iter().zip(&self.cache[q]).zip(out.iter_mut()) {
            let mut acc = cache.log_norm;
            for (i, (row, hp)) in comp.coefs.iter().zip(&cache.half_precision).enumerate() {
                let parents = model.spec.parents(q, i);
                let mut mean = row[parents.len()];
                for (b, p) in row.iter().zip(parents) {
                    if t >= p.lag {
                        mean += b * frames.get(t - p.lag, p.source);
                    }
                }
                let r = x[i] - mean;
                acc -= r * r * hp;
            }
            *o = acc;
        }
    }

    pub(crate) fn logprob(&self, q: usize, frames: &Frames, t: usize, scratch: &mut Vec<f64>) -> f64 {
        scratch.resize(self.model.states[q].len(), 0.0);
        self.component_logprobs(q, frames, t, scratch);
        log_sum_exp(scratch)
    }

    /// `T x N_c` row-major table of emission log-densities for one class.
    pub(crate) fn matrix(&self, class: usize, frames: &Frames) -> Vec<f64> {
        let states = self.model.class_states(class);
        let n = states.len();
        let mut out = vec![0.0; frames.len() * n];
        let mut scratch = Vec::new();
        for t in 0..frames.len() {
            for (k, q) in states.clone().enumerate() {
                out[t * n + k] = self.logprob(q, frames, t, &mut scratch);
            }
        }
        out
    }
}

impl DbmModel {
    /// Gaussian-mixture HMM with the given per-class topologies and
    /// emissions (empty dependency spec).
    pub fn hmm(
        dim: usize,
        classes: Vec<ClassChain>,
        states: Vec<Vec<EmissionComponent>>,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let n: usize = classes.iter().map(|c| c.topology.n_states()).sum();
        let model = DbmModel {
            version: SCHEMA.to_string(),
            dim,
            classes,
            spec: DependencySpec::empty(n, dim),
            states,
            standardizer,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        };
        model.check()?;
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    /// Global state ids of one class.
    pub fn class_states(&self, class: usize) -> Range<usize> {
        let start: usize = self.classes[..class].iter().map(|c| c.topology.n_states()).sum();
        start..start + self.classes[class].topology.n_states()
    }

    pub fn class_of_state(&self, q: usize) -> usize {
        let mut end = 0;
        for (c, chain) in self.classes.iter().enumerate() {
            end += chain.topology.n_states();
            if q < end {
                return c;
            }
        }
        panic!("state {q} out of range");
    }

    /// Mixture emission log-density of frame `t` under global state `q`.
    pub fn emission_logprob(&self, q: usize, t: usize, frames: &Frames) -> f64 {
        EmissionEval::new(self).logprob(q, frames, t, &mut Vec::new())
    }

    /// Maps raw frames into the model's standardized space.
    pub fn prepare(&self, frames: &Frames) -> Frames {
        self.standardizer.transform(frames)
    }

    pub fn prepare_sequence(&self, seq: &Sequence) -> Sequence {
        Sequence { frames: self.prepare(&seq.frames), label: seq.label.clone() }
    }

    /// Every violated invariant, as a readable message.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.version != SCHEMA {
            out.push(format!("version {:?}, expected {SCHEMA:?}", self.version));
        }
        let n: usize = self.classes.iter().map(|c| c.topology.n_states()).sum();
        if n != self.states.len() {
            out.push(format!("topologies have {n} states, emissions cover {}", self.states.len()));
        }
        if self.spec.n_states() != self.states.len() || self.spec.dim() != self.dim {
            out.push(format!(
                "dependency spec is {}x{}, model is {}x{}",
                self.spec.n_states(),
                self.spec.dim(),
                self.states.len(),
                self.dim
            ));
        }
        if self.standardizer.dim() != self.dim {
            out.push(format!("standardizer has {} features, model has {}", self.standardizer.dim(), self.dim));
        }
        if !(self.variance_floor > 0.0) {
            out.push(format!("variance floor {} is not positive", self.variance_floor));
        }
        for chain in &self.classes {
            let c = &chain.label;
            let topo = &chain.topology;
            let n = topo.n_states();
            if n == 0 {
                out.push(format!("class {c}: no states"));
            }
            if (topo.init.iter().sum::<f64>() - 1.0).abs() > 1e-12 || topo.init.iter().any(|p| !(*p >= 0.0)) {
                out.push(format!("class {c}: initial distribution is not a probability vector"));
            }
            if topo.trans.len() != n {
                out.push(format!("class {c}: transition matrix has {} rows for {n} states", topo.trans.len()));
            }
            for (q, row) in topo.trans.iter().enumerate() {
                if row.len() != n || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 || row.iter().any(|p| !(*p >= 0.0)) {
                    out.push(format!("class {c}, state {q}: transition row is not a probability vector"));
                }
            }
        }
        for (q, comps) in self.states.iter().enumerate() {
            let c = if q < n { self.classes[self.class_of_state(q)].label.as_str() } else { "?" };
            if comps.is_empty() {
                out.push(format!("class {c}, state {q}: no mixture components"));
                continue;
            }
            let w: f64 = comps.iter().map(|m| m.weight).sum();
            if (w - 1.0).abs() > 1e-12 || comps.iter().any(|m| !(m.weight >= 0.0)) {
                out.push(format!("class {c}, state {q}: mixture weights sum to {w}"));
            }
            for (m, comp) in comps.iter().enumerate() {
                if comp.coefs.len() != self.dim || comp.variances.len() != self.dim {
                    out.push(format!("class {c}, state {q}, component {m}: wrong feature count"));
                    continue;
                }
                for i in 0..self.dim {
                    let want = if q < self.spec.n_states() && i < self.spec.dim() {
                        self.spec.parents(q, i).len() + 1
                    } else {
                        1
                    };
                    if comp.coefs[i].len() != want {
                        out.push(format!(
                            "class {c}, state {q}, component {m}, feature {i}: {} coefficients, expected {want}",
                            comp.coefs[i].len()
                        ));
                    }
                    if comp.coefs[i].iter().any(|b| !b.is_finite()) {
                        out.push(format!("class {c}, state {q}, component {m}, feature {i}: non-finite coefficient"));
                    }
                    let v = comp.variances[i];
                    if !(v >= self.variance_floor) || !v.is_finite() {
                        out.push(format!(
                            "class {c}, state {q}, component {m}, feature {i}: variance {v} below floor {}",
                            self.variance_floor
                        ));
                    }
                }
            }
        }
        out
    }

    /// Errors with all violations joined, if any.
    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(DbmError::Invalid(format!("invalid model: {}", v.join("; "))))
        }
    }

    /// Same parameters under a new dependency spec. Coefficients of parents
    /// present in both specs carry over; new parents start at 0, so the
    /// emission densities are unchanged when no parent is removed.
    pub fn with_structure(&self, spec: DependencySpec) -> Result<DbmModel> {
        if spec.n_states() != self.n_states() || spec.dim() != self.dim {
            return Err(DbmError::Invalid(format!(
                "spec is {}x{}, model is {}x{}",
                spec.n_states(),
                spec.dim(),
                self.n_states(),
                self.dim
            )));
        }
        let mut out = self.clone();
        for (q, comps) in out.states.iter_mut().enumerate() {
            for comp in comps {
                for i in 0..self.dim {
                    let old = self.spec.parents(q, i);
                    let row = &comp.coefs[i];
                    let mut new_row: Vec<f64> = spec
                        .parents(q, i)
                        .iter()
                        .map(|p| old.iter().position(|o| o == p).map_or(0.0, |k| row[k]))
                        .collect();
                    new_row.push(row[old.len()]);
                    comp.coefs[i] = new_row;
                }
            }
        }
        out.spec = spec;
        Ok(out)
    }

    /// Free scalar parameters: `k - 1` per probability row with `k` nonzero
    /// entries (initial, transition, mixture weights), every regression
    /// coefficient including intercepts, and every variance.
    pub fn param_count(&self) -> usize {
        let chains: usize = self.classes.iter().map(|c| c.topology.free_params()).sum();
        let emissions: usize = self
            .states
            .iter()
            .map(|comps| {
                comps.iter().filter(|m| m.weight > 0.0).count().saturating_sub(1)
                    + comps
                        .iter()
                        .map(|m| m.coefs.iter().map(Vec::len).sum::<usize>() + m.variances.len())
                        .sum::<usize>()
            })
            .sum();
        chains + emissions
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: DbmModel = read_json(path)?;
        model.check().map_err(|e| match e {
            DbmError::Invalid(m) => DbmError::Invalid(format!("{}: {m}", path.display())),
            e => e,
        })?;
        Ok(model)
    }
}
