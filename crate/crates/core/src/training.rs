//! EM for the whole multi-class model. Classes share no parameters, so one
//! joint E-step/M-step is the same as fitting every class separately.

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Sequence, SequenceDataset, Standardizer};
use crate::error::{DbmError, Result};
use crate::inference::forward_backward;
use crate::model::{assemble_z, ChainTopology, ClassChain, DbmModel, EmissionComponent};

/// Components lighter than this are treated as dead.
pub const DEAD_MASS: f64 = 1e-8;

/// Sequences per E-step work unit. Fixed so the reduction order, and hence
/// every bit of the result, does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub ridge: f64,
    pub variance_floor: f64,
    pub n_mix: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { max_iters: 50, rel_tol: 1e-5, ridge: 1e-6, variance_floor: 1e-4, n_mix: 1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.n_mix == 0 {
            return Err(DbmError::Config("max_iters and n_mix must be at least 1".into()));
        }
        for (name, v) in [("rel_tol", self.rel_tol), ("ridge", self.ridge), ("variance_floor", self.variance_floor)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(DbmError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Weighted moments of one feature's regression: `sum w z z'`, `sum w x z`,
/// `sum w x^2` over the parent vector `z` (intercept last).
#[derive(Debug, Clone, PartialEq)]
pub struct RowStats {
    pub zz: Vec<f64>,
    pub xz: Vec<f64>,
    pub xx: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats {
    pub mass: f64,
    pub rows: Vec<RowStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// `[global state][component]`.
    pub components: Vec<Vec<ComponentStats>>,
    /// Expected transition counts per class, `N x N`.
    pub trans: Vec<Vec<Vec<f64>>>,
    /// Expected initial-state counts per class.
    pub init: Vec<Vec<f64>>,
    pub loglik: f64,
    pub frames: usize,
}

impl SufficientStats {
    pub fn zeros(model: &DbmModel) -> Self {
        let components = (0..model.n_states())
            .map(|q| {
                (0..model.states[q].len())
                    .map(|_| ComponentStats {
                        mass: 0.0,
                        rows: (0..model.dim)
                            .map(|i| {
                                let p = model.spec.parents(q, i).len() + 1;
                                RowStats { zz: vec![0.0; p * p], xz: vec![0.0; p], xx: 0.0 }
                            })
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        SufficientStats {
            components,
            trans: model
                .classes
                .iter()
                .map(|c| vec![vec![0.0; c.topology.n_states()]; c.topology.n_states()])
                .collect(),
            init: model.classes.iter().map(|c| vec![0.0; c.topology.n_states()]).collect(),
            loglik: 0.0,
            frames: 0,
        }
    }

    /// Fieldwise sum.
    pub fn add(&mut self, other: &SufficientStats) {
        for (a, b) in self.components.iter_mut().flatten().zip(other.components.iter().flatten()) {
            a.mass += b.mass;
            for (ra, rb) in a.rows.iter_mut().zip(&b.rows) {
                ra.zz.iter_mut().zip(&rb.zz).for_each(|(x, y)| *x += y);
                ra.xz.iter_mut().zip(&rb.xz).for_each(|(x, y)| *x += y);
                ra.xx += rb.xx;
            }
        }
        for (a, b) in self.trans.iter_mut().flatten().zip(other.trans.iter().flatten()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.init.iter_mut().zip(&other.init) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.loglik += other.loglik;
        self.frames += other.frames;
    }

    fn accumulate(&mut self, model: &DbmModel, seq: &Sequence, index: usize) -> Result<()> {
        let class = model
            .class_index(&seq.label)
            .ok_or_else(|| DbmError::Invalid(format!("model has no class {:?}", seq.label)))?;
        let ps = forward_backward(model, class, &seq.frames)
            .map_err(|e| DbmError::Numerical(format!("sequence {index}: {e}")))?;
        if ps.gamma.iter().chain(&ps.gamma_m).chain(&ps.xi).any(|v| !v.is_finite()) {
            return Err(DbmError::Numerical(format!("sequence {index}: non-finite posterior")));
        }
        let states = model.class_states(class);
        let n = states.len();
        let frames = &seq.frames;
        let mut z = Vec::new();
        for t in 0..frames.len() {
            let x = frames.row(t);
            for (k, q) in states.clone().enumerate() {
                for (m, cs) in self.components[q].iter_mut().enumerate() {
                    let w = ps.gamma_m(t, k, m);
                    if w == 0.0 {
                        continue;
                    }
                    cs.mass += w;
                    for (i, row) in cs.rows.iter_mut().enumerate() {
                        assemble_z(frames, t, model.spec.parents(q, i), &mut z);
                        let p = z.len();
                        for a in 0..p {
                            let wa = w * z[a];
                            row.xz[a] += wa * x[i];
                            for b in 0..p {
                                row.zz[a * p + b] += wa * z[b];
                            }
                        }
                        row.xx += w * x[i] * x[i];
                    }
                }
            }
            if t + 1 < frames.len() {
                for j in 0..n {
                    for k in 0..n {
                        self.trans[class][j][k] += ps.xi(t, j, k);
                    }
                }
            }
        }
        for k in 0..n {
            self.init[class][k] += ps.gamma(0, k);
        }
        self.loglik += ps.loglik;
        self.frames += frames.len();
        Ok(())
    }
}

/// Posterior-weighted statistics and total log-likelihood over a dataset.
pub fn estep(model: &DbmModel, data: &SequenceDataset) -> Result<(SufficientStats, f64)> {
    let seqs: Vec<(usize, &Sequence)> = data.sequences.iter().enumerate().collect();
    let parts: Vec<SufficientStats> = seqs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = SufficientStats::zeros(model);
            for &(k, seq) in chunk {
                s.accumulate(model, seq, k)?;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let mut total = SufficientStats::zeros(model);
    for p in &parts {
        total.add(p);
    }
    let ll = total.loglik;
    Ok((total, ll))
}

/// Ridge solution of `(zz + ridge*mass*I') b = xz`, where `I'` skips the
/// intercept, and the floored weighted residual variance.
pub fn solve_row(row: &RowStats, mass: f64, ridge: f64, floor: f64) -> Result<(Vec<f64>, f64)> {
    let p = row.xz.len();
    let mut a = DMatrix::from_row_slice(p, p, &row.zz);
    for k in 0..p - 1 {
        a[(k, k)] += ridge * mass;
    }
    let rhs = DVector::from_column_slice(&row.xz);
    let b = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a.lu().solve(&rhs).ok_or_else(|| DbmError::Numerical("singular regression normal equations".into()))?,
    };
    let zz = DMatrix::from_row_slice(p, p, &row.zz);
    let quad = (b.transpose() * &zz * &b)[(0, 0)];
    let resid = (row.xx - 2.0 * b.dot(&rhs) + quad) / mass;
    if !resid.is_finite() || b.iter().any(|v| !v.is_finite()) {
        return Err(DbmError::Numerical("non-finite regression solution".into()));
    }
    Ok((b.iter().copied().collect(), resid.max(floor)))
}

/// Closed-form parameter update from accumulated statistics.
pub fn mstep(model: &DbmModel, stats: &SufficientStats, config: &TrainConfig) -> Result<DbmModel> {
    let mut out = model.clone();
    out.variance_floor = config.variance_floor;
    for (q, (comps, cstats)) in out.states.iter_mut().zip(&stats.components).enumerate() {
        let total: f64 = cstats.iter().map(|c| c.mass).sum();
        if total < DEAD_MASS {
            warn!("state {q} received no posterior mass; keeping its emission parameters");
            continue;
        }
        let mut alive = vec![true; comps.len()];
        for (m, (comp, cs)) in comps.iter_mut().zip(cstats).enumerate() {
            if cs.mass < DEAD_MASS {
                alive[m] = false;
                continue;
            }
            comp.weight = cs.mass / total;
            for (i, row) in cs.rows.iter().enumerate() {
                let (b, v) = solve_row(row, cs.mass, config.ridge, config.variance_floor)
                    .map_err(|e| DbmError::Numerical(format!("state {q}, component {m}, feature {i}: {e}")))?;
                comp.coefs[i] = b;
                comp.variances[i] = v;
            }
        }
        for m in 0..comps.len() {
            if alive[m] {
                continue;
            }
            let heavy = (0..comps.len())
                .filter(|&k| alive[k])
                .max_by(|&a, &b| comps[a].weight.total_cmp(&comps[b].weight).then(b.cmp(&a)))
                .expect("a state with mass has a live component");
            info!("state {q}: component {m} died; splitting component {heavy}");
            let mut twin = comps[heavy].clone();
            for i in 0..twin.coefs.len() {
                let sd = twin.variances[i].sqrt();
                let last = twin.coefs[i].len() - 1;
                twin.coefs[i][last] += 0.5 * sd;
                comps[heavy].coefs[i][last] -= 0.5 * sd;
            }
            let w = comps[heavy].weight / 2.0;
            comps[heavy].weight = w;
            twin.weight = w;
            comps[m] = twin;
            alive[m] = true;
        }
        renormalize(comps.iter_mut().map(|c| &mut c.weight));
    }
    for (chain, (tc, ic)) in out.classes.iter_mut().zip(stats.trans.iter().zip(&stats.init)) {
        let topo = &mut chain.topology;
        for (row, counts) in topo.trans.iter_mut().zip(tc) {
            let s: f64 = counts.iter().sum();
            if s > DEAD_MASS {
                row.iter_mut().zip(counts).for_each(|(p, c)| *p = c / s);
                renormalize(row.iter_mut());
            }
        }
        let s: f64 = ic.iter().sum();
        if s > DEAD_MASS {
            topo.init.iter_mut().zip(ic).for_each(|(p, c)| *p = c / s);
            renormalize(topo.init.iter_mut());
        }
    }
    Ok(out)
}

/// Pushes the rounding residue of a probability vector onto its largest
/// entry so the sum is 1 to within one ulp.
fn renormalize<'a>(it: impl Iterator<Item = &'a mut f64>) {
    let mut v: Vec<&mut f64> = it.collect();
    let s: f64 = v.iter().map(|p| **p).sum();
    if let Some(big) = v.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        **big += 1.0 - s;
    }
}

/// Runs EM until the relative improvement drops to `rel_tol` or
/// `max_iters` M-steps have been taken. The trace holds the log-likelihood
/// of every evaluated model; the returned model is the one scored last.
pub fn em_fit(model: &DbmModel, data: &SequenceDataset, config: &TrainConfig) -> Result<(DbmModel, Vec<f64>)> {
    config.validate()?;
    let mut current = model.clone();
    let (mut stats, mut ll) = estep(&current, data)?;
    let mut trace = vec![ll];
    for it in 0..config.max_iters {
        let next = mstep(&current, &stats, config)?;
        let (s, l) = estep(&next, data)?;
        trace.push(l);
        debug!("EM iteration {}: loglik {l}", it + 1);
        current = next;
        let gain = l - ll;
        stats = s;
        ll = l;
        if gain <= config.rel_tol * trace[trace.len() - 2].abs() {
            break;
        }
    }
    Ok((current, trace))
}

/// `n_mix` components around one Gaussian, offset by half a standard
/// deviation along random sign patterns.
fn split_components(mean: &[f64], var: &[f64], n_mix: usize, rng: &mut ChaCha8Rng) -> Vec<EmissionComponent> {
    let d = mean.len();
    let mut comps = Vec::with_capacity(n_mix);
    let mut signs = vec![1.0; d];
    for m in 0..n_mix {
        if n_mix == 1 {
            comps.push(EmissionComponent::gaussian(1.0, mean, var));
            continue;
        }
        if m % 2 == 0 {
            signs = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        } else {
            signs.iter_mut().for_each(|s| *s = -*s);
        }
        // Odd mixture counts leave the last component at the mean.
        let scale = if m + 1 == n_mix && m % 2 == 0 { 0.0 } else { 0.5 };
        let mu: Vec<f64> = (0..d).map(|i| mean[i] + scale * signs[i] * var[i].sqrt()).collect();
        comps.push(EmissionComponent::gaussian(1.0 / n_mix as f64, &mu, var));
    }
    comps
}

/// States every frame is assigned to under an even left-to-right split.
fn uniform_segmentation(len: usize, n: usize) -> Vec<usize> {
    (0..len).map(|t| (t * n) / len).collect()
}

/// Bootstrap HMM: uniform segmentation and per-state moments, EM with one
/// Gaussian per state, then each state split into its mixture components by
/// half a standard deviation and EM again. The trace is the final EM run's.
pub fn init_bootstrap(
    data: &SequenceDataset,
    states_per_class: &[usize],
    standardizer: Standardizer,
    config: &TrainConfig,
) -> Result<(DbmModel, Vec<f64>)> {
    if config.n_mix == 1 {
        let model = init_segmental(data, states_per_class, standardizer, config)?;
        return em_fit(&model, data, config);
    }
    let single = TrainConfig { n_mix: 1, ..*config };
    let start = init_segmental(data, states_per_class, standardizer, &single)?;
    let (mut model, _) = em_fit(&start, data, &single)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for comps in &mut model.states {
        let var = comps[0].variances.clone();
        let mean: Vec<f64> = (0..model.dim).map(|i| comps[0].intercept(i)).collect();
        *comps = split_components(&mean, &var, config.n_mix, &mut rng);
    }
    model.check()?;
    em_fit(&model, data, config)
}

/// The initial model [`init_bootstrap`] hands to EM.
pub fn init_segmental(
    data: &SequenceDataset,
    states_per_class: &[usize],
    standardizer: Standardizer,
    config: &TrainConfig,
) -> Result<DbmModel> {
    config.validate()?;
    if states_per_class.len() != data.classes.len() || states_per_class.contains(&0) {
        return Err(DbmError::Config(format!(
            "need a positive state count for each of {} classes",
            data.classes.len()
        )));
    }
    let d = data.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut classes = Vec::new();
    let mut states = Vec::new();
    for (label, &n) in data.classes.iter().zip(states_per_class) {
        let seqs: Vec<&Sequence> = data.of_class(label).collect();
        if seqs.is_empty() {
            return Err(DbmError::Invalid(format!("class {label:?} has no training sequences")));
        }
        let mut sum = vec![vec![0.0; d]; n];
        let mut sq = vec![vec![0.0; d]; n];
        let mut count = vec![0usize; n];
        let mut frames = 0usize;
        for s in &seqs {
            frames += s.len();
            for (t, q) in uniform_segmentation(s.len(), n).into_iter().enumerate() {
                count[q] += 1;
                for (i, &x) in s.frames.row(t).iter().enumerate() {
                    sum[q][i] += x;
                    sq[q][i] += x * x;
                }
            }
        }
        let pooled_n: usize = count.iter().sum();
        let pooled_sum: Vec<f64> = (0..d).map(|i| sum.iter().map(|s| s[i]).sum()).collect();
        let pooled_sq: Vec<f64> = (0..d).map(|i| sq.iter().map(|s| s[i]).sum()).collect();
        for q in 0..n {
            let (c, s1, s2) = if count[q] > 0 {
                (count[q] as f64, &sum[q], &sq[q])
            } else {
                warn!("class {label:?}, state {q}: no frames under uniform segmentation; using class moments");
                (pooled_n as f64, &pooled_sum, &pooled_sq)
            };
            let mean: Vec<f64> = s1.iter().map(|v| v / c).collect();
            let var: Vec<f64> = s2.iter().zip(&mean).map(|(v, m)| (v / c - m * m).max(config.variance_floor)).collect();
            let mut comps = split_components(&mean, &var, config.n_mix, &mut rng);
            renormalize(comps.iter_mut().map(|c| &mut c.weight));
            states.push(comps);
        }
        let avg_duration = frames as f64 / (seqs.len() * n) as f64;
        let stay = (1.0 - 1.0 / avg_duration).clamp(0.05, 0.95);
        classes.push(ClassChain { label: label.clone(), topology: ChainTopology::left_to_right(n, stay) });
    }
    let mut model = DbmModel::hmm(d, classes, states, standardizer)?;
    model.variance_floor = config.variance_floor;
    model.check()?;
    Ok(model)
}
