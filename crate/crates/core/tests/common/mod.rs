//! Independent oracles shared by the integration tests: random toy models,
//! a direct mixture density, exhaustive path enumeration, and a reference
//! Gaussian-mixture HMM trained with scaled-probability Baum-Welch.

#![allow(dead_code)]

use dbm_core::datamodel::{Frames, Sequence, SequenceDataset, Standardizer};
use dbm_core::infotheory::Candidate;
use dbm_core::model::{ChainTopology, ClassChain, DbmModel, EmissionComponent};
use dbm_core::structure::DependencySpec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn simplex(rng: &mut ChaCha8Rng, n: usize, keep: &[bool]) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|k| if keep[k] { rng.random::<f64>() + 0.05 } else { 0.0 }).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Random chain: dense, or with random structural zeros (every row keeps
/// at least one entry).
pub fn random_topology(rng: &mut ChaCha8Rng, n: usize, sparse: bool) -> ChainTopology {
    let mask = |rng: &mut ChaCha8Rng, own: usize| -> Vec<bool> {
        (0..n).map(|k| k == own || !sparse || rng.random::<f64>() < 0.6).collect()
    };
    let first = rng.random_range(0..n);
    let m = mask(rng, first);
    let init = simplex(rng, n, &m);
    let trans = (0..n)
        .map(|j| {
            let m = mask(rng, j);
            simplex(rng, n, &m)
        })
        .collect();
    ChainTopology { trans, init }
}

pub struct ToyShape {
    pub classes: usize,
    pub states: usize,
    pub dim: usize,
    pub mix: usize,
    pub max_lag: usize,
    pub edge_prob: f64,
    pub sparse: bool,
}

/// Random model with random parents and coefficients.
pub fn random_model(rng: &mut ChaCha8Rng, shape: &ToyShape) -> DbmModel {
    let d = shape.dim;
    let chains: Vec<ClassChain> = (0..shape.classes)
        .map(|c| ClassChain { label: format!("c{c}"), topology: random_topology(rng, shape.states, shape.sparse) })
        .collect();
    let total = shape.classes * shape.states;
    let states: Vec<Vec<EmissionComponent>> = (0..total)
        .map(|_| {
            let w = simplex(rng, shape.mix, &vec![true; shape.mix]);
            (0..shape.mix)
                .map(|m| {
                    let mean: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
                    let var: Vec<f64> = (0..d).map(|_| 0.3 + 1.5 * rng.random::<f64>()).collect();
                    EmissionComponent::gaussian(w[m], &mean, &var)
                })
                .collect()
        })
        .collect();
    let hmm = DbmModel::hmm(d, chains, states, Standardizer::identity(d)).unwrap();
    if shape.max_lag == 0 {
        return hmm;
    }
    let mut spec = DependencySpec::empty(total, d);
    for q in 0..total {
        for i in 0..d {
            let mut ps: Vec<Candidate> = Vec::new();
            for lag in 1..=shape.max_lag {
                for source in 0..d {
                    if ps.len() < 3 && rng.random::<f64>() < shape.edge_prob {
                        ps.push(Candidate { lag, source });
                    }
                }
            }
            spec.set(q, i, ps).unwrap();
        }
    }
    let mut model = hmm.with_structure(spec).unwrap();
    for comp in model.states.iter_mut().flatten() {
        for row in &mut comp.coefs {
            let last = row.len() - 1;
            for b in &mut row[..last] {
                *b = 0.4 * normal(rng);
            }
        }
    }
    model
}

pub fn random_frames(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Frames {
    Frames::new(t, d, (0..t * d).map(|_| normal(rng)).collect()).unwrap()
}

/// `ln p(x_t | q)` written out from the definition: parents read from
/// earlier frames (0 before the start), intercept last in each row.
pub fn direct_logdensity(model: &DbmModel, q: usize, t: usize, frames: &Frames) -> f64 {
    let mut terms = Vec::new();
    for comp in &model.states[q] {
        if comp.weight == 0.0 {
            continue;
        }
        let mut lp = comp.weight.ln();
        for i in 0..model.dim {
            let row = &comp.coefs[i];
            let mut mean = row[row.len() - 1];
            for (k, p) in model.spec.parents(q, i).iter().enumerate() {
                let z = if t >= p.lag { frames.get(t - p.lag, p.source) } else { 0.0 };
                mean += row[k] * z;
            }
            let v = comp.variances[i];
            let r = frames.get(t, i) - mean;
            lp += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * r * r / v;
        }
        terms.push(lp);
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `T x N` emission table of class `c` from [`direct_logdensity`].
pub fn direct_emissions(model: &DbmModel, c: usize, frames: &Frames) -> Vec<f64> {
    let states: Vec<usize> = model.class_states(c).collect();
    let mut out = Vec::with_capacity(frames.len() * states.len());
    for t in 0..frames.len() {
        for &q in &states {
            out.push(direct_logdensity(model, q, t, frames));
        }
    }
    out
}

pub struct Enumerated {
    pub loglik: f64,
    /// `T x N` state posteriors.
    pub gamma: Vec<f64>,
    pub best_path: Vec<usize>,
    pub best_score: f64,
}

/// Visits every state path. Ties for the best path keep the
/// lexicographically smallest path.
pub fn enumerate_paths(topo: &ChainTopology, emis: &[f64]) -> Enumerated {
    let n = topo.init.len();
    let t_len = emis.len() / n;
    let total = n.pow(t_len as u32);
    let mut scores = Vec::with_capacity(total);
    let mut path = vec![0usize; t_len];
    let mut best_path = vec![0; t_len];
    let mut best_score = f64::NEG_INFINITY;
    for code in 0..total {
        let mut c = code;
        for t in (0..t_len).rev() {
            path[t] = c % n;
            c /= n;
        }
        let mut s = topo.init[path[0]].ln() + emis[path[0]];
        for t in 1..t_len {
            s += topo.trans[path[t - 1]][path[t]].ln() + emis[t * n + path[t]];
        }
        if s > best_score {
            best_score = s;
            best_path.copy_from_slice(&path);
        }
        scores.push(s);
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = probs.iter().sum();
    let mut gamma = vec![0.0; t_len * n];
    for (code, p) in probs.iter().enumerate() {
        let mut c = code;
        for t in (0..t_len).rev() {
            gamma[t * n + c % n] += p / z;
            c /= n;
        }
    }
    Enumerated { loglik: m + z.ln(), gamma, best_path, best_score }
}

/// Plain diagonal Gaussian-mixture HMM parameters for one class.
#[derive(Clone, Debug)]
pub struct RefChain {
    pub init: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    /// `[state][component]`.
    pub weights: Vec<Vec<f64>>,
    /// `[state][component][feature]`.
    pub means: Vec<Vec<Vec<f64>>>,
    pub vars: Vec<Vec<Vec<f64>>>,
}

/// Copies the parameters of a structure-free model.
pub fn reference_from(model: &DbmModel) -> Vec<RefChain> {
    (0..model.n_classes())
        .map(|c| {
            let topo = &model.classes[c].topology;
            let states: Vec<usize> = model.class_states(c).collect();
            RefChain {
                init: topo.init.clone(),
                trans: topo.trans.clone(),
                weights: states.iter().map(|&q| model.states[q].iter().map(|m| m.weight).collect()).collect(),
                means: states
                    .iter()
                    .map(|&q| {
                        model.states[q].iter().map(|m| (0..model.dim).map(|i| m.intercept(i)).collect()).collect()
                    })
                    .collect(),
                vars: states.iter().map(|&q| model.states[q].iter().map(|m| m.variances.clone()).collect()).collect(),
            }
        })
        .collect()
}

fn gauss(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut p = 1.0;
    for i in 0..x.len() {
        let r = x[i] - mean[i];
        p *= (-0.5 * r * r / var[i]).exp() / (2.0 * std::f64::consts::PI * var[i]).sqrt();
    }
    p
}

struct Accum {
    init: Vec<f64>,
    trans: Vec<Vec<f64>>,
    mass: Vec<Vec<f64>>,
    sum: Vec<Vec<Vec<f64>>>,
    sq: Vec<Vec<Vec<f64>>>,
}

/// Scaled forward-backward over every sequence of the chain's class.
/// Returns the total log-likelihood and the accumulated counts.
fn ref_estep(ch: &RefChain, seqs: &[&Sequence]) -> (f64, Accum) {
    let n = ch.init.len();
    let nm = ch.weights[0].len();
    let d = ch.means[0][0].len();
    let mut acc = Accum {
        init: vec![0.0; n],
        trans: vec![vec![0.0; n]; n],
        mass: vec![vec![0.0; nm]; n],
        sum: vec![vec![vec![0.0; d]; nm]; n],
        sq: vec![vec![vec![0.0; d]; nm]; n],
    };
    let mut ll = 0.0;
    for s in seqs {
        let t_len = s.frames.len();
        let comp: Vec<Vec<Vec<f64>>> = (0..t_len)
            .map(|t| {
                (0..n)
                    .map(|k| {
                        (0..nm)
                            .map(|m| ch.weights[k][m] * gauss(s.frames.row(t), &ch.means[k][m], &ch.vars[k][m]))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let b: Vec<Vec<f64>> = comp.iter().map(|row| row.iter().map(|c| c.iter().sum()).collect()).collect();
        let mut alpha = vec![vec![0.0; n]; t_len];
        let mut scale = vec![0.0; t_len];
        for k in 0..n {
            alpha[0][k] = ch.init[k] * b[0][k];
        }
        scale[0] = alpha[0].iter().sum();
        alpha[0].iter_mut().for_each(|a| *a /= scale[0]);
        for t in 1..t_len {
            for k in 0..n {
                let mut a = 0.0;
                for j in 0..n {
                    a += alpha[t - 1][j] * ch.trans[j][k];
                }
                alpha[t][k] = a * b[t][k];
            }
            scale[t] = alpha[t].iter().sum();
            let c = scale[t];
            alpha[t].iter_mut().for_each(|a| *a /= c);
        }
        let mut beta = vec![vec![1.0; n]; t_len];
        for t in (0..t_len - 1).rev() {
            for j in 0..n {
                let mut v = 0.0;
                for k in 0..n {
                    v += ch.trans[j][k] * b[t + 1][k] * beta[t + 1][k];
                }
                beta[t][j] = v / scale[t + 1];
            }
        }
        ll += scale.iter().map(|c| c.ln()).sum::<f64>();
        for t in 0..t_len {
            for k in 0..n {
                let g = alpha[t][k] * beta[t][k];
                if t == 0 {
                    acc.init[k] += g;
                }
                if b[t][k] > 0.0 {
                    for m in 0..nm {
                        let w = g * comp[t][k][m] / b[t][k];
                        acc.mass[k][m] += w;
                        for (i, &x) in s.frames.row(t).iter().enumerate() {
                            acc.sum[k][m][i] += w * x;
                            acc.sq[k][m][i] += w * x * x;
                        }
                    }
                }
            }
            if t + 1 < t_len {
                for j in 0..n {
                    for k in 0..n {
                        acc.trans[j][k] += alpha[t][j] * ch.trans[j][k] * b[t + 1][k] * beta[t + 1][k] / scale[t + 1];
                    }
                }
            }
        }
    }
    (ll, acc)
}

fn ref_mstep(ch: &RefChain, acc: &Accum, floor: f64) -> RefChain {
    let n = ch.init.len();
    let nm = ch.weights[0].len();
    let mut out = ch.clone();
    let s: f64 = acc.init.iter().sum();
    out.init = acc.init.iter().map(|v| v / s).collect();
    for j in 0..n {
        let s: f64 = acc.trans[j].iter().sum();
        if s > 0.0 {
            out.trans[j] = acc.trans[j].iter().map(|v| v / s).collect();
        }
        let total: f64 = acc.mass[j].iter().sum();
        for m in 0..nm {
            let w = acc.mass[j][m];
            out.weights[j][m] = w / total;
            for i in 0..out.means[j][m].len() {
                let mu = acc.sum[j][m][i] / w;
                out.means[j][m][i] = mu;
                out.vars[j][m][i] = (acc.sq[j][m][i] / w - mu * mu).max(floor);
            }
        }
    }
    out
}

/// Log-likelihood trace of reference EM: the starting value, then one entry
/// per iteration, `iters` iterations in all.
pub fn reference_trace(start: &[RefChain], data: &SequenceDataset, iters: usize, floor: f64) -> Vec<f64> {
    let groups: Vec<Vec<&Sequence>> = data.classes.iter().map(|c| data.of_class(c).collect()).collect();
    let mut chains = start.to_vec();
    let mut trace = Vec::with_capacity(iters + 1);
    for it in 0..=iters {
        let mut total = 0.0;
        let mut next = Vec::with_capacity(chains.len());
        for (ch, seqs) in chains.iter().zip(&groups) {
            let (ll, acc) = ref_estep(ch, seqs);
            total += ll;
            if it < iters {
                next.push(ref_mstep(ch, &acc, floor));
            }
        }
        trace.push(total);
        if it < iters {
            chains = next;
        }
    }
    trace
}

/// Sequences sampled from a random structure-free model.
pub fn sample_dataset(
    rng: &mut ChaCha8Rng,
    model: &DbmModel,
    per_class: usize,
    len: (usize, usize),
) -> SequenceDataset {
    let mut seqs = Vec::new();
    for c in 0..model.n_classes() {
        let topo = &model.classes[c].topology;
        let states: Vec<usize> = model.class_states(c).collect();
        for _ in 0..per_class {
            let t_len = rng.random_range(len.0..=len.1);
            let mut data = Vec::with_capacity(t_len * model.dim);
            let mut k = draw(rng, &topo.init);
            for t in 0..t_len {
                if t > 0 {
                    k = draw(rng, &topo.trans[k]);
                }
                let comps = &model.states[states[k]];
                let w: Vec<f64> = comps.iter().map(|m| m.weight).collect();
                let m = &comps[draw(rng, &w)];
                for i in 0..model.dim {
                    data.push(m.intercept(i) + m.variances[i].sqrt() * normal(rng));
                }
            }
            seqs.push(Sequence {
                frames: Frames::new(t_len, model.dim, data).unwrap(),
                label: model.classes[c].label.clone(),
            });
        }
    }
    SequenceDataset::new(seqs, model.classes.iter().map(|c| c.label.clone()).collect()).unwrap()
}

fn draw(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|v| *v > 0.0).unwrap()
}
