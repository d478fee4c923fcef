//! Posterior quantities checked against brute-force path enumeration on toys.

mod common;

use dbm_core::inference::{backward_loglik, classify, forward_backward};
use dbm_core::model::{ChainTopology, DbmModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const TOL: f64 = 1e-9;

fn toy(rng: &mut ChaCha8Rng, classes: usize) -> (DbmModel, usize) {
    let states = rng.random_range(1..=3);
    let shape = ToyShape {
        classes,
        states,
        dim: rng.random_range(1..=3),
        mix: rng.random_range(1..=3),
        max_lag: rng.random_range(0..=2),
        edge_prob: 0.5,
        sparse: rng.random::<f64>() < 0.5,
    };
    let max_t = (1..=7).rev().find(|t| states.pow(*t as u32) <= 2187).unwrap();
    (random_model(rng, &shape), rng.random_range(1..=max_t))
}

/// `(T-1) x N x N` pairwise posteriors by visiting every path.
fn enumerated_xi(topo: &ChainTopology, emis: &[f64]) -> Vec<f64> {
    let n = topo.init.len();
    let t_len = emis.len() / n;
    let total = n.pow(t_len as u32);
    let mut weights = Vec::with_capacity(total);
    for code in 0..total {
        let path = decode(code, n, t_len);
        let mut s = topo.init[path[0]].ln() + emis[path[0]];
        for t in 1..t_len {
            s += topo.trans[path[t - 1]][path[t]].ln() + emis[t * n + path[t]];
        }
        weights.push(s);
    }
    let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = weights.iter().map(|w| (w - m).exp()).sum();
    let mut xi = vec![0.0; t_len.saturating_sub(1) * n * n];
    for (code, w) in weights.iter().enumerate() {
        let p = (w - m).exp() / z;
        let path = decode(code, n, t_len);
        for t in 1..t_len {
            xi[((t - 1) * n + path[t - 1]) * n + path[t]] += p;
        }
    }
    xi
}

fn decode(mut code: usize, n: usize, t_len: usize) -> Vec<usize> {
    let mut path = vec![0; t_len];
    for t in (0..t_len).rev() {
        path[t] = code % n;
        code /= n;
    }
    path
}

#[test]
fn transition_posteriors_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let (model, t_len) = toy(&mut rng, 1);
        let frames = random_frames(&mut rng, t_len, model.dim);
        let topo = &model.classes[0].topology;
        let want = enumerated_xi(topo, &direct_emissions(&model, 0, &frames));
        let post = forward_backward(&model, 0, &frames).unwrap();
        assert_eq!(post.xi.len(), want.len());
        for (a, b) in post.xi.iter().zip(&want) {
            assert!((a - b).abs() < TOL, "xi {a} vs {b}");
        }
    }
}

#[test]
fn component_posteriors_split_state_posteriors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..60 {
        let (model, t_len) = toy(&mut rng, 1);
        let frames = random_frames(&mut rng, t_len, model.dim);
        let oracle = enumerate_paths(&model.classes[0].topology, &direct_emissions(&model, 0, &frames));
        let post = forward_backward(&model, 0, &frames).unwrap();
        let n = post.n_states;
        for t in 0..t_len {
            for k in 0..n {
                let q = model.class_states(0).nth(k).unwrap();
                let comps = &model.states[q];
                // Responsibility of each component from single-component densities.
                let parts: Vec<f64> = (0..comps.len())
                    .map(|m| {
                        let mut single = model.clone();
                        single.states[q] = vec![comps[m].clone()];
                        single.states[q][0].weight = 1.0;
                        comps[m].weight.ln() + direct_logdensity(&single, q, t, &frames)
                    })
                    .collect();
                let total = direct_logdensity(&model, q, t, &frames);
                for (m, lp) in parts.iter().enumerate() {
                    let want = oracle.gamma[t * n + k] * (lp - total).exp();
                    assert!((post.gamma_m(t, k, m) - want).abs() < TOL);
                }
            }
        }
    }
}

#[test]
fn backward_pass_agrees_with_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..60 {
        let (model, t_len) = toy(&mut rng, 1);
        let frames = random_frames(&mut rng, t_len, model.dim);
        let oracle = enumerate_paths(&model.classes[0].topology, &direct_emissions(&model, 0, &frames));
        let b = backward_loglik(&model, 0, &frames).unwrap();
        assert!((b - oracle.loglik).abs() < TOL);
    }
}

#[test]
fn classification_picks_the_enumerated_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..40 {
        let (model, t_len) = toy(&mut rng, 3);
        let frames = random_frames(&mut rng, t_len, model.dim);
        let lls: Vec<f64> = (0..model.n_classes())
            .map(|c| enumerate_paths(&model.classes[c].topology, &direct_emissions(&model, c, &frames)).loglik)
            .collect();
        let (label, scores) = classify(&model, &frames).unwrap();
        let prior = -(model.n_classes() as f64).ln();
        for (c, (name, s)) in scores.iter().enumerate() {
            assert_eq!(name, &model.classes[c].label);
            assert!((s - (lls[c] + prior)).abs() < TOL);
        }
        let best = (0..lls.len()).max_by(|&a, &b| lls[a].total_cmp(&lls[b])).unwrap();
        if lls.iter().filter(|v| (**v - lls[best]).abs() < 1e-9).count() == 1 {
            assert_eq!(label, model.classes[best].label);
        }
    }
}
