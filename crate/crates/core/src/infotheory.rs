//! Pairwise mutual-information estimation from aligned sequence data.
//!
//! Candidates for target feature `i` at frame `t` are the scalars
//! `x[t - lag][source]` for `lag` in `1..=max_past_lag` and every source
//! feature. Conditional tables pool the frames whose aligned state is `q`
//! (the target frame's state; parents are read at their lag whatever their
//! own state). Frames without a parent at lag `l` are skipped for that lag.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::SequenceDataset;
use crate::error::{DbmError, Result};
use crate::io::SCHEMA;

/// Largest |rho| the Gaussian estimator will use.
const RHO_CLIP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Plug-in MI on an equal-frequency `bins x bins` table.
    Histogram,
    /// `-0.5 ln(1 - rho^2)` from the sample correlation.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiConfig {
    pub estimator: Estimator,
    pub bins: usize,
    pub min_count: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig { estimator: Estimator::Gaussian, bins: 8, min_count: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagWindow {
    pub max_past_lag: usize,
}

impl LagWindow {
    pub fn new(max_past_lag: usize) -> Result<Self> {
        if max_past_lag == 0 {
            return Err(DbmError::Config("max_past_lag must be at least 1".into()));
        }
        Ok(LagWindow { max_past_lag })
    }

    /// Number of candidate scalars for a `dim`-dimensional observation.
    pub fn n_candidates(&self, dim: usize) -> usize {
        self.max_past_lag * dim
    }
}

/// A lagged scalar `x[t - lag][source]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub lag: usize,
    pub source: usize,
}

impl Candidate {
    #[inline]
    pub fn index(self, dim: usize) -> usize {
        (self.lag - 1) * dim + self.source
    }

    #[inline]
    pub fn from_index(c: usize, dim: usize) -> Self {
        Candidate { lag: c / dim + 1, source: c % dim }
    }
}

/// Hard assignment of every frame to a (global) chain state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub n_states: usize,
    pub paths: Vec<Vec<usize>>,
}

impl Alignment {
    fn check(&self, dataset: &SequenceDataset) -> Result<()> {
        if self.paths.len() != dataset.len() {
            return Err(DbmError::Invalid(format!(
                "alignment covers {} sequences, dataset has {}",
                self.paths.len(),
                dataset.len()
            )));
        }
        for (k, (p, s)) in self.paths.iter().zip(&dataset.sequences).enumerate() {
            if p.len() != s.len() {
                return Err(DbmError::Invalid(format!(
                    "alignment of sequence {k} has {} frames, sequence has {}",
                    p.len(),
                    s.len()
                )));
            }
            if let Some(&q) = p.iter().find(|&&q| q >= self.n_states) {
                return Err(DbmError::Invalid(format!(
                    "alignment of sequence {k} uses state {q} of {}",
                    self.n_states
                )));
            }
        }
        Ok(())
    }
}

/// Estimated pairwise MI tables. `None` marks a cell with fewer than
/// `min_count` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiStats {
    pub schema: String,
    pub dim: usize,
    pub max_lag: usize,
    pub n_states: usize,
    pub config: MiConfig,
    /// Candidate list in index order (index = `(lag - 1) * dim + source`).
    pub candidates: Vec<Candidate>,
    /// `I(X_i; Z_c)` pooled over all frames, laid out `[i][c]`.
    pub marginal: Vec<Option<f64>>,
    pub marginal_counts: Vec<usize>,
    /// `I(X_i; Z_c | Q = q)`, laid out `[q][i][c]`.
    pub conditional: Vec<Option<f64>>,
    pub conditional_counts: Vec<usize>,
    /// `I(Z_a; Z_b | Q)`: per-state estimates averaged with weights
    /// proportional to their sample counts, laid out `[a][b]`.
    pub redundancy: Vec<Option<f64>>,
    /// Aligned frames per state.
    pub state_frames: Vec<usize>,
}

impl MiStats {
    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    #[inline]
    pub fn marginal(&self, i: usize, c: usize) -> Option<f64> {
        self.marginal[i * self.n_candidates() + c]
    }

    #[inline]
    pub fn conditional(&self, q: usize, i: usize, c: usize) -> Option<f64> {
        self.conditional[(q * self.dim + i) * self.n_candidates() + c]
    }

    #[inline]
    pub fn redundancy(&self, a: usize, b: usize) -> Option<f64> {
        self.redundancy[a * self.n_candidates() + b]
    }

    /// `I(X_i; Z_c | Q)`: the per-state conditional cells averaged with
    /// weights proportional to their sample counts.
    pub fn pooled_conditional(&self, i: usize, c: usize) -> Option<f64> {
        let d = self.n_candidates();
        let mut num = 0.0;
        let mut den = 0usize;
        for q in 0..self.n_states {
            let k = (q * self.dim + i) * d + c;
            if let Some(v) = self.conditional[k] {
                num += v * self.conditional_counts[k] as f64;
                den += self.conditional_counts[k];
            }
        }
        (den > 0).then(|| num / den as f64)
    }

    /// Builds tables directly, e.g. from exact oracle values.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tables(
        dim: usize,
        max_lag: usize,
        n_states: usize,
        marginal: Vec<Option<f64>>,
        conditional: Vec<Option<f64>>,
        redundancy: Vec<Option<f64>>,
        state_frames: Vec<usize>,
    ) -> Result<Self> {
        let d = dim * max_lag;
        if marginal.len() != dim * d
            || conditional.len() != n_states * dim * d
            || redundancy.len() != d * d
            || state_frames.len() != n_states
        {
            return Err(DbmError::Invalid("MI table shapes do not match dim/max_lag/n_states".into()));
        }
        let count = |v: &Option<f64>, n: usize| if v.is_some() { n } else { 0 };
        let total: usize = state_frames.iter().sum();
        let marginal_counts = marginal.iter().map(|v| count(v, total)).collect();
        let conditional_counts =
            conditional.iter().enumerate().map(|(k, v)| count(v, state_frames[k / (dim * d)])).collect();
        Ok(MiStats {
            schema: SCHEMA.to_string(),
            dim,
            max_lag,
            n_states,
            config: MiConfig::default(),
            candidates: (0..d).map(|c| Candidate::from_index(c, dim)).collect(),
            marginal,
            marginal_counts,
            conditional,
            conditional_counts,
            redundancy,
            state_frames,
        })
    }
}

/// A sample column preprocessed for one estimator.
#[derive(Debug, Clone)]
enum Prepared {
    Gaussian { centered: Vec<f64>, sum_sq: f64 },
    Histogram { bins: Vec<u16>, n_bins: usize },
}

impl Prepared {
    fn new(values: &[f64], config: &MiConfig) -> Self {
        match config.estimator {
            Estimator::Gaussian => {
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
                let sum_sq = centered.iter().map(|c| c * c).sum();
                Prepared::Gaussian { centered, sum_sq }
            }
            Estimator::Histogram => {
                Prepared::Histogram { bins: equal_frequency_bins(values, config.bins), n_bins: config.bins }
            }
        }
    }

    fn mi(&self, other: &Prepared) -> f64 {
        match (self, other) {
            (Prepared::Gaussian { centered: a, sum_sq: sa }, Prepared::Gaussian { centered: b, sum_sq: sb }) => {
                let denom = (sa * sb).sqrt();
                if !(denom > 0.0) || sa.min(*sb) <= 1e-300 {
                    warn!("zero-variance input to the Gaussian MI estimator; returning 0");
                    return 0.0;
                }
                let cov: f64 = a.iter().zip(b).map(|(x, z)| x * z).sum();
                let rho = (cov / denom).clamp(-RHO_CLIP, RHO_CLIP);
                (-0.5 * (1.0 - rho * rho).ln()).max(0.0)
            }
            (Prepared::Histogram { bins: a, n_bins }, Prepared::Histogram { bins: b, .. }) => plugin_mi(a, b, *n_bins),
            _ => unreachable!("columns prepared for different estimators"),
        }
    }
}

/// Equal-frequency bin index for every value; equal values share a bin.
fn equal_frequency_bins(values: &[f64], n_bins: usize) -> Vec<u16> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut bins = vec![0u16; n];
    let mut first = 0;
    for r in 0..n {
        if r > 0 && values[order[r]] != values[order[r - 1]] {
            first = r;
        }
        bins[order[r]] = ((first * n_bins) / n).min(n_bins - 1) as u16;
    }
    bins
}

fn plugin_mi(a: &[u16], b: &[u16], n_bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; n_bins * n_bins];
    let mut pa = vec![0usize; n_bins];
    let mut pb = vec![0usize; n_bins];
    for (&x, &z) in a.iter().zip(b) {
        joint[x as usize * n_bins + z as usize] += 1;
        pa[x as usize] += 1;
        pb[z as usize] += 1;
    }
    let mut terms: Vec<f64> = Vec::with_capacity(n_bins * n_bins);
    for x in 0..n_bins {
        for z in 0..n_bins {
            let c = joint[x * n_bins + z];
            if c > 0 {
                let p = c as f64 / n;
                terms.push(p * (c as f64 * n / (pa[x] as f64 * pb[z] as f64)).ln());
            }
        }
    }
    // Sorting makes the sum independent of argument order.
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().max(0.0)
}

/// Estimated MI between two equal-length samples, in nats, or `None` when
/// fewer than `config.min_count` samples are available.
pub fn pairwise_mi(x: &[f64], z: &[f64], config: &MiConfig) -> Result<Option<f64>> {
    if x.len() != z.len() {
        return Err(DbmError::Invalid(format!("sample lengths differ: {} vs {}", x.len(), z.len())));
    }
    if x.len() < config.min_count.max(2) {
        return Ok(None);
    }
    Ok(Some(Prepared::new(x, config).mi(&Prepared::new(z, config))))
}

/// Frames contributing to one conditioning subset at one minimum lag.
struct FrameSet {
    /// `(sequence index, frame index)` pairs.
    frames: Vec<(usize, usize)>,
}

impl FrameSet {
    fn collect(alignment: &Alignment, min_t: usize, state: Option<usize>) -> Self {
        let mut frames = Vec::new();
        for (s, path) in alignment.paths.iter().enumerate() {
            for (t, &q) in path.iter().enumerate().skip(min_t) {
                if state.is_none_or(|want| want == q) {
                    frames.push((s, t));
                }
            }
        }
        FrameSet { frames }
    }

    fn column(&self, dataset: &SequenceDataset, lag: usize, feature: usize) -> Vec<f64> {
        self.frames.iter().map(|&(s, t)| dataset.sequences[s].frames.get(t - lag, feature)).collect()
    }
}

/// Target-by-candidate MI for every target feature and every source at one
/// lag, over one frame set. Returns `[i][j]` values and the sample count.
fn lag_block(dataset: &SequenceDataset, set: &FrameSet, lag: usize, config: &MiConfig) -> (Vec<Option<f64>>, usize) {
    let d = dataset.dim;
    let n = set.frames.len();
    if n < config.min_count.max(2) {
        return (vec![None; d * d], n);
    }
    let targets: Vec<Prepared> = (0..d).map(|i| Prepared::new(&set.column(dataset, 0, i), config)).collect();
    let sources: Vec<Prepared> = (0..d).map(|j| Prepared::new(&set.column(dataset, lag, j), config)).collect();
    let mut out = Vec::with_capacity(d * d);
    for t in &targets {
        for s in &sources {
            out.push(Some(t.mi(s)));
        }
    }
    (out, n)
}

/// Builds the marginal, per-state conditional, and candidate-redundancy
/// tables over the lag window.
pub fn compute_mistats(
    dataset: &SequenceDataset,
    alignment: &Alignment,
    window: LagWindow,
    config: &MiConfig,
) -> Result<MiStats> {
    alignment.check(dataset)?;
    if config.bins < 2 && config.estimator == Estimator::Histogram {
        return Err(DbmError::Config("histogram estimator needs at least 2 bins".into()));
    }
    let dim = dataset.dim;
    let max_lag = window.max_past_lag;
    let d = window.n_candidates(dim);
    let n_states = alignment.n_states;

    let mut state_frames = vec![0usize; n_states];
    for path in &alignment.paths {
        for &q in path {
            state_frames[q] += 1;
        }
    }

    // Target x candidate blocks: one job per (subset, lag); subset None is the
    // pooled marginal.
    let subsets: Vec<Option<usize>> = std::iter::once(None).chain((0..n_states).map(Some)).collect();
    let jobs: Vec<(Option<usize>, usize)> = subsets.iter().flat_map(|&s| (1..=max_lag).map(move |l| (s, l))).collect();
    let blocks: Vec<(Vec<Option<f64>>, usize)> = jobs
        .par_iter()
        .map(|&(subset, lag)| {
            let set = FrameSet::collect(alignment, lag, subset);
            lag_block(dataset, &set, lag, config)
        })
        .collect();

    let mut marginal = vec![None; dim * d];
    let mut marginal_counts = vec![0usize; dim * d];
    let mut conditional = vec![None; n_states * dim * d];
    let mut conditional_counts = vec![0usize; n_states * dim * d];
    for ((subset, lag), (values, n)) in jobs.iter().zip(&blocks) {
        for i in 0..dim {
            for j in 0..dim {
                let c = Candidate { lag: *lag, source: j }.index(dim);
                let v = values[i * dim + j];
                match subset {
                    None => {
                        marginal[i * d + c] = v;
                        marginal_counts[i * d + c] = *n;
                    }
                    Some(q) => {
                        let k = (q * dim + i) * d + c;
                        conditional[k] = v;
                        conditional_counts[k] = *n;
                    }
                }
            }
        }
    }

    // Candidate-pair redundancy per state, pooled by sample counts.
    let pair_jobs: Vec<(usize, usize, usize)> = (0..n_states)
        .flat_map(|q| (1..=max_lag).flat_map(move |la| (la..=max_lag).map(move |lb| (q, la, lb))))
        .collect();
    let pair_blocks: Vec<(Vec<Option<f64>>, usize)> = pair_jobs
        .par_iter()
        .map(|&(q, la, lb)| {
            let set = FrameSet::collect(alignment, lb, Some(q));
            let n = set.frames.len();
            if n < config.min_count.max(2) {
                return (vec![None; dim * dim], n);
            }
            let a: Vec<Prepared> = (0..dim).map(|j| Prepared::new(&set.column(dataset, la, j), config)).collect();
            let b: Vec<Prepared> = (0..dim).map(|j| Prepared::new(&set.column(dataset, lb, j), config)).collect();
            let mut out = Vec::with_capacity(dim * dim);
            for pa in &a {
                for pb in &b {
                    out.push(Some(pa.mi(pb)));
                }
            }
            (out, n)
        })
        .collect();
    let mut red_num = vec![0.0; d * d];
    let mut red_den = vec![0usize; d * d];
    for (&(_, la, lb), (values, n)) in pair_jobs.iter().zip(&pair_blocks) {
        for ja in 0..dim {
            for jb in 0..dim {
                if let Some(v) = values[ja * dim + jb] {
                    let a = Candidate { lag: la, source: ja }.index(dim);
                    let b = Candidate { lag: lb, source: jb }.index(dim);
                    red_num[a * d + b] += v * *n as f64;
                    red_den[a * d + b] += n;
                    if a != b {
                        red_num[b * d + a] += v * *n as f64;
                        red_den[b * d + a] += n;
                    }
                }
            }
        }
    }
    let redundancy = red_num.iter().zip(&red_den).map(|(&num, &den)| (den > 0).then(|| num / den as f64)).collect();

    Ok(MiStats {
        schema: SCHEMA.to_string(),
        dim,
        max_lag,
        n_states,
        config: *config,
        candidates: (0..d).map(|c| Candidate::from_index(c, dim)).collect(),
        marginal,
        marginal_counts,
        conditional,
        conditional_counts,
        redundancy,
        state_frames,
    })
}

/// `f(Z_c) = I(X_i; Z_c | Q = q) - I(X_i; Z_c)`, laid out `[i][c]`; invalid
/// wherever either input cell is.
pub fn ear_table(stats: &MiStats, q: usize) -> Vec<Option<f64>> {
    let d = stats.n_candidates();
    (0..stats.dim * d)
        .map(|k| {
            let (i, c) = (k / d, k % d);
            Some(stats.conditional(q, i, c)? - stats.marginal(i, c)?)
        })
        .collect()
}

/// Mean held-out log-density of `x` under a least-squares linear-Gaussian
/// predictor `x ~ N(a z + b, s^2)` fitted on the training pairs.
pub fn heldout_conditional_loglik(train_x: &[f64], train_z: &[f64], test_x: &[f64], test_z: &[f64]) -> f64 {
    let n = train_x.len() as f64;
    let mx = train_x.iter().sum::<f64>() / n;
    let mz = train_z.iter().sum::<f64>() / n;
    let (mut sxz, mut szz) = (0.0, 0.0);
    for (x, z) in train_x.iter().zip(train_z) {
        sxz += (x - mx) * (z - mz);
        szz += (z - mz) * (z - mz);
    }
    let a = if szz > 0.0 { sxz / szz } else { 0.0 };
    let b = mx - a * mz;
    let s2 = train_x.iter().zip(train_z).map(|(x, z)| (x - a * z - b).powi(2)).sum::<f64>() / n;
    let s2 = s2.max(1e-300);
    let norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    test_x.iter().zip(test_z).map(|(x, z)| norm - (x - a * z - b).powi(2) / (2.0 * s2)).sum::<f64>()
        / test_x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Frames, Sequence};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss() -> MiConfig {
        MiConfig::default()
    }

    fn hist() -> MiConfig {
        MiConfig { estimator: Estimator::Histogram, ..MiConfig::default() }
    }

    fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn correlated(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let x = normals(n, rng);
        let e = normals(n, rng);
        let z = x.iter().zip(&e).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect();
        (x, z)
    }

    /// 99th percentile of the estimator under random permutations of `z`.
    fn permutation_null(x: &[f64], z: &[f64], config: &MiConfig, rounds: usize, rng: &mut ChaCha8Rng) -> f64 {
        let mut vals: Vec<f64> = (0..rounds)
            .map(|_| {
                let mut zs = z.to_vec();
                zs.shuffle(rng);
                pairwise_mi(x, &zs, config).unwrap().unwrap()
            })
            .collect();
        vals.sort_by(f64::total_cmp);
        vals[(rounds * 99) / 100]
    }

    #[test]
    fn shuffled_copy_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normals(10_000, &mut rng);
        let mut z = x.clone();
        z.shuffle(&mut rng);
        for cfg in [gauss(), hist()] {
            let v = pairwise_mi(&x, &z, &cfg).unwrap().unwrap();
            let null = permutation_null(&x, &z, &cfg, 200, &mut rng);
            // The permutation null puts its 99th percentile well under 0.02 nats.
            assert!(null < 0.02, "{cfg:?}: null {null}");
            assert!(v < 0.02, "{cfg:?}: {v}");
        }
    }

    #[test]
    fn exact_copy_hits_the_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normals(1000, &mut rng);
        let v = pairwise_mi(&x, &x, &gauss()).unwrap().unwrap();
        let expected = -0.5 * (1e-12 * (2.0 - 1e-12f64)).ln();
        assert!((v - expected).abs() < 1e-3, "{v} vs {expected}");
        assert!(v.is_finite());
    }

    #[test]
    fn gaussian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, z) = correlated(100_000, 0.5, &mut rng);
        let truth = -0.5 * 0.75f64.ln();
        assert!((truth - 0.1438).abs() < 1e-4);
        let g = pairwise_mi(&x, &z, &gauss()).unwrap().unwrap();
        assert!((g - truth).abs() < 0.005, "gaussian {g}");
        let h = pairwise_mi(&x, &z, &hist()).unwrap().unwrap();
        assert!((h - truth).abs() < 0.03, "histogram {h}");
    }

    #[test]
    fn too_few_samples_is_invalid_and_constant_is_zero() {
        let x = vec![1.0; 50];
        let z: Vec<f64> = (0..50).map(f64::from).collect();
        assert_eq!(pairwise_mi(&x, &z, &gauss()).unwrap(), None);
        let cfg = MiConfig { min_count: 10, ..gauss() };
        assert_eq!(pairwise_mi(&x, &z, &cfg).unwrap(), Some(0.0));
        let cfg = MiConfig { min_count: 10, ..hist() };
        assert_eq!(pairwise_mi(&x, &z, &cfg).unwrap(), Some(0.0));
        assert!(pairwise_mi(&x, &z[..10], &cfg).is_err());
    }

    #[test]
    fn equal_values_share_a_bin() {
        let bins = equal_frequency_bins(&[3.0, 1.0, 1.0, 1.0, 2.0, 5.0, 4.0, 0.0], 4);
        assert_eq!(bins[1], bins[2]);
        assert_eq!(bins[2], bins[3]);
        assert_eq!(bins[7], 0);
        assert_eq!(bins[5], 3);
    }

    fn dataset_from(seqs: Vec<Vec<Vec<f64>>>) -> SequenceDataset {
        SequenceDataset::new(
            seqs.into_iter()
                .map(|rows| Sequence { frames: Frames::from_rows(&rows).unwrap(), label: "a".into() })
                .collect(),
            vec!["a".into()],
        )
        .unwrap()
    }

    /// Two states alternating in blocks of 50 frames; under state 1, feature 0
    /// copies feature 1 from the previous frame (plus a little noise).
    fn planted(n_seqs: usize, t: usize, seed: u64) -> (SequenceDataset, Alignment) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seqs = Vec::new();
        let mut paths = Vec::new();
        for _ in 0..n_seqs {
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(t);
            let mut path = Vec::with_capacity(t);
            for k in 0..t {
                let q = (k / 50) % 2;
                let mut row: Vec<f64> = normals(3, &mut rng);
                if q == 1 && k > 0 {
                    row[0] = rows[k - 1][1] + 0.3 * row[0];
                }
                rows.push(row);
                path.push(q);
            }
            seqs.push(rows);
            paths.push(path);
        }
        (dataset_from(seqs), Alignment { n_states: 2, paths })
    }

    #[test]
    fn white_noise_stays_under_the_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs = (0..20).map(|_| (0..200).map(|_| normals(2, &mut rng)).collect()).collect();
        let ds = dataset_from(seqs);
        let paths = ds.sequences.iter().map(|s| (0..s.len()).map(|t| t % 2).collect()).collect();
        let al = Alignment { n_states: 2, paths };
        let stats = compute_mistats(&ds, &al, LagWindow::new(2).unwrap(), &gauss()).unwrap();
        // Null threshold from permuting a same-size white-noise pair.
        let x = normals(1990, &mut rng);
        let z = normals(1990, &mut rng);
        let null = permutation_null(&x, &z, &gauss(), 300, &mut rng);
        for v in stats.marginal.iter().chain(&stats.conditional).flatten() {
            assert!(*v <= null * 1.5, "{v} above null {null}");
        }
    }

    #[test]
    fn planted_dependency_is_the_maximal_cell() {
        let (ds, al) = planted(10, 400, 5);
        let stats = compute_mistats(&ds, &al, LagWindow::new(2).unwrap(), &gauss()).unwrap();
        let d = stats.n_candidates();
        let planted = Candidate { lag: 1, source: 1 }.index(3);
        let best = (0..d)
            .max_by(|&a, &b| stats.conditional(1, 0, a).unwrap().total_cmp(&stats.conditional(1, 0, b).unwrap()))
            .unwrap();
        assert_eq!(best, planted);
        let ear = ear_table(&stats, 1);
        let best_ear = (0..stats.dim * d).max_by(|&a, &b| ear[a].unwrap().total_cmp(&ear[b].unwrap())).unwrap();
        assert_eq!(best_ear, planted);
        // Frames with t <= lag are skipped.
        assert_eq!(stats.marginal_counts[planted], 10 * 399);
        // Redundancy of a candidate with itself is the estimator's self-MI.
        assert!(stats.redundancy(planted, planted).unwrap() > 10.0);
    }

    #[test]
    fn single_state_conditional_matches_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seqs: Vec<Vec<Vec<f64>>> = (0..50)
            .map(|_| {
                let mut rows: Vec<Vec<f64>> = Vec::new();
                for k in 0..1000 {
                    let mut r = normals(2, &mut rng);
                    if k > 0 {
                        r[0] += 0.6 * rows[k - 1][1];
                    }
                    rows.push(r);
                }
                rows
            })
            .collect();
        let ds = dataset_from(seqs);
        let paths = ds.sequences.iter().map(|s| vec![0; s.len()]).collect();
        let al = Alignment { n_states: 1, paths };
        let stats = compute_mistats(&ds, &al, LagWindow::new(1).unwrap(), &gauss()).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                let diff = stats.conditional(0, i, c).unwrap() - stats.marginal(i, c).unwrap();
                assert!(diff.abs() < 0.01);
            }
        }
    }

    #[test]
    fn empty_state_cells_are_invalid() {
        let (ds, mut al) = planted(2, 300, 7);
        al.n_states = 3;
        let stats = compute_mistats(&ds, &al, LagWindow::new(1).unwrap(), &gauss()).unwrap();
        assert!((0..3).all(|i| (0..3).all(|c| stats.conditional(2, i, c).is_none())));
        assert!(ear_table(&stats, 2).iter().all(Option::is_none));
        assert_eq!(stats.state_frames[2], 0);
    }

    #[test]
    fn ear_table_propagates_invalid_and_zero() {
        let stats = MiStats::from_tables(1, 1, 1, vec![None], vec![Some(0.3)], vec![Some(1.0)], vec![500]).unwrap();
        assert_eq!(ear_table(&stats, 0), vec![None]);
        let same = MiStats::from_tables(1, 1, 1, vec![Some(0.3)], vec![Some(0.3)], vec![Some(1.0)], vec![500]).unwrap();
        assert_eq!(ear_table(&same, 0), vec![Some(0.0)]);
    }

    #[test]
    fn mistats_is_deterministic_and_serializable() {
        let (ds, al) = planted(4, 300, 8);
        for cfg in [gauss(), hist()] {
            let a = compute_mistats(&ds, &al, LagWindow::new(2).unwrap(), &cfg).unwrap();
            let b = compute_mistats(&ds, &al, LagWindow::new(2).unwrap(), &cfg).unwrap();
            assert_eq!(a, b);
            let back: MiStats = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
            assert_eq!(back, a);
        }
    }

    #[test]
    fn estimator_converges_with_sample_size() {
        let truth = -0.5 * (1.0 - 0.7f64 * 0.7).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut errs = Vec::new();
        for n in [1_000, 10_000, 100_000] {
            let (x, z) = correlated(n, 0.7, &mut rng);
            errs.push((pairwise_mi(&x, &z, &gauss()).unwrap().unwrap() - truth).abs());
        }
        assert!(errs[2] < 0.005);
        assert!(errs[2] < errs[0] + 1e-3);
    }

    #[test]
    fn higher_mi_predictor_wins_heldout() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10_000;
        let x = normals(n, &mut rng);
        let mk = |rho: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let e = normals(n, rng);
            x.iter().zip(&e).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect()
        };
        let za = mk(0.8, &mut rng);
        let zb = mk(0.4, &mut rng);
        let h = n / 2;
        let la = heldout_conditional_loglik(&x[..h], &za[..h], &x[h..], &za[h..]);
        let lb = heldout_conditional_loglik(&x[..h], &zb[..h], &x[h..], &zb[h..]);
        assert!(la > lb);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mi_is_symmetric_and_nonnegative(
                seed in 0u64..1000,
                rho in -0.99f64..0.99,
                hist_est in proptest::bool::ANY,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (x, z) = correlated(400, rho, &mut rng);
                let cfg = if hist_est { hist() } else { gauss() };
                let a = pairwise_mi(&x, &z, &cfg).unwrap().unwrap();
                let b = pairwise_mi(&z, &x, &cfg).unwrap().unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
                prop_assert!(a >= 0.0);
            }
        }
    }
}
