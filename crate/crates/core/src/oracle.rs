//! Exact information quantities on small, fully enumerated discrete joints.
//!
//! Everything here is computed by brute-force enumeration of the product space
//! and is meant as ground truth for the estimators and the selection heuristic.
//! All values are in nats. `0 ln 0` is taken as 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};

/// Default cap on the size of the product space.
pub const DEFAULT_SIZE_CAP: usize = 1 << 20;

/// Cap on the number of candidate subsets [`DiscreteJoint::exhaustive_select`]
/// will score.
pub const SUBSET_CAP: usize = 1 << 16;

const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub card: usize,
}

/// Full probability table over a product of finite variables, one of which is
/// the class variable `Q`. The table is row-major in the declared variable
/// order (the last variable varies fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointRepr", into = "JointRepr")]
pub struct DiscreteJoint {
    variables: Vec<Variable>,
    class_var: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRepr {
    variables: Vec<Variable>,
    class_variable: String,
    probabilities: Vec<f64>,
}

impl TryFrom<JointRepr> for DiscreteJoint {
    type Error = DbmError;

    fn try_from(r: JointRepr) -> Result<Self> {
        let class_var = r
            .variables
            .iter()
            .position(|v| v.name == r.class_variable)
            .ok_or_else(|| DbmError::Invalid(format!("class variable {:?} not declared", r.class_variable)))?;
        DiscreteJoint::new(r.variables, class_var, r.probabilities)
    }
}

impl From<DiscreteJoint> for JointRepr {
    fn from(j: DiscreteJoint) -> Self {
        JointRepr {
            class_variable: j.variables[j.class_var].name.clone(),
            variables: j.variables,
            probabilities: j.probs,
        }
    }
}

/// Which of the three edge-selection objectives to maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    /// Per class `q`, maximize `I(X; Z(q) | Q = q)`.
    Cmi,
    /// Maximize the S measure over one shared set.
    S,
    /// Maximize `I(X; Z | Q) - I(X; Z)` over one shared set.
    Ear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub rule: SelectionRule,
    /// One set per class value for [`SelectionRule::Cmi`], a single shared set
    /// otherwise. Each set holds sorted variable indices.
    pub sets: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionCheck {
    /// `E[log p(Q|X,Z)] + H(X|Q) + H(Q) - H(X)`
    pub lhs: f64,
    /// `I(X;Z|Q) + I(Q;Z) - I(X;Z)`
    pub rhs: f64,
}

impl DecompositionCheck {
    pub fn discrepancy(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

impl DiscreteJoint {
    pub fn new(variables: Vec<Variable>, class_var: usize, probs: Vec<f64>) -> Result<Self> {
        Self::with_cap(variables, class_var, probs, DEFAULT_SIZE_CAP)
    }

    pub fn with_cap(variables: Vec<Variable>, class_var: usize, probs: Vec<f64>, cap: usize) -> Result<Self> {
        if variables.is_empty() || class_var >= variables.len() {
            return Err(DbmError::Invalid("joint needs a declared class variable".into()));
        }
        let mut size: usize = 1;
        for v in &variables {
            if v.card == 0 {
                return Err(DbmError::Invalid(format!("variable {} has cardinality 0", v.name)));
            }
            size = size.checked_mul(v.card).filter(|&s| s <= cap).ok_or_else(|| {
                DbmError::Invalid(format!(
                    "product space exceeds the cap of {cap} cells; the exact oracle is for desk-scale joints only"
                ))
            })?;
        }
        if probs.len() != size {
            return Err(DbmError::Invalid(format!("probability table has {} cells, expected {size}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(DbmError::Invalid("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DbmError::Invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(DiscreteJoint { variables, class_var, probs })
    }

    /// Random joint whose cells are independent Exp(1) draws raised to
    /// `sharpness` and normalized. Larger sharpness gives more peaked tables.
    pub fn random<R: Rng + ?Sized>(
        variables: Vec<Variable>,
        class_var: usize,
        sharpness: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let size: usize = variables.iter().map(|v| v.card).product();
        let mut probs: Vec<f64> = (0..size)
            .map(|_| {
                let u: f64 = rng.random::<f64>().max(1e-300);
                (-u.ln()).powf(sharpness)
            })
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        // Renormalize once more so the sum check holds to the last ulp.
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        DiscreteJoint::new(variables, class_var, probs)
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn class_var(&self) -> usize {
        self.class_var
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    fn card_of(&self, vars: &[usize]) -> usize {
        vars.iter().map(|&v| self.variables[v].card).product()
    }

    fn check_vars(&self, sets: &[&[usize]]) -> Result<()> {
        let mut seen = vec![false; self.variables.len()];
        for set in sets {
            for &v in *set {
                if v >= self.variables.len() {
                    return Err(DbmError::Invalid(format!("variable index {v} out of range")));
                }
                if seen[v] {
                    return Err(DbmError::Invalid(format!(
                        "variable {} appears in more than one set",
                        self.variables[v].name
                    )));
                }
                seen[v] = true;
            }
        }
        Ok(())
    }

    /// Marginal table over `vars`, row-major in the given order.
    pub fn marginal(&self, vars: &[usize]) -> Vec<f64> {
        let n = self.variables.len();
        let mut strides = vec![0usize; n];
        let mut s = 1;
        for &v in vars.iter().rev() {
            strides[v] = s;
            s *= self.variables[v].card;
        }
        let mut out = vec![0.0; s];
        let mut digits = vec![0usize; n];
        let mut sub = 0usize;
        for &p in &self.probs {
            out[sub] += p;
            // Increment the mixed-radix counter, keeping `sub` in sync.
            for k in (0..n).rev() {
                digits[k] += 1;
                sub += strides[k];
                if digits[k] < self.variables[k].card {
                    break;
                }
                sub -= strides[k] * digits[k];
                digits[k] = 0;
            }
        }
        out
    }

    pub fn entropy(&self, vars: &[usize]) -> f64 {
        self.marginal(vars).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    /// `I(A; B)`.
    pub fn exact_mi(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        self.exact_cmi(a, b, &[])
    }

    /// `I(A; B | C)`, summed directly over the joint of `(A, B, C)`.
    pub fn exact_cmi(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<f64> {
        self.check_vars(&[a, b, c])?;
        let (na, nb, nc) = (self.card_of(a), self.card_of(b), self.card_of(c));
        let vars: Vec<usize> = a.iter().chain(b).chain(c).copied().collect();
        let p = self.marginal(&vars);
        let mut p_ac = vec![0.0; na * nc];
        let mut p_bc = vec![0.0; nb * nc];
        let mut p_c = vec![0.0; nc];
        for ia in 0..na {
            for ib in 0..nb {
                for ic in 0..nc {
                    let v = p[(ia * nb + ib) * nc + ic];
                    p_ac[ia * nc + ic] += v;
                    p_bc[ib * nc + ic] += v;
                    p_c[ic] += v;
                }
            }
        }
        let mut total = 0.0;
        for ia in 0..na {
            for ib in 0..nb {
                for ic in 0..nc {
                    let v = p[(ia * nb + ib) * nc + ic];
                    if v > 0.0 {
                        total += v * (v * p_c[ic] / (p_ac[ia * nc + ic] * p_bc[ib * nc + ic])).ln();
                    }
                }
            }
        }
        Ok(total)
    }

    /// Class-conditional tables `p(x, z | q)` for every class value, laid out
    /// as `[q][x * nz + z]`, together with the class prior.
    fn class_conditionals(&self, x: &[usize], z: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, usize) {
        let nq = self.variables[self.class_var].card;
        let (nx, nz) = (self.card_of(x), self.card_of(z));
        let vars: Vec<usize> =
            std::iter::once(self.class_var).chain(x.iter().copied()).chain(z.iter().copied()).collect();
        let p = self.marginal(&vars);
        let mut prior = vec![0.0; nq];
        let mut cond = Vec::with_capacity(nq);
        for q in 0..nq {
            let block = &p[q * nx * nz..(q + 1) * nx * nz];
            let pq: f64 = block.iter().sum();
            prior[q] = pq;
            cond.push(if pq > 0.0 { block.iter().map(|v| v / pq).collect() } else { vec![0.0; nx * nz] });
        }
        (cond, prior, nz)
    }

    /// Cross-context conditional mutual information: the class-`model`
    /// pointwise dependence `ln p(x,z|model) / (p(x|model) p(z|model))`
    /// averaged under `p(x, z | data)`.
    ///
    /// Returns `f64::NEG_INFINITY` when `data` puts mass where the `model`
    /// class has none.
    pub fn exact_cross_cmi(&self, x: &[usize], z: &[usize], model: usize, data: usize) -> Result<f64> {
        self.check_vars(&[x, z, &[self.class_var]])?;
        let (cond, prior, nz) = self.class_conditionals(x, z);
        for &q in &[model, data] {
            if q >= prior.len() {
                return Err(DbmError::Invalid(format!("class value {q} out of range")));
            }
            if prior[q] <= 0.0 {
                return Err(DbmError::Invalid(format!("class value {q} has zero probability")));
            }
        }
        Ok(cross_term(&cond[model], &cond[data], nz))
    }

    /// `S(X; Z | Q) = sum_{q,r} p(q) (delta_qr - p(r)) I_q(X; Z(r) | r)` where
    /// `z_map[r]` is the candidate set used by class `r`.
    pub fn s_measure(&self, x: &[usize], z_map: &[Vec<usize>]) -> Result<f64> {
        let nq = self.variables[self.class_var].card;
        if z_map.len() != nq {
            return Err(DbmError::Invalid(format!(
                "z_map has {} entries, class variable has {nq} values",
                z_map.len()
            )));
        }
        let prior = self.marginal(&[self.class_var]);
        if let Some(q) = prior.iter().position(|&p| p <= 0.0) {
            return Err(DbmError::Invalid(format!("class value {q} has zero probability")));
        }
        let mut total = 0.0;
        for (r, zr) in z_map.iter().enumerate() {
            self.check_vars(&[x, zr, &[self.class_var]])?;
            let (cond, _, nz) = self.class_conditionals(x, zr);
            for q in 0..nq {
                let weight = prior[q] * (f64::from(u8::from(q == r)) - prior[r]);
                if weight != 0.0 {
                    total += weight * cross_term(&cond[r], &cond[q], nz);
                }
            }
        }
        Ok(total)
    }

    /// Explaining-away residual `I(X; Z | Q) - I(X; Z)`.
    pub fn ear_score(&self, x: &[usize], z: &[usize]) -> Result<f64> {
        let q = [self.class_var];
        Ok(self.exact_cmi(x, z, &q)? - self.exact_mi(x, z)?)
    }

    /// Evaluates both sides of the expected class-posterior decomposition
    /// from independent enumerations.
    pub fn posterior_decomposition_check(&self, x: &[usize], z: &[usize]) -> Result<DecompositionCheck> {
        let q = [self.class_var];
        self.check_vars(&[x, z, &q])?;

        // E[log p(Q | X, Z)] directly from p(q, x, z) and p(x, z).
        let nxz = self.card_of(x) * self.card_of(z);
        let vars: Vec<usize> = q.iter().chain(x).chain(z).copied().collect();
        let pqxz = self.marginal(&vars);
        let mut pxz = vec![0.0; nxz];
        for (k, v) in pqxz.iter().enumerate() {
            pxz[k % nxz] += v;
        }
        let expected_log_posterior: f64 =
            pqxz.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(k, &v)| v * (v / pxz[k % nxz]).ln()).sum();

        let xq: Vec<usize> = x.iter().chain(&q).copied().collect();
        let h_q = self.entropy(&q);
        let h_x_given_q = self.entropy(&xq) - h_q;
        let lhs = expected_log_posterior + h_x_given_q + h_q - self.entropy(x);
        let rhs = self.exact_cmi(x, z, &q)? + self.exact_mi(&q, z)? - self.exact_mi(x, z)?;
        Ok(DecompositionCheck { lhs, rhs })
    }

    /// Exhaustive argmax over candidate subsets of size at most `max_size`.
    /// Among maximizers (scores within 1e-12 of the best) the lexicographically
    /// smallest sorted index set wins.
    pub fn exhaustive_select(
        &self,
        x: &[usize],
        candidates: &[usize],
        rule: SelectionRule,
        max_size: usize,
    ) -> Result<Selection> {
        let mut cands = candidates.to_vec();
        cands.sort_unstable();
        cands.dedup();
        self.check_vars(&[x, &cands, &[self.class_var]])?;
        let subsets = subsets_up_to(&cands, max_size)?;
        let nq = self.variables[self.class_var].card;

        let pick = |scores: &[(Vec<usize>, f64)]| -> (Vec<usize>, f64) {
            let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            scores
                .iter()
                .filter(|s| s.1 >= best - TIE_TOL || s.1 == best)
                .min_by(|a, b| a.0.cmp(&b.0))
                .cloned()
                .expect("at least the empty set is scored")
        };

        match rule {
            SelectionRule::Cmi => {
                let prior = self.marginal(&[self.class_var]);
                let mut sets = Vec::with_capacity(nq);
                let mut scores = Vec::with_capacity(nq);
                for q in 0..nq {
                    if prior[q] <= 0.0 {
                        sets.push(Vec::new());
                        scores.push(0.0);
                        continue;
                    }
                    let scored = subsets
                        .iter()
                        .map(|s| Ok((s.clone(), self.exact_cross_cmi(x, s, q, q)?)))
                        .collect::<Result<Vec<_>>>()?;
                    let (set, score) = pick(&scored);
                    sets.push(set);
                    scores.push(score);
                }
                Ok(Selection { rule, sets, scores })
            }
            SelectionRule::S | SelectionRule::Ear => {
                let scored = subsets
                    .iter()
                    .map(|s| {
                        let score = match rule {
                            SelectionRule::S => self.s_measure(x, &vec![s.clone(); nq])?,
                            _ => self.ear_score(x, s)?,
                        };
                        Ok((s.clone(), score))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (set, score) = pick(&scored);
                Ok(Selection { rule, sets: vec![set], scores: vec![score] })
            }
        }
    }
}

fn cross_term(model: &[f64], data: &[f64], nz: usize) -> f64 {
    let nx = model.len() / nz;
    let mut px = vec![0.0; nx];
    let mut pz = vec![0.0; nz];
    for ix in 0..nx {
        for iz in 0..nz {
            let v = model[ix * nz + iz];
            px[ix] += v;
            pz[iz] += v;
        }
    }
    let mut total = 0.0;
    for ix in 0..nx {
        for iz in 0..nz {
            let w = data[ix * nz + iz];
            if w <= 0.0 {
                continue;
            }
            let joint = model[ix * nz + iz];
            if joint <= 0.0 {
                return f64::NEG_INFINITY;
            }
            total += w * (joint / (px[ix] * pz[iz])).ln();
        }
    }
    total
}

/// All subsets of `items` (sorted) with at most `max_size` elements, in
/// lexicographic order, starting with the empty set.
fn subsets_up_to(items: &[usize], max_size: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new()];
    fn rec(items: &[usize], start: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) -> Result<()> {
        if cur.len() == max {
            return Ok(());
        }
        for k in start..items.len() {
            cur.push(items[k]);
            out.push(cur.clone());
            if out.len() > SUBSET_CAP {
                return Err(DbmError::Invalid(format!(
                    "more than {SUBSET_CAP} candidate subsets; the exact oracle is for desk-scale problems only"
                )));
            }
            rec(items, k + 1, max, cur, out)?;
            cur.pop();
        }
        Ok(())
    }
    rec(items, 0, max_size, &mut Vec::new(), &mut out)?;
    Ok(out)
}

/// Convenience constructor for variables.
pub fn var(name: &str, card: usize) -> Variable {
    Variable { name: name.to_string(), card }
}
