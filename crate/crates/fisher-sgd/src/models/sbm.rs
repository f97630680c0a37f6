//! Directed stochastic block model: latent node labels z_i drawn from a
//! categorical alpha, edges y_ij | z Bernoulli(p_{z_i z_j}) for i != j.
//! The diagonal of the adjacency is ignored everywhere.
//!
//! Chart: stick-breaking simplex for alpha plus one sigmoid chart per
//! connectivity entry, d = K^2 + K - 1.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GlobalModel;
use crate::reparam::{compose, Bijection};
use crate::sampler::gibbs_sweep_sbm;

/// Dense binary adjacency matrix of a directed graph without self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjacency {
    n: usize,
    data: Vec<u8>,
}

impl Adjacency {
    pub fn zeros(n: usize) -> Self {
        Adjacency {
            n,
            data: vec![0; n * n],
        }
    }

    pub fn from_rows(n: usize, rows: Vec<u8>) -> Result<Self> {
        if rows.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: rows.len(),
            });
        }
        let mut a = Adjacency { n, data: rows };
        for i in 0..n {
            a.data[i * n + i] = 0;
        }
        Ok(a)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        if i != j {
            self.data[i * self.n + j] = v;
        }
    }

    pub fn edge_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Original SBM parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbmParams {
    pub alpha: Vec<f64>,
    /// Row-major K x K connectivity matrix.
    pub p: Vec<f64>,
}

impl SbmParams {
    pub fn flatten(&self) -> Vec<f64> {
        self.alpha.iter().chain(self.p.iter()).cloned().collect()
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }
}

/// Sufficient counts of a label configuration.
struct SbmCounts {
    /// Nodes per class.
    class: Vec<f64>,
    /// Ordered node pairs (i != j) per class pair.
    pairs: Vec<f64>,
    /// Edges per class pair.
    edges: Vec<f64>,
}

pub struct Sbm {
    y: Adjacency,
    k: usize,
    reparam: Bijection,
}

impl Sbm {
    pub fn new(y: Adjacency, k: usize) -> Self {
        assert!(k >= 1);
        let reparam = compose(
            std::iter::once(Bijection::Simplex(k))
                .chain(std::iter::repeat(Bijection::Interval01).take(k * k))
                .collect(),
        );
        Sbm { y, k, reparam }
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.y
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_nodes(&self) -> usize {
        self.y.n_nodes()
    }

    /// Unpacks the chart value into (alpha, p).
    pub fn unpack(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let eta = self.reparam.forward(theta);
        (eta[..self.k].to_vec(), eta[self.k..].to_vec())
    }

    fn counts(&self, z: &[usize]) -> SbmCounts {
        let k = self.k;
        let n = self.y.n_nodes();
        let mut class = vec![0.0; k];
        let mut pairs = vec![0.0; k * k];
        let mut edges = vec![0.0; k * k];
        for &zi in z {
            class[zi] += 1.0;
        }
        for a in 0..k {
            for b in 0..k {
                pairs[a * k + b] = class[a] * (class[b] - if a == b { 1.0 } else { 0.0 });
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && self.y.get(i, j) == 1 {
                    edges[z[i] * k + z[j]] += 1.0;
                }
            }
        }
        SbmCounts {
            class,
            pairs,
            edges,
        }
    }

    pub fn simulate(
        n: usize,
        params: &SbmParams,
        rng: &mut ChaCha8Rng,
    ) -> (Adjacency, Vec<usize>) {
        let k = params.k();
        let z: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (c, &a) in params.alpha.iter().enumerate() {
                    acc += a;
                    if u < acc {
                        return c;
                    }
                }
                k - 1
            })
            .collect();
        let mut y = Adjacency::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let p = params.p[z[i] * k + z[j]];
                    if rng.random::<f64>() < p {
                        y.set(i, j, 1);
                    }
                }
            }
        }
        (y, z)
    }
}

impl GlobalModel for Sbm {
    type Latent = Vec<usize>;

    fn theta_dim(&self) -> usize {
        self.k * self.k + self.k - 1
    }

    fn reparam(&self) -> &Bijection {
        &self.reparam
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.k).map(|a| format!("alpha{a}")).collect();
        for a in 1..=self.k {
            for b in 1..=self.k {
                names.push(format!("p{a}{b}"));
            }
        }
        names
    }

    fn init_latent(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..self.y.n_nodes())
            .map(|_| rng.random_range(0..self.k))
            .collect()
    }

    fn sample_latent(&self, z: &mut Vec<usize>, theta: &[f64], rng: &mut ChaCha8Rng) {
        let (alpha, p) = self.unpack(theta);
        gibbs_sweep_sbm(&self.y, z, &alpha, &p, rng);
    }

    fn latent_degenerate(&self, z: &Vec<usize>) -> bool {
        // A class with fewer than two members leaves some connection
        // probabilities without any node pair, so the complete-data
        // Hessian acquires an exactly zero row and the information
        // estimate degenerates. Treat singletons like empty classes.
        let mut count = vec![0usize; self.k];
        for &zi in z {
            count[zi] += 1;
        }
        count.iter().any(|&c| c < 2)
    }

    fn log_complete(&self, z: &Vec<usize>, theta: &[f64]) -> f64 {
        let (alpha, p) = self.unpack(theta);
        let c = self.counts(z);
        let k = self.k;
        let mut lp = 0.0;
        for a in 0..k {
            if c.class[a] > 0.0 {
                lp += c.class[a] * alpha[a].ln();
            }
        }
        for a in 0..k {
            for b in 0..k {
                let m = c.pairs[a * k + b];
                if m == 0.0 {
                    continue;
                }
                let e = c.edges[a * k + b];
                lp += e * p[a * k + b].ln() + (m - e) * (1.0 - p[a * k + b]).ln();
            }
        }
        lp
    }

    fn grad_log_complete(&self, z: &Vec<usize>, theta: &[f64]) -> Vec<f64> {
        let (alpha, p) = self.unpack(theta);
        let c = self.counts(z);
        let k = self.k;
        let d = self.theta_dim();
        let mut g = vec![0.0; d];
        // Simplex block via its Jacobian.
        let simplex = Bijection::Simplex(k);
        let jac = simplex.jacobian(&theta[..k - 1]);
        for a in 0..k {
            let da = c.class[a] / alpha[a];
            for n in 0..k - 1 {
                g[n] += da * jac[a][n];
            }
        }
        // Each connectivity entry has a scalar sigmoid chart: the chart
        // score of a Bernoulli count is e - m p.
        for a in 0..k {
            for b in 0..k {
                let idx = a * k + b;
                g[k - 1 + idx] = c.edges[idx] - c.pairs[idx] * p[idx];
            }
        }
        g
    }

    fn score_bank_len(&self) -> usize {
        let n = self.y.n_nodes();
        n * (n - 1) + n
    }

    fn score_terms_into(&self, z: &Vec<usize>, theta: &[f64], terms: &mut [Vec<f64>]) {
        let (alpha, p) = self.unpack(theta);
        let k = self.k;
        let n = self.y.n_nodes();
        let d = self.theta_dim();
        debug_assert_eq!(terms.len(), self.score_bank_len());
        for t in terms.iter_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
            debug_assert_eq!(t.len(), d);
        }
        // Per-edge observation terms: grad of log f(y_ij | z_i, z_j).
        let mut slot = 0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let idx = z[i] * k + z[j];
                terms[slot][k - 1 + idx] = self.y.get(i, j) as f64 - p[idx];
                slot += 1;
            }
        }
        // Per-node latent terms: grad of log alpha_{z_i}.
        let simplex = Bijection::Simplex(k);
        let jac = simplex.jacobian(&theta[..k - 1]);
        for (i, &zi) in z.iter().enumerate() {
            for nn in 0..k - 1 {
                terms[slot + i][nn] = jac[zi][nn] / alpha[zi];
            }
        }
    }
}

/// Finds the class permutation maximizing label agreement between a
/// reference labelling and an estimated one, by exhaustive search.
///
/// Returns `perm` such that `perm[estimated_label]` is the aligned label.
pub fn sbm_align_labels(z_ref: &[usize], z_est: &[usize], k: usize) -> Result<Vec<usize>> {
    if k > 8 {
        return Err(Error::Domain(format!(
            "label alignment is exhaustive, K = {k} > 8 unsupported"
        )));
    }
    assert_eq!(z_ref.len(), z_est.len());
    let mut best_perm: Vec<usize> = (0..k).collect();
    let mut best_score = -1i64;
    let mut perm: Vec<usize> = (0..k).collect();
    // Heap's algorithm over all K! permutations.
    let mut stack = vec![0usize; k];
    let eval = |perm: &[usize], best_perm: &mut Vec<usize>, best_score: &mut i64| {
        let score = z_ref
            .iter()
            .zip(z_est)
            .filter(|&(&r, &e)| r == perm[e])
            .count() as i64;
        if score > *best_score {
            *best_score = score;
            *best_perm = perm.to_vec();
        }
    };
    eval(&perm, &mut best_perm, &mut best_score);
    let mut i = 0;
    while i < k {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            eval(&perm, &mut best_perm, &mut best_score);
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(best_perm)
}

/// Applies a class permutation to (alpha, p): entry `c` of the output is
/// entry `perm^{-1}(c)`... rows and columns of p move together with alpha.
pub fn apply_label_permutation(params: &SbmParams, perm: &[usize]) -> SbmParams {
    let k = params.k();
    let mut alpha = vec![0.0; k];
    let mut p = vec![0.0; k * k];
    for c in 0..k {
        alpha[perm[c]] = params.alpha[c];
        for d in 0..k {
            p[perm[c] * k + perm[d]] = params.p[c * k + d];
        }
    }
    SbmParams { alpha, p }
}
