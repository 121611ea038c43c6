//! Frozen-feature probes: k-nearest neighbours, k-means, and a one-hidden-layer MLP.

use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph};

pub const KNN_K: usize = 20;
pub const MLP_HIDDEN: usize = 2048;
const KMEANS_MAX_ITERS: usize = 50;
const KMEANS_TOL: f64 = 1e-6;

fn check_features(features: &[Vec<f64>], what: &str) -> Result<usize> {
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::contract(format!("{what} features differ in width")));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::contract(format!("{what} features must be finite")));
    }
    Ok(dim)
}

fn check_labels(n: usize, labels: &[u32], what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{what}: {} labels for {n} feature vectors",
            labels.len()
        )));
    }
    Ok(())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

fn accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub predictions: Vec<u32>,
}

/// Cosine-similarity k-NN with majority vote. A tied vote goes to the label
/// with the larger summed similarity, then to the smaller label.
pub fn knn_probe(
    train: &[Vec<f64>],
    train_labels: &[u32],
    test: &[Vec<f64>],
    test_labels: &[u32],
    k: usize,
) -> Result<ProbeReport> {
    if train.is_empty() {
        return Err(Error::contract("k-NN needs a non-empty training set"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::contract(format!(
            "k = {k} must lie in 1..={}",
            train.len()
        )));
    }
    let dim = check_features(train, "train")?;
    check_labels(train.len(), train_labels, "train")?;
    check_features(test, "test")?;
    check_labels(test.len(), test_labels, "test")?;
    if test.iter().any(|t| t.len() != dim) {
        return Err(Error::contract("test and train features differ in width"));
    }
    let train_u: Vec<Vec<f64>> = train.iter().map(|v| unit(v)).collect();
    let mut predictions = Vec::with_capacity(test.len());
    for q in test {
        let q = unit(q);
        let mut sims: Vec<(f64, usize)> = train_u
            .iter()
            .enumerate()
            .map(|(i, t)| (q.iter().zip(t).map(|(a, b)| a * b).sum(), i))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
        for &(s, i) in &sims[..k] {
            let e = votes.entry(train_labels[i]).or_default();
            e.0 += 1;
            e.1 += s;
        }
        let best = votes
            .iter()
            .max_by(|a, b| {
                a.1 .0
                    .cmp(&b.1 .0)
                    .then(a.1 .1.total_cmp(&b.1 .1))
                    .then(b.0.cmp(a.0))
            })
            .map(|(l, _)| *l)
            .expect("k >= 1");
        predictions.push(best);
    }
    Ok(ProbeReport {
        accuracy: accuracy(&predictions, test_labels),
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansReport {
    pub assignments: Vec<usize>,
    /// Accuracy under the best one-to-one matching of clusters to labels.
    pub accuracy: f64,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(features: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![features[first].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| dist2(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if r < d {
                        break;
                    }
                    r -= d;
                }
            }
            pick.expect("positive total")
        } else {
            // every remaining point coincides with a centroid
            chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        centroids.push(features[pick].clone());
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(dist2(f, &features[pick]));
        }
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start, then Hungarian matching of
/// clusters to labels.
pub fn kmeans_probe(
    features: &[Vec<f64>],
    labels: &[u32],
    k: usize,
    seed: u64,
) -> Result<KMeansReport> {
    if k == 0 {
        return Err(Error::contract("k-means needs k >= 1"));
    }
    if k > features.len() {
        return Err(Error::contract(format!(
            "k = {k} exceeds the {} samples",
            features.len()
        )));
    }
    let dim = check_features(features, "k-means")?;
    check_labels(features.len(), labels, "k-means")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(features, k, &mut rng);
    let mut assignments = vec![0usize; features.len()];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        for (a, f) in assignments.iter_mut().zip(features) {
            *a = nearest(f, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, f) in assignments.iter().zip(features) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(f) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(dist2(&c, &centroids[j]).sqrt());
            centroids[j] = c;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (a, f) in assignments.iter_mut().zip(features) {
        *a = nearest(f, &centroids).0;
    }
    Ok(KMeansReport {
        accuracy: matched_accuracy(&assignments, labels, k),
        assignments,
        iterations,
    })
}

/// Fraction of points whose cluster maps to their label under the best
/// one-to-one cluster/label assignment.
pub fn matched_accuracy(assignments: &[usize], labels: &[u32], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let classes: Vec<u32> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let n = k.max(classes.len());
    let mut w = Matrix::new(n, n, 0i64);
    for (&a, l) in assignments.iter().zip(labels) {
        let col = classes.binary_search(l).expect("label present");
        w[(a, col)] += 1;
    }
    let (total, _) = kuhn_munkres(&w);
    total as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpProbeConfig {
    fn default() -> Self {
        Self {
            hidden: MLP_HIDDEN,
            epochs: 200,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One-hidden-layer GELU classifier trained full-batch with Adam on
/// cross-entropy over standardized features; reports test accuracy.
pub fn mlp_probe(
    train: &[Vec<f64>],
    train_labels: &[u32],
    test: &[Vec<f64>],
    test_labels: &[u32],
    cfg: &MlpProbeConfig,
) -> Result<ProbeReport> {
    if train.is_empty() {
        return Err(Error::contract("MLP probe needs a non-empty training set"));
    }
    let dim = check_features(train, "train")?;
    check_labels(train.len(), train_labels, "train")?;
    check_features(test, "test")?;
    check_labels(test.len(), test_labels, "test")?;
    if test.iter().any(|t| t.len() != dim) {
        return Err(Error::contract("test and train features differ in width"));
    }
    let mut classes = train_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::contract("MLP probe needs at least two classes"));
    }
    if cfg.hidden == 0 {
        return Err(Error::contract("MLP probe hidden width must be positive"));
    }
    let c = classes.len();
    let targets: Vec<usize> = train_labels
        .iter()
        .map(|l| classes.binary_search(l).expect("present"))
        .collect();

    let n = train.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| train.iter().map(|f| f[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let var = train.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-6)
        })
        .collect();
    let standardize = |rows: &[Vec<f64>]| -> Vec<f64> {
        rows.iter()
            .flat_map(|f| {
                (0..dim)
                    .map(|j| (f[j] - mean[j]) / std[j])
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let x_train = standardize(train);
    let x_test = standardize(test);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "probe.fc1", dim, cfg.hidden, &mut rng);
    let l2 = Linear::new(&mut store, "probe.fc2", cfg.hidden, c, &mut rng);
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let logits_of = |g: &mut Graph, store: &ParamStore, x: &[f64], rows: usize| -> Result<_> {
        let x = g.constant(&[rows, dim], x.to_vec())?;
        let h = l1.forward(g, store, x)?;
        let h = g.gelu(h);
        l2.forward(g, store, h)
    };
    let rows = train.len();
    let picks: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| i * c + t)
        .collect();
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let logits = logits_of(&mut g, &store, &x_train, rows)?;
        // per-row max shift, broadcast along the transposed layout
        let shift: Vec<f64> = g
            .value(logits)
            .chunks(c)
            .map(|r| -r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = g.constant(&[rows], shift)?;
        let lt = g.transpose(logits)?;
        let lt = g.add(lt, shift)?;
        let centered = g.transpose(lt)?;
        let e = g.exp(centered);
        let s = g.sum(e, Some(1))?;
        let lse = g.log(s);
        let flat = g.reshape(centered, &[rows * c])?;
        let picked = g.gather(flat, &picks)?;
        let diff = g.sub(lse, picked)?;
        let loss = g.mean(diff, None)?;
        let grads = g.backward(loss)?;
        store.zero_grad();
        store.accumulate(&grads);
        adam_step(store.tensors_mut(), &mut adam, &adam_cfg)?;
    }
    let mut g = Graph::new();
    let logits = logits_of(&mut g, &store, &x_test, test.len())?;
    let predictions: Vec<u32> = g
        .value(logits)
        .chunks(c)
        .map(|r| {
            let mut best = 0;
            for j in 1..c {
                if r[j] > r[best] {
                    best = j;
                }
            }
            classes[best]
        })
        .collect();
    Ok(ProbeReport {
        accuracy: accuracy(&predictions, test_labels),
        predictions,
    })
}
