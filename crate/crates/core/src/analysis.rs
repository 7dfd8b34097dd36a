//! Scoring introspection predictions against outcome labels, the
//! accuracy-versus-retention sweep, and clustering of failure embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::introspection::{Decision, Prediction};
use crate::labelgen::OutcomeClass;
use crate::network::{Network, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub truth: OutcomeClass,
    pub predicted: Decision,
    pub uncertainty: f64,
    /// Largest MC-mean probability.
    pub confidence: f64,
    pub x: f64,
    pub y: f64,
    pub frame_id: u32,
    pub k: u32,
}

impl EvalRecord {
    pub fn new(truth: OutcomeClass, prediction: &Prediction, decision: Decision) -> Self {
        Self {
            truth,
            predicted: decision,
            uncertainty: prediction.uncertainty,
            confidence: prediction.confidence(),
            x: 0.0,
            y: 0.0,
            frame_id: 0,
            k: 0,
        }
    }
}

fn na<S: Serializer>(values: &[Option<f64>; NUM_CLASSES], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut m = s.serialize_map(Some(NUM_CLASSES))?;
    for (c, v) in OutcomeClass::ALL.iter().zip(values) {
        match v {
            Some(a) => m.serialize_entry(c.name(), a)?,
            None => m.serialize_entry(c.name(), "n/a")?,
        }
    }
    m.end()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Correct / total over non-abstained records of each true class.
    #[serde(serialize_with = "na")]
    pub accuracy: [Option<f64>; NUM_CLASSES],
    /// Mean over the classes that have an accuracy.
    pub mean_accuracy: Option<f64>,
    /// `confusion[truth][predicted]`, abstentions excluded.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub total: usize,
    pub abstained: usize,
    pub abstention_rate: f64,
}

fn class_mean(acc: &[Option<f64>; NUM_CLASSES]) -> Option<f64> {
    let present: Vec<f64> = acc.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn evaluate(records: &[EvalRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut abstained = 0;
    for r in records {
        match r.predicted {
            Decision::Class(p) => confusion[r.truth.index()][p.index()] += 1,
            Decision::Abstain => abstained += 1,
        }
    }
    let accuracy = std::array::from_fn(|c| {
        let total: usize = confusion[c].iter().sum();
        (total > 0).then(|| confusion[c][c] as f64 / total as f64)
    });
    Ok(EvalReport {
        mean_accuracy: class_mean(&accuracy),
        accuracy,
        confusion,
        total: records.len(),
        abstained,
        abstention_rate: abstained as f64 / records.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub retained: f64,
    /// Retained fraction within each true class (`None` for absent classes).
    pub retained_per_class: [Option<f64>; NUM_CLASSES],
    /// Mean per-class accuracy on the retained records; classes with nothing
    /// retained are left out of the mean.
    pub accuracy: Option<f64>,
}

/// For each threshold, keeps the records with uncertainty strictly below it.
pub fn uncertainty_sweep(records: &[EvalRecord], thresholds: &[f64]) -> Vec<SweepPoint> {
    let mut class_totals = [0usize; NUM_CLASSES];
    for r in records {
        class_totals[r.truth.index()] += 1;
    }
    thresholds
        .iter()
        .map(|&threshold| {
            let mut kept = [0usize; NUM_CLASSES];
            let mut correct = [0usize; NUM_CLASSES];
            for r in records.iter().filter(|r| r.uncertainty < threshold) {
                if let Decision::Class(p) = r.predicted {
                    kept[r.truth.index()] += 1;
                    correct[r.truth.index()] += (p == r.truth) as usize;
                }
            }
            let acc = std::array::from_fn(|c| (kept[c] > 0).then(|| correct[c] as f64 / kept[c] as f64));
            let retained_per_class =
                std::array::from_fn(|c| (class_totals[c] > 0).then(|| kept[c] as f64 / class_totals[c] as f64));
            let retained = if records.is_empty() { 0.0 } else { kept.iter().sum::<usize>() as f64 / records.len() as f64 };
            SweepPoint { threshold, retained, retained_per_class, accuracy: class_mean(&acc) }
        })
        .collect()
}

/// Thresholds that retain (as nearly as ties allow) each requested fraction
/// of the records; a fraction of 1 maps to +inf. Output is ascending.
pub fn retention_thresholds(records: &[EvalRecord], fractions: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
    u.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = fractions
        .iter()
        .map(|&f| {
            let keep = (f.clamp(0.0, 1.0) * u.len() as f64).round() as usize;
            if keep >= u.len() {
                f64::INFINITY
            } else {
                u[keep]
            }
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from("threshold,retained,retained_tp,retained_fp,retained_fn,retained_tn,accuracy\n");
    for p in points {
        out.push_str(&format!("{:.8e},{:.6}", p.threshold, p.retained));
        for r in p.retained_per_class {
            out.push(',');
            out.push_str(&opt(r));
        }
        out.push(',');
        out.push_str(&opt(p.accuracy));
        out.push('\n');
    }
    out
}

/// Normalized second fully connected layer activations, dropout off.
pub fn extract_embedding(net: &Network<f32>, patch: &[f32]) -> Result<Vec<f64>> {
    let v: Vec<f64> = net.embedding(patch)?.into_iter().map(f64::from).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Indices of the predicted FP/FN records with the highest confidence: the
/// top `fraction` (rounded up), ties broken by (frame_id, k).
pub fn select_failures(records: &[EvalRecord], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("top_fraction", "must be in (0, 1]"));
    }
    let mut idx: Vec<usize> = (0..records.len())
        .filter(|&i| matches!(records[i].predicted, Decision::Class(c) if c.is_failure()))
        .collect();
    if idx.is_empty() {
        return Err(Error::NothingToCluster);
    }
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        rb.confidence.total_cmp(&ra.confidence).then((ra.frame_id, ra.k).cmp(&(rb.frame_id, rb.k)))
    });
    let keep = ((fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
    idx.truncate(keep);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Principal directions, one per row, by descending variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    pub projected: Vec<Vec<f64>>,
}

pub fn default_pca_dim(d: usize) -> usize {
    (d / 10).max(2).min(d)
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::ShapeMismatch { expected: format!("rows of length {d}"), actual: "ragged rows".into() });
    }
    Ok(d)
}

pub fn pca_reduce(x: &[Vec<f64>], target_dim: usize) -> Result<Pca> {
    if x.len() < 2 {
        return Err(Error::invalid("pca", "need at least two samples"));
    }
    let d = check_rows(x)?;
    if target_dim == 0 || target_dim > d {
        return Err(Error::invalid("pca.target_dim", format!("must be in 1..={d}")));
    }
    let n = x.len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components: Vec<Vec<f64>> =
        order[..target_dim].iter().map(|&j| eig.eigenvectors.column(j).iter().copied().collect()).collect();
    let explained_variance = order[..target_dim].iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();
    let total_variance = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let projected = (0..n)
        .map(|i| components.iter().map(|c| c.iter().zip(centered.row(i).iter()).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Pca { mean, components, explained_variance, total_variance, projected })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after each assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached.
pub fn kmeans(x: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 || x.len() < k {
        return Err(Error::invalid("kmeans.k", format!("need 1 <= k <= n (k = {k}, n = {})", x.len())));
    }
    let d = check_rows(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![x[rng.gen_range(0..x.len())].clone()];
    let mut dist: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = x.len() - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // all points coincide with a centroid; take the first unused index
            centroids.len()
        };
        centroids.push(x[pick].clone());
        for (di, p) in dist.iter_mut().zip(x) {
            *di = di.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![usize::MAX; x.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut objective = 0.0;
        for (a, p) in assignments.iter_mut().zip(x) {
            let (j, dd) = nearest(p, &centroids);
            changed |= *a != j;
            *a = j;
            objective += dd;
        }
        history.push(objective);
        if !changed || iterations >= max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(x) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let objective = *history.last().unwrap();
    Ok(KMeans { assignments, centroids, objective, history, iterations })
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn purity(assignments: &[usize], labels: &[usize]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    let k = assignments.iter().max().unwrap() + 1;
    let m = labels.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; m]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[a][l] += 1;
    }
    table.iter().map(|row| row.iter().max().unwrap()).sum::<usize>() as f64 / assignments.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub frame_id: u32,
    pub k: u32,
    pub predicted: OutcomeClass,
    pub confidence: f64,
    pub cluster: usize,
    pub viz_x: f64,
    pub viz_y: f64,
}

pub fn clusters_to_csv(rows: &[ClusterRow]) -> String {
    let mut out = String::from("frame_id,k,predicted,confidence,cluster,viz_x,viz_y\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{:.6},{:.6}\n",
            r.frame_id, r.k, r.predicted, r.confidence, r.cluster, r.viz_x, r.viz_y
        ));
    }
    out
}
