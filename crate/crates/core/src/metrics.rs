//! Route-level evaluation: set accuracy, length-weighted accuracy, Jaccard
//! and BLEU, plus dataset aggregation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geo::RoadGraph;

fn set(route: &[usize]) -> BTreeSet<usize> {
    route.iter().copied().collect()
}

/// Unique true segments also predicted, over unique true segments.
pub fn acc1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let t = set(truth);
    if t.is_empty() {
        return Err(Error::invalid("accuracy needs a non-empty true route"));
    }
    let p = set(pred);
    Ok(t.intersection(&p).count() as f64 / t.len() as f64)
}

/// Length of the unique true segments also predicted, over the length of
/// the unique true segments.
pub fn acc2(pred: &[usize], truth: &[usize], graph: &RoadGraph) -> Result<f64> {
    let t = set(truth);
    if t.is_empty() {
        return Err(Error::invalid("accuracy needs a non-empty true route"));
    }
    let p = set(pred);
    let mut hit = 0.0;
    let mut total = 0.0;
    for &s in &t {
        let len = graph.segment(s)?.length;
        total += len;
        if p.contains(&s) {
            hit += len;
        }
    }
    Ok(hit / total)
}

/// |pred ∩ truth| / |pred ∪ truth| over unique ids; two empty routes score 1.
pub fn jaccard(pred: &[usize], truth: &[usize]) -> f64 {
    let (p, t) = (set(pred), set(truth));
    let union = p.union(&t).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&t).count() as f64 / union as f64
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    for w in seq.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU with clipped n-gram precisions up to `n_max`, uniform
/// weights and the brevity penalty. The order is capped at the shorter
/// sequence length so short identical routes still score 1. No smoothing:
/// any zero precision gives 0.
pub fn bleu(pred: &[usize], truth: &[usize], n_max: usize) -> f64 {
    if pred.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let n_max = n_max.min(pred.len()).min(truth.len());
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let reference = ngram_counts(truth, n);
        let candidate = ngram_counts(pred, n);
        let clipped: usize = candidate
            .iter()
            .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / (pred.len() + 1 - n) as f64).ln();
    }
    let bp = if pred.len() > truth.len() { 1.0 } else { (1.0 - truth.len() as f64 / pred.len() as f64).exp() };
    bp * (log_sum / n_max as f64).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajScores {
    pub traj_id: u64,
    pub acc1: f64,
    pub acc2: f64,
    pub jaccard: f64,
    pub bleu: f64,
    pub pred_len: usize,
    pub true_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub acc1: f64,
    pub acc2: f64,
    pub jaccard: f64,
    pub bleu: f64,
    pub count: usize,
    /// Sorted by trajectory id.
    pub per_traj: Vec<TrajScores>,
}

pub fn score_one(traj_id: u64, pred: &[usize], truth: &[usize], graph: &RoadGraph) -> Result<TrajScores> {
    Ok(TrajScores {
        traj_id,
        acc1: acc1(pred, truth)?,
        acc2: acc2(pred, truth, graph)?,
        jaccard: jaccard(pred, truth),
        bleu: bleu(pred, truth, 4),
        pred_len: pred.len(),
        true_len: truth.len(),
    })
}

/// Scores predictions against labels matched by trajectory id. Both sides
/// must cover the same ids.
pub fn evaluate_dataset(
    predictions: &[(u64, Vec<usize>)],
    labels: &[(u64, Vec<usize>)],
    graph: &RoadGraph,
) -> Result<EvalReport> {
    let mut truth: HashMap<u64, &Vec<usize>> = HashMap::new();
    for (id, r) in labels {
        if truth.insert(*id, r).is_some() {
            return Err(Error::invalid(format!("labels repeat trajectory {id}")));
        }
    }
    let mut seen = BTreeSet::new();
    let mut missing = Vec::new();
    let mut per_traj = Vec::with_capacity(predictions.len());
    for (id, pred) in predictions {
        if !seen.insert(*id) {
            return Err(Error::invalid(format!("predictions repeat trajectory {id}")));
        }
        match truth.get(id) {
            Some(t) => per_traj.push(score_one(*id, pred, t, graph)?),
            None => missing.push(*id),
        }
    }
    let mut unpredicted: Vec<u64> = truth.keys().filter(|id| !seen.contains(id)).copied().collect();
    unpredicted.sort_unstable();
    if !missing.is_empty() || !unpredicted.is_empty() {
        missing.sort_unstable();
        return Err(Error::invalid(format!(
            "trajectory ids do not align: without labels {missing:?}, without predictions {unpredicted:?}"
        )));
    }
    if per_traj.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    per_traj.sort_by_key(|s| s.traj_id);
    let n = per_traj.len() as f64;
    let mean = |f: fn(&TrajScores) -> f64| per_traj.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        acc1: mean(|s| s.acc1),
        acc2: mean(|s| s.acc2),
        jaccard: mean(|s| s.jaccard),
        bleu: mean(|s| s.bleu),
        count: per_traj.len(),
        per_traj,
    })
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>10}", "metric", "value");
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k:<10}{v:>10.4}");
        }
        let _ = writeln!(s, "{:<10}{:>10}", "count", self.count);
        s
    }

    pub fn summary(&self) -> [(&'static str, f64); 4] {
        [("acc1", self.acc1), ("acc2", self.acc2), ("jaccard", self.jaccard), ("bleu", self.bleu)]
    }

    pub fn key_values(&self) -> String {
        let mut s = String::from("EVAL v1\n");
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "count={}", self.count);
        s
    }

    pub fn per_traj_csv(&self) -> String {
        let mut s = String::from("traj_id,acc1,acc2,jaccard,bleu,pred_len,true_len\n");
        for t in &self.per_traj {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", t.traj_id, t.acc1, t.acc2, t.jaccard, t.bleu, t.pred_len, t.true_len);
        }
        s
    }
}
