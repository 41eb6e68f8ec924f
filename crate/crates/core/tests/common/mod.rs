//! Scalar oracles and helpers shared by the integration tests. Nothing here
//! calls the library's linear algebra; each routine is a direct loop over the
//! defining formula.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use glat::rng::SplitMix64;

pub fn glat_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glat"))
}

pub fn run_glat(args: &[&str], cwd: &Path) -> Output {
    glat_bin().args(args).current_dir(cwd).output().expect("spawn glat")
}

/// `softmax(Q Kᵀ / √d_k)` for row-major `rows` (n×d) and projections (d×d_k).
pub fn scalar_attention(rows: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let dk = wq[0].len();
    let project = |w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|e| (0..dk).map(|j| e.iter().zip(w).map(|(x, wr)| x * wr[j]).sum()).collect())
            .collect()
    };
    let (q, k) = (project(wq), project(wk));
    let scale = (dk as f64).sqrt();
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|c| q[i][c] * k[j][c]).sum::<f64>() / scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            ex.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Column means, rounded to 12 decimals (the documented score resolution).
pub fn scalar_received(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    (0..n)
        .map(|j| {
            let s = (0..n).map(|i| a[i][j]).sum::<f64>() / n as f64;
            (s * 1e12).round() / 1e12
        })
        .collect()
}

/// Highest scores first, ties to the smaller id; result ascending.
pub fn scalar_top_m(scores: &[f64], ids: &[u64], m: usize) -> Vec<u64> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    // Selection sort: repeatedly take the best remaining entry.
    let mut chosen = Vec::new();
    while chosen.len() < m.min(ids.len()) {
        let mut best: Option<usize> = None;
        for &i in &order {
            best = match best {
                None => Some(i),
                Some(b) if scores[i] > scores[b] || (scores[i] == scores[b] && ids[i] < ids[b]) => Some(i),
                keep => keep,
            };
        }
        let b = best.unwrap();
        order.retain(|&i| i != b);
        chosen.push(ids[b]);
    }
    chosen.sort_unstable();
    chosen
}

/// Step-by-step iterative selection over a table given as `(id, embedding)`
/// pairs sorted by id.
pub fn scalar_irm(
    table: &[(u64, Vec<f64>)],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    m: usize,
    t: usize,
    shuffle_seed: u64,
) -> Vec<u64> {
    let mut ids: Vec<u64> = table.iter().map(|(id, _)| *id).collect();
    SplitMix64::new(shuffle_seed).shuffle(&mut ids);
    let size = ids.len() / t;
    let mut selected: Vec<u64> = Vec::new();
    for it in 0..t {
        let end = if it + 1 == t { ids.len() } else { (it + 1) * size };
        let mut pool: Vec<u64> = selected.iter().chain(&ids[it * size..end]).copied().collect();
        pool.sort_unstable();
        let rows: Vec<Vec<f64>> = pool
            .iter()
            .map(|id| table.iter().find(|(k, _)| k == id).unwrap().1.clone())
            .collect();
        let scores = scalar_received(&scalar_attention(&rows, wq, wk));
        selected = scalar_top_m(&scores, &pool, m);
    }
    selected
}

/// One-vs-rest AUC by counting ordered pairs (ties count one half), averaged
/// over classes present with both positives and negatives.
pub fn pairwise_macro_auc(probs: &[[f64; 4]], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..4 {
        let pos: Vec<f64> = probs.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p[c]).collect();
        let neg: Vec<f64> = probs.iter().zip(labels).filter(|(_, &l)| l != c).map(|(p, _)| p[c]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        total += wins / (pos.len() * neg.len()) as f64;
        classes += 1;
    }
    total / classes as f64
}

/// Reads `slide_id,p0,p1,p2,p3,pred,label` rows.
pub fn read_predictions(path: &Path) -> (Vec<[f64; 4]>, Vec<usize>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        probs.push([f[1], f[2], f[3], f[4]].map(|v| v.parse().unwrap()));
        labels.push(f[6].parse().unwrap());
    }
    (probs, labels)
}

pub fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.next_normal() * scale).collect()).collect()
}
