//! Reference implementations used only by tests. Each one is written from
//! the defining formula, without calling into the library code it checks.

#![allow(dead_code)]

pub mod cases;

use std::collections::HashMap;

use ndarray::Array2;

/// Sector of a raster displacement by polar angle: 0° is the forward axis
/// (decreasing row), angles grow clockwise, wedges are 60° wide and sector 0
/// spans [−30°, 30°).
pub fn sector_by_angle(drow: f64, dcol: f64) -> usize {
    if drow == 0.0 && dcol == 0.0 {
        return 0;
    }
    let forward = -drow;
    let right = dcol;
    let theta = right.atan2(forward).to_degrees();
    let shifted = (theta + 30.0).rem_euclid(360.0);
    ((shifted / 60.0).floor() as usize).min(5)
}

/// Per-cell angle reference for a centred `h×w` raster.
pub fn sector_raster(h: usize, w: usize) -> Vec<Vec<usize>> {
    let er = (h as f64 - 1.0) / 2.0;
    let ec = (w as f64 - 1.0) / 2.0;
    (0..h)
        .map(|r| (0..w).map(|c| sector_by_angle(r as f64 - er, c as f64 - ec)).collect())
        .collect()
}

/// `sin(v·ω_i)` / `cos(v·ω_i)` with `ω_i = exp(−(2i/d)·ln 10000)`.
pub fn sinusoid(v: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let omega = (-(2.0 * i as f64 / d as f64) * 10_000f64.ln()).exp();
        let angle = v as f64 * omega;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// Clipped n-gram matches and candidate n-gram total for one pair, by
/// scanning every window of both sides.
pub fn clipped_ngram_counts(candidate: &[String], reference: &[String], n: usize) -> (u64, u64) {
    if candidate.len() < n {
        return (0, 0);
    }
    let cand: Vec<&[String]> = candidate.windows(n).collect();
    let refs: Vec<&[String]> = if reference.len() >= n {
        reference.windows(n).collect()
    } else {
        Vec::new()
    };
    let mut seen: Vec<&[String]> = Vec::new();
    let mut matched = 0u64;
    for gram in &cand {
        if seen.contains(gram) {
            continue;
        }
        seen.push(gram);
        let in_cand = cand.iter().filter(|g| *g == gram).count() as u64;
        let in_ref = refs.iter().filter(|g| *g == gram).count() as u64;
        matched += in_cand.min(in_ref);
    }
    (matched, cand.len() as u64)
}

/// Longest common subsequence by memoised recursion over suffixes.
pub fn lcs_recursive(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn rouge_l_oracle(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_recursive(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Greedy-matching precision/recall/F1 with explicit loops over token pairs.
pub fn bert_brute_force(cand: &Array2<f64>, refs: &Array2<f64>) -> (f64, f64, f64) {
    let cos = |i: usize, j: usize| {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for k in 0..cand.ncols() {
            dot += cand[[i, k]] * refs[[j, k]];
            na += cand[[i, k]] * cand[[i, k]];
            nb += refs[[j, k]] * refs[[j, k]];
        }
        dot / (na.sqrt() * nb.sqrt())
    };
    let mut p = 0.0;
    for i in 0..cand.nrows() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..refs.nrows() {
            best = best.max(cos(i, j));
        }
        p += best;
    }
    p /= cand.nrows() as f64;
    let mut r = 0.0;
    for j in 0..refs.nrows() {
        let mut best = f64::NEG_INFINITY;
        for i in 0..cand.nrows() {
            best = best.max(cos(i, j));
        }
        r += best;
    }
    r /= refs.nrows() as f64;
    let f = if p > 0.0 && r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Mean token cross-entropy over active rows, via log-sum-exp per row.
pub fn cross_entropy_oracle(logits: &Array2<f64>, targets: &[usize], active: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, row) in logits.rows().into_iter().enumerate() {
        if !active[i] {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        sum += lse - row[targets[i]];
        count += 1;
    }
    sum / count as f64
}

/// Mean binary cross-entropy from logits, written as `softplus(z) − y·z`.
pub fn bce_oracle(logits: &[f64], labels: &[u8]) -> f64 {
    let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - y as f64 * z)
        .sum::<f64>()
        / logits.len() as f64
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Deterministic pseudo-random sentences over a small vocabulary, so pairs
/// share n-grams often.
pub fn random_sentence_pairs(count: usize, seed: u64) -> Vec<(Vec<String>, Vec<String>)> {
    use rand::{Rng, SeedableRng};
    let vocab = ["the", "a", "car", "bus", "left", "front", "view", "shows", "one", "many"];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(1..=12);
        (0..len)
            .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
            .collect()
    };
    (0..count)
        .map(|_| {
            let c = sentence(&mut rng);
            let r = sentence(&mut rng);
            (c, r)
        })
        .collect()
}
