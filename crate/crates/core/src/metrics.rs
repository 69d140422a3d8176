//! Captioning metrics: corpus BLEU-1..4, ROUGE-L F1 and greedy-matching
//! BERT-score with a pluggable token embedder.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercased whitespace tokens with punctuation characters removed.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|&c| !is_punctuation(c))
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// ASCII punctuation plus the Unicode general punctuation block (dashes,
/// curly quotes, ellipsis).
fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || ('\u{2010}'..='\u{205E}').contains(&c)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total candidate n-grams of order `n` summed
/// over the corpus.
pub fn modified_precision_counts(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> (u64, u64) {
    let mut matched = 0;
    let mut total = 0;
    for (c, r) in candidates.iter().zip(references) {
        let rc = ngram_counts(r, n);
        for (gram, count) in ngram_counts(c, n) {
            matched += count.min(rc.get(gram).copied().unwrap_or(0));
            total += count;
        }
    }
    (matched, total)
}

fn check_corpora<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InputDomain("empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InputDomain(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus-level cumulative BLEU up to `max_order` with uniform weights.
/// `smoothing` adds one to numerator and denominator for orders ≥ 2.
pub fn bleu<S: AsRef<str>>(candidates: &[S], references: &[S], max_order: usize, smoothing: bool) -> Result<f64> {
    check_corpora(candidates, references)?;
    if !(1..=4).contains(&max_order) {
        return Err(Error::InputDomain(format!("BLEU order {max_order} outside 1..=4")));
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|s| normalize_tokens(s.as_ref())).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|s| normalize_tokens(s.as_ref())).collect();
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let (m, t) = modified_precision_counts(&cands, &refs, n);
        let (m, t) = if smoothing && n >= 2 { (m + 1, t + 1) } else { (m, t) };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / max_order as f64).exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_f1(candidate: &str, reference: &str) -> Result<f64> {
    let c = normalize_tokens(candidate);
    let r = normalize_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return Err(Error::InputDomain("ROUGE-L needs non-empty token sequences".into()));
    }
    let lcs = lcs_len(&c, &r) as f64;
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    Ok(if p + rec == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) })
}

/// Mean sentence ROUGE-L F1 over the corpus.
pub fn rouge_l_corpus<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    check_corpora(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l_f1(c.as_ref(), r.as_ref())?;
    }
    Ok(sum / candidates.len() as f64)
}

/// Supplies one vector per token; rows of the result align with `tokens`.
pub trait TokenEmbedder {
    fn embed(&self, tokens: &[String]) -> Result<Array2<f64>>;
}

/// Deterministic desk-scale embedder: each token gets a hash-seeded base
/// vector, and its contextual vector adds the weighted mean of the base
/// vectors within `window` positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub window: usize,
    pub context_weight: f64,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 2,
            context_weight: 0.3,
        }
    }
}

impl HashedEmbedder {
    fn base(&self, token: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        let mut block = 0u32;
        while out.len() < self.dim {
            let digest = Sha256::new()
                .chain_update(token.as_bytes())
                .chain_update(block.to_le_bytes())
                .finalize();
            for pair in digest.chunks_exact(2) {
                if out.len() == self.dim {
                    break;
                }
                let v = u16::from_le_bytes([pair[0], pair[1]]) as f64;
                out.push(v / 32767.5 - 1.0);
            }
            block += 1;
        }
        out
    }
}

impl TokenEmbedder for HashedEmbedder {
    fn embed(&self, tokens: &[String]) -> Result<Array2<f64>> {
        if self.dim == 0 {
            return Err(Error::Provider("embedding width is zero".into()));
        }
        let bases: Vec<Vec<f64>> = tokens.iter().map(|t| self.base(t)).collect();
        let mut out = Array2::zeros((tokens.len(), self.dim));
        for i in 0..tokens.len() {
            let lo = i.saturating_sub(self.window);
            let hi = (i + self.window + 1).min(tokens.len());
            let neighbours: Vec<usize> = (lo..hi).filter(|&j| j != i).collect();
            for k in 0..self.dim {
                let ctx = if neighbours.is_empty() {
                    0.0
                } else {
                    neighbours.iter().map(|&j| bases[j][k]).sum::<f64>() / neighbours.len() as f64
                };
                out[[i, k]] = bases[i][k] + self.context_weight * ctx;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let norms = |m: &Array2<f64>| -> Vec<f64> { m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect() };
    let (na, nb) = (norms(a), norms(b));
    let mut sims = a.dot(&b.t());
    for ((i, j), s) in sims.indexed_iter_mut() {
        let d = na[i] * nb[j];
        *s = if d == 0.0 { 0.0 } else { *s / d };
    }
    sims
}

/// Greedy matching from precomputed token embeddings (`rows` = tokens).
pub fn bert_score_embeddings(candidate: &Array2<f64>, reference: &Array2<f64>) -> Result<BertScore> {
    if candidate.nrows() == 0 || reference.nrows() == 0 {
        return Err(Error::InputDomain("BERT-score needs at least one token per side".into()));
    }
    if candidate.ncols() != reference.ncols() {
        return Err(Error::Provider(format!(
            "embedder returned widths {} and {}",
            candidate.ncols(),
            reference.ncols()
        )));
    }
    let sims = cosine_matrix(candidate, reference);
    let precision = sims
        .rows()
        .into_iter()
        .map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
        .sum::<f64>()
        / sims.nrows() as f64;
    let recall = sims
        .columns()
        .into_iter()
        .map(|c| c.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
        .sum::<f64>()
        / sims.ncols() as f64;
    // The harmonic mean is only bounded for positive inputs; mixed signs can blow up.
    let f1 = if precision <= 0.0 || recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BertScore { precision, recall, f1 })
}

pub fn bert_score_pair(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> Result<BertScore> {
    let embed = |text: &str| -> Result<Array2<f64>> {
        let tokens = normalize_tokens(text);
        if tokens.is_empty() {
            return Err(Error::InputDomain(format!("no tokens in `{text}`")));
        }
        let e = embedder
            .embed(&tokens)
            .map_err(|e| Error::Provider(format!("embedder failed: {e}")))?;
        if e.nrows() != tokens.len() {
            return Err(Error::Provider(format!(
                "embedder returned {} rows for {} tokens",
                e.nrows(),
                tokens.len()
            )));
        }
        Ok(e)
    };
    bert_score_embeddings(&embed(candidate)?, &embed(reference)?)
}

/// Mean of the per-pair precision, recall and F1.
pub fn bert_score<S: AsRef<str>>(candidates: &[S], references: &[S], embedder: &dyn TokenEmbedder) -> Result<BertScore> {
    check_corpora(candidates, references)?;
    let mut acc = BertScore { precision: 0.0, recall: 0.0, f1: 0.0 };
    for (c, r) in candidates.iter().zip(references) {
        let s = bert_score_pair(c.as_ref(), r.as_ref(), embedder)?;
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
    }
    let n = candidates.len() as f64;
    Ok(BertScore {
        precision: acc.precision / n,
        recall: acc.recall / n,
        f1: acc.f1 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Cumulative BLEU keyed by maximum order 1..=4.
    pub bleu: BTreeMap<usize, f64>,
    pub rouge_l_f1: f64,
    pub bert_precision: f64,
    pub bert_recall: f64,
    pub bert_f1: f64,
    pub corpus_size: usize,
}

pub fn evaluate_corpus<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    embedder: &dyn TokenEmbedder,
    smoothing: bool,
) -> Result<MetricReport> {
    check_corpora(candidates, references)?;
    let mut scores = BTreeMap::new();
    for n in 1..=4 {
        scores.insert(n, bleu(candidates, references, n, smoothing)?);
    }
    let bert = bert_score(candidates, references, embedder)?;
    Ok(MetricReport {
        bleu: scores,
        rouge_l_f1: rouge_l_corpus(candidates, references)?,
        bert_precision: bert.precision,
        bert_recall: bert.recall,
        bert_f1: bert.f1,
        corpus_size: candidates.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

pub fn parse_text_records(jsonl: &str) -> Result<Vec<TextRecord>> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Texts of `predictions` reordered to follow `references`. Both files must
/// hold the same set of unique ids.
pub fn align_by_id(predictions: &[TextRecord], references: &[TextRecord]) -> Result<(Vec<String>, Vec<String>)> {
    let mut by_id = HashMap::new();
    for p in predictions {
        if by_id.insert(p.id.as_str(), p.text.as_str()).is_some() {
            return Err(Error::InputDomain(format!("duplicate prediction id `{}`", p.id)));
        }
    }
    let mut seen = HashSet::new();
    let mut cands = Vec::with_capacity(references.len());
    let mut refs = Vec::with_capacity(references.len());
    for r in references {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::InputDomain(format!("duplicate reference id `{}`", r.id)));
        }
        let text = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::InputDomain(format!("no prediction for id `{}`", r.id)))?;
        cands.push(text.to_string());
        refs.push(r.text.clone());
    }
    if let Some(extra) = predictions.iter().find(|p| !seen.contains(p.id.as_str())) {
        return Err(Error::InputDomain(format!("prediction id `{}` has no reference", extra.id)));
    }
    Ok((cands, refs))
}
