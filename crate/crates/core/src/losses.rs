//! Threefold BEV–text alignment objective.
//!
//! * BTC: symmetric InfoNCE over the `B×B` matrix of pooled cosine
//!   similarities between each sample's query bank and each pooled text
//!   embedding, divided by the temperature.
//! * BTG: token cross-entropy of the grounded text-generation head, averaged
//!   over unmasked positions.
//! * BTM: binary cross-entropy of BEV/text match logits.
//!
//! Each term exists twice: as graph builders used in training, and as plain
//! functions over arrays (which build a throwaway graph).

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::config::SimilarityPooling;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub btc: f64,
    pub btg: f64,
    pub btm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            btc: 1.0,
            btg: 1.0,
            btm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub btc: f64,
    pub btg: f64,
    pub btm: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    /// Per-sample query embeddings, each `num_queries×d_q`.
    pub query_embeddings: Vec<Array2<f64>>,
    /// Pooled text embedding per sample, `B×d_q`.
    pub pooled_text: Array2<f64>,
    /// `B×L` generation targets.
    pub text_token_ids: Array2<usize>,
    /// `B×L`, `true` for real tokens; padding only at the end of a row.
    pub text_mask: Array2<bool>,
    pub match_labels: Vec<u8>,
    pub temperature: f64,
    pub loss_weights: LossWeights,
    pub pooling: SimilarityPooling,
}

impl AlignmentBatch {
    pub fn batch_size(&self) -> usize {
        self.query_embeddings.len()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.batch_size();
        if b == 0 {
            return Err(Error::InputDomain("empty alignment batch".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.pooled_text.nrows() != b {
            return Err(Error::Shape(format!(
                "{b} query banks but {} pooled texts",
                self.pooled_text.nrows()
            )));
        }
        if let Some(bad) = self.match_labels.iter().find(|&&l| l > 1) {
            return Err(Error::InputDomain(format!("match label {bad} is not 0 or 1")));
        }
        if self.text_mask.dim() != self.text_token_ids.dim() {
            return Err(Error::Shape("text mask and ids differ in shape".into()));
        }
        for (i, row) in self.text_mask.rows().into_iter().enumerate() {
            if row.iter().zip(row.iter().skip(1)).any(|(&a, &b)| !a && b) {
                return Err(Error::InputDomain(format!(
                    "text mask row {i} has padding before a real token"
                )));
            }
        }
        Ok(())
    }
}

/// BTC on graph nodes. `query_embeddings[i]` is `nq×d`, `pooled_text[j]` is `1×d`.
pub fn btc_graph(
    g: &mut Graph,
    query_embeddings: &[Var],
    pooled_text: &[Var],
    temperature: f64,
    pooling: SimilarityPooling,
) -> Result<Var> {
    let b = query_embeddings.len();
    if b == 0 || pooled_text.len() != b {
        return Err(Error::Shape(format!(
            "{b} query banks vs {} pooled texts",
            pooled_text.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let texts = g.concat_rows(pooled_text)?;
    let texts = g.normalize_rows(texts)?;
    let mut rows = Vec::with_capacity(b);
    for &q in query_embeddings {
        let qn = g.normalize_rows(q)?;
        let sims = g.matmul_t(qn, texts)?;
        let pooled = match pooling {
            SimilarityPooling::Max => g.max_rows(sims)?,
            SimilarityPooling::Mean => {
                let nq = g.shape(sims).0;
                let avg = g.constant(Array2::from_elem((1, nq), 1.0 / nq as f64));
                g.matmul(avg, sims)?
            }
        };
        rows.push(pooled);
    }
    let sim = g.concat_rows(&rows)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let targets: Vec<usize> = (0..b).collect();
    let all = vec![true; b];
    let bev_to_text = g.cross_entropy(logits, &targets, &all)?;
    let transposed = g.transpose(logits);
    let text_to_bev = g.cross_entropy(transposed, &targets, &all)?;
    g.weighted_sum(&[(bev_to_text, 0.5), (text_to_bev, 0.5)])
}

/// BTG on a `positions×V` logits node.
pub fn btg_graph(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    g.cross_entropy(logits, targets, mask)
}

/// BTM on a node holding one logit per pair.
pub fn btm_graph(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InputDomain(format!("match label {bad} is not 0 or 1")));
    }
    let labels: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    g.bce_with_logits(logits, &labels)
}

pub fn btc_loss(batch: &AlignmentBatch) -> Result<f64> {
    batch.validate()?;
    let mut g = Graph::inference();
    let queries: Vec<Var> = batch
        .query_embeddings
        .iter()
        .map(|q| g.constant(q.clone()))
        .collect();
    let texts: Vec<Var> = batch
        .pooled_text
        .rows()
        .into_iter()
        .map(|r| g.constant(r.to_owned().insert_axis(ndarray::Axis(0))))
        .collect();
    let loss = btc_graph(&mut g, &queries, &texts, batch.temperature, batch.pooling)?;
    Ok(g.scalar(loss))
}

/// Mean cross-entropy over unmasked positions of `B×L×V` logits.
pub fn btg_loss(logits: &Array3<f64>, targets: &Array2<usize>, mask: &Array2<bool>) -> Result<f64> {
    let (b, l, v) = logits.dim();
    if targets.dim() != (b, l) || mask.dim() != (b, l) {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?} / mask {:?}",
            logits.dim(),
            targets.dim(),
            mask.dim()
        )));
    }
    let flat = logits
        .to_shape((b * l, v))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned();
    let mut g = Graph::inference();
    let node = g.constant(flat);
    let targets: Vec<usize> = targets.iter().copied().collect();
    let mask: Vec<bool> = mask.iter().copied().collect();
    let loss = btg_graph(&mut g, node, &targets, &mask)?;
    Ok(g.scalar(loss))
}

pub fn btm_loss(match_logits: &[f64], labels: &[u8]) -> Result<f64> {
    if match_logits.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits vs {} labels",
            match_logits.len(),
            labels.len()
        )));
    }
    if let Some(i) = match_logits.iter().position(|z| z.is_nan()) {
        return Err(Error::numeric("btm", format!("NaN logit at {i}")));
    }
    let mut g = Graph::inference();
    let node = g.constant(Array2::from_shape_vec((1, labels.len()), match_logits.to_vec()).unwrap());
    let loss = btm_graph(&mut g, node, labels)?;
    Ok(g.scalar(loss))
}

/// Weighted sum of the three terms; a zero-weight term is still evaluated and
/// reported.
pub fn combined_loss(
    batch: &AlignmentBatch,
    generation_logits: &Array3<f64>,
    match_logits: &[f64],
) -> Result<LossBreakdown> {
    let btc = btc_loss(batch)?;
    let btg = btg_loss(generation_logits, &batch.text_token_ids, &batch.text_mask)?;
    let btm = btm_loss(match_logits, &batch.match_labels)?;
    let w = batch.loss_weights;
    Ok(LossBreakdown {
        btc,
        btg,
        btm,
        total: w.btc * btc + w.btg * btg + w.btm * btm,
    })
}
