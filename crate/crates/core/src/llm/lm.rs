//! Frozen toy decoder standing in for the pretrained language model, plus
//! input assembly and caption generation.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adapters::LoraSet;
use super::prompt::PromptAssembly;
use super::tokenizer::Tokenizer;
use crate::attention::causal_mask;
use crate::autograd::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.num_layers == 0 || self.max_positions == 0 {
            return Err(Error::Config(format!("degenerate LM config {self:?}")));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "LM width {} not divisible into {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Pre-LN causal decoder with learned positions and an output head tied to
/// the token embeddings. Weights are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFrozenLm {
    config: LmConfig,
    params: ParamStore,
}

fn name(rest: impl AsRef<str>) -> String {
    format!("lm.{}", rest.as_ref())
}

impl ToyFrozenLm {
    pub fn init(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        let inv = |n: usize| (n as f64).recip().sqrt();
        params.insert(name("tok_emb"), normal(&mut rng, config.vocab_size, d, 1.0));
        params.insert(name("pos_emb"), normal(&mut rng, config.max_positions, d, 0.1));
        for l in 0..config.num_layers {
            for ln in ["ln1", "ln2"] {
                params.insert(name(format!("layer{l}.{ln}.g")), Array2::ones((1, d)));
                params.insert(name(format!("layer{l}.{ln}.b")), Array2::zeros((1, d)));
            }
            for proj in ["q", "k", "v", "o"] {
                params.insert(name(format!("layer{l}.attn.{proj}.w")), normal(&mut rng, d, d, inv(d)));
                params.insert(name(format!("layer{l}.attn.{proj}.b")), Array2::zeros((1, d)));
            }
            params.insert(name(format!("layer{l}.ffn.up.w")), normal(&mut rng, 4 * d, d, inv(d)));
            params.insert(name(format!("layer{l}.ffn.up.b")), Array2::zeros((1, 4 * d)));
            params.insert(name(format!("layer{l}.ffn.down.w")), normal(&mut rng, d, 4 * d, inv(4 * d)));
            params.insert(name(format!("layer{l}.ffn.down.b")), Array2::zeros((1, d)));
        }
        params.insert(name("ln_f.g"), Array2::ones((1, d)));
        params.insert(name("ln_f.b"), Array2::zeros((1, d)));
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored weights, checking every tensor shape
    /// against a fresh initialization.
    pub fn from_params(config: LmConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config)?;
        for (name, t) in reference.params.iter() {
            let got = params.require(name)?;
            if got.dim() != t.dim() {
                return Err(Error::Shape(format!("`{name}` is {:?}, expected {:?}", got.dim(), t.dim())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format("unexpected tensors in LM weights".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn embedding_table(&self) -> &Array2<f64> {
        self.params.get("lm.tok_emb").expect("token embeddings")
    }

    fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = g.param(&self.params, &name(format!("{prefix}.w")))?;
        let b = g.param(&self.params, &name(format!("{prefix}.b")))?;
        g.linear(x, w, Some(b))
    }

    fn layer_norm(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let gain = g.param(&self.params, &name(format!("{prefix}.g")))?;
        let bias = g.param(&self.params, &name(format!("{prefix}.b")))?;
        g.layer_norm(x, gain, bias)
    }

    fn adapted(
        &self,
        g: &mut Graph,
        layer: usize,
        proj: &str,
        x: Var,
        lora: Option<&LoraSet>,
    ) -> Result<Var> {
        let base = self.linear(g, &format!("layer{layer}.attn.{proj}"), x)?;
        match lora {
            Some(set) if proj == "q" || proj == "v" => {
                let delta = set.delta_graph(g, layer, proj, x)?;
                g.add(base, delta)
            }
            _ => Ok(base),
        }
    }

    /// Token embedding rows for `ids`.
    pub fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InputDomain(format!("token id {bad} outside the LM vocabulary")));
        }
        let table = g.param(&self.params, "lm.tok_emb")?;
        g.gather_rows(table, ids)
    }

    /// Next-token logits (`n×V`) for an `n×d` input embedding sequence.
    pub fn forward_graph(&self, g: &mut Graph, inputs: Var, lora: Option<&LoraSet>) -> Result<Var> {
        let (n, d) = g.shape(inputs);
        if d != self.config.d_model {
            return Err(Error::Shape(format!(
                "LM expects width {}, got {d}",
                self.config.d_model
            )));
        }
        if n == 0 || n > self.config.max_positions {
            return Err(Error::InputDomain(format!(
                "sequence length {n} outside 1..={}",
                self.config.max_positions
            )));
        }
        if let Some(set) = lora {
            if set.num_layers() != self.config.num_layers {
                return Err(Error::Config("LoRA set does not match the LM depth".into()));
            }
        }
        let pos_table = g.param(&self.params, "lm.pos_emb")?;
        let pos = g.slice_rows(pos_table, 0, n)?;
        let mut h = g.add(inputs, pos)?;
        let mask = causal_mask(n);
        for l in 0..self.config.num_layers {
            let x = self.layer_norm(g, &format!("layer{l}.ln1"), h)?;
            let q = self.adapted(g, l, "q", x, lora)?;
            let k = self.adapted(g, l, "k", x, lora)?;
            let v = self.adapted(g, l, "v", x, lora)?;
            let att = g.attention(q, k, v, self.config.num_heads, Some(&mask))?;
            let out = self.linear(g, &format!("layer{l}.attn.o"), att)?;
            h = g.add(h, out)?;
            let x = self.layer_norm(g, &format!("layer{l}.ln2"), h)?;
            let up = self.linear(g, &format!("layer{l}.ffn.up"), x)?;
            let up = g.gelu(up);
            let down = self.linear(g, &format!("layer{l}.ffn.down"), up)?;
            h = g.add(h, down)?;
            if !g.value(h).iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("lm layer {l}"), "non-finite hidden state"));
            }
        }
        let h = self.layer_norm(g, "ln_f", h)?;
        let table = g.param(&self.params, "lm.tok_emb")?;
        g.matmul_t(h, table)
    }
}

fn check_slot(prompt: &PromptAssembly) -> Result<()> {
    let slot = &prompt.bev_slot;
    if slot.len() != 1 || slot.end > prompt.ids.len() {
        return Err(Error::Internal(format!(
            "slot {slot:?} invalid for a {}-token prompt",
            prompt.ids.len()
        )));
    }
    Ok(())
}

/// Token embeddings of `prompt` with the `<bev>` row replaced by the rows of
/// `projected`.
pub fn assemble_graph(
    g: &mut Graph,
    lm: &ToyFrozenLm,
    prompt: &PromptAssembly,
    projected: Var,
) -> Result<Var> {
    check_slot(prompt)?;
    let (nq, d) = g.shape(projected);
    if d != lm.config.d_model {
        return Err(Error::Shape(format!(
            "projected width {d}, LM width {}",
            lm.config.d_model
        )));
    }
    let (before, after) = (&prompt.ids[..prompt.bev_slot.start], &prompt.ids[prompt.bev_slot.end..]);
    let mut parts = Vec::with_capacity(3);
    if !before.is_empty() {
        parts.push(lm.embed_tokens(g, before)?);
    }
    if nq > 0 {
        parts.push(projected);
    }
    if !after.is_empty() {
        parts.push(lm.embed_tokens(g, after)?);
    }
    if parts.is_empty() {
        return Err(Error::InputDomain("nothing to assemble".into()));
    }
    g.concat_rows(&parts)
}

/// Plain-array form of [`assemble_graph`]; output length is
/// `prompt_len − 1 + num_queries`.
pub fn assemble_llm_input(
    prompt: &PromptAssembly,
    projected: &Array2<f64>,
    embedding_table: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_slot(prompt)?;
    let d = embedding_table.ncols();
    if projected.ncols() != d {
        return Err(Error::Shape(format!(
            "projected width {}, embedding width {d}",
            projected.ncols()
        )));
    }
    if let Some(&bad) = prompt.ids.iter().find(|&&t| t >= embedding_table.nrows()) {
        return Err(Error::InputDomain(format!("token id {bad} outside the embedding table")));
    }
    let n = prompt.ids.len() - 1 + projected.nrows();
    let mut out = Array2::zeros((n, d));
    let mut row = 0;
    for (pos, &id) in prompt.ids.iter().enumerate() {
        if pos == prompt.bev_slot.start {
            out.slice_mut(s![row..row + projected.nrows(), ..]).assign(projected);
            row += projected.nrows();
        } else {
            out.row_mut(row).assign(&embedding_table.row(id));
            row += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, including a final end-of-message token if one was
    /// produced.
    pub ids: Vec<usize>,
    pub text: String,
    /// Budget or context length ran out before an end-of-message token.
    pub truncated: bool,
}

/// Autoregressive decoding from an assembled input sequence. Each step
/// re-runs the full forward pass.
pub fn generate_caption(
    lm: &ToyFrozenLm,
    lora: Option<&LoraSet>,
    inputs: &Array2<f64>,
    max_new_tokens: usize,
    decoding: Decoding,
    tokenizer: &Tokenizer,
) -> Result<Generation> {
    if max_new_tokens == 0 {
        return Err(Error::InputDomain("max_new_tokens must be positive".into()));
    }
    if let Decoding::Sample { temperature, .. } = decoding {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("sampling temperature {temperature}")));
        }
    }
    let mut rng = match decoding {
        Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    let eot = tokenizer.special().end_of_message;
    let table = lm.embedding_table();
    let mut seq = inputs.clone();
    let mut ids = Vec::new();
    let mut truncated = true;
    while ids.len() < max_new_tokens {
        if seq.nrows() > lm.config.max_positions {
            break;
        }
        let mut g = Graph::inference();
        let x = g.constant(seq.clone());
        let logits = lm.forward_graph(&mut g, x, lora)?;
        let last = g.value(logits).slice(s![-1.., ..]).to_owned();
        let next = match (&mut rng, decoding) {
            (Some(rng), Decoding::Sample { temperature, .. }) => {
                let probs = softmax_rows((&last / temperature).view());
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = probs.ncols() - 1;
                for (i, &p) in probs.row(0).iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
            _ => argmax(last.row(0).iter().copied()),
        };
        ids.push(next);
        if next == eot {
            truncated = false;
            break;
        }
        let row = table.row(next).insert_axis(ndarray::Axis(0));
        seq = ndarray::concatenate(ndarray::Axis(0), &[seq.view(), row])
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    Ok(Generation {
        text: tokenizer.decode(&ids),
        ids,
        truncated,
    })
}

/// Index of the first maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::prompt::caption_prompt;

    fn setup() -> (Tokenizer, ToyFrozenLm) {
        let tok = Tokenizer::from_corpus(&["describe the front view one car"]).unwrap();
        let lm = ToyFrozenLm::init(LmConfig {
            vocab_size: tok.vocab_size(),
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            max_positions: 64,
            seed: 3,
        })
        .unwrap();
        (tok, lm)
    }

    #[test]
    fn splice_lengths() {
        let (tok, lm) = setup();
        let p = caption_prompt(&tok, "front view").unwrap();
        let x = assemble_llm_input(&p, &Array2::ones((8, 16)), lm.embedding_table()).unwrap();
        assert_eq!(x.nrows(), p.len() - 1 + 8);
        let x = assemble_llm_input(&p, &Array2::zeros((0, 16)), lm.embedding_table()).unwrap();
        assert_eq!(x.nrows(), p.len() - 1);
    }

    #[test]
    fn graph_and_plain_assembly_agree() {
        let (tok, lm) = setup();
        let p = caption_prompt(&tok, "front view").unwrap();
        let proj = Array2::from_shape_fn((3, 16), |(i, j)| (i * 16 + j) as f64);
        let mut g = Graph::inference();
        let pv = g.constant(proj.clone());
        let a = assemble_graph(&mut g, &lm, &p, pv).unwrap();
        assert_eq!(g.value(a), &assemble_llm_input(&p, &proj, lm.embedding_table()).unwrap());
    }

    #[test]
    fn bad_slot_is_internal_error() {
        let (tok, lm) = setup();
        let mut p = caption_prompt(&tok, "front view").unwrap();
        p.bev_slot = 40..41;
        let r = assemble_llm_input(&p, &Array2::ones((2, 16)), lm.embedding_table());
        assert!(matches!(r, Err(Error::Internal(_))));
    }

    #[test]
    fn greedy_is_deterministic_and_budgeted() {
        let (tok, lm) = setup();
        let p = caption_prompt(&tok, "front view").unwrap();
        let x = assemble_llm_input(&p, &Array2::ones((4, 16)), lm.embedding_table()).unwrap();
        let a = generate_caption(&lm, None, &x, 5, Decoding::Greedy, &tok).unwrap();
        let b = generate_caption(&lm, None, &x, 5, Decoding::Greedy, &tok).unwrap();
        assert_eq!(a, b);
        let one = generate_caption(&lm, None, &x, 1, Decoding::Greedy, &tok).unwrap();
        assert_eq!(one.ids.len(), 1);
        let s = Decoding::Sample { temperature: 1.0, seed: 9 };
        assert_eq!(
            generate_caption(&lm, None, &x, 5, s, &tok).unwrap(),
            generate_caption(&lm, None, &x, 5, s, &tok).unwrap()
        );
    }
}
