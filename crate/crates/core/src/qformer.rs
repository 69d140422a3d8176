//! Positional Q-Former: a learnable query bank that cross-attends to
//! positionally encoded BEV cells, plus a text branch sharing the
//! self-attention layers (BLIP-2 layout, post-LN blocks as in BERT).
//!
//! Queries and text tokens form one joint sequence `[queries; text]`. The
//! [`JointMask`] decides who sees whom, which is how the same weights serve
//! the contrastive (unimodal), generation (multimodal causal) and matching
//! (bidirectional) heads.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{joint_mask, JointMask};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};
use crate::pos_encoding::BevFeatureMap;

const INIT_STD: f64 = 0.02;
const FFN_MULT: usize = 4;

/// Where initial weights come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum QFormerInit {
    #[default]
    Seeded,
    /// Named tensors from a tensor container (e.g. converted pretrained weights).
    External(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub d_q: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Layers `l` with `l % cross_attention_every == 0` carry a cross-attention block.
    pub cross_attention_every: usize,
    /// Width of the incoming BEV features.
    pub bev_channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub seed: u64,
    pub init: QFormerInit,
}

impl QFormerConfig {
    /// Desk-scale defaults.
    pub fn toy(bev_channels: usize, vocab_size: usize) -> Self {
        Self {
            num_queries: 8,
            d_q: 32,
            num_layers: 2,
            num_heads: 2,
            cross_attention_every: 1,
            bev_channels,
            vocab_size,
            max_text_len: 32,
            seed: 0,
            init: QFormerInit::Seeded,
        }
    }

    /// 512 queries of width 768 over 512-channel BEV features.
    pub fn paper_shape(vocab_size: usize) -> Self {
        Self {
            num_queries: 512,
            d_q: 768,
            num_layers: 2,
            num_heads: 12,
            cross_attention_every: 1,
            bev_channels: 512,
            vocab_size,
            max_text_len: 64,
            seed: 0,
            init: QFormerInit::Seeded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_queries", self.num_queries),
            ("d_q", self.d_q),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("cross_attention_every", self.cross_attention_every),
            ("bev_channels", self.bev_channels),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("qformer {name} must be positive")));
            }
        }
        if self.d_q % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_q {} not divisible by {} heads",
                self.d_q, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn has_cross_attention(&self, layer: usize) -> bool {
        layer % self.cross_attention_every == 0
    }

    /// Parameter count implied by the configuration.
    pub fn expected_num_params(&self) -> usize {
        let d = self.d_q;
        let attn = 4 * (d * d + d) + 2 * d;
        let ffn = d * FFN_MULT * d + FFN_MULT * d + FFN_MULT * d * d + d + 2 * d;
        let cross_layers = (0..self.num_layers)
            .filter(|&l| self.has_cross_attention(l))
            .count();
        self.num_queries * d
            + self.bev_channels * d
            + d
            + (self.vocab_size + self.max_text_len) * d
            + 2 * d
            + self.num_layers * (attn + ffn)
            + cross_layers * attn
            + d
            + 1
            + self.vocab_size
    }
}

/// Text fed to the Q-Former: token ids plus a validity flag per position
/// (`false` marks trailing padding).
#[derive(Debug, Clone, Copy)]
pub struct TextInput<'a> {
    pub ids: &'a [usize],
    pub valid: Option<&'a [bool]>,
}

impl<'a> TextInput<'a> {
    pub fn new(ids: &'a [usize]) -> Self {
        Self { ids, valid: None }
    }
}

/// Self-attention pattern of a text-only forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TextAttention {
    #[default]
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone)]
pub struct TextEncoding {
    /// First-token state.
    pub pooled: Array1<f64>,
    /// One contextual state per token.
    pub states: Array2<f64>,
}

/// Graph nodes produced by a joint forward.
#[derive(Debug, Clone, Copy)]
pub struct JointOutput {
    pub queries: Option<Var>,
    pub text: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerState {
    config: QFormerConfig,
    params: ParamStore,
}

fn p(name: impl AsRef<str>) -> String {
    format!("qformer.{}", name.as_ref())
}

pub fn init_qformer(config: QFormerConfig) -> Result<QFormerState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_q;
    let mut params = ParamStore::default();
    let linear = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, out: usize, inp: usize| {
        params.insert(format!("{name}.w"), normal(rng, out, inp, INIT_STD));
        params.insert(format!("{name}.b"), Array2::zeros((1, out)));
    };
    let layer_norm = |params: &mut ParamStore, name: String| {
        params.insert(format!("{name}.g"), Array2::ones((1, d)));
        params.insert(format!("{name}.b"), Array2::zeros((1, d)));
    };

    params.insert(p("query_bank"), normal(&mut rng, config.num_queries, d, INIT_STD));
    linear(&mut params, &mut rng, p("input_proj"), d, config.bev_channels);
    params.insert(p("tok_emb"), normal(&mut rng, config.vocab_size, d, INIT_STD));
    params.insert(p("pos_emb"), normal(&mut rng, config.max_text_len, d, INIT_STD));
    layer_norm(&mut params, p("emb_ln"));
    for l in 0..config.num_layers {
        let mut blocks = vec!["self"];
        if config.has_cross_attention(l) {
            blocks.push("cross");
        }
        for block in blocks {
            for proj in ["q", "k", "v", "o"] {
                linear(&mut params, &mut rng, p(format!("layer{l}.{block}.{proj}")), d, d);
            }
            layer_norm(&mut params, p(format!("layer{l}.{block}_ln")));
        }
        linear(&mut params, &mut rng, p(format!("layer{l}.ffn.up")), FFN_MULT * d, d);
        linear(&mut params, &mut rng, p(format!("layer{l}.ffn.down")), d, FFN_MULT * d);
        layer_norm(&mut params, p(format!("layer{l}.ffn_ln")));
    }
    linear(&mut params, &mut rng, p("btm_head"), 1, d);
    params.insert(p("lm_head.b"), Array2::zeros((1, config.vocab_size)));

    if let QFormerInit::External(path) = &config.init {
        let container = crate::tensor_io::TensorContainer::load(path)?;
        for name in params.names().map(str::to_string).collect::<Vec<_>>() {
            let loaded = container.get_f64(&name)?;
            let slot = params.get_mut(&name).expect("present");
            if loaded.dim() != slot.dim() {
                return Err(Error::Shape(format!(
                    "external `{name}` is {:?}, expected {:?}",
                    loaded.dim(),
                    slot.dim()
                )));
            }
            *slot = loaded;
        }
    }
    Ok(QFormerState { config, params })
}

impl QFormerState {
    /// Reassembles a state from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(config: QFormerConfig, params: ParamStore) -> Result<Self> {
        let reference = init_qformer(QFormerConfig {
            init: QFormerInit::Seeded,
            ..config.clone()
        })?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing Q-Former tensor `{name}`")))?;
            if got.dim() != t.dim() {
                return Err(Error::Shape(format!(
                    "`{name}` is {:?}, expected {:?}",
                    got.dim(),
                    t.dim()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &QFormerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn query_bank(&self) -> &Array2<f64> {
        self.params.get(&p("query_bank")).expect("query bank")
    }

    fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}.w"))?;
        let b = g.param(&self.params, &format!("{name}.b"))?;
        g.linear(x, w, Some(b))
    }

    fn layer_norm(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let gain = g.param(&self.params, &format!("{name}.g"))?;
        let bias = g.param(&self.params, &format!("{name}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    /// Multi-head attention from `x` onto `memory` followed by the output
    /// projection, residual connection and layer norm of block `prefix`.
    fn attention_block(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        memory: Var,
        mask: Option<&Array2<f64>>,
    ) -> Result<Var> {
        let q = self.linear(g, &format!("{prefix}.q"), x)?;
        let k = self.linear(g, &format!("{prefix}.k"), memory)?;
        let v = self.linear(g, &format!("{prefix}.v"), memory)?;
        let att = g.attention(q, k, v, self.config.num_heads, mask)?;
        let out = self.linear(g, &format!("{prefix}.o"), att)?;
        let res = g.add(x, out)?;
        self.layer_norm(g, &format!("{prefix}_ln"), res)
    }

    /// Cross-attention block of `layer`: `queries` attend to the projected BEV
    /// cells `memory`.
    pub fn cross_attention_block(
        &self,
        g: &mut Graph,
        layer: usize,
        queries: Var,
        memory: Var,
    ) -> Result<Var> {
        if !self.config.has_cross_attention(layer) || layer >= self.config.num_layers {
            return Err(Error::Config(format!("layer {layer} has no cross-attention")));
        }
        self.attention_block(g, &p(format!("layer{layer}.cross")), queries, memory, None)
    }

    /// Maps `(H·W)×C` cell features into the `d_q`-wide key/value space.
    pub fn project_bev(&self, g: &mut Graph, cells: Var) -> Result<Var> {
        let (_, c) = g.shape(cells);
        if c != self.config.bev_channels {
            return Err(Error::Shape(format!(
                "{c} BEV channels, Q-Former expects {}",
                self.config.bev_channels
            )));
        }
        self.linear(g, &p("input_proj"), cells)
    }

    fn check_text(&self, text: &TextInput) -> Result<()> {
        if text.ids.is_empty() {
            return Err(Error::InputDomain("empty token sequence".into()));
        }
        if text.ids.len() > self.config.max_text_len {
            return Err(Error::InputDomain(format!(
                "{} tokens exceed max_text_len {}",
                text.ids.len(),
                self.config.max_text_len
            )));
        }
        if let Some(&bad) = text.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InputDomain(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(valid) = text.valid {
            if valid.len() != text.ids.len() {
                return Err(Error::Shape("validity mask length differs from ids".into()));
            }
            if valid.windows(2).any(|w| !w[0] && w[1]) || !valid[0] {
                return Err(Error::InputDomain(
                    "padding must be a non-empty-prefix suffix".into(),
                ));
            }
        }
        Ok(())
    }

    /// Joint forward over `[queries; text]`. `bev_memory` is the output of
    /// [`QFormerState::project_bev`]; queries are present iff it is given.
    pub fn forward_joint(
        &self,
        g: &mut Graph,
        bev_memory: Option<Var>,
        text: Option<TextInput>,
        mask_kind: JointMask,
    ) -> Result<JointOutput> {
        if bev_memory.is_none() && text.is_none() {
            return Err(Error::InputDomain("forward with neither BEV nor text".into()));
        }
        let mut parts = Vec::new();
        let nq = if bev_memory.is_some() {
            parts.push(g.param(&self.params, &p("query_bank"))?);
            self.config.num_queries
        } else {
            0
        };
        let mut text_valid = Vec::new();
        if let Some(t) = &text {
            self.check_text(t)?;
            let tok_table = g.param(&self.params, &p("tok_emb"))?;
            let pos_table = g.param(&self.params, &p("pos_emb"))?;
            let tok = g.gather_rows(tok_table, t.ids)?;
            let positions: Vec<usize> = (0..t.ids.len()).collect();
            let pos = g.gather_rows(pos_table, &positions)?;
            let emb = g.add(tok, pos)?;
            parts.push(self.layer_norm(g, &p("emb_ln"), emb)?);
            text_valid = t
                .valid
                .map(<[bool]>::to_vec)
                .unwrap_or_else(|| vec![true; t.ids.len()]);
        }
        let nt = text_valid.len();
        let mask = joint_mask(nq, &text_valid, mask_kind);
        let mut h = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };

        for l in 0..self.config.num_layers {
            h = self.attention_block(g, &p(format!("layer{l}.self")), h, h, Some(&mask))?;
            if let (Some(memory), true) = (bev_memory, self.config.has_cross_attention(l)) {
                let queries = g.slice_rows(h, 0, nq)?;
                let queries = self.cross_attention_block(g, l, queries, memory)?;
                h = if nt > 0 {
                    let text_rows = g.slice_rows(h, nq, nq + nt)?;
                    g.concat_rows(&[queries, text_rows])?
                } else {
                    queries
                };
            }
            let up = self.linear(g, &p(format!("layer{l}.ffn.up")), h)?;
            let act = g.gelu(up);
            let down = self.linear(g, &p(format!("layer{l}.ffn.down")), act)?;
            let res = g.add(h, down)?;
            h = self.layer_norm(g, &p(format!("layer{l}.ffn_ln")), res)?;
            if let Some(i) = g.value(h).iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    format!("qformer layer {l}"),
                    format!("non-finite activation at flat index {i}"),
                ));
            }
        }

        let queries = if nq > 0 {
            Some(if nt > 0 { g.slice_rows(h, 0, nq)? } else { h })
        } else {
            None
        };
        let text = if nt > 0 {
            Some(if nq > 0 { g.slice_rows(h, nq, nq + nt)? } else { h })
        } else {
            None
        };
        Ok(JointOutput { queries, text })
    }

    /// Query embeddings (`num_queries×d_q`) for already positionally encoded
    /// cell features held in `g`.
    pub fn encode_bev_graph(&self, g: &mut Graph, cells: Var) -> Result<Var> {
        let memory = self.project_bev(g, cells)?;
        let out = self.forward_joint(g, Some(memory), None, JointMask::Unimodal)?;
        out.queries
            .ok_or_else(|| Error::Internal("query output missing".into()))
    }

    pub fn encode_bev(&self, features: &BevFeatureMap) -> Result<Array2<f64>> {
        let mut g = Graph::inference();
        let cells = g.constant(features.cell_tokens());
        let out = self.encode_bev_graph(&mut g, cells)?;
        Ok(g.value(out).clone())
    }

    /// Text-only forward.
    pub fn encode_text_graph(
        &self,
        g: &mut Graph,
        text: TextInput,
        attention: TextAttention,
    ) -> Result<Var> {
        let kind = match attention {
            TextAttention::Bidirectional => JointMask::Unimodal,
            TextAttention::Causal => JointMask::UnimodalCausal,
        };
        let out = self.forward_joint(g, None, Some(text), kind)?;
        out.text.ok_or_else(|| Error::Internal("text output missing".into()))
    }

    pub fn encode_text(&self, token_ids: &[usize], attention: TextAttention) -> Result<TextEncoding> {
        self.encode_text_padded(TextInput::new(token_ids), attention)
    }

    pub fn encode_text_padded(&self, text: TextInput, attention: TextAttention) -> Result<TextEncoding> {
        let mut g = Graph::inference();
        let out = self.encode_text_graph(&mut g, text, attention)?;
        let states = g.value(out).clone();
        Ok(TextEncoding {
            pooled: states.row(0).to_owned(),
            states,
        })
    }

    /// Vocabulary logits of text states through the head tied to the token
    /// embedding table.
    pub fn text_logits(&self, g: &mut Graph, text_states: Var) -> Result<Var> {
        let table = g.param(&self.params, &p("tok_emb"))?;
        let bias = g.param(&self.params, &p("lm_head.b"))?;
        let logits = g.matmul_t(text_states, table)?;
        g.add_row(logits, bias)
    }

    /// Match logit of a BEV/text pair: bidirectional joint forward, the
    /// binary head applied per query, averaged over queries.
    pub fn match_logit(&self, g: &mut Graph, bev_memory: Var, text: TextInput) -> Result<Var> {
        let out = self.forward_joint(g, Some(bev_memory), Some(text), JointMask::Bidirectional)?;
        let queries = out
            .queries
            .ok_or_else(|| Error::Internal("query output missing".into()))?;
        let per_query = self.linear(g, &p("btm_head"), queries)?;
        Ok(g.mean(per_query))
    }

    /// Vocabulary logits for next-token prediction with queries visible to
    /// every text position and the text causal over itself.
    pub fn generation_logits(&self, g: &mut Graph, bev_memory: Var, text: TextInput) -> Result<Var> {
        let out = self.forward_joint(g, Some(bev_memory), Some(text), JointMask::MultimodalCausal)?;
        let states = out
            .text
            .ok_or_else(|| Error::Internal("text output missing".into()))?;
        self.text_logits(g, states)
    }
}
