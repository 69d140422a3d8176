//! The assembled captioning model: frozen BEV provider and language model,
//! trainable Q-Former, projection MLP and LoRA adapters.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::autograd::Graph;
use crate::bev_partition::{build_view_map, ViewClassificationMap, ViewIndex};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::groundview::GroundViewTemplates;
use crate::llm::{
    assemble_llm_input, caption_prompt, generate_caption, project_queries, Decoding, Generation,
    LmConfig, LoraSet, ProjectionMlp, Tokenizer, ToyFrozenLm,
};
use crate::params::ParamStore;
use crate::pos_encoding::{
    apply_positional_encoding, build_positional_map, BevFeatureMap, PositionalEncodingMap,
};
use crate::qformer::{init_qformer, QFormerConfig, QFormerInit, QFormerState};
use crate::tensor_io::TensorContainer;
use crate::trainer::{SyntheticBevProvider, CATEGORIES};

/// Parameter owners. The provider and the language model are frozen; the
/// rest train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    BevProvider,
    ToyLm,
    QFormer,
    Mlp,
    Lora,
}

impl Owner {
    pub const ALL: [Owner; 5] = [
        Owner::BevProvider,
        Owner::ToyLm,
        Owner::QFormer,
        Owner::Mlp,
        Owner::Lora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Owner::BevProvider => "bev_provider",
            Owner::ToyLm => "toy_lm",
            Owner::QFormer => "qformer",
            Owner::Mlp => "mlp",
            Owner::Lora => "lora",
        }
    }

    pub fn frozen_set() -> BTreeSet<Owner> {
        [Owner::BevProvider, Owner::ToyLm].into()
    }

    pub fn trainable_set() -> BTreeSet<Owner> {
        [Owner::QFormer, Owner::Mlp, Owner::Lora].into()
    }
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Owner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Owner::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter owner `{s}`")))
    }
}

/// Independent stream `k` derived from the run seed.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub const SEED_PROVIDER: u64 = 1;
pub const SEED_QFORMER: u64 = 2;
pub const SEED_MLP: u64 = 3;
pub const SEED_LM: u64 = 4;
pub const SEED_LORA: u64 = 5;
pub const SEED_DATASET: u64 = 6;
pub const SEED_NEGATIVES: u64 = 7;

/// Every word the grounding templates can emit for the shipped categories,
/// plus the captioning instruction.
pub fn groundview_vocabulary(templates: &GroundViewTemplates) -> Vec<String> {
    let strip = |s: &str| {
        let mut out = String::new();
        let mut depth = 0;
        for c in s.chars() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    out.push(' ');
                }
                _ if depth == 0 => out.push(c),
                _ => {}
            }
        }
        out
    };
    let mut texts = vec![
        "Describe the".to_string(),
        "one, several, many".to_string(),
        strip(&templates.environment),
        strip(&templates.objects),
        strip(&templates.empty_scene),
        templates.all_views_phrase.clone(),
    ];
    texts.extend(templates.view_phrases.iter().cloned());
    for c in CATEGORIES {
        texts.push(templates.noun(c, 1));
        texts.push(templates.noun(c, 2));
    }
    texts
}

pub fn qformer_config(config: &PipelineConfig, vocab_size: usize) -> QFormerConfig {
    QFormerConfig {
        num_queries: config.num_queries,
        d_q: config.d_q,
        num_layers: config.qformer_layers,
        num_heads: config.qformer_heads,
        cross_attention_every: config.cross_attention_every,
        bev_channels: config.bev_channels,
        vocab_size,
        max_text_len: config.max_text_len,
        seed: sub_seed(config.seed, SEED_QFORMER),
        init: QFormerInit::Seeded,
    }
}

pub fn lm_config(config: &PipelineConfig, vocab_size: usize) -> LmConfig {
    LmConfig {
        vocab_size,
        d_model: config.d_llm,
        num_layers: config.lm_layers,
        num_heads: config.lm_heads,
        max_positions: config.lm_max_positions,
        seed: sub_seed(config.seed, SEED_LM),
    }
}

#[derive(Debug, Clone)]
pub struct CaptionPipeline {
    config: PipelineConfig,
    view_map: ViewClassificationMap,
    positional: PositionalEncodingMap,
    templates: GroundViewTemplates,
    tokenizer: Tokenizer,
    pub(crate) provider: SyntheticBevProvider,
    pub(crate) lm: ToyFrozenLm,
    pub(crate) qformer: QFormerState,
    pub(crate) mlp: ProjectionMlp,
    pub(crate) lora: LoraSet,
}

impl CaptionPipeline {
    /// Seeded initialization. The tokenizer covers the grounding vocabulary
    /// and any `extra_texts`.
    pub fn new(config: PipelineConfig, templates: GroundViewTemplates, extra_texts: &[String]) -> Result<Self> {
        config.validate()?;
        let mut texts = groundview_vocabulary(&templates);
        texts.extend(extra_texts.iter().cloned());
        let tokenizer = Tokenizer::from_corpus(&texts)?;
        let v = tokenizer.vocab_size();
        let seed = config.seed;
        let provider = SyntheticBevProvider::new(config.bev_channels, sub_seed(seed, SEED_PROVIDER))?;
        let lm = ToyFrozenLm::init(lm_config(&config, v))?;
        let qformer = init_qformer(qformer_config(&config, v))?;
        let mlp = ProjectionMlp::init(config.d_q, config.mlp_hidden, config.d_llm, sub_seed(seed, SEED_MLP))?;
        let lora = LoraSet::init(
            config.lm_layers,
            config.d_llm,
            config.lora_rank,
            config.lora_alpha,
            sub_seed(seed, SEED_LORA),
        )?;
        Self::assemble(config, templates, tokenizer, provider, lm, qformer, mlp, lora)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: PipelineConfig,
        templates: GroundViewTemplates,
        tokenizer: Tokenizer,
        provider: SyntheticBevProvider,
        lm: ToyFrozenLm,
        qformer: QFormerState,
        mlp: ProjectionMlp,
        lora: LoraSet,
    ) -> Result<Self> {
        let view_map = build_view_map(&config.grid)?;
        let positional = build_positional_map(&view_map, config.d_pos)?;
        Ok(Self {
            config,
            view_map,
            positional,
            templates,
            tokenizer,
            provider,
            lm,
            qformer,
            mlp,
            lora,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn view_map(&self) -> &ViewClassificationMap {
        &self.view_map
    }

    pub fn positional(&self) -> &PositionalEncodingMap {
        &self.positional
    }

    pub fn templates(&self) -> &GroundViewTemplates {
        &self.templates
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn provider(&self) -> &SyntheticBevProvider {
        &self.provider
    }

    pub fn lm(&self) -> &ToyFrozenLm {
        &self.lm
    }

    pub fn qformer(&self) -> &QFormerState {
        &self.qformer
    }

    pub fn mlp(&self) -> &ProjectionMlp {
        &self.mlp
    }

    pub fn lora(&self) -> &LoraSet {
        &self.lora
    }

    pub fn owner_params(&self, owner: Owner) -> &ParamStore {
        match owner {
            Owner::BevProvider => self.provider.params(),
            Owner::ToyLm => self.lm.params(),
            Owner::QFormer => self.qformer.params(),
            Owner::Mlp => self.mlp.params(),
            Owner::Lora => self.lora.params(),
        }
    }

    /// Mutable access exists only for trainable owners.
    pub(crate) fn trainable_params_mut(&mut self, owner: Owner) -> Result<&mut ParamStore> {
        match owner {
            Owner::QFormer => Ok(self.qformer.params_mut()),
            Owner::Mlp => Ok(self.mlp.params_mut()),
            Owner::Lora => Ok(self.lora.params_mut()),
            frozen => Err(Error::Config(format!("`{frozen}` is frozen"))),
        }
    }

    pub fn checksum(&self, owner: Owner) -> String {
        self.owner_params(owner).checksum()
    }

    /// `(H·W)×C` positionally encoded cell tokens.
    pub fn encoded_cells(&self, features: &BevFeatureMap) -> Result<Array2<f64>> {
        Ok(apply_positional_encoding(features, &self.positional)?.cell_tokens())
    }

    /// `[begin, caption…, end]` ids as consumed by the Q-Former text branch.
    pub fn qformer_text_ids(&self, caption: &str) -> Result<Vec<usize>> {
        let s = self.tokenizer.special();
        let mut ids = vec![s.begin_of_text];
        ids.extend(self.tokenizer.encode(caption));
        ids.push(s.end_of_message);
        if ids.len() > self.config.max_text_len {
            return Err(Error::InputDomain(format!(
                "caption of {} tokens exceeds the text budget {}",
                ids.len(),
                self.config.max_text_len
            )));
        }
        Ok(ids)
    }

    /// Query embeddings for a raw (not yet positionally encoded) feature map.
    pub fn encode_scene(&self, features: &BevFeatureMap) -> Result<Array2<f64>> {
        let cells = self.encoded_cells(features)?;
        let mut g = Graph::inference();
        let x = g.constant(cells);
        let q = self.qformer.encode_bev_graph(&mut g, x)?;
        Ok(g.value(q).clone())
    }

    /// Caption for `view` of a scene.
    pub fn caption(
        &self,
        features: &BevFeatureMap,
        view: ViewIndex,
        max_new_tokens: usize,
        decoding: Decoding,
    ) -> Result<Generation> {
        let queries = self.encode_scene(features)?;
        let projected = project_queries(&self.mlp, &queries)?;
        let prompt = caption_prompt(&self.tokenizer, self.templates.view_phrase(view))?;
        let inputs = assemble_llm_input(&prompt, &projected, self.lm.embedding_table())?;
        generate_caption(&self.lm, Some(&self.lora), &inputs, max_new_tokens, decoding, &self.tokenizer)
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        for owner in Owner::ALL {
            for (name, t) in self.owner_params(owner).iter() {
                c.insert_f64(name.clone(), t)?;
            }
        }
        c.metadata.insert("config".into(), self.config.to_flat_string());
        c.metadata.insert("vocab".into(), serde_json::to_string(self.tokenizer.tokens())?);
        c.metadata.insert("template_version".into(), self.templates.version.clone());
        Ok(c)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Restores a pipeline saved with [`CaptionPipeline::save_checkpoint`];
    /// `templates` must carry the version recorded in the checkpoint.
    pub fn from_container(c: &TensorContainer, templates: GroundViewTemplates) -> Result<Self> {
        let meta = |k: &str| {
            c.metadata
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}` metadata")))
        };
        let config = PipelineConfig::parse(meta("config")?)?;
        let tokens: Vec<String> = serde_json::from_str(meta("vocab")?)?;
        let version = meta("template_version")?;
        if *version != templates.version {
            return Err(Error::Template(format!(
                "checkpoint uses templates `{version}`, loaded `{}`",
                templates.version
            )));
        }
        let tokenizer = Tokenizer::from_tokens(tokens)?;
        let mut stores: Vec<ParamStore> = vec![ParamStore::default(); 5];
        let prefixes = ["provider.", "lm.", "qformer.", "mlp.", "lora."];
        for name in c.names() {
            let slot = prefixes
                .iter()
                .position(|p| name.starts_with(p))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` has no owner")))?;
            stores[slot].insert(name, c.get_f64(name)?);
        }
        let mut stores = stores.into_iter();
        let mut next = || stores.next().expect("five owners");
        let v = tokenizer.vocab_size();
        let provider = SyntheticBevProvider::from_params(next())?;
        let lm = ToyFrozenLm::from_params(lm_config(&config, v), next())?;
        let qformer = QFormerState::from_params(qformer_config(&config, v), next())?;
        let mlp = ProjectionMlp::from_params(next())?;
        let lora = LoraSet::from_params(next(), config.lm_layers, config.lora_alpha)?;
        Self::assemble(config, templates, tokenizer, provider, lm, qformer, mlp, lora)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, templates: GroundViewTemplates) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?, templates)
    }
}
