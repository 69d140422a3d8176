//! Desk-scale training: synthetic scenes, the frozen/trainable split, Adam,
//! and the overfit smoke run.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::bev_partition::{GridSpec, ViewClassificationMap, ViewIndex};
use crate::config::{BtgPath, PipelineConfig, SimilarityPooling};
use crate::error::{Error, Result};
use crate::groundview::{generate_caption, AnnotationRecord, Environment, GroundViewTemplates, ObjectCount, ViewFilter};
use crate::llm::{assemble_graph, caption_prompt, Decoding, PromptAssembly};
use crate::losses::{btc_graph, btg_graph, btm_graph, LossWeights};
use crate::params::{normal, ParamStore};
use crate::pipeline::{sub_seed, CaptionPipeline, Owner, SEED_DATASET, SEED_NEGATIVES};
use crate::pos_encoding::BevFeatureMap;
use crate::qformer::{TextAttention, TextInput};

/// Object categories the synthetic provider can render.
pub const CATEGORIES: [&str; 6] = ["car", "truck", "pedestrian", "bus", "bicycle", "barrier"];

/// Frozen stand-in for the pretrained BEV encoder: every cell carries a
/// shared background vector, the embedding of each object placed on it, and
/// seeded Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBevProvider {
    params: ParamStore,
    noise_std: f64,
}

impl SyntheticBevProvider {
    pub const NOISE_STD: f64 = 0.1;

    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("provider needs at least one channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        params.insert("provider.category_emb", normal(&mut rng, CATEGORIES.len(), channels, 1.0));
        params.insert("provider.background", normal(&mut rng, 1, channels, 0.1));
        Ok(Self {
            params,
            noise_std: Self::NOISE_STD,
        })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let emb = params.require("provider.category_emb")?;
        let bg = params.require("provider.background")?;
        if emb.nrows() != CATEGORIES.len() || bg.dim() != (1, emb.ncols()) {
            return Err(Error::Shape("provider tensors do not match the category set".into()));
        }
        Ok(Self {
            params,
            noise_std: Self::NOISE_STD,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn channels(&self) -> usize {
        self.params.get("provider.background").expect("background").ncols()
    }

    pub fn render(&self, grid: &GridSpec, objects: &[PlacedObject], seed: u64) -> Result<BevFeatureMap> {
        let emb = self.params.require("provider.category_emb")?;
        let bg = self.params.require("provider.background")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = grid.num_cells();
        let mut values = normal(&mut rng, self.channels(), cells, self.noise_std);
        for mut col in values.columns_mut() {
            col += &bg.row(0);
        }
        for o in objects {
            if o.row >= grid.height || o.col >= grid.width {
                return Err(Error::InputDomain(format!("object at ({}, {}) off the grid", o.row, o.col)));
            }
            let k = category_index(&o.category)?;
            let mut col = values.column_mut(o.row * grid.width + o.col);
            col += &emb.row(k);
        }
        BevFeatureMap::new(*grid, values)
    }
}

fn category_index(category: &str) -> Result<usize> {
    CATEGORIES
        .iter()
        .position(|&c| c == category)
        .ok_or_else(|| Error::InputDomain(format!("unknown category `{category}`")))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacedObject {
    pub category: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    pub features: BevFeatureMap,
    pub objects: Vec<PlacedObject>,
    pub annotation: AnnotationRecord,
    /// View the caption describes.
    pub target_view: ViewIndex,
    pub caption: String,
}

impl SyntheticScene {
    /// Renders `objects` and captions `target_view` with the grounding rules.
    pub fn from_layout(
        id: impl Into<String>,
        view_map: &ViewClassificationMap,
        provider: &SyntheticBevProvider,
        templates: &GroundViewTemplates,
        objects: Vec<PlacedObject>,
        target_view: ViewIndex,
        seed: u64,
    ) -> Result<Self> {
        let id = id.into();
        let mut counts: BTreeMap<(String, usize), i64> = BTreeMap::new();
        for o in &objects {
            category_index(&o.category)?;
            let view = view_map.get(o.row, o.col).get();
            *counts.entry((o.category.clone(), view)).or_default() += 1;
        }
        let annotation = AnnotationRecord {
            sample_id: id.clone(),
            objects: counts
                .into_iter()
                .map(|((category, view), count)| ObjectCount { category, view, count })
                .collect(),
            environment: Environment::default(),
        };
        let caption = generate_caption(&annotation, ViewFilter::View(target_view), templates)?.text;
        let features = provider.render(view_map.grid(), &objects, seed)?;
        Ok(Self {
            id,
            features,
            objects,
            annotation,
            target_view,
            caption,
        })
    }
}

/// `n` seeded scenes with two to four objects each. The target view is drawn
/// among occupied views; layouts are redrawn until every caption is unique.
pub fn make_synthetic_dataset(
    n: usize,
    view_map: &ViewClassificationMap,
    provider: &SyntheticBevProvider,
    templates: &GroundViewTemplates,
    seed: u64,
) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return Err(Error::InputDomain("dataset size must be positive".into()));
    }
    let grid = view_map.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes: Vec<SyntheticScene> = Vec::with_capacity(n);
    let mut attempts = 0;
    while scenes.len() < n {
        attempts += 1;
        if attempts > 1000 * n {
            return Err(Error::InputDomain(format!(
                "could not draw {n} scenes with distinct captions"
            )));
        }
        let k = rng.random_range(2..=4);
        let objects: Vec<PlacedObject> = (0..k)
            .map(|_| PlacedObject {
                category: CATEGORIES[rng.random_range(0..CATEGORIES.len())].to_string(),
                row: rng.random_range(0..grid.height),
                col: rng.random_range(0..grid.width),
            })
            .collect();
        let occupied: BTreeSet<usize> = objects.iter().map(|o| view_map.get(o.row, o.col).get()).collect();
        let occupied: Vec<usize> = occupied.into_iter().collect();
        let target = ViewIndex::new(occupied[rng.random_range(0..occupied.len())])?;
        let render_seed = rng.random();
        let scene = SyntheticScene::from_layout(
            format!("scene-{:03}", scenes.len()),
            view_map,
            provider,
            templates,
            objects,
            target,
            render_seed,
        )?;
        if scenes.iter().all(|s| s.caption != scene.caption) {
            scenes.push(scene);
        }
    }
    Ok(scenes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub caption_weight: f64,
    pub temperature: f64,
    pub pooling: SimilarityPooling,
    pub btg_path: BtgPath,
    pub frozen: BTreeSet<Owner>,
    pub trainable: BTreeSet<Owner>,
}

impl TrainConfig {
    pub fn from_pipeline(c: &PipelineConfig) -> Self {
        Self {
            steps: c.steps,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            seed: c.seed,
            loss_weights: LossWeights {
                btc: c.w_btc,
                btg: c.w_btg,
                btm: c.w_btm,
            },
            caption_weight: c.w_caption,
            temperature: c.temperature,
            pooling: c.similarity,
            btg_path: c.btg_path,
            frozen: Owner::frozen_set(),
            trainable: Owner::trainable_set(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(o) = self.frozen.intersection(&self.trainable).next() {
            return Err(Error::Config(format!("`{o}` is both frozen and trainable")));
        }
        if let Some(o) = Owner::ALL
            .iter()
            .find(|o| !self.frozen.contains(o) && !self.trainable.contains(o))
        {
            return Err(Error::Config(format!("`{o}` is neither frozen nor trainable")));
        }
        for frozen in Owner::frozen_set() {
            if self.trainable.contains(&frozen) {
                return Err(Error::Config(format!("`{frozen}` must stay frozen")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Adam with bias correction and no schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// [`Adam::update`].
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates every tensor of `store` that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, value) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let step = self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *p -= step;
                });
        }
    }
}

/// Per-step metrics record (one JSONL line).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub btc: f64,
    pub btg: f64,
    pub btm: f64,
    pub caption: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
struct PreparedScene {
    cells: Array2<f64>,
    text_ids: Vec<usize>,
    prompt: PromptAssembly,
}

/// Graph nodes of one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchGraph {
    pub btc: Var,
    pub btg: Var,
    pub btm: Var,
    pub caption: Var,
    pub total: Var,
}

pub struct Trainer {
    pipeline: CaptionPipeline,
    scenes: Vec<SyntheticScene>,
    prepared: Vec<PreparedScene>,
    config: TrainConfig,
    optimizer: Adam,
    negatives: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(pipeline: CaptionPipeline, scenes: Vec<SyntheticScene>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::InputDomain("no training scenes".into()));
        }
        let prepared = scenes
            .iter()
            .map(|s| {
                let prompt = caption_prompt(pipeline.tokenizer(), pipeline.templates().view_phrase(s.target_view))?
                    .with_response(pipeline.tokenizer(), &s.caption)?;
                Ok(PreparedScene {
                    cells: pipeline.encoded_cells(&s.features)?,
                    text_ids: pipeline.qformer_text_ids(&s.caption)?,
                    prompt,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            optimizer: Adam::new(config.learning_rate),
            negatives: ChaCha8Rng::seed_from_u64(sub_seed(config.seed, SEED_NEGATIVES)),
            pipeline,
            scenes,
            prepared,
            config,
            step: 0,
        })
    }

    pub fn pipeline(&self) -> &CaptionPipeline {
        &self.pipeline
    }

    pub fn into_pipeline(self) -> CaptionPipeline {
        self.pipeline
    }

    pub fn scenes(&self) -> &[SyntheticScene] {
        &self.scenes
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Scene indices of step `step` (0-based): a cyclic walk over the scenes.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.scenes.len();
        let b = self.config.batch_size;
        (0..b).map(|k| (step * b + k) % n).collect()
    }

    /// Builds every loss term for `batch` on `g`. `negatives[i]` is the batch
    /// position whose text serves as the mismatched pair for sample `i`.
    pub fn build_losses(&self, g: &mut Graph, batch: &[usize], negatives: &[Option<usize>]) -> Result<BatchGraph> {
        let p = &self.pipeline;
        let cfg = &self.config;
        let mut queries = Vec::with_capacity(batch.len());
        let mut pooled = Vec::with_capacity(batch.len());
        let mut btg_terms = Vec::new();
        let mut caption_terms = Vec::new();
        let mut match_logits = Vec::new();
        let mut match_labels = Vec::new();
        let inv_b = 1.0 / batch.len() as f64;

        let memories: Vec<Var> = batch
            .iter()
            .map(|&i| {
                let cells = g.constant(self.prepared[i].cells.clone());
                p.qformer.project_bev(g, cells)
            })
            .collect::<Result<_>>()?;

        for (pos, &i) in batch.iter().enumerate() {
            let scene = &self.prepared[i];
            let memory = memories[pos];
            let q = p.qformer.forward_joint(g, Some(memory), None, crate::attention::JointMask::Unimodal)?;
            let q = q.queries.ok_or_else(|| Error::Internal("query output missing".into()))?;
            queries.push(q);

            let text = TextInput::new(&scene.text_ids);
            let states = p.qformer.encode_text_graph(g, text, TextAttention::Bidirectional)?;
            pooled.push(g.slice_rows(states, 0, 1)?);

            // Caption supervision through the frozen LM.
            let projected = p.mlp.forward_graph(g, q)?;
            let inputs = assemble_graph(g, &p.lm, &scene.prompt, projected)?;
            let logits = p.lm.forward_graph(g, inputs, Some(&p.lora))?;
            let (targets, active) = scene.prompt.next_token_targets();
            let nq = g.shape(projected).0;
            let n = g.shape(logits).0;
            let mut t_spliced = vec![0; n];
            let mut a_spliced = vec![false; n];
            for t in 0..targets.len() {
                if t == scene.prompt.bev_slot.start {
                    continue;
                }
                let row = scene.prompt.spliced_position(t, nq);
                t_spliced[row] = targets[t];
                a_spliced[row] = active[t];
            }
            let caption = g.cross_entropy(logits, &t_spliced, &a_spliced)?;
            caption_terms.push((caption, inv_b));

            let btg = match cfg.btg_path {
                BtgPath::QFormer => {
                    let logits = p.qformer.generation_logits(g, memory, text)?;
                    let ids = &scene.text_ids;
                    let mut targets = ids[1..].to_vec();
                    targets.push(0);
                    let mut mask = vec![true; ids.len()];
                    *mask.last_mut().unwrap() = false;
                    btg_graph(g, logits, &targets, &mask)?
                }
                BtgPath::Lm => caption,
            };
            btg_terms.push((btg, inv_b));

            match_logits.push(p.qformer.match_logit(g, memory, text)?);
            match_labels.push(1u8);
            if let Some(j) = negatives[pos] {
                let other = TextInput::new(&self.prepared[batch[j]].text_ids);
                match_logits.push(p.qformer.match_logit(g, memory, other)?);
                match_labels.push(0);
            }
        }

        let btc = btc_graph(g, &queries, &pooled, cfg.temperature, cfg.pooling)?;
        let btg = g.weighted_sum(&btg_terms)?;
        let caption = g.weighted_sum(&caption_terms)?;
        let logits_row = g.concat_rows(&match_logits)?;
        let logits_row = g.transpose(logits_row);
        let btm = btm_graph(g, logits_row, &match_labels)?;
        let w = cfg.loss_weights;
        let total = g.weighted_sum(&[
            (btc, w.btc),
            (btg, w.btg),
            (btm, w.btm),
            (caption, cfg.caption_weight),
        ])?;
        Ok(BatchGraph {
            btc,
            btg,
            btm,
            caption,
            total,
        })
    }

    /// One uniformly drawn in-batch mismatch per sample (none for batches of
    /// one distinct scene).
    fn draw_negatives(&mut self, batch: &[usize]) -> Vec<Option<usize>> {
        (0..batch.len())
            .map(|i| {
                let candidates: Vec<usize> = (0..batch.len()).filter(|&j| batch[j] != batch[i]).collect();
                if candidates.is_empty() {
                    None
                } else {
                    Some(candidates[self.negatives.random_range(0..candidates.len())])
                }
            })
            .collect()
    }

    /// Forward, backward, and an Adam update of the trainable owners.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepRecord> {
        if batch.is_empty() || batch.iter().any(|&i| i >= self.scenes.len()) {
            return Err(Error::InputDomain(format!("invalid batch {batch:?}")));
        }
        let step = self.step + 1;
        let negatives = self.draw_negatives(batch);
        let mut g = Graph::new();
        let nodes = self.build_losses(&mut g, batch, &negatives).map_err(|e| match e {
            Error::Numeric { stage, detail } => Error::Numeric {
                stage: format!("step {step}, {stage}"),
                detail,
            },
            other => other,
        })?;
        let record = StepRecord {
            step,
            btc: g.scalar(nodes.btc),
            btg: g.scalar(nodes.btg),
            btm: g.scalar(nodes.btm),
            caption: g.scalar(nodes.caption),
            total: g.scalar(nodes.total),
        };
        for (term, v) in [
            ("btc", record.btc),
            ("btg", record.btg),
            ("btm", record.btm),
            ("caption", record.caption),
            ("total", record.total),
        ] {
            if !v.is_finite() {
                return Err(Error::numeric(format!("step {step}"), format!("{term} loss is {v}")));
            }
        }
        let grads = g.backward(nodes.total)?;
        let grads = g.param_grads(&grads);
        self.optimizer.begin_step();
        for owner in self.config.trainable.clone() {
            let store = self.pipeline.trainable_params_mut(owner)?;
            self.optimizer.update(store, &grads);
        }
        self.step = step;
        Ok(record)
    }

    /// Runs `steps` further steps, appending one JSON line per step to `sink`.
    pub fn run(&mut self, steps: usize, mut sink: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.batch_indices(self.step);
            let record = self.train_step(&batch)?;
            log::debug!("step {} total {:.6}", record.step, record.total);
            if let Some(w) = sink.as_deref_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
            }
            out.push(record);
        }
        Ok(out)
    }

    /// Fraction of the first `k` ground-truth caption tokens reproduced at the
    /// same positions by greedy decoding for scene `index`.
    pub fn caption_prefix_match(&self, index: usize, k: usize) -> Result<f64> {
        let scene = self
            .scenes
            .get(index)
            .ok_or_else(|| Error::InputDomain(format!("no scene {index}")))?;
        let tok = self.pipeline.tokenizer();
        let truth = tok.encode(&scene.caption);
        let gen = self.pipeline.caption(&scene.features, scene.target_view, k, Decoding::Greedy)?;
        Ok(prefix_match(&gen.ids, &truth, k))
    }
}

/// Share of positions `< min(k, truth.len())` where `generated` agrees with
/// `truth`.
pub fn prefix_match(generated: &[usize], truth: &[usize], k: usize) -> f64 {
    let n = k.min(truth.len());
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&i| generated.get(i) == Some(&truth[i])).count();
    hits as f64 / n as f64
}

/// Trailing moving average with a window of `window` steps (shorter at the
/// start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SmokeReport {
    pub trajectory: Vec<StepRecord>,
    pub passed: bool,
    pub reason: String,
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
    #[serde(skip)]
    pub elapsed: Duration,
}

pub const SMOKE_MAX_RATIO: f64 = 0.2;

/// Synthesizes `num_scenes` scenes, trains for `steps` and passes iff the
/// final combined loss is at most a fifth of the first.
pub fn overfit_smoke(
    config: &PipelineConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<(SmokeReport, Trainer)> {
    let start = Instant::now();
    let templates = GroundViewTemplates::builtin();
    let pipeline = CaptionPipeline::new(config.clone(), templates.clone(), &[])?;
    let scenes = make_synthetic_dataset(
        config.num_scenes,
        pipeline.view_map(),
        pipeline.provider(),
        &templates,
        sub_seed(config.seed, SEED_DATASET),
    )?;
    let mut trainer = Trainer::new(pipeline, scenes, TrainConfig::from_pipeline(config))?;
    let trajectory = trainer.run(config.steps, metrics)?;
    let first_total = trajectory.first().map(|r| r.total);
    let last_total = trajectory.last().map(|r| r.total);
    let (passed, reason) = match (first_total, last_total) {
        (Some(first), Some(last)) if last <= SMOKE_MAX_RATIO * first => {
            (true, format!("final loss {last:.4} ≤ {SMOKE_MAX_RATIO} × initial {first:.4}"))
        }
        (Some(first), Some(last)) => (
            false,
            format!("final loss {last:.4} > {SMOKE_MAX_RATIO} × initial {first:.4}"),
        ),
        _ => (false, "no training".to_string()),
    };
    Ok((
        SmokeReport {
            trajectory,
            passed,
            reason,
            first_total,
            last_total,
            elapsed: start.elapsed(),
        },
        trainer,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::default();
        store.insert("x", ndarray::array![[1.0, -1.0]]);
        let grads = BTreeMap::from([("x".to_string(), ndarray::array![[0.5, -2.0]])]);
        let mut adam = Adam::new(0.1);
        adam.begin_step();
        adam.update(&mut store, &grads);
        let x = store.get("x").unwrap();
        assert!((x[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((x[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[4.0, 2.0, 0.0, 2.0], 2), vec![4.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn prefix_match_counts_positions() {
        assert_eq!(prefix_match(&[1, 2, 9], &[1, 2, 3, 4], 10), 0.5);
        assert_eq!(prefix_match(&[], &[], 10), 0.0);
    }

    #[test]
    fn train_config_rejects_unfreezing() {
        let mut c = TrainConfig::from_pipeline(&PipelineConfig::toy());
        c.validate().unwrap();
        c.frozen.remove(&Owner::ToyLm);
        assert!(c.validate().is_err());
        c.trainable.insert(Owner::ToyLm);
        assert!(c.validate().is_err());
    }
}
