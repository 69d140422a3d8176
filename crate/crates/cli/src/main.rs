use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use bevcap::bev_partition::{ViewClassificationMap, ViewIndex};
use bevcap::config::{PipelineConfig, Profile};
use bevcap::groundview::{generate_corpus, GroundViewTemplates, ViewFilter};
use bevcap::llm::{Decoding, Tokenizer};
use bevcap::metrics::{align_by_id, evaluate_corpus, parse_text_records, HashedEmbedder};
use bevcap::pipeline::{
    groundview_vocabulary, qformer_config, sub_seed, CaptionPipeline, SEED_DATASET, SEED_PROVIDER,
};
use bevcap::pos_encoding::{apply_positional_encoding, build_positional_map, BevFeatureMap};
use bevcap::qformer::init_qformer;
use bevcap::tensor_io::{Tensor, TensorContainer, TensorData};
use bevcap::trainer::{make_synthetic_dataset, overfit_smoke, SyntheticBevProvider};

#[derive(Parser)]
#[command(name = "bevcap", version, about = "BEV scene captioning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file (defaults: toy profile)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Toy,
    PaperShape,
}

impl Common {
    fn load_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match (&self.config, self.profile) {
            (Some(path), _) => PipelineConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            (None, Some(ProfileArg::PaperShape)) => PipelineConfig::for_profile(Profile::PaperShape),
            (None, _) => PipelineConfig::toy(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// BEV features → positional encoding → Q-Former query embeddings
    Encode {
        #[command(flatten)]
        common: Common,
        /// `.tns` file with a `features` tensor of shape C×H×W or C×(H·W);
        /// synthetic features are rendered when omitted
        #[arg(long)]
        features: Option<PathBuf>,
        /// Use trained Q-Former weights from a checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Overfit the toy pipeline on synthetic scenes
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Caption a scene with a trained checkpoint
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of a training scene, regenerated from the checkpoint config
        #[arg(long, default_value_t = 0, conflicts_with = "features")]
        scene: usize,
        /// `.tns` feature file to caption instead of a training scene
        #[arg(long, requires = "view")]
        features: Option<PathBuf>,
        /// View to describe (defaults to the scene's target view)
        #[arg(long)]
        view: Option<usize>,
        #[arg(long, default_value_t = 32)]
        max_new_tokens: usize,
        /// Sample at this temperature instead of greedy decoding
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Score predictions against references (JSONL records `{id, text}`)
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Add-one smoothing for BLEU orders ≥ 2
        #[arg(long)]
        smoothing: bool,
    },
    /// Grounding captions from a JSONL annotation file
    GenGroundview {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        /// `all`, a view index 0..5, or `each` for one caption per view
        #[arg(long, default_value = "all")]
        view: String,
        /// Template file (defaults to the shipped templates)
        #[arg(long)]
        templates: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Encode {
            common,
            features,
            checkpoint,
        } => encode(&common, features.as_deref(), checkpoint.as_deref()),
        Command::TrainToy { common, steps } => train_toy(&common, steps),
        Command::Caption {
            common,
            checkpoint,
            scene,
            features,
            view,
            max_new_tokens,
            temperature,
        } => caption(&common, &checkpoint, scene, features.as_deref(), view, max_new_tokens, temperature),
        Command::Eval {
            common,
            pred,
            reference,
            smoothing,
        } => eval(&common, &pred, &reference, smoothing),
        Command::GenGroundview {
            common,
            input,
            view,
            templates,
        } => gen_groundview(&common, &input, &view, templates.as_deref()),
    }
}

fn view_map_tensor(map: &ViewClassificationMap) -> Result<Tensor> {
    let cells = map.cells();
    let data = cells.iter().map(|&v| i32::from(v)).collect();
    Ok(Tensor::new(vec![cells.nrows(), cells.ncols()], TensorData::I32(data))?)
}

fn load_features(path: &Path, cfg: &PipelineConfig) -> Result<BevFeatureMap> {
    let container = TensorContainer::load(path)
        .with_context(|| format!("reading feature container {}", path.display()))?;
    let t = container
        .get("features")
        .ok_or_else(|| anyhow!("stage `features`: container has no `features` tensor"))?;
    let grid = cfg.grid;
    let ok = match t.shape.as_slice() {
        [c, h, w] => *c == cfg.bev_channels && *h == grid.height && *w == grid.width,
        [c, hw] => *c == cfg.bev_channels && *hw == grid.num_cells(),
        _ => false,
    };
    if !ok {
        bail!(
            "stage `features`: shape {:?} does not match {}×{}×{}",
            t.shape,
            cfg.bev_channels,
            grid.height,
            grid.width
        );
    }
    let values = container.get_f64("features").context("stage `features`")?;
    Ok(BevFeatureMap::new(grid, values).context("stage `features`")?)
}

fn dims((rows, cols): (usize, usize)) -> String {
    format!("{rows}×{cols}")
}

fn encode(common: &Common, features: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let templates = GroundViewTemplates::builtin();
    let (cfg, qformer) = match checkpoint {
        Some(path) => {
            let p = CaptionPipeline::load_checkpoint(path, templates.clone())
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if common.config.is_some() || common.profile.is_some() {
                warn!("--config/--profile ignored: the checkpoint carries its own config");
            }
            (p.config().clone(), p.qformer().clone())
        }
        None => {
            let cfg = common.load_config()?;
            let tok = Tokenizer::from_corpus(&groundview_vocabulary(&templates))?;
            let q = init_qformer(qformer_config(&cfg, tok.vocab_size()))?;
            (cfg, q)
        }
    };
    let view_map = bevcap::bev_partition::build_view_map(&cfg.grid).context("stage `view_map`")?;
    let raw = match features {
        Some(path) => load_features(path, &cfg)?,
        None => {
            let provider = SyntheticBevProvider::new(cfg.bev_channels, sub_seed(cfg.seed, SEED_PROVIDER))?;
            let scenes = make_synthetic_dataset(1, &view_map, &provider, &templates, cfg.seed)?;
            scenes.into_iter().next().expect("one scene").features
        }
    };
    let pos = build_positional_map(&view_map, cfg.d_pos).context("stage `positional_encoding`")?;
    let encoded = apply_positional_encoding(&raw, &pos).context("stage `positional_encoding`")?;
    let queries = qformer.encode_bev(&encoded).context("stage `qformer`")?;
    let chain = format!("{} → {}", dims(raw.values().dim()), dims(queries.dim()));
    info!("shape chain: {chain}");
    println!("{chain}");

    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("queries.tns"));
    let mut c = TensorContainer::new();
    c.insert_f64("queries", &queries)?;
    c.insert("view_map", view_map_tensor(&view_map)?)?;
    c.metadata.insert("shape_chain".into(), chain);
    c.metadata.insert("config".into(), cfg.to_flat_string());
    c.save(&out).with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {}", out.display());
    Ok(())
}

fn train_toy(common: &Common, steps: Option<usize>) -> Result<()> {
    let mut cfg = common.load_config()?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if cfg.profile != Profile::Toy {
        bail!("train-toy runs only the toy profile");
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("train-out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    let (report, trainer) = overfit_smoke(&cfg, Some(&mut metrics))?;
    metrics.flush()?;
    let ckpt = out.join("checkpoint.tns");
    trainer.pipeline().save_checkpoint(&ckpt)?;
    let mut scenes = BufWriter::new(fs::File::create(out.join("scenes.jsonl"))?);
    for (i, s) in trainer.scenes().iter().enumerate() {
        let rec = serde_json::json!({
            "index": i,
            "id": s.id,
            "view": s.target_view.get(),
            "text": s.caption,
        });
        writeln!(scenes, "{rec}")?;
    }
    scenes.flush()?;
    info!(
        "{} steps in {:.2?}; {}; metrics {}, checkpoint {}",
        report.trajectory.len(),
        report.elapsed,
        report.reason,
        metrics_path.display(),
        ckpt.display()
    );
    if !report.passed {
        warn!("overfit criterion not met: {}", report.reason);
    }
    Ok(())
}

fn caption(
    common: &Common,
    checkpoint: &Path,
    scene: usize,
    features: Option<&Path>,
    view: Option<usize>,
    max_new_tokens: usize,
    temperature: Option<f64>,
) -> Result<()> {
    let pipeline = CaptionPipeline::load_checkpoint(checkpoint, GroundViewTemplates::builtin())
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let cfg = pipeline.config().clone();
    let (feats, default_view) = match features {
        Some(path) => (load_features(path, &cfg)?, None),
        None => {
            let scenes = make_synthetic_dataset(
                cfg.num_scenes,
                pipeline.view_map(),
                pipeline.provider(),
                pipeline.templates(),
                sub_seed(cfg.seed, SEED_DATASET),
            )?;
            let s = scenes
                .into_iter()
                .nth(scene)
                .ok_or_else(|| anyhow!("scene {scene} outside 0..{}", cfg.num_scenes))?;
            (s.features, Some(s.target_view))
        }
    };
    let view = match (view, default_view) {
        (Some(v), _) => ViewIndex::new(v)?,
        (None, Some(v)) => v,
        (None, None) => bail!("--view is required with --features"),
    };
    let decoding = match temperature {
        Some(t) => Decoding::Sample {
            temperature: t,
            seed: common.seed.unwrap_or(cfg.seed),
        },
        None => Decoding::Greedy,
    };
    let generation = pipeline.caption(&feats, view, max_new_tokens, decoding)?;
    if generation.truncated {
        warn!("caption truncated at {max_new_tokens} tokens");
    }
    println!("{}", generation.text);
    if let Some(out) = &common.out {
        fs::write(out, format!("{}\n", generation.text))?;
    }
    Ok(())
}

fn eval(common: &Common, pred: &Path, reference: &Path, smoothing: bool) -> Result<()> {
    let read = |p: &Path| -> Result<_> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        parse_text_records(&text).with_context(|| format!("parsing {}", p.display()))
    };
    let (cands, refs) = align_by_id(&read(pred)?, &read(reference)?)?;
    let report = evaluate_corpus(&cands, &refs, &HashedEmbedder::default(), smoothing)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &common.out {
        Some(out) => fs::write(out, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn gen_groundview(common: &Common, input: &Path, view: &str, templates: Option<&Path>) -> Result<()> {
    let templates = match templates {
        Some(p) => GroundViewTemplates::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => GroundViewTemplates::builtin(),
    };
    let filters: Vec<ViewFilter> = if view == "each" {
        ViewIndex::all().map(ViewFilter::View).collect()
    } else {
        vec![view.parse()?]
    };
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let corpus = generate_corpus(&text, &filters, &templates);
    for w in &corpus.warnings {
        warn!("{}: {w}", input.display());
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("captions.jsonl"));
    let mut writer = BufWriter::new(fs::File::create(&out)?);
    for c in &corpus.captions {
        serde_json::to_writer(&mut writer, c)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    let mut stats_path = out.clone().into_os_string();
    stats_path.push(".stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&corpus.stats)? + "\n")?;
    info!(
        "{} captions from {} records ({} skipped)",
        corpus.stats.captions, corpus.stats.records, corpus.stats.skipped
    );
    if corpus.too_many_skipped() {
        bail!(
            "{} of {} records malformed (more than 1%)",
            corpus.stats.skipped,
            corpus.stats.records + corpus.stats.skipped
        );
    }
    Ok(())
}
