//! Finite-difference scenarios on toy dimensions, shared by the gradient
//! tests and the acceptance runner.

use bevcap::autograd::Graph;
use bevcap::gradcheck::{check_gradients, GradCheckReport};
use bevcap::config::SimilarityPooling;
use bevcap::llm::{LmConfig, LoraSet, ProjectionMlp, ToyFrozenLm};
use bevcap::losses::{btc_graph, btg_graph, btm_graph};
use bevcap::params::ParamStore;
use bevcap::qformer::{init_qformer, QFormerConfig, QFormerState, TextInput};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

fn small_qformer() -> QFormerState {
    init_qformer(QFormerConfig {
        num_queries: 3,
        d_q: 8,
        num_layers: 2,
        num_heads: 2,
        bev_channels: 6,
        vocab_size: 10,
        max_text_len: 8,
        ..QFormerConfig::toy(6, 10)
    })
    .unwrap()
}

/// Larger weights than the 0.02 init so every path carries signal.
fn perturbed(state: &QFormerState, seed: u64) -> ParamStore {
    let mut store = state.params().clone();
    for (i, (name, t)) in store.iter_mut().enumerate() {
        if name.ends_with(".w") || name.ends_with("query_bank") || name.ends_with("tok_emb") {
            let noise = random(t.nrows(), t.ncols(), seed + i as u64);
            *t = &*t + &(noise * 0.3);
        }
    }
    store
}

/// Scalar readout `mean(x·r)` with a fixed random `r`, so layer-norm outputs
/// have a non-degenerate gradient.
fn readout(g: &mut Graph, x: bevcap::autograd::Var, seed: u64) -> bevcap::Result<bevcap::autograd::Var> {
    let (_, d) = g.shape(x);
    let r = g.constant(random(d, 1, seed));
    let y = g.matmul(x, r)?;
    Ok(g.mean(y))
}

pub fn qformer_cross_attention() -> Vec<GradCheckReport> {
    let state = small_qformer();
    let config = state.config().clone();
    let store = perturbed(&state, 10);
    let cells = random(5, 6, 11);
    check_gradients(
        &store,
        &[
            "qformer.query_bank",
            "qformer.input_proj.w",
            "qformer.layer0.cross.q.w",
            "qformer.layer0.cross.k.w",
            "qformer.layer0.cross.v.w",
            "qformer.layer0.cross.o.w",
            "qformer.layer0.cross_ln.g",
        ],
        STEP,
        |g, s| {
            let q = QFormerState::from_params(config.clone(), s.clone())?;
            let x = g.constant(cells.clone());
            let memory = q.project_bev(g, x)?;
            let queries = g.param(s, "qformer.query_bank")?;
            let out = q.cross_attention_block(g, 0, queries, memory)?;
            readout(g, out, 12)
        },
    )
    .unwrap()
}

pub fn qformer_encode() -> Vec<GradCheckReport> {
    let state = small_qformer();
    let config = state.config().clone();
    let store = perturbed(&state, 20);
    let cells = random(7, 6, 21);
    check_gradients(
        &store,
        &["qformer.query_bank", "qformer.layer1.cross.k.w", "qformer.layer1.ffn.up.w"],
        STEP,
        |g, s| {
            let q = QFormerState::from_params(config.clone(), s.clone())?;
            let x = g.constant(cells.clone());
            let out = q.encode_bev_graph(g, x)?;
            readout(g, out, 22)
        },
    )
    .unwrap()
}

pub fn projection_mlp() -> Vec<GradCheckReport> {
    let mlp = ProjectionMlp::init(8, 16, 6, 30).unwrap();
    let mut store = mlp.params().clone();
    for (i, (_, t)) in store.iter_mut().enumerate() {
        *t = &*t + &(random(t.nrows(), t.ncols(), 31 + i as u64) * 0.1);
    }
    let x = random(4, 8, 35);
    check_gradients(
        &store,
        &["mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b"],
        STEP,
        |g, s| {
            let m = ProjectionMlp::from_params(s.clone())?;
            let input = g.constant(x.clone());
            let y = m.forward_graph(g, input)?;
            readout(g, y, 36)
        },
    )
    .unwrap()
}

pub fn lora_path() -> Vec<GradCheckReport> {
    let lm = ToyFrozenLm::init(LmConfig {
        vocab_size: 12,
        d_model: 8,
        num_layers: 2,
        num_heads: 2,
        max_positions: 16,
        seed: 40,
    })
    .unwrap();
    let lora = LoraSet::init(2, 8, 2, 4.0, 41).unwrap();
    let mut store = lora.params().clone();
    for (i, (name, t)) in store.iter_mut().enumerate() {
        if name.ends_with(".b") {
            *t = random(t.nrows(), t.ncols(), 42 + i as u64) * 0.2;
        }
    }
    let inputs = random(5, 8, 50);
    let targets = [3, 7, 1, 11, 0];
    let active = [false, true, true, true, true];
    check_gradients(
        &store,
        &[
            "lora.layer0.q.a",
            "lora.layer0.q.b",
            "lora.layer0.v.a",
            "lora.layer0.v.b",
            "lora.layer1.q.b",
            "lora.layer1.v.a",
        ],
        STEP,
        |g, s| {
            let set = LoraSet::from_params(s.clone(), 2, 4.0)?;
            let x = g.constant(inputs.clone());
            let logits = lm.forward_graph(g, x, Some(&set))?;
            g.cross_entropy(logits, &targets, &active)
        },
    )
    .unwrap()
}

pub fn btc() -> Vec<GradCheckReport> {
    let mut store = ParamStore::default();
    for i in 0..3 {
        store.insert(format!("q{i}"), random(4, 6, 60 + i));
        store.insert(format!("t{i}"), random(1, 6, 70 + i));
    }
    let names = ["q0", "q1", "q2", "t0", "t1", "t2"];
    let mut reports = Vec::new();
    for (pooling, temperature) in [(SimilarityPooling::Max, 0.07), (SimilarityPooling::Mean, 0.5)] {
        reports.extend(
            check_gradients(&store, &names, STEP, |g, s| {
                let q: Vec<_> = (0..3).map(|i| g.param(s, &format!("q{i}"))).collect::<Result<_, _>>()?;
                let t: Vec<_> = (0..3).map(|i| g.param(s, &format!("t{i}"))).collect::<Result<_, _>>()?;
                btc_graph(g, &q, &t, temperature, pooling)
            })
            .unwrap(),
        );
    }
    reports
}

pub fn btg() -> Vec<GradCheckReport> {
    let mut store = ParamStore::default();
    store.insert("logits", random(6, 5, 80));
    let mut reports = check_gradients(&store, &["logits"], STEP, |g, s| {
        let l = g.param(s, "logits")?;
        btg_graph(g, l, &[0, 4, 2, 2, 1, 3], &[true, true, true, false, true, false])
    })
    .unwrap();

    // Through the Q-Former generation head.
    let state = small_qformer();
    let config = state.config().clone();
    let store = perturbed(&state, 81);
    let cells = random(4, 6, 82);
    let ids = [2, 5, 7, 3, 9];
    reports.extend(
        check_gradients(
            &store,
            &["qformer.tok_emb", "qformer.query_bank", "qformer.layer0.self.v.w"],
            STEP,
            |g, s| {
                let q = QFormerState::from_params(config.clone(), s.clone())?;
                let x = g.constant(cells.clone());
                let memory = q.project_bev(g, x)?;
                let logits = q.generation_logits(g, memory, TextInput::new(&ids))?;
                btg_graph(g, logits, &[5, 7, 3, 9, 0], &[true, true, true, true, false])
            },
        )
        .unwrap(),
    );
    reports
}

pub fn btm() -> Vec<GradCheckReport> {
    let mut store = ParamStore::default();
    store.insert("logits", random(1, 4, 90));
    let mut reports = check_gradients(&store, &["logits"], STEP, |g, s| {
        let l = g.param(s, "logits")?;
        btm_graph(g, l, &[1, 0, 0, 1])
    })
    .unwrap();

    let state = small_qformer();
    let config = state.config().clone();
    let store = perturbed(&state, 91);
    let cells = random(4, 6, 92);
    reports.extend(
        check_gradients(
            &store,
            &["qformer.btm_head.w", "qformer.query_bank", "qformer.layer1.self.k.w"],
            STEP,
            |g, s| {
                let q = QFormerState::from_params(config.clone(), s.clone())?;
                let x = g.constant(cells.clone());
                let memory = q.project_bev(g, x)?;
                let pos = q.match_logit(g, memory, TextInput::new(&[2, 4, 6]))?;
                let neg = q.match_logit(g, memory, TextInput::new(&[2, 8, 1, 3]))?;
                let row = g.concat_rows(&[pos, neg])?;
                let row = g.transpose(row);
                btm_graph(g, row, &[1, 0])
            },
        )
        .unwrap(),
    );
    reports
}

/// Every scenario by name.
pub fn all() -> Vec<(&'static str, Vec<GradCheckReport>)> {
    vec![
        ("q-former cross-attention block", qformer_cross_attention()),
        ("q-former bev encoding", qformer_encode()),
        ("projection mlp", projection_mlp()),
        ("lora path", lora_path()),
        ("contrastive loss", btc()),
        ("grounded generation loss", btg()),
        ("matching loss", btm()),
    ]
}
