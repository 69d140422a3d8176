//! Trainable bridge pieces: the query projection MLP and low-rank adapters.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, uniform, ParamStore};

/// `d_q → hidden → GELU → d_llm`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMlp {
    params: ParamStore,
    d_in: usize,
    hidden: usize,
    d_out: usize,
}

impl ProjectionMlp {
    /// Weights drawn from `N(0, 1/in)`, biases zero.
    pub fn init(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "projection widths must be positive ({d_in}→{hidden}→{d_out})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        params.insert("mlp.fc1.w", normal(&mut rng, hidden, d_in, (d_in as f64).recip().sqrt()));
        params.insert("mlp.fc1.b", Array2::zeros((1, hidden)));
        params.insert("mlp.fc2.w", normal(&mut rng, d_out, hidden, (hidden as f64).recip().sqrt()));
        params.insert("mlp.fc2.b", Array2::zeros((1, d_out)));
        Ok(Self {
            params,
            d_in,
            hidden,
            d_out,
        })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let w1 = params.require("mlp.fc1.w")?;
        let w2 = params.require("mlp.fc2.w")?;
        let (hidden, d_in) = w1.dim();
        let (d_out, h2) = w2.dim();
        let b1 = params.require("mlp.fc1.b")?.dim();
        let b2 = params.require("mlp.fc2.b")?.dim();
        if h2 != hidden || b1 != (1, hidden) || b2 != (1, d_out) {
            return Err(Error::Shape(format!(
                "inconsistent projection tensors: fc1 {:?}, fc2 {:?}",
                (hidden, d_in),
                (d_out, h2)
            )));
        }
        Ok(Self {
            params,
            d_in,
            hidden,
            d_out,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c) = g.shape(x);
        if c != self.d_in {
            return Err(Error::Shape(format!(
                "projection expects width {}, got {c}",
                self.d_in
            )));
        }
        let w1 = g.param(&self.params, "mlp.fc1.w")?;
        let b1 = g.param(&self.params, "mlp.fc1.b")?;
        let w2 = g.param(&self.params, "mlp.fc2.w")?;
        let b2 = g.param(&self.params, "mlp.fc2.b")?;
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.gelu(h);
        g.linear(h, w2, Some(b2))
    }
}

/// Row-wise projection of `num_queries×d_q` embeddings into the LM space.
pub fn project_queries(mlp: &ProjectionMlp, queries: &Array2<f64>) -> Result<Array2<f64>> {
    let mut g = Graph::inference();
    let x = g.constant(queries.clone());
    let y = mlp.forward_graph(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// One `(A, B)` pair adapting an `out×in` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r×in`
    pub a: Array2<f64>,
    /// `out×r`
    pub b: Array2<f64>,
    pub alpha: f64,
}

impl LoraAdapter {
    /// `A` uniform in `±1/√in`, `B` zero.
    pub fn init(out: usize, input: usize, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_rank(out, input, rank)?;
        Ok(Self {
            a: uniform(rng, rank, input, (input as f64).recip().sqrt()),
            b: Array2::zeros((out, rank)),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `W + (α/r)·B·A`.
    pub fn materialize(&self, base: &Array2<f64>) -> Array2<f64> {
        base + &(self.b.dot(&self.a) * self.scaling())
    }
}

fn check_rank(out: usize, input: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > out.min(input) {
        return Err(Error::Config(format!(
            "LoRA rank {rank} outside 1..={} for a {out}×{input} matrix",
            out.min(input)
        )));
    }
    Ok(())
}

/// `W·x + (α/r)·B·(A·x)`.
pub fn lora_apply(base: &Array2<f64>, adapter: &LoraAdapter, x: &Array1<f64>) -> Result<Array1<f64>> {
    let (out, input) = base.dim();
    check_rank(out, input, adapter.rank())?;
    if adapter.a.ncols() != input || adapter.b.dim() != (out, adapter.rank()) || x.len() != input {
        return Err(Error::Shape(format!(
            "base {out}×{input}, A {:?}, B {:?}, x {}",
            adapter.a.dim(),
            adapter.b.dim(),
            x.len()
        )));
    }
    let frozen = base.dot(x);
    let delta = adapter.b.dot(&adapter.a.dot(x));
    Ok(frozen + delta * adapter.scaling())
}

/// Adapters on the query and value projections of every LM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    params: ParamStore,
    rank: usize,
    alpha: f64,
    num_layers: usize,
}

pub const LORA_TARGETS: [&str; 2] = ["q", "v"];

impl LoraSet {
    pub fn init(num_layers: usize, d_model: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for l in 0..num_layers {
            for t in LORA_TARGETS {
                let ad = LoraAdapter::init(d_model, d_model, rank, alpha, &mut rng)?;
                params.insert(format!("lora.layer{l}.{t}.a"), ad.a);
                params.insert(format!("lora.layer{l}.{t}.b"), ad.b);
            }
        }
        Ok(Self {
            params,
            rank,
            alpha,
            num_layers,
        })
    }

    pub fn from_params(params: ParamStore, num_layers: usize, alpha: f64) -> Result<Self> {
        let rank = params.require("lora.layer0.q.a")?.nrows();
        for l in 0..num_layers {
            for t in LORA_TARGETS {
                let a = params.require(&format!("lora.layer{l}.{t}.a"))?;
                let b = params.require(&format!("lora.layer{l}.{t}.b"))?;
                if a.nrows() != rank || b.ncols() != rank {
                    return Err(Error::Shape(format!("LoRA layer {l}.{t} rank mismatch")));
                }
            }
        }
        Ok(Self {
            params,
            rank,
            alpha,
            num_layers,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn adapter(&self, layer: usize, target: &str) -> Result<LoraAdapter> {
        Ok(LoraAdapter {
            a: self.params.require(&format!("lora.layer{layer}.{target}.a"))?.clone(),
            b: self.params.require(&format!("lora.layer{layer}.{target}.b"))?.clone(),
            alpha: self.alpha,
        })
    }

    /// Low-rank delta `(α/r)·x·Aᵀ·Bᵀ` for the rows of `x`.
    pub fn delta_graph(&self, g: &mut Graph, layer: usize, target: &str, x: Var) -> Result<Var> {
        let a = g.param(&self.params, &format!("lora.layer{layer}.{target}.a"))?;
        let b = g.param(&self.params, &format!("lora.layer{layer}.{target}.b"))?;
        let down = g.matmul_t(x, a)?;
        let up = g.matmul_t(down, b)?;
        Ok(g.scale(up, self.scaling()))
    }
}
