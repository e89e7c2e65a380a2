//! Contextual memory compressor.
//!
//! Every time a frame leaves the working window (and passes the subsample
//! rule) its stamped token `f_τ` is pushed into the observation cache and
//! `M` query tokens run through `N` blocks:
//!
//! ```text
//! q₁        = q                                   (trainable)
//! x₁        = qₙ + attn(LN(qₙ)Qs, LN(C̄q,n)Ks, LN(C̄q,n)Vs)
//! x₂        = x₁ + attn(LN(x₁)Qc, LN(C̄f)Kc,   LN(C̄f)Vc)
//! qₙ₊₁      = x₂ + MLP(LN(x₂))
//! e_τ       = MLP(LN(q_{N+1}))
//! ```
//!
//! Block `n`'s input queries are inserted into its summary cache before
//! the self-attention reads it, so no cache is ever empty when attended.
//! Cache writes are stop-gradient copies: gradients reach the compressor
//! weights only through the current step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::nn::{multi_head_attention, Bound, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodicMemory {
    pub tokens: Matrix,
    pub last_compressed_t: Option<usize>,
}

impl EpisodicMemory {
    pub fn is_null(&self) -> bool {
        self.last_compressed_t.is_none()
    }
}

/// The all-zero `M × D` block used before anything has been compressed.
pub fn null_memory(tokens: usize, dim: usize) -> EpisodicMemory {
    EpisodicMemory { tokens: Matrix::zeros(tokens, dim), last_compressed_t: None }
}

/// Per-token dropout mask: each row is zeroed with probability `p`,
/// survivors scaled by `1/(1−p)`. `None` when `p == 0`.
pub fn dropout_mask(tokens: usize, dim: usize, p: f64, rng: &mut impl Rng) -> Option<Matrix> {
    assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0,1), got {p}");
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Matrix::zeros(tokens, dim);
    for r in 0..tokens {
        let v = if rng.gen::<f64>() < p { 0.0 } else { keep };
        mask.row_mut(r).iter_mut().for_each(|m| *m = v);
    }
    Some(mask)
}

/// Memory-token dropout; identity at inference.
pub fn episodic_dropout(e: &EpisodicMemory, p: f64, train: bool, rng: &mut impl Rng) -> EpisodicMemory {
    if !train {
        return e.clone();
    }
    match dropout_mask(e.tokens.rows(), e.tokens.cols(), p, rng) {
        Some(mask) => EpisodicMemory { tokens: e.tokens.zip_map(&mask, |a, b| a * b), ..e.clone() },
        None => e.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub dim: usize,
    pub tokens: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    self_norm: LayerNorm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    cross_norm: LayerNorm,
    context_norm: LayerNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    mlp_norm: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Compressor {
    cfg: CompressorConfig,
    queries: ParamId,
    blocks: Vec<Block>,
    head_norm: LayerNorm,
    head: Mlp,
}

impl Compressor {
    pub fn new(store: &mut ParamStore, cfg: CompressorConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let queries = store.add_uniform("compressor.queries", cfg.tokens, d, 1.0 / (d as f64).sqrt(), rng);
        let blocks = (0..cfg.depth)
            .map(|n| {
                let name = |s: &str| format!("compressor.block{n}.{s}");
                Block {
                    self_norm: LayerNorm::new(store, &name("self_norm"), d),
                    self_q: Linear::new(store, &name("self_q"), d, d, false, rng),
                    self_k: Linear::new(store, &name("self_k"), d, d, false, rng),
                    self_v: Linear::new(store, &name("self_v"), d, d, false, rng),
                    cross_norm: LayerNorm::new(store, &name("cross_norm"), d),
                    context_norm: LayerNorm::new(store, &name("context_norm"), d),
                    cross_q: Linear::new(store, &name("cross_q"), d, d, false, rng),
                    cross_k: Linear::new(store, &name("cross_k"), d, d, false, rng),
                    cross_v: Linear::new(store, &name("cross_v"), d, d, false, rng),
                    mlp_norm: LayerNorm::new(store, &name("mlp_norm"), d),
                    mlp: Mlp::new(store, &name("mlp"), (d, d * cfg.mlp_ratio, d), cfg.activation, rng),
                }
            })
            .collect();
        let head_norm = LayerNorm::new(store, "compressor.head_norm", d);
        let head = Mlp::new(store, "compressor.head", (d, d * cfg.mlp_ratio, d), cfg.activation, rng);
        Self { cfg, queries, blocks, head_norm, head }
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.cfg
    }

    pub fn null_memory(&self) -> EpisodicMemory {
        null_memory(self.cfg.tokens, self.cfg.dim)
    }

    fn check_state(&self, mem: &MemoryState, t: usize) -> Result<()> {
        if mem.summary_caches.len() != self.cfg.depth {
            return Err(Error::Config(format!(
                "memory has {} summary caches for a depth-{} compressor",
                mem.summary_caches.len(),
                self.cfg.depth
            )));
        }
        if let Some(last) = mem.episodic.as_ref().and_then(|e| e.last_compressed_t) {
            if t <= last {
                return Err(Error::Contract(format!("compress at τ={t} after τ={last}: timesteps must increase")));
            }
        }
        Ok(())
    }

    /// One recursive compression step on the graph. `stamped` is the
    /// `1 × D` token `o_τ + PE(τ)`. Caches in `mem` are updated in place
    /// and `mem.episodic` is set to the new value.
    pub fn compress_step(&self, g: &mut Graph, p: &Bound, stamped: Var, t: usize, mem: &mut MemoryState) -> Result<Var> {
        self.check_state(mem, t)?;
        let d = self.cfg.dim;
        if g.value(stamped).shape() != (1, d) {
            return Err(Error::Config(format!("stamped token has shape {:?}, expected (1, {d})", g.value(stamped).shape())));
        }
        mem.obs_cache.insert(t, g.value(stamped).clone())?;
        let e = self.attend(g, p, mem, Some(t))?;
        if !g.value(e).is_finite() {
            return Err(Error::Numerical(format!("non-finite episodic memory at τ={t}")));
        }
        mem.episodic = Some(EpisodicMemory { tokens: g.value(e).clone(), last_compressed_t: Some(t) });
        Ok(e)
    }

    /// Query path of one step. With `insert = Some(τ)` each block first
    /// writes its input queries into its summary cache; with `None` the
    /// caches are read as they stand.
    fn attend(&self, g: &mut Graph, p: &Bound, mem: &mut MemoryState, insert: Option<usize>) -> Result<Var> {
        let context = g.constant(mem.obs_cache.stacked());
        let mut x = p.var(self.queries);
        for (block, cache) in self.blocks.iter().zip(mem.summary_caches.iter_mut()) {
            if let Some(t) = insert {
                cache.insert(t, g.value(x).clone())?;
            }
            let summaries = g.constant(cache.stacked());

            let qn = block.self_norm.forward(g, p, x);
            let kn = block.self_norm.forward(g, p, summaries);
            let (q, k, v) = (
                block.self_q.forward(g, p, qn),
                block.self_k.forward(g, p, kn),
                block.self_v.forward(g, p, kn),
            );
            let sa = multi_head_attention(g, q, k, v, self.cfg.heads, None);
            let x1 = g.add(x, sa);

            let qn = block.cross_norm.forward(g, p, x1);
            let cn = block.context_norm.forward(g, p, context);
            let (q, k, v) = (
                block.cross_q.forward(g, p, qn),
                block.cross_k.forward(g, p, cn),
                block.cross_v.forward(g, p, cn),
            );
            let ca = multi_head_attention(g, q, k, v, self.cfg.heads, None);
            let x2 = g.add(x1, ca);

            let h = block.mlp_norm.forward(g, p, x2);
            let h = block.mlp.forward(g, p, h);
            x = g.add(x2, h);
        }
        let h = self.head_norm.forward(g, p, x);
        Ok(self.head.forward(g, p, h))
    }

    /// Re-runs the most recent step of `mem` against its caches as they
    /// stand, without writing to them. At the parameters that produced
    /// `mem` this reproduces `mem.episodic`; as a function of the
    /// parameters it is exactly what the stop-gradient contract
    /// differentiates, which makes it the finite-difference target for
    /// gradient checks.
    pub fn replay_last_step(&self, g: &mut Graph, p: &Bound, mem: &MemoryState) -> Result<Var> {
        if mem.episodic.as_ref().and_then(|e| e.last_compressed_t).is_none() {
            return Err(Error::Contract("replay_last_step on a state that has compressed nothing".into()));
        }
        let mut frozen = mem.clone();
        self.attend(g, p, &mut frozen, None)
    }

    /// Folds [`Compressor::compress_step`] over `frames` (`(τ, stamped row)`
    /// pairs, τ strictly increasing). Only the last step records backward
    /// information; earlier steps reach the result solely through the
    /// stop-gradient caches. Returns `None` for an empty history.
    pub fn run_history_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: &[(usize, Var)],
        mem: &mut MemoryState,
    ) -> Result<Option<Var>> {
        if frames.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Contract("history frames must have strictly increasing τ".into()));
        }
        let Some((last, prefix)) = frames.split_last() else { return Ok(None) };
        let was = g.set_grad_enabled(false);
        for &(t, f) in prefix {
            self.compress_step(g, p, f, t, mem)?;
        }
        g.set_grad_enabled(was);
        Ok(Some(self.compress_step(g, p, last.1, last.0, mem)?))
    }

    /// Gradient-free streaming step on an existing state.
    pub fn compress(&self, store: &ParamStore, stamped: &[f64], t: usize, mem: &mut MemoryState) -> Result<EpisodicMemory> {
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let f = g.constant(Matrix::row_vector(stamped.to_vec()));
        self.compress_step(&mut g, &p, f, t, mem)?;
        Ok(mem.episodic.clone().expect("compress_step sets episodic memory"))
    }

    /// Fresh state, every frame compressed in order. Empty input yields the
    /// null memory.
    pub fn run_history(
        &self,
        store: &ParamStore,
        frames: &[(usize, Vec<f64>)],
        mut mem: MemoryState,
    ) -> Result<(EpisodicMemory, MemoryState)> {
        mem.reset_episode();
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let vars: Vec<(usize, Var)> =
            frames.iter().map(|(t, f)| (*t, g.constant(Matrix::row_vector(f.clone())))).collect();
        self.run_history_graph(&mut g, &p, &vars, &mut mem)?;
        let e = mem.episodic.clone().unwrap_or_else(|| self.null_memory());
        Ok((e, mem))
    }
}
