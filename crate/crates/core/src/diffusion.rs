//! DDPM action generation: noise schedule, forward noising, the
//! transformer-decoder noise predictor and the K-step sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::encoder::positional_embedding;
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Bound, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Linear-β DDPM schedule. Index `k` runs from 1 to `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_k` linear from `beta_start` to `beta_end` over `steps` values,
    /// `ᾱ_k = ∏_{j≤k} (1−β_j)`, `σ_k = √β_k` for `k > 1` and `σ_1 = 0`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "noise schedule needs 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas.iter().enumerate().map(|(i, b)| if i == 0 { 0.0 } else { b.sqrt() }).collect();
        Ok(Self { betas, alphas, alpha_bars, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, k: usize) -> usize {
        assert!(k >= 1 && k <= self.steps(), "diffusion step {k} outside 1..={}", self.steps());
        k - 1
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[self.idx(k)]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[self.idx(k)]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[self.idx(k)]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[self.idx(k)]
    }
}

/// `a_k = √ᾱ_k a₀ + √(1−ᾱ_k) ε`.
pub fn add_noise(a0: &Matrix, k: usize, noise: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    if k == 0 || k > sched.steps() {
        return Err(Error::Config(format!("diffusion step {k} outside 1..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(k);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.zip_map(noise, |a, e| s0 * a + s1 * e))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Reverse process from `a_K ~ N(0, I)`:
///
/// `a_{k−1} = (a_k − (1−α_k)/√(1−ᾱ_k) · ε̂(a_k, k)) / √α_k + σ_k z`, with no
/// noise on the last step. `predict` supplies `ε̂`.
pub fn sample_with(
    sched: &NoiseSchedule,
    horizon: usize,
    action_dim: usize,
    rng: &mut impl Rng,
    mut predict: impl FnMut(&Matrix, usize) -> Matrix,
) -> Result<Matrix> {
    let mut a = standard_normal(horizon, action_dim, rng);
    for k in (1..=sched.steps()).rev() {
        let eps = predict(&a, k);
        let (alpha, ab) = (sched.alpha(k), sched.alpha_bar(k));
        let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
        let root = alpha.sqrt();
        a = a.zip_map(&eps, |x, e| (x - coef * e) / root);
        if k > 1 {
            let sigma = sched.sigma(k);
            let z = standard_normal(horizon, action_dim, rng);
            a = a.zip_map(&z, |x, n| x + sigma * n);
        }
        if !a.is_finite() {
            return Err(Error::Numerical(format!("non-finite action chunk at denoising step {k}")));
        }
    }
    Ok(a)
}

/// Per-dimension min/max scaling of actions to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ActionNormalizer {
    pub fn fit<'a>(actions: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for a in actions {
            if min.is_empty() {
                min = a.to_vec();
                max = a.to_vec();
            }
            for (i, v) in a.iter().enumerate() {
                min[i] = min[i].min(*v);
                max[i] = max[i].max(*v);
            }
        }
        Self { min, max }
    }

    pub fn identity(dim: usize) -> Self {
        Self { min: vec![-1.0; dim], max: vec![1.0; dim] }
    }

    fn half_range(&self, i: usize) -> f64 {
        let r = 0.5 * (self.max[i] - self.min[i]);
        if r > 1e-12 {
            r
        } else {
            1.0
        }
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter().enumerate().map(|(i, v)| (v - self.min[i]) / self.half_range(i) - 1.0).collect()
    }

    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter().enumerate().map(|(i, v)| (v + 1.0) * self.half_range(i) + self.min[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub window: usize,
    pub memory_tokens: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    /// Causal mask on action self-attention.
    pub causal: bool,
}

impl DenoiserConfig {
    /// Rows of the conditioning block: timestep, window, episodic tokens.
    pub fn condition_rows(&self) -> usize {
        1 + self.window + self.memory_tokens
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderBlock {
    self_norm: LayerNorm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_o: Linear,
    cross_norm: LayerNorm,
    cond_norm: LayerNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_o: Linear,
    mlp_norm: LayerNorm,
    mlp: Mlp,
}

/// Noise predictor `ε_θ(a_k, w, e, k)`: action tokens attend to each other
/// and to the condition block `[time(k); w; e]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    action_embed: Linear,
    chunk_pos: ParamId,
    cond_pos: ParamId,
    time_mlp: Mlp,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    head: Linear,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: DenoiserConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let emb = 1.0 / (d as f64).sqrt();
        let action_embed = Linear::new(store, "denoiser.action_embed", cfg.action_dim, d, true, rng);
        let chunk_pos = store.add_uniform("denoiser.chunk_pos", cfg.horizon, d, emb, rng);
        let cond_pos = store.add_uniform("denoiser.cond_pos", cfg.condition_rows(), d, emb, rng);
        let time_mlp = Mlp::new(store, "denoiser.time_mlp", (d, d * cfg.mlp_ratio, d), cfg.activation, rng);
        let blocks = (0..cfg.depth)
            .map(|n| {
                let name = |s: &str| format!("denoiser.block{n}.{s}");
                DecoderBlock {
                    self_norm: LayerNorm::new(store, &name("self_norm"), d),
                    self_q: Linear::new(store, &name("self_q"), d, d, false, rng),
                    self_k: Linear::new(store, &name("self_k"), d, d, false, rng),
                    self_v: Linear::new(store, &name("self_v"), d, d, false, rng),
                    self_o: Linear::new(store, &name("self_o"), d, d, true, rng),
                    cross_norm: LayerNorm::new(store, &name("cross_norm"), d),
                    cond_norm: LayerNorm::new(store, &name("cond_norm"), d),
                    cross_q: Linear::new(store, &name("cross_q"), d, d, false, rng),
                    cross_k: Linear::new(store, &name("cross_k"), d, d, false, rng),
                    cross_v: Linear::new(store, &name("cross_v"), d, d, false, rng),
                    cross_o: Linear::new(store, &name("cross_o"), d, d, true, rng),
                    mlp_norm: LayerNorm::new(store, &name("mlp_norm"), d),
                    mlp: Mlp::new(store, &name("mlp"), (d, d * cfg.mlp_ratio, d), cfg.activation, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "denoiser.final_norm", d);
        let head = Linear::new(store, "denoiser.head", d, cfg.action_dim, true, rng);
        Self { cfg, action_embed, chunk_pos, cond_pos, time_mlp, blocks, final_norm, head }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn causal_mask(&self) -> Option<Matrix> {
        self.cfg.causal.then(|| {
            let h = self.cfg.horizon;
            let mut m = Matrix::zeros(h, h);
            for i in 0..h {
                for j in i + 1..h {
                    m.set(i, j, -1e30);
                }
            }
            m
        })
    }

    /// Builds the `(1 + L + M) × D` condition block for diffusion step `k`.
    pub fn condition(&self, g: &mut Graph, p: &Bound, window: Var, episodic: Var, k: usize) -> Var {
        let d = self.cfg.dim;
        assert_eq!(g.value(window).shape(), (self.cfg.window, d), "window tokens shape");
        assert_eq!(g.value(episodic).shape(), (self.cfg.memory_tokens, d), "episodic memory shape");
        let tk = g.constant(Matrix::row_vector(positional_embedding(k, d)));
        let time = self.time_mlp.forward(g, p, tk);
        let cond = g.concat_rows(&[time, window, episodic]);
        g.add(cond, p.var(self.cond_pos))
    }

    /// `ε_θ` on the graph for a prepared condition block.
    pub fn predict_with_condition(&self, g: &mut Graph, p: &Bound, noisy: Var, cond: Var) -> Var {
        assert_eq!(g.value(noisy).shape(), (self.cfg.horizon, self.cfg.action_dim), "noisy chunk shape");
        let mask = self.causal_mask();
        let x = self.action_embed.forward(g, p, noisy);
        let mut x = g.add(x, p.var(self.chunk_pos));
        for b in &self.blocks {
            let h = b.self_norm.forward(g, p, x);
            let (q, k, v) = (b.self_q.forward(g, p, h), b.self_k.forward(g, p, h), b.self_v.forward(g, p, h));
            let a = multi_head_attention(g, q, k, v, self.cfg.heads, mask.as_ref());
            let a = b.self_o.forward(g, p, a);
            x = g.add(x, a);

            let h = b.cross_norm.forward(g, p, x);
            let c = b.cond_norm.forward(g, p, cond);
            let (q, k, v) = (b.cross_q.forward(g, p, h), b.cross_k.forward(g, p, c), b.cross_v.forward(g, p, c));
            let a = multi_head_attention(g, q, k, v, self.cfg.heads, None);
            let a = b.cross_o.forward(g, p, a);
            x = g.add(x, a);

            let h = b.mlp_norm.forward(g, p, x);
            let h = b.mlp.forward(g, p, h);
            x = g.add(x, h);
        }
        let h = self.final_norm.forward(g, p, x);
        self.head.forward(g, p, h)
    }

    pub fn predict_noise(&self, g: &mut Graph, p: &Bound, noisy: Var, window: Var, episodic: Var, k: usize) -> Var {
        let cond = self.condition(g, p, window, episodic, k);
        self.predict_with_condition(g, p, noisy, cond)
    }

    /// Diffusion loss for one expert chunk: draws `k ~ U{1..K}` and
    /// `ε ~ N(0, I)`, returns `mse(ε, ε_θ(a_k, w, e, k))`.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        sched: &NoiseSchedule,
        a0: &Matrix,
        window: Var,
        episodic: Var,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let k = rng.gen_range(1..=sched.steps());
        let eps = standard_normal(a0.rows(), a0.cols(), rng);
        self.loss_at(g, p, sched, a0, window, episodic, k, &eps)
    }

    /// [`Denoiser::training_loss`] with `k` and `ε` fixed.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_at(
        &self,
        g: &mut Graph,
        p: &Bound,
        sched: &NoiseSchedule,
        a0: &Matrix,
        window: Var,
        episodic: Var,
        k: usize,
        eps: &Matrix,
    ) -> Result<Var> {
        let noisy = g.constant(add_noise(a0, k, eps, sched)?);
        let pred = self.predict_noise(g, p, noisy, window, episodic, k);
        let target = g.constant(eps.clone());
        Ok(g.mse_loss(pred, target))
    }

    /// Draws an action chunk (normalised units) conditioned on `window`
    /// (`L × D`) and `episodic` (`M × D`).
    pub fn sample_chunk(
        &self,
        store: &ParamStore,
        window: &Matrix,
        episodic: &Matrix,
        sched: &NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Result<Matrix> {
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let w = g.constant(window.clone());
        let e = g.constant(episodic.clone());
        let mut conds: Vec<Option<Var>> = vec![None; sched.steps() + 1];
        sample_with(sched, self.cfg.horizon, self.cfg.action_dim, rng, |a, k| {
            let cond = *conds[k].get_or_insert_with(|| self.condition(&mut g, &p, w, e, k));
            let noisy = g.constant(a.clone());
            let out = self.predict_with_condition(&mut g, &p, noisy, cond);
            g.value(out).clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Denoiser, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let cfg = DenoiserConfig {
            dim: 16,
            horizon: 2,
            action_dim: 2,
            window: 2,
            memory_tokens: 2,
            depth: 2,
            heads: 1,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            causal: false,
        };
        (Denoiser::new(&mut store, cfg, &mut rng), store)
    }

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.sigma(1), 0.0);
        let mut prod = 1.0;
        let mut prev_ab = 1.0;
        let mut prev_beta = 0.0;
        for k in 1..=50 {
            prod *= 1.0 - s.beta(k);
            assert!((s.alpha_bar(k) - prod).abs() < 1e-12);
            assert!(s.alpha_bar(k) < prev_ab && s.alpha_bar(k) > 0.0);
            assert!(s.beta(k) > prev_beta && s.beta(k) < 1.0);
            prev_ab = s.alpha_bar(k);
            prev_beta = s.beta(k);
            if k > 1 {
                assert_eq!(s.sigma(k), s.beta(k).sqrt());
            }
        }
        assert!(s.alpha_bar(50) < 0.05);
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_parts() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let a0 = Matrix::from_rows(&[[0.5, -1.0]]);
        let eps = Matrix::from_rows(&[[1.5, 0.25]]);
        let k = 6;
        let det = add_noise(&a0, k, &Matrix::zeros(1, 2), &s).unwrap();
        assert_eq!(det, a0.map(|v| v * s.alpha_bar(k).sqrt()));
        let pure = add_noise(&Matrix::zeros(1, 2), k, &eps, &s).unwrap();
        assert_eq!(pure, eps.map(|v| v * (1.0 - s.alpha_bar(k)).sqrt()));
        assert!(add_noise(&a0, 0, &eps, &s).is_err());
        assert!(add_noise(&a0, 11, &eps, &s).is_err());
    }

    #[test]
    fn single_step_sampler_closed_form() {
        let s = NoiseSchedule::linear(1, 0.02, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a1 = standard_normal(3, 2, &mut rng.clone());
        let a0 = sample_with(&s, 3, 2, &mut rng, |a, _| Matrix::zeros(a.rows(), a.cols())).unwrap();
        assert_eq!(a0, a1.map(|v| v / s.alpha(1).sqrt()));
    }

    #[test]
    fn teacher_forced_sampler_recovers_clean_chunk() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        let target = Matrix::from_rows(&[[0.3, -0.7], [1.2, 0.05]]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = sample_with(&s, 2, 2, &mut rng, |a, k| {
            let ab = s.alpha_bar(k);
            a.zip_map(&target, |x, t| (x - ab.sqrt() * t) / (1.0 - ab).sqrt())
        })
        .unwrap();
        assert!(out.max_abs_diff(&target) < 1e-6);
    }

    #[test]
    fn sampler_aborts_on_nan() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = sample_with(&s, 1, 1, &mut rng, |_, _| Matrix::filled(1, 1, f64::NAN));
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn predict_noise_shape_and_determinism() {
        let (den, store) = tiny();
        let run = || {
            let mut g = Graph::no_grad();
            let p = store.bind(&mut g);
            let a = g.constant(Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.4]]));
            let w = g.constant(Matrix::filled(2, 16, 0.1));
            let e = g.constant(Matrix::zeros(2, 16));
            let out = den.predict_noise(&mut g, &p, a, w, e, 3);
            g.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), (2, 2));
        assert_eq!(a, run());
    }

    #[test]
    fn swapping_window_and_memory_changes_prediction() {
        let (den, store) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = standard_normal(2, 16, &mut rng);
        let e = standard_normal(2, 16, &mut rng);
        let run = |w: &Matrix, e: &Matrix| {
            let mut g = Graph::no_grad();
            let p = store.bind(&mut g);
            let a = g.constant(Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.4]]));
            let (w, e) = (g.constant(w.clone()), g.constant(e.clone()));
            let out = den.predict_noise(&mut g, &p, a, w, e, 3);
            g.value(out).clone()
        };
        assert!(run(&w, &e).max_abs_diff(&run(&e, &w)) > 1e-9);
    }

    #[test]
    fn oracle_predictor_gives_zero_loss() {
        let eps = Matrix::from_rows(&[[0.2, 0.9]]);
        let mut g = Graph::new();
        let pred = g.constant(eps.clone());
        let target = g.constant(eps);
        let l = g.mse_loss(pred, target);
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn loss_is_nonnegative_and_gradient_checks() {
        let (den, store) = tiny();
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a0 = standard_normal(2, 2, &mut rng);
        let eps = standard_normal(2, 2, &mut rng);
        let w = standard_normal(2, 16, &mut rng);
        let e = standard_normal(2, 16, &mut rng);
        let loss_of = |store: &ParamStore| {
            let mut g = Graph::no_grad();
            let p = store.bind(&mut g);
            let (wv, ev) = (g.constant(w.clone()), g.constant(e.clone()));
            let l = den.loss_at(&mut g, &p, &s, &a0, wv, ev, 4, &eps).unwrap();
            g.scalar(l)
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (wv, ev) = (g.constant(w.clone()), g.constant(e.clone()));
        let l = den.loss_at(&mut g, &p, &s, &a0, wv, ev, 4, &eps).unwrap();
        assert!(g.scalar(l) >= 0.0);
        g.backward(l);
        let grads = p.grads(&g);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (i, grad) in grads.iter().enumerate() {
            for j in (0..grad.len()).step_by(7) {
                let mut plus = store.clone();
                plus.params_mut()[i].value.as_mut_slice()[j] += h;
                let mut minus = store.clone();
                minus.params_mut()[i].value.as_mut_slice()[j] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = grad.as_slice()[j];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn sampler_is_deterministic_under_seed() {
        let (den, store) = tiny();
        let s = NoiseSchedule::linear(5, 1e-3, 0.2).unwrap();
        let w = Matrix::filled(2, 16, 0.2);
        let e = Matrix::zeros(2, 16);
        let a = den.sample_chunk(&store, &w, &e, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = den.sample_chunk(&store, &w, &e, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (2, 2));
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let cfg = DenoiserConfig { causal: true, ..tiny().0.cfg.clone() };
        let den = Denoiser::new(&mut store, cfg, &mut rng);
        let run = |last: f64| {
            let mut g = Graph::no_grad();
            let p = store.bind(&mut g);
            let a = g.constant(Matrix::from_rows(&[[0.1, 0.2], [last, -0.4]]));
            let w = g.constant(Matrix::filled(2, 16, 0.1));
            let e = g.constant(Matrix::zeros(2, 16));
            let out = den.predict_noise(&mut g, &p, a, w, e, 3);
            g.value(out).clone()
        };
        let (a, b) = (run(0.3), run(-2.0));
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn normalizer_round_trip() {
        let rows = [vec![0.0, -2.0], vec![1.0, 2.0], vec![0.5, 0.0]];
        let n = ActionNormalizer::fit(rows.iter().map(|r| r.as_slice()));
        assert_eq!(n.normalize(&[0.0, -2.0]), vec![-1.0, -1.0]);
        assert_eq!(n.normalize(&[1.0, 2.0]), vec![1.0, 1.0]);
        let back = n.denormalize(&n.normalize(&[0.25, 1.5]));
        assert!((back[0] - 0.25).abs() < 1e-15 && (back[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn overfits_a_single_sample() {
        let (den, mut store) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sched = NoiseSchedule::linear(10, 0.05, 0.5).unwrap();
        let a0 = Matrix::from_rows(&[[0.5, -0.25], [0.75, 0.0]]);
        let window = standard_normal(2, 16, &mut rng);
        let episodic = standard_normal(2, 16, &mut rng);
        let mut opt = crate::optim::AdamW::new(&store, 3e-3, 0.9, 0.999, 0.0);
        let mut losses = Vec::new();
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let (w, e) = (g.constant(window.clone()), g.constant(episodic.clone()));
            let loss = den.training_loss(&mut g, &p, &sched, &a0, w, e, &mut rng).unwrap();
            losses.push(g.scalar(loss));
            g.backward(loss);
            let grads = p.grads(&g);
            opt.step(&mut store, &grads);
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let (first, last) = (mean(&losses[..5]), mean(&losses[480..]));
        assert!(last < 0.1 * first, "loss {first} -> {last}");
    }
}
