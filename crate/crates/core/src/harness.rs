//! Training, evaluation, the constant-cost benchmark and the gradient
//! checker.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::config::RunConfig;
use crate::data::{
    episode_seeds, expert_rollout, make_batches, out_of_window_len, subsample_history, window_indices, Batch,
    DemoDataset, SubsampleMode, Trajectory,
};
use crate::diffusion::{standard_normal, ActionNormalizer};
use crate::encoder::RawObservation;
use crate::envs::{env_reset, env_step, scripted_expert, EnvSpec, EnvState, Task};
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::nn::{Bound, ParamStore};
use crate::optim::{AdamW, Ema};
use crate::policy::{Agent, Policy};
use crate::tensor::Matrix;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVAL_FILE: &str = "eval.json";
pub const BENCH_FILE: &str = "bench.json";

const TRAIN_STREAM: u64 = 0x7EA1_0000;
const EVAL_STREAM: u64 = 0xE7A1_0000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    /// Raw optimiser weights.
    pub params: ParamStore,
    /// EMA weights; these are what evaluation uses.
    pub ema: ParamStore,
    pub rows: Vec<TrainRow>,
}

pub fn write_metrics_csv(rows: &[TrainRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss,grad_norm\n");
    for r in rows {
        out += &format!("{},{},{}\n", r.step, r.loss, r.grad_norm);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains a policy on `ds`; see [`train_run_with`].
pub fn train_run(cfg: &RunConfig, ds: &DemoDataset, out: Option<&Path>) -> Result<TrainOutcome> {
    train_run_with(cfg, ds, out, |_| {})
}

/// Behaviour cloning with the diffusion loss. Each gradient step takes the
/// next length-bucketed batch, draws a training-mode history subsample for
/// every sample, averages the per-sample losses, and applies one AdamW and
/// one EMA update. With `out` set, `metrics.csv` and `checkpoint.json`
/// (EMA weights) are written there; a non-finite loss aborts the run and
/// leaves the last checkpoint untouched.
pub fn train_run_with(
    cfg: &RunConfig,
    ds: &DemoDataset,
    out: Option<&Path>,
    mut on_step: impl FnMut(&TrainRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.check_spec(&cfg.env_spec()?)?;
    if ds.trajectories.is_empty() {
        return Err(Error::Config("training needs at least one trajectory".into()));
    }
    let normalizer = ActionNormalizer::fit(ds.trajectories.iter().flat_map(|t| t.actions.iter().map(Vec::as_slice)));
    let (policy, mut params) = Policy::new(cfg, &ds.modality_dims(), ds.act_dim, normalizer)?;
    let mut opt = AdamW::new(&params, cfg.learning_rate, 0.9, 0.999, cfg.weight_decay);
    let mut ema = Ema::new(&params, cfg.ema_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM);
    let mut queue: VecDeque<Batch> = VecDeque::new();
    let mut rows = Vec::with_capacity(cfg.grad_steps);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for step in 1..=cfg.grad_steps {
        if queue.is_empty() {
            queue.extend(make_batches(ds, cfg.batch_size, cfg.subsample_ratio, cfg.window, &mut rng));
        }
        let batch = queue.pop_front().expect("an epoch has at least one batch");
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let scale = 1.0 / batch.samples.len() as f64;
        let mut total: Option<Var> = None;
        for s in &batch.samples {
            let traj = &ds.trajectories[s.trajectory];
            let history =
                subsample_history(out_of_window_len(s.t, cfg.window), cfg.subsample_ratio, &mut rng, SubsampleMode::Train);
            let loss = policy.sample_loss(&mut g, &p, traj, s.t, &history, true, &mut rng)?;
            let loss = g.scale(loss, scale);
            total = Some(match total {
                Some(acc) => g.add(acc, loss),
                None => loss,
            });
        }
        let total = total.expect("batches are non-empty");
        let loss = g.scalar(total);
        if !loss.is_finite() {
            if let Some(dir) = out {
                write_metrics_csv(&rows, &dir.join(METRICS_FILE))?;
            }
            return Err(Error::Numerical(format!("non-finite loss at step {step}; last checkpoint kept")));
        }
        g.backward(total);
        let grads = p.grads(&g);
        let grad_norm = grads.iter().map(Matrix::norm_sq).sum::<f64>().sqrt();
        opt.step(&mut params, &grads);
        ema.update(&params);
        let row = TrainRow { step, loss, grad_norm };
        on_step(&row);
        rows.push(row);
        if let (Some(dir), true) = (out, cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            policy.save_checkpoint(ema.shadow(), &dir.join(CHECKPOINT_FILE))?;
        }
    }
    let ema = ema.into_shadow();
    if let Some(dir) = out {
        write_metrics_csv(&rows, &dir.join(METRICS_FILE))?;
        policy.save_checkpoint(&ema, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { policy, params, ema, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub seed: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_episode_len: f64,
}

/// Anything that can drive an episode.
pub trait Controller {
    fn begin_episode(&mut self, seed: u64);
    /// Action for the current frame. `state` is the simulator state; only
    /// privileged controllers (the scripted expert) may look at it.
    fn act(&mut self, state: &EnvState, obs: &RawObservation) -> Result<Vec<f64>>;
}

impl Controller for Agent<'_> {
    fn begin_episode(&mut self, seed: u64) {
        Agent::begin_episode(self, seed);
    }

    fn act(&mut self, _state: &EnvState, obs: &RawObservation) -> Result<Vec<f64>> {
        Agent::act(self, obs)
    }
}

/// The scripted expert as a [`Controller`].
#[derive(Clone, Debug)]
pub struct ExpertController {
    pub spec: EnvSpec,
    pub noise: f64,
    rng: ChaCha8Rng,
}

impl ExpertController {
    pub fn new(spec: EnvSpec, noise: f64) -> Self {
        Self { spec, noise, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Controller for ExpertController {
    fn begin_episode(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn act(&mut self, state: &EnvState, _obs: &RawObservation) -> Result<Vec<f64>> {
        Ok(scripted_expert(&self.spec, state, &mut self.rng, self.noise))
    }
}

/// Runs `episodes` episodes of `spec` under `ctrl`. Episode seeds derive
/// from `seed` and never coincide with the demonstration seeds.
pub fn run_episodes(spec: &EnvSpec, episodes: usize, seed: u64, ctrl: &mut dyn Controller) -> Result<EvalReport> {
    let mut successes = 0;
    let mut total_len = 0;
    for ep_seed in episode_seeds(seed ^ EVAL_STREAM).take(episodes) {
        let (mut state, mut obs) = env_reset(spec, ep_seed);
        ctrl.begin_episode(ep_seed.wrapping_add(1));
        while !state.done {
            let a = ctrl.act(&state, &obs)?;
            obs = env_step(spec, &mut state, &a)?.observation;
        }
        successes += state.success as usize;
        total_len += state.t;
    }
    let n = episodes.max(1) as f64;
    Ok(EvalReport {
        task: spec.task,
        seed,
        episodes,
        success_rate: successes as f64 / n,
        mean_episode_len: total_len as f64 / n,
    })
}

/// Closed-loop evaluation of `policy` with `params` (normally the EMA
/// weights) on the task it was configured for.
pub fn evaluate(policy: &Policy, params: &ParamStore, episodes: usize, seed: u64) -> Result<EvalReport> {
    let spec = policy.config.env_spec()?;
    if spec.modality_dims() != policy.modality_dims || spec.act_dim() != policy.action_dim {
        return Err(Error::Config(format!(
            "environment {} has modalities {:?} / act_dim {}, policy expects {:?} / {}",
            spec.task,
            spec.modality_dims(),
            spec.act_dim(),
            policy.modality_dims,
            policy.action_dim
        )));
    }
    let mut agent = policy.agent(params, seed);
    run_episodes(&spec, episodes, seed, &mut agent)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub probe_step: usize,
    pub tokens_live: usize,
    pub ms_per_decision: f64,
}

/// Runs one long episode and, at each probe step, times `repeats` copies of
/// a full decision step (encode, window push, compression, chunk sampling)
/// from the same state. Reports the median and the live token count.
pub fn bench_constant_cost(
    policy: &Policy,
    params: &ParamStore,
    probe_steps: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let last = probe_steps.iter().copied().max().unwrap_or(0);
    let mut spec = policy.config.env_spec()?;
    spec.episode_len = spec.episode_len.max(last + 1);
    let (mut state, mut obs) = env_reset(&spec, seed);
    let mut agent = policy.agent(params, seed);
    let mut rows = Vec::new();
    for t in 0..=last {
        if probe_steps.contains(&t) {
            let mut times = Vec::with_capacity(repeats.max(1));
            let mut tokens = 0;
            for _ in 0..repeats.max(1) {
                let mut probe = agent.clone();
                probe.clear_plan();
                let start = Instant::now();
                probe.act(&obs)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                tokens = probe.memory().tokens_live();
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow { probe_step: t, tokens_live: tokens, ms_per_decision: times[times.len() / 2] });
        }
        let a = agent.act(&obs)?;
        obs = env_step(&spec, &mut state, &a)?.observation;
    }
    Ok(rows)
}

/// Tiny dimensions for finite-difference checks.
pub fn gradcheck_config(base: &RunConfig) -> RunConfig {
    RunConfig {
        dim: 16,
        window: 2,
        memory_tokens: 2,
        compressor_depth: 2,
        cache_size: 4,
        horizon: 4,
        denoiser_depth: 1,
        heads: 1,
        mlp_ratio: 2,
        activation: Activation::Gelu,
        dropout: 0.0,
        zero_episodic: false,
        window_only: false,
        ..base.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub threshold: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.threshold)
    }
}

/// Pass threshold on the per-group maximum relative error.
pub const GRADCHECK_THRESHOLD: f64 = 1e-5;
/// Central-difference step.
const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error: gradients smaller than this are
/// compared in absolute terms, where central differences are noise.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// One training sample frozen for gradient checking: the caches are built
/// from the history at the initial parameters, and the objective replays
/// the final compression step against them, encodes the window, and
/// evaluates the diffusion loss at a fixed `k` and `ε`.
struct CheckProblem {
    policy: Policy,
    traj: Trajectory,
    t: usize,
    memory: Option<MemoryState>,
    a0: Matrix,
    k: usize,
    eps: Matrix,
}

impl CheckProblem {
    fn new(cfg: &RunConfig) -> Result<(Self, ParamStore)> {
        let spec = cfg.env_spec()?;
        let traj = expert_rollout(&spec, cfg.seed, cfg.expert_noise)?;
        let normalizer = ActionNormalizer::fit(traj.actions.iter().map(Vec::as_slice));
        let (policy, store) = Policy::new(cfg, &spec.modality_dims(), spec.act_dim(), normalizer)?;
        let t = traj.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let history = subsample_history(out_of_window_len(t, cfg.window), cfg.subsample_ratio, &mut rng, SubsampleMode::Infer);
        let memory = if history.is_empty() {
            None
        } else {
            let mut g = Graph::no_grad();
            let p = store.bind(&mut g);
            let inputs = policy.observation_inputs(&mut g, &traj, &history, false);
            let mut mem = policy.new_memory();
            policy.history_memory(&mut g, &p, &inputs, &history, &mut mem)?;
            Some(mem)
        };
        let a0 = policy.target_chunk(&traj, t);
        let k = cfg.diffusion_steps.div_ceil(2);
        let eps = standard_normal(cfg.horizon, spec.act_dim(), &mut rng);
        Ok((Self { policy, traj, t, memory, a0, k, eps }, store))
    }

    /// Loss with optional overrides of the conditioning inputs.
    fn loss(&self, g: &mut Graph, p: &Bound, cond: Option<(&Matrix, &Matrix)>) -> Result<(Var, Var, Var)> {
        let pol = &self.policy;
        let (window, episodic) = match cond {
            Some((w, e)) => (g.param(w.clone()), g.param(e.clone())),
            None => {
                let e = match &self.memory {
                    Some(mem) => pol.compressor.replay_last_step(g, p, mem)?,
                    None => g.constant(pol.null_memory().tokens),
                };
                let raws: Vec<RawObservation> =
                    window_indices(self.t, pol.config.window).into_iter().map(|i| self.traj.observation(i)).collect();
                let refs: Vec<&RawObservation> = raws.iter().collect();
                (pol.encoder.encode_frames(g, p, &refs)?, e)
            }
        };
        let loss = pol.denoiser.loss_at(g, p, &pol.schedule, &self.a0, window, episodic, self.k, &self.eps)?;
        Ok((loss, window, episodic))
    }

    fn value(&self, store: &ParamStore, cond: Option<(&Matrix, &Matrix)>) -> Result<f64> {
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let (loss, _, _) = self.loss(&mut g, &p, cond)?;
        Ok(g.scalar(loss))
    }
}

/// Finite-difference check of every parameter group (encoder, compressor,
/// denoiser) and of the loss with respect to its conditioning inputs, at
/// the tiny dimensions of [`gradcheck_config`].
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let cfg = gradcheck_config(cfg);
    let (problem, store) = CheckProblem::new(&cfg)?;

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (loss, window, episodic) = problem.loss(&mut g, &p, None)?;
    g.backward(loss);
    let grads = p.grads(&g);
    let (w0, e0) = (g.value(window).clone(), g.value(episodic).clone());

    let mut groups: Vec<GroupCheck> = Vec::new();
    let mut perturbed = store.clone();
    for (i, param) in store.params().iter().enumerate() {
        let group = param.group().to_string();
        let mut worst: f64 = 0.0;
        for j in 0..param.value.len() {
            let orig = param.value.as_slice()[j];
            perturbed.params_mut()[i].value.as_mut_slice()[j] = orig + FD_STEP;
            let up = problem.value(&perturbed, None)?;
            perturbed.params_mut()[i].value.as_mut_slice()[j] = orig - FD_STEP;
            let down = problem.value(&perturbed, None)?;
            perturbed.params_mut()[i].value.as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads[i].as_slice()[j], numeric));
        }
        match groups.iter_mut().find(|g| g.group == group) {
            Some(gc) => {
                gc.max_rel_error = gc.max_rel_error.max(worst);
                gc.checked += param.value.len();
            }
            None => groups.push(GroupCheck { group, max_rel_error: worst, checked: param.value.len() }),
        }
    }

    // The loss against its conditioning inputs (window and episodic tokens).
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (loss, wv, ev) = problem.loss(&mut g, &p, Some((&w0, &e0)))?;
    g.backward(loss);
    let (gw, ge) = (g.grad_or_zeros(wv), g.grad_or_zeros(ev));
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (which, base, grad) in [(0, &w0, &gw), (1, &e0, &ge)] {
        for j in 0..base.len() {
            let mut plus = base.clone();
            plus.as_mut_slice()[j] += FD_STEP;
            let mut minus = base.clone();
            minus.as_mut_slice()[j] -= FD_STEP;
            let (up, down) = if which == 0 {
                (problem.value(&store, Some((&plus, &e0)))?, problem.value(&store, Some((&minus, &e0)))?)
            } else {
                (problem.value(&store, Some((&w0, &plus)))?, problem.value(&store, Some((&w0, &minus)))?)
            };
            worst = worst.max(relative_error(grad.as_slice()[j], (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    groups.push(GroupCheck { group: "loss".into(), max_rel_error: worst, checked });

    Ok(GradcheckReport { groups, threshold: GRADCHECK_THRESHOLD, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_passes_on_every_group() {
        let report = gradcheck(&RunConfig::desk(Task::ShellGame)).unwrap();
        for g in &report.groups {
            eprintln!("{:<12} {:>6} {:.3e}", g.group, g.checked, g.max_rel_error);
        }
        let names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(names, ["encoder", "compressor", "denoiser", "loss"]);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradcheck_catches_a_broken_matmul_rule() {
        crate::autodiff::CORRUPT_MATMUL.with(|c| c.set(1.001));
        let report = gradcheck(&RunConfig::desk(Task::Reach));
        crate::autodiff::CORRUPT_MATMUL.with(|c| c.set(1.0));
        assert!(!report.unwrap().passed());
    }

    fn tiny_run(task: Task, steps: usize) -> (RunConfig, DemoDataset) {
        let cfg = RunConfig {
            num_demos: 3,
            dim: 8,
            compressor_depth: 1,
            memory_tokens: 1,
            cache_size: 2,
            horizon: 4,
            mlp_ratio: 1,
            diffusion_steps: 5,
            batch_size: 4,
            grad_steps: steps,
            eval_episodes: 4,
            ..RunConfig::desk(task)
        };
        let ds = crate::data::generate_dataset(&cfg.env_spec().unwrap(), cfg.num_demos, cfg.seed, 0.03).unwrap();
        (cfg, ds)
    }

    #[test]
    fn zero_steps_leave_the_initial_weights() {
        let (cfg, ds) = tiny_run(Task::ShellGame, 0);
        let out = train_run(&cfg, &ds, None).unwrap();
        let (_, fresh) = Policy::new(&cfg, &ds.modality_dims(), ds.act_dim, out.policy.normalizer.clone()).unwrap();
        assert!(out.rows.is_empty());
        for ((a, b), c) in out.params.params().iter().zip(out.ema.params()).zip(fresh.params()) {
            assert_eq!(a.value, c.value);
            assert_eq!(b.value, c.value);
        }
    }

    #[test]
    fn training_and_evaluation_files_are_reproducible() {
        let (cfg, ds) = tiny_run(Task::RememberColor, 4);
        let read = |dir: &Path| {
            let out = train_run(&cfg, &ds, Some(dir)).unwrap();
            let report = evaluate(&out.policy, &out.ema, cfg.eval_episodes, cfg.seed).unwrap();
            write_json(&report, &dir.join(EVAL_FILE)).unwrap();
            [METRICS_FILE, CHECKPOINT_FILE, EVAL_FILE].map(|f| fs::read(dir.join(f)).unwrap())
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ra, rb) = (read(a.path()), read(b.path()));
        assert_eq!(ra, rb);
        let metrics = String::from_utf8(ra[0].clone()).unwrap();
        assert_eq!(metrics.lines().count(), 5);
        assert!(metrics.lines().skip(1).all(|l| l.split(',').count() == 3));
    }

    #[test]
    fn expert_controller_solves_every_task() {
        for task in [Task::ShellGame, Task::RememberColor, Task::LongHorizonSquare, Task::Reach] {
            let spec = EnvSpec::new(task);
            let report = run_episodes(&spec, 100, 7, &mut ExpertController::new(spec.clone(), 0.03)).unwrap();
            assert_eq!(report.episodes, 100);
            assert!(report.success_rate >= 0.95, "{task}: {}", report.success_rate);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected_before_rollouts() {
        let (cfg, ds) = tiny_run(Task::Reach, 0);
        let out = train_run(&cfg, &ds, None).unwrap();
        let mut policy = out.policy.clone();
        policy.config.task = Task::ShellGame;
        assert!(matches!(evaluate(&policy, &out.ema, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn live_tokens_are_constant_once_caches_fill() {
        let (cfg, ds) = tiny_run(Task::ShellGame, 0);
        let out = train_run(&cfg, &ds, None).unwrap();
        let rows = bench_constant_cost(&out.policy, &out.ema, &[50, 500], 3, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].tokens_live, rows[1].tokens_live);
        assert!(rows.iter().all(|r| r.ms_per_decision > 0.0));
    }
}
