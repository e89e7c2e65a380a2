//! The full policy (encoder + compressor + denoiser), its training loss,
//! the streaming [`Agent`] used at inference, and checkpoints.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::compressor::{dropout_mask, null_memory, Compressor, EpisodicMemory};
use crate::config::RunConfig;
use crate::data::{compressed_when_evicted, window_indices, Trajectory};
use crate::diffusion::{ActionNormalizer, Denoiser, NoiseSchedule};
use crate::encoder::{stamp_var, Encoder, RawObservation};
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::nn::{Bound, ParamStore};
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Seed of the cache rngs (only the `random` policy draws from them).
/// Training and inference use the same value so both paths evict alike.
fn cache_seed(cfg: &RunConfig) -> u64 {
    cfg.seed ^ 0x5EED_CAC4E
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: RunConfig,
    pub modality_dims: Vec<usize>,
    pub action_dim: usize,
    pub encoder: Encoder,
    pub compressor: Compressor,
    pub denoiser: Denoiser,
    pub normalizer: ActionNormalizer,
    pub schedule: NoiseSchedule,
}

impl Policy {
    /// Builds the architecture and a freshly initialised parameter store.
    pub fn new(
        config: &RunConfig,
        modality_dims: &[usize],
        action_dim: usize,
        normalizer: ActionNormalizer,
    ) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if normalizer.min.len() != action_dim {
            return Err(Error::Config(format!(
                "normalizer covers {} action dims, policy has {action_dim}",
                normalizer.min.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, modality_dims, config.dim, config.activation, &mut rng);
        let compressor = Compressor::new(&mut store, config.compressor_config(), &mut rng);
        let denoiser = Denoiser::new(&mut store, config.denoiser_config(action_dim), &mut rng);
        let policy = Self {
            config: config.clone(),
            modality_dims: modality_dims.to_vec(),
            action_dim,
            encoder,
            compressor,
            denoiser,
            normalizer,
            schedule: config.schedule()?,
        };
        Ok((policy, store))
    }

    pub fn new_memory(&self) -> MemoryState {
        let c = &self.config;
        MemoryState::new(c.window, c.cache_size, c.compressor_depth, c.cache_policy, cache_seed(c))
    }

    pub fn null_memory(&self) -> EpisodicMemory {
        null_memory(self.config.memory_tokens, self.config.dim)
    }

    /// Observation rows of `frames` as graph leaves, one `frames × dim`
    /// node per modality. `trainable` leaves collect gradients, which is
    /// how the stop-gradient contract is observed.
    pub fn observation_inputs(&self, g: &mut Graph, traj: &Trajectory, frames: &[usize], trainable: bool) -> Vec<Var> {
        let raws: Vec<RawObservation> = frames.iter().map(|&i| traj.observation(i)).collect();
        (0..self.modality_dims.len())
            .map(|m| {
                let rows: Vec<&[f64]> = raws.iter().map(|r| r.modalities[m].as_slice()).collect();
                g.leaf(Matrix::from_rows(&rows), trainable)
            })
            .collect()
    }

    /// Episodic memory after compressing the encoded `history` frames
    /// (timesteps strictly increasing) from a fresh state. Only the last
    /// step records backward information; frames reach the result solely
    /// through the stop-gradient caches.
    pub fn history_memory(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &[Var],
        history: &[usize],
        mem: &mut MemoryState,
    ) -> Result<Option<Var>> {
        if history.is_empty() {
            return Ok(None);
        }
        let encoded = self.encoder.encode_inputs(g, p, inputs)?;
        let frames: Vec<(usize, Var)> = history
            .iter()
            .enumerate()
            .map(|(row, &t)| {
                let tok = g.slice_rows(encoded, row, 1);
                (t, stamp_var(g, tok, t))
            })
            .collect();
        self.compressor.run_history_graph(g, p, &frames, mem)
    }

    /// Normalised target chunk `a_{t:t+H}`.
    pub fn target_chunk(&self, traj: &Trajectory, t: usize) -> Matrix {
        let chunk = traj.chunk(t, self.config.horizon);
        let rows: Vec<Vec<f64>> = (0..chunk.rows()).map(|r| self.normalizer.normalize(chunk.row(r))).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Matrix::from_rows(&refs)
    }

    /// Diffusion loss of one training sample: prefix `o_{≤t}` of `traj`
    /// with compressed frames `history`, target chunk `a_{t:t+H}`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        traj: &Trajectory,
        t: usize,
        history: &[usize],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let hist = self.observation_inputs(g, traj, history, false);
        let win = self.observation_inputs(g, traj, &window_indices(t, self.config.window), false);
        self.loss_from_inputs(g, p, &hist, history, &win, &self.target_chunk(traj, t), train, rng)
    }

    /// [`Policy::sample_loss`] on observation inputs already on the graph.
    /// Randomness is drawn in a fixed order (dropout mask, then `k` and
    /// `ε`) whatever the ablation flags, so ablated runs differ only in `e`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_from_inputs(
        &self,
        g: &mut Graph,
        p: &Bound,
        history_inputs: &[Var],
        history: &[usize],
        window_inputs: &[Var],
        a0: &Matrix,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let c = &self.config;
        let mask = if train { dropout_mask(c.memory_tokens, c.dim, c.dropout, rng) } else { None };
        let episodic = if c.memory_disabled() {
            None
        } else {
            self.history_memory(g, p, history_inputs, history, &mut self.new_memory())?
        };
        let episodic = match (episodic, mask) {
            (None, _) => g.constant(self.null_memory().tokens),
            (Some(e), None) => e,
            (Some(e), Some(mask)) => {
                let m = g.constant(mask);
                g.mul(e, m)
            }
        };
        let window = self.encoder.encode_inputs(g, p, window_inputs)?;
        self.denoiser.training_loss(g, p, &self.schedule, a0, window, episodic, rng)
    }

    pub fn agent<'a>(&'a self, params: &'a ParamStore, seed: u64) -> Agent<'a> {
        Agent {
            policy: self,
            params,
            memory: self.new_memory(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            plan: VecDeque::new(),
        }
    }

    pub fn save_checkpoint(&self, params: &ParamStore, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            modality_dims: self.modality_dims.clone(),
            action_dim: self.action_dim,
            normalizer: self.normalizer.clone(),
            shapes: params.params().iter().map(|p| (p.name.clone(), p.value.rows(), p.value.cols())).collect(),
        };
        let mut out = serde_json::to_string(&header)? + "\n";
        for group in params.groups() {
            let values: Vec<f64> = params
                .params()
                .iter()
                .filter(|p| p.group() == group)
                .flat_map(|p| p.value.as_slice().iter().copied())
                .collect();
            out += &serde_json::to_string(&GroupLine { group, values })?;
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, ParamStore)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let invalid = |msg: String| Error::Validation { path: path.to_path_buf(), msg };
        let mut lines = text.lines();
        let header: CheckpointHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| parse(1, format!("checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {}", header.format_version)));
        }
        if header.config.hash() != header.config_hash {
            return Err(invalid("config hash does not match the embedded config".into()));
        }
        let (policy, mut store) =
            Self::new(&header.config, &header.modality_dims, header.action_dim, header.normalizer.clone())?;
        let shapes: Vec<(String, usize, usize)> =
            store.params().iter().map(|p| (p.name.clone(), p.value.rows(), p.value.cols())).collect();
        if shapes != header.shapes {
            return Err(invalid("parameter shapes differ from the architecture the config builds".into()));
        }
        let mut seen = Vec::new();
        for (i, line) in lines.enumerate() {
            let g: GroupLine = serde_json::from_str(line).map_err(|e| parse(i + 2, format!("parameter group: {e}")))?;
            let mut values = g.values.into_iter();
            let mut matched = false;
            for p in store.params_mut().iter_mut().filter(|p| p.group() == g.group) {
                matched = true;
                for w in p.value.as_mut_slice() {
                    *w = values.next().ok_or_else(|| parse(i + 2, format!("group {} is too short", g.group)))?;
                }
            }
            if !matched || values.next().is_some() || seen.contains(&g.group) {
                return Err(parse(i + 2, format!("group {} does not fit the architecture", g.group)));
            }
            seen.push(g.group);
        }
        if let Some(missing) = store.groups().into_iter().find(|g| !seen.contains(g)) {
            return Err(invalid(format!("parameter group {missing} is missing")));
        }
        Ok((policy, store))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config_hash: String,
    config: RunConfig,
    modality_dims: Vec<usize>,
    action_dim: usize,
    normalizer: ActionNormalizer,
    shapes: Vec<(String, usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupLine {
    group: String,
    values: Vec<f64>,
}

/// Streaming inference: one [`Agent::act`] call per environment step.
///
/// Each call encodes the new frame and pushes it into the working window.
/// A frame evicted from the window is stamped with its position and
/// compressed if it passes the subsample rule (`τ mod r = 0`). When the
/// current plan is used up, a fresh chunk is sampled from the padded
/// window and the current episodic memory, and its first `replan_interval`
/// actions become the plan.
#[derive(Clone, Debug)]
pub struct Agent<'a> {
    policy: &'a Policy,
    params: &'a ParamStore,
    memory: MemoryState,
    rng: ChaCha8Rng,
    plan: VecDeque<Vec<f64>>,
}

impl Agent<'_> {
    pub fn reset(&mut self) {
        self.memory.reset_episode();
        self.plan.clear();
    }

    /// Starts a new episode with a fresh sampling stream.
    pub fn begin_episode(&mut self, seed: u64) {
        self.reset();
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Drops the remaining plan so the next [`Agent::act`] resamples.
    pub fn clear_plan(&mut self) {
        self.plan.clear();
    }

    pub fn memory(&self) -> &MemoryState {
        &self.memory
    }

    /// Episodic memory the denoiser is conditioned on right now.
    pub fn episodic(&self) -> EpisodicMemory {
        match &self.memory.episodic {
            Some(e) if !self.policy.config.memory_disabled() => e.clone(),
            _ => self.policy.null_memory(),
        }
    }

    /// Updates working and episodic memory with a new frame.
    pub fn observe(&mut self, obs: &RawObservation) -> Result<()> {
        let p = self.policy;
        let token = p.encoder.encode_frame(obs, self.params)?;
        if let Some(evicted) = self.memory.window.push(token)? {
            if !p.config.window_only && compressed_when_evicted(evicted.t, p.config.subsample_ratio) {
                let stamped = crate::encoder::stamp_out_of_window(&evicted);
                p.compressor.compress(self.params, &stamped, evicted.t, &mut self.memory)?;
            }
        }
        Ok(())
    }

    /// Samples a chunk (environment units) from the current memory.
    pub fn plan_chunk(&mut self) -> Result<Vec<Vec<f64>>> {
        let p = self.policy;
        let window = self.memory.window.padded_rows();
        let e = self.episodic();
        let chunk = p.denoiser.sample_chunk(self.params, &window, &e.tokens, &p.schedule, &mut self.rng)?;
        Ok((0..chunk.rows()).map(|r| p.normalizer.denormalize(chunk.row(r))).collect())
    }

    /// Full decision step: observe, replan if the plan is exhausted, pop
    /// the next action.
    pub fn act(&mut self, obs: &RawObservation) -> Result<Vec<f64>> {
        self.observe(obs)?;
        if self.plan.is_empty() {
            let chunk = self.plan_chunk()?;
            self.plan.extend(chunk.into_iter().take(self.policy.config.replan()));
        }
        Ok(self.plan.pop_front().expect("plan holds at least one action"))
    }
}
