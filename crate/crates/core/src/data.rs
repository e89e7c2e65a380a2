//! Demonstration datasets, history subsampling and length-bucketed batches.
//!
//! Dataset files are line-oriented JSON: a header object on line 1, then
//! one trajectory object per line.
//!
//! ```text
//! {"format_version":1,"task":"shell_game","obs_dim":7,"act_dim":2,"num_trajectories":2,"seed":0,"noise_level":0.03}
//! {"success":true,"observations":[[...],...],"actions":[[...],...]}
//! {"success":true,"observations":[[...],...],"actions":[[...],...]}
//! ```
//!
//! Observations are stored flat; the last two values are always the agent
//! position, so the modality split is recoverable from `obs_dim` alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::RawObservation;
use crate::envs::{env_reset, env_step, scripted_expert, EnvSpec, Task};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

/// Width of the trailing position modality in every observation.
pub const PROPRIO_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub success: bool,
    /// `observations[t]` is seen before `actions[t]` is taken.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation(&self, t: usize) -> RawObservation {
        let flat = &self.observations[t];
        let (f, p) = flat.split_at(flat.len() - PROPRIO_DIM);
        RawObservation { modalities: vec![f.to_vec(), p.to_vec()], t }
    }

    /// `a_{t:t+H}` as an `H × act_dim` matrix; steps past the end repeat the
    /// final action.
    pub fn chunk(&self, t: usize, horizon: usize) -> Matrix {
        let last = self.actions.len() - 1;
        let rows: Vec<&[f64]> = (t..t + horizon).map(|i| self.actions[i.min(last)].as_slice()).collect();
        Matrix::from_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub task: Task,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub num_trajectories: usize,
    pub seed: u64,
    pub noise_level: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub task: Task,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub seed: u64,
    pub noise_level: f64,
    pub trajectories: Vec<Trajectory>,
}

impl DemoDataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format_version: FORMAT_VERSION,
            task: self.task,
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            num_trajectories: self.trajectories.len(),
            seed: self.seed,
            noise_level: self.noise_level,
        }
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        vec![self.obs_dim - PROPRIO_DIM, PROPRIO_DIM]
    }

    pub fn num_samples(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Checks that the dataset was generated for an environment shaped like
    /// `spec`.
    pub fn check_spec(&self, spec: &EnvSpec) -> Result<()> {
        if self.task != spec.task || self.obs_dim != spec.obs_dim() || self.act_dim != spec.act_dim() {
            return Err(Error::Config(format!(
                "dataset is {} with obs_dim {} / act_dim {}, run expects {} with {} / {}",
                self.task,
                self.obs_dim,
                self.act_dim,
                spec.task,
                spec.obs_dim(),
                spec.act_dim()
            )));
        }
        Ok(())
    }
}

/// Per-attempt episode seeds derived from the dataset seed.
pub fn episode_seeds(seed: u64) -> impl Iterator<Item = u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || rng.gen())
}

/// Rolls out the scripted expert for one episode.
pub fn expert_rollout(spec: &EnvSpec, episode_seed: u64, noise_level: f64) -> Result<Trajectory> {
    let (mut state, mut obs) = env_reset(spec, episode_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    rng.set_stream(1);
    let mut traj = Trajectory { success: false, observations: Vec::new(), actions: Vec::new() };
    while !state.done {
        let a = scripted_expert(spec, &state, &mut rng, noise_level);
        traj.observations.push(obs.flat());
        traj.actions.push(a.clone());
        obs = env_step(spec, &mut state, &a)?.observation;
    }
    traj.success = state.success;
    Ok(traj)
}

/// `n` successful expert rollouts. Failures are discarded and re-drawn; if
/// `n` successes need more than `4n` attempts, or fewer than half of the
/// attempts succeed, the environment is considered misconfigured.
pub fn generate_dataset(spec: &EnvSpec, n: usize, seed: u64, noise_level: f64) -> Result<DemoDataset> {
    if n == 0 {
        return Err(Error::Config("a dataset needs at least one trajectory".into()));
    }
    spec.validate()?;
    let mut trajectories = Vec::with_capacity(n);
    let mut attempts = 0;
    for ep_seed in episode_seeds(seed).take(4 * n) {
        attempts += 1;
        let traj = expert_rollout(spec, ep_seed, noise_level)?;
        if traj.success {
            trajectories.push(traj);
            if trajectories.len() == n {
                break;
            }
        }
    }
    if trajectories.len() < n || 2 * trajectories.len() < attempts {
        return Err(Error::ExpertFailure { successes: trajectories.len(), attempts });
    }
    Ok(DemoDataset { task: spec.task, obs_dim: spec.obs_dim(), act_dim: spec.act_dim(), seed, noise_level, trajectories })
}

pub fn save_dataset(ds: &DemoDataset, path: &Path) -> Result<()> {
    let mut out = serde_json::to_string(&ds.header())?;
    out.push('\n');
    for tr in &ds.trajectories {
        out.push_str(&serde_json::to_string(tr)?);
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<DemoDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let invalid = |msg: String| Error::Validation { path: path.to_path_buf(), msg };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty file: missing header".into()))?;
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| parse_err(1, format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(invalid(format!("unsupported format_version {}", header.format_version)));
    }
    if header.obs_dim <= PROPRIO_DIM {
        return Err(invalid(format!("obs_dim {} leaves no task features", header.obs_dim)));
    }

    let mut trajectories = Vec::with_capacity(header.num_trajectories);
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let tr: Trajectory = serde_json::from_str(line).map_err(|e| parse_err(no, format!("trajectory: {e}")))?;
        if tr.observations.len() != tr.actions.len() || tr.is_empty() {
            return Err(parse_err(
                no,
                format!("{} observations vs {} actions", tr.observations.len(), tr.actions.len()),
            ));
        }
        if let Some(o) = tr.observations.iter().find(|o| o.len() != header.obs_dim) {
            return Err(parse_err(no, format!("observation of width {} in a dataset with obs_dim {}", o.len(), header.obs_dim)));
        }
        if let Some(a) = tr.actions.iter().find(|a| a.len() != header.act_dim) {
            return Err(parse_err(no, format!("action of width {} in a dataset with act_dim {}", a.len(), header.act_dim)));
        }
        trajectories.push(tr);
    }
    if trajectories.len() != header.num_trajectories {
        return Err(invalid(format!(
            "header announces {} trajectories, body has {}",
            header.num_trajectories,
            trajectories.len()
        )));
    }
    Ok(DemoDataset {
        task: header.task,
        obs_dim: header.obs_dim,
        act_dim: header.act_dim,
        seed: header.seed,
        noise_level: header.noise_level,
        trajectories,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsampleMode {
    /// One uniformly drawn frame per segment.
    Train,
    /// The first frame of every segment; matches streaming compression of
    /// frames with `τ mod r = 0`.
    Infer,
}

/// Whether the streaming policy compresses frame `τ` when it leaves the
/// window.
pub fn compressed_when_evicted(t: usize, ratio: usize) -> bool {
    t % ratio == 0
}

/// Selects history frames from the out-of-window range `[0, len)`, split
/// into `⌈len / r⌉` segments of length `r` (the last may be shorter).
pub fn subsample_history(len: usize, ratio: usize, rng: &mut impl Rng, mode: SubsampleMode) -> Vec<usize> {
    assert!(ratio >= 1, "subsample ratio must be at least 1");
    (0..len)
        .step_by(ratio)
        .map(|lo| match mode {
            SubsampleMode::Infer => lo,
            SubsampleMode::Train => rng.gen_range(lo..(lo + ratio).min(len)),
        })
        .collect()
}

/// Out-of-window frames at decision step `t` with window length `L`.
pub fn out_of_window_len(t: usize, window: usize) -> usize {
    (t + 1).saturating_sub(window)
}

/// Number of compressed frames at step `t`: `⌈max(0, t−L+1) / r⌉`.
pub fn history_len(t: usize, window: usize, ratio: usize) -> usize {
    out_of_window_len(t, window).div_ceil(ratio)
}

/// Frame indices of the working window at step `t`, front-padded with
/// frame 0 at the start of an episode.
pub fn window_indices(t: usize, window: usize) -> Vec<usize> {
    (0..window).map(|i| (t + i + 1).saturating_sub(window)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub trajectory: usize,
    pub t: usize,
    /// Frame indices of the observation prefix `o_{≤t}`, front-padded with
    /// frame 0 up to the bucket's longest prefix.
    pub prefix: Vec<usize>,
}

impl TrainingSample {
    pub fn padding(&self) -> usize {
        self.prefix.len() - (self.t + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Shared number of compressed history frames.
    pub history_len: usize,
    pub samples: Vec<TrainingSample>,
}

/// One epoch of batches. Samples are bucketed by compressed-history length,
/// shuffled within buckets, cut into batches of at most `batch_size`, and
/// the batch order is shuffled.
pub fn make_batches(ds: &DemoDataset, batch_size: usize, ratio: usize, window: usize, rng: &mut impl Rng) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut buckets: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, tr) in ds.trajectories.iter().enumerate() {
        for t in 0..tr.len() {
            buckets.entry(history_len(t, window, ratio)).or_default().push((i, t));
        }
    }
    let mut batches = Vec::new();
    for (history_len, mut items) in buckets {
        let longest = items.iter().map(|&(_, t)| t + 1).max().unwrap_or(0);
        items.shuffle(rng);
        for chunk in items.chunks(batch_size) {
            let samples = chunk
                .iter()
                .map(|&(trajectory, t)| {
                    let mut prefix = vec![0; longest - (t + 1)];
                    prefix.extend(0..=t);
                    TrainingSample { trajectory, t, prefix }
                })
                .collect();
            batches.push(Batch { history_len, samples });
        }
    }
    batches.shuffle(rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_dataset() -> DemoDataset {
        generate_dataset(&EnvSpec::new(Task::ShellGame), 4, 7, 0.03).unwrap()
    }

    #[test]
    fn generated_dataset_is_exact_and_successful() {
        let spec = EnvSpec::new(Task::ShellGame);
        let ds = generate_dataset(&spec, 10, 1, 0.03).unwrap();
        assert_eq!(ds.trajectories.len(), 10);
        assert!(ds.trajectories.iter().all(|t| t.success));
        assert!(ds.trajectories.iter().all(|t| t.len() <= spec.episode_len && t.len() >= 8));
    }

    #[test]
    fn open_loop_replay_reproduces_success() {
        let spec = EnvSpec::new(Task::RememberColor);
        for ep_seed in episode_seeds(3).take(10) {
            let tr = expert_rollout(&spec, ep_seed, 0.03).unwrap();
            let (mut s, _) = env_reset(&spec, ep_seed);
            for (t, a) in tr.actions.iter().enumerate() {
                assert_eq!(crate::envs::observe(&spec, &s).flat(), tr.observations[t]);
                env_step(&spec, &mut s, a).unwrap();
            }
            assert_eq!(s.success, tr.success);
        }
    }

    #[test]
    fn misconfigured_expert_aborts() {
        // Zero delay with a long cue: the expert still wins, so instead
        // starve it of time.
        let spec = EnvSpec { task: Task::ShellGame, options: 3, cue_steps: 1, delay: 2, episode_len: 5 };
        match generate_dataset(&spec, 5, 0, 0.03) {
            Err(Error::ExpertFailure { successes, attempts }) => {
                assert_eq!(attempts, 20);
                assert_eq!(successes, 0);
            }
            other => panic!("expected expert failure, got {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_dataset(&ds, &a).unwrap();
        save_dataset(&tiny_dataset(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(load_dataset(&a).unwrap(), ds);
    }

    #[test]
    fn malformed_files_are_reported_by_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&tiny_dataset(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        let truncated = &text[..text.len() - 40];
        fs::write(&path, truncated).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }

        let dropped: Vec<&str> = text.lines().take(3).collect();
        fs::write(&path, dropped.join("\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Validation { .. })));

        fs::write(&path, "").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 1, .. })));

        assert!(matches!(load_dataset(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
    }

    #[test]
    fn chunk_pads_with_final_action() {
        let tr = Trajectory {
            success: true,
            observations: vec![vec![0.0; 3]; 3],
            actions: vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]],
        };
        let c = tr.chunk(1, 4);
        assert_eq!(c.as_slice(), &[2.0, 2.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn subsample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(subsample_history(10, 5, &mut rng, SubsampleMode::Infer), vec![0, 5]);
        for _ in 0..100 {
            let s = subsample_history(10, 5, &mut rng, SubsampleMode::Train);
            assert_eq!(s.len(), 2);
            assert!(s[0] <= 4 && (5..=9).contains(&s[1]));
        }
        assert_eq!(subsample_history(3, 5, &mut rng, SubsampleMode::Train).len(), 1);
        assert_eq!(subsample_history(0, 5, &mut rng, SubsampleMode::Infer), Vec::<usize>::new());
    }

    #[test]
    fn infer_selection_matches_streaming_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 0..60 {
            let len = out_of_window_len(t, 2);
            let sel = subsample_history(len, 5, &mut rng, SubsampleMode::Infer);
            let streamed: Vec<usize> = (0..len).filter(|&tau| compressed_when_evicted(tau, 5)).collect();
            assert_eq!(sel, streamed);
            assert_eq!(sel.len(), history_len(t, 2, 5));
        }
    }

    #[test]
    fn window_indices_pad_with_first_frame() {
        assert_eq!(window_indices(0, 3), vec![0, 0, 0]);
        assert_eq!(window_indices(1, 3), vec![0, 0, 1]);
        assert_eq!(window_indices(7, 3), vec![5, 6, 7]);
    }

    #[test]
    fn early_samples_share_the_empty_bucket() {
        let ds = DemoDataset {
            task: Task::ShellGame,
            obs_dim: 7,
            act_dim: 2,
            seed: 0,
            noise_level: 0.0,
            trajectories: vec![Trajectory { success: true, observations: vec![vec![0.0; 7]; 2], actions: vec![vec![0.0; 2]; 2] }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&ds, 8, 5, 2, &mut rng);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].history_len, 0);
        let padded = batches[0].samples.iter().find(|s| s.t == 0).unwrap();
        assert_eq!(padded.prefix, vec![0, 0]);
        assert_eq!(padded.padding(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn batches_cover_every_sample_once(seed in any::<u64>(), batch in 1usize..20, ratio in 1usize..7, window in 1usize..4) {
            let ds = tiny_dataset();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batches = make_batches(&ds, batch, ratio, window, &mut rng);
            let mut seen: Vec<(usize, usize)> = Vec::new();
            for b in &batches {
                prop_assert!(!b.samples.is_empty() && b.samples.len() <= batch);
                let longest = b.samples.iter().map(|s| s.prefix.len()).max().unwrap();
                for s in &b.samples {
                    prop_assert_eq!(history_len(s.t, window, ratio), b.history_len);
                    prop_assert_eq!(s.prefix.len(), longest);
                    prop_assert!(s.prefix[..s.padding()].iter().all(|&i| i == 0));
                    prop_assert_eq!(&s.prefix[s.padding()..], &(0..=s.t).collect::<Vec<_>>()[..]);
                    seen.push((s.trajectory, s.t));
                }
            }
            seen.sort_unstable();
            let mut all: Vec<(usize, usize)> = ds.trajectories.iter().enumerate()
                .flat_map(|(i, tr)| (0..tr.len()).map(move |t| (i, t))).collect();
            all.sort_unstable();
            prop_assert_eq!(seen, all);
        }

        #[test]
        fn subsampling_segments(len in 0usize..200, ratio in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = subsample_history(len, ratio, &mut rng, SubsampleMode::Train);
            let infer = subsample_history(len, ratio, &mut rng, SubsampleMode::Infer);
            prop_assert_eq!(train.len(), len.div_ceil(ratio));
            prop_assert_eq!(infer.len(), train.len());
            for (j, (&a, &b)) in train.iter().zip(&infer).enumerate() {
                // Same segment; the inference pick is a possible training draw.
                prop_assert_eq!(a / ratio, j);
                prop_assert_eq!(b, j * ratio);
            }
            prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
