//! Toy environments with scripted experts.
//!
//! Every task moves a point agent in the plane with velocity actions
//! (clipped to [`MAX_SPEED`]). Observations have two modalities: task
//! features first, then the agent position. Three tasks hide the
//! information needed to succeed after the first few frames; `Reach` keeps
//! its goal visible and serves as the Markovian control.
//!
//! | task | hidden target | cue visible | success |
//! |------|---------------|-------------|---------|
//! | `shell_game` | cup index | `t < cue_steps` | enter the right cup after the go signal |
//! | `remember_color` | cue colour | `t < cue_steps` | enter the slot showing that colour after go |
//! | `long_horizon_square` | goal corner | `t = 0` | end within tolerance of the goal |
//! | `reach` | — (goal always shown) | always | end within tolerance of the goal |

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::RawObservation;
use crate::error::{Error, Result};

/// Actions are clipped to this Euclidean norm.
pub const MAX_SPEED: f64 = 0.25;
/// Expert step length toward its current target.
pub const EXPERT_GAIN: f64 = 0.15;
/// Radius of the selectable regions (cups, colour slots).
pub const REGION_RADIUS: f64 = 0.25;
/// Final-distance tolerance for the reach-style tasks.
pub const GOAL_TOLERANCE: f64 = 0.2;
/// Corridor exit shared by both goals of the square task.
const CORRIDOR_EXIT: [f64; 2] = [0.0, 0.3];
const SQUARE_START: [f64; 2] = [0.0, -1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ShellGame,
    RememberColor,
    LongHorizonSquare,
    Reach,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::ShellGame, Task::RememberColor, Task::LongHorizonSquare, Task::Reach];

    pub fn name(self) -> &'static str {
        match self {
            Task::ShellGame => "shell_game",
            Task::RememberColor => "remember_color",
            Task::LongHorizonSquare => "long_horizon_square",
            Task::Reach => "reach",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task '{s}' (expected one of shell_game, remember_color, long_horizon_square, reach)")))
    }
}

/// Optional overrides of a task's desk-scale defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvOverrides {
    pub options: Option<usize>,
    pub cue_steps: Option<usize>,
    pub delay: Option<usize>,
    pub episode_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub task: Task,
    /// Number of selectable options `C`.
    pub options: usize,
    /// `T_show`: frames during which the cue is visible.
    pub cue_steps: usize,
    /// `Δ`: frames between the cue disappearing and the go signal.
    pub delay: usize,
    /// `T`.
    pub episode_len: usize,
}

impl EnvSpec {
    pub fn new(task: Task) -> Self {
        match task {
            Task::ShellGame | Task::RememberColor => {
                Self { task, options: 3, cue_steps: 3, delay: 20, episode_len: 40 }
            }
            Task::LongHorizonSquare => Self { task, options: 2, cue_steps: 1, delay: 8, episode_len: 32 },
            Task::Reach => Self { task, options: 2, cue_steps: 1, delay: 0, episode_len: 24 },
        }
    }

    pub fn with_overrides(task: Task, o: &EnvOverrides) -> Result<Self> {
        let mut spec = Self::new(task);
        if let Some(c) = o.options {
            spec.options = c;
        }
        if let Some(v) = o.cue_steps {
            spec.cue_steps = v;
        }
        if let Some(v) = o.delay {
            spec.delay = v;
        }
        if let Some(v) = o.episode_len {
            spec.episode_len = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.options < 2 {
            return Err(Error::Config(format!("need at least 2 options, got {}", self.options)));
        }
        if self.task == Task::LongHorizonSquare && self.options != 2 {
            return Err(Error::Config("long_horizon_square has exactly 2 goals".into()));
        }
        if self.cue_steps == 0 {
            return Err(Error::Config("cue must be visible for at least one frame".into()));
        }
        if self.cue_steps + self.delay >= self.episode_len {
            return Err(Error::Config(format!(
                "cue_steps + delay = {} must be below episode_len {}",
                self.cue_steps + self.delay,
                self.episode_len
            )));
        }
        Ok(())
    }

    /// First frame at which the go signal is on.
    pub fn go_step(&self) -> usize {
        self.cue_steps + self.delay
    }

    /// Width of the task-feature modality.
    pub fn feature_dim(&self) -> usize {
        let c = self.options;
        match self.task {
            // cue one-hot, go flag, clock
            Task::ShellGame => c + 2,
            // cue colour, go flag, clock, slot colours (C one-hots)
            Task::RememberColor => c + 2 + c * c,
            // cue one-hot, clock
            Task::LongHorizonSquare => c + 1,
            // goal xy, clock
            Task::Reach => 3,
        }
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        vec![self.feature_dim(), 2]
    }

    pub fn obs_dim(&self) -> usize {
        self.feature_dim() + 2
    }

    pub fn act_dim(&self) -> usize {
        2
    }

    /// Splits a flat observation back into `[features, position]`.
    pub fn split_observation(&self, flat: &[f64], t: usize) -> Result<RawObservation> {
        if flat.len() != self.obs_dim() {
            return Err(Error::Config(format!(
                "{} observation has {} values, expected {}",
                self.task,
                flat.len(),
                self.obs_dim()
            )));
        }
        let (features, pos) = flat.split_at(self.feature_dim());
        Ok(RawObservation { modalities: vec![features.to_vec(), pos.to_vec()], t })
    }

    pub fn success_description(&self) -> &'static str {
        match self.task {
            Task::ShellGame => "enter the hidden cup's region after the go signal; a wrong cup or timeout fails",
            Task::RememberColor => "enter the slot showing the cue colour after the go signal; a wrong slot or timeout fails",
            Task::LongHorizonSquare => "final position within tolerance of the goal shown at t = 0",
            Task::Reach => "final position within tolerance of the visible goal",
        }
    }

    /// Centre of option `i` for the region tasks: evenly spaced on the unit
    /// circle starting at 90°.
    pub fn region_center(&self, i: usize) -> [f64; 2] {
        let angle = FRAC_PI_2 + std::f64::consts::TAU * i as f64 / self.options as f64;
        [angle.cos(), angle.sin()]
    }

    /// Goal corner `i` of the square task.
    pub fn square_goal(i: usize) -> [f64; 2] {
        [if i == 0 { -0.8 } else { 0.8 }, 0.8]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub t: usize,
    pub pos: [f64; 2],
    /// Index of the correct option (cup, colour, corner); unused by `Reach`.
    pub target: usize,
    /// Colour shown at each slot (`RememberColor`).
    pub slot_colors: Vec<usize>,
    /// Visible goal (`Reach`).
    pub goal: [f64; 2],
    /// The expert has reached the corridor exit (`LongHorizonSquare`).
    pub waypoint_done: bool,
    pub done: bool,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: RawObservation,
    pub done: bool,
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Clips `a` to norm [`MAX_SPEED`]; non-finite actions become zero.
pub fn clip_action(a: &[f64]) -> [f64; 2] {
    if !a.iter().all(|v| v.is_finite()) {
        return [0.0, 0.0];
    }
    let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let s = if n > MAX_SPEED { MAX_SPEED / n } else { 1.0 };
    [a[0] * s, a[1] * s]
}

pub fn observe(spec: &EnvSpec, s: &EnvState) -> RawObservation {
    let c = spec.options;
    let cue_on = s.t < spec.cue_steps;
    let go = if s.t >= spec.go_step() { 1.0 } else { 0.0 };
    let clock = s.t as f64 / spec.episode_len as f64;
    let mut f = Vec::with_capacity(spec.feature_dim());
    match spec.task {
        Task::ShellGame | Task::RememberColor => {
            f.extend(if cue_on { one_hot(c, s.target) } else { vec![0.0; c] });
            f.push(go);
            f.push(clock);
            if spec.task == Task::RememberColor {
                for &colour in &s.slot_colors {
                    f.extend(if go > 0.0 { one_hot(c, colour) } else { vec![0.0; c] });
                }
            }
        }
        Task::LongHorizonSquare => {
            f.extend(if cue_on { one_hot(c, s.target) } else { vec![0.0; c] });
            f.push(clock);
        }
        Task::Reach => {
            f.extend(s.goal);
            f.push(clock);
        }
    }
    RawObservation { modalities: vec![f, s.pos.to_vec()], t: s.t }
}

/// Starts an episode; the hidden target is drawn from `seed`.
pub fn env_reset(spec: &EnvSpec, seed: u64) -> (EnvState, RawObservation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(0..spec.options);
    let mut slot_colors: Vec<usize> = (0..spec.options).collect();
    if spec.task == Task::RememberColor {
        slot_colors.shuffle(&mut rng);
    }
    let goal = if spec.task == Task::Reach { [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)] } else { [0.0, 0.0] };
    let pos = if spec.task == Task::LongHorizonSquare { SQUARE_START } else { [0.0, 0.0] };
    let s = EnvState { t: 0, pos, target, slot_colors, goal, waypoint_done: false, done: false, success: false };
    let obs = observe(spec, &s);
    (s, obs)
}

/// The option whose region the agent should enter.
fn correct_region(spec: &EnvSpec, s: &EnvState) -> usize {
    match spec.task {
        Task::RememberColor => s.slot_colors.iter().position(|&c| c == s.target).expect("permutation"),
        _ => s.target,
    }
}

/// Advances one step. Once `done` is set the episode outcome is frozen but
/// stepping stays legal (long benchmark episodes keep going).
pub fn env_step(spec: &EnvSpec, s: &mut EnvState, action: &[f64]) -> Result<StepOutcome> {
    if action.len() != spec.act_dim() {
        return Err(Error::Config(format!("action has {} values, expected {}", action.len(), spec.act_dim())));
    }
    let a = clip_action(action);
    s.pos = [s.pos[0] + a[0], s.pos[1] + a[1]];
    s.t += 1;
    if spec.task == Task::LongHorizonSquare && dist(s.pos, CORRIDOR_EXIT) < 0.1 {
        s.waypoint_done = true;
    }
    if !s.done {
        match spec.task {
            Task::ShellGame | Task::RememberColor => {
                // Regions only count from the go signal on.
                if s.t >= spec.go_step() {
                    let want = correct_region(spec, s);
                    if let Some(hit) = (0..spec.options).find(|&i| dist(s.pos, spec.region_center(i)) < REGION_RADIUS) {
                        s.done = true;
                        s.success = hit == want;
                    }
                }
                if s.t >= spec.episode_len {
                    s.done = true;
                }
            }
            Task::LongHorizonSquare | Task::Reach => {
                if s.t >= spec.episode_len {
                    let goal = if spec.task == Task::Reach { s.goal } else { EnvSpec::square_goal(s.target) };
                    s.done = true;
                    s.success = dist(s.pos, goal) < GOAL_TOLERANCE;
                }
            }
        }
    }
    Ok(StepOutcome { observation: observe(spec, s), done: s.done, success: s.success })
}

/// Proportional step toward `target`: the full offset when closer than
/// `gain`, otherwise the unit direction scaled by `gain`.
pub fn toward(pos: [f64; 2], target: [f64; 2], gain: f64) -> [f64; 2] {
    let d = [target[0] - pos[0], target[1] - pos[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n <= gain {
        d
    } else {
        [d[0] * gain / n, d[1] * gain / n]
    }
}

/// The point the expert is steering to right now.
pub fn expert_target(spec: &EnvSpec, s: &EnvState) -> [f64; 2] {
    match spec.task {
        Task::ShellGame | Task::RememberColor => {
            // Hold at home until the step whose outcome shows the go signal.
            if s.t + 1 >= spec.go_step() {
                spec.region_center(correct_region(spec, s))
            } else {
                [0.0, 0.0]
            }
        }
        Task::LongHorizonSquare => {
            if s.waypoint_done || dist(s.pos, CORRIDOR_EXIT) < 0.1 {
                EnvSpec::square_goal(s.target)
            } else {
                CORRIDOR_EXIT
            }
        }
        Task::Reach => s.goal,
    }
}

/// Scripted expert: proportional controller toward the hidden target plus
/// zero-mean Gaussian noise of standard deviation `noise`.
pub fn scripted_expert(spec: &EnvSpec, s: &EnvState, rng: &mut impl Rng, noise: f64) -> Vec<f64> {
    let a = toward(s.pos, expert_target(spec, s), EXPERT_GAIN);
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).expect("finite noise level");
        vec![a[0] + n.sample(rng), a[1] + n.sample(rng)]
    } else {
        a.to_vec()
    }
}
