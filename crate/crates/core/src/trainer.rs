//! Surrogate fine-tuning: learnable per-frame twist corrections on top of a
//! frozen, drifting odometry trajectory. Each step trains on one window of a
//! synthetic scene with the weighted pose, flow and loop losses while the
//! DDPG agent picks the loop weight.

use std::fmt::Write as _;
use std::ops::Range;

use log::{debug, error, info, warn};
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, CurriculumState, DdpgAgent, DdpgConfig, ReplayBuffer, Transition};
use crate::liegroup::{Pose, Twist};
use crate::loopdb::{mix_seed, LoopDatabase, SyntheticScene};
use crate::losses::{
    flow_loss_with_grad, loop_loss, loop_loss_with_grad, pose_loss_with_grad, se3_left_jacobian_inv, total_loss,
    HuberParam, LoopConstraint, LossBreakdown, LossError, LossWeights,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("scene '{0}' has no loop pairs in the database")]
    NoPairsInScene(String),
    #[error("non-finite loss at step {step} (pose {pose}, flow {flow}, loop {loop_closure}, w_loop {w_loop}, window start {window_start})")]
    NonFiniteLoss { step: usize, pose: f64, flow: f64, loop_closure: f64, w_loop: f64, window_start: usize },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("window {start}..{end} outside scene of {frames} frames")]
    WindowOutOfRange { start: usize, end: usize, frames: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Frozen base trajectory plus one learnable correction per frame:
/// `predicted(i) = base(i) * exp(corrections(i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseModel {
    base: Vec<Pose>,
    corrections: Vec<Twist>,
}

impl PoseModel {
    pub fn new(base: Vec<Pose>) -> Self {
        let corrections = vec![Twist::zero(); base.len()];
        PoseModel { base, corrections }
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn base(&self) -> &[Pose] {
        &self.base
    }

    pub fn corrections(&self) -> &[Twist] {
        &self.corrections
    }

    pub fn corrections_mut(&mut self) -> &mut [Twist] {
        &mut self.corrections
    }

    pub fn predicted(&self, i: usize) -> Pose {
        let c = &self.corrections[i];
        if *c == Twist::zero() {
            return self.base[i];
        }
        self.base[i].compose(&Pose::exp(c))
    }

    pub fn predictions(&self, range: Range<usize>) -> Vec<Pose> {
        range.map(|i| self.predicted(i)).collect()
    }

    pub fn trajectory(&self) -> Vec<Pose> {
        self.predictions(0..self.len())
    }
}

/// Right Jacobian of the exponential: `exp(c + d) ~ exp(c) exp(J_r(c) d)`.
fn right_jacobian(c: &Twist) -> nalgebra::Matrix6<f64> {
    let neg = Twist::new(-c.rho, -c.omega);
    se3_left_jacobian_inv(&neg).try_inverse().expect("left Jacobian is invertible below pi")
}

/// Maps per-prediction gradients (right perturbations of `base * exp(c)`)
/// to gradients with respect to the corrections `c`.
pub fn correction_gradients(corrections: &[Twist], pose_grads: &[Vector6<f64>]) -> Vec<Vector6<f64>> {
    corrections.iter().zip(pose_grads).map(|(c, g)| right_jacobian(c).transpose() * g).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryNoise {
    /// Per-frame translation noise, meters.
    pub translation_sigma: f64,
    /// Per-frame rotation noise, radians.
    pub rotation_sigma: f64,
    /// Constant heading error added to every frame-to-frame rotation, radians.
    pub yaw_bias: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        OdometryNoise { translation_sigma: 0.005, rotation_sigma: 1e-3, yaw_bias: 2e-4 }
    }
}

/// Integrates ground-truth frame-to-frame motion corrupted by Gaussian noise
/// and a heading bias. The first pose is exact.
pub fn simulate_odometry(ground_truth: &[Pose], noise: &OdometryNoise, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(ground_truth.len());
    let Some(&first) = ground_truth.first() else { return out };
    out.push(first);
    for k in 1..ground_truth.len() {
        let delta = ground_truth[k - 1].between(&ground_truth[k]);
        let mut n = [0.0; 6];
        for x in n.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        // Camera z is the vertical axis for the down-looking rig.
        let err = Twist::new(
            Vector3::new(n[0], n[1], n[2]) * noise.translation_sigma,
            Vector3::new(n[3], n[4], n[5]) * noise.rotation_sigma + Vector3::new(0.0, 0.0, noise.yaw_bias),
        );
        let prev = out[k - 1];
        out.push(prev.compose(&delta).compose(&Pose::exp(&err)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowParams {
    pub length: usize,
    /// Probability that a window is centred on a loop-pair endpoint rather
    /// than placed uniformly.
    pub pair_bias: f64,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams { length: 64, pair_bias: 0.5 }
    }
}

/// A contiguous training window and the loop constraints that fall in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    /// Window-relative constraints, one per pair endpoint inside the window.
    pub constraints: Vec<LoopConstraint>,
}

impl Window {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    pub fn has_pair(&self) -> bool {
        !self.constraints.is_empty()
    }
}

/// `(frame_i, frame_j)` of every database pair for `scene`.
pub fn scene_pairs(database: &LoopDatabase, scene: &str) -> Vec<(usize, usize)> {
    database.pairs_for_scene(scene).map(|p| (p.frame_i, p.frame_j)).collect()
}

/// Constraints for the window `start..start + len`: a pair endpoint inside
/// the window is pulled to the ground-truth pose of its partner.
pub fn window_constraints(ground_truth: &[Pose], pairs: &[(usize, usize)], start: usize, len: usize) -> Vec<LoopConstraint> {
    let inside = |f: usize| f >= start && f < start + len;
    let mut out = Vec::new();
    for &(i, j) in pairs {
        if inside(i) {
            out.push(LoopConstraint { pred_index: i - start, target_pose: ground_truth[j] });
        }
        if inside(j) {
            out.push(LoopConstraint { pred_index: j - start, target_pose: ground_truth[i] });
        }
    }
    out
}

pub fn sample_window<R: Rng>(
    scene: &SyntheticScene,
    pairs: &[(usize, usize)],
    params: &WindowParams,
    rng: &mut R,
) -> Result<Window, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::NoPairsInScene(scene.name().to_string()));
    }
    let n = scene.len();
    let len = params.length.min(n);
    let max_start = n - len;
    let start = if rng.random_bool(params.pair_bias.clamp(0.0, 1.0)) {
        let (i, j) = pairs[rng.random_range(0..pairs.len())];
        let e = if rng.random_bool(0.5) { i } else { j };
        let offset = rng.random_range(0..len);
        e.saturating_sub(offset).min(max_start)
    } else {
        rng.random_range(0..=max_start)
    };
    Ok(Window { start, len, constraints: window_constraints(&scene.poses, pairs, start, len) })
}

/// Losses of `model` on `window`, with the per-correction gradient of the
/// weighted total. An empty constraint set contributes a zero loop term.
pub fn window_loss_with_grad(
    model: &PoseModel,
    scene: &SyntheticScene,
    window: &Window,
    weights: &LossWeights,
    delta: HuberParam,
) -> Result<(LossBreakdown, Vec<Vector6<f64>>), TrainError> {
    let range = window.range();
    if range.end > model.len() || range.end > scene.len() {
        return Err(TrainError::WindowOutOfRange { start: range.start, end: range.end, frames: scene.len() });
    }
    let preds = model.predictions(range.clone());
    let (pose, gp) = pose_loss_with_grad(&preds, &scene.poses[range.clone()], delta)?;
    let (flow, gf) = flow_loss_with_grad(&preds, &scene.flow_view(range.clone()))?;
    let (loop_value, gl) = match loop_loss_with_grad(&preds, &window.constraints, delta) {
        Ok(r) => r,
        Err(LossError::EmptyConstraints) => (0.0, Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let breakdown = total_loss(pose, flow, loop_value, weights);
    let mut grads: Vec<Vector6<f64>> = gp
        .iter()
        .zip(&gf)
        .map(|(p, f)| weights.s_p * p.to_vector() + weights.s_f * f.to_vector())
        .collect();
    if weights.w_loop != 0.0 {
        for (g, l) in grads.iter_mut().zip(&gl) {
            *g += weights.w_loop * l.to_vector();
        }
    }
    let grads = correction_gradients(&model.corrections[range], &grads);
    Ok((breakdown, grads))
}

/// One gradient-descent step on the window. Returns the losses measured
/// before the update.
pub fn training_step(
    model: &mut PoseModel,
    scene: &SyntheticScene,
    window: &Window,
    weights: &LossWeights,
    delta: HuberParam,
    step_size: f64,
) -> Result<LossBreakdown, TrainError> {
    let (breakdown, grads) = window_loss_with_grad(model, scene, window, weights, delta)?;
    let finite = breakdown.total.is_finite() && grads.iter().all(|g| g.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(TrainError::NonFiniteLoss {
            step: 0,
            pose: breakdown.pose,
            flow: breakdown.flow,
            loop_closure: breakdown.loop_closure,
            w_loop: weights.w_loop,
            window_start: window.start,
        });
    }
    for (c, g) in model.corrections[window.range()].iter_mut().zip(&grads) {
        *c = Twist::from_vector(&(c.to_vector() - step_size * g));
    }
    Ok(breakdown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub steps: usize,
    /// Gradient-descent step size on the corrections.
    pub step_size: f64,
    pub huber_delta: f64,
    pub s_p: f64,
    pub s_f: f64,
    /// When false the loop weight stays at `fixed_w_loop` for every step.
    pub agent_enabled: bool,
    pub fixed_w_loop: f64,
    pub w0: f64,
    pub w_final: f64,
    pub ema_alpha: f64,
    /// Agent updates run every `cadence` steps.
    pub cadence: usize,
    pub agent: DdpgConfig,
    pub window: WindowParams,
    pub odometry: OdometryNoise,
    /// Monitor-window losses are logged every this many steps.
    pub monitor_every: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 3360,
            step_size: 1e-2,
            huber_delta: 1.0,
            s_p: 10.0,
            s_f: 0.1,
            agent_enabled: true,
            fixed_w_loop: 0.0,
            w0: 0.1,
            w_final: 1.0,
            ema_alpha: 0.9,
            cadence: 30,
            agent: DdpgConfig::default(),
            window: WindowParams::default(),
            odometry: OdometryNoise::default(),
            monitor_every: 30,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Settings of the drift benchmark: defaults with a step size large
    /// enough for the loop term to act within the step budget (descent on the
    /// benchmark scene diverges near 2.0).
    pub fn benchmark() -> Self {
        TrainerConfig { step_size: 0.5, ..Default::default() }
    }

    /// The control arm of `self`: no agent, loop weight fixed at zero.
    pub fn control(&self) -> Self {
        TrainerConfig { agent_enabled: false, fixed_w_loop: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.cadence == 0 {
            return bad("cadence must be at least 1".into());
        }
        if self.monitor_every == 0 {
            return bad("monitor_every must be at least 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.window.length < 2 {
            return bad("window.length must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.window.pair_bias) {
            return bad("window.pair_bias must lie in [0, 1]".into());
        }
        HuberParam::new(self.huber_delta)?;
        self.weights(self.fixed_w_loop).validate()?;
        CurriculumState::new(self.w0, self.w_final, self.ema_alpha)?;
        Ok(())
    }

    fn weights(&self, w_loop: f64) -> LossWeights {
        LossWeights { s_p: self.s_p, s_f: self.s_f, w_loop }
    }
}

/// One row per training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub progress: f64,
    pub pose: f64,
    pub flow: f64,
    /// `None` when the window held no loop constraint.
    pub loop_closure: Option<f64>,
    pub ema: f64,
    /// `None` when the agent is disabled.
    pub action: Option<f64>,
    pub w_loop: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentUpdateRow {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_objective: f64,
}

/// Losses on the fixed monitor window, which is sampled once per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub step: usize,
    pub pose: f64,
    pub flow: f64,
    pub loop_closure: f64,
    /// `s_p * pose + s_f * flow`.
    pub base_total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    pub updates: Vec<AgentUpdateRow>,
    pub monitor: Vec<MonitorRow>,
    /// Loop loss over every database pair on the initial model; seeds the EMA.
    pub initial_loop_loss: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,progress,pose,flow,loop,ema,action,w_loop,reward";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    /// Full-precision CSV; empty cells mark absent loop loss or action.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.progress,
                r.pose,
                r.flow,
                opt(r.loop_closure),
                r.ema,
                opt(r.action),
                r.w_loop,
                r.reward
            )
            .unwrap();
        }
        s
    }

    pub fn updates_csv(&self) -> String {
        let mut s = String::from("step,critic_loss,actor_objective\n");
        for u in &self.updates {
            writeln!(s, "{},{},{}", u.step, u.critic_loss, u.actor_objective).unwrap();
        }
        s
    }

    pub fn monitor_csv(&self) -> String {
        let mut s = String::from("step,pose,flow,loop,base_total\n");
        for m in &self.monitor {
            writeln!(s, "{},{},{},{},{}", m.step, m.pose, m.flow, m.loop_closure, m.base_total).unwrap();
        }
        s
    }

    /// Parses [`TrainLog::to_csv`] output back into rows.
    pub fn parse_csv(text: &str) -> Result<Vec<TrainRow>, String> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == TRAIN_LOG_HEADER => {}
            other => return Err(format!("unexpected header {other:?}")),
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 9 {
                    return Err(format!("line {}: expected 9 fields, found {}", i + 2, f.len()));
                }
                let num = |k: usize| f[k].parse::<f64>().map_err(|e| format!("line {}: field {k}: {e}", i + 2));
                let opt_num = |k: usize| if f[k].is_empty() { Ok(None) } else { num(k).map(Some) };
                Ok(TrainRow {
                    step: f[0].parse().map_err(|e| format!("line {}: step: {e}", i + 2))?,
                    progress: num(1)?,
                    pose: num(2)?,
                    flow: num(3)?,
                    loop_closure: opt_num(4)?,
                    ema: num(5)?,
                    action: opt_num(6)?,
                    w_loop: num(7)?,
                    reward: num(8)?,
                })
            })
            .collect()
    }

    pub fn w_loop_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.w_loop).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub model: PoseModel,
    pub log: TrainLog,
    /// The trained agent, when one was used.
    pub agent: Option<DdpgAgent>,
}

/// Seeds of the independent random streams of one run.
#[derive(Debug, Clone, Copy)]
struct RunSeeds {
    odometry: u64,
    windows: u64,
    agent: u64,
    replay: u64,
    monitor: u64,
}

impl RunSeeds {
    fn new(seed: u64) -> Self {
        let s = |k: u64| mix_seed(seed.wrapping_mul(0x100).wrapping_add(k));
        RunSeeds { odometry: s(1), windows: s(2), agent: s(3), replay: s(4), monitor: s(5) }
    }
}

/// Odometry trajectory a run with `config` starts from.
pub fn initial_model(scene: &SyntheticScene, config: &TrainerConfig) -> PoseModel {
    PoseModel::new(simulate_odometry(&scene.poses, &config.odometry, RunSeeds::new(config.seed).odometry))
}

/// Full fine-tuning run. Per step: the agent picks an action from
/// `(progress, EMA)`, the action becomes the loop weight, one window is
/// trained, the EMA absorbs the window's loop loss, and the transition is
/// stored. Every `cadence` steps the agent trains on a replay batch.
pub fn finetune(scene: &SyntheticScene, database: &LoopDatabase, config: &TrainerConfig) -> Result<FinetuneOutput, TrainError> {
    config.validate()?;
    let pairs = scene_pairs(database, scene.name());
    if pairs.is_empty() {
        return Err(TrainError::NoPairsInScene(scene.name().to_string()));
    }
    if let Some(&(_, j)) = pairs.iter().find(|&&(_, j)| j >= scene.len()) {
        return Err(TrainError::InvalidConfig(format!("database pair frame {j} beyond scene length {}", scene.len())));
    }
    let seeds = RunSeeds::new(config.seed);
    let delta = HuberParam::new(config.huber_delta)?;
    let mut model = initial_model(scene, config);
    let mut window_rng = ChaCha8Rng::seed_from_u64(seeds.windows);
    let monitor_window = sample_window(scene, &pairs, &WindowParams { pair_bias: 1.0, ..config.window }, &mut ChaCha8Rng::seed_from_u64(seeds.monitor))?;

    let mut agent = if config.agent_enabled { Some(DdpgAgent::new(config.agent.clone(), seeds.agent)?) } else { None };
    let mut buffer = ReplayBuffer::new(config.agent.buffer_capacity, seeds.replay);
    let mut cs = CurriculumState::new(config.w0, config.w_final, config.ema_alpha)?;

    let all = window_constraints(&scene.poses, &pairs, 0, scene.len());
    let initial_loop_loss = loop_loss(&model.trajectory(), &all, delta)?;
    cs.update_ema(initial_loop_loss);
    info!("{}: {} loop pairs, initial loop loss {initial_loop_loss:.6}", scene.name(), pairs.len());

    let mut log = TrainLog { initial_loop_loss, ..Default::default() };
    let steps = config.steps;
    for t in 0..steps {
        let progress = t as f64 / steps as f64;
        cs.set_progress(progress);
        let state = cs.build_state()?;
        let (action, w_loop) = match agent.as_mut() {
            Some(a) => {
                let act = a.select_action(&state, true);
                (Some(act), cs.weight(act))
            }
            None => (None, config.fixed_w_loop),
        };

        let window = sample_window(scene, &pairs, &config.window, &mut window_rng)?;
        let weights = config.weights(w_loop);
        let b = training_step(&mut model, scene, &window, &weights, delta, config.step_size).map_err(|e| match e {
            TrainError::NonFiniteLoss { pose, flow, loop_closure, w_loop, window_start, .. } => {
                error!("non-finite loss at step {t}: window {window_start}, w_loop {w_loop}, pose {pose}, flow {flow}, loop {loop_closure}");
                TrainError::NonFiniteLoss { step: t, pose, flow, loop_closure, w_loop, window_start }
            }
            other => other,
        })?;
        let loop_closure = if window.has_pair() {
            cs.update_ema(b.loop_closure);
            Some(b.loop_closure)
        } else {
            debug!("step {t}: window at {} has no loop constraint", window.start);
            None
        };
        let reward = cs.reward()?;
        let done = t + 1 == steps;
        cs.set_progress((t + 1) as f64 / steps as f64);
        let next_state = cs.build_state()?;
        if let Some(act) = action {
            buffer.store(Transition { state, action: act, reward, next_state, done });
        }
        log.rows.push(TrainRow {
            step: t,
            progress,
            pose: b.pose,
            flow: b.flow,
            loop_closure,
            ema: cs.ema,
            action,
            w_loop,
            reward,
        });

        if (t + 1) % config.cadence == 0 {
            if let Some(a) = agent.as_mut() {
                if buffer.len() >= a.config().batch_size {
                    let stats = a.train_step(&mut buffer)?;
                    log.updates.push(AgentUpdateRow { step: t, critic_loss: stats.critic_loss, actor_objective: stats.actor_objective });
                }
            }
        }
        if (t + 1) % config.monitor_every == 0 || done {
            let (m, _) = window_loss_with_grad(&model, scene, &monitor_window, &config.weights(0.0), delta)?;
            log.monitor.push(MonitorRow { step: t, pose: m.pose, flow: m.flow, loop_closure: m.loop_closure, base_total: m.total });
        }
    }
    let skipped = log.rows.iter().filter(|r| r.loop_closure.is_none()).count();
    if skipped > 0 {
        warn!("{skipped} of {steps} windows held no loop constraint");
    }
    Ok(FinetuneOutput { model, log, agent })
}

/// Twist norm of `log(P_i^-1 G_j)` for every pair endpoint, over the whole
/// trajectory.
pub fn loop_residuals(trajectory: &[Pose], ground_truth: &[Pose], pairs: &[(usize, usize)]) -> Vec<f64> {
    window_constraints(ground_truth, pairs, 0, trajectory.len())
        .iter()
        .map(|c| {
            let e = trajectory[c.pred_index].inverse().compose(&c.target_pose);
            e.log().map(|x| x.norm()).unwrap_or(std::f64::consts::PI)
        })
        .collect()
}
