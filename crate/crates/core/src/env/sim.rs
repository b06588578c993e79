use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EnvConfig, ObjectSpec, SEMANTIC_JOINTS};
use crate::episode::{SubTask, AXES};
use crate::error::{Error, Result};
use crate::math::sigmoid;

const LATERAL: [usize; 2] = [0, 1];
const FLEX: [usize; 3] = [2, 3, 4];
const THUMB_TWIST: usize = 5;
const THUMB_FLEX: usize = 6;
const THUMB_TIP: usize = 7;

/// Thumb flexion above which the thumb presses on the cap.
pub(crate) const PRESS_LEVEL: f64 = 0.7;
/// Accumulated twist under pressure required to open the cap.
const TWIST_TO_OPEN: f64 = 0.3;
/// Thumb rotation the twist must reach.
const TWIST_ANGLE: f64 = 0.8;

const FINGER_X: [f64; 4] = [-1.2, -0.4, 0.4, 1.2];
const THUMB_X: [f64; 4] = [-0.36, -0.12, 0.12, 0.36];

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub joints: Vec<f64>,
    pub torques: Vec<f64>,
    pub tactile_whole: Vec<f64>,
    pub tactile_thumb: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub object_pos: f64,
    pub cap_open: bool,
    pub joints: Vec<f64>,
    /// Kinematically tracked sub-task.
    pub phase: SubTask,
    /// Control ticks executed.
    pub step_count: usize,
    twist_accum: f64,
    last_slip: f64,
    last_twist_rate: f64,
}

/// Labels closed-loop motion with sub-tasks from joint kinematics, moving
/// only along the motion-flow graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTracker {
    phase: SubTask,
}

impl Default for PhaseTracker {
    fn default() -> Self {
        Self { phase: SubTask::Grasp }
    }
}

impl PhaseTracker {
    pub fn phase(&self) -> SubTask {
        self.phase
    }

    pub fn update(&mut self, q: &[f64], cap_open: bool) -> SubTask {
        let twisting = q[THUMB_TWIST] > 0.45 && q[THUMB_FLEX] > 0.62;
        let returned = q[THUMB_TWIST] < 0.4 && q[THUMB_FLEX] < PRESS_LEVEL;
        let released = q[THUMB_FLEX] < 0.45;
        let slide = if q[0] > 0.08 {
            Some(SubTask::SlideRight)
        } else if q[0] < -0.08 {
            Some(SubTask::SlideLeft)
        } else {
            None
        };
        use SubTask::*;
        self.phase = match self.phase {
            Grasp | SlideLeft | SlideRight | Stop if twisting => TryOpen,
            TryOpen if released => RetractThumb,
            TryOpen if returned && cap_open => Stop,
            RetractThumb => slide.unwrap_or(RetractThumb),
            p => p,
        };
        self.phase
    }
}

/// One simulated hand and object.
#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    object: ObjectSpec,
    state: EnvState,
    tracker: PhaseTracker,
    rng: ChaCha8Rng,
    command: Vec<f64>,
}

/// Joint vector of the relaxed open hand.
pub(crate) fn open_posture(joints: usize) -> Vec<f64> {
    let mut q = vec![0.05; joints];
    q[0] = 0.0;
    q[1] = 0.0;
    for j in [THUMB_TWIST, THUMB_FLEX, THUMB_TIP] {
        q[j] = 0.0;
    }
    q
}

impl Env {
    /// Places the object at `initial_pos` with the cap closed and the hand open.
    pub fn reset(config: &EnvConfig, object: &ObjectSpec, initial_pos: f64, seed: u64) -> Result<(Env, Observation)> {
        config.validate()?;
        if initial_pos.abs() > config.position_limit {
            return Err(Error::Env(format!("initial position {initial_pos} outside the hand")));
        }
        let joints = open_posture(config.joints);
        let state = EnvState {
            object_pos: initial_pos,
            cap_open: false,
            joints: joints.clone(),
            phase: SubTask::Grasp,
            step_count: 0,
            twist_accum: 0.0,
            last_slip: 0.0,
            last_twist_rate: 0.0,
        };
        let mut env = Env {
            config: config.clone(),
            object: object.clone(),
            state,
            tracker: PhaseTracker::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            command: joints,
        };
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn object(&self) -> &ObjectSpec {
        &self.object
    }

    /// One control tick: holds `command` for every sim substep and returns
    /// the observation at the end of the tick.
    pub fn step(&mut self, command: &[f64]) -> Result<Observation> {
        let mut last = None;
        for _ in 0..self.config.substeps() {
            last = Some(self.substep(command)?);
        }
        self.finish_tick();
        Ok(last.expect("at least one substep"))
    }

    /// Like [`Env::step`] but returns the observation at the start of every
    /// substep (the sim-rate recording of this tick).
    pub fn step_recorded(&mut self, command: &[f64], first: Observation) -> Result<(Vec<Observation>, Observation)> {
        let mut frames = Vec::with_capacity(self.config.substeps());
        let mut current = first;
        for _ in 0..self.config.substeps() {
            let next = self.substep(command)?;
            frames.push(std::mem::replace(&mut current, next));
        }
        self.finish_tick();
        Ok((frames, current))
    }

    fn finish_tick(&mut self) {
        self.state.step_count += 1;
        self.state.phase = self.tracker.update(&self.state.joints, self.state.cap_open);
    }

    fn substep(&mut self, command: &[f64]) -> Result<Observation> {
        if command.len() != self.config.joints {
            return Err(Error::Env(format!("command has {} joints, hand has {}", command.len(), self.config.joints)));
        }
        if let Some(j) = command.iter().position(|v| !v.is_finite()) {
            return Err(Error::Env(format!("non-finite command for joint {j}")));
        }
        self.command.copy_from_slice(command);
        let n = self.config.substeps() as f64;
        let alpha = 1.0 - (1.0 - self.config.joint_response).powf(1.0 / n);
        let max_delta = self.config.max_joint_speed / self.config.sim_rate as f64;

        let before = self.state.joints.clone();
        for (q, c) in self.state.joints.iter_mut().zip(command) {
            *q += (alpha * (c - *q)).clamp(-max_delta, max_delta);
        }
        let q = &self.state.joints;
        let d_lateral = q[0] - before[0];
        let d_twist = q[THUMB_TWIST] - before[THUMB_TWIST];

        // Fingers drag the bottle only while the thumb lets go of it.
        let release = ((0.45 - q[THUMB_FLEX]) / 0.15).clamp(0.0, 1.0);
        let slip = if self.grip() > 0.5 { self.config.slide_gain * d_lateral * release } else { 0.0 };
        let limit = self.config.position_limit;
        self.state.object_pos = (self.state.object_pos + slip).clamp(-limit, limit);

        let pressing = q[THUMB_FLEX] >= PRESS_LEVEL;
        let in_window = self.state.object_pos.abs() <= self.object.cap_radius;
        if pressing && in_window {
            self.state.twist_accum += d_twist.max(0.0);
        } else if !pressing {
            self.state.twist_accum = 0.0;
        }
        if self.state.twist_accum >= TWIST_TO_OPEN && q[THUMB_TWIST] >= TWIST_ANGLE {
            self.state.cap_open = true;
        }
        self.state.last_slip = slip;
        self.state.last_twist_rate = d_twist;
        Ok(self.observe())
    }

    /// Finger grip in [0, 1].
    fn grip(&self) -> f64 {
        let q = &self.state.joints;
        let mean = FLEX.iter().map(|&j| q[j]).sum::<f64>() / FLEX.len() as f64;
        ((mean - 0.35) / 0.4).clamp(0.0, 1.0)
    }

    /// Thumb press in [0, 1].
    fn press(&self) -> f64 {
        ((self.state.joints[THUMB_FLEX] - 0.3) / 0.4).clamp(0.0, 1.0)
    }

    /// Noise-free readings of every whole-hand taxel channel.
    pub fn contact_readings(&self) -> Vec<f64> {
        let cfg = &self.config;
        let (rows, cols) = (cfg.taxel_rows, cfg.taxel_cols);
        let mut out = vec![0.0; cfg.patches * rows * cols * AXES];
        let gain = self.object.tactile_gain;
        let pos = self.state.object_pos;
        let grip = self.grip();
        let press = self.press();
        let half = self.object.length / 2.0;
        let row_weight = |r: usize| 1.0 - 0.45 * r as f64 / (rows - 1) as f64;

        // Finger patch: the bottle body across the fingers.
        for r in 0..rows {
            for c in 0..cols {
                let cover = sigmoid((half - (FINGER_X[c] - pos).abs()) / 0.12);
                let w = row_weight(r) * cover;
                let base = (r * cols + c) * AXES;
                out[base] = 2.0e4 * self.state.last_slip * grip * w;
                out[base + 1] = 150.0 * press * w;
                out[base + 2] = 900.0 * gain * grip * w;
            }
        }

        // Thumb patch: tip rows touch the cap, pad rows touch the bottle.
        let patch = rows * cols * AXES;
        let radius = self.object.cap_radius;
        let open = self.state.cap_open;
        let twist = self.state.last_twist_rate;
        for r in 0..rows {
            for c in 0..cols {
                let base = patch + (r * cols + c) * AXES;
                if r < cfg.thumb_rows {
                    let cap = sigmoid((radius - (THUMB_X[c] - pos).abs()) / 0.06);
                    let (normal, thread, resist) = if open { (0.3 + 0.15 * cap, 0.0, 0.1) } else { (0.3 + 0.7 * cap, 1.0, 1.0) };
                    out[base] = 4.0e3 * twist * press * (0.3 + 0.7 * cap) * resist;
                    out[base + 1] = 200.0 * press * cap * thread;
                    out[base + 2] = 800.0 * gain * press * normal;
                } else {
                    let w = row_weight(r);
                    out[base] = 2.0e3 * twist * press * w * 0.2;
                    out[base + 1] = -60.0 * press * w;
                    out[base + 2] = 500.0 * gain * press * w;
                }
            }
        }
        out
    }

    /// Noise-free joint torques.
    pub fn torque_readings(&self) -> Vec<f64> {
        let q = &self.state.joints;
        let gain = self.object.tactile_gain;
        let grip = self.grip();
        let press = self.press();
        let mut tau: Vec<f64> = q.iter().map(|v| 0.2 * v).collect();
        for j in LATERAL {
            tau[j] = 0.5 * q[j] + 40.0 * self.state.last_slip * gain;
        }
        for j in FLEX {
            tau[j] += 0.8 * grip * gain;
        }
        let resisting = !self.state.cap_open && self.state.object_pos.abs() <= self.object.cap_radius + 0.1;
        tau[THUMB_TWIST] += if resisting { 8.0 } else { 1.0 } * self.state.last_twist_rate.max(0.0) * press;
        tau[THUMB_FLEX] += 0.6 * press * gain * if self.state.cap_open { 0.5 } else { 1.0 };
        tau[THUMB_TIP] = 0.3 * q[THUMB_TIP];
        for t in tau.iter_mut().skip(SEMANTIC_JOINTS) {
            *t += 0.8 * grip * gain;
        }
        tau
    }

    fn observe(&mut self) -> Observation {
        let cfg = self.config.clone();
        let tactile = Normal::new(0.0, cfg.tactile_noise.max(0.0)).expect("finite sigma");
        let joint = Normal::new(0.0, cfg.joint_noise.max(0.0)).expect("finite sigma");
        let torque = Normal::new(0.0, cfg.torque_noise.max(0.0)).expect("finite sigma");
        let layout = cfg.tactile_layout();
        let clean_torques = self.torque_readings();
        let clean_tactile = self.contact_readings();
        let rng = &mut self.rng;
        let joints: Vec<f64> = self.state.joints.iter().map(|v| v + joint.sample(rng)).collect();
        let torques: Vec<f64> = clean_torques.into_iter().map(|v| v + torque.sample(rng)).collect();
        let tactile_whole: Vec<f64> = clean_tactile.into_iter().map(|v| v + tactile.sample(rng)).collect();
        let tactile_thumb = layout.thumb_columns.iter().map(|&c| tactile_whole[c]).collect();
        Observation { joints, torques, tactile_whole, tactile_thumb }
    }

    /// Joint command last applied.
    pub fn last_command(&self) -> &[f64] {
        &self.command
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> EnvConfig {
        EnvConfig { tactile_noise: 0.0, joint_noise: 0.0, torque_noise: 0.0, ..EnvConfig::default() }
    }

    fn object() -> ObjectSpec {
        ObjectSpec::trained()[0].clone()
    }

    #[test]
    fn open_hand_has_no_contact() {
        let (env, obs) = Env::reset(&EnvConfig::default(), &object(), 0.0, 3).unwrap();
        assert!(env.contact_readings().iter().all(|v| *v == 0.0));
        // only sensor noise remains
        assert!(obs.tactile_whole.iter().all(|v| v.abs() < 6.0 * 4.0));
        assert_eq!(obs.tactile_thumb.len(), 24);
    }

    #[test]
    fn thumb_stream_duplicates_whole_columns() {
        let (mut env, _) = Env::reset(&EnvConfig::default(), &object(), 0.2, 3).unwrap();
        let mut cmd = env.state().joints.clone();
        cmd[6] = 0.8;
        cmd[2..5].iter_mut().for_each(|v| *v = 0.8);
        let obs = env.step(&cmd).unwrap();
        let cols = env.config().tactile_layout().thumb_columns;
        for (i, &c) in cols.iter().enumerate() {
            assert_eq!(obs.tactile_thumb[i], obs.tactile_whole[c]);
        }
    }

    fn grasp(env: &mut Env) {
        let mut cmd = env.state().joints.clone();
        cmd[2..5].iter_mut().for_each(|v| *v = 0.8);
        cmd[6] = 0.6;
        for _ in 0..12 {
            env.step(&cmd).unwrap();
        }
    }

    fn shear_after_slide(dir: f64) -> f64 {
        let (mut env, _) = Env::reset(&quiet(), &object(), 0.0, 1).unwrap();
        grasp(&mut env);
        let mut cmd = env.state().joints.clone();
        cmd[6] = 0.2;
        for _ in 0..6 {
            env.step(&cmd).unwrap();
        }
        let start = env.state().object_pos;
        cmd[0] = 0.3 * dir;
        cmd[1] = 0.3 * dir;
        // first substep of the drag
        let obs = env.step(&cmd).unwrap();
        assert!((env.state().object_pos - start) * dir > 0.0);
        (0..4).map(|c| obs.tactile_whole[c * 3]).sum()
    }

    #[test]
    fn shear_flips_with_slide_direction() {
        let right = shear_after_slide(1.0);
        let left = shear_after_slide(-1.0);
        assert!(right > 1.0 && left < -1.0, "{right} {left}");
        assert!((right + left).abs() < 1e-9 * right.abs());
    }

    #[test]
    fn nan_command_rejected() {
        let (mut env, _) = Env::reset(&EnvConfig::default(), &object(), 0.0, 3).unwrap();
        let mut cmd = env.state().joints.clone();
        cmd[3] = f64::NAN;
        assert!(matches!(env.step(&cmd), Err(Error::Env(_))));
        assert!(env.step(&[0.0; 3]).is_err());
    }

    /// Brute-force oracle over a position grid: a twist under pressure
    /// opens the cap exactly when the object is inside the window.
    #[test]
    fn cap_opens_only_inside_window() {
        let obj = object();
        for i in -40..=40 {
            let pos = i as f64 * 0.025;
            let (mut env, _) = Env::reset(&quiet(), &obj, pos, 0).unwrap();
            grasp(&mut env);
            let mut cmd = env.state().joints.clone();
            cmd[6] = 0.9;
            cmd[5] = 1.0;
            for _ in 0..8 {
                env.step(&cmd).unwrap();
            }
            let inside = pos.abs() <= obj.cap_radius;
            assert_eq!(env.state().cap_open, inside, "pos {pos}");
        }
    }

    #[test]
    fn twist_without_press_never_opens() {
        let (mut env, _) = Env::reset(&quiet(), &object(), 0.0, 0).unwrap();
        grasp(&mut env);
        let mut cmd = env.state().joints.clone();
        cmd[5] = 1.0;
        for _ in 0..8 {
            env.step(&cmd).unwrap();
        }
        assert!(!env.state().cap_open);
    }

    #[test]
    fn cap_stays_open() {
        let (mut env, _) = Env::reset(&quiet(), &object(), 0.0, 0).unwrap();
        grasp(&mut env);
        let mut cmd = env.state().joints.clone();
        cmd[6] = 0.9;
        cmd[5] = 1.0;
        for _ in 0..8 {
            env.step(&cmd).unwrap();
        }
        assert!(env.state().cap_open);
        let open = open_posture(8);
        for _ in 0..10 {
            env.step(&open).unwrap();
            assert!(env.state().cap_open);
        }
    }
}
