//! Deterministic kinematic stand-in for in-hand cap opening.
//!
//! The hand has 8 semantic joints (extra joints mirror finger flexion):
//!
//! | index | role                          |
//! |-------|-------------------------------|
//! | 0, 1  | finger base lateral (slide)   |
//! | 2..=4 | finger flexion (grip)         |
//! | 5     | thumb rotation (cap twist)    |
//! | 6     | thumb flexion (press)         |
//! | 7     | thumb tip flexion             |
//!
//! A bottle lies across the fingers at lateral position `object_pos`; its
//! cap opens only when the thumb presses and twists while the object sits
//! inside the openable window `|object_pos| <= cap_radius`.

mod dataset;
mod expert;
mod judge;
mod sim;

use serde::{Deserialize, Serialize};

pub use dataset::{
    default_training_scenarios, evaluation_scenarios, generate_dataset, generate_episode, run_expert,
    scenarios_from_csv, scenarios_to_csv, Scenario,
};
pub use expert::{Expert, Segment};
pub use judge::{judge, EvalOutcome, JudgeConfig, TrialResult};
pub use sim::{Env, EnvState, Observation, PhaseTracker};

use crate::episode::TactileLayout;
use crate::error::{Error, Result};

/// Number of joints with a dedicated role.
pub const SEMANTIC_JOINTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub joints: usize,
    pub patches: usize,
    pub taxel_rows: usize,
    pub taxel_cols: usize,
    /// Rows of the thumb patch duplicated into the thumb stream.
    pub thumb_rows: usize,
    pub sim_rate: u32,
    pub control_rate: u32,
    /// Fraction of the command error closed per control tick.
    pub joint_response: f64,
    /// Joint speed limit in rad/s.
    pub max_joint_speed: f64,
    /// Object displacement per radian of lateral finger travel with the thumb released.
    pub slide_gain: f64,
    pub position_limit: f64,
    pub tactile_noise: f64,
    pub joint_noise: f64,
    pub torque_noise: f64,
    /// Ticks the expert holds still after a successful opening.
    pub stop_ticks: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            joints: SEMANTIC_JOINTS,
            patches: 2,
            taxel_rows: 4,
            taxel_cols: 4,
            thumb_rows: 2,
            sim_rate: 100,
            control_rate: 10,
            joint_response: 0.7,
            max_joint_speed: 6.0,
            slide_gain: 0.78,
            position_limit: 1.5,
            tactile_noise: 4.0,
            joint_noise: 0.002,
            torque_noise: 0.01,
            stop_ticks: 45,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env: {m}")));
        if self.joints < SEMANTIC_JOINTS {
            return bad("at least 8 joints are required");
        }
        if self.patches != 2 || self.taxel_cols != 4 || self.taxel_rows < 2 {
            return bad("the contact model needs 2 patches of >=2 x 4 taxels");
        }
        if self.thumb_rows == 0 || self.thumb_rows > self.taxel_rows {
            return bad("thumb_rows must be within the thumb patch");
        }
        if self.control_rate == 0 || self.sim_rate % self.control_rate != 0 {
            return bad("control rate must divide sim rate");
        }
        if !(0.0 < self.joint_response && self.joint_response <= 1.0) {
            return bad("joint_response must be in (0, 1]");
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.sim_rate / self.control_rate) as usize
    }

    pub fn taxels_per_patch(&self) -> usize {
        self.taxel_rows * self.taxel_cols
    }

    /// Whole-stream columns of the thumb tip rows (patch 1).
    pub fn tactile_layout(&self) -> TactileLayout {
        let base = self.taxels_per_patch() * crate::episode::AXES;
        let n = self.thumb_rows * self.taxel_cols * crate::episode::AXES;
        TactileLayout {
            patches: self.patches,
            taxels_per_patch: self.taxels_per_patch(),
            thumb_columns: (base..base + n).collect(),
        }
    }
}

/// Physical variant of the bottle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    /// Lateral extent of the bottle across the fingers.
    pub length: f64,
    /// Stiffness/size factor on every contact reading.
    pub tactile_gain: f64,
    /// Half width of the openable window.
    pub cap_radius: f64,
}

impl ObjectSpec {
    fn new(id: &str, length: f64, tactile_gain: f64, cap_radius: f64) -> Self {
        Self { id: id.to_string(), length, tactile_gain, cap_radius }
    }

    /// The four objects used for demonstrations.
    pub fn trained() -> Vec<ObjectSpec> {
        vec![
            Self::new("A", 2.0, 1.0, 0.30),
            Self::new("B", 1.8, 1.2, 0.32),
            Self::new("C", 2.2, 0.85, 0.29),
            Self::new("D", 2.0, 1.1, 0.30),
        ]
    }

    /// Six held-out variants with different sizes, stiffness and caps.
    pub fn untrained() -> Vec<ObjectSpec> {
        vec![
            Self::new("E", 1.7, 0.75, 0.27),
            Self::new("F", 2.3, 1.3, 0.34),
            Self::new("G", 1.9, 0.9, 0.25),
            Self::new("H", 2.1, 1.4, 0.31),
            Self::new("I", 1.6, 1.05, 0.36),
            Self::new("J", 2.4, 0.8, 0.28),
        ]
    }

    pub fn by_id(id: &str) -> Option<ObjectSpec> {
        Self::trained().into_iter().chain(Self::untrained()).find(|o| o.id == id)
    }
}

/// Initial positions of the demonstration markers.
pub const TRAINED_POSITIONS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
/// Evaluation markers in between the demonstration markers.
pub const TEST_POSITIONS: [f64; 4] = [-0.75, -0.25, 0.25, 0.75];
/// Evaluation markers for held-out objects.
pub const UNTRAINED_TEST_POSITIONS: [f64; 3] = [-0.6, 0.0, 0.6];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::SubTask;
    use crate::preprocess::{fit_scaler, resample};

    fn expert_outcome(cfg: &EnvConfig, sc: &Scenario) -> (EvalOutcome, f64) {
        let (mut env, _) = Env::reset(cfg, &sc.object().unwrap(), sc.initial_pos, sc.seed_offset()).unwrap();
        let mut expert = Expert::new(cfg);
        let (mut cmds, mut open) = (Vec::new(), Vec::new());
        loop {
            let (cmd, _) = expert.act(env.state());
            if expert.finished() {
                break;
            }
            env.step(&cmd).unwrap();
            cmds.push(cmd);
            open.push(env.state().cap_open);
        }
        (judge(&cmds, &open, &JudgeConfig::default()), env.state().object_pos)
    }

    #[test]
    fn expert_completes_every_scenario() {
        let cfg = EnvConfig::default();
        for sc in default_training_scenarios().iter().chain(&evaluation_scenarios()) {
            let (out, pos) = expert_outcome(&cfg, sc);
            assert_eq!(out.result, TrialResult::CompleteSuccess, "{}", sc.label());
            assert_eq!(run_expert(&cfg, sc, sc.seed_offset(), &JudgeConfig::default()).unwrap(), out);
            assert!(pos.abs() <= sc.object().unwrap().cap_radius);
        }
    }

    #[test]
    fn one_slide_moves_half_a_marker_spacing() {
        let cfg = EnvConfig::default();
        let sc = Scenario { object_id: "A".into(), initial_pos: 0.5, trained: true, trial: 0 };
        let (_, pos) = expert_outcome(&cfg, &sc);
        assert!(pos.abs() < 0.02, "{pos}");
    }

    #[test]
    fn joints_align_at_switch_marks() {
        let cfg = EnvConfig::default();
        let eps: Vec<_> = generate_dataset(&default_training_scenarios(), &cfg)
            .unwrap()
            .iter()
            .map(|e| resample(e, cfg.control_rate).unwrap())
            .collect();
        let stats = fit_scaler(&eps, 1000.0).unwrap();
        let mut worst: f64 = 0.0;
        for ep in &eps {
            for &m in &ep.switch_marks {
                let a = stats.scale_channels(0, ep.joints.row(m - 1));
                let b = stats.scale_channels(0, ep.joints.row(m));
                worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
            }
        }
        assert!(worst < 0.02, "worst normalized jump {worst}");
    }

    #[test]
    fn tracker_follows_expert_phases() {
        let cfg = EnvConfig::default();
        let sc = Scenario { object_id: "B".into(), initial_pos: -1.0, trained: true, trial: 0 };
        let (mut env, _) = Env::reset(&cfg, &sc.object().unwrap(), sc.initial_pos, 0).unwrap();
        let mut expert = Expert::new(&cfg);
        let (mut agree, mut total) = (0, 0);
        let mut seen = std::collections::BTreeSet::new();
        loop {
            let (cmd, label) = expert.act(env.state());
            if expert.finished() {
                break;
            }
            env.step(&cmd).unwrap();
            seen.insert(env.state().phase);
            total += 1;
            agree += usize::from(env.state().phase == label);
        }
        assert!(agree as f64 / total as f64 > 0.9, "{agree}/{total}");
        assert!(seen.contains(&SubTask::SlideRight) && seen.contains(&SubTask::Stop));
    }

    /// A perfect predictor commands the observed joints two ticks ahead;
    /// the hand must still open the cap and stop.
    #[test]
    fn replaying_observed_joints_succeeds() {
        let cfg = EnvConfig::default();
        for sc in evaluation_scenarios().iter().filter(|s| s.trial == 0) {
            let obj = sc.object().unwrap();
            let (mut env, first) = Env::reset(&cfg, &obj, sc.initial_pos, 1).unwrap();
            let mut expert = Expert::new(&cfg);
            let mut joints = vec![first.joints];
            loop {
                let (cmd, _) = expert.act(env.state());
                if expert.finished() {
                    break;
                }
                joints.push(env.step(&cmd).unwrap().joints);
            }
            let (mut replay, _) = Env::reset(&cfg, &obj, sc.initial_pos, 2).unwrap();
            let (mut cmds, mut open) = (Vec::new(), Vec::new());
            for k in 0..joints.len() - 2 {
                replay.step(&joints[k + 2]).unwrap();
                cmds.push(joints[k + 2].clone());
                open.push(replay.state().cap_open);
            }
            let out = judge(&cmds, &open, &JudgeConfig::default());
            assert_eq!(out.result, TrialResult::CompleteSuccess, "{}", sc.label());
        }
    }

    /// Ridge probe from one whole-hand tactile frame to the object
    /// position, fitted on first trials and scored on second trials.
    #[test]
    fn object_position_is_linearly_decodable_from_touch() {
        use crate::analysis::linear_probe_r2;
        use crate::math::Matrix;
        let cfg = EnvConfig::default();
        let mut sets: [(Vec<f64>, Vec<f64>); 2] = Default::default();
        for sc in &default_training_scenarios() {
            let (mut env, _) = Env::reset(&cfg, &sc.object().unwrap(), sc.initial_pos, sc.seed_offset()).unwrap();
            let mut expert = Expert::new(&cfg);
            loop {
                let (cmd, _) = expert.act(env.state());
                if expert.finished() {
                    break;
                }
                let obs = env.step(&cmd).unwrap();
                if env.contact_readings().iter().any(|v| *v != 0.0) {
                    let set = &mut sets[sc.trial];
                    set.0.extend(&obs.tactile_whole);
                    set.1.push(env.state().object_pos);
                }
            }
        }
        let dw = cfg.tactile_layout().whole_dim();
        let m = |v: &Vec<f64>| Matrix::from_vec(v.len() / dw, dw, v.clone()).unwrap();
        let r2 = linear_probe_r2(&m(&sets[0].0), &sets[0].1, &m(&sets[1].0), &sets[1].1, 1e-3).unwrap();
        assert!(r2 > 0.9, "held-out R² {r2}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            EnvConfig { joints: 4, ..EnvConfig::default() },
            EnvConfig { control_rate: 7, ..EnvConfig::default() },
            EnvConfig { thumb_rows: 9, ..EnvConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        assert_eq!(EnvConfig::default().tactile_layout().thumb_dim(), 24);
        assert_eq!(EnvConfig::default().tactile_layout().whole_dim(), 96);
    }
}
