use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{judge, Env, EnvConfig, EvalOutcome, Expert, JudgeConfig, ObjectSpec, TEST_POSITIONS, TRAINED_POSITIONS, UNTRAINED_TEST_POSITIONS};
use crate::episode::{switch_marks_from_labels, RawEpisode};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Upper bound on demonstration length in control ticks.
const MAX_EXPERT_TICKS: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub object_id: String,
    pub initial_pos: f64,
    /// Object was used for demonstrations.
    pub trained: bool,
    /// Repetition index; selects the noise stream.
    pub trial: usize,
}

impl Scenario {
    pub fn object(&self) -> Result<ObjectSpec> {
        ObjectSpec::by_id(&self.object_id).ok_or_else(|| Error::Env(format!("unknown object `{}`", self.object_id)))
    }

    /// Stable seed offset of this scenario.
    pub fn seed_offset(&self) -> u64 {
        let obj = self.object_id.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        let pos = ((self.initial_pos + 10.0) * 1000.0).round() as u64;
        obj.wrapping_mul(1_000_003) ^ pos.wrapping_mul(7919) ^ (self.trial as u64).wrapping_mul(104_729)
    }

    pub fn label(&self) -> String {
        format!("{}@{:+.2}#{}", self.object_id, self.initial_pos, self.trial)
    }
}

fn grid(objects: &[ObjectSpec], positions: &[f64], trained: bool, trials: usize) -> Vec<Scenario> {
    let mut out = Vec::new();
    for o in objects {
        for &p in positions {
            for trial in 0..trials {
                out.push(Scenario { object_id: o.id.clone(), initial_pos: p, trained, trial });
            }
        }
    }
    out
}

/// Demonstration matrix: 4 objects × 5 markers × 2 trials.
pub fn default_training_scenarios() -> Vec<Scenario> {
    grid(&ObjectSpec::trained(), &TRAINED_POSITIONS, true, 2)
}

/// Evaluation matrix: 4 trained objects × 4 in-between markers × 2 trials
/// followed by 6 held-out objects × 3 markers × 2 trials.
pub fn evaluation_scenarios() -> Vec<Scenario> {
    let mut v = grid(&ObjectSpec::trained(), &TEST_POSITIONS, true, 2);
    v.extend(grid(&ObjectSpec::untrained(), &UNTRAINED_TEST_POSITIONS, false, 2));
    v
}

/// CSV scenario list: `object_id,initial_pos,trained,trial`.
pub fn scenarios_to_csv(scenarios: &[Scenario]) -> String {
    let mut s = String::from("object_id,initial_pos,trained,trial\n");
    for sc in scenarios {
        let _ = writeln!(s, "{},{},{},{}", sc.object_id, sc.initial_pos, sc.trained, sc.trial);
    }
    s
}

pub fn scenarios_from_csv(text: &str) -> Result<Vec<Scenario>> {
    let bad = |line: usize, d: &str| Error::format(format!("scenario list line {line}"), d.to_string());
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "expected 4 fields"));
        }
        let sc = Scenario {
            object_id: f[0].to_string(),
            initial_pos: f[1].parse().map_err(|_| bad(i + 1, "bad initial_pos"))?,
            trained: f[2].parse().map_err(|_| bad(i + 1, "bad trained flag"))?,
            trial: f[3].parse().map_err(|_| bad(i + 1, "bad trial"))?,
        };
        sc.object()?;
        out.push(sc);
    }
    Ok(out)
}

/// Records one expert demonstration at the simulation rate. Frame
/// `substeps * k` is the observation at the start of control tick `k`.
pub fn generate_episode(config: &EnvConfig, scenario: &Scenario, seed: u64) -> Result<RawEpisode> {
    let object = scenario.object()?;
    let (mut env, mut obs) = Env::reset(config, &object, scenario.initial_pos, seed)?;
    let mut expert = Expert::new(config);
    let layout = config.tactile_layout();
    let (mut joints, mut torques, mut whole, mut thumb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut labels = Vec::new();
    for _ in 0..MAX_EXPERT_TICKS {
        let (cmd, label) = expert.act(env.state());
        if expert.finished() {
            break;
        }
        let (frames, next) = env.step_recorded(&cmd, obs)?;
        for f in frames {
            joints.extend(f.joints);
            torques.extend(f.torques);
            whole.extend(f.tactile_whole);
            thumb.extend(f.tactile_thumb);
            labels.push(label);
        }
        obs = next;
    }
    if !expert.finished() {
        return Err(Error::Env(format!("expert did not finish {} within {MAX_EXPERT_TICKS} ticks", scenario.label())));
    }
    let t = labels.len();
    let ep = RawEpisode {
        sample_rate: config.sim_rate,
        joints: Matrix::from_vec(t, config.joints, joints)?,
        torques: Matrix::from_vec(t, config.joints, torques)?,
        tactile_whole: Matrix::from_vec(t, layout.whole_dim(), whole)?,
        tactile_thumb: Matrix::from_vec(t, layout.thumb_dim(), thumb)?,
        switch_marks: switch_marks_from_labels(&labels),
        labels,
        layout,
    };
    ep.validate()?;
    Ok(ep)
}

/// Judged closed-loop run of the expert itself.
pub fn run_expert(config: &EnvConfig, scenario: &Scenario, seed: u64, judge_config: &JudgeConfig) -> Result<EvalOutcome> {
    let (mut env, _) = Env::reset(config, &scenario.object()?, scenario.initial_pos, seed)?;
    let mut expert = Expert::new(config);
    let (mut cmds, mut open) = (Vec::new(), Vec::new());
    while cmds.len() < MAX_EXPERT_TICKS {
        let (cmd, _) = expert.act(env.state());
        if expert.finished() {
            break;
        }
        env.step(&cmd)?;
        cmds.push(cmd);
        open.push(env.state().cap_open);
    }
    Ok(judge(&cmds, &open, judge_config))
}

/// One episode per scenario, seeded from `config.seed` and the scenario.
pub fn generate_dataset(scenarios: &[Scenario], config: &EnvConfig) -> Result<Vec<RawEpisode>> {
    scenarios
        .iter()
        .map(|sc| generate_episode(config, sc, config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sc.seed_offset()))
        .collect()
}
