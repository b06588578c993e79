//! End-to-end stages: demonstrations → normalization → tactile encoders →
//! policies I–IV → closed-loop trials. Every stage is a pure function of
//! the run configuration and its inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_ae, AeConfig, TrainedAe};
use crate::config::RunConfig;
use crate::env::{default_training_scenarios, evaluation_scenarios, generate_dataset, EvalOutcome, Scenario};
use crate::episode::RawEpisode;
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::policy::{
    train_policy, Controller, LossConfig, NoiseSource, PolicyConfig, RolloutTrace, SequenceData, TactileEncoders,
    TrainedPolicy, EMPHASIZED_JOINTS,
};
use crate::preprocess::{clip_tactile, fit_scaler, make_targets, resample, NormalizationStats, ProcessedEpisode};

/// The four ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationModel {
    /// Attention and loop constraint.
    I,
    /// Loop constraint only.
    II,
    /// Attention only.
    III,
    /// Neither.
    IV,
}

impl AblationModel {
    pub const ALL: [AblationModel; 4] = [AblationModel::I, AblationModel::II, AblationModel::III, AblationModel::IV];

    pub fn from_flags(attention: bool, constraint: bool) -> Self {
        match (attention, constraint) {
            (true, true) => Self::I,
            (false, true) => Self::II,
            (true, false) => Self::III,
            (false, false) => Self::IV,
        }
    }

    pub fn attention(self) -> bool {
        matches!(self, Self::I | Self::III)
    }

    pub fn constraint(self) -> bool {
        matches!(self, Self::I | Self::II)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        }
    }
}

impl fmt::Display for AblationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected I, II, III or IV)")))
    }
}

/// Demonstrations with the scenarios that produced them.
#[derive(Clone, Debug)]
pub struct Demonstrations {
    pub scenarios: Vec<Scenario>,
    pub episodes: Vec<RawEpisode>,
}

pub fn generate(config: &RunConfig) -> Result<Demonstrations> {
    let scenarios = default_training_scenarios();
    let mut env = config.env.clone();
    env.seed = config.seed;
    let episodes = generate_dataset(&scenarios, &env)?;
    Ok(Demonstrations { scenarios, episodes })
}

/// Indices of held-out demonstrations: spread over objects and positions,
/// taken from the second trial of each cell.
pub fn validation_indices(scenarios: &[Scenario], count: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .filter(|(_, s)| s.trial == 1)
        .enumerate()
        .map(|(k, (i, _))| ((k * 7) % scenarios.len().max(1), i))
        .collect();
    ranked.sort_unstable();
    let mut v: Vec<usize> = ranked.into_iter().take(count).map(|(_, i)| i).collect();
    v.sort_unstable();
    v
}

/// Normalized demonstrations split into training and validation sets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub stats: NormalizationStats,
    /// Unshifted (`horizon = 0`) normalized episodes.
    pub train: Vec<ProcessedEpisode>,
    pub validation: Vec<ProcessedEpisode>,
    pub validation_indices: Vec<usize>,
}

impl Prepared {
    fn frames(eps: &[ProcessedEpisode], range: std::ops::Range<usize>) -> Result<Matrix> {
        let parts: Vec<Matrix> = eps.iter().map(|e| e.inputs.col_slice(range.start, range.len())).collect();
        Matrix::vstack(&parts)
    }

    pub fn whole_frames(&self) -> Result<(Matrix, Matrix)> {
        let r = self.stats.channels().whole_range();
        Ok((Self::frames(&self.train, r.clone())?, Self::frames(&self.validation, r)?))
    }

    pub fn thumb_frames(&self) -> Result<(Matrix, Matrix)> {
        let r = self.stats.channels().thumb_range();
        Ok((Self::frames(&self.train, r.clone())?, Self::frames(&self.validation, r)?))
    }
}

/// Resamples to the model rate, clips tactile channels, fits the scaler on
/// the training split and normalizes both splits.
pub fn prepare(config: &RunConfig, demos: &Demonstrations) -> Result<Prepared> {
    let p = &config.preprocess;
    let val = validation_indices(&demos.scenarios, p.validation_episodes);
    if val.is_empty() || val.len() >= demos.episodes.len() {
        return Err(Error::Config("validation split must leave both sets non-empty".into()));
    }
    let low: Vec<RawEpisode> = demos
        .episodes
        .iter()
        .map(|e| clip_tactile(&resample(e, p.target_rate)?, p.clip_bound))
        .collect::<Result<_>>()?;
    let (mut train_raw, mut val_raw) = (Vec::new(), Vec::new());
    for (i, e) in low.into_iter().enumerate() {
        if val.binary_search(&i).is_ok() {
            val_raw.push(e);
        } else {
            train_raw.push(e);
        }
    }
    let stats = fit_scaler(&train_raw, p.clip_bound)?;
    let apply = |v: &[RawEpisode]| v.iter().map(|e| stats.apply(e)).collect::<Result<Vec<_>>>();
    Ok(Prepared { train: apply(&train_raw)?, validation: apply(&val_raw)?, stats, validation_indices: val })
}

/// Which tactile stream an encoder compresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Whole,
    Thumb,
}

impl EncoderKind {
    pub const BOTH: [EncoderKind; 2] = [EncoderKind::Whole, EncoderKind::Thumb];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Whole => "whole",
            Self::Thumb => "thumb",
        }
    }
}

/// Trains one encoder on the normalized frames of its stream.
pub fn train_encoder(config: &RunConfig, prepared: &Prepared, kind: EncoderKind) -> Result<TrainedAe> {
    let ae = &config.autoencoder;
    let ch = prepared.stats.channels();
    let ((train, val), width, hidden, salt) = match kind {
        EncoderKind::Whole => (prepared.whole_frames()?, ch.whole, &ae.whole_hidden, 0xAE01),
        EncoderKind::Thumb => (prepared.thumb_frames()?, ch.thumb, &ae.thumb_hidden, 0xAE02),
    };
    train_ae(&train, &val, &AeConfig::new(width, hidden.clone(), ae.latent_dim), &ae.train, config.seed ^ salt)
}

/// Shifted episodes and their model-space sequences.
#[derive(Clone, Debug)]
pub struct Sequences {
    pub train_processed: Vec<ProcessedEpisode>,
    pub train: Vec<SequenceData>,
    pub validation: Vec<SequenceData>,
}

pub fn sequences(config: &RunConfig, prepared: &Prepared, encoders: &TactileEncoders) -> Result<Sequences> {
    let h = config.preprocess.horizon;
    let train_processed: Vec<ProcessedEpisode> =
        prepared.train.iter().map(|e| make_targets(e, h)).collect::<Result<_>>()?;
    let train = train_processed.iter().map(|e| SequenceData::from_processed(e, encoders)).collect::<Result<_>>()?;
    let validation = prepared
        .validation
        .iter()
        .map(|e| SequenceData::from_processed(&make_targets(e, h)?, encoders))
        .collect::<Result<_>>()?;
    Ok(Sequences { train_processed, train, validation })
}

pub fn policy_config(config: &RunConfig, encoders: &TactileEncoders, attention: bool) -> PolicyConfig {
    let mut pc = PolicyConfig::new(encoders.layout(config.env.joints), config.policy.hidden_size, attention);
    pc.attention_hidden = config.policy.attention_hidden;
    pc
}

pub fn loss_config(config: &RunConfig, policy: &PolicyConfig, gamma: f64) -> LossConfig {
    let mut loss = LossConfig::new(policy, gamma);
    loss.horizon = config.preprocess.horizon;
    let joints = config.env.joints;
    for j in EMPHASIZED_JOINTS.into_iter().filter(|&j| j < joints) {
        loss.weights[j] = config.policy.emphasis_weight;
    }
    loss
}

/// Seed of one model's training run.
pub fn model_seed(config: &RunConfig, model: AblationModel, repeat: u64) -> u64 {
    // Twins differing only in the constraint share initial weights.
    let arch = if model.attention() { 0xA77 } else { 0xB45 };
    config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ repeat.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ arch
}

/// Trains one ablation variant; `gamma` overrides the configured constraint
/// strength of constrained variants and is ignored otherwise.
pub fn train_model(
    config: &RunConfig,
    seqs: &Sequences,
    encoders: &TactileEncoders,
    model: AblationModel,
    repeat: u64,
    gamma: Option<f64>,
) -> Result<TrainedPolicy> {
    let pc = policy_config(config, encoders, model.attention());
    let g = if model.constraint() { gamma.unwrap_or(config.policy.gamma) } else { 0.0 };
    let loss = loss_config(config, &pc, g);
    let noise =
        NoiseSource { processed: &seqs.train_processed, encoders, sigmas: config.preprocess.noise };
    train_policy(&seqs.train, &seqs.validation, &pc, &loss, &config.policy.train, model_seed(config, model, repeat), Some(&noise))
}

/// One closed-loop trial.
#[derive(Clone, Debug)]
pub struct Trial {
    pub scenario: Scenario,
    pub trace: RolloutTrace,
}

impl Trial {
    pub fn outcome(&self) -> &EvalOutcome {
        &self.trace.outcome
    }
}

pub fn trial_seed(config: &RunConfig, scenario: &Scenario, repeat: u64) -> u64 {
    (config.seed ^ 0x7E57).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ scenario.seed_offset() ^ repeat.wrapping_mul(0x5851_F42D)
}

/// Runs `scenarios` with up to `jobs` concurrent rollouts; results keep the
/// scenario order.
pub fn evaluate(
    config: &RunConfig,
    controller: Controller<'_>,
    scenarios: &[Scenario],
    repeat: u64,
    jobs: usize,
) -> Result<Vec<Trial>> {
    let run = |sc: &Scenario| -> Result<Trial> {
        let trace = controller.rollout(
            &config.env,
            &sc.object()?,
            sc.initial_pos,
            trial_seed(config, sc, repeat),
            &config.eval.judge,
        )?;
        Ok(Trial { scenario: sc.clone(), trace })
    };
    let jobs = jobs.max(1).min(scenarios.len().max(1));
    if jobs == 1 {
        return scenarios.iter().map(run).collect();
    }
    let chunk = scenarios.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = scenarios
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(scenarios.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::State("evaluation worker panicked".into()))??);
        }
        Ok(out)
    })
}

/// Everything downstream of the demonstrations that the models share.
#[derive(Clone, Debug)]
pub struct Foundation {
    pub demos: Demonstrations,
    pub prepared: Prepared,
    pub whole: TrainedAe,
    pub thumb: TrainedAe,
    pub encoders: TactileEncoders,
    pub sequences: Sequences,
}

pub fn build_foundation(config: &RunConfig) -> Result<Foundation> {
    config.validate()?;
    let demos = generate(config)?;
    let prepared = prepare(config, &demos)?;
    let whole = train_encoder(config, &prepared, EncoderKind::Whole)?;
    let thumb = train_encoder(config, &prepared, EncoderKind::Thumb)?;
    let encoders = TactileEncoders { whole: whole.model.clone(), thumb: thumb.model.clone() };
    let sequences = sequences(config, &prepared, &encoders)?;
    Ok(Foundation { demos, prepared, whole, thumb, encoders, sequences })
}

/// Trained model and its trials for one `(model, repeat)` cell.
#[derive(Clone, Debug)]
pub struct ModelRun {
    pub model: AblationModel,
    pub repeat: u64,
    pub trained: TrainedPolicy,
    pub trials: Vec<Trial>,
}

/// Trains and evaluates every variant for every configured seed.
pub fn run_ablation(
    config: &RunConfig,
    foundation: &Foundation,
    mut progress: impl FnMut(&ModelRun),
) -> Result<Vec<ModelRun>> {
    let scenarios = evaluation_scenarios();
    let mut runs = Vec::new();
    for &repeat in &config.eval.seeds {
        for model in AblationModel::ALL {
            let trained = train_model(config, &foundation.sequences, &foundation.encoders, model, repeat, None)?;
            let controller =
                Controller { policy: &trained.policy, encoders: &foundation.encoders, stats: &foundation.prepared.stats };
            let trials = evaluate(config, controller, &scenarios, repeat, config.eval.jobs)?;
            let run = ModelRun { model, repeat, trained, trials };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}
