//! Pipeline stages over a run directory. Each stage reads its inputs from
//! the directory, fails with a dependency error when one is missing and
//! records everything it writes in the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use aelstm::analysis::{
    attention_summary, attention_windows, build_table, knn_accuracy, loop_gap, parse_results_csv, projection_csv,
    results_csv, AttentionWindows, Pca, TrialRecord,
};
use aelstm::artifacts::{read_json, RunDir};
use aelstm::autoencoder::{curve_csv, Autoencoder};
use aelstm::config::RunConfig;
use aelstm::env::{evaluation_scenarios, scenarios_from_csv, scenarios_to_csv, Scenario};
use aelstm::episode::{RawEpisode, SubTask};
use aelstm::math::{Checkpoint, Matrix};
use aelstm::pipeline::{
    evaluate, prepare, sequences, train_encoder, train_model, AblationModel, Demonstrations, EncoderKind, Prepared,
    Trial,
};
use aelstm::policy::{attention_trace_csv, hidden_trace_csv, parse_trace_csv, Controller, Policy, TactileEncoders};
use aelstm::preprocess::NormalizationStats;
use aelstm::{Error, Result};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "AELSTM_OUT";

/// Samples in the post-attempt attention window (2 s at 10 Hz).
pub const ATTEMPT_WINDOW: usize = 20;

/// Run directory: `--out`, else `$AELSTM_OUT/<output_dir>`, else `output_dir`.
pub fn resolve_out(config: &RunConfig, flag: Option<&Path>) -> PathBuf {
    match (flag, std::env::var_os(OUT_ENV)) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(root)) => PathBuf::from(root).join(&config.output_dir),
        (None, None) => PathBuf::from(&config.output_dir),
    }
}

/// Configuration and run directory shared by every stage.
pub struct Stage {
    pub config: RunConfig,
    pub run: RunDir,
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[aelstm] {}", msg.as_ref());
}

pub fn episode_path(i: usize) -> String {
    format!("data/episodes/ep_{i:03}.txt")
}

pub fn policy_path(model: AblationModel, repeat: u64) -> String {
    format!("policy/model_{model}_r{repeat}.ckpt")
}

pub fn results_path(repeat: u64) -> String {
    format!("eval/results_r{repeat}.csv")
}

pub fn trace_dir(model: AblationModel, repeat: u64) -> String {
    format!("eval/traces/r{repeat}/{model}")
}

/// File-name-safe scenario label, e.g. `A_p0.75_t1` or `B_m0.25_t0`.
pub fn scenario_slug(sc: &Scenario) -> String {
    let sign = if sc.initial_pos < 0.0 { 'm' } else { 'p' };
    format!("{}_{sign}{:.2}_t{}", sc.object_id, sc.initial_pos.abs(), sc.trial)
}

impl Stage {
    pub fn open(config: RunConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        let run = RunDir::create(out, &config.hash())?;
        run.write_text("config.toml", "config", &config.to_toml())?;
        Ok(Self { config, run })
    }

    /// Records the expert demonstrations and the scenario lists.
    pub fn generate(&self) -> Result<Demonstrations> {
        let demos = aelstm::pipeline::generate(&self.config)?;
        self.run.write_text("data/scenarios.csv", "scenarios", &scenarios_to_csv(&demos.scenarios))?;
        self.run.write_text("data/eval_scenarios.csv", "scenarios", &scenarios_to_csv(&evaluation_scenarios()))?;
        for (i, ep) in demos.episodes.iter().enumerate() {
            self.run.write_text(&episode_path(i), "episode", &ep.to_text())?;
        }
        log(format!("generated {} demonstrations", demos.episodes.len()));
        Ok(demos)
    }

    pub fn load_demonstrations(&self) -> Result<Demonstrations> {
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let scenarios = scenarios_from_csv(&read(&self.run.require("data/scenarios.csv", "generate")?)?)?;
        let episodes = (0..scenarios.len())
            .map(|i| RawEpisode::load(&self.run.require(&episode_path(i), "generate")?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Demonstrations { scenarios, episodes })
    }

    fn prepared(&self) -> Result<Prepared> {
        prepare(&self.config, &self.load_demonstrations()?)
    }

    /// Fits normalization and trains the requested encoders.
    pub fn train_ae(&self, which: &[EncoderKind]) -> Result<()> {
        let prepared = self.prepared()?;
        self.run.write_json("prep/stats.json", "normalization", &prepared.stats)?;
        for &kind in which {
            let trained = train_encoder(&self.config, &prepared, kind)?;
            let name = kind.as_str();
            let ck = trained.model.to_checkpoint(&format!("autoencoder_{name}"), self.run.config_hash());
            self.run.write_bytes(&format!("ae/{name}.ckpt"), "checkpoint", &ck.to_bytes())?;
            self.run.write_text(&format!("ae/{name}_curve.csv"), "curve", &curve_csv(&trained.curve))?;
            let best = &trained.curve[trained.best_epoch - 1];
            log(format!("{name} encoder: best epoch {} validation mse {:.3e}", trained.best_epoch, best.validation));
        }
        Ok(())
    }

    pub fn load_stats(&self) -> Result<NormalizationStats> {
        read_json(&self.run.require("prep/stats.json", "train-ae")?)
    }

    pub fn load_encoders(&self) -> Result<TactileEncoders> {
        let load = |k: EncoderKind| -> Result<Autoencoder> {
            let p = self.run.require(&format!("ae/{}.ckpt", k.as_str()), "train-ae")?;
            Autoencoder::from_checkpoint(&Checkpoint::load(&p)?)
        };
        Ok(TactileEncoders { whole: load(EncoderKind::Whole)?, thumb: load(EncoderKind::Thumb)? })
    }

    /// Trains one ablation variant; returns its validation loop gap.
    /// Trains one variant; `gamma` overrides the configured constraint
    /// strength of constrained variants.
    pub fn train_policy(&self, model: AblationModel, repeat: u64, gamma: Option<f64>) -> Result<f64> {
        let encoders = self.load_encoders()?;
        self.load_stats()?;
        let seqs = sequences(&self.config, &self.prepared()?, &encoders)?;
        let trained = train_model(&self.config, &seqs, &encoders, model, repeat, gamma)?;
        for w in &trained.warnings {
            log(format!("warning: {w}"));
        }
        let ck = trained.policy.to_checkpoint(self.run.config_hash(), Some(trained.optimizer.clone()));
        self.run.write_bytes(&policy_path(model, repeat), "checkpoint", &ck.to_bytes())?;
        self.run.write_text(
            &format!("policy/model_{model}_r{repeat}_curve.csv"),
            "curve",
            &curve_csv(&trained.curve),
        )?;
        let hidden: Vec<Matrix> =
            seqs.validation.iter().map(|s| trained.policy.teacher_forced(s).map(|f| f.hidden)).collect::<Result<_>>()?;
        let switches: Vec<_> = seqs.validation.iter().map(|s| s.switches.clone()).collect();
        let gap = loop_gap(&hidden, &switches)?;
        let g = if model.constraint() { gamma.unwrap_or(self.config.policy.gamma) } else { 0.0 };
        log(format!("model {model} r{repeat} (gamma {g}): best epoch {}, validation loop gap {gap:.4}", trained.best_epoch));
        Ok(gap)
    }

    pub fn load_policy(&self, model: AblationModel, repeat: u64) -> Result<Policy> {
        let p = self.run.require(&policy_path(model, repeat), "train-policy")?;
        Policy::from_checkpoint(&Checkpoint::load(&p)?)
    }

    /// Checkpointed `(model, repeat)` cells in configured order.
    pub fn available_policies(&self) -> Vec<(AblationModel, u64)> {
        let mut v = Vec::new();
        for &r in &self.config.eval.seeds {
            for m in AblationModel::ALL {
                if self.run.path(&policy_path(m, r)).is_file() {
                    v.push((m, r));
                }
            }
        }
        v
    }

    /// Closed-loop trials of the given cells; writes per-repeat results and
    /// per-trial traces.
    pub fn evaluate(&self, cells: &[(AblationModel, u64)], jobs: usize) -> Result<Vec<TrialRecord>> {
        if cells.is_empty() {
            let first = self.config.eval.seeds[0];
            return Err(Error::MissingArtifact {
                path: self.run.path(&policy_path(AblationModel::I, first)),
                stage: "train-policy".into(),
            });
        }
        let stats = self.load_stats()?;
        let encoders = self.load_encoders()?;
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let scenarios = scenarios_from_csv(&read(&self.run.require("data/eval_scenarios.csv", "generate")?)?)?;
        let mut all = Vec::new();
        let mut repeats: Vec<u64> = cells.iter().map(|c| c.1).collect();
        repeats.dedup();
        for repeat in repeats {
            let mut records = Vec::new();
            for &(model, _) in cells.iter().filter(|c| c.1 == repeat) {
                let policy = self.load_policy(model, repeat)?;
                let ctl = Controller { policy: &policy, encoders: &encoders, stats: &stats };
                let trials = evaluate(&self.config, ctl, &scenarios, repeat, jobs)?;
                self.write_traces(model, repeat, &trials)?;
                let rec = records_of(model, &trials);
                let done = rec.iter().filter(|r| r.result.opened()).count();
                log(format!("model {model} r{repeat}: cap opened in {done}/{} trials", rec.len()));
                records.extend(rec);
            }
            self.run.write_text(&results_path(repeat), "results", &results_csv(&records))?;
            all.extend(records);
        }
        Ok(all)
    }

    fn write_traces(&self, model: AblationModel, repeat: u64, trials: &[Trial]) -> Result<()> {
        let dir = trace_dir(model, repeat);
        for t in trials {
            let slug = scenario_slug(&t.scenario);
            self.run.write_text(&format!("{dir}/{slug}_hidden.csv"), "hidden_trace", &hidden_trace_csv(&t.trace.hidden, &t.trace.labels))?;
            if let Some(a) = &t.trace.attention {
                self.run.write_text(&format!("{dir}/{slug}_attention.csv"), "attention_trace", &attention_trace_csv(a, &t.trace.labels))?;
            }
        }
        Ok(())
    }
}

pub fn records_of(model: AblationModel, trials: &[Trial]) -> Vec<TrialRecord> {
    trials
        .iter()
        .map(|t| TrialRecord {
            model_id: model.to_string(),
            scenario: t.scenario.label(),
            trained: t.scenario.trained,
            result: t.outcome().result,
            steps: t.outcome().steps_used,
        })
        .collect()
}

/// `(name, values, labels)` of every `*{suffix}` trace in `dir`, sorted by name.
pub fn read_traces(dir: &Path, suffix: &str) -> Result<Vec<(String, Matrix, Vec<SubTask>)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::MissingArtifact { path: dir.join(format!("*{suffix}")), stage: "evaluate".into() });
    }
    names
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let (m, l) = parse_trace_csv(&text).map_err(|e| match e {
                Error::Format { detail, .. } => Error::format(p.display().to_string(), detail),
                other => other,
            })?;
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().trim_end_matches(suffix).to_string();
            Ok((name, m, l))
        })
        .collect()
}

/// PCA result over a set of hidden traces.
#[derive(Clone, Debug)]
pub struct PcaReport {
    pub csv: String,
    pub explained_ratio: Vec<f64>,
    /// Leave-one-out 5-NN phase accuracy in the first two components.
    pub knn5: f64,
    pub steps: usize,
}

/// Projects hidden traces on their first two principal axes, fitted over
/// all traces or separately per trace.
pub fn pca_report(traces: &[(String, Matrix, Vec<SubTask>)], per_trial: bool) -> Result<PcaReport> {
    let mut csv = String::from("trial,");
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let fit_all = |mats: &[&Matrix]| -> Result<Pca> {
        Pca::fit(&Matrix::vstack(&mats.iter().map(|m| (*m).clone()).collect::<Vec<_>>())?)
    };
    let global = if per_trial { None } else { Some(fit_all(&traces.iter().map(|t| &t.1).collect::<Vec<_>>())?) };
    let mut ratio = global.as_ref().map(Pca::explained_ratio).unwrap_or_default();
    let mut header_done = false;
    for (name, h, l) in traces {
        let pca = match &global {
            Some(p) => p.clone(),
            None => {
                let p = fit_all(&[h])?;
                if ratio.is_empty() {
                    ratio = p.explained_ratio();
                }
                p
            }
        };
        let k = 2.min(pca.dim());
        let proj = pca.project(h, k)?;
        let body = projection_csv(&proj, l);
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        if !header_done {
            csv.push_str(header);
            csv.push('\n');
            header_done = true;
        }
        for line in lines {
            let _ = writeln!(csv, "{name},{line}");
        }
        coords.push(proj);
        labels.extend_from_slice(l);
    }
    let all = Matrix::vstack(&coords)?;
    let knn5 = knn_accuracy(&all, &labels, 5)?;
    Ok(PcaReport { csv, explained_ratio: ratio, knn5, steps: labels.len() })
}

/// Summary CSV followed by the window statistics.
pub fn attention_report(traces: &[(String, Matrix, Vec<SubTask>)]) -> Result<(String, AttentionWindows)> {
    let pairs: Vec<(Matrix, Vec<SubTask>)> = traces.iter().map(|(_, m, l)| (m.clone(), l.clone())).collect();
    let summary = attention_summary(&pairs)?;
    let w = attention_windows(&pairs, ATTEMPT_WINDOW)?;
    Ok((summary.to_csv(), w))
}

/// Reads one results CSV, or every `results*.csv` of a directory.
pub fn read_results(input: &Path) -> Result<Vec<TrialRecord>> {
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("results") && n.ends_with(".csv"))
            })
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() || !files[0].is_file() {
        return Err(Error::MissingArtifact { path: input.join("results_r*.csv"), stage: "evaluate".into() });
    }
    let mut out = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        out.extend(parse_results_csv(&text)?);
    }
    Ok(out)
}

/// Every stage for every configured repeat, then the analyses.
pub fn reproduce_all(stage: &Stage, jobs: usize) -> Result<String> {
    let cfg = &stage.config;
    stage.generate()?;
    stage.train_ae(&EncoderKind::BOTH)?;
    let mut gaps = String::from("model_id,repeat,validation_loop_gap\n");
    let mut cells = Vec::new();
    for &r in &cfg.eval.seeds {
        for m in AblationModel::ALL {
            let gap = stage.train_policy(m, r, None)?;
            let _ = writeln!(gaps, "{m},{r},{gap}");
            cells.push((m, r));
        }
    }
    stage.run.write_text("analysis/loop_gap.csv", "loop_gap", &gaps)?;
    let records = stage.evaluate(&cells, jobs)?;
    let table = build_table(&records);
    stage.run.write_text("analysis/table.csv", "table", &table.to_csv())?;
    let mut summary = table.to_csv();
    for &r in &cfg.eval.seeds {
        let dir = stage.run.path(&trace_dir(AblationModel::I, r));
        let (att, w) = attention_report(&read_traces(&dir, "_attention.csv")?)?;
        stage.run.write_text(&format!("analysis/attention_I_r{r}.csv"), "attention_summary", &att)?;
        let pca = pca_report(&read_traces(&dir, "_hidden.csv")?, false)?;
        stage.run.write_text(&format!("analysis/pca_I_r{r}.csv"), "pca_projection", &pca.csv)?;
        let _ = writeln!(
            summary,
            "r{r}: thumb attention after attempt {:.4} vs {:.4}, joint attention while sliding {:.4} vs {:.4}, 5-NN accuracy {:.3}",
            w.thumb_after_attempt, w.thumb_overall, w.joint_sliding, w.joint_overall, pca.knn5
        );
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_unique_and_plain() {
        let sc = evaluation_scenarios();
        let mut slugs: Vec<String> = sc.iter().map(scenario_slug).collect();
        assert!(slugs.iter().all(|s| s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')));
        slugs.sort();
        slugs.dedup();
        assert_eq!(slugs.len(), sc.len());
    }

    #[test]
    fn out_flag_wins() {
        let c = RunConfig::default();
        assert_eq!(resolve_out(&c, Some(Path::new("/x"))), PathBuf::from("/x"));
    }
}
