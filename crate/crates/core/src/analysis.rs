//! Post-hoc analyses: PCA of hidden traces, nearest-neighbour phase
//! separability, loop gaps, attention summaries and success tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::env::TrialResult;
use crate::episode::SubTask;
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::policy::{pair_distance_sum, SwitchSpec};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One orthonormal axis per row, by decreasing variance.
    pub axes: Matrix,
    /// Variance along each axis (population normalization).
    pub explained: Vec<f64>,
}

impl Pca {
    /// Eigendecomposition of the covariance of the rows of `data`. Each
    /// axis is signed so its first nonzero coefficient is positive.
    pub fn fit(data: &Matrix) -> Result<Self> {
        let (n, d) = data.shape();
        if n < 2 || d == 0 {
            return Err(Error::Dimension(format!("pca needs at least 2 rows, got {n}x{d}")));
        }
        if !data.is_finite() {
            return Err(Error::Numeric { param: "pca input".into(), detail: "non-finite value".into() });
        }
        let x = to_na(data);
        let mean = x.row_mean();
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut axes = Matrix::zeros(d, d);
        let mut explained = Vec::with_capacity(d);
        for (r, &k) in order.iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            let sign = v.iter().find(|c| c.abs() > 1e-12).map_or(1.0, |c| c.signum());
            for c in 0..d {
                axes.set(r, c, sign * v[c]);
            }
            explained.push(eig.eigenvalues[k].max(0.0));
        }
        Ok(Self { mean: mean.iter().copied().collect(), axes, explained })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of `data` on the first `k` axes.
    pub fn project(&self, data: &Matrix, k: usize) -> Result<Matrix> {
        if data.cols() != self.dim() || k > self.dim() {
            return Err(Error::shape("pca project", data.shape(), (k, self.dim())));
        }
        let mut centered = data.clone();
        for r in 0..centered.rows() {
            centered.row_mut(r).iter_mut().zip(&self.mean).for_each(|(v, m)| *v -= m);
        }
        centered.matmul(&self.axes.row_range(0, k).transpose())
    }

    /// Inverse of [`Pca::project`] from however many coordinates are given.
    pub fn reconstruct(&self, coords: &Matrix) -> Result<Matrix> {
        let k = coords.cols();
        if k > self.dim() {
            return Err(Error::shape("pca reconstruct", coords.shape(), (k, self.dim())));
        }
        let mut out = coords.matmul(&self.axes.row_range(0, k))?;
        out.add_row_broadcast(&Matrix::row_vector(&self.mean))?;
        Ok(out)
    }

    /// Fraction of total variance on each axis.
    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.explained.iter().sum();
        self.explained.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect()
    }
}

/// `t,subtask_label,pc1,pc2` rows of a projected trace.
pub fn projection_csv(coords: &Matrix, labels: &[SubTask]) -> String {
    let mut s = String::from("t,subtask_label");
    for k in 0..coords.cols() {
        let _ = write!(s, ",pc{}", k + 1);
    }
    s.push('\n');
    for (t, l) in labels.iter().enumerate().take(coords.rows()) {
        let _ = write!(s, "{t},{l}");
        for v in coords.row(t) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Leave-one-out `k`-nearest-neighbour accuracy of `labels` from the rows
/// of `points`. Votes tie-break toward the nearest neighbour's label.
pub fn knn_accuracy(points: &Matrix, labels: &[SubTask], k: usize) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n || n <= k || k == 0 {
        return Err(Error::Dimension(format!("knn over {n} points with {} labels and k = {k}", labels.len())));
    }
    let dist = |a: usize, b: usize| -> f64 {
        points.row(a).iter().zip(points.row(b)).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut correct = 0;
    let mut near: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        near.clear();
        near.extend((0..n).filter(|&j| j != i).map(|j| (dist(i, j), j)));
        near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &mut near[..k];
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = [0usize; SubTask::ALL.len()];
        for &(_, j) in nearest.iter() {
            votes[labels[j].index()] += 1;
        }
        let best = *votes.iter().max().expect("six phases");
        let winner = nearest.iter().map(|&(_, j)| labels[j]).find(|l| votes[l.index()] == best).expect("k > 0");
        if winner == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Mean `‖H[e] − H[s]‖²` over every switch pair of every trace. Each
/// trace holds `T + 1` hidden rows, the first being the initial state.
pub fn loop_gap(hidden: &[Matrix], switches: &[SwitchSpec]) -> Result<f64> {
    if hidden.len() != switches.len() {
        return Err(Error::Dimension(format!("{} traces with {} switch specs", hidden.len(), switches.len())));
    }
    let mut sum = 0.0;
    let mut pairs = 0;
    for (h, s) in hidden.iter().zip(switches) {
        s.validate(h.rows().saturating_sub(1))?;
        sum += pair_distance_sum(h, s);
        pairs += s.pairs.len();
    }
    if pairs == 0 {
        return Err(Error::State("loop gap needs at least one switch pair".into()));
    }
    Ok(sum / pairs as f64)
}

/// Mean attention per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub by_phase: BTreeMap<SubTask, ([f64; 4], usize)>,
    pub overall: [f64; 4],
    pub steps: usize,
}

impl AttentionSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subtask_label,steps,A_joint,A_torque,A_whole_tactile,A_thumb_tactile\n");
        for (p, (m, n)) in &self.by_phase {
            let _ = writeln!(s, "{p},{n},{},{},{},{}", m[0], m[1], m[2], m[3]);
        }
        let o = self.overall;
        let _ = writeln!(s, "all,{},{},{},{},{}", self.steps, o[0], o[1], o[2], o[3]);
        s
    }
}

fn check_trace(att: &Matrix, labels: &[SubTask]) -> Result<()> {
    if att.cols() != 4 || att.rows() != labels.len() {
        return Err(Error::Dimension(format!("attention trace {:?} with {} labels", att.shape(), labels.len())));
    }
    Ok(())
}

pub fn attention_summary(traces: &[(Matrix, Vec<SubTask>)]) -> Result<AttentionSummary> {
    let mut sums: BTreeMap<SubTask, ([f64; 4], usize)> = BTreeMap::new();
    let mut overall = [0.0; 4];
    let mut steps = 0;
    for (att, labels) in traces {
        check_trace(att, labels)?;
        for (t, &l) in labels.iter().enumerate() {
            let e = sums.entry(l).or_insert(([0.0; 4], 0));
            for (k, a) in att.row(t).iter().enumerate() {
                e.0[k] += a;
                overall[k] += a;
            }
            e.1 += 1;
            steps += 1;
        }
    }
    for (m, n) in sums.values_mut() {
        m.iter_mut().for_each(|v| *v /= *n as f64);
    }
    if steps > 0 {
        overall.iter_mut().for_each(|v| *v /= steps as f64);
    }
    Ok(AttentionSummary { by_phase: sums, overall, steps })
}

/// Attention statistics compared against their whole-trace means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionWindows {
    /// Mean thumb attention over the `window` steps after each try-open segment.
    pub thumb_after_attempt: f64,
    pub thumb_overall: f64,
    /// Mean joint attention on slide steps.
    pub joint_sliding: f64,
    pub joint_overall: f64,
    pub attempt_steps: usize,
    pub slide_steps: usize,
}

impl AttentionWindows {
    pub fn thumb_focus(&self) -> bool {
        self.attempt_steps > 0 && self.thumb_after_attempt > self.thumb_overall
    }

    pub fn joint_focus(&self) -> bool {
        self.slide_steps > 0 && self.joint_sliding > self.joint_overall
    }
}

/// Pools every trace: the post-attempt window starts at the first step
/// after a try-open run and spans `window` steps (truncated at the end).
pub fn attention_windows(traces: &[(Matrix, Vec<SubTask>)], window: usize) -> Result<AttentionWindows> {
    let mut w = AttentionWindows::default();
    let (mut thumb_all, mut joint_all, mut n_all) = (0.0, 0.0, 0usize);
    for (att, labels) in traces {
        check_trace(att, labels)?;
        let mut in_window = vec![false; labels.len()];
        for t in 1..labels.len() {
            if labels[t - 1] == SubTask::TryOpen && labels[t] != SubTask::TryOpen {
                in_window[t..(t + window).min(labels.len())].iter_mut().for_each(|f| *f = true);
            }
        }
        for (t, &l) in labels.iter().enumerate() {
            let a = att.row(t);
            thumb_all += a[3];
            joint_all += a[0];
            n_all += 1;
            if in_window[t] {
                w.thumb_after_attempt += a[3];
                w.attempt_steps += 1;
            }
            if l.is_slide() {
                w.joint_sliding += a[0];
                w.slide_steps += 1;
            }
        }
    }
    if n_all == 0 {
        return Err(Error::State("no attention steps".into()));
    }
    w.thumb_overall = thumb_all / n_all as f64;
    w.joint_overall = joint_all / n_all as f64;
    w.thumb_after_attempt /= w.attempt_steps.max(1) as f64;
    w.joint_sliding /= w.slide_steps.max(1) as f64;
    Ok(w)
}

/// One judged trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub model_id: String,
    pub scenario: String,
    pub trained: bool,
    pub result: TrialResult,
    pub steps: usize,
}

pub fn results_csv(records: &[TrialRecord]) -> String {
    let mut s = String::from("model_id,scenario,trained,result,steps\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.model_id, r.scenario, r.trained, r.result.as_str(), r.steps);
    }
    s
}

pub fn parse_results_csv(text: &str) -> Result<Vec<TrialRecord>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format("results", "empty file"))?;
    if header != "model_id,scenario,trained,result,steps" {
        return Err(Error::format("results", format!("unexpected header `{header}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |d: &str| Error::format("results", format!("row {}: {d}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let result = match f[3] {
                "complete_success" => TrialResult::CompleteSuccess,
                "partial_success" => TrialResult::PartialSuccess,
                "failure" => TrialResult::Failure,
                _ => return Err(bad("unknown result")),
            };
            Ok(TrialRecord {
                model_id: f[0].to_string(),
                scenario: f[1].to_string(),
                trained: f[2].parse().map_err(|_| bad("bad trained flag"))?,
                result,
                steps: f[4].parse().map_err(|_| bad("bad steps"))?,
            })
        })
        .collect()
}

/// Success counts of one model on one object set. `partial` counts every
/// trial in which the cap opened, so it includes the complete successes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableCell {
    pub trials: usize,
    pub complete: usize,
    pub partial: usize,
}

impl TableCell {
    pub fn complete_rate(&self) -> f64 {
        ratio(self.complete, self.trials)
    }

    pub fn partial_rate(&self) -> f64 {
        ratio(self.partial, self.trials)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// `(model_id, trained)` → counts.
    pub cells: BTreeMap<(String, bool), TableCell>,
}

pub fn build_table(records: &[TrialRecord]) -> AblationTable {
    let mut cells: BTreeMap<(String, bool), TableCell> = BTreeMap::new();
    for r in records {
        let c = cells.entry((r.model_id.clone(), r.trained)).or_default();
        c.trials += 1;
        if r.result == TrialResult::CompleteSuccess {
            c.complete += 1;
        }
        if r.result.opened() {
            c.partial += 1;
        }
    }
    AblationTable { cells }
}

impl AblationTable {
    pub fn cell(&self, model: &str, trained: bool) -> TableCell {
        self.cells.get(&(model.to_string(), trained)).copied().unwrap_or_default()
    }

    /// Rates are printed as exact fractions followed by percentages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model_id,object_set,trials,complete,partial,complete_rate,partial_rate\n");
        for ((m, trained), c) in &self.cells {
            let set = if *trained { "trained" } else { "untrained" };
            let _ = writeln!(
                s,
                "{m},{set},{},{},{},{}/{} ({:.1}%),{}/{} ({:.1}%)",
                c.trials,
                c.complete,
                c.partial,
                c.complete,
                c.trials,
                100.0 * c.complete_rate(),
                c.partial,
                c.trials,
                100.0 * c.partial_rate()
            );
        }
        s
    }
}

/// Held-out R² of a ridge regression from rows of `x` to `y`, fitted on
/// `(x_fit, y_fit)` and scored on `(x_test, y_test)`.
pub fn linear_probe_r2(x_fit: &Matrix, y_fit: &[f64], x_test: &Matrix, y_test: &[f64], ridge: f64) -> Result<f64> {
    if x_fit.rows() != y_fit.len() || x_test.rows() != y_test.len() || x_fit.cols() != x_test.cols() {
        return Err(Error::Dimension("linear probe inputs disagree".into()));
    }
    let d = x_fit.cols() + 1;
    let design = |m: &Matrix| DMatrix::from_fn(m.rows(), d, |r, c| if c == 0 { 1.0 } else { m.get(r, c - 1) });
    let a = design(x_fit);
    let mut gram = a.transpose() * &a;
    for i in 1..d {
        gram[(i, i)] += ridge;
    }
    let rhs = a.transpose() * DVector::from_column_slice(y_fit);
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric { param: "linear probe".into(), detail: "singular normal equations".into() })?
        .solve(&rhs);
    let pred = design(x_test) * w;
    let mean = y_test.iter().sum::<f64>() / y_test.len().max(1) as f64;
    let ss_res: f64 = pred.iter().zip(y_test).map(|(p, y)| (p - y) * (p - y)).sum();
    let ss_tot: f64 = y_test.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::State("linear probe target is constant".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}
