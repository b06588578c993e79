//! Raw episodes → normalized, target-shifted, noise-augmented sequences.
//!
//! Channel order of a processed frame is `joints, torques, tactile_whole,
//! tactile_thumb`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episode::{RawEpisode, SubTask, AXES};
use crate::error::{Error, Result};
use crate::math::Matrix;

pub const SCALE_LOW: f64 = 0.1;
pub const SCALE_HIGH: f64 = 0.9;

/// Keeps every `sample_rate / target_rate`-th frame starting at frame 0.
pub fn resample(ep: &RawEpisode, target_rate: u32) -> Result<RawEpisode> {
    if target_rate == 0 || ep.sample_rate % target_rate != 0 {
        return Err(Error::Config(format!(
            "target rate {target_rate} Hz does not divide sample rate {} Hz",
            ep.sample_rate
        )));
    }
    let k = (ep.sample_rate / target_rate) as usize;
    if k == 1 {
        return Ok(ep.clone());
    }
    let kept: Vec<usize> = (0..ep.len()).step_by(k).collect();
    let pick = |m: &Matrix| {
        let mut out = Matrix::zeros(kept.len(), m.cols());
        for (i, &t) in kept.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(t));
        }
        out
    };
    let last = kept.len().saturating_sub(1);
    let mut marks: Vec<usize> = ep.switch_marks.iter().map(|&m| m.div_ceil(k).min(last)).collect();
    marks.dedup();
    Ok(RawEpisode {
        sample_rate: target_rate,
        joints: pick(&ep.joints),
        torques: pick(&ep.torques),
        tactile_whole: pick(&ep.tactile_whole),
        tactile_thumb: pick(&ep.tactile_thumb),
        labels: kept.iter().map(|&t| ep.labels[t]).collect(),
        switch_marks: marks,
        layout: ep.layout.clone(),
    })
}

/// Clamps both tactile streams to `[-bound, bound]`.
pub fn clip_tactile(ep: &RawEpisode, bound: f64) -> Result<RawEpisode> {
    if !(bound > 0.0) {
        return Err(Error::Config(format!("clip bound must be positive, got {bound}")));
    }
    let mut out = ep.clone();
    out.tactile_whole.map_inplace(|v| v.clamp(-bound, bound));
    out.tactile_thumb.map_inplace(|v| v.clamp(-bound, bound));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerJoint,
    PerPatchAxis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleGroup {
    pub name: String,
    pub grouping: Grouping,
    pub min: f64,
    pub max: f64,
    /// `min == max` on the fitting set; every value maps to 0.5.
    pub degenerate: bool,
}

impl ScaleGroup {
    #[inline]
    fn scale(&self, v: f64) -> f64 {
        if self.degenerate {
            0.5
        } else {
            SCALE_LOW + (SCALE_HIGH - SCALE_LOW) * ((v - self.min) / (self.max - self.min))
        }
    }

    #[inline]
    fn unscale(&self, s: f64) -> f64 {
        if self.degenerate {
            self.min
        } else {
            self.min + (s - SCALE_LOW) * (self.max - self.min) / (SCALE_HIGH - SCALE_LOW)
        }
    }
}

/// Per-group min/max fitted on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub groups: Vec<ScaleGroup>,
    /// Group index of every processed channel.
    pub channel_group: Vec<usize>,
    pub clip_bound: f64,
    pub joints: usize,
    pub whole_dim: usize,
    pub thumb_dim: usize,
}

/// Processed-frame channel ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub joints: usize,
    pub whole: usize,
    pub thumb: usize,
}

impl ChannelLayout {
    pub fn width(&self) -> usize {
        2 * self.joints + self.whole + self.thumb
    }
    pub fn joints_range(&self) -> std::ops::Range<usize> {
        0..self.joints
    }
    pub fn torques_range(&self) -> std::ops::Range<usize> {
        self.joints..2 * self.joints
    }
    pub fn whole_range(&self) -> std::ops::Range<usize> {
        2 * self.joints..2 * self.joints + self.whole
    }
    pub fn thumb_range(&self) -> std::ops::Range<usize> {
        2 * self.joints + self.whole..self.width()
    }
}

/// Concatenates the four streams into one `T × C` matrix.
pub fn frames(ep: &RawEpisode) -> Result<Matrix> {
    Matrix::hstack(&[&ep.joints, &ep.torques, &ep.tactile_whole, &ep.tactile_thumb])
}

/// Fits per-joint, per-torque, per-(patch, axis) and per-thumb-axis ranges.
/// Episodes are expected to be clipped already; `clip_bound` is recorded.
pub fn fit_scaler(episodes: &[RawEpisode], clip_bound: f64) -> Result<NormalizationStats> {
    let first = episodes.first().ok_or_else(|| Error::Config("fit_scaler needs at least one episode".into()))?;
    let j = first.joint_dim();
    let layout = &first.layout;
    let (dw, dt) = (layout.whole_dim(), layout.thumb_dim());
    let axis_name = ["x", "y", "z"];

    let mut groups = Vec::new();
    let mut channel_group = Vec::with_capacity(2 * j + dw + dt);
    let mut new_group = |name: String, grouping| {
        groups.push(ScaleGroup { name, grouping, min: f64::INFINITY, max: f64::NEG_INFINITY, degenerate: false });
        groups.len() - 1
    };
    for i in 0..j {
        channel_group.push(new_group(format!("joint{i}"), Grouping::PerJoint));
    }
    for i in 0..j {
        channel_group.push(new_group(format!("torque{i}"), Grouping::PerJoint));
    }
    let whole_ids: Vec<usize> = (0..layout.patches * AXES)
        .map(|g| new_group(format!("whole.patch{}.{}", g / AXES, axis_name[g % AXES]), Grouping::PerPatchAxis))
        .collect();
    for c in 0..dw {
        let (p, a) = layout.patch_axis(c);
        channel_group.push(whole_ids[p * AXES + a]);
    }
    let thumb_ids: Vec<usize> =
        (0..AXES).map(|a| new_group(format!("thumb.{}", axis_name[a]), Grouping::PerPatchAxis)).collect();
    for &c in &layout.thumb_columns {
        channel_group.push(thumb_ids[c % AXES]);
    }

    for ep in episodes {
        if ep.joint_dim() != j || ep.layout != *layout {
            return Err(Error::Config("episodes disagree on channel layout".into()));
        }
        let f = frames(ep)?;
        for t in 0..f.rows() {
            for (c, &v) in f.row(t).iter().enumerate() {
                let g = &mut groups[channel_group[c]];
                g.min = g.min.min(v);
                g.max = g.max.max(v);
            }
        }
    }
    for g in &mut groups {
        if !(g.min.is_finite() && g.max.is_finite()) {
            return Err(Error::Config(format!("channel group `{}` saw no finite data", g.name)));
        }
        g.degenerate = g.min == g.max;
    }
    Ok(NormalizationStats { groups, channel_group, clip_bound, joints: j, whole_dim: dw, thumb_dim: dt })
}

impl NormalizationStats {
    pub fn channels(&self) -> ChannelLayout {
        ChannelLayout { joints: self.joints, whole: self.whole_dim, thumb: self.thumb_dim }
    }

    /// Names of groups whose fitting range was empty.
    pub fn degenerate_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| g.degenerate).map(|g| g.name.as_str()).collect()
    }

    /// Scales one full frame in place.
    pub fn scale_frame(&self, frame: &mut [f64]) {
        for (c, v) in frame.iter_mut().enumerate() {
            *v = self.groups[self.channel_group[c]].scale(*v);
        }
    }

    /// Scales values of channels `offset..offset + values.len()`.
    pub fn scale_channels(&self, offset: usize, values: &[f64]) -> Vec<f64> {
        values.iter().enumerate().map(|(i, &v)| self.groups[self.channel_group[offset + i]].scale(v)).collect()
    }

    /// Exact inverse of [`Self::scale_channels`] for non-degenerate channels.
    pub fn unscale(&self, offset: usize, values: &[f64]) -> Vec<f64> {
        values.iter().enumerate().map(|(i, &s)| self.groups[self.channel_group[offset + i]].unscale(s)).collect()
    }

    /// Clips tactile channels and scales every channel; targets start out
    /// equal to inputs (horizon 0).
    pub fn apply(&self, ep: &RawEpisode) -> Result<ProcessedEpisode> {
        let clipped = clip_tactile(ep, self.clip_bound)?;
        let mut f = frames(&clipped)?;
        if f.cols() != self.channel_group.len() {
            return Err(Error::shape("apply_scaler", f.shape(), (1, self.channel_group.len())));
        }
        for t in 0..f.rows() {
            self.scale_frame(f.row_mut(t));
        }
        Ok(ProcessedEpisode {
            targets: f.clone(),
            inputs: f,
            horizon: 0,
            labels: ep.labels.clone(),
            switch_marks: ep.switch_marks.clone(),
            channels: self.channels(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedEpisode {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub horizon: usize,
    pub labels: Vec<SubTask>,
    pub switch_marks: Vec<usize>,
    pub channels: ChannelLayout,
}

impl ProcessedEpisode {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Inputs keep frames `[0, T − h)`, targets are frames `[h, T)`.
pub fn make_targets(ep: &ProcessedEpisode, horizon: usize) -> Result<ProcessedEpisode> {
    if ep.horizon != 0 {
        return Err(Error::State("targets already shifted".into()));
    }
    let t = ep.len();
    if horizon >= t {
        return Err(Error::Config(format!("horizon {horizon} leaves no frames of a {t}-frame episode")));
    }
    let n = t - horizon;
    Ok(ProcessedEpisode {
        inputs: ep.inputs.row_range(0, n),
        targets: ep.inputs.row_range(horizon, n),
        horizon,
        labels: ep.labels[..n].to_vec(),
        switch_marks: ep.switch_marks.iter().copied().filter(|&m| m < n).collect(),
        channels: ep.channels,
    })
}

/// Per-modality Gaussian noise standard deviations (normalized units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSigmas {
    pub joints: f64,
    pub torques: f64,
    pub tactile_whole: f64,
    pub tactile_thumb: f64,
}

impl Default for NoiseSigmas {
    fn default() -> Self {
        Self { joints: 0.01, torques: 0.01, tactile_whole: 0.02, tactile_thumb: 0.02 }
    }
}

/// Adds seeded Gaussian noise to the inputs; targets stay clean.
pub fn add_noise(ep: &ProcessedEpisode, sigmas: NoiseSigmas, seed: u64) -> Result<ProcessedEpisode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ep.clone();
    let ch = ep.channels;
    let bands = [
        (ch.joints_range(), sigmas.joints),
        (ch.torques_range(), sigmas.torques),
        (ch.whole_range(), sigmas.tactile_whole),
        (ch.thumb_range(), sigmas.tactile_thumb),
    ];
    for (_, s) in &bands {
        if !(*s >= 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be finite and nonnegative, got {s}")));
        }
    }
    for t in 0..out.inputs.rows() {
        let row = out.inputs.row_mut(t);
        for (range, s) in &bands {
            if *s == 0.0 {
                continue;
            }
            let normal = Normal::new(0.0, *s).expect("validated sigma");
            for v in &mut row[range.clone()] {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::episode::tests::tiny_episode;
    use crate::episode::TactileLayout;

    fn raw(t: usize, rate: u32, marks: Vec<usize>) -> RawEpisode {
        let layout = TactileLayout { patches: 1, taxels_per_patch: 1, thumb_columns: vec![0, 1, 2] };
        RawEpisode {
            sample_rate: rate,
            joints: Matrix::from_fn(t, 1, |r, _| r as f64),
            torques: Matrix::from_fn(t, 1, |r, _| -(r as f64)),
            tactile_whole: Matrix::from_fn(t, 3, |r, c| (r * 3 + c) as f64),
            tactile_thumb: Matrix::from_fn(t, 3, |r, c| (r * 3 + c) as f64),
            labels: vec![SubTask::Grasp; t],
            switch_marks: marks,
            layout,
        }
    }

    #[test]
    fn resample_decimates() {
        let ep = raw(1000, 100, vec![57, 300]);
        let r = resample(&ep, 10).unwrap();
        assert_eq!(r.len(), 100);
        assert_eq!(r.sample_rate, 10);
        assert_eq!(r.joints.get(7, 0), 70.0);
        assert_eq!(r.switch_marks, vec![6, 30]);
        r.validate().unwrap();
    }

    #[test]
    fn resample_snap_matches_enumeration() {
        // enumeration oracle: the first kept frame at or after the raw mark
        let k = 10;
        for m in 0..95 {
            let ep = raw(95, 100, vec![m]);
            let r = resample(&ep, 10).unwrap();
            let kept: Vec<usize> = (0..95).step_by(k).collect();
            let want = kept.iter().position(|&f| f >= m).unwrap_or(kept.len() - 1);
            assert_eq!(r.switch_marks, vec![want], "mark {m}");
        }
    }

    #[test]
    fn resample_identity_and_bad_rates() {
        let ep = raw(10, 10, vec![3]);
        assert_eq!(resample(&ep, 10).unwrap(), ep);
        assert!(matches!(resample(&raw(10, 100, vec![]), 30), Err(Error::Config(_))));
    }

    #[test]
    fn clip_only_touches_tactile() {
        let mut ep = raw(2, 10, vec![]);
        ep.tactile_whole.set(0, 0, 1500.0);
        ep.tactile_whole.set(0, 1, -3.0);
        ep.tactile_thumb.set(1, 2, -2000.0);
        ep.joints.set(0, 0, 1500.0);
        let c = clip_tactile(&ep, 1000.0).unwrap();
        assert_eq!(c.tactile_whole.get(0, 0), 1000.0);
        assert_eq!(c.tactile_whole.get(0, 1), -3.0);
        assert_eq!(c.tactile_thumb.get(1, 2), -1000.0);
        assert_eq!(c.joints.get(0, 0), 1500.0);
        assert!(clip_tactile(&ep, 0.0).is_err());
    }

    #[test]
    fn scaler_bounds_and_midpoint() {
        let ep = tiny_episode();
        let stats = fit_scaler(&[ep.clone()], 1000.0).unwrap();
        // joints + torques + 2 patches x 3 axes + 3 thumb axes
        assert_eq!(stats.groups.len(), 2 + 2 + 6 + 3);
        let p = stats.apply(&ep).unwrap();
        for c in 0..p.inputs.cols() {
            let col: Vec<f64> = (0..p.len()).map(|t| p.inputs.get(t, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo >= 0.1 && hi <= 0.9, "channel {c}: {lo}..{hi}");
        }
        let g = &stats.groups[0];
        let mid = (g.min + g.max) / 2.0;
        assert_eq!(stats.scale_channels(0, &[g.min]), [SCALE_LOW]);
        assert_eq!(stats.scale_channels(0, &[g.max]), [SCALE_HIGH]);
        assert!((stats.scale_channels(0, &[mid])[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_channel_maps_to_half() {
        let mut ep = tiny_episode();
        for t in 0..ep.len() {
            ep.torques.set(t, 1, 4.0);
        }
        let stats = fit_scaler(&[ep.clone()], 1000.0).unwrap();
        assert_eq!(stats.degenerate_groups(), vec!["torque1"]);
        let p = stats.apply(&ep).unwrap();
        assert!((0..p.len()).all(|t| p.inputs.get(t, 3) == 0.5));
    }

    #[test]
    fn empty_fit_is_config_error() {
        assert!(matches!(fit_scaler(&[], 1000.0), Err(Error::Config(_))));
    }

    #[test]
    fn targets_are_shifted_inputs() {
        let ep = tiny_episode();
        let stats = fit_scaler(&[ep.clone()], 1000.0).unwrap();
        let p = make_targets(&stats.apply(&ep).unwrap(), 2).unwrap();
        assert_eq!(p.len(), 2);
        let full = stats.apply(&ep).unwrap();
        assert_eq!(p.targets.row(0), full.inputs.row(2));
        assert!(p.switch_marks.is_empty());
        assert!(make_targets(&full, 4).is_err());
    }

    #[test]
    fn zero_noise_is_identity_and_noise_is_seeded() {
        let ep = tiny_episode();
        let stats = fit_scaler(&[ep.clone()], 1000.0).unwrap();
        let p = make_targets(&stats.apply(&ep).unwrap(), 2).unwrap();
        let zero = NoiseSigmas { joints: 0.0, torques: 0.0, tactile_whole: 0.0, tactile_thumb: 0.0 };
        assert_eq!(add_noise(&p, zero, 1).unwrap(), p);
        let a = add_noise(&p, NoiseSigmas::default(), 9).unwrap();
        let b = add_noise(&p, NoiseSigmas::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inputs, p.inputs);
        assert_eq!(a.targets, p.targets);
    }

    proptest! {
        #[test]
        fn fitted_extremes_scale_exactly(min in -1e3f64..1e3, span in 1e-6f64..1e3) {
            let g = ScaleGroup { name: "g".into(), grouping: Grouping::PerJoint, min, max: min + span, degenerate: false };
            prop_assert_eq!(g.scale(g.min), SCALE_LOW);
            prop_assert_eq!(g.scale(g.max), SCALE_HIGH);
        }

        #[test]
        fn scale_roundtrip(min in -1e3f64..1e3, span in 1e-3f64..1e3, u in 0.0f64..1.0) {
            let g = ScaleGroup { name: "g".into(), grouping: Grouping::PerJoint, min, max: min + span, degenerate: false };
            let x = min + u * span;
            let back = g.unscale(g.scale(x));
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
        }

        #[test]
        fn resample_keeps_ceil_frames(t in 1usize..400, k in 1u32..12) {
            let ep = raw(t, 10 * k, vec![]);
            let r = resample(&ep, 10).unwrap();
            prop_assert_eq!(r.len(), t.div_ceil(k as usize));
            for i in 1..r.len() {
                prop_assert!(r.joints.get(i, 0) > r.joints.get(i - 1, 0));
            }
        }
    }
}
