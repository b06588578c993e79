//! Multi-modal demonstration episodes and their line-oriented file format.
//!
//! An episode file starts with one header line
//!
//! ```text
//! #aelstm-episode v1 sample_rate=100 joints=8 patches=2 taxels_per_patch=16 tactile_whole=96 tactile_thumb=24 thumb_columns=48,49,... switch_marks=100,220
//! ```
//!
//! followed by one comma-separated record per timestep:
//! `t,subtask_label,joints...,torques...,tactile_whole...,tactile_thumb...`.
//! Floats use Rust's shortest round-trip formatting, so write → read is
//! bit-exact.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

/// One phase of the cap-opening motion flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTask {
    Grasp,
    TryOpen,
    RetractThumb,
    SlideLeft,
    SlideRight,
    Stop,
}

impl SubTask {
    pub const ALL: [SubTask; 6] = [
        SubTask::Grasp,
        SubTask::TryOpen,
        SubTask::RetractThumb,
        SubTask::SlideLeft,
        SubTask::SlideRight,
        SubTask::Stop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubTask::Grasp => "grasp",
            SubTask::TryOpen => "try_open",
            SubTask::RetractThumb => "retract_thumb",
            SubTask::SlideLeft => "slide_left",
            SubTask::SlideRight => "slide_right",
            SubTask::Stop => "stop",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_slide(self) -> bool {
        matches!(self, SubTask::SlideLeft | SubTask::SlideRight)
    }
}

impl fmt::Display for SubTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SubTask::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::format("subtask label", format!("unknown label `{s}`")))
    }
}

/// Column layout of the tactile streams: `patches × taxels × 3 axes` for
/// the whole hand, plus the whole-stream columns duplicated into the thumb
/// stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TactileLayout {
    pub patches: usize,
    pub taxels_per_patch: usize,
    pub thumb_columns: Vec<usize>,
}

pub const AXES: usize = 3;

impl TactileLayout {
    pub fn whole_dim(&self) -> usize {
        self.patches * self.taxels_per_patch * AXES
    }

    pub fn thumb_dim(&self) -> usize {
        self.thumb_columns.len()
    }

    /// `(patch, axis)` of a whole-stream column.
    pub fn patch_axis(&self, column: usize) -> (usize, usize) {
        (column / (self.taxels_per_patch * AXES), column % AXES)
    }
}

/// A recorded demonstration at its native sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEpisode {
    pub sample_rate: u32,
    pub joints: Matrix,
    pub torques: Matrix,
    pub tactile_whole: Matrix,
    pub tactile_thumb: Matrix,
    pub labels: Vec<SubTask>,
    pub switch_marks: Vec<usize>,
    pub layout: TactileLayout,
}

impl RawEpisode {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn joint_dim(&self) -> usize {
        self.joints.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.labels.len();
        let err = |d: String| Err(Error::format("episode", d));
        for (name, m) in [
            ("joints", &self.joints),
            ("torques", &self.torques),
            ("tactile_whole", &self.tactile_whole),
            ("tactile_thumb", &self.tactile_thumb),
        ] {
            if m.rows() != t {
                return err(format!("{name} has {} frames, labels have {t}", m.rows()));
            }
        }
        if self.torques.cols() != self.joints.cols() {
            return err("torque and joint widths differ".into());
        }
        if self.tactile_whole.cols() != self.layout.whole_dim() {
            return err(format!(
                "tactile_whole width {} does not match layout {}",
                self.tactile_whole.cols(),
                self.layout.whole_dim()
            ));
        }
        if self.tactile_thumb.cols() != self.layout.thumb_dim() {
            return err("tactile_thumb width does not match thumb column list".into());
        }
        if self.layout.thumb_columns.iter().any(|&c| c >= self.layout.whole_dim()) {
            return err("thumb column outside the whole tactile stream".into());
        }
        if self.switch_marks.windows(2).any(|w| w[0] >= w[1]) {
            return err("switch marks not strictly increasing".into());
        }
        if self.switch_marks.last().is_some_and(|&m| m >= t) {
            return err("switch mark beyond episode end".into());
        }
        if self.sample_rate == 0 {
            return err("sample rate is zero".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            s,
            "#aelstm-episode v1 sample_rate={} joints={} patches={} taxels_per_patch={} tactile_whole={} tactile_thumb={} thumb_columns={} switch_marks={}",
            self.sample_rate,
            self.joint_dim(),
            self.layout.patches,
            self.layout.taxels_per_patch,
            self.layout.whole_dim(),
            self.layout.thumb_dim(),
            list(&self.layout.thumb_columns),
            list(&self.switch_marks),
        );
        for t in 0..self.len() {
            let _ = write!(s, "{t},{}", self.labels[t]);
            for m in [&self.joints, &self.torques, &self.tactile_whole, &self.tactile_thumb] {
                for v in m.row(t) {
                    let _ = write!(s, ",{v}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "episode file";
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(ctx, "empty file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("#aelstm-episode") || fields.next() != Some("v1") {
            return Err(Error::format(ctx, "missing `#aelstm-episode v1` header"));
        }
        let mut kv = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| Error::format(ctx, format!("bad header field `{f}`")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::format(ctx, format!("header lacks `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::format(ctx, format!("header `{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse().map_err(|_| Error::format(ctx, format!("bad entry in `{k}`"))))
                .collect()
        };
        let sample_rate = num("sample_rate")? as u32;
        let j = num("joints")?;
        let layout = TactileLayout {
            patches: num("patches")?,
            taxels_per_patch: num("taxels_per_patch")?,
            thumb_columns: list("thumb_columns")?,
        };
        let (dw, dt) = (num("tactile_whole")?, num("tactile_thumb")?);
        if dw != layout.whole_dim() || dt != layout.thumb_dim() {
            return Err(Error::format(ctx, "declared tactile widths disagree with layout"));
        }
        let switch_marks = list("switch_marks")?;

        let width = 2 + 2 * j + dw + dt;
        let (mut joints, mut torques, mut whole, mut thumb, mut labels) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.filter(|l| !l.is_empty() && !l.starts_with('#')).enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != width {
                return Err(Error::format(ctx, format!("record {i} has {} fields, expected {width}", parts.len())));
            }
            if parts[0].parse::<usize>().ok() != Some(i) {
                return Err(Error::format(ctx, format!("record {i} has timestep `{}`", parts[0])));
            }
            labels.push(parts[1].parse::<SubTask>()?);
            let vals = parts[2..]
                .iter()
                .map(|p| p.parse::<f64>().map_err(|_| Error::format(ctx, format!("record {i}: bad number `{p}`"))))
                .collect::<Result<Vec<_>>>()?;
            joints.extend_from_slice(&vals[..j]);
            torques.extend_from_slice(&vals[j..2 * j]);
            whole.extend_from_slice(&vals[2 * j..2 * j + dw]);
            thumb.extend_from_slice(&vals[2 * j + dw..]);
        }
        let t = labels.len();
        let ep = RawEpisode {
            sample_rate,
            joints: Matrix::from_vec(t, j, joints)?,
            torques: Matrix::from_vec(t, j, torques)?,
            tactile_whole: Matrix::from_vec(t, dw, whole)?,
            tactile_thumb: Matrix::from_vec(t, dt, thumb)?,
            labels,
            switch_marks,
            layout,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
            other => other,
        })
    }
}

/// Phase boundaries: indices where the label changes.
pub fn switch_marks_from_labels(labels: &[SubTask]) -> Vec<usize> {
    (1..labels.len()).filter(|&t| labels[t] != labels[t - 1]).collect()
}
