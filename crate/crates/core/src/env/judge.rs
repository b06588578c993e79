use serde::{Deserialize, Serialize};

/// Trial classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialResult {
    CompleteSuccess,
    PartialSuccess,
    Failure,
}

impl TrialResult {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialResult::CompleteSuccess => "complete_success",
            TrialResult::PartialSuccess => "partial_success",
            TrialResult::Failure => "failure",
        }
    }

    /// Cap opened, whether or not the motion stopped.
    pub fn opened(self) -> bool {
        self != TrialResult::Failure
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub result: TrialResult,
    pub steps_used: usize,
    pub open_step: Option<usize>,
    pub stop_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub max_steps: usize,
    /// Steps after opening within which commanded motion must cease.
    pub grace: usize,
    /// Largest per-joint command change per step that counts as still.
    pub still_tol: f64,
    /// Steps a rollout continues past the grace window.
    pub hold: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self { max_steps: 900, grace: 20, still_tol: 0.01, hold: 20 }
    }
}

impl JudgeConfig {
    /// Step count after which a rollout with `open_step` can be cut short.
    pub fn rollout_end(&self, open_step: Option<usize>) -> usize {
        match open_step {
            Some(o) => (o + self.grace + self.hold).min(self.max_steps),
            None => self.max_steps,
        }
    }
}

/// Classifies one trial from its per-step commands and cap state.
///
/// The stop step is the first step at or after opening from which every
/// later command change stays within `still_tol`. A trace that ends before
/// the grace window closes cannot show that the motion stopped and counts as
/// partial success.
pub fn judge(commands: &[Vec<f64>], cap_open: &[bool], config: &JudgeConfig) -> EvalOutcome {
    let n = commands.len().min(cap_open.len()).min(config.max_steps);
    let open_step = cap_open[..n].iter().position(|&o| o);
    let Some(open) = open_step else {
        return EvalOutcome { result: TrialResult::Failure, steps_used: n, open_step: None, stop_step: None };
    };
    let moved = |t: usize| {
        commands[t].iter().zip(&commands[t - 1]).any(|(a, b)| (a - b).abs() > config.still_tol)
    };
    let last_move = (open.max(1)..n).rev().find(|&t| moved(t));
    let stop = match last_move {
        Some(t) => t.max(open),
        None => open,
    };
    let stop_step = (stop + 1 < n || last_move.is_none()).then_some(stop);
    let complete = stop - open <= config.grace && n > open + config.grace && stop_step.is_some();
    EvalOutcome {
        result: if complete { TrialResult::CompleteSuccess } else { TrialResult::PartialSuccess },
        steps_used: n,
        open_step,
        stop_step,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(open_at: Option<usize>, moving_until: usize, len: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
        let cmds = (0..len).map(|t| vec![0.05 * t.min(moving_until) as f64, 0.3]).collect();
        let open = (0..len).map(|t| open_at.is_some_and(|o| t >= o)).collect();
        (cmds, open)
    }

    #[test]
    fn freeze_within_grace_is_complete() {
        let (c, o) = trace(Some(300), 315, 340);
        let out = judge(&c, &o, &JudgeConfig::default());
        assert_eq!(out.result, TrialResult::CompleteSuccess);
        assert_eq!(out.open_step, Some(300));
        assert_eq!(out.stop_step, Some(315));
    }

    #[test]
    fn motion_past_grace_is_partial() {
        let (c, o) = trace(Some(300), 330, 340);
        let out = judge(&c, &o, &JudgeConfig::default());
        assert_eq!(out.result, TrialResult::PartialSuccess);
        let (c, o) = trace(Some(300), 900, 900);
        assert_eq!(judge(&c, &o, &JudgeConfig::default()).result, TrialResult::PartialSuccess);
    }

    #[test]
    fn never_opening_fails() {
        let (c, o) = trace(None, 0, 900);
        let out = judge(&c, &o, &JudgeConfig::default());
        assert_eq!(out.result, TrialResult::Failure);
        assert_eq!(out.steps_used, 900);
    }

    #[test]
    fn already_still_at_opening() {
        let (c, o) = trace(Some(50), 40, 100);
        let out = judge(&c, &o, &JudgeConfig::default());
        assert_eq!(out.result, TrialResult::CompleteSuccess);
        assert_eq!(out.stop_step, Some(50));
    }

    #[test]
    fn trace_cut_inside_grace_is_partial() {
        let (c, o) = trace(Some(890), 0, 900);
        assert_eq!(judge(&c, &o, &JudgeConfig::default()).result, TrialResult::PartialSuccess);
    }
}
