use super::{EnvConfig, EnvState, SEMANTIC_JOINTS};
use crate::episode::SubTask;

/// Ticks the command leads the reference, compensating joint lag.
const LEAD: usize = 2;

const GRASP: [f64; 8] = [0.0, 0.0, 0.8, 0.8, 0.8, 0.3, 0.6, 0.4];
const TWIST: [f64; 8] = [0.0, 0.0, 0.85, 0.85, 0.85, 1.0, 0.9, 0.55];
const RETRACT: [f64; 8] = [0.0, 0.0, 0.8, 0.8, 0.8, 0.05, 0.1, 0.1];
const OPEN: [f64; 8] = [0.0, 0.0, 0.05, 0.05, 0.05, 0.0, 0.0, 0.0];
const SLIDE_REACH: f64 = 0.65;

/// Scripted reference trajectory of one sub-task, piecewise linear between
/// keyframes given in control ticks.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub kind: SubTask,
    pub length: usize,
    pub keyframes: Vec<(usize, Vec<f64>)>,
}

fn expand(semantic: [f64; 8], joints: usize) -> Vec<f64> {
    let mut q = semantic.to_vec();
    let flex = (semantic[2] + semantic[3] + semantic[4]) / 3.0;
    q.resize(joints.max(SEMANTIC_JOINTS), flex);
    q
}

impl Segment {
    pub fn new(kind: SubTask, joints: usize, stop_ticks: usize) -> Segment {
        let p = |s: [f64; 8]| expand(s, joints);
        let (length, keys): (usize, Vec<(usize, [f64; 8])>) = match kind {
            SubTask::Grasp => (10, vec![(0, OPEN), (6, GRASP)]),
            SubTask::TryOpen => (12, vec![(0, GRASP), (4, TWIST), (6, TWIST), (9, GRASP)]),
            SubTask::RetractThumb => (8, vec![(0, GRASP), (4, RETRACT)]),
            SubTask::SlideLeft | SubTask::SlideRight => {
                let d = if kind == SubTask::SlideRight { 1.0 } else { -1.0 };
                let mut reach = RETRACT;
                reach[0] = d * SLIDE_REACH;
                reach[1] = d * SLIDE_REACH;
                let mut regrip = GRASP;
                regrip[0] = reach[0];
                regrip[1] = reach[1];
                (14, vec![(0, RETRACT), (4, reach), (7, regrip), (11, GRASP)])
            }
            SubTask::Stop => (stop_ticks.max(1), vec![(0, GRASP)]),
        };
        Segment { kind, length, keyframes: keys.into_iter().map(|(t, s)| (t, p(s))).collect() }
    }

    /// Reference posture at tick `t` (held after the last keyframe).
    pub fn reference(&self, t: usize) -> Vec<f64> {
        let k = &self.keyframes;
        let i = k.iter().rposition(|(kt, _)| *kt <= t).unwrap_or(0);
        if i + 1 == k.len() {
            return k[i].1.clone();
        }
        let (t0, a) = &k[i];
        let (t1, b) = &k[i + 1];
        let w = (t - t0) as f64 / (t1 - t0) as f64;
        a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
    }

    pub fn start(&self) -> &[f64] {
        &self.keyframes[0].1
    }

    pub fn end(&self) -> &[f64] {
        &self.keyframes[self.keyframes.len() - 1].1
    }
}

/// Demonstration policy with privileged access to the object state.
#[derive(Clone, Debug)]
pub struct Expert {
    joints: usize,
    stop_ticks: usize,
    segment: Segment,
    tick: usize,
    finished: bool,
}

impl Expert {
    pub fn new(config: &EnvConfig) -> Expert {
        Expert {
            joints: config.joints,
            stop_ticks: config.stop_ticks,
            segment: Segment::new(SubTask::Grasp, config.joints, config.stop_ticks),
            tick: 0,
            finished: false,
        }
    }

    /// True once the final hold has been fully executed.
    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn segment(&self) -> &Segment {
        &self.segment
    }

    /// Joint command for the next tick and the sub-task it belongs to.
    pub fn act(&mut self, state: &EnvState) -> (Vec<f64>, SubTask) {
        if self.tick == self.segment.length {
            match self.next_kind(state) {
                Some(kind) => {
                    self.segment = Segment::new(kind, self.joints, self.stop_ticks);
                    self.tick = 0;
                }
                None => self.finished = true,
            }
        }
        let t = (self.tick + LEAD).min(self.segment.length);
        let cmd = self.segment.reference(t);
        self.tick = (self.tick + 1).min(self.segment.length);
        (cmd, self.segment.kind)
    }

    fn next_kind(&self, state: &EnvState) -> Option<SubTask> {
        Some(match self.segment.kind {
            SubTask::Grasp | SubTask::SlideLeft | SubTask::SlideRight => SubTask::TryOpen,
            SubTask::TryOpen if state.cap_open => SubTask::Stop,
            SubTask::TryOpen => SubTask::RetractThumb,
            SubTask::RetractThumb if state.object_pos < 0.0 => SubTask::SlideRight,
            SubTask::RetractThumb => SubTask::SlideLeft,
            SubTask::Stop => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacent_segments_share_boundary_postures() {
        use SubTask::*;
        let edges = [
            (Grasp, TryOpen),
            (TryOpen, RetractThumb),
            (TryOpen, Stop),
            (RetractThumb, SlideLeft),
            (RetractThumb, SlideRight),
            (SlideLeft, TryOpen),
            (SlideRight, TryOpen),
        ];
        for (a, b) in edges {
            assert_eq!(Segment::new(a, 10, 30).end(), Segment::new(b, 10, 30).start(), "{a} -> {b}");
        }
    }

    #[test]
    fn reference_interpolates_and_holds() {
        let s = Segment::new(SubTask::Grasp, 8, 30);
        assert_eq!(s.reference(0), s.start());
        assert!((s.reference(3)[2] - 0.425).abs() < 1e-12);
        assert_eq!(s.reference(6), s.end());
        assert_eq!(s.reference(10), s.end());
    }

    #[test]
    fn extra_joints_mirror_flexion() {
        let s = Segment::new(SubTask::TryOpen, 11, 30);
        let r = s.reference(4);
        assert_eq!(r.len(), 11);
        assert!((r[9] - 0.85).abs() < 1e-12);
    }
}
