use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::face::{BlendshapeFrame, BlendshapeSequence};
use crate::plant::SEQUENCE_RATE_HZ;

/// What fills the window slots that precede the first real frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadPolicy {
    /// Repeat the earliest real frame, matching how offline windows are
    /// front-padded. An empty window is all zeros.
    #[default]
    RepeatEarliest,
    /// Keep zero (neutral) frames until real history replaces them.
    Neutral,
}

/// The last `capacity` calibrated frames, oldest first.
#[derive(Debug, Clone)]
pub struct WindowBuffer {
    capacity: usize,
    dim: usize,
    policy: PadPolicy,
    frames: VecDeque<BlendshapeFrame>,
}

impl WindowBuffer {
    pub fn new(capacity: usize, dim: usize, policy: PadPolicy) -> Self {
        assert!(capacity > 0 && dim > 0, "window needs a positive size");
        Self {
            capacity,
            dim,
            policy,
            frames: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Real frames currently held, at most `capacity`.
    pub fn fill(&self) -> usize {
        self.frames.len()
    }

    pub fn push(&mut self, frame: BlendshapeFrame) -> Result<()> {
        check_dim("window frame", self.dim, frame.dim())?;
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    /// The padded `capacity × dim` window fed to the model.
    pub fn sequence(&self) -> BlendshapeSequence {
        let pad = self.capacity - self.frames.len();
        let filler = match (self.policy, self.frames.front()) {
            (PadPolicy::RepeatEarliest, Some(first)) => first.values().to_vec(),
            _ => vec![0.0; self.dim],
        };
        let data = Array2::from_shape_fn((self.capacity, self.dim), |(i, j)| {
            if i < pad {
                filler[j]
            } else {
                self.frames[i - pad].values()[j]
            }
        });
        BlendshapeSequence::new(data, SEQUENCE_RATE_HZ).expect("frames were validated on entry")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: f32) -> BlendshapeFrame {
        BlendshapeFrame::new(vec![v; 3]).unwrap()
    }

    #[test]
    fn first_frame_with_neutral_padding() {
        let mut w = WindowBuffer::new(120, 3, PadPolicy::Neutral);
        w.push(frame(0.7)).unwrap();
        let s = w.sequence();
        assert_eq!(s.len(), 120);
        let zeros = (0..120).filter(|&i| s.frame(i).iter().all(|&v| v == 0.0)).count();
        assert_eq!(zeros, 119);
        assert_eq!(s.frame(119).to_vec(), vec![0.7; 3]);
    }

    #[test]
    fn repeat_earliest_padding() {
        let mut w = WindowBuffer::new(4, 3, PadPolicy::RepeatEarliest);
        assert!(w.sequence().data().iter().all(|&v| v == 0.0));
        w.push(frame(0.2)).unwrap();
        w.push(frame(0.4)).unwrap();
        let s = w.sequence();
        let col: Vec<f32> = (0..4).map(|i| s.frame(i)[0]).collect();
        assert_eq!(col, vec![0.2, 0.2, 0.2, 0.4]);
    }

    #[test]
    fn ring_keeps_latest_capacity_frames() {
        let mut w = WindowBuffer::new(3, 3, PadPolicy::Neutral);
        for k in 0..5 {
            w.push(frame(k as f32 / 10.0)).unwrap();
        }
        assert_eq!(w.fill(), 3);
        let col: Vec<f32> = (0..3).map(|i| w.sequence().frame(i)[1]).collect();
        assert_eq!(col, vec![0.2, 0.3, 0.4]);
    }

    #[test]
    fn wrong_dimension_leaves_window_unchanged() {
        let mut w = WindowBuffer::new(3, 3, PadPolicy::Neutral);
        w.push(frame(0.5)).unwrap();
        let before = w.sequence();
        assert!(w.push(BlendshapeFrame::new(vec![0.1; 2]).unwrap()).is_err());
        assert_eq!(w.fill(), 1);
        assert_eq!(w.sequence(), before);
    }
}
