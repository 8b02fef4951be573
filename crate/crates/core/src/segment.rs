//! Event intervals in frame units.
//!
//! Intervals are closed and measured continuously: `[start, end]` has length
//! `end - start`. A ground-truth event covering frames 3..=8 is the segment
//! `[3, 8]`, and the per-frame offsets `(i - start, end - i)` rebuild it
//! exactly.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub score: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        Segment {
            start,
            end,
            score: 0.0,
        }
    }

    pub fn with_score(start: f64, end: f64, score: f64) -> Self {
        Segment { start, end, score }
    }

    pub fn len(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.end >= self.start
    }

    pub fn intersection(&self, other: &Segment) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Smallest interval containing both.
    pub fn hull(&self, other: &Segment) -> f64 {
        (self.end.max(other.end) - self.start.min(other.start)).max(0.0)
    }

    pub fn union(&self, other: &Segment) -> f64 {
        self.len() + other.len() - self.intersection(other)
    }

    /// Clamps both ends into `[lo, hi]`.
    pub fn clipped(&self, lo: f64, hi: f64) -> Segment {
        let start = self.start.clamp(lo, hi);
        let end = self.end.clamp(lo, hi).max(start);
        Segment {
            start,
            end,
            score: self.score,
        }
    }

    /// Frame-unit segment to seconds, frame `n - 1` mapping to `duration`.
    pub fn frames_to_seconds(&self, n_frames: usize, duration: f64) -> Segment {
        let scale = duration / (n_frames.max(2) - 1) as f64;
        Segment {
            start: self.start * scale,
            end: self.end * scale,
            score: self.score,
        }
    }

    /// Seconds to frame indices: `round(seconds / duration * (n - 1))`.
    pub fn seconds_to_frames(&self, n_frames: usize, duration: f64) -> Segment {
        let last = (n_frames.max(1) - 1) as f64;
        let conv = |s: f64| {
            if duration <= 0.0 {
                0.0
            } else {
                (s / duration * last).round().clamp(0.0, last)
            }
        };
        Segment {
            start: conv(self.start),
            end: conv(self.end),
            score: self.score,
        }
    }
}

/// Intersection over union of two intervals; two identical degenerate
/// intervals count as a perfect match.
pub fn iou_1d(a: &Segment, b: &Segment) -> f64 {
    let union = a.union(b);
    if union <= 0.0 {
        return if a.start == b.start && a.end == b.end {
            1.0
        } else {
            0.0
        };
    }
    a.intersection(b) / union
}

/// Generalized IoU: `IoU - (|hull| - |union|) / |hull|`.
pub fn giou_1d(a: &Segment, b: &Segment) -> f64 {
    let hull = a.hull(b);
    if hull <= 0.0 {
        return iou_1d(a, b);
    }
    let union = a.union(b);
    iou_1d(a, b) - (hull - union) / hull
}

/// Intersection over prediction length.
pub fn iop_1d(pred: &Segment, gt: &Segment) -> f64 {
    let len = pred.len();
    if len <= 0.0 {
        return if pred.start >= gt.start && pred.end <= gt.end {
            1.0
        } else {
            0.0
        };
    }
    pred.intersection(gt) / len
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = Segment::new(0.0, 10.0);
        assert_eq!(iou_1d(&a, &a), 1.0);
        assert_eq!(iou_1d(&a, &Segment::new(11.0, 12.0)), 0.0);
        assert!((iou_1d(&a, &Segment::new(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_examples() {
        let g = giou_1d(&Segment::new(0.0, 1.0), &Segment::new(2.0, 3.0));
        assert!((g + 1.0 / 3.0).abs() < 1e-12);
        let g = giou_1d(&Segment::new(0.0, 2.0), &Segment::new(1.0, 3.0));
        assert!((g - 1.0 / 3.0).abs() < 1e-12);
        let s = Segment::new(2.0, 7.5);
        assert_eq!(giou_1d(&s, &s), 1.0);
    }

    #[test]
    fn iop_containment() {
        let gt = Segment::new(0.0, 50.0);
        assert_eq!(iop_1d(&Segment::new(10.0, 12.0), &gt), 1.0);
        assert!((iop_1d(&Segment::new(40.0, 60.0), &gt) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn time_conversion_round_trip_on_grid() {
        let s = Segment::new(0.0, 6.9);
        let f = s.seconds_to_frames(100, 30.0);
        assert_eq!(f.start, 0.0);
        assert_eq!(f.end, (6.9f64 / 30.0 * 99.0).round());
        let back = Segment::new(10.0, 99.0).frames_to_seconds(100, 30.0);
        assert!((back.end - 30.0).abs() < 1e-12);
    }
}
