//! Multi-stack, frame-aligned event control tensors.
//!
//! For a target frame at `t_target`, stack `m` accumulates the
//! `ceil(N / 2^m)` most recent events in `(t_prev, t_target]`, so fast
//! motion stays sharp in the short stacks while slow motion accumulates in
//! the long stack. Each stack stores separate positive/negative count
//! channels to avoid cancellation at a pixel.

use ndarray::Array3;

use crate::events::EventStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide each stack's channels by that stack's max count (default).
    PerStackMax,
    /// Divide all channels by the global max count.
    GlobalMax,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StackerConfig {
    /// Stack count `S`; channels are `2 * S`.
    pub stacks: usize,
    pub normalization: Normalization,
}

impl Default for StackerConfig {
    fn default() -> Self {
        StackerConfig {
            stacks: 3,
            normalization: Normalization::PerStackMax,
        }
    }
}

impl StackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stacks == 0 {
            return Err(Error::Config("stack count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        2 * self.stacks
    }
}

/// Multi-stack tensor of shape `[2 * S, H, W]` with values in `[0, 1]`.
/// Channel `2m` holds positive counts of stack `m`, channel `2m + 1`
/// negative counts.
pub type EventStackTensor = Array3<f64>;

/// Build the multi-stack tensor for the window `(t_prev, t_target]`.
///
/// Ties at the count cutoff are resolved by including every event sharing
/// the cutoff timestamp, which makes the result independent of same-time
/// event order.
pub fn build_multistack(
    stream: &EventStream,
    t_prev: u64,
    t_target: u64,
    cfg: &StackerConfig,
) -> Result<EventStackTensor> {
    cfg.validate()?;
    if t_prev >= t_target {
        return Err(Error::Argument(format!(
            "stack window empty: t_prev={t_prev} >= t_target={t_target}"
        )));
    }
    let window = stream.slice(t_prev, t_target)?;
    let records = window.records();
    let n = records.len();
    let (h, w) = (stream.sensor_height() as usize, stream.sensor_width() as usize);
    let mut tensor = Array3::zeros((cfg.channels(), h, w));
    if n == 0 {
        return Ok(tensor);
    }

    for m in 0..cfg.stacks {
        let need = n.div_ceil(1 << m);
        let mut start = n - need;
        // include all events sharing the cutoff timestamp
        while start > 0 && records[start - 1].t == records[start].t {
            start -= 1;
        }
        for r in &records[start..] {
            let ch = 2 * m + usize::from(r.p < 0);
            tensor[[ch, r.y as usize, r.x as usize]] += 1.0;
        }
    }

    match cfg.normalization {
        Normalization::PerStackMax => {
            for m in 0..cfg.stacks {
                let mut max = 0.0f64;
                for ch in [2 * m, 2 * m + 1] {
                    for &v in tensor.index_axis(ndarray::Axis(0), ch) {
                        max = max.max(v);
                    }
                }
                if max > 0.0 {
                    for ch in [2 * m, 2 * m + 1] {
                        tensor
                            .index_axis_mut(ndarray::Axis(0), ch)
                            .mapv_inplace(|v| v / max);
                    }
                }
            }
        }
        Normalization::GlobalMax => {
            let max = tensor.iter().cloned().fold(0.0f64, f64::max);
            if max > 0.0 {
                tensor.mapv_inplace(|v| v / max);
            }
        }
    }
    Ok(tensor)
}

/// Build one control tensor per generated frame.
///
/// Tensor `i` (for `i >= 1`) covers `(t_{i-1}, t_i]`; a zero tensor is
/// prepended for frame 0 (the conditioning frame itself) so the output
/// aligns 1:1 with the `F` generated frames.
pub fn build_control_sequence(
    stream: &EventStream,
    frame_times: &[u64],
    cfg: &StackerConfig,
) -> Result<Vec<EventStackTensor>> {
    cfg.validate()?;
    if frame_times.len() < 2 {
        return Err(Error::Argument("need at least 2 frame times".into()));
    }
    if frame_times.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Argument("frame times must be strictly increasing".into()));
    }
    let (h, w) = (stream.sensor_height() as usize, stream.sensor_width() as usize);
    let mut out = Vec::with_capacity(frame_times.len());
    out.push(Array3::zeros((cfg.channels(), h, w)));
    for pair in frame_times.windows(2) {
        out.push(build_multistack(stream, pair[0], pair[1], cfg)?);
    }
    Ok(out)
}

/// Dump one stack channel as a PGM image (counts scaled to [0, 1] already).
pub fn dump_channel_pgm(
    tensor: &EventStackTensor,
    channel: usize,
    path: &std::path::Path,
) -> Result<()> {
    if channel >= tensor.dim().0 {
        return Err(Error::Argument(format!(
            "channel {channel} out of range for {} channels",
            tensor.dim().0
        )));
    }
    let img = tensor.index_axis(ndarray::Axis(0), channel).to_owned();
    crate::image::write_pgm(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{EventRecord, EventStream};

    fn stream_of(records: Vec<(u64, u16, u16, i8)>) -> EventStream {
        EventStream::new(
            8,
            8,
            records
                .into_iter()
                .map(|(t, x, y, p)| EventRecord { t, x, y, p })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn halving_rule_hand_count() {
        // 8 positive events at pixel (1,1); stacks see 8, 4, 2 events.
        let s = stream_of((1..=8).map(|t| (t * 10, 1, 1, 1)).collect());
        let cfg = StackerConfig::default();
        let t = build_multistack(&s, 0, 100, &cfg).unwrap();
        assert_eq!(t.dim(), (6, 8, 8));
        for m in 0..3 {
            assert_eq!(t[[2 * m, 1, 1]], 1.0);
            assert_eq!(t[[2 * m + 1, 1, 1]], 0.0);
        }
        assert_eq!(t.sum(), 3.0);
    }

    #[test]
    fn no_events_yields_zero_tensor() {
        let s = stream_of(vec![]);
        let t = build_multistack(&s, 0, 100, &StackerConfig::default()).unwrap();
        assert_eq!(t.dim(), (6, 8, 8));
        assert_eq!(t.sum(), 0.0);
    }

    #[test]
    fn default_stack_count_gives_six_channels() {
        assert_eq!(StackerConfig::default().channels(), 6);
    }

    #[test]
    fn empty_window_rejected() {
        let s = stream_of(vec![]);
        assert!(matches!(
            build_multistack(&s, 5, 5, &StackerConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn nesting_and_signed_sum() {
        let s = stream_of(vec![
            (10, 0, 0, 1),
            (20, 1, 0, -1),
            (30, 2, 0, 1),
            (40, 3, 0, 1),
            (50, 4, 0, -1),
        ]);
        let cfg = StackerConfig {
            stacks: 3,
            normalization: Normalization::GlobalMax,
        };
        let t = build_multistack(&s, 0, 60, &cfg).unwrap();
        // pre-normalization counts recovered by rescaling with global max = 1
        let signed: f64 = (0..8)
            .flat_map(|y| (0..8).map(move |x| (y, x)))
            .map(|(y, x)| t[[0, y, x]] - t[[1, y, x]])
            .sum();
        assert!((signed - s.signed_polarity_sum() as f64).abs() < 1e-12);
    }

    #[test]
    fn ties_at_cutoff_included() {
        // N=4, stack 1 needs 2 most recent, but the cutoff timestamp is
        // shared by three events: all three are included.
        let s = stream_of(vec![(10, 0, 0, 1), (20, 1, 0, 1), (20, 2, 0, 1), (20, 3, 0, 1)]);
        let cfg = StackerConfig {
            stacks: 2,
            normalization: Normalization::GlobalMax,
        };
        let t = build_multistack(&s, 0, 30, &cfg).unwrap();
        let stack1_count: f64 = t.index_axis(ndarray::Axis(0), 2).sum();
        // stored counts are normalized by the global max (1 per pixel here)
        assert_eq!(stack1_count, 3.0);
    }

    #[test]
    fn control_sequence_alignment() {
        let s = stream_of(vec![(15, 1, 1, 1), (25, 2, 2, -1)]);
        let cfg = StackerConfig::default();
        let seq = build_control_sequence(&s, &[10, 20, 30], &cfg).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq[0].sum(), 0.0);
        assert_eq!(seq[1][[0, 1, 1]], 1.0);
        assert_eq!(seq[2][[1, 2, 2]], 1.0);
        assert!(build_control_sequence(&s, &[10, 10], &cfg).is_err());
        assert!(build_control_sequence(&s, &[10], &cfg).is_err());
    }

    #[test]
    fn all_events_before_first_frame_give_zero_tensors() {
        let s = stream_of(vec![(5, 1, 1, 1)]);
        let seq = build_control_sequence(&s, &[10, 20], &StackerConfig::default()).unwrap();
        assert!(seq.iter().all(|t| t.sum() == 0.0));
    }
}
