//! Window addressing: which source token each window slot of a query reads.

use super::{Boundary, EmimConfig, LastFrame, Sampling, TokenVolume, VolumeDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowSlot {
    Source { frame: usize, x: usize, y: usize },
    Pad,
}

/// Frame the keys/values of a query in frame `t` come from.
pub fn source_frame(t: usize, frames: usize, cfg: &EmimConfig) -> usize {
    match cfg.last_frame {
        LastFrame::ClampToSelf => {
            if t + cfg.interval < frames {
                t + cfg.interval
            } else {
                t
            }
        }
    }
}

/// `(Δx, Δy)` of a flat slot index; slots are raster ordered with Δx outer.
pub fn slot_offset(slot: usize, radius: usize) -> (isize, isize) {
    let side = 2 * radius + 1;
    let r = radius as isize;
    ((slot / side) as isize - r, (slot % side) as isize - r)
}

pub fn offset_slot(dx: isize, dy: isize, radius: usize) -> Option<usize> {
    let r = radius as isize;
    if dx.abs() > r || dy.abs() > r {
        return None;
    }
    Some(((dx + r) * (2 * r + 1) + (dy + r)) as usize)
}

fn window_center(dims: VolumeDims, x: usize, y: usize, cfg: &EmimConfig) -> (usize, usize) {
    match cfg.sampling {
        Sampling::Sliding => (x, y),
        Sampling::NonSliding => (dims.height / 2, dims.width / 2),
    }
}

fn resolve(coord: isize, extent: usize, boundary: Boundary) -> Option<usize> {
    if (0..extent as isize).contains(&coord) {
        return Some(coord as usize);
    }
    match boundary {
        Boundary::PadConstant => None,
        Boundary::ClampEdge => Some(coord.clamp(0, extent as isize - 1) as usize),
    }
}

/// Slots of the query at `(t, x, y)`, in raster order. Does not validate.
pub fn window_slots(dims: VolumeDims, t: usize, x: usize, y: usize, cfg: &EmimConfig) -> Vec<WindowSlot> {
    let frame = source_frame(t, dims.frames, cfg);
    let (cx, cy) = window_center(dims, x, y, cfg);
    (0..cfg.window_len())
        .map(|slot| {
            let (dx, dy) = slot_offset(slot, cfg.radius);
            let sx = resolve(cx as isize + dx, dims.height, cfg.boundary);
            let sy = resolve(cy as isize + dy, dims.width, cfg.boundary);
            match (sx, sy) {
                (Some(x), Some(y)) => WindowSlot::Source { frame, x, y },
                _ => WindowSlot::Pad,
            }
        })
        .collect()
}

/// The `(2P+1)²` candidate tokens of one query; padded slots hold `pad_value`
/// in every channel.
pub fn sample_window(vol: &TokenVolume, t: usize, x: usize, y: usize, cfg: &EmimConfig) -> Result<Vec<Vec<f64>>> {
    let dims = vol.dims();
    cfg.check()?;
    if cfg.window_side() > dims.height.min(dims.width) {
        return Err(Error::config(format!(
            "window {0}x{0} exceeds spatial extent {1}x{2}",
            cfg.window_side(),
            dims.height,
            dims.width
        )));
    }
    if t >= dims.frames || x >= dims.height || y >= dims.width {
        return Err(Error::dimension(
            "sample_window",
            &[t, x, y],
            &[dims.frames, dims.height, dims.width],
        ));
    }
    Ok(window_slots(dims, t, x, y, cfg)
        .into_iter()
        .map(|slot| match slot {
            WindowSlot::Source { frame, x, y } => vol.token(frame, x, y).to_vec(),
            WindowSlot::Pad => vec![cfg.pad_value; dims.channels],
        })
        .collect())
}

pub(crate) const PAD: usize = usize::MAX;

/// Flat source-token index of every (query, slot) pair, `PAD` for padding.
#[derive(Debug, Clone)]
pub(crate) struct WindowTable {
    pub window_len: usize,
    pub sources: Vec<usize>,
}

impl WindowTable {
    pub fn build(dims: VolumeDims, cfg: &EmimConfig) -> Self {
        let window_len = cfg.window_len();
        let mut sources = Vec::with_capacity(dims.tokens() * window_len);
        for t in 0..dims.frames {
            for x in 0..dims.height {
                for y in 0..dims.width {
                    sources.extend(window_slots(dims, t, x, y, cfg).into_iter().map(|s| match s {
                        WindowSlot::Source { frame, x, y } => dims.token_index(frame, x, y),
                        WindowSlot::Pad => PAD,
                    }));
                }
            }
        }
        Self { window_len, sources }
    }

    pub fn query(&self, q: usize) -> &[usize] {
        &self.sources[q * self.window_len..(q + 1) * self.window_len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(t: usize, h: usize, w: usize, c: usize) -> VolumeDims {
        VolumeDims { frames: t, height: h, width: w, channels: c }
    }

    /// Token value encodes its own (t, x, y).
    fn coded_volume(d: VolumeDims) -> TokenVolume {
        let mut data = Vec::new();
        for t in 0..d.frames {
            for x in 0..d.height {
                for y in 0..d.width {
                    for c in 0..d.channels {
                        data.push((t * 10000 + x * 100 + y) as f64 + c as f64 * 0.5);
                    }
                }
            }
        }
        TokenVolume::new(d, data).unwrap()
    }

    #[test]
    fn degenerate_window_is_the_aligned_token() {
        let vol = coded_volume(dims(2, 3, 3, 2));
        let cfg = EmimConfig { radius: 0, ..Default::default() };
        let win = sample_window(&vol, 0, 1, 2, &cfg).unwrap();
        assert_eq!(win, vec![vol.token(1, 1, 2).to_vec()]);
    }

    #[test]
    fn corner_pads_five_of_nine() {
        let vol = coded_volume(dims(2, 4, 4, 3));
        let cfg = EmimConfig { radius: 1, ..Default::default() };
        let win = sample_window(&vol, 0, 0, 0, &cfg).unwrap();
        let padded = win.iter().filter(|tok| tok.iter().all(|&v| v == 1e-6)).count();
        assert_eq!(padded, 5);
    }

    #[test]
    fn interior_window_matches_index_arithmetic() {
        let d = dims(3, 5, 6, 1);
        let vol = coded_volume(d);
        let cfg = EmimConfig { radius: 1, ..Default::default() };
        let (t, x, y) = (1, 2, 3);
        let win = sample_window(&vol, t, x, y, &cfg).unwrap();
        let mut expected = Vec::new();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                let code = ((t + 1) * 10000) as i64 + (x as i64 + dx) * 100 + (y as i64 + dy);
                expected.push(vec![code as f64]);
            }
        }
        assert_eq!(win, expected);
    }

    #[test]
    fn last_frame_clamps_to_self() {
        let vol = coded_volume(dims(2, 3, 3, 1));
        let cfg = EmimConfig { radius: 0, interval: 1, ..Default::default() };
        assert_eq!(sample_window(&vol, 1, 1, 1, &cfg).unwrap(), vec![vec![10101.0]]);
        let wide = EmimConfig { radius: 0, interval: 2, ..Default::default() };
        assert_eq!(sample_window(&vol, 0, 1, 1, &wide).unwrap(), vec![vec![101.0]]);
    }

    #[test]
    fn clamp_edge_repeats_border() {
        let vol = coded_volume(dims(1, 3, 3, 1));
        let cfg = EmimConfig { radius: 1, boundary: Boundary::ClampEdge, ..Default::default() };
        let win = sample_window(&vol, 0, 0, 0, &cfg).unwrap();
        let codes: Vec<f64> = win.iter().map(|t| t[0]).collect();
        assert_eq!(codes, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 100.0, 100.0, 101.0]);
    }

    #[test]
    fn sliding_center_addresses_query_position() {
        let d = dims(2, 7, 7, 1);
        let cfg = EmimConfig { radius: 2, ..Default::default() };
        let center = offset_slot(0, 0, cfg.radius).unwrap();
        for x in 0..7 {
            for y in 0..7 {
                let slots = window_slots(d, 0, x, y, &cfg);
                assert_eq!(slots[center], WindowSlot::Source { frame: 1, x, y });
            }
        }
    }

    #[test]
    fn non_sliding_is_query_independent() {
        let d = dims(2, 7, 7, 1);
        let cfg = EmimConfig { radius: 2, sampling: Sampling::NonSliding, ..Default::default() };
        let reference = window_slots(d, 0, 0, 0, &cfg);
        for x in 0..7 {
            for y in 0..7 {
                assert_eq!(window_slots(d, 0, x, y, &cfg), reference);
            }
        }
        let vol = coded_volume(d);
        assert_eq!(
            sample_window(&vol, 0, 0, 6, &cfg).unwrap(),
            sample_window(&vol, 0, 5, 1, &cfg).unwrap()
        );
    }

    #[test]
    fn non_sliding_full_coverage() {
        let d = dims(2, 5, 5, 1);
        let cfg = EmimConfig { radius: 2, sampling: Sampling::NonSliding, ..Default::default() };
        let slots = window_slots(d, 0, 3, 1, &cfg);
        let mut seen: Vec<_> = slots
            .iter()
            .map(|s| match s {
                WindowSlot::Source { x, y, .. } => (*x, *y),
                WindowSlot::Pad => panic!("no padding expected"),
            })
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 25);
    }

    #[test]
    fn oversized_window_is_config_error() {
        let vol = coded_volume(dims(1, 2, 5, 1));
        let cfg = EmimConfig { radius: 1, ..Default::default() };
        assert!(sample_window(&vol, 0, 0, 0, &cfg).unwrap_err().is_config());
        assert!(sample_window(&coded_volume(dims(1, 3, 3, 1)), 0, 3, 0, &cfg).is_err());
    }

    #[test]
    fn slot_offsets_round_trip() {
        for r in 0..4 {
            for s in 0..(2 * r + 1) * (2 * r + 1) {
                let (dx, dy) = slot_offset(s, r);
                assert_eq!(offset_slot(dx, dy, r), Some(s));
            }
        }
    }
}
