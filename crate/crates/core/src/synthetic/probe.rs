use super::{clip_rng, gen_clip, MotionClip};
use crate::attention::{build_affinity, slot_offset, source_frame, EmimConfig, RelPosBias, TokenVolume, VolumeDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub predicted: (isize, isize),
    /// Votes for the predicted offset.
    pub votes: usize,
    /// Number of voting queries.
    pub queries: usize,
}

/// One token per pixel, `(cos πp, sin πp)`. For `p ∈ [0, 1)` the inner
/// product `cos π(p − p')` peaks only where the pixel values agree.
pub fn circle_tokens(clip: &MotionClip) -> Result<TokenVolume> {
    let dims = VolumeDims {
        frames: clip.frames(),
        height: clip.height(),
        width: clip.width(),
        channels: 2,
    };
    let data = clip
        .clip
        .data()
        .iter()
        .flat_map(|&p| {
            let a = std::f64::consts::PI * p;
            [a.cos(), a.sin()]
        })
        .collect();
    TokenVolume::new(dims, data)
}

/// Predicts the per-step shift from the argmax offsets of the raw
/// affinity, with identity projections and no positional bias. Only
/// queries whose whole window is in bounds and whose source frame is a
/// later frame vote.
pub fn displacement_probe(clip: &MotionClip, cfg: &EmimConfig) -> Result<ProbeResult> {
    let cfg = EmimConfig {
        heads: 1,
        bias_enabled: false,
        ..*cfg
    };
    let p = cfg.radius as isize;
    let step = cfg.interval as isize;
    let (dx, dy) = (clip.shift.0 * step, clip.shift.1 * step);
    if dx.abs() > p || dy.abs() > p {
        return Err(Error::config(format!(
            "displacement ({dx}, {dy}) lies outside the radius-{} window; recovery is undefined",
            cfg.radius
        )));
    }
    let tokens = circle_tokens(clip)?;
    let dims = tokens.dims();
    let field = build_affinity(&tokens, &tokens, &RelPosBias::zeros(1, cfg.radius), &cfg)?;
    let r = cfg.radius;
    let mut votes = vec![0usize; cfg.window_len()];
    let mut queries = 0;
    for t in 0..dims.frames {
        if source_frame(t, dims.frames, &cfg) == t {
            continue;
        }
        for x in r..dims.height.saturating_sub(r) {
            for y in r..dims.width.saturating_sub(r) {
                votes[field.argmax_slot(0, dims.token_index(t, x, y))] += 1;
                queries += 1;
            }
        }
    }
    if queries == 0 {
        return Err(Error::config("no interior query has a later source frame"));
    }
    let mut best = 0;
    for (slot, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = slot;
        }
    }
    let (ox, oy) = slot_offset(best, r);
    Ok(ProbeResult {
        predicted: (ox / step, oy / step),
        votes: votes[best],
        queries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub shift: (isize, isize),
    pub seed: u64,
    pub result: ProbeResult,
}

impl SweepEntry {
    pub fn correct(&self) -> bool {
        self.result.predicted == self.shift
    }
}

/// Every shift with `|τ·shift| ≤ P` when `shifts` is empty.
pub fn window_shifts(cfg: &EmimConfig) -> Vec<(isize, isize)> {
    let m = (cfg.radius / cfg.interval.max(1)) as isize;
    (-m..=m).flat_map(|dx| (-m..=m).map(move |dy| (dx, dy))).collect()
}

/// Probes each shift on `trials` clips of `size×size`; clip `i` of a shift
/// uses seed `seed + i`.
pub fn recovery_sweep(cfg: &EmimConfig, shifts: &[(isize, isize)], trials: usize, size: usize, seed: u64) -> Result<Vec<SweepEntry>> {
    let all;
    let shifts = if shifts.is_empty() {
        all = window_shifts(cfg);
        &all[..]
    } else {
        shifts
    };
    if size <= 2 * cfg.radius {
        return Err(Error::config(format!("{size}x{size} frames leave no query with a full radius-{} window", cfg.radius)));
    }
    let step = cfg.interval as isize;
    let mut out = Vec::with_capacity(shifts.len() * trials);
    for &shift in shifts {
        let reach = (shift.0 * step).abs().max((shift.1 * step).abs()) as usize;
        if reach > cfg.radius {
            return Err(Error::config(format!(
                "shift {shift:?} at interval {} moves {reach} pixels, beyond radius {}",
                cfg.interval, cfg.radius
            )));
        }
        for i in 0..trials as u64 {
            let s = seed.wrapping_add(i);
            let clip = gen_clip(&mut clip_rng(s, 0), cfg.interval + 1, (size, size), shift, 0)?;
            out.push(SweepEntry {
                shift,
                seed: s,
                result: displacement_probe(&clip, cfg)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gen_translation_pair;

    fn probe(shift: (isize, isize), radius: usize, seed: u64) -> ProbeResult {
        let clip = gen_translation_pair(seed, (16, 16), shift, radius).unwrap();
        displacement_probe(&clip, &EmimConfig { radius, ..Default::default() }).unwrap()
    }

    #[test]
    fn still_clip_predicts_zero() {
        assert_eq!(probe((0, 0), 3, 1).predicted, (0, 0));
    }

    #[test]
    fn recovers_unit_and_large_shifts() {
        let r = probe((1, 0), 1, 2);
        assert_eq!(r.predicted, (1, 0));
        assert_eq!(r.votes, r.queries);
        assert_eq!(probe((-2, 3), 3, 3).predicted, (-2, 3));
    }

    #[test]
    fn shift_beyond_window_is_refused() {
        let clip = gen_translation_pair(0, (16, 16), (3, 3), 3).unwrap();
        let err = displacement_probe(&clip, &EmimConfig { radius: 2, ..Default::default() }).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn sweep_covers_the_window() {
        let cfg = EmimConfig { radius: 1, ..Default::default() };
        let entries = recovery_sweep(&cfg, &[], 2, 10, 0).unwrap();
        assert_eq!(entries.len(), 18);
        assert!(entries.iter().all(SweepEntry::correct));
    }

    #[test]
    fn sweep_with_interval_two_uses_three_frames() {
        let cfg = EmimConfig { radius: 2, interval: 2, ..Default::default() };
        let entries = recovery_sweep(&cfg, &[(1, -1), (0, 1)], 1, 12, 3).unwrap();
        assert!(entries.iter().all(SweepEntry::correct));
        assert!(recovery_sweep(&cfg, &[(2, 0)], 1, 12, 3).unwrap_err().is_config());
    }
}
