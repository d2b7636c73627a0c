use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel clip `[T, H, W, 1]` whose frames are successive cyclic
/// translations of the first by `shift` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub clip: Tensor,
    pub label: usize,
    /// `(δx, δy)` per frame step; `x` indexes rows.
    pub shift: (isize, isize),
}

impl MotionClip {
    pub fn frames(&self) -> usize {
        self.clip.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.clip.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.clip.shape()[2]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.clip.data()[t * n..(t + 1) * n]
    }
}

/// Generator for clip `index` of a seeded family; streams never overlap.
pub fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `out[x, y] = frame[(x − δx) mod H, (y − δy) mod W]`.
pub fn translate_cyclic(frame: &[f64], height: usize, width: usize, shift: (isize, isize)) -> Vec<f64> {
    let (h, w) = (height as isize, width as isize);
    let mut out = vec![0.0; frame.len()];
    for x in 0..h {
        for y in 0..w {
            let sx = (x - shift.0).rem_euclid(h);
            let sy = (y - shift.1).rem_euclid(w);
            out[(x * w + y) as usize] = frame[(sx * w + sy) as usize];
        }
    }
    out
}

/// Uniform `[0, 1)` noise for frame 0, then `frames − 1` translations.
pub fn gen_clip(rng: &mut impl Rng, frames: usize, extents: (usize, usize), shift: (isize, isize), label: usize) -> Result<MotionClip> {
    let (h, w) = extents;
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::config("clip extents must be positive"));
    }
    let mut data: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    for t in 1..frames {
        let next = translate_cyclic(&data[(t - 1) * h * w..], h, w, shift);
        data.extend(next);
    }
    Ok(MotionClip {
        clip: Tensor::new(vec![frames, h, w, 1], data)?,
        label,
        shift,
    })
}

/// Two-frame clip from `seed`; `max_shift` bounds `|δx|` and `|δy|`.
pub fn gen_translation_pair(seed: u64, extents: (usize, usize), shift: (isize, isize), max_shift: usize) -> Result<MotionClip> {
    let m = max_shift as isize;
    if shift.0.abs() > m || shift.1.abs() > m {
        return Err(Error::config(format!("shift {shift:?} exceeds the maximum {max_shift}")));
    }
    if extents.0 < 2 * max_shift + 1 || extents.1 < 2 * max_shift + 1 {
        return Err(Error::config(format!(
            "extents {extents:?} are smaller than {} for maximum shift {max_shift}",
            2 * max_shift + 1
        )));
    }
    gen_clip(&mut clip_rng(seed, 0), 2, extents, shift, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_repeats_the_frame() {
        let c = gen_translation_pair(1, (6, 6), (0, 0), 2).unwrap();
        assert_eq!(c.frame(0), c.frame(1));
    }

    #[test]
    fn same_seed_same_clip() {
        let a = gen_translation_pair(5, (8, 8), (1, -2), 3).unwrap();
        let b = gen_translation_pair(5, (8, 8), (1, -2), 3).unwrap();
        assert_eq!(a, b);
        let c = gen_translation_pair(6, (8, 8), (1, -2), 3).unwrap();
        assert_ne!(a.frame(0), c.frame(0));
    }

    #[test]
    fn unit_row_shift_matches_index_arithmetic() {
        let c = gen_translation_pair(2, (5, 7), (1, 0), 1).unwrap();
        for x in 0..5 {
            for y in 0..7 {
                assert_eq!(c.frame(1)[x * 7 + y], c.frame(0)[((x + 4) % 5) * 7 + y]);
            }
        }
    }

    #[test]
    fn noise_is_in_unit_interval() {
        let c = gen_translation_pair(3, (6, 6), (0, 1), 1).unwrap();
        assert!(c.clip.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn rejects_out_of_range_shift_and_small_frames() {
        assert!(gen_translation_pair(0, (8, 8), (3, 0), 2).unwrap_err().is_config());
        assert!(gen_translation_pair(0, (4, 8), (1, 0), 2).unwrap_err().is_config());
    }
}
