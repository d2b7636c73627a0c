//! Non-overlapping patch embedding; frames are never merged.

use crate::attention::{TokenVolume, VolumeDims};
use crate::error::{Error, Result};
use crate::tensor::{linear_backward, linear_forward, LinearGrad, LinearParams, Tensor};

/// Splits `[T, H, W, ch]` into `p×p` patches, each flattened in
/// `(row, column, channel)` order: `[T, H/p, W/p, p·p·ch]`.
pub fn patchify(clip: &Tensor, patch: usize) -> Result<Tensor> {
    let (t, h, w, ch) = match *clip.shape() {
        [t, h, w, ch] => (t, h, w, ch),
        _ => return Err(Error::dimension("patchify", clip.shape(), &[4])),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("frame {h}x{w} is not divisible into {patch}x{patch} patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let flat = patch * patch * ch;
    let mut out = Vec::with_capacity(clip.len());
    let d = clip.data();
    for f in 0..t {
        for px in 0..ph {
            for py in 0..pw {
                for i in 0..patch {
                    for j in 0..patch {
                        let x = px * patch + i;
                        let y = py * patch + j;
                        let base = ((f * h + x) * w + y) * ch;
                        out.extend_from_slice(&d[base..base + ch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![t, ph, pw, flat], out)
}

pub fn patch_embed(clip: &Tensor, patch: usize, proj: &LinearParams) -> Result<TokenVolume> {
    let patches = patchify(clip, patch)?;
    TokenVolume::from_tensor(linear_forward(&patches, proj)?)
}

/// Gradient of the projection given the token gradient.
pub fn patch_embed_backward(clip: &Tensor, patch: usize, proj: &LinearParams, d_tokens: &TokenVolume) -> Result<LinearGrad> {
    let patches = patchify(clip, patch)?;
    Ok(linear_backward(&patches, proj, d_tokens.tensor())?.1)
}

pub fn token_dims(clip_shape: &[usize], patch: usize, channels: usize) -> Result<VolumeDims> {
    match *clip_shape {
        [t, h, w, _] if patch > 0 && h % patch == 0 && w % patch == 0 => Ok(VolumeDims {
            frames: t,
            height: h / patch,
            width: w / patch,
            channels,
        }),
        _ => Err(Error::config(format!("clip {clip_shape:?} is not divisible into {patch}x{patch} patches"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_token_per_frame_when_patch_is_the_frame() {
        let clip = Tensor::from_fn(&[3, 4, 4, 1], |i| i as f64);
        let proj = LinearParams::zeros(16, 5);
        let v = patch_embed(&clip, 4, &proj).unwrap();
        assert_eq!(v.dims(), VolumeDims { frames: 3, height: 1, width: 1, channels: 5 });
    }

    #[test]
    fn constant_clip_gives_constant_tokens() {
        let clip = Tensor::filled(&[2, 4, 4, 1], 0.7);
        let mut proj = LinearParams::zeros(4, 4);
        proj.weight = Tensor::identity(4);
        let v = patch_embed(&clip, 2, &proj).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.7));
    }

    #[test]
    fn patch_contents_follow_index_arithmetic() {
        // value encodes (t, x, y) of the pixel
        let clip = Tensor::from_fn(&[2, 4, 4, 1], |i| {
            let (t, x, y) = (i / 16, (i / 4) % 4, i % 4);
            (t * 100 + x * 10 + y) as f64
        });
        let proj = LinearParams::identity(4);
        let v = patch_embed(&clip, 2, &proj).unwrap();
        assert_eq!(v.dims(), VolumeDims { frames: 2, height: 2, width: 2, channels: 4 });
        for t in 0..2 {
            for px in 0..2 {
                for py in 0..2 {
                    let mut expected = Vec::new();
                    for i in 0..2 {
                        for j in 0..2 {
                            expected.push((t * 100 + (2 * px + i) * 10 + 2 * py + j) as f64);
                        }
                    }
                    assert_eq!(v.token(t, px, py), &expected[..]);
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_frames() {
        let clip = Tensor::zeros(&[1, 5, 4, 1]);
        assert!(patch_embed(&clip, 2, &LinearParams::zeros(4, 2)).unwrap_err().is_config());
    }
}
