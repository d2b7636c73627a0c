use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{clip_rng, gen_clip, MotionClip};
use crate::error::{Error, Result, ResultExt};
use crate::tensor::{read_fixture, write_fixture};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Shift of every class, in raster order over `(δx, δy)`.
pub fn class_shifts(classes: usize) -> Result<Vec<(isize, isize)>> {
    let raster = |r: isize| (-r..=r).flat_map(move |dx| (-r..=r).map(move |dy| (dx, dy)));
    match classes {
        4 => Ok(raster(1).filter(|&(dx, dy)| dx.abs() + dy.abs() == 1).collect()),
        8 => Ok(raster(1).filter(|&s| s != (0, 0)).collect()),
        49 => Ok(raster(3).collect()),
        _ => Err(Error::config(format!("classes must be 4, 8 or 49, got {classes}"))),
    }
}

/// Largest shift magnitude among the classes.
pub fn max_class_shift(classes: usize) -> Result<usize> {
    Ok(class_shifts(classes)?
        .into_iter()
        .map(|(a, b)| a.unsigned_abs().max(b.unsigned_abs()))
        .max()
        .unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub clips: usize,
    pub seed: u64,
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            clips: 2000,
            seed: 0,
            classes: 8,
            frames: 2,
            height: 16,
            width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clips: Vec<MotionClip>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Clip `i` has label `i mod classes` and its own noise stream. The split
/// shuffles indices with the seed and sends every fifth position to `val`.
pub fn gen_direction_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let shifts = class_shifts(spec.classes)?;
    if spec.clips == 0 || !spec.clips.is_multiple_of(spec.classes) {
        return Err(Error::config(format!(
            "clip count {} is not a positive multiple of {} classes",
            spec.clips, spec.classes
        )));
    }
    let clips = (0..spec.clips)
        .map(|i| {
            let label = i % spec.classes;
            gen_clip(&mut clip_rng(spec.seed, i as u64), spec.frames, (spec.height, spec.width), shifts[label], label)
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = split_indices(spec.clips, spec.seed);
    Ok(Dataset { clips, train, val })
}

/// Seeded 80/20 split; both halves are returned in ascending order.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut clip_rng(seed, u64::MAX));
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (pos, i) in order.into_iter().enumerate() {
        if pos % 5 == 4 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn label_histogram(clips: &[MotionClip], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for c in clips {
        h[c.label] += 1;
    }
    h
}

fn clip_file(index: usize) -> String {
    format!("clip_{index:06}")
}

/// One fixture per clip plus `manifest.txt` with `index, label, dx, dy` lines.
pub fn save_clips(clips: &[MotionClip], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, c) in clips.iter().enumerate() {
        write_fixture(dir.join(clip_file(i)), &c.clip)?;
        writeln!(manifest, "{i}, {}, {}, {}", c.label, c.shift.0, c.shift.1).expect("writing to a String");
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn load_clips(dir: impl AsRef<Path>) -> Result<Vec<MotionClip>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let bad = |line: usize, detail: &str| Error::Format {
        what: "dataset manifest",
        detail: format!("line {line}: {detail}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [index, label, dx, dy] = fields[..] else {
            return Err(bad(n + 1, "expected `index, label, dx, dy`"));
        };
        let index: usize = index.parse().map_err(|_| bad(n + 1, "bad index"))?;
        if index != out.len() {
            return Err(bad(n + 1, "indices must be consecutive from 0"));
        }
        let clip = read_fixture(dir.join(clip_file(index))).context(|| format!("clip {index}"))?;
        out.push(MotionClip {
            clip,
            label: label.parse().map_err(|_| bad(n + 1, "bad label"))?,
            shift: (
                dx.parse().map_err(|_| bad(n + 1, "bad dx"))?,
                dy.parse().map_err(|_| bad(n + 1, "bad dy"))?,
            ),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(clips: usize, classes: usize, seed: u64) -> DatasetSpec {
        DatasetSpec { clips, seed, classes, height: 8, width: 8, ..Default::default() }
    }

    #[test]
    fn one_clip_per_direction() {
        let d = gen_direction_dataset(&spec(8, 8, 1)).unwrap();
        let mut shifts: Vec<_> = d.clips.iter().map(|c| c.shift).collect();
        shifts.sort_unstable();
        assert_eq!(shifts, class_shifts(8).unwrap());
    }

    #[test]
    fn histograms_are_uniform_and_seed_independent() {
        let a = gen_direction_dataset(&spec(40, 4, 1)).unwrap();
        let b = gen_direction_dataset(&spec(40, 4, 2)).unwrap();
        assert_eq!(label_histogram(&a.clips, 4), vec![10; 4]);
        assert_eq!(label_histogram(&a.clips, 4), label_histogram(&b.clips, 4));
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert!(x.frame(0).iter().zip(y.frame(0)).all(|(p, q)| p != q));
        }
    }

    #[test]
    fn class_sets_have_the_declared_sizes() {
        assert_eq!(class_shifts(4).unwrap().len(), 4);
        assert_eq!(class_shifts(49).unwrap().len(), 49);
        assert_eq!(max_class_shift(49).unwrap(), 3);
        assert!(class_shifts(9).unwrap_err().is_config());
    }

    #[test]
    fn split_is_eighty_twenty_and_disjoint() {
        let (train, val) = split_indices(100, 3);
        assert_eq!((train.len(), val.len()), (80, 20));
        assert!(val.iter().all(|v| !train.contains(v)));
        assert_eq!(split_indices(100, 3), (train, val));
    }

    #[test]
    fn indivisible_count_is_rejected() {
        assert!(gen_direction_dataset(&spec(10, 8, 0)).unwrap_err().is_config());
    }

    #[test]
    fn saved_clips_reload_identically() {
        let d = gen_direction_dataset(&spec(8, 4, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_clips(&d.clips, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.lines().next().unwrap(), "0, 0, -1, 0");
        assert_eq!(load_clips(dir.path()).unwrap(), d.clips);
    }
}
