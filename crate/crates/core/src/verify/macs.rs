//! Analytic multiply-accumulate counts and their instrumented counterpart.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::naive::{self, MacCounter};
use crate::attention::{EmimConfig, EmimParams, GlobalParams, Sampling, TokenVolume, VolumeDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Global,
    Emim,
    NonSliding,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Global, Mechanism::Emim, Mechanism::NonSliding];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Global => "global",
            Mechanism::Emim => "emim",
            Mechanism::NonSliding => "non_sliding",
        }
    }

    /// `cfg` with the sampling mode this mechanism implies.
    pub fn apply(self, cfg: &EmimConfig) -> EmimConfig {
        let mut out = *cfg;
        match self {
            Mechanism::Emim => out.sampling = Sampling::Sliding,
            Mechanism::NonSliding => out.sampling = Sampling::NonSliding,
            Mechanism::Global => {}
        }
        out
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mechanism `{s}` (expected global, emim or non_sliding)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacModel {
    pub mechanism: Mechanism,
    pub projections: u64,
    pub affinity: u64,
    pub aggregation: u64,
    pub motion: u64,
}

impl MacModel {
    pub fn total(&self) -> u64 {
        self.projections + self.affinity + self.aggregation + self.motion
    }

    pub fn attention(&self) -> u64 {
        self.affinity + self.aggregation
    }

    pub fn counter(&self) -> MacCounter {
        MacCounter {
            projections: self.projections,
            affinity: self.affinity,
            aggregation: self.aggregation,
            motion: self.motion,
        }
    }
}

/// Counts for one forward pass over `dims`. Softmax, normalization and
/// activation transcendentals are not counted; neither are bias additions.
/// `motion` selects whether the windowed mechanisms carry the motion MLP.
pub fn mac_count(dims: VolumeDims, cfg: &EmimConfig, mechanism: Mechanism, motion: bool) -> MacModel {
    let n = dims.tokens() as u64;
    let d = dims.channels as u64;
    let s2 = cfg.window_len() as u64;
    let heads = cfg.heads as u64;
    let dh = d / heads.max(1);
    let projections = 4 * n * d * d;
    let (affinity, aggregation, motion_macs) = match mechanism {
        Mechanism::Global => (n * n * d, n * n * d, 0),
        Mechanism::Emim | Mechanism::NonSliding => {
            let m = if motion { n * heads * (s2 * 4 * s2 + 4 * s2 * dh) } else { 0 };
            (n * s2 * d, n * s2 * d, m)
        }
    };
    MacModel {
        mechanism,
        projections,
        affinity,
        aggregation,
        motion: motion_macs,
    }
}

/// Runs the naive reference on random data and returns what it counted.
pub fn instrumented_count(dims: VolumeDims, cfg: &EmimConfig, mechanism: Mechanism, motion: bool, seed: u64) -> Result<MacCounter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = TokenVolume::from_tensor(Tensor::randn(&dims.shape(), 1.0, &mut rng))?;
    let mut counter = MacCounter::default();
    match mechanism {
        Mechanism::Global => {
            let p = GlobalParams::init(dims.channels, &mut rng);
            naive::global_forward(&x, &p, cfg.heads, &mut counter)?;
        }
        Mechanism::Emim | Mechanism::NonSliding => {
            let cfg = mechanism.apply(cfg);
            let mut p = EmimParams::init(dims.channels, &cfg, &mut rng);
            if !motion {
                p.motion = None;
            }
            naive::emim_forward(&x, &p, &cfg, &mut counter)?;
        }
    }
    Ok(counter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacCase {
    pub seed: u64,
    pub dims: VolumeDims,
    pub cfg: EmimConfig,
    pub mechanism: Mechanism,
    pub motion: bool,
    pub analytic: MacModel,
    pub counted: MacCounter,
}

impl MacCase {
    pub fn matches(&self) -> bool {
        self.analytic.counter() == self.counted
    }
}

/// Random small configurations, each counted analytically and by the
/// instrumented reference.
pub fn mac_cases(n: usize, seed: u64) -> Result<Vec<MacCase>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let radius = rng.random_range(0..=2usize);
        let side = 2 * radius + 1;
        let heads = rng.random_range(1..=2usize);
        let dims = VolumeDims {
            frames: rng.random_range(1..=3),
            height: rng.random_range(side..=6),
            width: rng.random_range(side..=6),
            channels: heads * rng.random_range(1..=4),
        };
        let cfg = EmimConfig { radius, heads, interval: rng.random_range(1..=2), ..Default::default() };
        let mechanism = Mechanism::ALL[i % 3];
        let motion = rng.random_bool(0.5);
        let case_seed = seed.wrapping_add(i as u64);
        out.push(MacCase {
            seed: case_seed,
            dims,
            cfg,
            mechanism,
            motion,
            analytic: mac_count(dims, &cfg, mechanism, motion),
            counted: instrumented_count(dims, &cfg, mechanism, motion, case_seed)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(t: usize, h: usize, w: usize, d: usize) -> VolumeDims {
        VolumeDims { frames: t, height: h, width: w, channels: d }
    }

    #[test]
    fn degenerate_window_costs_two_n_d() {
        let d = dims(2, 5, 5, 8);
        let cfg = EmimConfig { radius: 0, ..Default::default() };
        let m = mac_count(d, &cfg, Mechanism::Emim, false);
        assert_eq!(m.attention(), 2 * 50 * 8);
        assert_eq!(m.total(), m.projections + m.attention());
    }

    #[test]
    fn full_scale_ratio_is_window_over_tokens() {
        let d = dims(8, 14, 14, 64);
        let cfg = EmimConfig::default();
        let w = mac_count(d, &cfg, Mechanism::Emim, true);
        let g = mac_count(d, &cfg, Mechanism::Global, true);
        // 49 / 1568 in lowest terms is 1 / 32
        assert_eq!(w.attention() * 1568, g.attention() * 49);
        assert_eq!(w.projections, g.projections);
    }

    #[test]
    fn analytic_matches_instrumented() {
        for case in mac_cases(10, 11).unwrap() {
            assert!(case.matches(), "{case:?}");
        }
    }

    #[test]
    fn mechanism_names_parse() {
        for m in Mechanism::ALL {
            assert_eq!(m.name().parse::<Mechanism>().unwrap(), m);
        }
        assert!("local".parse::<Mechanism>().unwrap_err().is_config());
    }
}
