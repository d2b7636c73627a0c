use std::fmt;
use std::str::FromStr;

use super::VolumeDims;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sampling {
    /// Window centred on the query's own position.
    Sliding,
    /// One window, centred on the frame centre, shared by every query.
    NonSliding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Boundary {
    /// Out-of-frame tokens have every channel set to `pad_value`.
    PadConstant,
    /// Out-of-frame coordinates are clamped to the nearest edge.
    ClampEdge,
}

/// What a query in a frame without a successor samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LastFrame {
    #[default]
    ClampToSelf,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(Sampling { Sliding => "sliding", NonSliding => "non_sliding" });
text_enum!(Boundary { PadConstant => "pad_constant", ClampEdge => "clamp_edge" });

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmimConfig {
    /// Maximum displacement; the window is `(2P+1) × (2P+1)`.
    pub radius: usize,
    /// Frame gap between a query and its key/value frame.
    pub interval: usize,
    pub heads: usize,
    pub sampling: Sampling,
    pub boundary: Boundary,
    pub pad_value: f64,
    pub last_frame: LastFrame,
    pub bias_enabled: bool,
}

impl Default for EmimConfig {
    fn default() -> Self {
        Self {
            radius: 3,
            interval: 1,
            heads: 1,
            sampling: Sampling::Sliding,
            boundary: Boundary::PadConstant,
            pad_value: 1e-6,
            last_frame: LastFrame::ClampToSelf,
            bias_enabled: true,
        }
    }
}

#[cfg(test)]
const CONFIG_KEYS: [&str; 7] = [
    "radius",
    "interval",
    "heads",
    "sampling",
    "boundary",
    "pad_value",
    "bias_enabled",
];

impl EmimConfig {
    pub fn window_side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Number of window slots, `(2P+1)²`.
    pub fn window_len(&self) -> usize {
        self.window_side() * self.window_side()
    }

    pub fn head_dim(&self, channels: usize) -> usize {
        channels / self.heads
    }

    /// Checks the configuration on its own, independent of any volume.
    pub fn check(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::config("interval must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be at least 1"));
        }
        if !self.pad_value.is_finite() {
            return Err(Error::config("pad_value must be finite"));
        }
        Ok(())
    }

    /// Checks the configuration against the volume it will be applied to.
    pub fn validate(&self, dims: VolumeDims) -> Result<()> {
        self.check()?;
        let side = self.window_side();
        if side > dims.height.min(dims.width) {
            return Err(Error::config(format!(
                "window {side}x{side} exceeds spatial extent {}x{}",
                dims.height, dims.width
            )));
        }
        if !dims.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "channels {} not divisible by heads {}",
                dims.channels, self.heads
            )));
        }
        Ok(())
    }

    /// One `key = value` line per field.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in self.to_lines() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub(crate) fn to_lines(&self) -> Vec<String> {
        vec![
            format!("radius = {}", self.radius),
            format!("interval = {}", self.interval),
            format!("heads = {}", self.heads),
            format!("sampling = {}", self.sampling),
            format!("boundary = {}", self.boundary),
            format!("pad_value = {:?}", self.pad_value),
            format!("bias_enabled = {}", self.bias_enabled),
        ]
    }

    /// Parses the text form. Missing keys keep their defaults; unknown or
    /// repeated keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let mut cfg = Self::default();
        for (key, value) in &pairs {
            if !cfg.apply(key, value)? {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Applies one key; returns false if the key is not an EMIM key.
    pub(crate) fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "radius" => self.radius = parse_value(key, value)?,
            "interval" => self.interval = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "sampling" => self.sampling = value.parse()?,
            "boundary" => self.boundary = value.parse()?,
            "pad_value" => self.pad_value = parse_value(key, value)?,
            "bias_enabled" => self.bias_enabled = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
}

/// Splits a `key = value` document into pairs, skipping blanks and `#` comments.
pub(crate) fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            what: "config text",
            detail: format!("line {}: expected `key = value`", lineno + 1),
        })?;
        let key = key.trim().to_string();
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(format!("duplicate key `{key}`")));
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_form_uses_exact_keys() {
        let cfg = EmimConfig {
            radius: 2,
            interval: 2,
            heads: 4,
            sampling: Sampling::NonSliding,
            boundary: Boundary::ClampEdge,
            pad_value: 0.25,
            bias_enabled: false,
            ..Default::default()
        };
        let text = cfg.to_text();
        let keys: Vec<_> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, CONFIG_KEYS);
        assert_eq!(EmimConfig::from_text(&text).unwrap(), cfg);
        assert!(text.contains("sampling = non_sliding"));
        assert!(text.contains("pad_value = 0.25"));
    }

    #[test]
    fn default_pad_value_survives_text() {
        let cfg = EmimConfig::default();
        assert_eq!(EmimConfig::from_text(&cfg.to_text()).unwrap().pad_value, 1e-6);
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        assert!(EmimConfig::from_text("window = 3").is_err());
        assert!(EmimConfig::from_text("radius = 1\nradius = 2").is_err());
        assert!(EmimConfig::from_text("sampling = diagonal").is_err());
        assert!(EmimConfig::from_text("interval = 0").is_err());
        assert!(EmimConfig::from_text("radius 3").is_err());
    }

    #[test]
    fn validate_window_and_heads() {
        let cfg = EmimConfig { radius: 2, heads: 2, ..Default::default() };
        let dims = VolumeDims { frames: 1, height: 5, width: 6, channels: 4 };
        assert!(cfg.validate(dims).is_ok());
        assert!(cfg.validate(VolumeDims { height: 4, ..dims }).unwrap_err().is_config());
        assert!(cfg.validate(VolumeDims { channels: 3, ..dims }).unwrap_err().is_config());
    }
}
