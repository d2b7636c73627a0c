use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Dense self-attention over all tokens.
    Original,
    /// Windowed cross-frame attention with motion features.
    Emim,
}

impl BlockKind {
    pub fn letter(self) -> char {
        match self {
            BlockKind::Original => 'O',
            BlockKind::Emim => 'E',
        }
    }
}

/// Per-layer attention kinds, repeated cyclically over the stack depth.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockPattern(Vec<BlockKind>);

impl BlockPattern {
    pub fn new(kinds: Vec<BlockKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::config("block pattern must not be empty"));
        }
        Ok(Self(kinds))
    }

    pub fn kinds(&self) -> &[BlockKind] {
        &self.0
    }

    /// Kind of every block in a stack of `depth`.
    pub fn realize(&self, depth: usize) -> Vec<BlockKind> {
        self.0.iter().copied().cycle().take(depth).collect()
    }
}

impl Default for BlockPattern {
    fn default() -> Self {
        Self(vec![BlockKind::Emim, BlockKind::Original])
    }
}

impl FromStr for BlockPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kinds = s
            .chars()
            .map(|c| match c {
                'O' => Ok(BlockKind::Original),
                'E' => Ok(BlockKind::Emim),
                other => Err(Error::config(format!("block pattern `{s}` has invalid letter `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(kinds)
    }
}

impl fmt::Display for BlockPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in &self.0 {
            write!(f, "{}", k.letter())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use BlockKind::{Emim as E, Original as O};

    #[test]
    fn replacement_rows() {
        let eo: BlockPattern = "EO".parse().unwrap();
        assert_eq!(eo.realize(4), vec![E, O, E, O]);
        let oo: BlockPattern = "OO".parse().unwrap();
        assert_eq!(oo.realize(4), vec![O, O, O, O]);
        let e: BlockPattern = "E".parse().unwrap();
        assert_eq!(e.realize(3), vec![E, E, E]);
        let oe: BlockPattern = "OE".parse().unwrap();
        assert_eq!(oe.realize(3), vec![O, E, O]);
    }

    #[test]
    fn rejects_bad_patterns() {
        assert!("".parse::<BlockPattern>().is_err());
        assert!("EXO".parse::<BlockPattern>().is_err());
        assert!("e".parse::<BlockPattern>().is_err());
    }

    #[test]
    fn display_round_trips() {
        let p: BlockPattern = "EEO".parse().unwrap();
        assert_eq!(p.to_string(), "EEO");
    }
}
