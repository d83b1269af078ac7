use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width.
    pub dim: usize,
    /// Number of residual groups.
    pub groups: usize,
    /// Token centers per aggregation block.
    pub centers: usize,
    /// Subgroup size.
    pub group_size: usize,
    /// Refinement rounds while training.
    pub refine_iters: usize,
    /// EMA decay of the token centers.
    pub decay: f64,
    pub heads: usize,
    pub patch: usize,
    pub overlap: usize,
    pub ffn_expand: f64,
    pub scale: usize,
}

pub const KEYS: [&str; 11] = [
    "dim",
    "groups",
    "centers",
    "group_size",
    "refine_iters",
    "decay",
    "heads",
    "patch",
    "overlap",
    "ffn_expand",
    "scale",
];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("L").expect("built-in preset")
    }
}

impl ModelConfig {
    /// `L`, `M` or `S`.
    pub fn preset(name: &str) -> Result<Self> {
        let large = Self {
            dim: 64,
            groups: 4,
            centers: 64,
            group_size: 128,
            refine_iters: 4,
            decay: 0.999,
            heads: 4,
            patch: 16,
            overlap: 4,
            ffn_expand: 2.0,
            scale: 4,
        };
        match name.to_ascii_uppercase().as_str() {
            "L" => Ok(large),
            "M" => Ok(Self {
                dim: 48,
                groups: 3,
                ..large
            }),
            "S" => Ok(Self {
                dim: 40,
                groups: 3,
                ..large
            }),
            _ => Err(Error::Usage(format!(
                "unknown preset `{name}` (expected L, M or S)"
            ))),
        }
    }

    /// Width of the feed-forward hidden layer.
    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.ffn_expand).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        for (name, v) in [
            ("dim", self.dim),
            ("groups", self.groups),
            ("centers", self.centers),
            ("group_size", self.group_size),
            ("heads", self.heads),
            ("patch", self.patch),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.overlap >= self.patch {
            return bad(format!(
                "overlap {} must be below patch {}",
                self.overlap, self.patch
            ));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if self.ffn_expand.is_nan() || self.ffn_expand <= 0.0 || self.hidden() == 0 {
            return bad(format!(
                "ffn_expand {} gives an empty hidden layer",
                self.ffn_expand
            ));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dim" => self.dim.to_string(),
            "groups" => self.groups.to_string(),
            "centers" => self.centers.to_string(),
            "group_size" => self.group_size.to_string(),
            "refine_iters" => self.refine_iters.to_string(),
            "decay" => self.decay.to_string(),
            "heads" => self.heads.to_string(),
            "patch" => self.patch.to_string(),
            "overlap" => self.overlap.to_string(),
            "ffn_expand" => self.ffn_expand.to_string(),
            "scale" => self.scale.to_string(),
            _ => return None,
        })
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("invalid value `{v}` for {key}")))
        }
        match key {
            "dim" => self.dim = num(key, value)?,
            "groups" => self.groups = num(key, value)?,
            "centers" => self.centers = num(key, value)?,
            "group_size" => self.group_size = num(key, value)?,
            "refine_iters" => self.refine_iters = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "overlap" => self.overlap = num(key, value)?,
            "ffn_expand" => self.ffn_expand = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            _ => return Err(Error::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// One `key=value` line per field, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).unwrap_or_default());
        }
        s
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let l = ModelConfig::preset("L").unwrap();
        assert_eq!((l.dim, l.groups, l.centers, l.group_size), (64, 4, 64, 128));
        assert_eq!(l.hidden(), 128);
        assert_eq!(ModelConfig::preset("m").unwrap().dim, 48);
        assert_eq!(ModelConfig::preset("S").unwrap().dim, 40);
        assert!(ModelConfig::preset("XL").is_err());
        for p in ["L", "M", "S"] {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::preset("S").unwrap();
        c.decay = 0.75;
        c.ffn_expand = 2.5;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = ModelConfig::default();
        assert!(c.set("dims", "3").is_err());
        assert!(c.set("dim", "x").is_err());
        assert!(c.apply_text("dim 3").is_err());
        c.set("heads", "3").unwrap();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.scale = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.overlap = 16;
        assert!(c.validate().is_err());
    }
}
