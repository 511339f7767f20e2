use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(segment length, dilation rate)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pattern {
    pub segment_len: usize,
    pub dilation: usize,
}

impl Pattern {
    pub const fn new(segment_len: usize, dilation: usize) -> Self {
        Self {
            segment_len,
            dilation,
        }
    }

    /// Rows kept per segment for a given head offset: `ceil((w - s) / r)`.
    pub fn rows_per_segment(&self, offset: usize) -> usize {
        (self.segment_len - offset).div_ceil(self.dilation)
    }

    /// Offset of `head` under this pattern's dilation.
    #[inline]
    pub fn head_offset(&self, head: usize) -> usize {
        head % self.dilation
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(w={}, r={})", self.segment_len, self.dilation)
    }
}

/// Softmax temperature applied to `⟨q, k⟩`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scale {
    /// `1 / sqrt(head_dim)`
    InvSqrtHeadDim,
    Fixed(f64),
}

impl Scale {
    pub fn resolve(self, head_dim: usize) -> f64 {
        match self {
            Scale::InvSqrtHeadDim => 1.0 / (head_dim as f64).sqrt(),
            Scale::Fixed(s) => s,
        }
    }
}

/// Parameters of a geometric schedule `w_i = w0·αⁱ`, `r_i = αⁱ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometric {
    pub w0: usize,
    pub alpha: usize,
}

/// Validated set of dilated attention patterns plus head count, causal flag
/// and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedConfig {
    patterns: Vec<Pattern>,
    heads: usize,
    causal: bool,
    scale: Scale,
    geometric: Option<Geometric>,
}

impl DilatedConfig {
    /// Schedule-checked constructor: segment lengths strictly increasing and
    /// dilation rates non-decreasing. A schedule without a leading `r = 1`
    /// pattern is accepted with a warning (see [`Self::warnings`]).
    pub fn new(patterns: &[(usize, usize)], heads: usize) -> Result<Self> {
        let cfg = Self::unordered(patterns, heads)?;
        for (i, pair) in cfg.patterns.windows(2).enumerate() {
            if pair[1].segment_len <= pair[0].segment_len {
                return Err(Error::config(format!(
                    "segment lengths must strictly increase: pattern {} {} follows {}",
                    i + 1,
                    pair[1],
                    pair[0]
                )));
            }
            if pair[1].dilation < pair[0].dilation {
                return Err(Error::config(format!(
                    "dilation rates must not decrease: pattern {} {} follows {}",
                    i + 1,
                    pair[1],
                    pair[0]
                )));
            }
        }
        for w in cfg.warnings() {
            log::warn!("{w}");
        }
        Ok(cfg)
    }

    /// Structural checks only (`1 ≤ r ≤ w`, `heads ≥ 1`, non-empty); pattern
    /// order is free. The mixture does not depend on pattern order, so this is
    /// what order-permutation tests build on.
    pub fn unordered(patterns: &[(usize, usize)], heads: usize) -> Result<Self> {
        if patterns.is_empty() {
            return Err(Error::config("at least one pattern is required"));
        }
        if heads == 0 {
            return Err(Error::config("heads must be at least 1"));
        }
        let patterns: Vec<Pattern> = patterns.iter().map(|&(w, r)| Pattern::new(w, r)).collect();
        for (i, p) in patterns.iter().enumerate() {
            if p.dilation == 0 || p.segment_len == 0 || p.dilation > p.segment_len {
                return Err(Error::config(format!("pattern {i} {p}: need 1 <= r <= w")));
            }
        }
        Ok(Self {
            patterns,
            heads,
            causal: false,
            scale: Scale::InvSqrtHeadDim,
            geometric: None,
        })
    }

    /// Geometric schedule `w = {w0, w0·α, …}` clamped so the last segment is
    /// `n`, with `r = {1, α, α², …}` aligned index-wise.
    pub fn geometric(w0: usize, alpha: usize, n: usize) -> Result<Self> {
        if w0 == 0 || alpha < 2 {
            return Err(Error::config(format!(
                "geometric preset needs w0 >= 1 and integral alpha >= 2 (got {w0}, {alpha})"
            )));
        }
        if !n.is_multiple_of(w0) {
            return Err(Error::config(format!("w0={w0} does not divide n={n}")));
        }
        let mut pairs = Vec::new();
        let (mut w, mut r) = (w0, 1usize);
        while w < n {
            pairs.push((w, r));
            w = w
                .checked_mul(alpha)
                .ok_or_else(|| Error::config("geometric schedule overflows"))?;
            r *= alpha;
        }
        pairs.push((n, r));
        for (i, &(w, r)) in pairs.iter().enumerate() {
            if !n.is_multiple_of(w) {
                return Err(Error::config(format!(
                    "pattern {i} (w={w}) does not divide n={n}"
                )));
            }
            if r > w {
                return Err(Error::config(format!(
                    "pattern {i}: rate {r} exceeds segment {w}"
                )));
            }
        }
        let mut cfg = Self::new(&pairs, 1)?;
        cfg.geometric = Some(Geometric { w0, alpha });
        Ok(cfg)
    }

    /// Named schedules: `longnet-32k`, `geo:<w0>,<alpha>` (expanded for `n`),
    /// or `file:<path>` pointing at a JSON config.
    pub fn preset(name: &str, n: usize) -> Result<Self> {
        if name == "longnet-32k" {
            return Self::new(&LONGNET_32K, 1);
        }
        if let Some(rest) = name.strip_prefix("geo:") {
            let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::config(format!("bad geometric preset '{name}'")))
            };
            if parts.len() != 2 {
                return Err(Error::config(format!(
                    "geometric preset must be geo:w0,alpha, got '{name}'"
                )));
            }
            return Self::geometric(parse(parts[0])?, parse(parts[1])?, n);
        }
        if let Some(path) = name.strip_prefix("file:") {
            return Self::from_json_file(path);
        }
        Err(Error::config(format!("unknown preset '{name}'")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConfigFile =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        file.into_config()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ConfigFile::from(self)).expect("config serializes")
    }

    pub fn with_heads(mut self, heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::config("heads must be at least 1"));
        }
        self.heads = heads;
        Ok(self)
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_scale(mut self, scale: Scale) -> Result<Self> {
        if let Scale::Fixed(s) = scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config(format!(
                    "scale must be positive and finite, got {s}"
                )));
            }
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    /// Set only for configs built by [`Self::geometric`].
    pub fn geometric_params(&self) -> Option<Geometric> {
        self.geometric
    }

    pub fn max_segment(&self) -> usize {
        self.patterns
            .iter()
            .map(|p| p.segment_len)
            .max()
            .unwrap_or(1)
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.patterns.iter().any(|p| p.dilation == 1) {
            out.push(
                "no pattern with dilation 1: some (head, row) pairs may be left uncovered"
                    .to_string(),
            );
        }
        out
    }

    /// Every segment length must divide the sequence length.
    pub fn check_length(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::config("sequence length must be positive"));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if !n.is_multiple_of(p.segment_len) {
                return Err(Error::config(format!(
                    "pattern {i} {p}: segment length does not divide sequence length {n}"
                )));
            }
        }
        Ok(())
    }

    /// Checks the feature width splits evenly over heads; returns head width.
    pub fn head_dim(&self, width: usize) -> Result<usize> {
        if width == 0 || !width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "feature width {width} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(width / self.heads)
    }
}

/// Segment lengths and dilation rates used for the 32K-token language models.
pub const LONGNET_32K: [(usize, usize); 5] =
    [(2048, 1), (4096, 2), (8192, 4), (16384, 6), (32768, 12)];

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    patterns: Vec<(usize, usize)>,
    #[serde(default = "one")]
    heads: usize,
    #[serde(default)]
    causal: bool,
    #[serde(default)]
    scale: ScaleSpec,
}

fn one() -> usize {
    1
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScaleSpec {
    Named(String),
    Value(f64),
}

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec::Named("rsqrt_d".into())
    }
}

impl ConfigFile {
    fn into_config(self) -> Result<DilatedConfig> {
        let scale = match self.scale {
            ScaleSpec::Named(s) if s == "rsqrt_d" => Scale::InvSqrtHeadDim,
            ScaleSpec::Named(s) => return Err(Error::config(format!("unknown scale '{s}'"))),
            ScaleSpec::Value(v) => Scale::Fixed(v),
        };
        DilatedConfig::new(&self.patterns, self.heads)?
            .with_causal(self.causal)
            .with_scale(scale)
    }
}

impl From<&DilatedConfig> for ConfigFile {
    fn from(c: &DilatedConfig) -> Self {
        ConfigFile {
            patterns: c
                .patterns
                .iter()
                .map(|p| (p.segment_len, p.dilation))
                .collect(),
            heads: c.heads,
            causal: c.causal,
            scale: match c.scale {
                Scale::InvSqrtHeadDim => ScaleSpec::Named("rsqrt_d".into()),
                Scale::Fixed(v) => ScaleSpec::Value(v),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(c: &DilatedConfig) -> Vec<(usize, usize)> {
        c.patterns()
            .iter()
            .map(|p| (p.segment_len, p.dilation))
            .collect()
    }

    #[test]
    fn geometric_expansion() {
        let c = DilatedConfig::geometric(2048, 2, 32768).unwrap();
        assert_eq!(
            pairs(&c),
            vec![(2048, 1), (4096, 2), (8192, 4), (16384, 8), (32768, 16)]
        );
        assert_eq!(
            pairs(&DilatedConfig::geometric(4, 2, 4).unwrap()),
            vec![(4, 1)]
        );
        assert_eq!(
            pairs(&DilatedConfig::geometric(4, 2, 16).unwrap()),
            vec![(4, 1), (8, 2), (16, 4)]
        );
        assert_eq!(c.geometric_params(), Some(Geometric { w0: 2048, alpha: 2 }));
    }

    #[test]
    fn geometric_clamps_last_segment() {
        // 4, 12, then clamp 36 -> 24; 12 divides 24
        let c = DilatedConfig::geometric(4, 3, 24).unwrap();
        assert_eq!(pairs(&c), vec![(4, 1), (12, 3), (24, 9)]);
        // 4, 8, 16 -> 16 does not divide 24
        assert!(DilatedConfig::geometric(4, 2, 24).is_err());
        assert!(DilatedConfig::geometric(3, 2, 16).is_err());
        assert!(DilatedConfig::geometric(4, 1, 16).is_err());
    }

    #[test]
    fn longnet_preset_is_not_geometric() {
        let c = DilatedConfig::preset("longnet-32k", 32768).unwrap();
        assert_eq!(pairs(&c), LONGNET_32K.to_vec());
        assert_eq!(c.geometric_params(), None);
        assert!(c.check_length(32768).is_ok());
        assert!(c.check_length(16384).is_err());
    }

    #[test]
    fn preset_parsing() {
        let c = DilatedConfig::preset("geo:256,2", 2048).unwrap();
        assert_eq!(pairs(&c), vec![(256, 1), (512, 2), (1024, 4), (2048, 8)]);
        assert!(DilatedConfig::preset("geo:256", 2048).is_err());
        assert!(DilatedConfig::preset("geo:x,2", 2048).is_err());
        assert!(DilatedConfig::preset("nope", 2048).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(DilatedConfig::new(&[(4, 1), (4, 2)], 1).is_err());
        assert!(DilatedConfig::new(&[(4, 2), (8, 1)], 1).is_err());
        assert!(DilatedConfig::new(&[(4, 5)], 1).is_err());
        assert!(DilatedConfig::new(&[(4, 0)], 1).is_err());
        assert!(DilatedConfig::new(&[], 1).is_err());
        assert!(DilatedConfig::new(&[(4, 1)], 0).is_err());
        let partial = DilatedConfig::new(&[(4, 2)], 1).unwrap();
        assert_eq!(partial.warnings().len(), 1);
        assert!(DilatedConfig::unordered(&[(16, 2), (4, 1)], 2).is_ok());
    }

    #[test]
    fn length_error_names_pattern() {
        let c = DilatedConfig::new(&[(4, 1), (8, 2)], 1).unwrap();
        match c.check_length(12) {
            Err(Error::Config(msg)) => assert!(msg.contains("pattern 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_config() {
        let c = DilatedConfig::from_json(
            r#"{"patterns": [[4,1],[8,2]], "heads": 2, "causal": true, "scale": "rsqrt_d"}"#,
        )
        .unwrap();
        assert_eq!(pairs(&c), vec![(4, 1), (8, 2)]);
        assert_eq!(c.heads(), 2);
        assert!(c.causal());
        assert_eq!(c.scale(), Scale::InvSqrtHeadDim);
        let c2 = DilatedConfig::from_json(
            r#"{"patterns": [[4,1]], "heads": 1, "causal": false, "scale": 0.25}"#,
        )
        .unwrap();
        assert_eq!(c2.scale(), Scale::Fixed(0.25));
        let c3 = DilatedConfig::from_json(r#"{"patterns": [[4,1]]}"#).unwrap();
        assert_eq!(c3.scale(), Scale::InvSqrtHeadDim);
        assert_eq!(DilatedConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(DilatedConfig::from_json(r#"{"patterns": [[4,1]], "scale": "huge"}"#).is_err());
        assert!(DilatedConfig::from_json(r#"{"patterns": [[4,1]], "scale": -1.0}"#).is_err());
    }
}
