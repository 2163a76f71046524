use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::Deserialize;

use super::LatencyError;

/// Proportional scaling may reach at most this multiple of the longest
/// anchor of a tag.
pub const MAX_EXTRAPOLATION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CostTag {
    Softmax,
    Layernorm,
    Gelu,
    Square,
    ReluSoftmax,
    ScaleAttnRow,
    UniformAttnRow,
    Relu,
}

impl CostTag {
    pub const ALL: [CostTag; 8] = [
        Self::Softmax,
        Self::Layernorm,
        Self::Gelu,
        Self::Square,
        Self::ReluSoftmax,
        Self::ScaleAttnRow,
        Self::UniformAttnRow,
        Self::Relu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Layernorm => "layernorm",
            Self::Gelu => "gelu",
            Self::Square => "square",
            Self::ReluSoftmax => "relu_softmax",
            Self::ScaleAttnRow => "scale_attn_row",
            Self::UniformAttnRow => "uniform_attn_row",
            Self::Relu => "relu",
        }
    }

    pub fn rule(self) -> ScalingRule {
        match self {
            Self::Softmax | Self::Layernorm | Self::Square | Self::ReluSoftmax => {
                ScalingRule::Proportional
            }
            Self::Gelu | Self::Relu => ScalingRule::PerElement,
            Self::ScaleAttnRow | Self::UniformAttnRow => ScalingRule::Free,
        }
    }
}

impl fmt::Display for CostTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostTag {
    type Err = LatencyError;

    fn from_str(s: &str) -> Result<Self, LatencyError> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| LatencyError::UnknownTag(s.to_string()))
    }
}

/// How a cost is derived for a length without an exact anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingRule {
    /// `cost(n) = cost(a) · n / a` from the nearest anchor `a`.
    Proportional,
    /// `n` independent scalar evaluations: `cost(n) = n · cost(1)`.
    PerElement,
    /// Linear operation, no garbled-circuit cost.
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub tag: CostTag,
    pub n: usize,
    pub reluops: f64,
}

/// Measured costs in ReLUOps for specific `(tag, length)` pairs.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CostTable {
    anchors: Vec<Anchor>,
}

impl CostTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    /// Adds an anchor, replacing any existing one for the same pair.
    pub fn insert(&mut self, tag: CostTag, n: usize, reluops: f64) -> Result<(), LatencyError> {
        if n == 0 {
            return Err(LatencyError::ZeroLength);
        }
        if !(reluops > 0.0 && reluops.is_finite()) {
            return Err(LatencyError::InvalidAnchor { tag, n, reluops });
        }
        match self.anchors.iter_mut().find(|a| a.tag == tag && a.n == n) {
            Some(a) => a.reluops = reluops,
            None => self.anchors.push(Anchor { tag, n, reluops }),
        }
        Ok(())
    }

    pub fn anchor(&self, tag: CostTag, n: usize) -> Option<f64> {
        self.anchors
            .iter()
            .find(|a| a.tag == tag && a.n == n)
            .map(|a| a.reluops)
    }

    /// Applies overrides from CSV with header `tag,n,reluops`.
    pub fn apply_overrides<R: Read>(&mut self, reader: R) -> Result<(), LatencyError> {
        #[derive(Deserialize)]
        struct Row {
            tag: String,
            n: usize,
            reluops: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            self.insert(row.tag.trim().parse()?, row.n, row.reluops)?;
        }
        Ok(())
    }

    /// Whether `cost_of(tag, n)` is an exact table entry rather than a
    /// scaled estimate.
    pub fn is_exact(&self, tag: CostTag, n: usize) -> bool {
        tag.rule() == ScalingRule::Free || self.anchor(tag, n).is_some()
    }
}

/// Garbled-circuit benchmark anchors, normalized to one ReLU.
pub fn builtin_cost_table() -> CostTable {
    let mut t = CostTable::new();
    for (tag, n, c) in [
        (CostTag::Softmax, 197, 18586.0),
        (CostTag::Layernorm, 192, 6504.0),
        (CostTag::Gelu, 1, 270.0),
        (CostTag::Square, 197, 3248.0),
        (CostTag::ReluSoftmax, 257, 4428.0),
        (CostTag::ReluSoftmax, 65, 1133.0),
        (CostTag::Layernorm, 256, 8614.0),
        (CostTag::Relu, 1, 1.0),
    ] {
        t.insert(tag, n, c).expect("builtin anchors are valid");
    }
    t
}

/// Cost in ReLUOps of one `tag` evaluation on a length-`n` vector.
pub fn cost_of(tag: CostTag, n: usize, table: &CostTable) -> Result<f64, LatencyError> {
    if n == 0 {
        return Err(LatencyError::ZeroLength);
    }
    let rule = tag.rule();
    if rule == ScalingRule::Free {
        return Ok(0.0);
    }
    if let Some(c) = table.anchor(tag, n) {
        return Ok(c);
    }
    let anchors: Vec<&Anchor> = table.anchors.iter().filter(|a| a.tag == tag).collect();
    let nearest = anchors
        .iter()
        .min_by_key(|a| (a.n.abs_diff(n), a.n))
        .ok_or(LatencyError::MissingAnchor(tag))?;
    match rule {
        ScalingRule::PerElement => Ok(nearest.reluops / nearest.n as f64 * n as f64),
        ScalingRule::Proportional => {
            let longest = anchors.iter().map(|a| a.n).max().unwrap_or(0);
            if n > MAX_EXTRAPOLATION * longest {
                return Err(LatencyError::Extrapolation {
                    tag,
                    n,
                    nearest: nearest.n,
                });
            }
            Ok(nearest.reluops * n as f64 / nearest.n as f64)
        }
        ScalingRule::Free => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_are_exact() {
        let t = builtin_cost_table();
        assert_eq!(cost_of(CostTag::Layernorm, 192, &t).unwrap(), 6504.0);
        assert_eq!(cost_of(CostTag::Softmax, 197, &t).unwrap(), 18586.0);
        assert_eq!(cost_of(CostTag::Gelu, 1, &t).unwrap(), 270.0);
        assert_eq!(cost_of(CostTag::Relu, 1, &t).unwrap(), 1.0);
    }

    #[test]
    fn scaling_rules() {
        let t = builtin_cost_table();
        assert_eq!(cost_of(CostTag::Softmax, 394, &t).unwrap(), 37172.0);
        assert_eq!(cost_of(CostTag::Gelu, 3072, &t).unwrap(), 270.0 * 3072.0);
        assert_eq!(cost_of(CostTag::UniformAttnRow, 17, &t).unwrap(), 0.0);
        assert_eq!(cost_of(CostTag::ScaleAttnRow, 197, &t).unwrap(), 0.0);
        // 224 is nearer to 192 than to 256.
        assert_eq!(
            cost_of(CostTag::Layernorm, 224, &t).unwrap(),
            6504.0 * 224.0 / 192.0
        );
        assert_eq!(
            cost_of(CostTag::Layernorm, 240, &t).unwrap(),
            8614.0 * 240.0 / 256.0
        );
        assert_eq!(
            cost_of(CostTag::ReluSoftmax, 100, &t).unwrap(),
            1133.0 * 100.0 / 65.0
        );
    }

    #[test]
    fn nearest_anchor_ties_prefer_shorter() {
        let mut t = CostTable::new();
        t.insert(CostTag::Softmax, 10, 100.0).unwrap();
        t.insert(CostTag::Softmax, 20, 300.0).unwrap();
        assert_eq!(cost_of(CostTag::Softmax, 15, &t).unwrap(), 150.0);
    }

    #[test]
    fn far_extrapolation_is_refused() {
        let t = builtin_cost_table();
        assert!(cost_of(CostTag::Softmax, 4 * 197, &t).is_ok());
        let err = cost_of(CostTag::Softmax, 4 * 197 + 1, &t).unwrap_err();
        assert!(matches!(
            err,
            LatencyError::Extrapolation { nearest: 197, .. }
        ));
        assert!(err.to_string().contains("softmax(789)"));
    }

    #[test]
    fn overrides_replace_and_extend() {
        let mut t = builtin_cost_table();
        let csv = "tag,n,reluops\nsoftmax,1000,50000\nlayernorm,192,7000\n";
        t.apply_overrides(csv.as_bytes()).unwrap();
        assert_eq!(cost_of(CostTag::Softmax, 1000, &t).unwrap(), 50000.0);
        assert_eq!(cost_of(CostTag::Layernorm, 192, &t).unwrap(), 7000.0);
        assert!(t.is_exact(CostTag::Softmax, 1000));
        assert!(!t.is_exact(CostTag::Softmax, 17));
    }

    #[test]
    fn bad_inputs() {
        let t = builtin_cost_table();
        assert!(matches!(
            cost_of(CostTag::Softmax, 0, &t),
            Err(LatencyError::ZeroLength)
        ));
        assert!(matches!(
            "tanh".parse::<CostTag>(),
            Err(LatencyError::UnknownTag(_))
        ));
        assert!(matches!(
            cost_of(CostTag::Square, 3, &CostTable::new()),
            Err(LatencyError::MissingAnchor(_))
        ));
        let mut t = CostTable::new();
        assert!(t.insert(CostTag::Gelu, 1, 0.0).is_err());
        assert!(t
            .apply_overrides("tag,n,reluops\nswish,1,5\n".as_bytes())
            .is_err());
    }

    #[test]
    fn tag_names_round_trip() {
        for tag in CostTag::ALL {
            assert_eq!(tag.name().parse::<CostTag>().unwrap(), tag);
        }
    }
}
