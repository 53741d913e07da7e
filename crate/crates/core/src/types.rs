//! Identifiers and small value types shared by every module.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque item identifier. Ordering is lexicographic and is used for every
/// deterministic tie-break in the crate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn new(id: impl Into<String>) -> Self {
        ItemId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_owned())
    }
}

impl From<String> for ItemId {
    fn from(s: String) -> Self {
        ItemId(s)
    }
}

/// Three-level taxonomy path, root first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryPath([String; 3]);

impl CategoryPath {
    pub const SEPARATOR: char = '/';

    pub fn new(root: impl Into<String>, mid: impl Into<String>, leaf: impl Into<String>) -> Result<Self> {
        Self::try_from(vec![root.into(), mid.into(), leaf.into()])
    }

    pub fn levels(&self) -> &[String; 3] {
        &self.0
    }

    pub fn leaf(&self) -> &str {
        &self.0[2]
    }

    /// The path truncated to its first `depth` levels (1..=3).
    pub fn prefix(&self, depth: usize) -> &[String] {
        &self.0[..depth.clamp(1, 3)]
    }
}

impl TryFrom<Vec<String>> for CategoryPath {
    type Error = Error;

    fn try_from(levels: Vec<String>) -> Result<Self> {
        if levels.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "category_path must have exactly 3 levels, got {}",
                levels.len()
            )));
        }
        for level in &levels {
            if level.is_empty() || level.contains(Self::SEPARATOR) {
                return Err(Error::InvalidConfig(format!(
                    "category level `{level}` must be nonempty and must not contain `{}`",
                    Self::SEPARATOR
                )));
            }
        }
        let [a, b, c]: [String; 3] = levels.try_into().expect("length checked");
        Ok(CategoryPath([a, b, c]))
    }
}

impl From<CategoryPath> for Vec<String> {
    fn from(path: CategoryPath) -> Self {
        path.0.into()
    }
}

impl fmt::Display for CategoryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.0[0], self.0[1], self.0[2])
    }
}

impl FromStr for CategoryPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::try_from(s.split(Self::SEPARATOR).map(str::to_owned).collect::<Vec<_>>())
    }
}

/// Outcome metric an estimate or match is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Orders,
    Gmv,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Orders => "orders",
            Metric::Gmv => "gmv",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orders" => Ok(Metric::Orders),
            "gmv" => Ok(Metric::Gmv),
            other => Err(Error::InvalidConfig(format!("unknown metric `{other}`"))),
        }
    }
}

/// Half-open range of simulation days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DayWindow {
    pub start: u32,
    pub end: u32,
}

impl DayWindow {
    pub fn new(start: u32, end: u32) -> Self {
        DayWindow { start, end }
    }

    pub fn contains(&self, day: u32) -> bool {
        self.start <= day && day < self.end
    }

    pub fn len(&self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<u32> {
        self.start..self.end
    }
}

impl From<Range<u32>> for DayWindow {
    fn from(r: Range<u32>) -> Self {
        DayWindow::new(r.start, r.end)
    }
}

impl fmt::Display for DayWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for DayWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| Error::InvalidConfig(format!("window `{s}` is not of the form START..END")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|e| Error::InvalidConfig(format!("window `{s}`: {e}")))
        };
        Ok(DayWindow::new(parse(a)?, parse(b)?))
    }
}

/// Stable 64-bit mixing of a seed with extra words, used to derive
/// independent RNG streams (per day, per target, per replicate).
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5eed_0f_c0ff_ee00);
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

/// FNV-1a over the bytes of a string; platform independent.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_path_requires_three_levels() {
        assert!(CategoryPath::try_from(vec!["a".to_string(), "b".to_string()]).is_err());
        assert!(CategoryPath::new("a", "b/x", "c").is_err());
        let p: CategoryPath = "a/b/c".parse().unwrap();
        assert_eq!(p.leaf(), "c");
        assert_eq!(p.prefix(2), ["a".to_string(), "b".to_string()]);
        assert_eq!(p.to_string(), "a/b/c");
    }

    #[test]
    fn category_path_json_is_a_list() {
        let p = CategoryPath::new("a", "b", "c").unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"["a","b","c"]"#);
        assert!(serde_json::from_str::<CategoryPath>(r#"["a","b"]"#).is_err());
    }

    #[test]
    fn window_parse() {
        let w: DayWindow = "2..9".parse().unwrap();
        assert_eq!(w, DayWindow::new(2, 9));
        assert_eq!(w.len(), 7);
        assert!("2-9".parse::<DayWindow>().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
