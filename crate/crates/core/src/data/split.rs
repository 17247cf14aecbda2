use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Labeled fraction as an exact ratio, e.g. `1/8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num >= den {
            return Err(Error::Config(format!("fraction {num}/{den} must lie strictly in (0, 1)")));
        }
        Ok(Self { num, den })
    }

    /// `round(self * n)`, halves rounded up.
    pub fn of(&self, n: usize) -> usize {
        ((2 * self.num * n as u64 + self.den) / (2 * self.den)) as usize
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("fraction `{s}` must look like 1/8")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad fraction `{s}`")))
        };
        Fraction::new(parse(a)?, parse(b)?)
    }
}

impl TryFrom<String> for Fraction {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub labeled_fraction: Fraction,
    #[serde(default)]
    pub seed: u64,
    /// File of labeled ids (one per line); overrides random sampling.
    #[serde(default)]
    pub explicit_list: Option<PathBuf>,
}

/// Partitions `ids` into (labeled, unlabeled). Both lists come back sorted.
pub fn make_splits(ids: &[String], split: &SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    let (mut labeled, mut unlabeled) = match &split.explicit_list {
        Some(path) => {
            let text = std::fs::read_to_string(path).at(path)?;
            let known: HashSet<&str> = ids.iter().map(String::as_str).collect();
            let chosen: HashSet<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            if let Some(bad) = chosen.iter().find(|id| !known.contains(*id)) {
                return Err(Error::Config(format!("split list names unknown id `{bad}`")));
            }
            let (l, u): (Vec<String>, Vec<String>) =
                ids.iter().cloned().partition(|id| chosen.contains(id.as_str()));
            (l, u)
        }
        None => {
            let mut shuffled = ids.to_vec();
            shuffled.sort();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
            let n = split.labeled_fraction.of(ids.len());
            let unlabeled = shuffled.split_off(n.min(shuffled.len()));
            (shuffled, unlabeled)
        }
    };
    if labeled.is_empty() {
        return Err(Error::Config(format!(
            "split {} of {} samples leaves no labeled data",
            split.labeled_fraction,
            ids.len()
        )));
    }
    labeled.sort();
    unlabeled.sort();
    Ok((labeled, unlabeled))
}
