use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelSpec;
use crate::error::{HlfpError, Result};

/// Strictly increasing, non-empty set of 1-based class indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CutoutSet(Vec<usize>);

impl CutoutSet {
    /// Sorts `classes`; rejects empty sets, duplicates and indices outside `1..=k`.
    pub fn new(mut classes: Vec<usize>, k: usize) -> Result<Self> {
        let set = {
            classes.sort_unstable();
            CutoutSet::try_from(classes)?
        };
        if let Some(&bad) = set.0.iter().find(|&&c| c > k) {
            return Err(HlfpError::InvalidArgument(format!("class {bad} is outside 1..={k}")));
        }
        Ok(set)
    }

    pub fn full(k: usize) -> Self {
        CutoutSet((1..=k).collect())
    }

    /// Parses 1-based inclusive ranges and lists such as `1-5,8`.
    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let mut classes = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let parse_one = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| HlfpError::InvalidArgument(format!("`{s}` is not a class index")))
            };
            match part.split_once('-') {
                Some((lo, hi)) => {
                    let (lo, hi) = (parse_one(lo)?, parse_one(hi)?);
                    if lo > hi {
                        return Err(HlfpError::InvalidArgument(format!("empty range `{part}`")));
                    }
                    classes.extend(lo..=hi);
                }
                None => classes.push(parse_one(part)?),
            }
        }
        CutoutSet::new(classes, k)
    }

    pub fn classes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    /// Position of `class` inside the set.
    pub fn position(&self, class: usize) -> Option<usize> {
        self.0.binary_search(&class).ok()
    }
}

impl TryFrom<Vec<usize>> for CutoutSet {
    type Error = HlfpError;

    fn try_from(classes: Vec<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(HlfpError::InvalidArgument("cutout set is empty".into()));
        }
        if classes.contains(&0) {
            return Err(HlfpError::InvalidArgument("class indices start at 1".into()));
        }
        if let Some(w) = classes.windows(2).find(|w| w[0] >= w[1]) {
            return Err(HlfpError::InvalidArgument(if w[0] == w[1] {
                format!("class {} listed twice", w[0])
            } else {
                "cutout classes must be strictly increasing".to_string()
            }));
        }
        Ok(CutoutSet(classes))
    }
}

impl From<CutoutSet> for Vec<usize> {
    fn from(c: CutoutSet) -> Self {
        c.0
    }
}

impl fmt::Display for CutoutSet {
    /// Compact range form, e.g. `1-5,8`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut i = 0;
        while i < self.0.len() {
            let start = self.0[i];
            let mut end = start;
            while i + 1 < self.0.len() && self.0[i + 1] == end + 1 {
                i += 1;
                end += 1;
            }
            if !first {
                f.write_str(",")?;
            }
            first = false;
            if end > start {
                write!(f, "{start}-{end}")?;
            } else {
                write!(f, "{start}")?;
            }
            i += 1;
        }
        Ok(())
    }
}

/// Keeps the trunk and only the branches of `classes` (plus the superclass
/// tiers they read from). Parameter names are unchanged, so the cutout loads
/// from the full model's checkpoint as is.
pub fn apply_cutout(model: &ModelSpec, classes: &CutoutSet) -> Result<ModelSpec> {
    if !model.has_branches() {
        return Err(HlfpError::Unsupported(format!(
            "{} has no class branches; a serial model must be retrained for a class subset",
            model.name
        )));
    }
    if let Some(&bad) = classes.classes().iter().find(|&&c| c > model.num_classes) {
        return Err(HlfpError::InvalidArgument(format!(
            "class {bad} is outside 1..={}",
            model.num_classes
        )));
    }
    if let Some(&gone) = classes
        .classes()
        .iter()
        .find(|c| model.active_classes.binary_search(c).is_err())
    {
        return Err(HlfpError::InvalidArgument(format!(
            "class {gone} is not present in this model"
        )));
    }

    let mut out = model.clone();
    out.active_classes = classes.classes().to_vec();
    for s in &mut out.branch_stages {
        s.parallelism = classes.len();
    }
    let supers = out.active_superclasses().len();
    if let Some(tier) = &mut out.superclass {
        for s in &mut tier.stages {
            s.parallelism = supers;
        }
    }
    Ok(out)
}
