use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A layer whose output can be passed through dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Embedding,
    Recurrent,
    IntraAttention,
    InterAttention,
    /// Both the input (relation vector) and the hidden activation of the MLP.
    Mlp,
}

impl Site {
    pub const ALL: [Site; 5] = [
        Site::Embedding,
        Site::Recurrent,
        Site::IntraAttention,
        Site::InterAttention,
        Site::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Embedding => "embedding",
            Site::Recurrent => "recurrent",
            Site::IntraAttention => "intra_attention",
            Site::InterAttention => "inter_attention",
            Site::Mlp => "mlp",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dropout site {s:?} (expected one of embedding, recurrent, intra_attention, inter_attention, mlp)"
                ))
            })
    }
}

/// Set of sites that apply dropout.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PlacementSet(u8);

impl PlacementSet {
    pub const fn empty() -> Self {
        PlacementSet(0)
    }

    pub fn all() -> Self {
        Self::from_sites(&Site::ALL)
    }

    pub fn from_sites(sites: &[Site]) -> Self {
        PlacementSet(sites.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn contains(self, site: Site) -> bool {
        self.0 & site.bit() != 0
    }

    pub fn insert(&mut self, site: Site) {
        self.0 |= site.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn sites(self) -> Vec<Site> {
        Site::ALL
            .into_iter()
            .filter(|s| self.contains(*s))
            .collect()
    }
}

impl fmt::Debug for PlacementSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.sites()).finish()
    }
}

/// Comma-separated site names, or `none`.
impl fmt::Display for PlacementSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.sites().into_iter().map(Site::as_str).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for PlacementSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::empty());
        }
        let mut set = Self::empty();
        for part in s.split(',') {
            set.insert(part.parse()?);
        }
        Ok(set)
    }
}

pub const NUM_MODELS: u8 = 13;

/// Dropout placement of each numbered model configuration (1-based).
/// Model 1 is the unregularized baseline; model 13 repeats model 9's sites
/// and is intended for a narrower network.
pub fn placement_for_model(model_id: u8) -> Result<PlacementSet> {
    use Site::*;
    let sites: &[Site] = match model_id {
        1 => &[],
        2 => &[Embedding],
        3 => &[Recurrent],
        4 => &[Embedding, Recurrent],
        5 => &[Recurrent, IntraAttention],
        6 => &[InterAttention, Mlp],
        7 => &[Recurrent, InterAttention, Mlp],
        8 => &[Embedding, InterAttention, Mlp],
        9 => &[Embedding, Recurrent, InterAttention, Mlp],
        10 => &[Recurrent, IntraAttention, InterAttention, Mlp],
        11 => &[Embedding, IntraAttention, InterAttention, Mlp],
        12 => &[Embedding, Recurrent, IntraAttention, InterAttention, Mlp],
        13 => &[Embedding, Recurrent, InterAttention, Mlp],
        _ => {
            return Err(Error::Config(format!(
                "model id {model_id} out of range 1..={NUM_MODELS}"
            )))
        }
    };
    Ok(PlacementSet::from_sites(sites))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        let set: PlacementSet = "mlp, embedding".parse().unwrap();
        assert_eq!(set.to_string(), "embedding,mlp");
        assert_eq!(
            "none".parse::<PlacementSet>().unwrap(),
            PlacementSet::empty()
        );
        assert_eq!(PlacementSet::empty().to_string(), "none");
        assert!("embedding,dense".parse::<PlacementSet>().is_err());
        let all: PlacementSet = PlacementSet::all().to_string().parse().unwrap();
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn out_of_range_model_ids() {
        assert!(placement_for_model(0).is_err());
        assert!(placement_for_model(14).is_err());
    }

    #[test]
    fn baseline_and_full_models() {
        assert!(placement_for_model(1).unwrap().is_empty());
        assert_eq!(placement_for_model(12).unwrap(), PlacementSet::all());
        assert_eq!(
            placement_for_model(13).unwrap(),
            placement_for_model(9).unwrap()
        );
    }
}
