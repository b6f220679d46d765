use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The six diagnostic findings, in their fixed reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Concept {
    #[serde(rename = "MA")]
    Ma,
    #[serde(rename = "HE")]
    He,
    #[serde(rename = "EX")]
    Ex,
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "IRMA")]
    Irma,
    #[serde(rename = "NV")]
    Nv,
}

impl Concept {
    pub const ALL: [Concept; 6] = [Concept::Ma, Concept::He, Concept::Ex, Concept::Se, Concept::Irma, Concept::Nv];

    /// The four findings annotated in every source: MA, HE, EX, SE.
    pub const FOUR: [Concept; 4] = [Concept::Ma, Concept::He, Concept::Ex, Concept::Se];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Concept::Ma => "MA",
            Concept::He => "HE",
            Concept::Ex => "EX",
            Concept::Se => "SE",
            Concept::Irma => "IRMA",
            Concept::Nv => "NV",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Concept::Ma => "microaneurysms",
            Concept::He => "hemorrhages",
            Concept::Ex => "hard exudates",
            Concept::Se => "soft exudates",
            Concept::Irma => "intra-retinal microvascular abnormalities",
            Concept::Nv => "neovascularization",
        }
    }

    /// Concept set used by a bottleneck with `count` outputs.
    pub fn set_of(count: usize) -> Option<&'static [Concept]> {
        match count {
            6 => Some(&Self::ALL),
            4 => Some(&Self::FOUR),
            _ => None,
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Concept {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Concept::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown concept `{s}`")))
    }
}

/// Presence flags for the six concepts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptVector(pub [bool; 6]);

impl ConceptVector {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn of(present: &[Concept]) -> Self {
        let mut v = Self::default();
        for &c in present {
            v.set(c, true);
        }
        v
    }

    pub fn has(&self, c: Concept) -> bool {
        self.0[c.index()]
    }

    pub fn set(&mut self, c: Concept, present: bool) {
        self.0[c.index()] = present;
    }

    pub fn present(&self) -> impl Iterator<Item = Concept> + '_ {
        Concept::ALL.into_iter().filter(|c| self.has(*c))
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    /// Flags of every concept except `c`, as a bit pattern.
    pub fn others_pattern(&self, c: Concept) -> u8 {
        Concept::ALL
            .into_iter()
            .filter(|&o| o != c)
            .enumerate()
            .fold(0u8, |acc, (bit, o)| acc | (u8::from(self.has(o)) << bit))
    }

    pub fn select(&self, concepts: &[Concept]) -> Vec<bool> {
        concepts.iter().map(|&c| self.has(c)).collect()
    }
}

/// Deterministic grading rule: NV gives 4, else IRMA gives 3, else any of
/// HE/EX/SE gives 2, else MA gives 1, else 0.
pub fn grade_of(concepts: &ConceptVector) -> u8 {
    if concepts.has(Concept::Nv) {
        4
    } else if concepts.has(Concept::Irma) {
        3
    } else if concepts.has(Concept::He) || concepts.has(Concept::Ex) || concepts.has(Concept::Se) {
        2
    } else if concepts.has(Concept::Ma) {
        1
    } else {
        0
    }
}
