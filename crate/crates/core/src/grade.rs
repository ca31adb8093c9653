//! Class label codes and Gleason grade groups.
//!
//! Label volumes store one of six codes per voxel:
//!
//! | code | class      |
//! |------|------------|
//! | 0    | background |
//! | 1    | prostate   |
//! | 2    | GS 6       |
//! | 3    | GS 3+4     |
//! | 4    | GS 4+3     |
//! | 5    | GS >= 8    |
//!
//! Codes 2..=5 are the lesion classes; 3..=5 are clinically significant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_CLASSES: usize = 6;
pub const NUM_GRADES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum LabelClass {
    Background = 0,
    Prostate = 1,
    Gs6 = 2,
    Gs3p4 = 3,
    Gs4p3 = 4,
    Gs8 = 5,
}

impl LabelClass {
    pub const ALL: [LabelClass; NUM_CLASSES] = [
        LabelClass::Background,
        LabelClass::Prostate,
        LabelClass::Gs6,
        LabelClass::Gs3p4,
        LabelClass::Gs4p3,
        LabelClass::Gs8,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn grade(self) -> Option<Grade> {
        match self {
            LabelClass::Gs6 => Some(Grade::Gs6),
            LabelClass::Gs3p4 => Some(Grade::Gs3p4),
            LabelClass::Gs4p3 => Some(Grade::Gs4p3),
            LabelClass::Gs8 => Some(Grade::Gs8),
            _ => None,
        }
    }
}

/// Gleason grade group, ordered by aggressiveness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "GS6")]
    Gs6,
    #[serde(rename = "GS3+4")]
    Gs3p4,
    #[serde(rename = "GS4+3")]
    Gs4p3,
    #[serde(rename = "GS>=8")]
    Gs8,
}

impl Grade {
    pub const ALL: [Grade; NUM_GRADES] = [Grade::Gs6, Grade::Gs3p4, Grade::Gs4p3, Grade::Gs8];

    /// Ordinal index 0..=3, used for confusion matrix rows/columns and kappa weights.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> LabelClass {
        match self {
            Grade::Gs6 => LabelClass::Gs6,
            Grade::Gs3p4 => LabelClass::Gs3p4,
            Grade::Gs4p3 => LabelClass::Gs4p3,
            Grade::Gs8 => LabelClass::Gs8,
        }
    }

    pub fn label_code(self) -> u8 {
        self.label().code()
    }

    pub fn from_label_code(code: u8) -> Option<Self> {
        LabelClass::from_code(code).and_then(LabelClass::grade)
    }

    /// Clinically significant means GS > 6.
    pub fn is_cs(self) -> bool {
        self != Grade::Gs6
    }

    pub fn name(self) -> &'static str {
        match self {
            Grade::Gs6 => "GS6",
            Grade::Gs3p4 => "GS3+4",
            Grade::Gs4p3 => "GS4+3",
            Grade::Gs8 => "GS>=8",
        }
    }

    /// File-name friendly tag.
    pub fn slug(self) -> &'static str {
        match self {
            Grade::Gs6 => "gs6",
            Grade::Gs3p4 => "gs3p4",
            Grade::Gs4p3 => "gs4p3",
            Grade::Gs8 => "gs8",
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grade {
    type Err = Error;

    /// Accepts the display names (`GS6`, `GS3+4`, `GS4+3`, `GS>=8`, also
    /// `GS≥8` and `GS8`), the slugs or the label codes 2..=5.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let norm: String = t.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_uppercase();
        match norm.as_str() {
            "GS6" | "6" | "3+3" | "GS3+3" => Ok(Grade::Gs6),
            "GS3+4" | "3+4" | "GS3P4" => Ok(Grade::Gs3p4),
            "GS4+3" | "4+3" | "GS4P3" => Ok(Grade::Gs4p3),
            "GS>=8" | "GS8" | ">=8" => Ok(Grade::Gs8),
            _ => {
                if t == "GS≥8" || t == "≥8" {
                    return Ok(Grade::Gs8);
                }
                t.parse::<u8>()
                    .ok()
                    .and_then(Grade::from_label_code)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown grade '{s}'")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_table_is_fixed() {
        let codes: Vec<u8> = LabelClass::ALL.iter().map(|c| c.code()).collect();
        assert_eq!(codes, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(Grade::Gs6.label_code(), 2);
        assert_eq!(Grade::Gs8.label_code(), 5);
        assert_eq!(Grade::from_label_code(1), None);
    }

    #[test]
    fn parse_grades() {
        assert_eq!("GS3+4".parse::<Grade>().unwrap(), Grade::Gs3p4);
        assert_eq!("GS≥8".parse::<Grade>().unwrap(), Grade::Gs8);
        assert_eq!("4".parse::<Grade>().unwrap(), Grade::Gs4p3);
        assert!("GS7".parse::<Grade>().is_err());
        for g in Grade::ALL {
            assert_eq!(g.name().parse::<Grade>().unwrap(), g);
            assert_eq!(g.slug().parse::<Grade>().unwrap(), g);
        }
    }

    #[test]
    fn only_gs6_is_not_significant() {
        assert!(!Grade::Gs6.is_cs());
        assert!(Grade::ALL[1..].iter().all(|g| g.is_cs()));
    }
}
