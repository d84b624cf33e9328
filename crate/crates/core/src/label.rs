use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The vulnerability classes a sample can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VulnerabilityLabel {
    Reentrancy,
    Arithmetic,
    TimestampDependence,
    PriceManipulation,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown vulnerability label `{0}`")]
pub struct UnknownLabel(pub String);

impl VulnerabilityLabel {
    pub const ALL: [VulnerabilityLabel; 5] = [
        VulnerabilityLabel::Reentrancy,
        VulnerabilityLabel::Arithmetic,
        VulnerabilityLabel::TimestampDependence,
        VulnerabilityLabel::PriceManipulation,
        VulnerabilityLabel::None,
    ];

    /// The four scored classes, in report column order.
    pub const VULNERABLE: [VulnerabilityLabel; 4] = [
        VulnerabilityLabel::Reentrancy,
        VulnerabilityLabel::Arithmetic,
        VulnerabilityLabel::TimestampDependence,
        VulnerabilityLabel::PriceManipulation,
    ];

    pub fn canonical_name(self) -> &'static str {
        match self {
            VulnerabilityLabel::Reentrancy => "reentrancy",
            VulnerabilityLabel::Arithmetic => "arithmetic",
            VulnerabilityLabel::TimestampDependence => "timestamp-dependence",
            VulnerabilityLabel::PriceManipulation => "price-manipulation",
            VulnerabilityLabel::None => "none",
        }
    }

    /// Column heading used in report tables (RV, AV, TDV, PMV).
    pub fn abbreviation(self) -> &'static str {
        match self {
            VulnerabilityLabel::Reentrancy => "RV",
            VulnerabilityLabel::Arithmetic => "AV",
            VulnerabilityLabel::TimestampDependence => "TDV",
            VulnerabilityLabel::PriceManipulation => "PMV",
            VulnerabilityLabel::None => "NONE",
        }
    }

    /// Human-readable name used in prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            VulnerabilityLabel::Reentrancy => "Reentrancy",
            VulnerabilityLabel::Arithmetic => "Arithmetic (integer overflow/underflow)",
            VulnerabilityLabel::TimestampDependence => "Timestamp dependence",
            VulnerabilityLabel::PriceManipulation => "Price manipulation",
            VulnerabilityLabel::None => "None",
        }
    }

    pub fn is_vulnerable(self) -> bool {
        self != VulnerabilityLabel::None
    }
}

impl fmt::Display for VulnerabilityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for VulnerabilityLabel {
    type Err = UnknownLabel;

    /// Accepts only canonical names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VulnerabilityLabel::ALL
            .into_iter()
            .find(|l| l.canonical_name() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}
