//! Dataset-level domain-gap measures: inter-class variance of class-name
//! features and the survey-derived boundary score.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ICV_LOW: f64 = 0.112;
pub const ICV_HIGH: f64 = 0.190;
pub const IB_WEIGHTS: [f64; 3] = [0.0, 2.0, 6.0];
const PERCENT_TOLERANCE: f64 = 1e-6;
// Published values are rounded to three decimals; a boundary value must bin
// as if it were exactly on the edge.
const EDGE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IcvLevel {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IbLevel {
    Slight,
    Moderate,
    Significant,
}

impl std::fmt::Display for IcvLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IcvLevel::Small => "small",
            IcvLevel::Medium => "medium",
            IcvLevel::Large => "large",
        })
    }
}

impl std::fmt::Display for IbLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IbLevel::Slight => "slight",
            IbLevel::Moderate => "moderate",
            IbLevel::Significant => "significant",
        })
    }
}

/// `sum(F Fᵀ) / (N² D)` on the features as given. `None` for fewer than two classes.
pub fn icv(features: &Tensor) -> Option<f64> {
    let (n, d) = (features.rows(), features.cols());
    if n < 2 || d == 0 {
        return None;
    }
    // sum_ij <f_i, f_j> = |sum_i f_i|²
    let mut total = vec![0.0; d];
    for i in 0..n {
        for (t, v) in total.iter_mut().zip(features.row_slice(i)) {
            *t += v;
        }
    }
    let s: f64 = total.iter().map(|t| t * t).sum();
    Some(s / ((n * n * d) as f64))
}

/// Equal thirds of `[low, high]`, each closed on its upper edge; out-of-range values clamp.
pub fn icv_level_with(value: f64, low: f64, high: f64) -> Result<IcvLevel> {
    if !(low < high) {
        return Err(Error::Config(format!("ICV bounds must satisfy low < high, got {low} and {high}")));
    }
    let third = (high - low) / 3.0;
    Ok(if value <= low + third + EDGE_SLACK {
        IcvLevel::Small
    } else if value <= low + 2.0 * third + EDGE_SLACK {
        IcvLevel::Medium
    } else {
        IcvLevel::Large
    })
}

pub fn icv_level(value: f64) -> IcvLevel {
    icv_level_with(value, ICV_LOW, ICV_HIGH).expect("default bounds are ordered")
}

pub fn ib_score(p_sli: f64, p_mod: f64, p_sig: f64) -> Result<f64> {
    let p = [p_sli, p_mod, p_sig];
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::validation(None, format!("survey percentages must be nonnegative, got {p:?}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PERCENT_TOLERANCE {
        return Err(Error::validation(None, format!("survey percentages sum to {sum}, expected 1")));
    }
    Ok(p.iter().zip(IB_WEIGHTS).map(|(p, w)| p * w).sum())
}

/// `[0,2)` slight, `[2,4)` moderate, `[4,6]` significant.
pub fn ib_level(value: f64) -> Result<IbLevel> {
    if !(0.0..=6.0).contains(&value) {
        return Err(Error::validation(None, format!("IB value {value} outside [0, 6]")));
    }
    Ok(if value < 2.0 {
        IbLevel::Slight
    } else if value < 4.0 {
        IbLevel::Moderate
    } else {
        IbLevel::Significant
    })
}

/// Survey responses for one dataset, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyEntry {
    #[serde(default)]
    pub dataset_id: String,
    pub slight: f64,
    pub moderate: f64,
    pub significant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGapReport {
    pub dataset_id: String,
    pub icv_value: Option<f64>,
    pub icv_level: Option<IcvLevel>,
    pub ib_value: Option<f64>,
    pub ib_level: Option<IbLevel>,
}

impl DomainGapReport {
    pub fn new(dataset_id: impl Into<String>) -> Self {
        DomainGapReport {
            dataset_id: dataset_id.into(),
            icv_value: None,
            icv_level: None,
            ib_value: None,
            ib_level: None,
        }
    }

    pub fn with_icv(mut self, features: &Tensor) -> Self {
        self.icv_value = icv(features);
        self.icv_level = self.icv_value.map(icv_level);
        self
    }

    pub fn with_survey(mut self, entry: &SurveyEntry) -> Result<Self> {
        let v = ib_score(entry.slight, entry.moderate, entry.significant)?;
        self.ib_level = Some(ib_level(v)?);
        self.ib_value = Some(v);
        Ok(self)
    }
}

/// Accepts one entry or a list of them. A bare `[slight, moderate, significant]`
/// array is read as a single unnamed entry.
pub fn parse_survey(json: &str) -> Result<Vec<SurveyEntry>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(SurveyEntry),
        Many(Vec<SurveyEntry>),
        Triple([f64; 3]),
    }
    match serde_json::from_str::<OneOrMany>(json) {
        Ok(OneOrMany::One(e)) => Ok(vec![e]),
        Ok(OneOrMany::Many(v)) => Ok(v),
        Ok(OneOrMany::Triple([slight, moderate, significant])) => Ok(vec![SurveyEntry {
            dataset_id: String::new(),
            slight,
            moderate,
            significant,
        }]),
        Err(e) => Err(Error::Format(format!("survey JSON: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icv_hand_values() {
        let ortho = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(icv(&ortho), Some(0.25));
        let same = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        assert_eq!(icv(&same), Some(0.5));
        let one = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        assert_eq!(icv(&one), None);
    }

    #[test]
    fn icv_matches_explicit_gram_sum() {
        let f = Tensor::from_rows(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.4], &[-0.7, 0.9, 1.1]]).unwrap();
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += crate::autodiff::dot(f.row_slice(i), f.row_slice(j));
            }
        }
        assert!((icv(&f).unwrap() - s / 27.0).abs() < 1e-14);
    }

    #[test]
    fn icv_levels() {
        for (v, l) in [
            (0.132, IcvLevel::Small),
            (0.138, IcvLevel::Small),
            (0.155, IcvLevel::Medium),
            (0.171, IcvLevel::Large),
            (0.183, IcvLevel::Large),
            (0.0, IcvLevel::Small),
            (1.0, IcvLevel::Large),
        ] {
            assert_eq!(icv_level(v), l, "{v}");
        }
        assert!(icv_level_with(0.1, 0.2, 0.2).is_err());
    }

    #[test]
    fn ib_examples() {
        assert_eq!(ib_score(1.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(ib_score(0.0, 0.0, 1.0).unwrap(), 6.0);
        assert!((ib_score(0.17, 0.44, 0.39).unwrap() - 3.22).abs() < 1e-12);
        assert!(ib_score(0.5, 0.4, 0.0).is_err());
        assert!(ib_score(1.2, -0.2, 0.0).is_err());
    }

    #[test]
    fn ib_levels() {
        assert_eq!(ib_level(0.0).unwrap(), IbLevel::Slight);
        assert_eq!(ib_level(2.0).unwrap(), IbLevel::Moderate);
        assert_eq!(ib_level(4.0).unwrap(), IbLevel::Significant);
        assert_eq!(ib_level(6.0).unwrap(), IbLevel::Significant);
        assert!(ib_level(6.01).is_err());
        assert!(ib_level(-0.1).is_err());
    }

    #[test]
    fn survey_parsing() {
        let one = parse_survey(r#"{"dataset_id":"x","slight":1,"moderate":0,"significant":0}"#).unwrap();
        assert_eq!(one.len(), 1);
        let r = DomainGapReport::new("x").with_survey(&one[0]).unwrap();
        assert_eq!(r.ib_level, Some(IbLevel::Slight));
        assert!(parse_survey("[]").unwrap().is_empty());
        assert!(parse_survey("nope").is_err());
    }
}
