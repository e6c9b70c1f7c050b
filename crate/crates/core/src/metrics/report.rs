use serde::{Deserialize, Serialize};

/// Which forgetting terms the selection score averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetTerms {
    /// `1-ROUGE`, `1-Prob` and `1-Extraction`.
    #[default]
    All,
    /// Only `1-ROUGE` and `1-Prob`.
    RougeAndProb,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForgetMetrics {
    pub one_minus_rouge: f64,
    pub one_minus_prob: f64,
    pub one_minus_extraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SliceMetrics {
    pub rouge: f64,
    pub prob: f64,
    /// Raw ratio: perturbed over correct likelihood. Lower is better; the
    /// utility component is `max(0, 1 - truth_ratio)`.
    pub truth_ratio: f64,
}

impl SliceMetrics {
    pub fn truth_score(&self) -> f64 {
        (1.0 - self.truth_ratio).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UtilitySlices {
    pub retain: SliceMetrics,
    pub neighbors: SliceMetrics,
    pub facts: SliceMetrics,
}

impl UtilitySlices {
    /// The nine values aggregated into model utility.
    pub fn components(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (i, s) in [self.retain, self.neighbors, self.facts].iter().enumerate() {
            out[3 * i] = s.prob;
            out[3 * i + 1] = s.truth_score();
            out[3 * i + 2] = s.rouge;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MuseMetrics {
    pub verbmem_f: f64,
    pub knowmem_f: f64,
    pub knowmem_r: f64,
    pub privleak: f64,
}

/// Everything measured about one unlearned model. Serialized as one flat
/// JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "FlatReport", into = "FlatReport")]
pub struct MetricsReport {
    pub forget: ForgetMetrics,
    pub utility_slices: UtilitySlices,
    pub mu: f64,
    pub muse: Option<MuseMetrics>,
    pub failure_flag: bool,
}

impl MetricsReport {
    /// All-zero report for a candidate that could not be trained or scored.
    pub fn failed() -> MetricsReport {
        MetricsReport::failed_with(true)
    }

    pub(crate) fn failed_with(flag: bool) -> MetricsReport {
        MetricsReport {
            forget: ForgetMetrics::default(),
            utility_slices: UtilitySlices::default(),
            mu: 0.0,
            muse: None,
            failure_flag: flag,
        }
    }

    pub fn all_finite(&self) -> bool {
        let flat = FlatReport::from(self.clone());
        flat.values().iter().all(|(_, v)| v.is_finite())
    }

    /// Column names of [`MetricsReport::csv_values`].
    pub fn csv_header() -> Vec<&'static str> {
        FlatReport::from(MetricsReport::failed())
            .values()
            .into_iter()
            .map(|(k, _)| k)
            .chain(["failure_flag"])
            .collect()
    }

    /// Every metric as a CSV cell, MUSE columns empty when absent.
    pub fn csv_values(&self) -> Vec<String> {
        let flat = FlatReport::from(self.clone());
        let has_muse = self.muse.is_some();
        flat.values()
            .into_iter()
            .map(|(k, v)| {
                if !has_muse && MUSE_KEYS.contains(&k) {
                    String::new()
                } else {
                    format!("{v}")
                }
            })
            .chain([self.failure_flag.to_string()])
            .collect()
    }
}

const MUSE_KEYS: [&str; 4] = ["verbmem_f", "knowmem_f", "knowmem_r", "privleak"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub utility: f64,
    pub forget: f64,
    pub score: f64,
}

impl SelectionScore {
    pub fn new(utility: f64, forget: f64) -> SelectionScore {
        SelectionScore {
            utility,
            forget,
            score: 0.5 * utility + 0.5 * forget,
        }
    }

    pub fn zero() -> SelectionScore {
        SelectionScore {
            utility: 0.0,
            forget: 0.0,
            score: 0.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FlatReport {
    one_minus_rouge: f64,
    one_minus_prob: f64,
    one_minus_extraction: f64,
    retain_rouge: f64,
    retain_prob: f64,
    retain_truth_ratio: f64,
    neighbors_rouge: f64,
    neighbors_prob: f64,
    neighbors_truth_ratio: f64,
    facts_rouge: f64,
    facts_prob: f64,
    facts_truth_ratio: f64,
    mu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verbmem_f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    knowmem_f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    knowmem_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    privleak: Option<f64>,
    failure_flag: bool,
}

impl FlatReport {
    fn values(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("one_minus_rouge", self.one_minus_rouge),
            ("one_minus_prob", self.one_minus_prob),
            ("one_minus_extraction", self.one_minus_extraction),
            ("retain_rouge", self.retain_rouge),
            ("retain_prob", self.retain_prob),
            ("retain_truth_ratio", self.retain_truth_ratio),
            ("neighbors_rouge", self.neighbors_rouge),
            ("neighbors_prob", self.neighbors_prob),
            ("neighbors_truth_ratio", self.neighbors_truth_ratio),
            ("facts_rouge", self.facts_rouge),
            ("facts_prob", self.facts_prob),
            ("facts_truth_ratio", self.facts_truth_ratio),
            ("mu", self.mu),
            ("verbmem_f", self.verbmem_f.unwrap_or(0.0)),
            ("knowmem_f", self.knowmem_f.unwrap_or(0.0)),
            ("knowmem_r", self.knowmem_r.unwrap_or(0.0)),
            ("privleak", self.privleak.unwrap_or(0.0)),
        ]
    }
}

impl From<MetricsReport> for FlatReport {
    fn from(r: MetricsReport) -> FlatReport {
        let u = r.utility_slices;
        FlatReport {
            one_minus_rouge: r.forget.one_minus_rouge,
            one_minus_prob: r.forget.one_minus_prob,
            one_minus_extraction: r.forget.one_minus_extraction,
            retain_rouge: u.retain.rouge,
            retain_prob: u.retain.prob,
            retain_truth_ratio: u.retain.truth_ratio,
            neighbors_rouge: u.neighbors.rouge,
            neighbors_prob: u.neighbors.prob,
            neighbors_truth_ratio: u.neighbors.truth_ratio,
            facts_rouge: u.facts.rouge,
            facts_prob: u.facts.prob,
            facts_truth_ratio: u.facts.truth_ratio,
            mu: r.mu,
            verbmem_f: r.muse.map(|m| m.verbmem_f),
            knowmem_f: r.muse.map(|m| m.knowmem_f),
            knowmem_r: r.muse.map(|m| m.knowmem_r),
            privleak: r.muse.map(|m| m.privleak),
            failure_flag: r.failure_flag,
        }
    }
}

impl From<FlatReport> for MetricsReport {
    fn from(f: FlatReport) -> MetricsReport {
        let slice = |rouge, prob, truth_ratio| SliceMetrics {
            rouge,
            prob,
            truth_ratio,
        };
        let muse = match (f.verbmem_f, f.knowmem_f, f.knowmem_r, f.privleak) {
            (Some(verbmem_f), Some(knowmem_f), Some(knowmem_r), Some(privleak)) => Some(MuseMetrics {
                verbmem_f,
                knowmem_f,
                knowmem_r,
                privleak,
            }),
            _ => None,
        };
        MetricsReport {
            forget: ForgetMetrics {
                one_minus_rouge: f.one_minus_rouge,
                one_minus_prob: f.one_minus_prob,
                one_minus_extraction: f.one_minus_extraction,
            },
            utility_slices: UtilitySlices {
                retain: slice(f.retain_rouge, f.retain_prob, f.retain_truth_ratio),
                neighbors: slice(f.neighbors_rouge, f.neighbors_prob, f.neighbors_truth_ratio),
                facts: slice(f.facts_rouge, f.facts_prob, f.facts_truth_ratio),
            },
            mu: f.mu,
            muse,
            failure_flag: f.failure_flag,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        MetricsReport {
            forget: ForgetMetrics {
                one_minus_rouge: 0.25,
                one_minus_prob: 0.5,
                one_minus_extraction: 0.125,
            },
            utility_slices: UtilitySlices {
                retain: SliceMetrics {
                    rouge: 0.9,
                    prob: 0.7,
                    truth_ratio: 0.3,
                },
                ..UtilitySlices::default()
            },
            mu: 0.1 + 0.2,
            muse: Some(MuseMetrics {
                verbmem_f: 0.75,
                knowmem_f: 0.5,
                knowmem_r: 1.0,
                privleak: -0.875,
            }),
            failure_flag: false,
        }
    }

    #[test]
    fn flat_json_round_trip() {
        let r = sample();
        let json = serde_json::to_value(&r).unwrap();
        let obj = json.as_object().unwrap();
        assert!(obj.values().all(|v| !v.is_object()));
        assert_eq!(obj["retain_truth_ratio"], 0.3);
        assert_eq!(obj["privleak"], -0.875);
        let back: MetricsReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn muse_fields_optional() {
        let mut r = sample();
        r.muse = None;
        let s = serde_json::to_string(&r).unwrap();
        assert!(!s.contains("privleak"));
        assert_eq!(serde_json::from_str::<MetricsReport>(&s).unwrap(), r);
    }

    #[test]
    fn csv_shape() {
        let r = sample();
        assert_eq!(MetricsReport::csv_header().len(), r.csv_values().len());
        let mut r2 = r.clone();
        r2.muse = None;
        assert_eq!(r2.csv_values()[16], "");
    }

    #[test]
    fn components_order() {
        let c = sample().utility_slices.components();
        assert_eq!(&c[..3], &[0.7, 0.7, 0.9]);
    }
}
