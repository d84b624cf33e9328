//! Response parsing, auditor→verifier protocol, and precision/recall/F1.
//!
//! Scoring is one-vs-rest over the four vulnerability classes; `none` acts as
//! the negative class and has no column of its own. Macro scores are
//! unweighted means of the per-class values, including macro-F1, which is
//! the mean of per-class F1 rather than the harmonic mean of macro P and R.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::VulnerabilityLabel;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("more than one prediction for sample {0}")]
    DuplicatePrediction(String),
    #[error("prediction for unknown sample {0}")]
    UnknownSample(String),
    #[error("gold set lists sample {0} twice")]
    DuplicateGold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Fuzzy,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub predicted: VulnerabilityLabel,
    /// Set once the verifier pass has run on this prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<bool>,
    pub parse_status: ParseStatus,
}

impl Prediction {
    pub fn from_response(sample_id: impl Into<String>, raw_text: &str) -> Self {
        let (predicted, parse_status) = parse_response(raw_text);
        Prediction {
            sample_id: sample_id.into(),
            predicted,
            verified: None,
            parse_status,
        }
    }
}

/// Phrases recognised by the fuzzy pass, matched case-insensitively on word
/// boundaries.
pub const SYNONYMS: &[(&str, VulnerabilityLabel)] = &[
    ("reentrancy", VulnerabilityLabel::Reentrancy),
    ("re-entrancy", VulnerabilityLabel::Reentrancy),
    ("reentrant", VulnerabilityLabel::Reentrancy),
    ("re-entrant", VulnerabilityLabel::Reentrancy),
    ("arithmetic", VulnerabilityLabel::Arithmetic),
    ("integer overflow", VulnerabilityLabel::Arithmetic),
    ("integer underflow", VulnerabilityLabel::Arithmetic),
    ("overflow", VulnerabilityLabel::Arithmetic),
    ("underflow", VulnerabilityLabel::Arithmetic),
    ("timestamp-dependence", VulnerabilityLabel::TimestampDependence),
    ("timestamp dependence", VulnerabilityLabel::TimestampDependence),
    ("timestamp dependency", VulnerabilityLabel::TimestampDependence),
    ("timestamp manipulation", VulnerabilityLabel::TimestampDependence),
    ("block timestamp", VulnerabilityLabel::TimestampDependence),
    ("block.timestamp", VulnerabilityLabel::TimestampDependence),
    ("price-manipulation", VulnerabilityLabel::PriceManipulation),
    ("price manipulation", VulnerabilityLabel::PriceManipulation),
    ("price oracle manipulation", VulnerabilityLabel::PriceManipulation),
    ("oracle manipulation", VulnerabilityLabel::PriceManipulation),
    ("flash loan price", VulnerabilityLabel::PriceManipulation),
    ("no vulnerability", VulnerabilityLabel::None),
    ("no vulnerabilities", VulnerabilityLabel::None),
    ("not vulnerable", VulnerabilityLabel::None),
];

fn fuzzy_patterns() -> &'static [(Regex, VulnerabilityLabel)] {
    static PATTERNS: OnceLock<Vec<(Regex, VulnerabilityLabel)>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        SYNONYMS
            .iter()
            .map(|&(phrase, label)| {
                let body = regex::escape(phrase).replace(' ', r"[\s_]+");
                let re = Regex::new(&format!(r"(?i)\b{body}\b"))
                    .expect("synonym pattern compiles");
                (re, label)
            })
            .collect()
    })
}

fn label_line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[\s*`>#_-]*label[\s*`_]*[:：]\s*(.*)$").expect("label line pattern compiles"))
}

fn normalize_label_value(value: &str) -> Option<VulnerabilityLabel> {
    let cleaned = value
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '`' | '*' | '"' | '\'' | '.' | '<' | '>'))
        .to_lowercase()
        .replace([' ', '_'], "-");
    cleaned.parse().ok()
}

/// Extracts a label from a model response.
///
/// A `LABEL: <name>` line (the last one, if several) gives a clean parse.
/// Otherwise the last occurrence of any canonical name or synonym in the text
/// gives a fuzzy parse. Anything else is `(None, Failed)`.
pub fn parse_response(raw_text: &str) -> (VulnerabilityLabel, ParseStatus) {
    let re = label_line_pattern();
    if let Some(label) = raw_text
        .lines()
        .rev()
        .filter_map(|line| re.captures(line))
        .find_map(|c| normalize_label_value(&c[1]))
    {
        return (label, ParseStatus::Clean);
    }
    // Last occurrence wins; at equal positions the longer phrase wins.
    let best = fuzzy_patterns()
        .iter()
        .flat_map(|(re, label)| {
            re.find_iter(raw_text)
                .map(move |m| ((m.end(), m.len()), *label))
                .collect::<Vec<_>>()
        })
        .max_by_key(|&(key, _)| key);
    match best {
        Some((_, label)) => (label, ParseStatus::Fuzzy),
        None => (VulnerabilityLabel::None, ParseStatus::Failed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Confirm,
    Reject,
    Unparseable,
}

/// A verdict is `Confirm` only when CONFIRM is the sole verdict word in the
/// text; REJECT, both words, or neither are not confirmations.
pub fn parse_verdict(text: &str) -> Verdict {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\b(confirm|reject)(?:ed|s)?\b").expect("verdict pattern compiles"));
    let words: BTreeSet<String> = re.captures_iter(text).map(|c| c[1].to_lowercase()).collect();
    match (words.contains("confirm"), words.contains("reject")) {
        (true, false) => Verdict::Confirm,
        (false, true) => Verdict::Reject,
        _ => Verdict::Unparseable,
    }
}

/// Applies the verifier's verdict. Anything other than a clean CONFIRM demotes
/// the prediction to `None`. A prediction that is already `None` has nothing
/// to verify and is returned unchanged.
pub fn apply_verifier(pred: &Prediction, verdict_text: &str) -> Prediction {
    if !pred.predicted.is_vulnerable() {
        return pred.clone();
    }
    let mut out = pred.clone();
    if parse_verdict(verdict_text) == Verdict::Confirm {
        out.verified = Some(true);
    } else {
        out.verified = Some(false);
        out.predicted = VulnerabilityLabel::None;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub sample_id: String,
    pub label: VulnerabilityLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: VulnerabilityLabel,
    pub column: String,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParseRates {
    pub clean: f64,
    pub fuzzy: f64,
    pub failed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub sample_count: usize,
    pub per_label: Vec<LabelMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Exact-match rate over all samples, `none` included.
    pub accuracy: f64,
    pub parse_rates: ParseRates,
    /// Gold samples without any prediction (scored as `none`, parse failed).
    pub missing_predictions: usize,
    /// Zero-denominator metrics that were reported as 0.
    pub footnotes: Vec<String>,
}

impl MetricsReport {
    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    pub fn metrics_for(&self, label: VulnerabilityLabel) -> Option<&LabelMetrics> {
        self.per_label.iter().find(|m| m.label == label)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Scores predictions against gold labels. Gold samples without a prediction
/// count as `none` with a failed parse.
pub fn score(predictions: &[Prediction], gold: &[GoldLabel]) -> Result<MetricsReport, EvalError> {
    let mut gold_map: BTreeMap<&str, VulnerabilityLabel> = BTreeMap::new();
    for g in gold {
        if gold_map.insert(&g.sample_id, g.label).is_some() {
            return Err(EvalError::DuplicateGold(g.sample_id.clone()));
        }
    }
    let mut pred_map: BTreeMap<&str, &Prediction> = BTreeMap::new();
    for p in predictions {
        if !gold_map.contains_key(p.sample_id.as_str()) {
            return Err(EvalError::UnknownSample(p.sample_id.clone()));
        }
        if pred_map.insert(&p.sample_id, p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.sample_id.clone()));
        }
    }

    let mut counts: BTreeMap<VulnerabilityLabel, ConfusionCounts> = VulnerabilityLabel::VULNERABLE
        .iter()
        .map(|&l| (l, ConfusionCounts::default()))
        .collect();
    let (mut correct, mut clean, mut fuzzy, mut failed, mut missing) = (0, 0, 0, 0, 0);
    for (&id, &gold_label) in &gold_map {
        let (predicted, status) = match pred_map.get(id) {
            Some(p) => (p.predicted, p.parse_status),
            None => {
                missing += 1;
                (VulnerabilityLabel::None, ParseStatus::Failed)
            }
        };
        match status {
            ParseStatus::Clean => clean += 1,
            ParseStatus::Fuzzy => fuzzy += 1,
            ParseStatus::Failed => failed += 1,
        }
        if predicted == gold_label {
            correct += 1;
        }
        for (&label, c) in counts.iter_mut() {
            match (predicted == label, gold_label == label) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    let mut footnotes = Vec::new();
    let per_label: Vec<LabelMetrics> = VulnerabilityLabel::VULNERABLE
        .iter()
        .map(|&label| {
            let c = counts[&label];
            let col = label.abbreviation();
            let precision = ratio(c.tp, c.tp + c.fp).unwrap_or_else(|| {
                footnotes.push(format!("{col} PRE: no positive predictions, reported as 0"));
                0.0
            });
            let recall = ratio(c.tp, c.tp + c.fn_).unwrap_or_else(|| {
                footnotes.push(format!("{col} REC: no gold samples, reported as 0"));
                0.0
            });
            LabelMetrics {
                label,
                column: col.to_string(),
                counts: c,
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect();

    let n_labels = per_label.len() as f64;
    let mean = |f: fn(&LabelMetrics) -> f64| per_label.iter().map(f).sum::<f64>() / n_labels;
    let n = gold_map.len();
    let rate = |k: usize| ratio(k, n).unwrap_or(0.0);
    Ok(MetricsReport {
        method: "model".into(),
        sample_count: n,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: rate(correct),
        parse_rates: ParseRates {
            clean: rate(clean),
            fuzzy: rate(fuzzy),
            failed: rate(failed),
        },
        missing_predictions: missing,
        footnotes,
        per_label,
    })
}

/// Markdown tables: an overall PRE/REC/F1 table with one row per method, then
/// the per-class table with RV/AV/TDV/PMV columns.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    s.push_str("| Method | PRE | REC | F1 | ACC |\n|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.method, r.macro_precision, r.macro_recall, r.macro_f1, r.accuracy
        );
    }
    s.push('\n');
    s.push_str("| Method | Metric |");
    for l in VulnerabilityLabel::VULNERABLE {
        let _ = write!(s, " {} |", l.abbreviation());
    }
    s.push_str("\n|---|---|---|---|---|---|\n");
    for r in reports {
        for (i, (name, get)) in [
            ("PRE", (|m: &LabelMetrics| m.precision) as fn(&LabelMetrics) -> f64),
            ("REC", |m: &LabelMetrics| m.recall),
            ("F1", |m: &LabelMetrics| m.f1),
        ]
        .into_iter()
        .enumerate()
        {
            let method = if i == 0 { r.method.as_str() } else { "" };
            let _ = write!(s, "| {method} | {name} |");
            for l in VulnerabilityLabel::VULNERABLE {
                let v = r.metrics_for(l).map_or(0.0, get);
                let _ = write!(s, " {v:.2} |");
            }
            s.push('\n');
        }
    }
    let notes: Vec<&String> = reports.iter().flat_map(|r| &r.footnotes).collect();
    if !notes.is_empty() {
        s.push('\n');
        for n in notes {
            let _ = writeln!(s, "* {n}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use VulnerabilityLabel::*;

    #[test]
    fn clean_label_line() {
        assert_eq!(
            parse_response("step 1...\nstep 2...\nLABEL: reentrancy"),
            (Reentrancy, ParseStatus::Clean)
        );
        assert_eq!(
            parse_response("**LABEL:** `price-manipulation`"),
            (PriceManipulation, ParseStatus::Clean)
        );
        assert_eq!(parse_response("label: Timestamp Dependence."), (TimestampDependence, ParseStatus::Clean));
        assert_eq!(parse_response("LABEL: none"), (None, ParseStatus::Clean));
    }

    #[test]
    fn fuzzy_fallback() {
        assert_eq!(
            parse_response("This contract suffers from timestamp dependence."),
            (TimestampDependence, ParseStatus::Fuzzy)
        );
        assert_eq!(
            parse_response("Not reentrancy; the real issue is an integer overflow."),
            (Arithmetic, ParseStatus::Fuzzy)
        );
        // invalid LABEL value falls back to fuzzy search
        assert_eq!(
            parse_response("It uses block.timestamp.\nLABEL: unknown"),
            (TimestampDependence, ParseStatus::Fuzzy)
        );
    }

    #[test]
    fn failed_parse() {
        assert_eq!(parse_response("I cannot determine the issue."), (None, ParseStatus::Failed));
        assert_eq!(parse_response(""), (None, ParseStatus::Failed));
    }

    fn pred(label: VulnerabilityLabel) -> Prediction {
        Prediction {
            sample_id: "s".into(),
            predicted: label,
            verified: Option::None,
            parse_status: ParseStatus::Clean,
        }
    }

    #[test]
    fn verifier_protocol() {
        let p = apply_verifier(&pred(Reentrancy), "CONFIRM");
        assert_eq!((p.predicted, p.verified), (Reentrancy, Some(true)));
        let p = apply_verifier(&pred(Arithmetic), "REJECT");
        assert_eq!((p.predicted, p.verified), (None, Some(false)));
        let p = apply_verifier(&pred(PriceManipulation), "maybe?");
        assert_eq!((p.predicted, p.verified), (None, Some(false)));
        let p = apply_verifier(&pred(Reentrancy), "I would confirm or reject, unsure");
        assert_eq!(p.predicted, None);
        let p = apply_verifier(&pred(None), "CONFIRM");
        assert_eq!(p, pred(None));
    }

    fn gold(id: &str, label: VulnerabilityLabel) -> GoldLabel {
        GoldLabel {
            sample_id: id.into(),
            label,
        }
    }

    fn p(id: &str, label: VulnerabilityLabel) -> Prediction {
        Prediction {
            sample_id: id.into(),
            predicted: label,
            verified: Option::None,
            parse_status: ParseStatus::Clean,
        }
    }

    #[test]
    fn tp7_fp3_fn3() {
        let mut g = Vec::new();
        let mut ps = Vec::new();
        for i in 0..7 {
            g.push(gold(&format!("tp{i}"), Reentrancy));
            ps.push(p(&format!("tp{i}"), Reentrancy));
        }
        for i in 0..3 {
            g.push(gold(&format!("fp{i}"), None));
            ps.push(p(&format!("fp{i}"), Reentrancy));
            g.push(gold(&format!("fn{i}"), Reentrancy));
            ps.push(p(&format!("fn{i}"), None));
        }
        let r = score(&ps, &g).unwrap();
        let m = r.metrics_for(Reentrancy).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 7, fp: 3, fn_: 3 });
        assert!((m.precision - 0.7).abs() < 1e-12);
        assert!((m.recall - 0.7).abs() < 1e-12);
        assert!((m.f1 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let g: Vec<_> = VulnerabilityLabel::VULNERABLE
            .iter()
            .enumerate()
            .map(|(i, &l)| gold(&i.to_string(), l))
            .collect();
        let ps: Vec<_> = g.iter().map(|g| p(&g.sample_id, g.label)).collect();
        let r = score(&ps, &g).unwrap();
        for m in &r.per_label {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1, r.accuracy), (1.0, 1.0, 1.0, 1.0));
        assert!(r.footnotes.is_empty());
    }

    #[test]
    fn duplicate_and_unknown_predictions() {
        let g = vec![gold("a", Reentrancy)];
        assert_eq!(
            score(&[p("a", Reentrancy), p("a", None)], &g),
            Err(EvalError::DuplicatePrediction("a".into()))
        );
        assert_eq!(score(&[p("b", None)], &g), Err(EvalError::UnknownSample("b".into())));
    }

    #[test]
    fn missing_prediction_counts_as_failed_none() {
        let g = vec![gold("a", Reentrancy), gold("b", None)];
        let r = score(&[p("b", None)], &g).unwrap();
        assert_eq!(r.missing_predictions, 1);
        assert_eq!(r.metrics_for(Reentrancy).unwrap().counts.fn_, 1);
        assert_eq!(r.parse_rates.failed, 0.5);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn zero_denominators_get_footnotes() {
        let r = score(&[p("a", None)], &[gold("a", None)]).unwrap();
        assert_eq!(r.macro_f1, 0.0);
        assert_eq!(r.footnotes.len(), 8);
    }

    #[test]
    fn table_layout() {
        let r = score(&[p("a", Reentrancy)], &[gold("a", Reentrancy)]).unwrap().with_method("Toy-FFT");
        let t = render_table(&[r]);
        assert!(t.contains("| Method | Metric | RV | AV | TDV | PMV |"));
        assert!(t.contains("| Toy-FFT | PRE | 1.00 |"));
        assert!(t.contains("|  | REC |"));
        assert!(t.contains("| Method | PRE | REC | F1 | ACC |"));
    }
}
