//! Patient case preprocessing: masking, filtering and structurization.
//!
//! Masking applies three rules to every raw case: identifying fields are
//! removed, the age is rounded to the nearest ten, and annotated location
//! spans are swapped for vague stand-ins. Location spans must already be
//! annotated in the raw record; no entity recognition is attempted here.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::domain::{Diagnosis, Gender, PatientCase, RawPatientCase, Validate, Violation};
use crate::error::ConfigError;

/// PII keys every policy removes, whatever the config says.
pub const REQUIRED_PII_KEYS: [&str; 3] = ["name", "date_of_birth", "exam_date"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    #[default]
    Down,
    Up,
}

fn default_redaction() -> String {
    "[redacted]".to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    #[serde(default)]
    pub pii_keys: BTreeSet<String>,
    #[serde(default)]
    pub vague_locations: Vec<String>,
    #[serde(default)]
    pub age_tie_break: TieBreak,
    /// Replaces occurrences of removed PII values inside free text.
    #[serde(default = "default_redaction")]
    pub redaction: String,
    /// Rewrites "24-year-old" style mentions of the raw age in free text.
    #[serde(default = "default_true")]
    pub rewrite_age_mentions: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            pii_keys: BTreeSet::new(),
            vague_locations: vec!["a district in the city".to_string()],
            age_tie_break: TieBreak::Down,
            redaction: default_redaction(),
            rewrite_age_mentions: true,
        }
        .normalized()
    }
}

impl MaskingPolicy {
    /// Adds the mandatory PII keys.
    pub fn normalized(mut self) -> Self {
        self.pii_keys.extend(REQUIRED_PII_KEYS.iter().map(|k| k.to_string()));
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str::<MaskingPolicy>(text).map(MaskingPolicy::normalized)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = crate::error::read_config(path)?;
        MaskingPolicy::from_toml_str(&text).map_err(|e| ConfigError::parse(path, e))
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("negative age {0}")]
    NegativeAge(i64),
    #[error("invalid raw case: {}", join_violations(.0))]
    InvalidRaw(Vec<Violation>),
    #[error("missing field: {0}")]
    MissingField(&'static str),
    #[error("case has location spans but the policy lists no vague locations")]
    NoVagueLocations,
    #[error("removed value from `{0}` still present after masking")]
    ResidualPii(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Rounds an age to the nearest ten; `x5` ties follow `tie`.
pub fn mask_age(age: i64, tie: TieBreak) -> Result<u32, MaskError> {
    if age < 0 {
        return Err(MaskError::NegativeAge(age));
    }
    let rem = age % 10;
    let down = age - rem;
    let rounded = match rem.cmp(&5) {
        std::cmp::Ordering::Less => down,
        std::cmp::Ordering::Greater => down + 10,
        std::cmp::Ordering::Equal => match tie {
            TieBreak::Down => down,
            TieBreak::Up => down + 10,
        },
    };
    u32::try_from(rounded).map_err(|_| MaskError::NegativeAge(age))
}

/// Clinical text fields in schema order.
pub const CLINICAL_FIELDS: [&str; 7] = [
    "chief_complaint",
    "present_illness_history",
    "past_medical_history",
    "family_history",
    "personal_history",
    "mental_examination",
    "treatment",
];

fn raw_field<'a>(raw: &'a RawPatientCase, field: &str) -> Option<&'a String> {
    match field {
        "chief_complaint" => raw.chief_complaint.as_ref(),
        "present_illness_history" => raw.present_illness_history.as_ref(),
        "past_medical_history" => raw.past_medical_history.as_ref(),
        "family_history" => raw.family_history.as_ref(),
        "personal_history" => raw.personal_history.as_ref(),
        "mental_examination" => raw.mental_examination.as_ref(),
        "treatment" => raw.treatment.as_ref(),
        _ => None,
    }
}

fn case_field_mut<'a>(case: &'a mut PatientCase, field: &str) -> &'a mut String {
    match field {
        "chief_complaint" => &mut case.chief_complaint,
        "present_illness_history" => &mut case.present_illness_history,
        "past_medical_history" => &mut case.past_medical_history,
        "family_history" => &mut case.family_history,
        "personal_history" => &mut case.personal_history,
        "mental_examination" => &mut case.mental_examination,
        "treatment" => &mut case.treatment,
        other => unreachable!("not a clinical field: {other}"),
    }
}

pub(crate) fn case_field<'a>(case: &'a PatientCase, field: &str) -> &'a str {
    match field {
        "chief_complaint" => &case.chief_complaint,
        "present_illness_history" => &case.present_illness_history,
        "past_medical_history" => &case.past_medical_history,
        "family_history" => &case.family_history,
        "personal_history" => &case.personal_history,
        "mental_examination" => &case.mental_examination,
        "treatment" => &case.treatment,
        other => unreachable!("not a clinical field: {other}"),
    }
}

/// Values the policy removes from `raw`, longest first, empties dropped.
pub fn removed_values(raw: &RawPatientCase, policy: &MaskingPolicy) -> Vec<String> {
    let mut values = Vec::new();
    for key in &policy.pii_keys {
        let value = match key.as_str() {
            "name" => raw.name.clone(),
            "date_of_birth" => raw.date_of_birth.clone(),
            "exam_date" => raw.exam_date.clone(),
            other => raw.extra.get(other).and_then(value_text),
        };
        if let Some(v) = value {
            let v = v.trim().to_string();
            if !v.is_empty() && !values.contains(&v) {
                values.push(v);
            }
        }
    }
    values.sort_by_key(|v| std::cmp::Reverse(v.chars().count()));
    values
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn age_mention_patterns(raw_age: i64) -> [Regex; 2] {
    [
        Regex::new(&format!(r"(^|[^0-9])({raw_age})(\s*-?\s*years?[- ]old|\s*周?岁)")).expect("valid age regex"),
        Regex::new(&format!(r"(?i)(^|[^0-9a-z])(aged\s+|age\s+)({raw_age})([^0-9]|$)")).expect("valid age regex"),
    ]
}

fn content_id(raw: &RawPatientCase) -> String {
    let mut hasher = Sha256::new();
    for field in CLINICAL_FIELDS {
        hasher.update(raw_field(raw, field).map(String::as_str).unwrap_or(""));
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("case-{hex}")
}

/// Applies the masking policy to one raw case.
pub fn mask_case(raw: &RawPatientCase, policy: &MaskingPolicy) -> Result<PatientCase, MaskError> {
    if raw.age < 0 {
        return Err(MaskError::NegativeAge(raw.age));
    }
    let violations = raw.validate();
    if !violations.is_empty() {
        return Err(MaskError::InvalidRaw(violations));
    }
    for field in CLINICAL_FIELDS {
        if raw_field(raw, field).is_none() {
            return Err(MaskError::MissingField(field));
        }
    }
    if !raw.locations.is_empty() && policy.vague_locations.is_empty() {
        return Err(MaskError::NoVagueLocations);
    }

    let age = mask_age(raw.age, policy.age_tie_break)?;
    let removed = removed_values(raw, policy);

    // i-th distinct span maps to the i-th vague location, cycling.
    let mut spans: Vec<&str> = Vec::new();
    for span in &raw.locations {
        if !span.trim().is_empty() && !spans.contains(&span.as_str()) {
            spans.push(span);
        }
    }
    let replacement_for = |span: &str| -> &str {
        let i = spans.iter().position(|s| *s == span).unwrap_or(0);
        &policy.vague_locations[i % policy.vague_locations.len()]
    };
    let mut spans_longest_first = spans.clone();
    spans_longest_first.sort_by_key(|s| std::cmp::Reverse(s.chars().count()));

    let age_patterns =
        (policy.rewrite_age_mentions && i64::from(age) != raw.age).then(|| age_mention_patterns(raw.age));

    let mut case = PatientCase {
        id: raw.id.clone().unwrap_or_else(|| content_id(raw)),
        age,
        gender: raw.gender,
        diagnoses: raw.diagnoses.clone(),
        chief_complaint: String::new(),
        present_illness_history: String::new(),
        past_medical_history: String::new(),
        family_history: String::new(),
        personal_history: String::new(),
        mental_examination: String::new(),
        treatment: String::new(),
        locations: raw
            .locations
            .iter()
            .filter(|s| !s.trim().is_empty())
            .map(|s| replacement_for(s).to_string())
            .collect(),
        masked: true,
    };

    for field in CLINICAL_FIELDS {
        let mut text = raw_field(raw, field).cloned().unwrap_or_default();
        for value in &removed {
            if text.contains(value.as_str()) {
                text = text.replace(value.as_str(), &policy.redaction);
            }
        }
        for span in &spans_longest_first {
            if text.contains(span) {
                text = text.replace(span, replacement_for(span));
            }
        }
        if let Some([years_old, aged]) = &age_patterns {
            text = years_old
                .replace_all(&text, format!("${{1}}{age}${{3}}").as_str())
                .into_owned();
            text = aged
                .replace_all(&text, format!("${{1}}${{2}}{age}${{4}}").as_str())
                .into_owned();
        }
        *case_field_mut(&mut case, field) = text;
    }

    for value in &removed {
        for field in CLINICAL_FIELDS {
            if case_field(&case, field).contains(value.as_str()) {
                return Err(MaskError::ResidualPii(field.to_string()));
            }
        }
    }
    Ok(case)
}

/// Narrative fields a case needs to be usable for synthesis.
pub const REQUIRED_NARRATIVE: [&str; 4] = [
    "chief_complaint",
    "present_illness_history",
    "mental_examination",
    "treatment",
];

pub fn is_complete(case: &PatientCase) -> bool {
    !case.diagnoses.is_empty()
        && REQUIRED_NARRATIVE
            .iter()
            .all(|f| !case_field(case, f).trim().is_empty())
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn dedup_key(case: &PatientCase) -> String {
    format!(
        "{}\u{1f}{}",
        normalize(&case.chief_complaint),
        normalize(&case.present_illness_history)
    )
}

/// Drops incomplete cases and exact duplicates (on normalized chief complaint
/// plus present illness), keeping the first occurrence and input order.
pub fn filter_cases(cases: Vec<PatientCase>) -> Vec<PatientCase> {
    let mut seen = HashSet::new();
    cases
        .into_iter()
        .filter(|c| is_complete(c) && seen.insert(dedup_key(c)))
        .collect()
}

/// Schema keys of a structurized case, in order.
pub const SCHEMA_KEYS: [&str; 10] = [
    "age",
    "gender",
    "diagnosis",
    "chief_complaint",
    "present_illness_history",
    "past_medical_history",
    "family_history",
    "personal_history",
    "mental_examination",
    "treatment",
];

fn display_label(key: &str) -> &'static str {
    match key {
        "age" => "Age",
        "gender" => "Gender",
        "diagnosis" => "Diagnosis",
        "chief_complaint" => "Chief complaint",
        "present_illness_history" => "History of present illness",
        "past_medical_history" => "Past medical history",
        "family_history" => "Family history",
        "personal_history" => "Personal history",
        "mental_examination" => "Mental examination",
        "treatment" => "Treatment",
        _ => "Other",
    }
}

/// A case as ordered key-value pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredCase {
    pub fields: Vec<(String, Value)>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StructureError {
    #[error("structured case is missing key `{0}`")]
    MissingKey(&'static str),
    #[error("key `{key}` has an unexpected value: {reason}")]
    BadValue { key: &'static str, reason: String },
}

pub fn structurize(case: &PatientCase) -> StructuredCase {
    let mut fields = Vec::with_capacity(SCHEMA_KEYS.len());
    fields.push(("age".to_string(), Value::from(case.age)));
    fields.push(("gender".to_string(), Value::from(case.gender.as_str())));
    fields.push((
        "diagnosis".to_string(),
        serde_json::to_value(&case.diagnoses).expect("diagnoses serialize"),
    ));
    for field in CLINICAL_FIELDS {
        fields.push((field.to_string(), Value::from(case_field(case, field))));
    }
    StructuredCase { fields }
}

impl StructuredCase {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// Rebuilds the case; identifiers and locations are not part of the
    /// structured view and are supplied by the caller.
    pub fn to_case(&self, id: &str, locations: Vec<String>) -> Result<PatientCase, StructureError> {
        let get = |key: &'static str| self.get(key).ok_or(StructureError::MissingKey(key));
        let text = |key: &'static str| -> Result<String, StructureError> {
            get(key)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| StructureError::BadValue {
                    key,
                    reason: "expected text".into(),
                })
        };
        let age = get("age")?
            .as_u64()
            .and_then(|a| u32::try_from(a).ok())
            .ok_or_else(|| StructureError::BadValue {
                key: "age",
                reason: "expected a non-negative integer".into(),
            })?;
        let gender: Gender = serde_json::from_value(get("gender")?.clone()).map_err(|e| StructureError::BadValue {
            key: "gender",
            reason: e.to_string(),
        })?;
        let diagnoses: Vec<Diagnosis> =
            serde_json::from_value(get("diagnosis")?.clone()).map_err(|e| StructureError::BadValue {
                key: "diagnosis",
                reason: e.to_string(),
            })?;
        Ok(PatientCase {
            id: id.to_string(),
            age,
            gender,
            diagnoses,
            chief_complaint: text("chief_complaint")?,
            present_illness_history: text("present_illness_history")?,
            past_medical_history: text("past_medical_history")?,
            family_history: text("family_history")?,
            personal_history: text("personal_history")?,
            mental_examination: text("mental_examination")?,
            treatment: text("treatment")?,
            locations,
            masked: true,
        })
    }

    /// `Label: value` lines in schema order for use inside prompts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.fields {
            let shown = match (key.as_str(), value) {
                ("diagnosis", Value::Array(items)) => items
                    .iter()
                    .map(|d| {
                        format!(
                            "{} ({})",
                            d["name"].as_str().unwrap_or_default(),
                            d["code"].as_str().unwrap_or_default()
                        )
                    })
                    .collect::<Vec<_>>()
                    .join(", "),
                (_, Value::String(s)) => s.clone(),
                (_, other) => other.to_string(),
            };
            out.push_str(display_label(key));
            out.push_str(": ");
            out.push_str(&shown);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures;
    use std::collections::BTreeMap;

    fn raw() -> RawPatientCase {
        RawPatientCase {
            id: Some("c1".into()),
            name: Some("Li Hua".into()),
            date_of_birth: Some("2000-03-14".into()),
            exam_date: Some("2024-05-02".into()),
            age: 24,
            gender: Gender::Female,
            diagnoses: vec![Diagnosis::new("depressive state", "F32.901")],
            chief_complaint: Some("Low mood since moving to Pudong District".into()),
            present_illness_history: Some("Li Hua reports poor sleep".into()),
            past_medical_history: Some("none".into()),
            family_history: Some("".into()),
            personal_history: Some("work: clerk".into()),
            mental_examination: Some("Alert".into()),
            treatment: Some("Sertraline".into()),
            locations: vec!["Pudong District".into()],
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn worked_age_example() {
        assert_eq!(mask_age(24, TieBreak::Down), Ok(20));
        assert_eq!(mask_age(30, TieBreak::Down), Ok(30));
        assert_eq!(mask_age(25, TieBreak::Down), Ok(20));
        assert_eq!(mask_age(25, TieBreak::Up), Ok(30));
        assert_eq!(mask_age(26, TieBreak::Down), Ok(30));
        assert_eq!(mask_age(0, TieBreak::Down), Ok(0));
        assert_eq!(mask_age(-1, TieBreak::Down), Err(MaskError::NegativeAge(-1)));
    }

    #[test]
    fn mask_case_field_by_field() {
        let policy = MaskingPolicy::default();
        let r = raw();
        let c = mask_case(&r, &policy).unwrap();
        assert_eq!(c.id, "c1");
        assert_eq!(c.age, 20);
        assert!(c.masked);
        assert_eq!(c.gender, r.gender);
        assert_eq!(c.diagnoses, r.diagnoses);
        assert_eq!(c.locations, vec!["a district in the city".to_string()]);
        assert_eq!(c.chief_complaint, "Low mood since moving to a district in the city");
        assert_eq!(c.present_illness_history, "[redacted] reports poor sleep");
        assert_eq!(c.past_medical_history, "none");
        assert_eq!(c.family_history, "");
        assert_eq!(c.personal_history, "work: clerk");
        assert_eq!(c.mental_examination, "Alert");
        assert_eq!(c.treatment, "Sertraline");
        assert!(c.validate_with_locations(&policy.vague_locations).is_empty());
        let json = serde_json::to_value(&c).unwrap();
        for key in ["name", "date_of_birth", "exam_date"] {
            assert!(json.get(key).is_none());
        }
    }

    #[test]
    fn no_locations_means_only_pii_and_age_change() {
        let mut r = raw();
        r.locations.clear();
        r.chief_complaint = Some("Low mood".into());
        r.present_illness_history = Some("Poor sleep".into());
        let c = mask_case(&r, &MaskingPolicy::default()).unwrap();
        assert_eq!(c.chief_complaint, "Low mood");
        assert_eq!(c.present_illness_history, "Poor sleep");
        assert!(c.locations.is_empty());
        assert_eq!(c.age, 20);
    }

    #[test]
    fn missing_treatment_is_named() {
        let mut r = raw();
        r.treatment = None;
        let err = mask_case(&r, &MaskingPolicy::default()).unwrap_err();
        assert_eq!(err.to_string(), "missing field: treatment");
    }

    #[test]
    fn extra_pii_keys_are_scrubbed() {
        let mut r = raw();
        r.extra.insert("phone".into(), "13800001111".into());
        r.mental_examination = Some("Called from 13800001111".into());
        let mut policy = MaskingPolicy::default();
        policy.pii_keys.insert("phone".into());
        let c = mask_case(&r, &policy).unwrap();
        assert_eq!(c.mental_examination, "Called from [redacted]");
    }

    #[test]
    fn raw_age_mentions_are_rewritten() {
        let mut r = raw();
        r.present_illness_history = Some("A 24-year-old student, 24岁, aged 24; 124 days".into());
        let c = mask_case(&r, &MaskingPolicy::default()).unwrap();
        assert_eq!(
            c.present_illness_history,
            "A 20-year-old student, 20岁, aged 20; 124 days"
        );
    }

    #[test]
    fn residual_pii_is_rejected() {
        let mut policy = MaskingPolicy::default();
        policy.redaction = "Li Hua's name".into();
        let err = mask_case(&raw(), &policy).unwrap_err();
        assert!(matches!(err, MaskError::ResidualPii(_)));
    }

    #[test]
    fn policy_always_contains_required_keys() {
        let p = MaskingPolicy::from_toml_str("vague_locations = [\"somewhere\"]\npii_keys = [\"phone\"]").unwrap();
        for k in REQUIRED_PII_KEYS {
            assert!(p.pii_keys.contains(k));
        }
        assert!(p.pii_keys.contains("phone"));
        assert_eq!(p.redaction, "[redacted]");
    }

    #[test]
    fn filter_removes_duplicates_and_incomplete() {
        let a = fixtures::case();
        let mut a_copy = a.clone();
        a_copy.id = "copy".into();
        a_copy.chief_complaint = format!("  {}  ", a.chief_complaint.to_uppercase());
        let mut b = fixtures::case();
        b.id = "b".into();
        b.chief_complaint = "Panic attacks".into();
        let out = filter_cases(vec![a.clone(), a_copy, b.clone()]);
        assert_eq!(out, vec![a.clone(), b.clone()]);

        let mut incomplete = a.clone();
        incomplete.mental_examination.clear();
        assert_eq!(filter_cases(vec![incomplete, b.clone()]), vec![b.clone()]);

        assert!(filter_cases(vec![]).is_empty());
    }

    #[test]
    fn structurize_fixture_case() {
        let s = structurize(&fixtures::case());
        let keys: Vec<&str> = s.fields.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, SCHEMA_KEYS);
        let expected = serde_json::json!([
            ["age", 20],
            ["gender", "female"],
            ["diagnosis", [{"name": "depressive state", "code": "F32.901"}]],
            ["chief_complaint", "Low mood for two months"],
            ["present_illness_history", "Trouble sleeping since the semester began"],
            ["past_medical_history", "none"],
            ["family_history", "none"],
            ["personal_history", "work: student; lives with parents"],
            ["mental_examination", "Alert, low affect"],
            ["treatment", "Sertraline 50mg daily; follow up in two weeks"]
        ]);
        assert_eq!(serde_json::to_value(&s.fields).unwrap(), expected);
    }

    #[test]
    fn empty_field_keeps_key() {
        let mut c = fixtures::case();
        c.family_history.clear();
        let s = structurize(&c);
        assert_eq!(s.get("family_history"), Some(&Value::from("")));
    }

    #[test]
    fn render_uses_labels() {
        let text = structurize(&fixtures::case()).render();
        assert!(text.starts_with("Age: 20\nGender: female\nDiagnosis: depressive state (F32.901)\n"));
        assert!(text.contains("Treatment: Sertraline"));
    }

    #[test]
    fn to_case_reports_missing_key() {
        let mut s = structurize(&fixtures::case());
        s.fields.retain(|(k, _)| k != "treatment");
        assert_eq!(s.to_case("x", vec![]), Err(StructureError::MissingKey("treatment")));
    }
}
