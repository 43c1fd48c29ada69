//! Shared domain types and their invariant checks.
//!
//! Nothing in here performs I/O or talks to a language model. Every type
//! that carries invariants implements [`Validate`], which reports violations
//! instead of failing, so loaders can collect diagnostics for a whole batch.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Coarse age group used to pick tree variants and knowledge-graph entries.
///
/// Boundaries: teen below 25, adult 25 through 54, elder 55 and up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeBucket {
    Teen,
    Adult,
    Elder,
}

impl AgeBucket {
    pub fn from_age(age: u32) -> Self {
        match age {
            0..=24 => AgeBucket::Teen,
            25..=54 => AgeBucket::Adult,
            _ => AgeBucket::Elder,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeBucket::Teen => "teen",
            AgeBucket::Adult => "adult",
            AgeBucket::Elder => "elder",
        }
    }
}

impl fmt::Display for AgeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// (gender, age bucket) pair selecting a tree variant or a graph entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariantKey {
    pub gender: Gender,
    pub age_bucket: AgeBucket,
}

impl VariantKey {
    pub fn new(gender: Gender, age_bucket: AgeBucket) -> Self {
        Self { gender, age_bucket }
    }

    pub fn for_age(gender: Gender, age: u32) -> Self {
        Self::new(gender, AgeBucket::from_age(age))
    }
}

impl fmt::Display for VariantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.gender, self.age_bucket)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Diagnosis {
    pub name: String,
    /// ICD-10 style code, e.g. `F32.901`. Not verified.
    pub code: String,
}

impl Diagnosis {
    pub fn new(name: impl Into<String>, code: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            code: code.into(),
        }
    }

    /// Disease category, the code up to the first dot (`F32.901` -> `F32`).
    pub fn category(&self) -> &str {
        self.code.split('.').next().unwrap_or(&self.code)
    }
}

/// A patient case as it arrives from the clinic, before masking.
///
/// Clinical text fields are optional here so that incomplete records can be
/// loaded and reported instead of rejected at parse time. Unknown keys land
/// in `extra` and are subject to the masking policy's PII key list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPatientCase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_of_birth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exam_date: Option<String>,
    pub age: i64,
    pub gender: Gender,
    #[serde(default)]
    pub diagnoses: Vec<Diagnosis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chief_complaint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub present_illness_history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub past_medical_history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personal_history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mental_examination: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    /// Pre-annotated location spans occurring in the text fields.
    #[serde(default)]
    pub locations: Vec<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// A masked, structurized patient case ready for conversation synthesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientCase {
    pub id: String,
    pub age: u32,
    pub gender: Gender,
    pub diagnoses: Vec<Diagnosis>,
    pub chief_complaint: String,
    pub present_illness_history: String,
    pub past_medical_history: String,
    pub family_history: String,
    pub personal_history: String,
    pub mental_examination: String,
    pub treatment: String,
    #[serde(default)]
    pub locations: Vec<String>,
    pub masked: bool,
}

impl PatientCase {
    pub fn variant_key(&self) -> VariantKey {
        VariantKey::for_age(self.gender, self.age)
    }

    /// Checks the location invariant against the configured vague-location set
    /// in addition to the context-free checks of [`Validate`].
    pub fn validate_with_locations(&self, vague_locations: &[String]) -> Vec<Violation> {
        let mut out = self.validate();
        for loc in &self.locations {
            if !vague_locations.iter().any(|v| v == loc) {
                out.push(Violation::new(
                    "locations",
                    format!("location {loc:?} is not in the vague-location set"),
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnosisSpeed {
    Slow,
    Normal,
    Fast,
}

/// Diagnosis habits of one simulated doctor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoctorPersona {
    pub id: String,
    pub age: u32,
    pub gender: Gender,
    #[serde(default)]
    pub specialties: Vec<String>,
    pub empathetic: bool,
    pub diagnosis_speed: DiagnosisSpeed,
    pub explanation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopicKind {
    Symptom,
    Experience,
}

/// A leaf of the diagnosis tree: one diagnostic topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicNode {
    pub id: String,
    pub label: String,
    pub kind: TopicKind,
    pub visited: bool,
    pub deleted: bool,
}

impl TopicNode {
    pub fn new(id: impl Into<String>, label: impl Into<String>, kind: TopicKind) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            kind,
            visited: false,
            deleted: false,
        }
    }

    /// Neither visited nor deleted.
    pub fn is_live(&self) -> bool {
        !self.visited && !self.deleted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub time: String,
    pub people: String,
    pub event: String,
}

impl Triplet {
    pub fn new(time: impl Into<String>, people: impl Into<String>, event: impl Into<String>) -> Self {
        Self {
            time: time.into(),
            people: people.into(),
            event: event.into(),
        }
    }
}

/// An LLM-written backstory plus the inputs it was conditioned on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FictitiousExperience {
    pub text: String,
    pub source_triplet: Triplet,
    pub persona_prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Doctor,
    Patient,
}

/// Which generator produced a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TurnOp {
    DocGen,
    EmpathGen,
    PatGen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub index: usize,
    pub role: Role,
    pub text: String,
    pub topic_id: String,
    pub op: TurnOp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub diagnoses: Vec<Diagnosis>,
    pub treatment: String,
}

impl Label {
    pub fn is_empty(&self) -> bool {
        self.diagnoses.is_empty() && self.treatment.is_empty()
    }
}

/// Cached per-record counts. Characters are non-whitespace characters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordStats {
    pub exchanges: usize,
    pub doctor_turns: usize,
    pub patient_turns: usize,
    pub doctor_chars: usize,
    pub patient_chars: usize,
}

impl RecordStats {
    pub fn from_turns(turns: &[DialogueTurn]) -> Self {
        let mut stats = RecordStats::default();
        for (i, turn) in turns.iter().enumerate() {
            let chars = count_chars(&turn.text);
            match turn.role {
                Role::Doctor => {
                    stats.doctor_turns += 1;
                    stats.doctor_chars += chars;
                    if turns.get(i + 1).map(|t| t.role) == Some(Role::Patient) {
                        stats.exchanges += 1;
                    }
                }
                Role::Patient => {
                    stats.patient_turns += 1;
                    stats.patient_chars += chars;
                }
            }
        }
        stats
    }
}

/// Non-whitespace character count.
pub fn count_chars(text: &str) -> usize {
    text.chars().filter(|c| !c.is_whitespace()).count()
}

/// Demographic facts about the patient behind a record, for dataset reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub gender: Gender,
    pub age: u32,
    pub family_history: bool,
    pub physical_illness: bool,
}

const NEGATIVE_MARKERS: &[&str] = &[
    "none",
    "no",
    "nil",
    "n/a",
    "na",
    "negative",
    "denied",
    "denies",
    "unremarkable",
    "无",
    "否认",
    "无特殊",
    "无殊",
];

/// True when a free-text history field reports something, i.e. it is not
/// empty and not one of the conventional negative answers.
pub fn history_reported(text: &str) -> bool {
    let norm = text.trim().trim_end_matches(['.', '。']).to_lowercase();
    if norm.is_empty() || NEGATIVE_MARKERS.contains(&norm.as_str()) {
        return false;
    }
    !(norm.starts_with("no ")
        || norm.starts_with("denies")
        || norm.starts_with("denied")
        || norm.starts_with("否认")
        || norm.starts_with("无"))
}

impl PatientProfile {
    pub fn from_case(case: &PatientCase) -> Self {
        Self {
            gender: case.gender,
            age: case.age,
            family_history: history_reported(&case.family_history),
            physical_illness: history_reported(&case.past_medical_history),
        }
    }
}

/// A topic that was discussed in a session, in discussion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicVisit {
    pub id: String,
    pub label: String,
    pub kind: TopicKind,
}

/// One synthesized conversation with its label and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub case_id: String,
    pub session_index: usize,
    pub persona_id: String,
    pub experience_id: String,
    pub seed: u64,
    pub turns: Vec<DialogueTurn>,
    #[serde(default)]
    pub label: Label,
    pub stats: RecordStats,
    pub profile: PatientProfile,
    #[serde(default)]
    pub locations: Vec<String>,
    #[serde(default)]
    pub topics: Vec<TopicVisit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experience: Option<FictitiousExperience>,
}

impl ConversationRecord {
    /// Checks the label invariant against the source case.
    pub fn validate_against(&self, case: &PatientCase) -> Vec<Violation> {
        let mut out = self.validate();
        if self.label.treatment != case.treatment {
            out.push(Violation::new(
                "label.treatment",
                "treatment label differs from the source case",
            ));
        }
        if self.label.diagnoses != case.diagnoses {
            out.push(Violation::new(
                "label.diagnoses",
                "diagnosis label differs from the source case",
            ));
        }
        out
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Report-based invariant checking. An empty report means valid.
pub trait Validate {
    fn validate(&self) -> Vec<Violation>;

    fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }
}

impl Validate for RawPatientCase {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.age < 0 {
            out.push(Violation::new("age", format!("age {} is negative", self.age)));
        }
        if self.diagnoses.is_empty() {
            out.push(Violation::new("diagnoses", "diagnoses must be non-empty"));
        }
        out
    }
}

impl Validate for PatientCase {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !self.masked {
            out.push(Violation::new("masked", "case is not masked"));
        }
        if !self.age.is_multiple_of(10) {
            out.push(Violation::new("age", "age mod 10 ≠ 0"));
        }
        if self.diagnoses.is_empty() {
            out.push(Violation::new("diagnoses", "diagnoses must be non-empty"));
        }
        out
    }
}

impl Validate for DoctorPersona {
    fn validate(&self) -> Vec<Violation> {
        // diagnosis_speed is a closed enum; only the id can be malformed.
        if self.id.trim().is_empty() {
            vec![Violation::new("id", "persona id is empty")]
        } else {
            Vec::new()
        }
    }
}

impl Validate for DialogueTurn {
    fn validate(&self) -> Vec<Violation> {
        let op_ok = match self.role {
            Role::Doctor => matches!(self.op, TurnOp::DocGen | TurnOp::EmpathGen),
            Role::Patient => self.op == TurnOp::PatGen,
        };
        if op_ok {
            Vec::new()
        } else {
            vec![Violation::new(
                "op",
                format!("{:?} turn produced by {:?}", self.role, self.op),
            )]
        }
    }
}

impl Validate for ConversationRecord {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        match self.turns.first() {
            None => out.push(Violation::new("turns", "transcript is empty")),
            Some(t) if t.role != Role::Doctor => out.push(Violation::new("turns", "first turn is not a doctor turn")),
            Some(_) => {}
        }
        for (i, pair) in self.turns.windows(2).enumerate() {
            if pair[0].role == pair[1].role {
                out.push(Violation::new(
                    "turns",
                    format!("alternation broken at turns {} and {}", i, i + 1),
                ));
            }
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i {
                out.push(Violation::new(
                    "turns",
                    format!("turn at position {i} has index {}", turn.index),
                ));
            }
            out.extend(turn.validate());
        }
        if RecordStats::from_turns(&self.turns) != self.stats {
            out.push(Violation::new("stats", "cached stats do not match turns"));
        }
        out
    }
}

impl Validate for Triplet {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (field, value) in [("time", &self.time), ("people", &self.people), ("event", &self.event)] {
            if value.trim().is_empty() {
                out.push(Violation::new(field, "triplet component is empty"));
            }
        }
        out
    }
}

/// Checks that ids in an iterator are unique, reporting each duplicate once.
pub(crate) fn duplicate_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for id in ids {
        if !seen.insert(id) && !dups.iter().any(|d| d == id) {
            dups.push(id.to_string());
        }
    }
    dups
}
