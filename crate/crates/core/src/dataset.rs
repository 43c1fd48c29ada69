//! Line-delimited datasets, corpus statistics and the privacy scan.
//!
//! A dataset file holds one JSON [`ConversationRecord`] per line. Newlines
//! inside utterances are escaped by the JSON encoding, so lines and records
//! correspond one to one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{AgeBucket, ConversationRecord, RecordStats};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset is empty")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads one value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn emit_records(records: &[ConversationRecord], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(path, records)
}

pub fn load_records(path: &Path) -> Result<Vec<ConversationRecord>, DatasetError> {
    read_jsonl(path)
}

/// Category counts for the demographic breakdown.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: BTreeMap<String, usize>,
    pub age_decade: BTreeMap<String, usize>,
    pub age_bucket: BTreeMap<String, usize>,
    pub diagnosis_code: BTreeMap<String, usize>,
    pub diagnosis_category: BTreeMap<String, usize>,
    pub family_history: BTreeMap<String, usize>,
    pub physical_illness: BTreeMap<String, usize>,
}

fn bump(map: &mut BTreeMap<String, usize>, key: impl Into<String>, by: usize) {
    *map.entry(key.into()).or_insert(0) += by;
}

fn merge_counts(into: &mut BTreeMap<String, usize>, from: &BTreeMap<String, usize>) {
    for (k, v) in from {
        bump(into, k.clone(), *v);
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

impl Demographics {
    fn add(&mut self, record: &ConversationRecord) {
        let p = &record.profile;
        bump(&mut self.gender, p.gender.as_str(), 1);
        let decade = p.age / 10 * 10;
        bump(&mut self.age_decade, format!("{decade}-{}", decade + 9), 1);
        bump(&mut self.age_bucket, AgeBucket::from_age(p.age).as_str(), 1);
        for d in &record.label.diagnoses {
            bump(&mut self.diagnosis_code, d.code.clone(), 1);
            bump(&mut self.diagnosis_category, d.category(), 1);
        }
        bump(&mut self.family_history, yes_no(p.family_history), 1);
        bump(&mut self.physical_illness, yes_no(p.physical_illness), 1);
    }

    fn merge(&mut self, other: &Demographics) {
        merge_counts(&mut self.gender, &other.gender);
        merge_counts(&mut self.age_decade, &other.age_decade);
        merge_counts(&mut self.age_bucket, &other.age_bucket);
        merge_counts(&mut self.diagnosis_code, &other.diagnosis_code);
        merge_counts(&mut self.diagnosis_category, &other.diagnosis_category);
        merge_counts(&mut self.family_history, &other.family_history);
        merge_counts(&mut self.physical_illness, &other.physical_illness);
    }
}

/// Integer sums behind a [`StatsReport`]; merging partitions is exact.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatsAccumulator {
    dialogues: usize,
    exchanges: usize,
    doctor_turns: usize,
    patient_turns: usize,
    doctor_chars: usize,
    patient_chars: usize,
    demographics: Demographics,
}

impl StatsAccumulator {
    pub fn add(&mut self, record: &ConversationRecord) {
        // Recounted from the utterances; cached stats and labels are ignored.
        let s = RecordStats::from_turns(&record.turns);
        self.dialogues += 1;
        self.exchanges += s.exchanges;
        self.doctor_turns += s.doctor_turns;
        self.patient_turns += s.patient_turns;
        self.doctor_chars += s.doctor_chars;
        self.patient_chars += s.patient_chars;
        self.demographics.add(record);
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.dialogues += other.dialogues;
        self.exchanges += other.exchanges;
        self.doctor_turns += other.doctor_turns;
        self.patient_turns += other.patient_turns;
        self.doctor_chars += other.doctor_chars;
        self.patient_chars += other.patient_chars;
        self.demographics.merge(&other.demographics);
    }

    pub fn finish(&self) -> Result<StatsReport, DatasetError> {
        if self.dialogues == 0 {
            return Err(DatasetError::Empty);
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Ok(StatsReport {
            total_num: self.dialogues,
            avg_turns: ratio(self.exchanges, self.dialogues),
            avg_chars_dialogue: ratio(self.doctor_chars + self.patient_chars, self.dialogues),
            avg_chars_doctor: ratio(self.doctor_chars, self.doctor_turns),
            avg_chars_patient: ratio(self.patient_chars, self.patient_turns),
            demographics: self.demographics.clone(),
        })
    }
}

pub const TURN_DEFINITION: &str = "turn = one doctor utterance followed by the patient reply";
pub const CHAR_DEFINITION: &str = "characters = non-whitespace characters of utterances; labels and metadata excluded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total_num: usize,
    /// Mean exchanges per dialogue.
    pub avg_turns: f64,
    pub avg_chars_dialogue: f64,
    /// Mean characters per doctor utterance.
    pub avg_chars_doctor: f64,
    /// Mean characters per patient utterance.
    pub avg_chars_patient: f64,
    pub demographics: Demographics,
}

pub fn compute_stats(records: &[ConversationRecord]) -> Result<StatsReport, DatasetError> {
    let mut acc = StatsAccumulator::default();
    for r in records {
        acc.add(r);
    }
    acc.finish()
}

fn render_counts(out: &mut String, title: &str, counts: &BTreeMap<String, usize>) {
    let total: usize = counts.values().sum();
    let _ = writeln!(out, "{title}:");
    for (k, v) in counts {
        let pct = if total == 0 {
            0.0
        } else {
            100.0 * *v as f64 / total as f64
        };
        let _ = writeln!(out, "  {k:<14} {v:>6}  {pct:5.1}%");
    }
}

impl StatsReport {
    /// Table with the five headline fields, then the demographic counts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {TURN_DEFINITION}");
        let _ = writeln!(out, "# {CHAR_DEFINITION}");
        let rows: [(&str, String); 5] = [
            ("Total num", self.total_num.to_string()),
            ("Avg. turns", format!("{:.2}", self.avg_turns)),
            ("Avg. words #dial", format!("{:.2}", self.avg_chars_dialogue)),
            ("Avg. words #doc", format!("{:.2}", self.avg_chars_doctor)),
            ("Avg. words #pat", format!("{:.2}", self.avg_chars_patient)),
        ];
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<18} {value:>10}");
        }
        let d = &self.demographics;
        out.push('\n');
        render_counts(&mut out, "gender", &d.gender);
        render_counts(&mut out, "age", &d.age_decade);
        render_counts(&mut out, "age bucket", &d.age_bucket);
        render_counts(&mut out, "diagnosis category", &d.diagnosis_category);
        render_counts(&mut out, "diagnosis code", &d.diagnosis_code);
        render_counts(&mut out, "family history", &d.family_history);
        render_counts(&mut out, "physical illness", &d.physical_illness);
        out
    }
}

static AGE_MENTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(\d{1,3})[\s-]*(?:years?|yrs?)[\s-]*old\b|\baged?\s+(\d{1,3})\b|(\d{1,3})\s*岁")
        .expect("age pattern compiles")
});

/// Ages mentioned in free text.
pub fn age_mentions(text: &str) -> Vec<u32> {
    AGE_MENTION
        .captures_iter(text)
        .filter_map(|c| c.iter().skip(1).flatten().next().and_then(|m| m.as_str().parse().ok()))
        .collect()
}

/// Why a record was flagged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Leak {
    Forbidden { turn: usize, value: String },
    Age { turn: usize, mentioned: u32 },
    Location { value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFlag {
    pub case_id: String,
    pub session_index: usize,
    pub flag: u8,
    pub leaks: Vec<Leak>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub total: usize,
    pub flagged: usize,
    pub forbidden_hits: usize,
    pub age_hits: usize,
    pub location_hits: usize,
    pub records: Vec<RecordFlag>,
}

/// Flags records that leak a forbidden string, an unrounded age close to the
/// patient's masked age, or a structured location outside the whitelist.
/// Without a whitelist the location check is skipped.
pub fn safety_scan(
    records: &[ConversationRecord],
    forbidden: &[String],
    location_whitelist: Option<&[String]>,
) -> SafetyReport {
    let needles: Vec<(String, &String)> = forbidden
        .iter()
        .filter(|f| !f.trim().is_empty())
        .map(|f| (f.to_lowercase(), f))
        .collect();
    let mut report = SafetyReport {
        total: records.len(),
        ..SafetyReport::default()
    };
    for r in records {
        let mut leaks = Vec::new();
        for turn in &r.turns {
            let text = turn.text.to_lowercase();
            for (needle, original) in &needles {
                if text.contains(needle.as_str()) {
                    leaks.push(Leak::Forbidden {
                        turn: turn.index,
                        value: (*original).clone(),
                    });
                }
            }
            for n in age_mentions(&turn.text) {
                if n % 10 != 0 && n.abs_diff(r.profile.age) <= 5 {
                    leaks.push(Leak::Age {
                        turn: turn.index,
                        mentioned: n,
                    });
                }
            }
        }
        if let Some(allowed) = location_whitelist {
            for loc in &r.locations {
                if !allowed.contains(loc) {
                    leaks.push(Leak::Location { value: loc.clone() });
                }
            }
        }
        for leak in &leaks {
            match leak {
                Leak::Forbidden { .. } => report.forbidden_hits += 1,
                Leak::Age { .. } => report.age_hits += 1,
                Leak::Location { .. } => report.location_hits += 1,
            }
        }
        let flag = u8::from(!leaks.is_empty());
        report.flagged += flag as usize;
        report.records.push(RecordFlag {
            case_id: r.case_id.clone(),
            session_index: r.session_index,
            flag,
            leaks,
        });
    }
    report
}
