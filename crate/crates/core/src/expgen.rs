//! Fictitious patient experience generation.
//!
//! A persona prompt is built from four case fields only (gender, age, work,
//! diagnoses) so the generated story cannot contradict the rest of the case.
//! A (time, people, event) triplet drawn from the experience graph outlines
//! the story, and the backend writes the narrative from persona + outline.

use std::collections::BTreeMap;
use std::path::Path;

use minijinja::context;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::case_prep::structurize;
use crate::domain::{AgeBucket, FictitiousExperience, Gender, PatientCase, Triplet, Validate, VariantKey};
use crate::error::{read_config, ConfigError};
use crate::llm::{LlmBackend, LlmError, OpTag, SamplingConfig};
use crate::prompts::{PromptError, PromptSet};

pub const UNKNOWN_WORK: &str = "unknown occupation";

#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error("experience graph has no entry for {requested}; available: {available}")]
    MissingEntry { requested: VariantKey, available: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("experience generation failed: {0}")]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct GraphEntry {
    gender: Gender,
    age_bucket: AgeBucket,
    triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct GraphFile {
    #[serde(default)]
    entries: Vec<GraphEntry>,
}

/// Triplets keyed by (gender, age bucket). Every key has at least one triplet.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperienceGraph {
    entries: BTreeMap<VariantKey, Vec<Triplet>>,
}

impl ExperienceGraph {
    pub fn new(entries: impl IntoIterator<Item = (VariantKey, Vec<Triplet>)>) -> Result<Self, String> {
        let mut map: BTreeMap<VariantKey, Vec<Triplet>> = BTreeMap::new();
        for (key, triplets) in entries {
            for t in &triplets {
                if let Some(v) = t.validate().first() {
                    return Err(format!("{key}: {v}"));
                }
            }
            map.entry(key).or_default().extend(triplets);
        }
        if let Some((key, _)) = map.iter().find(|(_, v)| v.is_empty()) {
            return Err(format!("entry {key} has no triplets"));
        }
        Ok(Self { entries: map })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let file: GraphFile = toml::from_str(text).map_err(|e| e.to_string())?;
        ExperienceGraph::new(
            file.entries
                .into_iter()
                .map(|e| (VariantKey::new(e.gender, e.age_bucket), e.triplets)),
        )
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read_config(path)?;
        ExperienceGraph::from_toml_str(&text).map_err(|e| ConfigError::invalid(path, e))
    }

    pub fn keys(&self) -> Vec<VariantKey> {
        self.entries.keys().copied().collect()
    }

    pub fn entry(&self, gender: Gender, age: u32) -> Result<&[Triplet], ExpError> {
        let key = VariantKey::for_age(gender, age);
        self.entries
            .get(&key)
            .map(Vec::as_slice)
            .ok_or_else(|| ExpError::MissingEntry {
                requested: key,
                available: self.keys().iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "),
            })
    }
}

/// A triplet together with its stable position in the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledTriplet {
    pub id: String,
    pub triplet: Triplet,
}

fn sampled(key: VariantKey, index: usize, triplet: &Triplet) -> SampledTriplet {
    SampledTriplet {
        id: format!("{key}/{index}"),
        triplet: triplet.clone(),
    }
}

/// Uniform draw from the graph entry for the patient's gender and age bucket.
pub fn sample_triplet<R: Rng + ?Sized>(
    graph: &ExperienceGraph,
    gender: Gender,
    age: u32,
    rng: &mut R,
) -> Result<SampledTriplet, ExpError> {
    let entry = graph.entry(gender, age)?;
    let i = rng.random_range(0..entry.len());
    Ok(sampled(VariantKey::for_age(gender, age), i, &entry[i]))
}

/// Draws `k` triplets, without replacement while the entry lasts and with
/// replacement for the remainder.
pub fn sample_triplets<R: Rng + ?Sized>(
    graph: &ExperienceGraph,
    gender: Gender,
    age: u32,
    k: usize,
    rng: &mut R,
) -> Result<Vec<SampledTriplet>, ExpError> {
    let entry = graph.entry(gender, age)?;
    let key = VariantKey::for_age(gender, age);
    let distinct = k.min(entry.len());
    let mut out: Vec<SampledTriplet> = index::sample(rng, entry.len(), distinct)
        .into_iter()
        .map(|i| sampled(key, i, &entry[i]))
        .collect();
    while out.len() < k {
        let i = rng.random_range(0..entry.len());
        out.push(sampled(key, i, &entry[i]));
    }
    Ok(out)
}

/// Occupation from a `work: ...` segment of the personal history.
pub fn extract_work(personal_history: &str) -> String {
    for segment in personal_history.split(['\n', ';', '；']) {
        let Some((key, value)) = segment.split_once([':', '：']) else {
            continue;
        };
        if key.trim().eq_ignore_ascii_case("work") {
            let value = value.trim().trim_end_matches(['.', '。']);
            if !value.is_empty() {
                return value.to_string();
            }
        }
    }
    UNKNOWN_WORK.to_string()
}

/// Persona prompt from gender, age, work and diagnoses; nothing else from
/// the case is read.
pub fn build_persona(prompts: &PromptSet, case: &PatientCase) -> Result<String, ExpError> {
    let dx = case
        .diagnoses
        .iter()
        .map(|d| d.name.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    Ok(prompts.render(
        "persona",
        context! {
            gender => case.gender.as_str(),
            age => case.age,
            work => extract_work(&case.personal_history),
            dx => dx,
        },
    )?)
}

/// Outline fragment for one triplet.
pub fn experience_fragment(prompts: &PromptSet, triplet: &Triplet) -> Result<String, ExpError> {
    Ok(prompts.render(
        "experience_fragment",
        context! { time => &triplet.time, people => &triplet.people, event => &triplet.event },
    )?)
}

pub fn gen_fic_exp(
    prompts: &PromptSet,
    sampling: &SamplingConfig,
    persona: &str,
    triplet: &Triplet,
    backend: &dyn LlmBackend,
) -> Result<FictitiousExperience, ExpError> {
    let fragment = experience_fragment(prompts, triplet)?;
    let user = prompts.render("fic_exp_gen", context! { persona => persona, fragment => fragment })?;
    let request = sampling.request(OpTag::FicExpGen, String::new(), user);
    let response = backend.complete(&request)?;
    Ok(FictitiousExperience {
        text: response.text,
        source_triplet: triplet.clone(),
        persona_prompt: persona.to_string(),
    })
}

/// The structurized case alone, as the patient agent sees it before any
/// experience is generated.
pub fn patient_info(case: &PatientCase) -> String {
    structurize(case).render()
}

/// The structurized case followed by a labeled experience section.
pub fn fuse_patient_info(
    prompts: &PromptSet,
    case: &PatientCase,
    experience: &FictitiousExperience,
) -> Result<String, ExpError> {
    Ok(prompts.render(
        "patient_info",
        context! { case => patient_info(case), experience => &experience.text },
    )?)
}
