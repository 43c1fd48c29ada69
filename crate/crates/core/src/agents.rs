//! Doctor, patient and tool agents.
//!
//! Each operation renders one prompt, issues at most one backend call and
//! post-processes the reply. Symbolic guards (empty histories, the exchange
//! cap, the trigger latch, liveness filtering) run before or after the call
//! and never depend on the model.

use std::collections::{BTreeMap, BTreeSet};

use minijinja::context;

use crate::diagtree::DiagnosisTree;
use crate::domain::{DiagnosisSpeed, DialogueTurn, DoctorPersona, Role, TopicKind, TopicNode, TopicVisit, TurnOp};
use crate::llm::{parse_boolean, parse_topic_list, LlmBackend, LlmError, OpTag, SamplingConfig};
use crate::prompts::{PromptError, PromptSet};

pub const DEFAULT_EXCHANGE_CAP: usize = 4;
pub const DEFAULT_HISTORY_WINDOW: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Backend(#[from] LlmError),
}

/// How `dup_detect` decides a topic was already covered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DupStrategy {
    /// Ask the backend which pending topics the dialogue covered.
    #[default]
    Llm,
    /// Case- and whitespace-insensitive substring match of the label.
    Substring,
}

/// Exchanges allowed per topic for this doctor.
pub fn exchange_cap(base: usize, persona: &DoctorPersona) -> usize {
    match persona.diagnosis_speed {
        DiagnosisSpeed::Fast => (base / 2).max(1),
        _ => base.max(1),
    }
}

pub fn speaker(role: Role) -> &'static str {
    match role {
        Role::Doctor => "Doctor",
        Role::Patient => "Patient",
    }
}

pub fn render_turns(turns: &[DialogueTurn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}: {}", speaker(t.role), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The dialogue as the agents see it: a recent window plus a summary line
/// naming the topics that fell out of the window.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistoryView {
    pub summary: String,
    pub history: String,
}

pub fn history_view(turns: &[DialogueTurn], topics: &[TopicVisit], window: usize) -> HistoryView {
    let cut = turns.len().saturating_sub(window);
    let labels: BTreeMap<&str, &str> = topics.iter().map(|t| (t.id.as_str(), t.label.as_str())).collect();
    let mut earlier: Vec<&str> = Vec::new();
    for t in &turns[..cut] {
        if let Some(label) = labels.get(t.topic_id.as_str()) {
            if !earlier.contains(label) {
                earlier.push(label);
            }
        }
    }
    let summary = if earlier.is_empty() {
        String::new()
    } else {
        format!("Earlier topics discussed: {}.", earlier.join(", "))
    };
    HistoryView {
        summary,
        history: render_turns(&turns[cut..]),
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Agent operations bound to one backend and prompt set.
pub struct Agents<'a> {
    pub prompts: &'a PromptSet,
    pub sampling: SamplingConfig,
    pub backend: &'a dyn LlmBackend,
}

impl<'a> Agents<'a> {
    pub fn new(prompts: &'a PromptSet, sampling: SamplingConfig, backend: &'a dyn LlmBackend) -> Self {
        Self {
            prompts,
            sampling,
            backend,
        }
    }

    fn call(&self, op: OpTag, system: String, user: String) -> Result<String, AgentError> {
        let request = self.sampling.request(op, system, user);
        Ok(self.backend.complete(&request)?.text)
    }

    fn tool_call(&self, op: OpTag, user: String) -> Result<String, AgentError> {
        let system = self.prompts.render("tool_system", context! {})?;
        self.call(op, system, user)
    }

    /// Whether discussion of `topic` should stop. `topic_hist` holds only
    /// turns of this topic.
    pub fn is_topic_end(&self, topic: &TopicNode, topic_hist: &[DialogueTurn], cap: usize) -> Result<bool, AgentError> {
        if topic_hist.is_empty() {
            return Ok(false);
        }
        let exchanges = topic_hist.iter().filter(|t| t.role == Role::Doctor).count();
        if exchanges >= cap {
            return Ok(true);
        }
        let user = self.prompts.render(
            "is_topic_end",
            context! { topic => &topic.label, history => render_turns(topic_hist) },
        )?;
        let reply = self.tool_call(OpTag::IsTopicEnd, user)?;
        Ok(parse_boolean(&reply).unwrap_or_else(|e| {
            log::debug!("topic {}: {e}; continuing", topic.id);
            false
        }))
    }

    /// Topics mentioned in a patient narrative.
    pub fn parse_exp(&self, narrative: &str) -> Result<Vec<String>, AgentError> {
        if narrative.trim().is_empty() {
            return Ok(Vec::new());
        }
        let user = self.prompts.render("parse_exp", context! { narrative => narrative })?;
        Ok(parse_topic_list(&self.tool_call(OpTag::ParseExp, user)?))
    }

    /// Live symptom leaves already covered by `dial_hist`.
    pub fn dup_detect(
        &self,
        dial_hist: &[DialogueTurn],
        tree: &DiagnosisTree,
        strategy: DupStrategy,
    ) -> Result<BTreeSet<String>, AgentError> {
        let pending: Vec<&TopicNode> = tree
            .symptom_leaves()
            .filter(|l| l.is_live() && l.kind == TopicKind::Symptom)
            .collect();
        if dial_hist.is_empty() || pending.is_empty() {
            return Ok(BTreeSet::new());
        }
        match strategy {
            DupStrategy::Substring => {
                let text = normalize(&render_turns(dial_hist));
                Ok(pending
                    .iter()
                    .filter(|l| {
                        let label = normalize(&l.label);
                        !label.is_empty() && text.contains(&label)
                    })
                    .map(|l| l.id.clone())
                    .collect())
            }
            DupStrategy::Llm => {
                let topics: Vec<&str> = pending.iter().map(|l| l.label.as_str()).collect();
                let user = self.prompts.render(
                    "dup_detect",
                    context! { topics => topics, history => render_turns(dial_hist) },
                )?;
                let reply = self.tool_call(OpTag::DupDetect, user)?;
                let mut out = BTreeSet::new();
                for label in parse_topic_list(&reply) {
                    let wanted = normalize(&label);
                    let hits: Vec<&&TopicNode> = pending.iter().filter(|l| normalize(&l.label) == wanted).collect();
                    if hits.is_empty() {
                        log::warn!("dup_detect named an unknown topic `{label}`; ignored");
                    }
                    out.extend(hits.iter().map(|l| l.id.clone()));
                }
                Ok(out)
            }
        }
    }

    /// Topic instruction shared by the doctor and patient prompts.
    pub fn prompt_gen(&self, topic: &TopicNode) -> Result<String, AgentError> {
        let name = match topic.kind {
            TopicKind::Symptom => "prompt_gen_symptom",
            TopicKind::Experience => "prompt_gen_experience",
        };
        Ok(self.prompts.render(name, context! { label => &topic.label })?)
    }

    /// Whether the latest doctor question should unlock the experience.
    /// Fires at most once: after a true verdict `latched` stays set and no
    /// further calls are made.
    pub fn trigger_exp(&self, dial_hist: &[DialogueTurn], latched: &mut bool) -> Result<bool, AgentError> {
        if *latched {
            return Ok(false);
        }
        let Some(question) = dial_hist.iter().rev().find(|t| t.role == Role::Doctor) else {
            return Ok(false);
        };
        let user = self.prompts.render(
            "trigger_exp",
            context! { history => render_turns(dial_hist), question => &question.text },
        )?;
        let reply = self.tool_call(OpTag::TriggerExp, user)?;
        let fired = parse_boolean(&reply).unwrap_or_else(|e| {
            log::debug!("trigger: {e}; not firing");
            false
        });
        *latched = fired;
        Ok(fired)
    }

    pub fn doctor_system(&self, persona: &DoctorPersona) -> Result<String, AgentError> {
        let speed = match persona.diagnosis_speed {
            DiagnosisSpeed::Slow => "slow",
            DiagnosisSpeed::Normal => "normal",
            DiagnosisSpeed::Fast => "fast",
        };
        Ok(self.prompts.render(
            "doctor_system",
            context! {
                age => persona.age,
                gender => persona.gender.as_str(),
                specialties => persona.specialties.join(", "),
                empathetic => persona.empathetic,
                speed => speed,
                explanation => persona.explanation,
            },
        )?)
    }

    fn doctor_call(
        &self,
        template: &str,
        op: OpTag,
        topic_prompt: &str,
        view: &HistoryView,
        persona: &DoctorPersona,
    ) -> Result<String, AgentError> {
        let user = self.prompts.render(
            template,
            context! { summary => &view.summary, history => &view.history, topic_prompt => topic_prompt },
        )?;
        self.call(op, self.doctor_system(persona)?, user)
    }

    pub fn doc_gen(
        &self,
        topic_prompt: &str,
        view: &HistoryView,
        persona: &DoctorPersona,
    ) -> Result<String, AgentError> {
        self.doctor_call("doc_gen", OpTag::DocGen, topic_prompt, view, persona)
    }

    /// Comforts and asks about the topic in one utterance.
    pub fn empath_gen(
        &self,
        topic_prompt: &str,
        view: &HistoryView,
        persona: &DoctorPersona,
    ) -> Result<String, AgentError> {
        self.doctor_call("empath_gen", OpTag::EmpathGen, topic_prompt, view, persona)
    }

    /// The doctor's next turn, routed by the persona's empathy habit.
    pub fn doctor_turn(
        &self,
        topic_prompt: &str,
        view: &HistoryView,
        persona: &DoctorPersona,
    ) -> Result<(String, TurnOp), AgentError> {
        if persona.empathetic {
            Ok((self.empath_gen(topic_prompt, view, persona)?, TurnOp::EmpathGen))
        } else {
            Ok((self.doc_gen(topic_prompt, view, persona)?, TurnOp::DocGen))
        }
    }

    pub fn pat_gen(&self, topic_prompt: &str, view: &HistoryView, pat_info: &str) -> Result<String, AgentError> {
        let system = self
            .prompts
            .render("patient_system", context! { pat_info => pat_info })?;
        let user = self.prompts.render(
            "pat_gen",
            context! { summary => &view.summary, history => &view.history, topic_prompt => topic_prompt },
        )?;
        self.call(OpTag::PatGen, system, user)
    }
}
