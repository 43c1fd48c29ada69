//! Session loop and one-to-many fan-out.
//!
//! A session alternates doctor and patient turns over topics drawn from the
//! diagnosis tree. A topic ends on a tool verdict or at the exchange cap;
//! covered topics are then pruned and the next one is drawn. Drawing the
//! experience anchor parses the patient's narrative into follow-up topics.
//! The dialogue ends at a topic boundary once no live leaf remains.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{
    exchange_cap, history_view, AgentError, Agents, DupStrategy, DEFAULT_EXCHANGE_CAP, DEFAULT_HISTORY_WINDOW,
};
use crate::diagtree::{DiagnosisTree, ExperienceCaps, TreeError, TreeStore};
use crate::domain::{
    duplicate_ids, ConversationRecord, DialogueTurn, DoctorPersona, FictitiousExperience, Label, PatientCase,
    PatientProfile, RecordStats, Role, TopicNode, TopicVisit, TurnOp, Validate, Violation,
};
use crate::error::{read_config, ConfigError};
use crate::expgen::{
    build_persona, fuse_patient_info, gen_fic_exp, patient_info, sample_triplets, ExpError, ExperienceGraph,
    SampledTriplet,
};
use crate::llm::{BackendSource, LlmBackend, SamplingConfig};
use crate::prompts::PromptSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub exchange_cap: usize,
    pub caps: ExperienceCaps,
    pub dup_strategy: DupStrategy,
    pub sampling: SamplingConfig,
    pub history_window: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            exchange_cap: DEFAULT_EXCHANGE_CAP,
            caps: ExperienceCaps::default(),
            dup_strategy: DupStrategy::default(),
            sampling: SamplingConfig::default(),
            history_window: DEFAULT_HISTORY_WINDOW,
        }
    }
}

/// Everything a session reads but never mutates.
pub struct SessionContext<'a> {
    pub prompts: &'a PromptSet,
    pub config: SessionConfig,
    pub graph: &'a ExperienceGraph,
}

/// Per-session draws fixed before the session starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPlan {
    pub session_index: usize,
    pub seed: u64,
    pub persona: DoctorPersona,
    pub triplet: SampledTriplet,
}

/// Where a failed session stopped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResumeState {
    pub current_topic: Option<String>,
    pub visited: Vec<String>,
    pub deleted: Vec<String>,
    pub trigger_latched: bool,
}

/// A session that did not finish, with its partial transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFailure {
    pub case_id: String,
    pub session_index: usize,
    pub seed: u64,
    pub persona_id: String,
    pub experience_id: String,
    pub error: String,
    pub turns: Vec<DialogueTurn>,
    pub topics: Vec<TopicVisit>,
    pub resume: ResumeState,
}

impl std::fmt::Display for SessionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "case {} session {} failed after {} turns: {}",
            self.case_id,
            self.session_index,
            self.turns.len(),
            self.error
        )
    }
}

impl std::error::Error for SessionFailure {}

#[derive(Debug, thiserror::Error)]
enum StepError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Exp(#[from] ExpError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("turn budget of {0} doctor turns exceeded")]
    Budget(usize),
}

/// SHA-256 over (base seed, case id, session index), first eight bytes.
pub fn derive_seed(base_seed: u64, case_id: &str, session_index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update((case_id.len() as u64).to_le_bytes());
    h.update(case_id.as_bytes());
    h.update(session_index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn topic_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn plan_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Copies the case's diagnoses and treatment into the record label.
pub fn append_label(mut record: ConversationRecord, case: &PatientCase) -> ConversationRecord {
    record.label = Label {
        diagnoses: case.diagnoses.clone(),
        treatment: case.treatment.clone(),
    };
    record
}

struct Session<'a> {
    ctx: &'a SessionContext<'a>,
    agents: Agents<'a>,
    case: &'a PatientCase,
    plan: &'a SessionPlan,
    persona_prompt: String,
    tree: DiagnosisTree,
    rng: ChaCha8Rng,
    cap: usize,
    budget: usize,
    current: Option<TopicNode>,
    topic_start: usize,
    dial: Vec<DialogueTurn>,
    topics: Vec<TopicVisit>,
    pat_info: String,
    latched: bool,
    experience: Option<FictitiousExperience>,
    experience_turn: Option<usize>,
}

impl<'a> Session<'a> {
    fn doctor_turns(&self) -> usize {
        self.dial.iter().filter(|t| t.role == Role::Doctor).count()
    }

    fn push(&mut self, role: Role, text: String, op: TurnOp, topic: &TopicNode) {
        self.dial.push(DialogueTurn {
            index: self.dial.len(),
            role,
            text,
            topic_id: topic.id.clone(),
            op,
        });
    }

    fn exchange(&mut self, topic: &TopicNode) -> Result<(), StepError> {
        if self.doctor_turns() >= self.budget {
            return Err(StepError::Budget(self.budget));
        }
        let window = self.ctx.config.history_window;
        let topic_prompt = self.agents.prompt_gen(topic)?;
        let view = history_view(&self.dial, &self.topics, window);
        let (text, op) = self.agents.doctor_turn(&topic_prompt, &view, &self.plan.persona)?;
        self.push(Role::Doctor, text, op, topic);

        if self.agents.trigger_exp(&self.dial, &mut self.latched)? {
            let exp = gen_fic_exp(
                self.ctx.prompts,
                &self.ctx.config.sampling,
                &self.persona_prompt,
                &self.plan.triplet.triplet,
                self.agents.backend,
            )?;
            self.pat_info = fuse_patient_info(self.ctx.prompts, self.case, &exp)?;
            self.experience = Some(exp);
            self.experience_turn = Some(self.dial.len());
        }

        let view = history_view(&self.dial, &self.topics, window);
        let text = self.agents.pat_gen(&topic_prompt, &view, &self.pat_info)?;
        self.push(Role::Patient, text, TurnOp::PatGen, topic);
        Ok(())
    }

    fn latest_patient_text(&self, from: usize) -> String {
        self.dial[from..]
            .iter()
            .rev()
            .find(|t| t.role == Role::Patient)
            .map(|t| t.text.clone())
            .unwrap_or_default()
    }

    /// The patient turn that first drew on the experience, else the latest
    /// patient turn.
    fn narrative(&self) -> String {
        match self.experience_turn.and_then(|i| self.dial.get(i)) {
            Some(turn) => turn.text.clone(),
            None => self.latest_patient_text(0),
        }
    }

    /// Draws the next discussable topic, growing the experience subtree when
    /// the anchor comes up. `None` once the tree is exhausted.
    fn next_topic(&mut self) -> Result<Option<TopicNode>, StepError> {
        if self.tree.is_dial_end() {
            return Ok(None);
        }
        let mut topic = self.tree.rand_visit(&mut self.rng)?;
        if self.tree.is_anchor(&topic.id) {
            let narrative = self.narrative();
            let parsed = self.agents.parse_exp(&narrative)?;
            if parsed.is_empty() {
                log::info!("case {}: no experience topics parsed", self.case.id);
            }
            self.tree.attach_experience_tree(&narrative, &parsed)?;
            if self.tree.is_dial_end() {
                return Ok(None);
            }
            topic = self.tree.rand_visit(&mut self.rng)?;
        }
        self.topics.push(TopicVisit {
            id: topic.id.clone(),
            label: topic.label.clone(),
            kind: topic.kind,
        });
        Ok(Some(topic))
    }

    fn start_topic(&mut self) -> Result<bool, StepError> {
        self.topic_start = self.dial.len();
        match self.next_topic()? {
            Some(topic) => {
                self.exchange(&topic)?;
                self.current = Some(topic);
                Ok(true)
            }
            None => {
                self.current = None;
                Ok(false)
            }
        }
    }

    fn topic_finished(&mut self, topic: &TopicNode) -> Result<bool, StepError> {
        let hist = &self.dial[self.topic_start..];
        if self.agents.is_topic_end(topic, hist, self.cap)? {
            return Ok(true);
        }
        if !self.tree.can_expand(&topic.id) {
            return Ok(false);
        }
        let sub = self.agents.parse_exp(&self.latest_patient_text(self.topic_start))?;
        let growth = self.tree.extend_experience(&topic.id, &sub)?;
        Ok(!growth.added.is_empty())
    }

    fn run(&mut self) -> Result<(), StepError> {
        if !self.start_topic()? {
            return Ok(());
        }
        while let Some(topic) = self.current.clone() {
            if self.topic_finished(&topic)? {
                let hist = &self.dial[self.topic_start..];
                let covered = self.agents.dup_detect(hist, &self.tree, self.ctx.config.dup_strategy)?;
                if !covered.is_empty() {
                    log::debug!("case {}: pruning covered topics {covered:?}", self.case.id);
                    self.tree.delete_topics(&covered)?;
                }
                if !self.start_topic()? {
                    break;
                }
            } else {
                self.exchange(&topic)?;
            }
        }
        Ok(())
    }

    fn failure(self, err: StepError) -> SessionFailure {
        let ids = |pred: fn(&TopicNode) -> bool| -> Vec<String> {
            self.tree.leaves().filter(|l| pred(l)).map(|l| l.id.clone()).collect()
        };
        SessionFailure {
            case_id: self.case.id.clone(),
            session_index: self.plan.session_index,
            seed: self.plan.seed,
            persona_id: self.plan.persona.id.clone(),
            experience_id: self.plan.triplet.id.clone(),
            error: err.to_string(),
            resume: ResumeState {
                current_topic: self.current.as_ref().map(|t| t.id.clone()),
                visited: ids(|l| l.visited),
                deleted: ids(|l| l.deleted),
                trigger_latched: self.latched,
            },
            turns: self.dial,
            topics: self.topics,
        }
    }

    fn finish(self) -> SessionOutcome {
        let record = ConversationRecord {
            case_id: self.case.id.clone(),
            session_index: self.plan.session_index,
            persona_id: self.plan.persona.id.clone(),
            experience_id: self.plan.triplet.id.clone(),
            seed: self.plan.seed,
            stats: RecordStats::from_turns(&self.dial),
            turns: self.dial,
            label: Label::default(),
            profile: PatientProfile::from_case(self.case),
            locations: self.case.locations.clone(),
            topics: self.topics,
            experience: self.experience,
        };
        SessionOutcome {
            record: append_label(record, self.case),
            tree: self.tree,
        }
    }
}

/// A finished record with the tree state it ended in.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub record: ConversationRecord,
    pub tree: DiagnosisTree,
}

/// Upper bound on doctor turns: every symptom leaf and every possible
/// experience topic discussed to the cap.
pub fn turn_budget(tree: &DiagnosisTree, cap: usize) -> usize {
    (tree.symptom_leaves().count() + tree.caps().max_leaves()) * cap
}

/// Runs one session with pre-drawn persona and triplet.
pub fn run_planned_session(
    ctx: &SessionContext,
    case: &PatientCase,
    tree: DiagnosisTree,
    plan: &SessionPlan,
    backend: &dyn LlmBackend,
) -> Result<ConversationRecord, SessionFailure> {
    run_traced(ctx, case, tree, plan, backend).map(|o| o.record)
}

/// Like [`run_planned_session`], also returning the final tree.
pub fn run_traced(
    ctx: &SessionContext,
    case: &PatientCase,
    tree: DiagnosisTree,
    plan: &SessionPlan,
    backend: &dyn LlmBackend,
) -> Result<SessionOutcome, SessionFailure> {
    let cap = exchange_cap(ctx.config.exchange_cap, &plan.persona);
    let persona_prompt = build_persona(ctx.prompts, case);
    let mut session = Session {
        ctx,
        agents: Agents::new(ctx.prompts, ctx.config.sampling, backend),
        case,
        plan,
        persona_prompt: String::new(),
        budget: turn_budget(&tree, cap),
        tree,
        rng: topic_rng(plan.seed),
        cap,
        current: None,
        topic_start: 0,
        dial: Vec::new(),
        topics: Vec::new(),
        pat_info: patient_info(case),
        latched: false,
        experience: None,
        experience_turn: None,
    };
    match persona_prompt {
        Ok(p) => session.persona_prompt = p,
        Err(e) => return Err(session.failure(e.into())),
    }
    match session.run() {
        Ok(()) => Ok(session.finish()),
        Err(e) => Err(session.failure(e)),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("fan-out size must be at least 1")]
    ZeroSessions,
    #[error("persona roster is empty")]
    EmptyRoster,
    #[error(transparent)]
    Exp(#[from] ExpError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Session(Box<SessionFailure>),
}

/// Runs a single session; the triplet is drawn from the seed's planning
/// stream, exactly as [`plan_fan_out`] draws it for a batch of one.
pub fn run_session(
    ctx: &SessionContext,
    case: &PatientCase,
    persona: &DoctorPersona,
    tree: DiagnosisTree,
    seed: u64,
    backend: &dyn LlmBackend,
) -> Result<ConversationRecord, RunError> {
    let mut rng = plan_rng(seed);
    let triplet = sample_triplets(ctx.graph, case.gender, case.age, 1, &mut rng)
        .map_err(PlanError::from)?
        .remove(0);
    let plan = SessionPlan {
        session_index: 0,
        seed,
        persona: persona.clone(),
        triplet,
    };
    run_planned_session(ctx, case, tree, &plan, backend).map_err(|f| RunError::Session(Box::new(f)))
}

/// Draws per-session seeds, personas and distinct triplets for `k` sessions.
pub fn plan_fan_out(
    case: &PatientCase,
    k: usize,
    roster: &[DoctorPersona],
    graph: &ExperienceGraph,
    base_seed: u64,
) -> Result<Vec<SessionPlan>, PlanError> {
    if k == 0 {
        return Err(PlanError::ZeroSessions);
    }
    if roster.is_empty() {
        return Err(PlanError::EmptyRoster);
    }
    let first_seed = derive_seed(base_seed, &case.id, 0);
    let mut rng = plan_rng(first_seed);
    let triplets = sample_triplets(graph, case.gender, case.age, k, &mut rng)?;
    Ok(triplets
        .into_iter()
        .enumerate()
        .map(|(i, triplet)| SessionPlan {
            session_index: i,
            seed: if i == 0 {
                first_seed
            } else {
                derive_seed(base_seed, &case.id, i as u64)
            },
            persona: roster[rng.random_range(0..roster.len())].clone(),
            triplet,
        })
        .collect())
}

/// Runs the planned sessions on a pool of `workers` threads. Results keep
/// plan order; one failed session does not stop the others.
pub fn fan_out(
    ctx: &SessionContext,
    case: &PatientCase,
    trees: &TreeStore,
    plans: &[SessionPlan],
    source: &dyn BackendSource,
    workers: usize,
) -> Result<Vec<Result<ConversationRecord, SessionFailure>>, PlanError> {
    let tree = trees.load_tree(case.gender, case.age, ctx.config.caps)?;
    let run = |plan: &SessionPlan| {
        let backend = source.session_backend();
        run_planned_session(ctx, case, tree.clone(), plan, backend.as_ref())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool builds");
    Ok(pool.install(|| plans.par_iter().map(run).collect()))
}

#[derive(Debug, Deserialize)]
struct RosterFile {
    #[serde(default)]
    personas: Vec<DoctorPersona>,
}

pub fn roster_from_toml_str(text: &str) -> Result<Vec<DoctorPersona>, String> {
    let file: RosterFile = toml::from_str(text).map_err(|e| e.to_string())?;
    let mut problems: Vec<Violation> = file.personas.iter().flat_map(|p| p.validate()).collect();
    problems.extend(
        duplicate_ids(file.personas.iter().map(|p| p.id.as_str()))
            .into_iter()
            .map(|id| Violation::new("personas.id", format!("duplicate persona id {id}"))),
    );
    if file.personas.is_empty() {
        problems.push(Violation::new("personas", "roster is empty"));
    }
    if problems.is_empty() {
        Ok(file.personas)
    } else {
        Err(problems.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))
    }
}

pub fn load_roster(path: &Path) -> Result<Vec<DoctorPersona>, ConfigError> {
    let text = read_config(path)?;
    roster_from_toml_str(&text).map_err(|e| ConfigError::invalid(path, e))
}
