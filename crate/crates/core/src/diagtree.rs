//! The symbolic half of the dynamic diagnosis tree.
//!
//! A tree is an ordered list of slots. Symptom slots come straight from a
//! [`TreeSpec`] and hold fixed leaves. At most one experience slot holds an
//! anchor leaf; when the anchor is drawn the caller parses the patient's
//! narrative and grows an experience subtree beneath it. Slots are visited in
//! order, leaves inside a slot uniformly at random.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{duplicate_ids, AgeBucket, Gender, TopicKind, TopicNode, VariantKey, Violation};
use crate::error::{read_config, ConfigError};

pub const ANCHOR_ID: &str = "exp";

fn default_anchor_label() -> String {
    "past experiences".to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSpec {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Index in the parent sequence the anchor is inserted at. Defaults to
    /// the middle of the sequence.
    #[serde(default)]
    pub position: Option<usize>,
    #[serde(default = "default_anchor_label")]
    pub label: String,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            position: None,
            label: default_anchor_label(),
        }
    }
}

impl AnchorSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentSpec {
    pub label: String,
    pub leaves: Vec<String>,
}

impl ParentSpec {
    pub fn new(label: impl Into<String>, leaves: &[&str]) -> Self {
        Self {
            label: label.into(),
            leaves: leaves.iter().map(|l| l.to_string()).collect(),
        }
    }
}

/// One symptom-inquiry tree variant as authored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub gender: Gender,
    pub age_bucket: AgeBucket,
    #[serde(default)]
    pub experience: AnchorSpec,
    pub parents: Vec<ParentSpec>,
}

impl TreeSpec {
    pub fn variant_key(&self) -> VariantKey {
        VariantKey::new(self.gender, self.age_bucket)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read_config(path)?;
        TreeSpec::from_toml_str(&text).map_err(|e| ConfigError::parse(path, e))
    }

    pub fn anchor_position(&self) -> Option<usize> {
        self.experience
            .enabled
            .then(|| self.experience.position.unwrap_or(self.parents.len().div_ceil(2)))
    }

    pub fn symptom_leaf_count(&self) -> usize {
        self.parents.iter().map(|p| p.leaves.len()).sum()
    }

    /// Structural checks: non-empty parents and unique labels.
    pub fn lint(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.parents.is_empty() {
            out.push(Violation::new("parents", "tree has no parent nodes"));
        }
        for (i, parent) in self.parents.iter().enumerate() {
            if parent.label.trim().is_empty() {
                out.push(Violation::new(format!("parents[{i}].label"), "empty label"));
            }
            if parent.leaves.is_empty() {
                out.push(Violation::new(
                    format!("parents[{i}]"),
                    format!("parent {:?} has no leaves", parent.label),
                ));
            }
            for (j, leaf) in parent.leaves.iter().enumerate() {
                if leaf.trim().is_empty() {
                    out.push(Violation::new(format!("parents[{i}].leaves[{j}]"), "empty label"));
                }
            }
        }
        let mut labels: Vec<&str> = Vec::new();
        for parent in &self.parents {
            labels.push(&parent.label);
            labels.extend(parent.leaves.iter().map(String::as_str));
        }
        if self.experience.enabled {
            labels.push(&self.experience.label);
        }
        for dup in duplicate_ids(labels) {
            out.push(Violation::new("labels", format!("label {dup:?} is not unique")));
        }
        if let Some(pos) = self.experience.position {
            if self.experience.enabled && pos > self.parents.len() {
                out.push(Violation::new(
                    "experience.position",
                    format!("position {pos} beyond {} parents", self.parents.len()),
                ));
            }
        }
        out
    }
}

/// Validated collection of tree variants, at most one per variant key.
#[derive(Debug, Clone, Default)]
pub struct TreeStore {
    specs: BTreeMap<VariantKey, TreeSpec>,
}

impl TreeStore {
    pub fn new(specs: impl IntoIterator<Item = TreeSpec>) -> Result<Self, Vec<Violation>> {
        let mut store = BTreeMap::new();
        let mut problems = Vec::new();
        for spec in specs {
            let key = spec.variant_key();
            for v in spec.lint() {
                problems.push(Violation::new(format!("{key}.{}", v.field), v.message));
            }
            if store.insert(key, spec).is_some() {
                problems.push(Violation::new(key.to_string(), "duplicate tree variant"));
            }
        }
        if problems.is_empty() {
            Ok(Self { specs: store })
        } else {
            Err(problems)
        }
    }

    /// Loads every `*.toml` file in a directory, or a single file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut files = Vec::new();
        if path.is_dir() {
            let entries = std::fs::read_dir(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for entry in entries.flatten() {
                let p = entry.path();
                if p.extension().is_some_and(|e| e == "toml") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let specs = files.iter().map(|f| TreeSpec::load(f)).collect::<Result<Vec<_>, _>>()?;
        TreeStore::new(specs)
            .map_err(|v| ConfigError::invalid(path, v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")))
    }

    pub fn variants(&self) -> Vec<VariantKey> {
        self.specs.keys().copied().collect()
    }

    pub fn get(&self, key: VariantKey) -> Option<&TreeSpec> {
        self.specs.get(&key)
    }

    pub fn load_tree(&self, gender: Gender, age: u32, caps: ExperienceCaps) -> Result<DiagnosisTree, TreeError> {
        let key = VariantKey::for_age(gender, age);
        self.get(key)
            .map(|spec| DiagnosisTree::from_spec(spec, caps))
            .ok_or_else(|| TreeError::NoVariant {
                requested: key,
                available: self.variants(),
            })
    }
}

/// Growth limits of the experience subtree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceCaps {
    pub max_topics: usize,
    pub max_depth: usize,
}

impl Default for ExperienceCaps {
    fn default() -> Self {
        Self {
            max_topics: 5,
            max_depth: 2,
        }
    }
}

impl ExperienceCaps {
    /// Upper bound on experience leaves the subtree can ever hold.
    pub fn max_leaves(&self) -> usize {
        (1..=self.max_depth as u32)
            .map(|d| self.max_topics.saturating_pow(d))
            .fold(0usize, usize::saturating_add)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TreeError {
    #[error("no tree variant for {requested}; available: {}", fmt_keys(.available))]
    NoVariant {
        requested: VariantKey,
        available: Vec<VariantKey>,
    },
    #[error("rand_visit called on an exhausted tree")]
    Exhausted,
    #[error("unknown topic id {0:?}")]
    UnknownTopic(String),
    #[error("tree has no experience slot")]
    NoExperienceSlot,
    #[error("experience subtree already attached")]
    ExperienceAttached,
    #[error("{0:?} is not an experience topic")]
    NotExperience(String),
}

fn fmt_keys(keys: &[VariantKey]) -> String {
    if keys.is_empty() {
        return "none".to_string();
    }
    keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Slot {
    Symptom { label: String, leaves: Vec<TopicNode> },
    Experience { anchor: TopicNode },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExperienceNode {
    pub node: TopicNode,
    /// 1 for topics parsed from the root narrative, 2 for their sub-topics.
    pub depth: usize,
    pub parent: Option<String>,
    pub expanded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExperienceTree {
    pub root_text: String,
    pub nodes: Vec<ExperienceNode>,
}

/// Result of growing the experience subtree.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Growth {
    pub added: Vec<String>,
    pub clipped: usize,
}

/// A session-owned diagnosis tree with visitation state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DiagnosisTree {
    variant: VariantKey,
    slots: Vec<Slot>,
    experience: Option<ExperienceTree>,
    caps: ExperienceCaps,
}

impl DiagnosisTree {
    pub fn from_spec(spec: &TreeSpec, caps: ExperienceCaps) -> Self {
        let mut slots: Vec<Slot> = spec
            .parents
            .iter()
            .enumerate()
            .map(|(i, p)| Slot::Symptom {
                label: p.label.clone(),
                leaves: p
                    .leaves
                    .iter()
                    .enumerate()
                    .map(|(j, l)| TopicNode::new(format!("p{i}.l{j}"), l.clone(), TopicKind::Symptom))
                    .collect(),
            })
            .collect();
        if let Some(pos) = spec.anchor_position() {
            let anchor = TopicNode::new(ANCHOR_ID, spec.experience.label.clone(), TopicKind::Experience);
            slots.insert(pos.min(slots.len()), Slot::Experience { anchor });
        }
        Self {
            variant: spec.variant_key(),
            slots,
            experience: None,
            caps,
        }
    }

    pub fn variant(&self) -> VariantKey {
        self.variant
    }

    pub fn caps(&self) -> ExperienceCaps {
        self.caps
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn experience(&self) -> Option<&ExperienceTree> {
        self.experience.as_ref()
    }

    pub fn has_anchor(&self) -> bool {
        self.slots.iter().any(|s| matches!(s, Slot::Experience { .. }))
    }

    fn experience_slot(&self) -> Option<usize> {
        self.slots.iter().position(|s| matches!(s, Slot::Experience { .. }))
    }

    pub fn is_anchor(&self, id: &str) -> bool {
        id == ANCHOR_ID && self.has_anchor()
    }

    /// Every leaf: symptom leaves, the anchor, and experience topics.
    pub fn leaves(&self) -> impl Iterator<Item = &TopicNode> {
        let slot_leaves = self.slots.iter().flat_map(|s| match s {
            Slot::Symptom { leaves, .. } => leaves.iter().collect::<Vec<_>>(),
            Slot::Experience { anchor } => vec![anchor],
        });
        let exp = self.experience.iter().flat_map(|e| e.nodes.iter().map(|n| &n.node));
        slot_leaves.chain(exp)
    }

    pub fn symptom_leaves(&self) -> impl Iterator<Item = &TopicNode> {
        self.leaves().filter(|l| l.kind == TopicKind::Symptom)
    }

    pub fn leaf(&self, id: &str) -> Option<&TopicNode> {
        self.leaves().find(|l| l.id == id)
    }

    fn leaf_mut(&mut self, id: &str) -> Option<&mut TopicNode> {
        for slot in &mut self.slots {
            match slot {
                Slot::Symptom { leaves, .. } => {
                    if let Some(l) = leaves.iter_mut().find(|l| l.id == id) {
                        return Some(l);
                    }
                }
                Slot::Experience { anchor } if anchor.id == id => return Some(anchor),
                Slot::Experience { .. } => {}
            }
        }
        self.experience
            .as_mut()
            .and_then(|e| e.nodes.iter_mut().find(|n| n.node.id == id))
            .map(|n| &mut n.node)
    }

    /// Slot index a leaf lives in; experience topics belong to the anchor's slot.
    pub fn slot_of(&self, id: &str) -> Option<usize> {
        for (i, slot) in self.slots.iter().enumerate() {
            match slot {
                Slot::Symptom { leaves, .. } if leaves.iter().any(|l| l.id == id) => return Some(i),
                Slot::Experience { anchor } if anchor.id == id => return Some(i),
                _ => {}
            }
        }
        let in_exp = self
            .experience
            .as_ref()
            .is_some_and(|e| e.nodes.iter().any(|n| n.node.id == id));
        if in_exp {
            self.experience_slot()
        } else {
            None
        }
    }

    pub fn experience_node(&self, id: &str) -> Option<&ExperienceNode> {
        self.experience
            .as_ref()
            .and_then(|e| e.nodes.iter().find(|n| n.node.id == id))
    }

    pub fn live_count(&self) -> usize {
        self.leaves().filter(|l| l.is_live()).count()
    }

    pub fn live_ids(&self) -> BTreeSet<String> {
        self.leaves().filter(|l| l.is_live()).map(|l| l.id.clone()).collect()
    }

    /// True iff every leaf is visited or deleted.
    pub fn is_dial_end(&self) -> bool {
        self.leaves().all(|l| !l.is_live())
    }

    /// Live candidates of one slot, experience topics deepest-first.
    fn candidates(&self, slot: usize) -> Vec<String> {
        match &self.slots[slot] {
            Slot::Symptom { leaves, .. } => leaves.iter().filter(|l| l.is_live()).map(|l| l.id.clone()).collect(),
            Slot::Experience { anchor } => {
                if anchor.is_live() {
                    return vec![anchor.id.clone()];
                }
                let Some(exp) = &self.experience else {
                    return Vec::new();
                };
                let live: Vec<&ExperienceNode> = exp.nodes.iter().filter(|n| n.node.is_live()).collect();
                let deepest = live.iter().map(|n| n.depth).max().unwrap_or(0);
                live.iter()
                    .filter(|n| n.depth == deepest)
                    .map(|n| n.node.id.clone())
                    .collect()
            }
        }
    }

    /// Draws the next topic: the earliest slot with a live leaf, then a
    /// uniformly random live leaf inside it. The leaf is marked visited.
    pub fn rand_visit<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<TopicNode, TreeError> {
        for slot in 0..self.slots.len() {
            let candidates = self.candidates(slot);
            if candidates.is_empty() {
                continue;
            }
            let pick = &candidates[rng.random_range(0..candidates.len())];
            let leaf = self.leaf_mut(pick).expect("candidate exists");
            leaf.visited = true;
            return Ok(leaf.clone());
        }
        Err(TreeError::Exhausted)
    }

    /// Marks leaves deleted. Fails without changing anything if an id is unknown.
    pub fn delete_topics(&mut self, ids: &BTreeSet<String>) -> Result<(), TreeError> {
        if let Some(unknown) = ids.iter().find(|id| self.leaf(id).is_none()) {
            return Err(TreeError::UnknownTopic(unknown.clone()));
        }
        for id in ids {
            self.leaf_mut(id).expect("checked above").deleted = true;
        }
        Ok(())
    }

    fn fresh_topics(&self, topics: &[String]) -> (Vec<String>, usize) {
        let mut kept: Vec<String> = Vec::new();
        for t in topics {
            let t = t.trim();
            if !t.is_empty() && !kept.iter().any(|k| k == t) {
                kept.push(t.to_string());
            }
        }
        let clipped = kept.len().saturating_sub(self.caps.max_topics);
        kept.truncate(self.caps.max_topics);
        (kept, clipped)
    }

    /// Replaces the empty experience subtree with a root narrative and one
    /// unvisited topic per label, clipped to the topic cap.
    pub fn attach_experience_tree(&mut self, root_text: &str, topics: &[String]) -> Result<Growth, TreeError> {
        if !self.has_anchor() {
            return Err(TreeError::NoExperienceSlot);
        }
        if self.experience.is_some() {
            return Err(TreeError::ExperienceAttached);
        }
        let (kept, clipped) = if self.caps.max_depth == 0 {
            (Vec::new(), topics.len())
        } else {
            self.fresh_topics(topics)
        };
        if clipped > 0 {
            log::info!("experience topics clipped: {clipped} over cap {}", self.caps.max_topics);
        }
        let nodes: Vec<ExperienceNode> = kept
            .iter()
            .enumerate()
            .map(|(i, label)| ExperienceNode {
                node: TopicNode::new(format!("{ANCHOR_ID}.{i}"), label.clone(), TopicKind::Experience),
                depth: 1,
                parent: None,
                expanded: false,
            })
            .collect();
        let added = nodes.iter().map(|n| n.node.id.clone()).collect();
        self.experience = Some(ExperienceTree {
            root_text: root_text.to_string(),
            nodes,
        });
        Ok(Growth { added, clipped })
    }

    /// Whether `id` may still be parsed into sub-topics.
    pub fn can_expand(&self, id: &str) -> bool {
        self.experience_node(id)
            .is_some_and(|n| !n.expanded && n.depth < self.caps.max_depth)
    }

    /// Adds sub-topics under an experience topic. Each topic is expanded at
    /// most once; past the depth cap every topic is clipped.
    pub fn extend_experience(&mut self, id: &str, topics: &[String]) -> Result<Growth, TreeError> {
        let caps = self.caps;
        let (kept, mut clipped) = self.fresh_topics(topics);
        let exp = self.experience.as_mut().ok_or(TreeError::NoExperienceSlot)?;
        let idx = exp
            .nodes
            .iter()
            .position(|n| n.node.id == id)
            .ok_or_else(|| TreeError::NotExperience(id.to_string()))?;
        let parent = &mut exp.nodes[idx];
        if parent.expanded || parent.depth >= caps.max_depth {
            clipped = topics.len();
            log::info!("sub-topics of {id} clipped: expansion cap reached");
            return Ok(Growth { added: vec![], clipped });
        }
        parent.expanded = true;
        let depth = parent.depth + 1;
        let new_nodes: Vec<ExperienceNode> = kept
            .iter()
            .enumerate()
            .map(|(i, label)| ExperienceNode {
                node: TopicNode::new(format!("{id}.{i}"), label.clone(), TopicKind::Experience),
                depth,
                parent: Some(id.to_string()),
                expanded: false,
            })
            .collect();
        if clipped > 0 {
            log::info!("sub-topics of {id} clipped: {clipped} over cap {}", caps.max_topics);
        }
        let added = new_nodes.iter().map(|n| n.node.id.clone()).collect();
        exp.nodes.extend(new_nodes);
        Ok(Growth { added, clipped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(parents: Vec<ParentSpec>, anchor: AnchorSpec) -> TreeSpec {
        TreeSpec {
            gender: Gender::Female,
            age_bucket: AgeBucket::Teen,
            experience: anchor,
            parents,
        }
    }

    fn tree(parents: Vec<ParentSpec>) -> DiagnosisTree {
        DiagnosisTree::from_spec(&spec(parents, AnchorSpec::disabled()), ExperienceCaps::default())
    }

    fn ids(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn store_selects_variant_by_bucket() {
        let mut teen = spec(vec![ParentSpec::new("mood", &["low mood"])], AnchorSpec::default());
        let mut adult = teen.clone();
        adult.gender = Gender::Male;
        adult.age_bucket = AgeBucket::Adult;
        adult.parents[0].leaves[0] = "anhedonia".into();
        teen.parents[0].leaves[0] = "low mood".into();
        let store = TreeStore::new([teen, adult]).unwrap();

        let t = store.load_tree(Gender::Female, 16, ExperienceCaps::default()).unwrap();
        assert_eq!(t.variant(), VariantKey::new(Gender::Female, AgeBucket::Teen));
        assert!(t.leaves().all(|l| l.is_live()));
        assert!(t.experience().is_none());

        let t = store.load_tree(Gender::Male, 40, ExperienceCaps::default()).unwrap();
        assert_eq!(t.leaf("p0.l0").unwrap().label, "anhedonia");

        let err = store
            .load_tree(Gender::Female, 200, ExperienceCaps::default())
            .unwrap_err();
        match &err {
            TreeError::NoVariant { available, .. } => assert_eq!(available.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("female/teen"));
    }

    #[test]
    fn lint_catches_empty_parents_and_duplicate_labels() {
        let bad = spec(
            vec![ParentSpec::new("mood", &[]), ParentSpec::new("sleep", &["mood"])],
            AnchorSpec::default(),
        );
        let report = bad.lint();
        assert!(report.iter().any(|v| v.message.contains("no leaves")));
        assert!(report.iter().any(|v| v.message.contains("not unique")));
        assert!(TreeStore::new([bad]).is_err());
        assert!(spec(vec![], AnchorSpec::default())
            .lint()
            .iter()
            .any(|v| v.field == "parents"));
    }

    #[test]
    fn single_leaf_parent_is_deterministic() {
        let mut t = tree(vec![ParentSpec::new("A", &["a1"]), ParentSpec::new("B", &["b1"])]);
        assert_eq!(t.rand_visit(&mut rng(1)).unwrap().label, "a1");
        assert_eq!(t.rand_visit(&mut rng(1)).unwrap().label, "b1");
        assert_eq!(t.rand_visit(&mut rng(1)), Err(TreeError::Exhausted));
    }

    #[test]
    fn visited_leaf_is_skipped() {
        let mut t = tree(vec![ParentSpec::new("A", &["a1", "a2"]), ParentSpec::new("B", &["b1"])]);
        t.leaf_mut("p0.l0").unwrap().visited = true;
        for seed in 0..20 {
            let mut copy = t.clone();
            assert_eq!(copy.rand_visit(&mut rng(seed)).unwrap().label, "a2");
        }
    }

    #[test]
    fn dial_end_counts_every_leaf() {
        let mut t = DiagnosisTree::from_spec(
            &spec(vec![ParentSpec::new("A", &["a1"])], AnchorSpec::default()),
            ExperienceCaps::default(),
        );
        assert!(!t.is_dial_end());
        t.rand_visit(&mut rng(0)).unwrap();
        let anchor = t.rand_visit(&mut rng(0)).unwrap();
        assert_eq!(anchor.id, ANCHOR_ID);
        t.attach_experience_tree("lost my job", &["work stress".into()])
            .unwrap();
        assert!(!t.is_dial_end(), "live experience leaf keeps the dialogue open");
        t.rand_visit(&mut rng(0)).unwrap();
        assert!(t.is_dial_end());
    }

    #[test]
    fn delete_marks_only_named_leaves() {
        let mut t = tree(vec![ParentSpec::new("A", &["a1", "a2"])]);
        t.delete_topics(&ids(&["p0.l1"])).unwrap();
        assert!(t.leaf("p0.l1").unwrap().deleted);
        assert!(t.leaf("p0.l0").unwrap().is_live());

        let before = t.clone();
        t.delete_topics(&BTreeSet::new()).unwrap();
        assert_eq!(t, before);

        t.delete_topics(&ids(&["p0.l0"])).unwrap();
        assert!(t.is_dial_end());
    }

    #[test]
    fn delete_unknown_id_is_atomic_error() {
        let mut t = tree(vec![ParentSpec::new("A", &["a1", "a2"])]);
        let before = t.clone();
        let err = t.delete_topics(&ids(&["p0.l0", "nope"])).unwrap_err();
        assert_eq!(err, TreeError::UnknownTopic("nope".into()));
        assert_eq!(t, before);
    }

    #[test]
    fn delete_keeps_visited_flag() {
        let mut t = tree(vec![ParentSpec::new("A", &["a1"])]);
        t.rand_visit(&mut rng(0)).unwrap();
        t.delete_topics(&ids(&["p0.l0"])).unwrap();
        let leaf = t.leaf("p0.l0").unwrap();
        assert!(leaf.visited && leaf.deleted);
    }

    #[test]
    fn attach_counts_and_clips() {
        let base = DiagnosisTree::from_spec(
            &spec(vec![ParentSpec::new("A", &["a1"])], AnchorSpec::default()),
            ExperienceCaps::default(),
        );
        let labels = |n: usize| (0..n).map(|i| format!("topic {i}")).collect::<Vec<_>>();

        let mut t = base.clone();
        let growth = t
            .attach_experience_tree(
                "lost my job",
                &["work stress".into(), "finances".into(), "family reaction".into()],
            )
            .unwrap();
        assert_eq!(growth.added.len(), 3);
        let exp = t.experience().unwrap();
        assert_eq!(exp.root_text, "lost my job");
        assert_eq!(exp.nodes.len(), 3);
        assert!(exp.nodes.iter().all(|n| n.node.is_live() && n.depth == 1));

        let mut t = base.clone();
        let dial_end_before = t.is_dial_end();
        t.attach_experience_tree("nothing to say", &[]).unwrap();
        assert_eq!(t.experience().unwrap().nodes.len(), 0);
        assert_eq!(t.is_dial_end(), dial_end_before);

        let mut t = base.clone();
        let growth = t.attach_experience_tree("many", &labels(9)).unwrap();
        assert_eq!((growth.added.len(), growth.clipped), (5, 4));

        assert_eq!(
            t.attach_experience_tree("again", &[]),
            Err(TreeError::ExperienceAttached)
        );
        assert_eq!(
            tree(vec![ParentSpec::new("A", &["a1"])]).attach_experience_tree("x", &[]),
            Err(TreeError::NoExperienceSlot)
        );
    }

    #[test]
    fn sub_topics_respect_depth_cap_and_are_visited_depth_first() {
        let mut t = DiagnosisTree::from_spec(
            &spec(
                vec![ParentSpec::new("A", &["a1"])],
                AnchorSpec {
                    position: Some(0),
                    ..AnchorSpec::default()
                },
            ),
            ExperienceCaps::default(),
        );
        let mut r = rng(3);
        assert_eq!(t.rand_visit(&mut r).unwrap().id, ANCHOR_ID);
        t.attach_experience_tree("story", &["x".into(), "y".into()]).unwrap();
        let first = t.rand_visit(&mut r).unwrap();
        assert!(t.can_expand(&first.id));
        let g = t.extend_experience(&first.id, &["x1".into(), "x2".into()]).unwrap();
        assert_eq!(g.added.len(), 2);
        assert!(!t.can_expand(&first.id));
        // children of the expanded topic come before its sibling
        let a = t.rand_visit(&mut r).unwrap();
        let b = t.rand_visit(&mut r).unwrap();
        assert_eq!(t.experience_node(&a.id).unwrap().depth, 2);
        assert_eq!(t.experience_node(&b.id).unwrap().depth, 2);
        assert!(!t.can_expand(&a.id), "depth cap reached");
        let g = t.extend_experience(&a.id, &["deeper".into()]).unwrap();
        assert_eq!((g.added.len(), g.clipped), (0, 1));
        let sibling = t.rand_visit(&mut r).unwrap();
        assert_eq!(t.experience_node(&sibling.id).unwrap().depth, 1);
        assert_eq!(t.rand_visit(&mut r).unwrap().id, "p0.l0");
        assert!(t.is_dial_end());
    }

    #[test]
    fn anchor_defaults_to_middle() {
        let s = spec(
            vec![
                ParentSpec::new("A", &["a"]),
                ParentSpec::new("B", &["b"]),
                ParentSpec::new("C", &["c"]),
                ParentSpec::new("D", &["d"]),
            ],
            AnchorSpec::default(),
        );
        let t = DiagnosisTree::from_spec(&s, ExperienceCaps::default());
        assert!(matches!(t.slots()[2], Slot::Experience { .. }));
        assert_eq!(t.slot_of(ANCHOR_ID), Some(2));
        assert_eq!(t.slot_of("p2.l0"), Some(3));
    }

    #[test]
    fn caps_bound_total_experience_leaves() {
        assert_eq!(ExperienceCaps::default().max_leaves(), 30);
        assert_eq!(
            ExperienceCaps {
                max_topics: 5,
                max_depth: 1
            }
            .max_leaves(),
            5
        );
    }

    #[test]
    fn tree_spec_parses_from_toml() {
        let text = r#"
gender = "female"
age_bucket = "teen"

[experience]
position = 1
label = "past experiences"

[[parents]]
label = "mood"
leaves = ["low mood", "loss of interest"]

[[parents]]
label = "sleep"
leaves = ["sleep quality"]
"#;
        let s = TreeSpec::from_toml_str(text).unwrap();
        assert!(s.lint().is_empty());
        assert_eq!(s.anchor_position(), Some(1));
        assert_eq!(s.symptom_leaf_count(), 3);
    }
}
