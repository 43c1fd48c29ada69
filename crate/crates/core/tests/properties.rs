use std::collections::{BTreeMap, BTreeSet};

use diagsynth_core::agents::DupStrategy;
use diagsynth_core::case_prep::{filter_cases, mask_case, MaskingPolicy};
use diagsynth_core::dataset::{compute_stats, safety_scan, StatsAccumulator};
use diagsynth_core::diagtree::{AnchorSpec, DiagnosisTree, ExperienceCaps, ParentSpec, TreeSpec};
use diagsynth_core::domain::{
    AgeBucket, ConversationRecord, Diagnosis, DiagnosisSpeed, DialogueTurn, DoctorPersona, Gender, Label, PatientCase,
    PatientProfile, RawPatientCase, RecordStats, Role, TopicKind, Triplet, TurnOp, Validate, VariantKey,
};
use diagsynth_core::expgen::{ExperienceGraph, SampledTriplet};
use diagsynth_core::llm::{OpTag, Script, ScriptedBackend};
use diagsynth_core::orchestrator::{run_traced, turn_budget, SessionConfig, SessionContext, SessionPlan};
use diagsynth_core::prompts::PromptSet;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gender() -> impl Strategy<Value = Gender> {
    prop_oneof![Just(Gender::Male), Just(Gender::Female)]
}

fn words() -> impl Strategy<Value = String> {
    proptest::collection::vec("[a-z]{2,8}", 1..6).prop_map(|w| w.join(" "))
}

prop_compose! {
    fn raw_case()(
        name in "[A-Z][a-z]{3,6} [A-Z][a-z]{3,6}",
        dob in "19[5-9][0-9]-0[1-9]-1[0-9]",
        age in 0i64..100,
        gender in gender(),
        fields in proptest::collection::vec(words(), 7),
        mention_name in any::<bool>(),
        location in proptest::option::of("[A-Z][a-z]{4,8} (Road|District)"),
    ) -> RawPatientCase {
        let mut text = fields.clone();
        if mention_name {
            text[1] = format!("{} reports that {name} sleeps poorly", text[1]);
        }
        if let Some(loc) = &location {
            text[0] = format!("{} since moving to {loc}", text[0]);
        }
        text[1] = format!("{} at {age} years old", text[1]);
        RawPatientCase {
            id: None,
            name: Some(name),
            date_of_birth: Some(dob),
            exam_date: Some("2023-05-01".into()),
            age,
            gender,
            diagnoses: vec![Diagnosis::new("depressive state", "F32.901")],
            chief_complaint: Some(text[0].clone()),
            present_illness_history: Some(text[1].clone()),
            past_medical_history: Some(text[2].clone()),
            family_history: Some(text[3].clone()),
            personal_history: Some(text[4].clone()),
            mental_examination: Some(text[5].clone()),
            treatment: Some(text[6].clone()),
            locations: location.into_iter().collect(),
            extra: BTreeMap::new(),
        }
    }
}

fn text_fields(c: &PatientCase) -> Vec<&String> {
    vec![
        &c.chief_complaint,
        &c.present_illness_history,
        &c.past_medical_history,
        &c.family_history,
        &c.personal_history,
        &c.mental_examination,
        &c.treatment,
    ]
}

fn unmask(c: &PatientCase) -> RawPatientCase {
    RawPatientCase {
        id: Some(c.id.clone()),
        name: None,
        date_of_birth: None,
        exam_date: None,
        age: c.age as i64,
        gender: c.gender,
        diagnoses: c.diagnoses.clone(),
        chief_complaint: Some(c.chief_complaint.clone()),
        present_illness_history: Some(c.present_illness_history.clone()),
        past_medical_history: Some(c.past_medical_history.clone()),
        family_history: Some(c.family_history.clone()),
        personal_history: Some(c.personal_history.clone()),
        mental_examination: Some(c.mental_examination.clone()),
        treatment: Some(c.treatment.clone()),
        locations: c.locations.clone(),
        extra: BTreeMap::new(),
    }
}

proptest! {
    #[test]
    fn masking_rounds_age_and_removes_pii(raw in raw_case()) {
        let policy = MaskingPolicy::default();
        let masked = mask_case(&raw, &policy).unwrap();
        prop_assert_eq!(masked.age % 10, 0);
        prop_assert!((masked.age as i64 - raw.age).abs() <= 5);
        prop_assert!(masked.locations.iter().all(|l| policy.vague_locations.contains(l)));
        let json = serde_json::to_value(&masked).unwrap();
        for key in ["name", "date_of_birth", "exam_date"] {
            prop_assert!(json.get(key).is_none());
        }
        for text in text_fields(&masked) {
            prop_assert!(!text.contains(raw.name.as_deref().unwrap()));
            for loc in &raw.locations {
                prop_assert!(!text.contains(loc.as_str()));
            }
        }
        prop_assert!(masked.validate_with_locations(&policy.vague_locations).is_empty());
    }

    #[test]
    fn masking_is_idempotent(raw in raw_case()) {
        let policy = MaskingPolicy::default();
        let once = mask_case(&raw, &policy).unwrap();
        let twice = mask_case(&unmask(&once), &policy).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn case_json_round_trip(raw in raw_case()) {
        let masked = mask_case(&raw, &MaskingPolicy::default()).unwrap();
        let back: PatientCase = serde_json::from_str(&serde_json::to_string(&masked).unwrap()).unwrap();
        prop_assert_eq!(&back, &masked);
        let raw_back: RawPatientCase = serde_json::from_str(&serde_json::to_string(&raw).unwrap()).unwrap();
        prop_assert_eq!(raw_back, raw);
    }

    #[test]
    fn filtering_is_idempotent(raws in proptest::collection::vec(raw_case(), 0..12), blanks in proptest::collection::vec(any::<bool>(), 12)) {
        let policy = MaskingPolicy::default();
        let mut cases: Vec<PatientCase> = raws.iter().map(|r| mask_case(r, &policy).unwrap()).collect();
        for (c, blank) in cases.iter_mut().zip(blanks) {
            if blank {
                c.mental_examination.clear();
            }
        }
        let n = cases.len();
        if n > 1 {
            let dup = cases[0].clone();
            cases.push(dup);
        }
        let once = filter_cases(cases);
        prop_assert!(once.len() <= n);
        prop_assert_eq!(filter_cases(once.clone()), once);
    }
}

fn tree_spec() -> impl Strategy<Value = TreeSpec> {
    (proptest::collection::vec(1usize..5, 1..6), any::<bool>(), gender()).prop_map(|(sizes, anchor, gender)| TreeSpec {
        gender,
        age_bucket: AgeBucket::Teen,
        experience: if anchor {
            AnchorSpec::default()
        } else {
            AnchorSpec::disabled()
        },
        parents: sizes
            .iter()
            .enumerate()
            .map(|(p, n)| ParentSpec {
                label: format!("parent {p}"),
                leaves: (0..*n).map(|l| format!("topic {p}-{l}")).collect(),
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn rand_visit_respects_parent_order(spec in tree_spec(), seed in any::<u64>()) {
        let mut tree = DiagnosisTree::from_spec(&spec, ExperienceCaps::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut last_slot = 0;
        while let Ok(node) = tree.rand_visit(&mut rng) {
            if tree.is_anchor(&node.id) {
                tree.attach_experience_tree("story", &[]).unwrap();
            }
            let slot = tree.slot_of(&node.id).unwrap();
            prop_assert!(slot >= last_slot);
            last_slot = slot;
            prop_assert!(seen.insert(node.id.clone()));
        }
        prop_assert!(tree.is_dial_end());
        prop_assert_eq!(seen.len(), spec.symptom_leaf_count() + usize::from(tree.has_anchor()));
    }

    #[test]
    fn deletion_is_idempotent(spec in tree_spec(), picks in proptest::collection::vec(any::<prop::sample::Index>(), 0..6)) {
        let mut tree = DiagnosisTree::from_spec(&spec, ExperienceCaps::default());
        let ids: Vec<String> = tree.symptom_leaves().map(|l| l.id.clone()).collect();
        let chosen: BTreeSet<String> = picks.iter().map(|i| ids[i.index(ids.len())].clone()).collect();
        tree.delete_topics(&chosen).unwrap();
        let once = tree.clone();
        tree.delete_topics(&chosen).unwrap();
        prop_assert_eq!(&tree, &once);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        while let Ok(node) = tree.rand_visit(&mut rng) {
            prop_assert!(!chosen.contains(&node.id));
            if tree.is_anchor(&node.id) {
                tree.attach_experience_tree("story", &[]).unwrap();
            }
        }
    }
}

fn persona(empathetic: bool, fast: bool) -> DoctorPersona {
    DoctorPersona {
        id: "doc".into(),
        age: 40,
        gender: Gender::Male,
        specialties: vec![],
        empathetic,
        diagnosis_speed: if fast {
            DiagnosisSpeed::Fast
        } else {
            DiagnosisSpeed::Normal
        },
        explanation: false,
    }
}

fn case(gender: Gender) -> PatientCase {
    PatientCase {
        id: "case-prop".into(),
        age: 20,
        gender,
        diagnoses: vec![Diagnosis::new("depressive state", "F32.901")],
        chief_complaint: "Low mood".into(),
        present_illness_history: "Poor sleep".into(),
        past_medical_history: "none".into(),
        family_history: "none".into(),
        personal_history: "work: student".into(),
        mental_examination: "Alert".into(),
        treatment: "Sertraline".into(),
        locations: vec![],
        masked: true,
    }
}

prop_compose! {
    fn verdicts()(v in proptest::collection::vec(prop_oneof![Just("yes"), Just("no"), Just("unsure")], 0..40)) -> Vec<&'static str> { v }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn sessions_terminate_and_cover(
        spec in tree_spec(),
        seed in any::<u64>(),
        ends in verdicts(),
        triggers in proptest::collection::vec(prop_oneof![Just("yes"), Just("no")], 0..6),
        topics in proptest::collection::vec("[a-z]{3,8}", 0..8),
        empathetic in any::<bool>(),
        fast in any::<bool>(),
    ) {
        let mut script = Script::new()
            .with_fallback(OpTag::DocGen, "doctor")
            .with_fallback(OpTag::EmpathGen, "doctor kindly")
            .with_fallback(OpTag::PatGen, "patient")
            .with_fallback(OpTag::FicExpGen, "story")
            .with_fallback(OpTag::IsTopicEnd, "no")
            .with_fallback(OpTag::TriggerExp, "no")
            .with_fallback(OpTag::ParseExp, &topics.join("\n"));
        script.responses.insert(OpTag::IsTopicEnd, ends.iter().map(|s| s.to_string()).collect());
        script.responses.insert(OpTag::TriggerExp, triggers.iter().map(|s| s.to_string()).collect());
        let case = case(spec.gender);
        let graph = ExperienceGraph::new([(
            VariantKey::new(spec.gender, AgeBucket::Teen),
            vec![Triplet::new("t", "p", "e")],
        )]).unwrap();
        let prompts = PromptSet::default();
        let config = SessionConfig { dup_strategy: DupStrategy::Substring, ..SessionConfig::default() };
        let ctx = SessionContext { prompts: &prompts, config, graph: &graph };
        let plan = SessionPlan {
            session_index: 0,
            seed,
            persona: persona(empathetic, fast),
            triplet: SampledTriplet { id: "x/0".into(), triplet: Triplet::new("t", "p", "e") },
        };
        let tree = DiagnosisTree::from_spec(&spec, config.caps);
        let cap = if fast { 2 } else { 4 };
        let budget = turn_budget(&tree, cap);
        let backend = ScriptedBackend::new(script);
        let out = run_traced(&ctx, &case, tree, &plan, &backend).unwrap();
        let r = &out.record;
        prop_assert!(r.stats.doctor_turns <= budget);
        prop_assert!(r.validate().is_empty());
        prop_assert!(out.tree.symptom_leaves().all(|l| l.visited != l.deleted));
        let mut per_topic: BTreeMap<&str, usize> = BTreeMap::new();
        for t in r.turns.iter().filter(|t| t.role == Role::Doctor) {
            *per_topic.entry(t.topic_id.as_str()).or_default() += 1;
        }
        prop_assert!(per_topic.values().all(|n| *n <= cap));
        let ids: BTreeSet<&str> = r.topics.iter().map(|t| t.id.as_str()).collect();
        prop_assert_eq!(ids.len(), r.topics.len());
        let expected_op = if empathetic { TurnOp::EmpathGen } else { TurnOp::DocGen };
        prop_assert!(r.turns.iter().filter(|t| t.role == Role::Doctor).all(|t| t.op == expected_op));
        prop_assert!(backend.calls(OpTag::FicExpGen) <= 1);
        let symptom_order: Vec<usize> = r.topics.iter()
            .filter(|t| t.kind == TopicKind::Symptom)
            .map(|t| out.tree.slot_of(&t.id).unwrap())
            .collect();
        prop_assert!(symptom_order.windows(2).all(|w| w[0] <= w[1]));
    }
}

fn record(exchanges: usize, doc_len: usize, pat_len: usize, gender: Gender, code: &str) -> ConversationRecord {
    let turns: Vec<DialogueTurn> = (0..exchanges)
        .flat_map(|i| {
            [
                DialogueTurn {
                    index: 2 * i,
                    role: Role::Doctor,
                    text: "d".repeat(doc_len),
                    topic_id: "t".into(),
                    op: TurnOp::DocGen,
                },
                DialogueTurn {
                    index: 2 * i + 1,
                    role: Role::Patient,
                    text: "p".repeat(pat_len),
                    topic_id: "t".into(),
                    op: TurnOp::PatGen,
                },
            ]
        })
        .collect();
    ConversationRecord {
        case_id: format!("c{exchanges}{doc_len}{pat_len}"),
        session_index: 0,
        persona_id: "doc".into(),
        experience_id: "x".into(),
        seed: 0,
        stats: RecordStats::from_turns(&turns),
        turns,
        label: Label {
            diagnoses: vec![Diagnosis::new("dx", code)],
            treatment: "t".into(),
        },
        profile: PatientProfile {
            gender,
            age: 30,
            family_history: false,
            physical_illness: false,
        },
        locations: vec![],
        topics: vec![],
        experience: None,
    }
}

fn records() -> impl Strategy<Value = Vec<ConversationRecord>> {
    proptest::collection::vec(
        (
            1usize..8,
            0usize..30,
            0usize..30,
            gender(),
            prop_oneof![Just("F32.901"), Just("F41.101")],
        )
            .prop_map(|(e, d, p, g, c)| record(e, d, p, g, c)),
        1..10,
    )
}

proptest! {
    #[test]
    fn stats_ignore_record_order(mut rs in records(), seed in any::<u64>()) {
        let a = compute_stats(&rs).unwrap();
        use rand::seq::SliceRandom;
        rs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(compute_stats(&rs).unwrap(), a.clone());
        prop_assert!(a.avg_chars_dialogue >= a.avg_chars_doctor);
    }

    #[test]
    fn stats_merge_over_partitions(rs in records(), split in any::<prop::sample::Index>()) {
        let at = split.index(rs.len() + 1);
        let (left, right) = rs.split_at(at);
        let mut a = StatsAccumulator::default();
        left.iter().for_each(|r| a.add(r));
        let mut b = StatsAccumulator::default();
        right.iter().for_each(|r| b.add(r));
        a.merge(&b);
        prop_assert_eq!(a.finish().unwrap(), compute_stats(&rs).unwrap());
    }

    #[test]
    fn scan_is_monotone(rs in records(), base in proptest::collection::vec("[dp]{1,4}|[a-z]{3}", 0..3), extra in "[dp]{1,3}|[a-z]{3}") {
        let before = safety_scan(&rs, &base, None);
        let mut more = base.clone();
        more.push(extra);
        let after = safety_scan(&rs, &more, None);
        for (x, y) in before.records.iter().zip(&after.records) {
            prop_assert!(y.flag >= x.flag);
        }
        prop_assert!(after.flagged >= before.flagged);
    }

    #[test]
    fn record_json_round_trip(rs in records()) {
        for r in rs {
            let back: ConversationRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
