mod common;

use common::*;
use dst_core::corpus::{DialogueCorpus, DialogueState};
use dst_core::harness::{ablate, check_schema, evaluate, train, EvalOptions, StateMetrics};
use dst_core::model::{EvalMode, InferenceOptions};
use dst_core::selector::PerspectiveMask;
use dst_core::synth::{default_schema, synthesize_corpus, SynthConfig};
use dst_core::{Config, DstError, DstModel};

fn small_train_config(epochs: usize) -> Config {
    let mut c = tiny_config();
    c.apply_overrides(&[format!("epochs={epochs}"), "d_model=16".into(), "ffn_dim=32".into(), "max_len=96".into(), "context_max_len=192".into()])
        .unwrap();
    c
}

fn synth(n: usize, seed: u64) -> DialogueCorpus {
    synthesize_corpus(&default_schema(), &SynthConfig { n_dialogues: n, max_turns: 4, coref_rate: 0.3, seed }).unwrap()
}

#[test]
fn metric_identities() {
    let schema = toy_schema();
    let mut m = StateMetrics::new(&schema);
    for s in toy_dialogue().states {
        m.add(&s, &s);
    }
    assert_eq!((m.joint_goal_accuracy(), m.slot_accuracy()), (1.0, 1.0));
    assert!(m.domain_accuracy().values().all(|v| *v == 1.0));

    let mut m = StateMetrics::new(&schema);
    m.add(&state(&["north", "cheap", "none"]), &state(&["north", "cheap", "south"]));
    m.add(&state(&["north", "cheap", "none"]), &state(&["north", "cheap", "none"]));
    assert_eq!(m.joint_goal_accuracy(), 0.5);
    assert!((m.slot_accuracy() - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(m.domain_accuracy()["hotel"], 1.0);
    assert_eq!(m.domain_accuracy()["taxi"], 0.5);
}

#[test]
fn untrained_tracking_is_total_and_bounded() {
    let corpus = synth(6, 3);
    let model = DstModel::new(small_train_config(0), default_schema(), dst_core::vocab::Vocabulary::build(&default_schema(), &corpus)).unwrap();
    let r = evaluate(&model, &corpus, &EvalOptions::default()).unwrap();
    assert!(r.joint_goal_accuracy <= r.slot_accuracy);
    assert_eq!(r.turns, corpus.num_turns());
    for d in &corpus.dialogues {
        for p in dst_core::harness::track(&model, d, d.num_turns(), &InferenceOptions::default()).unwrap() {
            assert_eq!(p.state.len(), model.num_slots());
            for j in 0..model.num_slots() {
                assert!(model.schema.candidate_index(j, p.state.get(j)).is_some());
            }
        }
    }
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let corpus = synth(3, 4);
    let cfg = small_train_config(0);
    let trained = train(&corpus, &default_schema(), &cfg, &mut |_| {}).unwrap();
    let fresh = DstModel::new(cfg, default_schema(), dst_core::vocab::Vocabulary::build(&default_schema(), &corpus)).unwrap();
    assert_eq!(trained.model.params, fresh.params);
    assert!(trained.log.epochs.is_empty());
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let corpus = synth(4, 5);
    let cfg = small_train_config(2);
    let a = train(&corpus, &default_schema(), &cfg, &mut |_| {}).unwrap();
    let b = train(&corpus, &default_schema(), &cfg, &mut |_| {}).unwrap();
    assert!(a.diverged.is_none());
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params, b.model.params);
    assert!(a.log.epochs[1].loss.is_finite());

    let dir = tempfile::tempdir().unwrap();
    a.model.save(dir.path()).unwrap();
    let loaded = DstModel::load(dir.path()).unwrap();
    assert_eq!(loaded.params, a.model.params);
    assert_eq!(loaded.config, a.model.config);
    let ra = evaluate(&a.model, &corpus, &EvalOptions::default()).unwrap();
    let rl = evaluate(&loaded, &corpus, &EvalOptions::default()).unwrap();
    assert_eq!(ra.to_json(), rl.to_json());

    let other = tempfile::tempdir().unwrap();
    loaded.save(other.path()).unwrap();
    for f in ["params.bin", "vocab.txt", "config.txt", "schema.json"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(other.path().join(f)).unwrap(), "{f}");
    }

    let params = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&params).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&params, bytes).unwrap();
    assert!(matches!(DstModel::load(dir.path()), Err(DstError::Checkpoint { .. })));
}

#[test]
fn empty_corpus_reports_no_turns() {
    let model = tiny_model(tiny_config());
    let r = evaluate(&model, &DialogueCorpus::default(), &EvalOptions::default()).unwrap();
    assert!(r.no_turns);
    assert_eq!((r.turns, r.joint_goal_accuracy, r.slot_accuracy), (0, 0.0, 0.0));
    assert_eq!(r.selection_recall, None);
    assert!(!r.to_json().contains("NaN"));
    let trained = train(&DialogueCorpus::default(), &toy_schema(), &tiny_config(), &mut |_| {}).unwrap();
    assert!(trained.log.epochs.is_empty());
}

#[test]
fn gold_replay_is_an_upper_bound_on_a_trained_model() {
    let corpus = synth(8, 6);
    let trained = train(&corpus, &default_schema(), &small_train_config(3), &mut |_| {}).unwrap();
    let tracked = evaluate(&trained.model, &corpus, &EvalOptions::default()).unwrap();
    let replay = evaluate(&trained.model, &corpus, &EvalOptions { gold_replay: true, ..Default::default() }).unwrap();
    assert!(replay.joint_goal_accuracy >= tracked.joint_goal_accuracy);
}

#[test]
fn schema_mismatch_is_rejected() {
    let model = tiny_model(tiny_config());
    assert!(check_schema(&model, &toy_schema()).is_ok());
    let err = check_schema(&model, &default_schema()).unwrap_err();
    assert!(matches!(err, DstError::SchemaMismatch(_)));
}

#[test]
fn ablation_covers_seven_combinations_and_full_mask_matches_evaluate() {
    let corpus = synth(3, 8);
    let model = DstModel::new(small_train_config(0), default_schema(), dst_core::vocab::Vocabulary::build(&default_schema(), &corpus)).unwrap();
    let reports = ablate(&model, &corpus, EvalMode::Dicos).unwrap();
    assert_eq!(reports.len(), 7);
    let full = evaluate(&model, &corpus, &EvalOptions::default()).unwrap();
    assert_eq!(reports[6], full);
    let table = dst_core::harness::ablation_table(&reports);
    assert_eq!(table.lines().count(), 8);
    let none = evaluate(
        &model,
        &corpus,
        &EvalOptions { inference: InferenceOptions { mode: EvalMode::Dicos, mask: PerspectiveMask::NONE }, gold_replay: false },
    )
    .unwrap();
    assert_eq!(none.perspectives, "none");
}

#[test]
fn multi_domain_booking_is_tracked_with_gold_labels() {
    // Hotel, restaurant and taxi slots set across turns, with a taxi reference.
    let corpus = synth(1, 11);
    let schema = default_schema();
    let d = &corpus.dialogues[0];
    let labels = dst_core::corpus::derive_update_labels(d, schema.len());
    let mut prev = DialogueState::empty(schema.len());
    for (t, s) in d.states.iter().enumerate() {
        assert_eq!(labels.0[t], s.changed_from(&prev));
        prev = s.clone();
    }
    let model = DstModel::new(small_train_config(0), schema.clone(), dst_core::vocab::Vocabulary::build(&schema, &corpus)).unwrap();
    let r = evaluate(&model, &corpus, &EvalOptions { gold_replay: true, ..Default::default() }).unwrap();
    assert_eq!(r.turns, d.num_turns());
}
