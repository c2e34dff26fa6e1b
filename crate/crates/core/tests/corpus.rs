mod common;

use common::*;
use dst_core::corpus::{derive_update_labels, evidence_turns, Dialogue, DialogueCorpus, DialogueState, Turn, NONE};
use dst_core::synth::{default_schema, synthesize_corpus, SynthConfig};
use dst_core::text::{find_span, tokenize};
use proptest::prelude::*;

fn dialogue_strategy() -> impl Strategy<Value = Dialogue> {
    let schema = toy_schema();
    let values: Vec<Vec<String>> = (0..schema.len()).map(|j| schema.candidates(j).to_vec()).collect();
    let turn = ("[a-z ]{0,12}", "[a-z ,.?]{0,16}");
    let state = (0..4usize, 0..3usize, 0..4usize);
    prop::collection::vec((turn, state), 1..5).prop_map(move |rows| {
        let mut turns = Vec::new();
        let mut states: Vec<DialogueState> = Vec::new();
        for ((sys, usr), (a, b, c)) in rows {
            turns.push(Turn::new(sys, usr));
            // States are cumulative: a filled slot never returns to none.
            let picked: Vec<String> = [a, b, c]
                .into_iter()
                .enumerate()
                .map(|(j, i)| match (i, states.last()) {
                    (0, Some(prev)) => prev.get(j).to_string(),
                    _ => values[j][i].clone(),
                })
                .collect();
            states.push(DialogueState::from_values(picked));
        }
        Dialogue { id: "p".into(), turns, states, evidence: None }
    })
}

proptest! {
    #[test]
    fn jsonl_round_trip(dialogues in prop::collection::vec(dialogue_strategy(), 0..4)) {
        let schema = toy_schema();
        let mut corpus = DialogueCorpus { dialogues };
        for (i, d) in corpus.dialogues.iter_mut().enumerate() {
            d.id = format!("d{i}");
        }
        let text = corpus.to_jsonl(&schema);
        let back = DialogueCorpus::parse(&text, &schema).unwrap();
        prop_assert_eq!(back, corpus);
    }
}

#[test]
fn empty_input_and_unknown_slot() {
    let schema = toy_schema();
    assert!(DialogueCorpus::parse("", &schema).unwrap().is_empty());
    let line = r#"{"dialogue_id": "d", "turns": [{"system": "", "user": "hi"}], "states": [{"hotel-sort": "x"}]}"#;
    let err = DialogueCorpus::parse(line, &schema).unwrap_err();
    assert!(err.to_string().contains("hotel-sort"));
}

#[test]
fn update_labels() {
    let d = toy_dialogue();
    let labels = derive_update_labels(&d, 3);
    assert_eq!(labels.turn(1).iter().copied().collect::<Vec<_>>(), vec![0]);
    assert_eq!(labels.turn(2).iter().copied().collect::<Vec<_>>(), vec![1]);
    assert_eq!(labels.turn(3).iter().copied().collect::<Vec<_>>(), vec![2]);
    let mut same = d.clone();
    same.states[1] = same.states[0].clone();
    assert!(derive_update_labels(&same, 3).turn(2).is_empty());
}

#[test]
fn evidence_for_explicit_and_referenced_values() {
    let schema = toy_schema();
    let d = toy_dialogue();
    assert_eq!(evidence_turns(&d, &schema, 1, 0).unwrap().into_iter().collect::<Vec<_>>(), vec![1]);
    assert_eq!(evidence_turns(&d, &schema, 3, 2).unwrap().into_iter().collect::<Vec<_>>(), vec![1, 3]);
    assert!(evidence_turns(&d, &schema, 2, 0).is_err());
}

fn synth(n: usize, coref_rate: f64, seed: u64) -> DialogueCorpus {
    synthesize_corpus(&default_schema(), &SynthConfig { n_dialogues: n, max_turns: 6, coref_rate, seed }).unwrap()
}

#[test]
fn explicit_corpus_states_every_value_in_its_turn() {
    let schema = default_schema();
    for d in synth(60, 0.0, 2).dialogues {
        let labels = derive_update_labels(&d, schema.len());
        for t in 1..=d.num_turns() {
            let tokens = d.turns[t - 1].tokens();
            for &j in labels.turn(t) {
                let v = d.states[t - 1].get(j);
                assert!(v == NONE || find_span(&tokens, &tokenize(v)).is_some(), "{} turn {t}", d.id);
            }
        }
    }
}

#[test]
fn full_coref_rate_references_across_slots() {
    let schema = default_schema();
    for d in synth(60, 1.0, 3).dialogues {
        let labels = derive_update_labels(&d, schema.len());
        let touched: std::collections::BTreeSet<usize> = labels.0.iter().flatten().copied().collect();
        let domains: std::collections::BTreeSet<&str> = touched.iter().map(|&j| schema.slot(j).domain.as_str()).collect();
        if domains.len() < 2 {
            continue;
        }
        let referenced = (1..=d.num_turns()).any(|t| {
            labels.turn(t).iter().any(|&j| evidence_turns(&d, &schema, t, j).unwrap().len() > 1)
        });
        assert!(referenced, "{}", d.id);
    }
}

#[test]
fn synthesis_is_deterministic() {
    let schema = default_schema();
    assert_eq!(synth(20, 0.3, 7).to_jsonl(&schema), synth(20, 0.3, 7).to_jsonl(&schema));
    assert_ne!(synth(20, 0.3, 7).to_jsonl(&schema), synth(20, 0.3, 8).to_jsonl(&schema));
}
