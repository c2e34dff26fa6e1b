//! Seeded templated dialogues over an arbitrary schema.
//!
//! Each dialogue covers one or two domains. Updates normally state their value
//! in the user utterance. A coreference update instead points at a slot with
//! the same attribute in the other domain ("the same area as the hotel"), so
//! its value only appears in the turn where that slot was set. The generator
//! records the evidence turns of every update.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialogue, DialogueCorpus, DialogueState, SlotSchema, Turn, NONE};
use crate::error::{DstError, Result};

/// Eight slots over `hotel` and `restaurant` with shared area, price range
/// and booking-day value sets.
pub fn default_schema() -> SlotSchema {
    SlotSchema::from_json(include_str!("../data/schema.json")).expect("bundled schema is valid")
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub max_turns: usize,
    pub coref_rate: f64,
    pub seed: u64,
}

const SYSTEM_LINES: &[&str] = &[
    "how else can i help ?",
    "sure , i can help with that .",
    "i have found a few options for you .",
    "ok , anything else ?",
    "what else do you need ?",
    "noted . what else ?",
];

const IDLE_LINES: &[&str] = &["thank you .", "that sounds good .", "great , thanks ."];

fn explicit_templates(attribute: &str) -> &'static [&'static str] {
    match attribute {
        "area" => &["i need a {dom} in the {v}", "the {dom} should be in the {v}", "i would like a {dom} in the {v} area"],
        "pricerange" => &["i want a {v} {dom}", "the {dom} should be {v}", "i am looking for a {v} {dom}"],
        "name" => &["i would like the {dom} called {v}", "i want to go to the {dom} named {v}"],
        "bookday" => &["book the {dom} for {v}", "i need the {dom} on {v}"],
        "food" => &["i want a {dom} serving {v} food", "i would like {v} food at the {dom}"],
        "bookpeople" => &["the {dom} booking is for {v} people"],
        "bookstay" => &["i will stay {v} nights at the {dom}"],
        "destination" => &["i want the {dom} to go to {v}"],
        "departure" => &["the {dom} should leave from {v}"],
        _ => &["the {dom} {attr} should be {v}"],
    }
}

fn coref_templates(attribute: &str) -> &'static [&'static str] {
    match attribute {
        "area" => &["i need a {dom} in the same area as the {other}", "the {dom} should be in the same area as the {other}"],
        "pricerange" => &["i want the {dom} in the same price range as the {other}", "the {dom} should be the same price as the {other}"],
        "bookday" => &["book the {dom} for the same day as the {other}", "i need the {dom} on the same day as the {other}"],
        _ => &["the {dom} {attr} should be the same as the {other}"],
    }
}

fn fill(template: &str, dom: &str, attr: &str, value: &str, other: &str) -> String {
    template
        .replace("{dom}", dom)
        .replace("{attr}", attr)
        .replace("{v}", value)
        .replace("{other}", other)
}

/// Slots in other domains that share `j`'s attribute name.
fn compatible(schema: &SlotSchema, j: usize) -> Vec<usize> {
    let s = schema.slot(j);
    (0..schema.len())
        .filter(|&z| z != j && schema.slot(z).domain != s.domain && schema.slot(z).attribute() == s.attribute())
        .collect()
}

struct Tracker<'a> {
    schema: &'a SlotSchema,
    state: DialogueState,
    /// Turn whose text states each slot's current value; `None` for unset or
    /// coreference-filled slots.
    source: Vec<Option<usize>>,
}

impl Tracker<'_> {
    /// A slot whose explicitly stated value `j` could take by reference.
    fn coref_source(&self, j: usize) -> Option<usize> {
        compatible(self.schema, j).into_iter().find(|&z| {
            let v = self.state.get(z);
            self.source[z].is_some()
                && v != NONE
                && v != self.state.get(j)
                && self.schema.candidate_index(j, v).is_some()
        })
    }
}

pub fn synthesize_corpus(schema: &SlotSchema, cfg: &SynthConfig) -> Result<DialogueCorpus> {
    if cfg.n_dialogues < 1 {
        return Err(DstError::Config("n_dialogues must be at least 1".into()));
    }
    if cfg.max_turns < 1 {
        return Err(DstError::Config("max_turns must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.coref_rate) {
        return Err(DstError::Config(format!("coref_rate {} outside [0, 1]", cfg.coref_rate)));
    }
    if (0..schema.len()).any(|j| schema.candidates(j).iter().all(|v| v == NONE)) {
        return Err(DstError::Schema("every slot needs a candidate besides none".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dialogues = (0..cfg.n_dialogues)
        .map(|i| synthesize_dialogue(schema, cfg, &mut rng, format!("syn-{}-{i:05}", cfg.seed)))
        .collect();
    Ok(DialogueCorpus { dialogues })
}

fn synthesize_dialogue(schema: &SlotSchema, cfg: &SynthConfig, rng: &mut ChaCha8Rng, id: String) -> Dialogue {
    let domains = schema.domains();
    let n_turns = rng.gen_range(cfg.max_turns.min(2)..=cfg.max_turns);
    let first = domains.choose(rng).unwrap().clone();
    let second = if domains.len() > 1 && n_turns >= 2 && rng.gen_bool(0.8) {
        let others: Vec<_> = domains.iter().filter(|d| **d != first).cloned().collect();
        Some(others.choose(rng).unwrap().clone())
    } else {
        None
    };
    let switch = if second.is_some() { rng.gen_range(1..n_turns) } else { n_turns };

    let mut tracker = Tracker {
        schema,
        state: DialogueState::empty(schema.len()),
        source: vec![None; schema.len()],
    };
    let mut turns = Vec::with_capacity(n_turns);
    let mut states = Vec::with_capacity(n_turns);
    let mut evidence = Vec::with_capacity(n_turns);

    for t in 1..=n_turns {
        let domain = if t <= switch { &first } else { second.as_ref().unwrap() };
        let domain_slots: Vec<usize> = (0..schema.len()).filter(|&j| &schema.slot(j).domain == domain).collect();
        let system = if t == 1 {
            String::new()
        } else if rng.gen_bool(0.2) {
            format!("i can book the {domain} for you .")
        } else {
            SYSTEM_LINES.choose(rng).unwrap().to_string()
        };

        // Opening turns of each domain lead with a slot that links the two.
        let priority: Vec<usize> = if t == 1 && second.is_some() {
            let other = second.as_ref().unwrap();
            domain_slots
                .iter()
                .copied()
                .filter(|&j| compatible(schema, j).iter().any(|&z| &schema.slot(z).domain == other))
                .collect()
        } else if t == switch + 1 {
            domain_slots.iter().copied().filter(|&j| tracker.coref_source(j).is_some()).collect()
        } else {
            Vec::new()
        };

        let idle = t > 1 && priority.is_empty() && rng.gen_bool(0.1);
        let mut chosen: Vec<usize> = Vec::new();
        if !idle {
            if let Some(&j) = priority.choose(rng) {
                chosen.push(j);
            }
            let want = if rng.gen_bool(0.35) { 2 } else { 1 };
            while chosen.len() < want.min(domain_slots.len()) {
                let unset: Vec<usize> = domain_slots
                    .iter()
                    .copied()
                    .filter(|j| !chosen.contains(j) && tracker.state.get(*j) == NONE)
                    .collect();
                let any: Vec<usize> = domain_slots.iter().copied().filter(|j| !chosen.contains(j)).collect();
                let pool = if !unset.is_empty() && rng.gen_bool(0.85) { unset } else { any };
                chosen.push(*pool.choose(rng).unwrap());
            }
        }

        let mut clauses = Vec::new();
        let mut turn_evidence = BTreeMap::new();
        let mut updates: Vec<(usize, String, Option<usize>)> = Vec::new();
        for &j in &chosen {
            let slot = schema.slot(j);
            let attr_words = slot.attribute().replace('-', " ");
            let coref = tracker.coref_source(j).filter(|_| rng.gen_bool(cfg.coref_rate));
            if let Some(z) = coref {
                let value = tracker.state.get(z).to_string();
                let template = coref_templates(slot.attribute()).choose(rng).unwrap();
                clauses.push(fill(template, &slot.domain, &attr_words, &value, &schema.slot(z).domain));
                let src = tracker.source[z].expect("coref source is explicit");
                turn_evidence.insert(j, BTreeSet::from([src, t]));
                updates.push((j, value, None));
            } else {
                let current = tracker.state.get(j).to_string();
                let options: Vec<&String> = schema.candidates(j).iter().filter(|v| *v != NONE && **v != current).collect();
                let value = options.choose(rng).unwrap().to_string();
                let template = explicit_templates(slot.attribute()).choose(rng).unwrap();
                let mut clause = fill(template, &slot.domain, &attr_words, &value, "");
                if current != NONE {
                    clause = format!("actually , {clause} instead");
                }
                clauses.push(clause);
                turn_evidence.insert(j, BTreeSet::from([t]));
                updates.push((j, value, Some(t)));
            }
        }
        for (j, value, source) in updates {
            tracker.state.set(j, value);
            tracker.source[j] = source;
        }
        let user = if clauses.is_empty() {
            IDLE_LINES.choose(rng).unwrap().to_string()
        } else {
            format!("{} .", clauses.join(" and "))
        };
        turns.push(Turn::new(system, user));
        states.push(tracker.state.clone());
        evidence.push(turn_evidence);
    }
    Dialogue { id, turns, states, evidence: Some(evidence) }
}
