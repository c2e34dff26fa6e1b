//! Slot schema, dialogues with cumulative gold states, JSONL I/O and the
//! per-turn update labels derived from consecutive states.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{DstError, Result};
use crate::text::{find_span, normalize_value, tokenize};

/// Reserved value of an unfilled slot.
pub const NONE: &str = "none";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub domain: String,
    pub values: Vec<String>,
}

impl Slot {
    /// Attribute part of a `domain-attribute` name.
    pub fn attribute(&self) -> &str {
        self.name
            .strip_prefix(&self.domain)
            .and_then(|rest| rest.strip_prefix('-'))
            .unwrap_or(&self.name)
    }
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    slots: Vec<Slot>,
}

/// Ordered slots; slot `j` is the `j`-th entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSchema {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
}

impl SlotSchema {
    /// Validates and normalises a slot list. Candidate values are normalised
    /// and `none` is prepended when missing.
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(DstError::Schema("at least one slot is required".into()));
        }
        let mut index = HashMap::new();
        let mut normalised = Vec::with_capacity(slots.len());
        for mut slot in slots {
            if slot.name.trim().is_empty() || slot.domain.trim().is_empty() {
                return Err(DstError::Schema("slot name and domain must be nonempty".into()));
            }
            if index.insert(slot.name.clone(), normalised.len()).is_some() {
                return Err(DstError::Schema(format!("duplicate slot `{}`", slot.name)));
            }
            let mut values: Vec<String> = Vec::new();
            for v in slot.values.iter().map(|v| normalize_value(v)) {
                if v.is_empty() {
                    return Err(DstError::Schema(format!("slot `{}` has an empty candidate", slot.name)));
                }
                if !values.contains(&v) {
                    values.push(v);
                }
            }
            if !values.iter().any(|v| v == NONE) {
                values.insert(0, NONE.to_string());
            }
            slot.values = values;
            normalised.push(slot);
        }
        Ok(Self { slots: normalised, index })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSchema = serde_json::from_str(text).map_err(|e| DstError::Schema(e.to_string()))?;
        Self::new(raw.slots)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RawSchema { slots: self.slots.clone() }).expect("schema serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| DstError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, j: usize) -> &Slot {
        &self.slots[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn candidates(&self, j: usize) -> &[String] {
        &self.slots[j].values
    }

    pub fn candidate_index(&self, j: usize, value: &str) -> Option<usize> {
        self.slots[j].values.iter().position(|v| v == value)
    }

    /// Domains in order of first appearance.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.slots {
            if !out.contains(&s.domain) {
                out.push(s.domain.clone());
            }
        }
        out
    }

    pub fn same_domain(&self, a: usize, b: usize) -> bool {
        self.slots[a].domain == self.slots[b].domain
    }

    /// Names of slots that differ between two schemas.
    pub fn diff(&self, other: &SlotSchema) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.slots {
            if other.index_of(&s.name).map(|j| other.slot(j)) != Some(s) {
                out.push(s.name.clone());
            }
        }
        for s in &other.slots {
            if self.index_of(&s.name).is_none() {
                out.push(s.name.clone());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub system: String,
    pub user: String,
}

impl Turn {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self { system: system.into(), user: user.into() }
    }

    /// Tokens of `system ; user`, the form used for value matching.
    pub fn tokens(&self) -> Vec<String> {
        let mut t = tokenize(&self.system);
        t.extend(tokenize(&self.user));
        t
    }
}

/// Values of all slots after one turn; unfilled slots hold `none`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DialogueState(Vec<String>);

impl DialogueState {
    pub fn empty(num_slots: usize) -> Self {
        Self(vec![NONE.to_string(); num_slots])
    }

    pub fn from_values(values: Vec<String>) -> Self {
        Self(values)
    }

    pub fn get(&self, j: usize) -> &str {
        &self.0[j]
    }

    pub fn set(&mut self, j: usize, value: impl Into<String>) {
        self.0[j] = value.into();
    }

    pub fn values(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Slots whose values differ from `previous`.
    pub fn changed_from(&self, previous: &DialogueState) -> BTreeSet<usize> {
        (0..self.0.len()).filter(|&j| self.0[j] != previous.0[j]).collect()
    }
}

/// Per turn (0-based), slot index → turn ids (1-based) holding the evidence.
pub type EvidenceMap = Vec<BTreeMap<usize, BTreeSet<usize>>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub states: Vec<DialogueState>,
    pub evidence: Option<EvidenceMap>,
}

/// Slots updated at each turn: `{j : V_t^j != V_{t-1}^j}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateLabels(pub Vec<BTreeSet<usize>>);

impl UpdateLabels {
    /// Labels of 1-based turn `t`.
    pub fn turn(&self, t: usize) -> &BTreeSet<usize> {
        &self.0[t - 1]
    }
}

impl Dialogue {
    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    /// State after 1-based turn `t`; turn 0 is the all-`none` state.
    pub fn state_before(&self, t: usize, num_slots: usize) -> DialogueState {
        if t <= 1 {
            DialogueState::empty(num_slots)
        } else {
            self.states[t - 2].clone()
        }
    }

    /// Latest turn (1-based, `< t`) at which each slot changed, if any.
    pub fn latest_updates_before(&self, t: usize, num_slots: usize) -> Vec<Option<usize>> {
        let labels = derive_update_labels(self, num_slots);
        let mut latest = vec![None; num_slots];
        for u in 1..t {
            for &j in labels.turn(u) {
                latest[j] = Some(u);
            }
        }
        latest
    }
}

pub fn derive_update_labels(dialogue: &Dialogue, num_slots: usize) -> UpdateLabels {
    let mut prev = DialogueState::empty(num_slots);
    let mut out = Vec::with_capacity(dialogue.states.len());
    for s in &dialogue.states {
        out.push(s.changed_from(&prev));
        prev = s.clone();
    }
    UpdateLabels(out)
}

/// Turns holding the evidence for the update of slot `j` at 1-based turn `t`.
///
/// Uses the generator's record when present. Otherwise the value is located
/// by exact token match: the current turn if it contains the value, else the
/// latest earlier turn that does plus the current turn.
pub fn evidence_turns(dialogue: &Dialogue, schema: &SlotSchema, t: usize, j: usize) -> Result<BTreeSet<usize>> {
    let labels = derive_update_labels(dialogue, schema.len());
    if t == 0 || t > dialogue.num_turns() || !labels.turn(t).contains(&j) {
        return Err(DstError::NotUpdated { turn: t, slot: schema.slot(j).name.clone() });
    }
    if let Some(ev) = dialogue.evidence.as_ref().and_then(|e| e[t - 1].get(&j)) {
        return Ok(ev.clone());
    }
    let value = tokenize(dialogue.states[t - 1].get(j));
    let mut out = BTreeSet::from([t]);
    if find_span(&dialogue.turns[t - 1].tokens(), &value).is_none() {
        if let Some(u) = (1..t).rev().find(|&u| find_span(&dialogue.turns[u - 1].tokens(), &value).is_some()) {
            out.insert(u);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogueCorpus {
    pub dialogues: Vec<Dialogue>,
}

#[derive(Serialize, Deserialize)]
struct RawTurn {
    system: String,
    user: String,
}

#[derive(Serialize, Deserialize)]
struct RawDialogue {
    dialogue_id: String,
    turns: Vec<RawTurn>,
    #[serde(default)]
    states: Vec<IndexMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evidence: Option<Vec<IndexMap<String, Vec<usize>>>>,
}

fn slot_index(schema: &SlotSchema, name: &str, line: usize) -> Result<usize> {
    schema.index_of(name).ok_or_else(|| DstError::UnknownSlot { line, slot: name.to_string() })
}

/// Parses one JSONL line. With `require_states` unset a missing or empty
/// `states` array is accepted (inference input).
pub fn parse_dialogue(line_text: &str, line: usize, schema: &SlotSchema, require_states: bool) -> Result<Dialogue> {
    let raw: RawDialogue =
        serde_json::from_str(line_text).map_err(|e| DstError::Json { line, message: e.to_string() })?;
    let id = raw.dialogue_id.clone();
    let turns: Vec<Turn> = raw.turns.into_iter().map(|t| Turn::new(t.system, t.user)).collect();
    let j_total = schema.len();
    let mut states = Vec::with_capacity(raw.states.len());
    for map in &raw.states {
        let mut state = DialogueState::empty(j_total);
        for (name, value) in map {
            let j = slot_index(schema, name, line)?;
            state.set(j, normalize_value(value));
        }
        states.push(state);
    }
    if (require_states || !states.is_empty()) && states.len() != turns.len() {
        return Err(DstError::validation(&id, format!("{} turns but {} states", turns.len(), states.len())));
    }
    let evidence = match raw.evidence {
        None => None,
        Some(ev) => {
            if ev.len() != turns.len() {
                return Err(DstError::validation(&id, "evidence must have one entry per turn"));
            }
            let mut out = Vec::with_capacity(ev.len());
            for (ti, map) in ev.iter().enumerate() {
                let mut turn_map = BTreeMap::new();
                for (name, ids) in map {
                    let j = slot_index(schema, name, line)?;
                    if ids.iter().any(|&u| u == 0 || u > ti + 1) {
                        return Err(DstError::validation(&id, format!("evidence for {name} at turn {} out of range", ti + 1)));
                    }
                    turn_map.insert(j, ids.iter().copied().collect());
                }
                out.push(turn_map);
            }
            Some(out)
        }
    };
    let dialogue = Dialogue { id, turns, states, evidence };
    if !dialogue.states.is_empty() {
        validate(&dialogue, schema)?;
    }
    Ok(dialogue)
}

/// Checks cumulativity and that every value is a candidate or a span of the
/// dialogue so far.
pub fn validate(dialogue: &Dialogue, schema: &SlotSchema) -> Result<()> {
    let mut prev = DialogueState::empty(schema.len());
    let mut seen_tokens: Vec<Vec<String>> = Vec::new();
    for (ti, state) in dialogue.states.iter().enumerate() {
        seen_tokens.push(dialogue.turns[ti].tokens());
        for j in 0..schema.len() {
            let (before, now) = (prev.get(j), state.get(j));
            if before != NONE && now == NONE {
                return Err(DstError::validation(
                    &dialogue.id,
                    format!("non-cumulative state: {} reset to none at turn {}", schema.slot(j).name, ti + 1),
                ));
            }
            if now != before && schema.candidate_index(j, now).is_none() {
                let needle = tokenize(now);
                if !seen_tokens.iter().any(|toks| find_span(toks, &needle).is_some()) {
                    return Err(DstError::validation(
                        &dialogue.id,
                        format!("value `{now}` of {} at turn {} is neither a candidate nor a span", schema.slot(j).name, ti + 1),
                    ));
                }
            }
        }
        if let Some(ev) = &dialogue.evidence {
            let changed = state.changed_from(&prev);
            for j in ev[ti].keys() {
                if !changed.contains(j) {
                    return Err(DstError::validation(
                        &dialogue.id,
                        format!("evidence recorded for {} at turn {} but it is not updated", schema.slot(*j).name, ti + 1),
                    ));
                }
            }
        }
        prev = state.clone();
    }
    Ok(())
}

impl DialogueCorpus {
    pub fn parse(text: &str, schema: &SlotSchema) -> Result<Self> {
        Self::parse_with(text, schema, true)
    }

    pub fn parse_with(text: &str, schema: &SlotSchema, require_states: bool) -> Result<Self> {
        let mut dialogues = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            dialogues.push(parse_dialogue(line, i + 1, schema, require_states)?);
        }
        Ok(Self { dialogues })
    }

    pub fn to_jsonl(&self, schema: &SlotSchema) -> String {
        let mut out = String::new();
        for d in &self.dialogues {
            out.push_str(&dialogue_to_json(d, schema));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path, schema: &SlotSchema) -> Result<()> {
        fs::write(path, self.to_jsonl(schema)).map_err(|e| DstError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn num_turns(&self) -> usize {
        self.dialogues.iter().map(Dialogue::num_turns).sum()
    }
}

pub fn load_corpus(path: &Path, schema: &SlotSchema) -> Result<DialogueCorpus> {
    let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    DialogueCorpus::parse(&text, schema)
}

/// Canonical single-line JSON: `none` values omitted, slots in schema order.
pub fn dialogue_to_json(d: &Dialogue, schema: &SlotSchema) -> String {
    let states = d
        .states
        .iter()
        .map(|s| {
            (0..schema.len())
                .filter(|&j| s.get(j) != NONE)
                .map(|j| (schema.slot(j).name.clone(), s.get(j).to_string()))
                .collect()
        })
        .collect();
    let evidence = d.evidence.as_ref().map(|ev| {
        ev.iter()
            .map(|m| m.iter().map(|(j, ids)| (schema.slot(*j).name.clone(), ids.iter().copied().collect())).collect())
            .collect()
    });
    let raw = RawDialogue {
        dialogue_id: d.id.clone(),
        turns: d.turns.iter().map(|t| RawTurn { system: t.system.clone(), user: t.user.clone() }).collect(),
        states,
        evidence,
    };
    serde_json::to_string(&raw).expect("dialogue serialises")
}
