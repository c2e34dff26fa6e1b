//! Training loop, tracked evaluation, metrics and ablations.

use std::collections::{BTreeMap, BTreeSet};

use dst_numerics::optim::warmup_factor;
use dst_numerics::{AdamW, Ctx, Grads, NumericsError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::corpus::{evidence_turns, DialogueCorpus, DialogueState, SlotSchema, NONE};
use crate::error::{DstError, Result};
use crate::model::{DstModel, EvalMode, InferenceOptions, LossParts, TurnPrediction};
use crate::selector::{NodeId, PerspectiveMask, SelectionGraph};
use crate::text::{find_span, tokenize};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub update: f64,
    pub extractive: f64,
    pub classification: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        self.epochs
            .iter()
            .map(|e| {
                format!(
                    "epoch {} loss {:.6} update {:.6} extractive {:.6} classification {:.6}\n",
                    e.epoch, e.loss, e.update, e.extractive, e.classification
                )
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct Trained {
    /// Parameters after the last successful step.
    pub model: DstModel,
    pub log: TrainLog,
    pub diverged: Option<DstError>,
}

/// Builds the vocabulary from `corpus` and trains a freshly initialised model.
pub fn train(corpus: &DialogueCorpus, schema: &SlotSchema, config: &Config, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<Trained> {
    let vocab = Vocabulary::build(schema, corpus);
    let model = DstModel::new(config.clone(), schema.clone(), vocab)?;
    train_model(model, corpus, on_epoch)
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts.
    let mut x = seed;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

fn is_divergence(e: &DstError) -> bool {
    matches!(e, DstError::Numerics(NumericsError::NonFinite { .. }))
}

/// One optimiser step per `batch_size` dialogues; each turn's loss is
/// back-propagated separately and scaled by the dialogue's turn count.
pub fn train_model(mut model: DstModel, corpus: &DialogueCorpus, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<Trained> {
    let cfg = model.config.clone();
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || corpus.is_empty() {
        return Ok(Trained { model, log, diverged: None });
    }
    for d in &corpus.dialogues {
        crate::corpus::validate(d, &model.schema)?;
    }
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch) as f64;
    let warmup = (total * cfg.warmup_proportion).ceil() as u64;
    let base_lr: Vec<f64> = model
        .params
        .iter()
        .map(|(_, p)| if p.name.starts_with("update.") { cfg.lr_update } else { cfg.lr })
        .collect();
    let mut grads = Grads::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[1]));

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossParts::default();
        let mut turns = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            for &di in batch {
                let d = &corpus.dialogues[di];
                let n = d.num_turns();
                for t in 1..=n {
                    let ctx = Ctx::new(&model.params, true, mix(cfg.seed, &[2, epoch as u64, di as u64, t as u64]));
                    let step = model.turn_loss(&ctx, d, t).and_then(|(loss, parts)| {
                        let scaled = ctx.tape.scale(loss, 1.0 / (n * batch.len()) as f64)?;
                        ctx.backward_into(scaled, &mut grads)?;
                        Ok(parts)
                    });
                    let parts = match step {
                        Ok(p) if p.total().is_finite() => p,
                        Ok(_) => return Ok(diverged(model, log, epoch, &d.id)),
                        Err(e) if is_divergence(&e) => return Ok(diverged(model, log, epoch, &d.id)),
                        Err(e) => return Err(e),
                    };
                    sums.update += parts.update;
                    sums.extractive += parts.extractive;
                    sums.classification += parts.classification;
                    turns += 1;
                }
            }
            if !grads.is_finite() {
                let id = corpus.dialogues[batch[0]].id.clone();
                return Ok(diverged(model, log, epoch, &id));
            }
            clip(&mut grads, cfg.max_grad_norm);
            let f = warmup_factor(opt.steps(), warmup);
            let lr: Vec<f64> = base_lr.iter().map(|l| l * f).collect();
            opt.step(&mut model.params, &grads, &lr);
        }
        let n = turns.max(1) as f64;
        let entry = EpochLog {
            epoch,
            loss: sums.total() / n,
            update: sums.update / n,
            extractive: sums.extractive / n,
            classification: sums.classification / n,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(Trained { model, log, diverged: None })
}

fn diverged(model: DstModel, log: TrainLog, epoch: usize, dialogue: &str) -> Trained {
    Trained { model, log, diverged: Some(DstError::Diverged { epoch, dialogue: dialogue.to_string() }) }
}

fn clip(grads: &mut Grads, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.values.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub perspectives: String,
    pub k: usize,
    pub no_turns: bool,
    pub turns: usize,
    pub joint_goal_accuracy: f64,
    pub slot_accuracy: f64,
    /// Per domain: fraction of turns with all of that domain's slots correct.
    pub domain_accuracy: BTreeMap<String, f64>,
    pub update_precision: f64,
    pub update_recall: f64,
    pub update_f1: f64,
    /// Evidence turns covered by the selected turns plus the current turn,
    /// over all gold updates.
    pub selection_recall: Option<f64>,
    pub evidence_turns: usize,
    /// Gold updates whose value is not a span of the current turn.
    pub coref_updates: usize,
    /// Fraction of those where the slot was predicted to update and the
    /// classification head chose the gold value.
    pub coref_classification_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Accumulates state-level metrics over turns.
#[derive(Clone, Debug)]
pub struct StateMetrics {
    domains: Vec<String>,
    domain_slots: Vec<Vec<usize>>,
    turns: usize,
    joint: usize,
    slots: usize,
    slot_hits: usize,
    domain_hits: Vec<usize>,
}

impl StateMetrics {
    pub fn new(schema: &SlotSchema) -> Self {
        let domains = schema.domains();
        let domain_slots = domains
            .iter()
            .map(|dom| (0..schema.len()).filter(|&j| &schema.slot(j).domain == dom).collect())
            .collect();
        Self { domain_hits: vec![0; domains.len()], domains, domain_slots, turns: 0, joint: 0, slots: 0, slot_hits: 0 }
    }

    pub fn add(&mut self, gold: &DialogueState, pred: &DialogueState) {
        let hit: Vec<bool> = gold.values().iter().zip(pred.values()).map(|(g, p)| g == p).collect();
        self.turns += 1;
        self.slots += hit.len();
        self.slot_hits += hit.iter().filter(|h| **h).count();
        if hit.iter().all(|h| *h) {
            self.joint += 1;
        }
        for (i, slots) in self.domain_slots.iter().enumerate() {
            if slots.iter().all(|&j| hit[j]) {
                self.domain_hits[i] += 1;
            }
        }
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    pub fn joint_goal_accuracy(&self) -> f64 {
        ratio(self.joint, self.turns)
    }

    pub fn slot_accuracy(&self) -> f64 {
        ratio(self.slot_hits, self.slots)
    }

    pub fn domain_accuracy(&self) -> BTreeMap<String, f64> {
        self.domains.iter().zip(&self.domain_hits).map(|(d, &h)| (d.clone(), ratio(h, self.turns))).collect()
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub inference: InferenceOptions,
    /// Feed gold previous states instead of the model's own predictions.
    pub gold_replay: bool,
}

pub fn check_schema(model: &DstModel, schema: &SlotSchema) -> Result<()> {
    let diff = model.schema.diff(schema);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(DstError::SchemaMismatch(diff.join(", ")))
    }
}

pub fn evaluate(model: &DstModel, corpus: &DialogueCorpus, opts: &EvalOptions) -> Result<EvalReport> {
    let schema = &model.schema;
    let j_count = schema.len();
    let mut metrics = StateMetrics::new(schema);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let (mut ev_hits, mut ev_total) = (0usize, 0usize);
    let (mut coref_hits, mut coref_total) = (0usize, 0usize);

    for d in &corpus.dialogues {
        let mut prev = DialogueState::empty(j_count);
        let mut latest: Vec<Option<usize>> = vec![None; j_count];
        let mut gold_prev = DialogueState::empty(j_count);
        for t in 1..=d.num_turns() {
            let gold = &d.states[t - 1];
            let gold_updates = gold.changed_from(&gold_prev);
            let pred = model.predict_turn(d, t, &prev, &latest, &opts.inference, &gold_updates)?;
            metrics.add(gold, &pred.state);

            tp += pred.decision.selected.intersection(&gold_updates).count();
            fp += pred.decision.selected.difference(&gold_updates).count();
            fn_ += gold_updates.difference(&pred.decision.selected).count();

            let turn_tokens = d.turns[t - 1].tokens();
            for &j in &gold_updates {
                let evidence = evidence_turns(d, schema, t, j)?;
                let sel = pred
                    .updates
                    .iter()
                    .find(|u| u.slot == j)
                    .map(|u| &u.selection)
                    .or_else(|| pred.probes.get(&j));
                let covered: BTreeSet<usize> = sel.map(|s| s.selected.iter().copied().collect()).unwrap_or_default();
                ev_total += evidence.len();
                ev_hits += evidence.iter().filter(|&&u| u == t || covered.contains(&u)).count();

                let value = gold.get(j);
                if value != NONE && find_span(&turn_tokens, &tokenize(value)).is_none() {
                    coref_total += 1;
                    if pred.updates.iter().any(|u| u.slot == j && u.prediction.classified == value) {
                        coref_hits += 1;
                    }
                }
            }

            if opts.gold_replay {
                latest = d.latest_updates_before(t + 1, j_count);
                prev = gold.clone();
            } else {
                for j in pred.state.changed_from(&prev) {
                    latest[j] = Some(t);
                }
                prev = pred.state;
            }
            gold_prev = gold.clone();
        }
    }

    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(EvalReport {
        mode: opts.inference.mode,
        perspectives: opts.inference.mask.label(),
        k: model.config.k,
        no_turns: metrics.turns() == 0,
        turns: metrics.turns(),
        joint_goal_accuracy: metrics.joint_goal_accuracy(),
        slot_accuracy: metrics.slot_accuracy(),
        domain_accuracy: metrics.domain_accuracy(),
        update_precision: precision,
        update_recall: recall,
        update_f1: f1,
        selection_recall: (ev_total > 0).then(|| ratio(ev_hits, ev_total)),
        evidence_turns: ev_total,
        coref_updates: coref_total,
        coref_classification_accuracy: (coref_total > 0).then(|| ratio(coref_hits, coref_total)),
    })
}

/// Evaluates every non-empty combination of perspectives.
pub fn ablate(model: &DstModel, corpus: &DialogueCorpus, mode: EvalMode) -> Result<Vec<EvalReport>> {
    PerspectiveMask::combinations()
        .into_iter()
        .map(|mask| {
            let opts = EvalOptions { inference: InferenceOptions { mode, mask }, gold_replay: false };
            evaluate(model, corpus, &opts)
        })
        .collect()
}

/// Fixed-width table of ablation results.
pub fn ablation_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<24} {:>8} {:>8} {:>8}\n", "perspectives", "joint", "slot", "recall");
    for r in reports {
        out.push_str(&format!(
            "{:<24} {:>8.4} {:>8.4} {:>8}\n",
            r.perspectives,
            r.joint_goal_accuracy,
            r.slot_accuracy,
            r.selection_recall.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        ));
    }
    out
}

/// Tracked inference over turns `1..=upto`.
pub fn track(model: &DstModel, dialogue: &crate::corpus::Dialogue, upto: usize, opts: &InferenceOptions) -> Result<Vec<TurnPrediction>> {
    let j_count = model.schema.len();
    let mut prev = DialogueState::empty(j_count);
    let mut latest = vec![None; j_count];
    let mut out = Vec::with_capacity(upto);
    for t in 1..=upto {
        let pred = model.predict_turn(dialogue, t, &prev, &latest, opts, &BTreeSet::new())?;
        for j in pred.state.changed_from(&prev) {
            latest[j] = Some(t);
        }
        prev = pred.state.clone();
        out.push(pred);
    }
    Ok(out)
}

/// Per-turn JSON records for the `predict` command.
pub fn prediction_json(model: &DstModel, preds: &[TurnPrediction]) -> Vec<serde_json::Value> {
    let schema = &model.schema;
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let updates: Vec<serde_json::Value> = p
                .updates
                .iter()
                .map(|u| {
                    serde_json::json!({
                        "slot": schema.slot(u.slot).name,
                        "method": u.prediction.method,
                        "value": u.prediction.value,
                        "selected_turns": u.context_turns,
                    })
                })
                .collect();
            let state: serde_json::Map<String, serde_json::Value> = (0..schema.len())
                .map(|j| (schema.slot(j).name.clone(), serde_json::Value::from(p.state.get(j))))
                .collect();
            serde_json::json!({ "turn": i + 1, "updates": updates, "state": state })
        })
        .collect()
}

/// The selection graph of `slot` at turn `t` after tracking turns `1..t`,
/// with node initial-embedding norms.
pub fn inspect_graph(model: &DstModel, dialogue: &crate::corpus::Dialogue, t: usize, slot: &str) -> Result<serde_json::Value> {
    let schema = &model.schema;
    let j = schema.index_of(slot).ok_or_else(|| DstError::Config(format!("unknown slot `{slot}`")))?;
    if t == 0 || t > dialogue.num_turns() {
        return Err(DstError::validation(&dialogue.id, format!("turn {t} out of range 1..={}", dialogue.num_turns())));
    }
    let opts = InferenceOptions::default();
    let history = track(model, dialogue, t - 1, &opts)?;
    let j_count = schema.len();
    let prev = history.last().map(|p| p.state.clone()).unwrap_or_else(|| DialogueState::empty(j_count));
    let mut latest = vec![None; j_count];
    let mut before = DialogueState::empty(j_count);
    for (i, p) in history.iter().enumerate() {
        for z in p.state.changed_from(&before) {
            latest[z] = Some(i + 1);
        }
        before = p.state.clone();
    }
    let graph = SelectionGraph::build(schema, t, j, &latest)?;
    let ctx = Ctx::eval(&model.params);
    let batch = model.encode(&ctx, dialogue, t, &prev)?;
    let hidden: Vec<_> = batch.turns.iter().map(|e| e.hidden).collect();
    let cls: Vec<_> = hidden.iter().map(|&h| ctx.tape.row(h, 0)).collect::<std::result::Result<_, _>>()?;
    let (i_out, _) = crate::selector::ctdh(&ctx, &model.selector.mhsa, ctx.tape.concat_rows(&cls)?)?;
    let init = ctx.tape.value(model.selector.node_init(&ctx, &batch, &hidden, i_out)?);
    let norm = |row: usize| init.row_slice(row).iter().map(|x| x * x).sum::<f64>().sqrt();
    let name = |n: NodeId| match n {
        NodeId::Dialogue(u) => format!("D{u}"),
        NodeId::SlotValue(z) => format!("SV:{}", schema.slot(z).name),
    };
    let mut nodes = Vec::new();
    for u in 1..=t {
        let n = NodeId::Dialogue(u);
        nodes.push(serde_json::json!({ "id": name(n), "type": "dialogue", "turn": u, "init_norm": norm(graph.node_index(n)) }));
    }
    for z in 0..j_count {
        let n = NodeId::SlotValue(z);
        nodes.push(serde_json::json!({
            "id": name(n),
            "type": "slot_value",
            "slot": schema.slot(z).name,
            "value": prev.get(z),
            "init_norm": norm(graph.node_index(n)),
        }));
    }
    let edges: Vec<_> = graph
        .edges
        .iter()
        .map(|e| serde_json::json!({ "src": name(e.a), "dst": name(e.b), "type": e.kind }))
        .collect();
    Ok(serde_json::json!({
        "dialogue": dialogue.id,
        "turn": t,
        "target": slot,
        "latest_update": latest.iter().enumerate().filter_map(|(z, u)| u.map(|u| (schema.slot(z).name.clone(), u))).collect::<BTreeMap<_, _>>(),
        "nodes": nodes,
        "edges": edges,
    }))
}
