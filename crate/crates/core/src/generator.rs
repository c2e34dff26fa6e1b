//! Refined-context re-encoding and hybrid extractive/classification value
//! generation.

use std::collections::BTreeMap;

use dst_numerics::{Ctx, Linear, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{SlotSchema, NONE};
use crate::encoder::{EncodedTurnBatch, EncoderConfig, Embeddings, Transformer};
use crate::error::{DstError, Result};
use crate::text::{find_span, tokenize};
use crate::vocab::{self, Vocabulary};

/// `[CLS] B_{T−1} ⟨t⟩ D_(1) … ⟨t⟩ D_T` with its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedContext {
    pub ids: Vec<usize>,
    /// Included turns, ascending; the last one is the current turn.
    pub turns: Vec<usize>,
    pub indicator_pos: Vec<usize>,
    pub slot_pos: Vec<usize>,
    pub value_pos: Vec<usize>,
    /// Positions of the dialogue-token region `C_E`, in order.
    pub dialogue_pos: Vec<usize>,
    /// Surface tokens of `C_E`.
    pub dialogue_tokens: Vec<String>,
    /// `C_E` index range of each included turn.
    pub turn_ranges: Vec<std::ops::Range<usize>>,
    /// Selected turns left out because the sequence was too long.
    pub dropped: Vec<usize>,
}

impl RefinedContext {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Detokenised `C_E[start..=end]`.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.dialogue_tokens[start..=end].join(" ")
    }

    /// Gold span of `value`: first occurrence inside the most recent included
    /// turn that contains it.
    pub fn gold_span(&self, value: &str) -> Option<(usize, usize)> {
        let needle = tokenize(value);
        for range in self.turn_ranges.iter().rev() {
            if let Some(s) = find_span(&self.dialogue_tokens[range.clone()], &needle) {
                let start = range.start + s;
                return Some((start, start + needle.len() - 1));
            }
        }
        None
    }

    /// `[CLS] B` prefix length.
    fn prefix_len(&self) -> usize {
        self.indicator_pos[0]
    }
}

/// Builds the refined sequence from the turns' first-pass inputs. Selected
/// turns are dropped oldest first while the sequence exceeds `max_len`.
pub fn build_refined_context(batch: &EncodedTurnBatch, selected: &[usize], max_len: usize) -> Result<RefinedContext> {
    let cur = batch.current();
    let t_cur = cur.turn;
    let mut turns: Vec<usize> = selected.to_vec();
    turns.sort_unstable();
    turns.dedup();
    if turns.iter().any(|&t| t == 0 || t >= t_cur) {
        return Err(DstError::Config(format!("selected turns must lie in 1..{t_cur}")));
    }
    // [CLS] and the state block of the current turn's input, without its [SEP].
    let prefix = &cur.input.ids[..cur.input.dialogue_span.start - 1];
    let seg_len = |t: usize| 1 + batch.turn(t).input.dialogue_span.len();
    let mut dropped = Vec::new();
    while !turns.is_empty() && prefix.len() + seg_len(t_cur) + turns.iter().map(|&t| seg_len(t)).sum::<usize>() > max_len {
        dropped.push(turns.remove(0));
    }
    let mut keep_current = cur.input.dialogue_span.len();
    if prefix.len() + 1 + keep_current > max_len {
        if prefix.len() + 2 > max_len {
            return Err(DstError::StateBlockTooLong { needed: prefix.len() + 2, max_len });
        }
        keep_current = max_len - prefix.len() - 1;
    }
    turns.push(t_cur);

    let mut ctx = RefinedContext {
        ids: prefix.to_vec(),
        turns: turns.clone(),
        indicator_pos: Vec::new(),
        slot_pos: cur.input.slot_pos.clone(),
        value_pos: cur.input.value_pos.clone(),
        dialogue_pos: Vec::new(),
        dialogue_tokens: Vec::new(),
        turn_ranges: Vec::new(),
        dropped,
    };
    for &t in &turns {
        let input = &batch.turn(t).input;
        let span = input.dialogue_span.clone();
        let skip = if t == t_cur { span.len() - keep_current } else { 0 };
        ctx.indicator_pos.push(ctx.ids.len());
        ctx.ids.push(vocab::TURN);
        let start = ctx.dialogue_tokens.len();
        for (k, &id) in input.ids[span].iter().enumerate().skip(skip) {
            ctx.dialogue_pos.push(ctx.ids.len());
            ctx.ids.push(id);
            ctx.dialogue_tokens.push(input.dialogue_tokens[k].clone());
        }
        ctx.turn_ranges.push(start..ctx.dialogue_tokens.len());
    }
    Ok(ctx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Extractive,
    Classification,
}

#[derive(Clone, Debug)]
pub struct SpanOutput {
    /// Log start/end distributions over `C_E`, `n × 1`.
    pub log_p: Var,
    pub log_q: Var,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub span: (usize, usize),
}

impl SpanOutput {
    pub fn is_valid(&self) -> bool {
        self.span.1 >= self.span.0
    }
}

#[derive(Clone, Debug)]
pub struct ClassOutput {
    /// Distribution over indicator positions.
    pub y: Vec<f64>,
    /// Log distribution over the slot's candidates, `n_c × 1`.
    pub log_probs: Var,
    pub probs: Vec<f64>,
}

impl ClassOutput {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValuePrediction {
    pub slot: usize,
    pub method: Method,
    pub value: String,
    pub span: Option<(usize, usize)>,
    /// Candidate picked by the classification head, whatever the method.
    pub classified: String,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub transformer: Transformer,
    pub start: Linear,
    pub end: Linear,
    pub indicator: Linear,
    pub query: Linear,
    pub candidate: Linear,
    /// Slot-to-slot attention over the state block, used to copy a value
    /// another slot already holds.
    pub copy: Linear,
    pub copy_gain: ParamId,
    /// Token ids of every candidate of every slot.
    pub candidate_tokens: Vec<Vec<Vec<usize>>>,
    none_tokens: Vec<usize>,
    pub config: EncoderConfig,
}

impl Generator {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        schema: &SlotSchema,
        vocab: &Vocabulary,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            transformer: Transformer::new(store, "generator", cfg, rng)?,
            start: Linear::no_bias(store, "generator.start", d, d, rng)?,
            end: Linear::no_bias(store, "generator.end", d, d, rng)?,
            indicator: Linear::no_bias(store, "generator.indicator", d, d, rng)?,
            query: Linear::new(store, "generator.query", 2 * d, d, rng)?,
            candidate: Linear::new(store, "generator.candidate", d, d, rng)?,
            copy: Linear::no_bias(store, "generator.copy", d, d, rng)?,
            copy_gain: store.insert("generator.copy.gain", Tensor::full(&[1, 1], 5.0))?,
            candidate_tokens: (0..schema.len())
                .map(|j| schema.candidates(j).iter().map(|v| vocab.ids(&tokenize(v))).collect())
                .collect(),
            none_tokens: vocab.ids(&tokenize(NONE)),
            config: cfg.clone(),
        })
    }

    /// Re-encodes the refined sequence with the generator's transformer.
    pub fn encode(&self, ctx: &Ctx<'_>, emb: &Embeddings, refined: &RefinedContext) -> Result<Var> {
        let droppable: Vec<_> = refined.dialogue_pos.iter().map(|&p| p..p + 1).collect();
        let x = emb.embed(ctx, &refined.ids, &droppable, self.config.word_dropout)?;
        let x = ctx.dropout(x, self.config.dropout)?;
        self.transformer.forward(ctx, x, self.config.dropout)
    }

    /// The refined layout filled with first-pass encodings instead of a
    /// second transformer pass; indicators take each turn's `[CLS]` vector.
    pub fn first_pass(&self, ctx: &Ctx<'_>, batch: &EncodedTurnBatch, refined: &RefinedContext) -> Result<Var> {
        let tape = &ctx.tape;
        let cur = batch.current();
        let mut parts = vec![tape.slice_rows(cur.hidden, 0, refined.prefix_len())?];
        for (&t, range) in refined.turns.iter().zip(&refined.turn_ranges) {
            let e = batch.turn(t);
            parts.push(tape.row(e.hidden, 0)?);
            let end = e.input.dialogue_span.end;
            parts.push(tape.slice_rows(e.hidden, end - range.len(), end)?);
        }
        Ok(tape.concat_rows(&parts)?)
    }

    /// Multiplies each marked turn's rows (indicator and dialogue tokens) by
    /// `1 + scale · tanh(s)`, where `s` is that turn's selection score. This
    /// is the only route from the generator losses back to the scores.
    pub fn mark_selected(
        &self,
        ctx: &Ctx<'_>,
        hidden: Var,
        refined: &RefinedContext,
        scores: &BTreeMap<usize, Var>,
        scale: f64,
    ) -> Result<Var> {
        let tape = &ctx.tape;
        if scores.is_empty() || scale == 0.0 {
            return Ok(hidden);
        }
        let one = tape.constant(Tensor::ones(&[1, 1]));
        let mut parts = vec![tape.constant(Tensor::ones(&[refined.prefix_len(), 1]))];
        for (i, (&t, range)) in refined.turns.iter().zip(&refined.turn_ranges).enumerate() {
            let n = 1 + range.len();
            debug_assert_eq!(refined.indicator_pos[i] + n, refined.indicator_pos.get(i + 1).copied().unwrap_or(refined.len()));
            match scores.get(&t) {
                Some(&s) => {
                    let factor = tape.add(one, tape.scale(tape.tanh(s)?, scale)?)?;
                    parts.push(tape.gather_rows(factor, &vec![0; n])?);
                }
                None => parts.push(tape.constant(Tensor::ones(&[n, 1]))),
            }
        }
        Ok(tape.scale_rows(hidden, tape.concat_rows(&parts)?)?)
    }

    pub fn extract_span(&self, ctx: &Ctx<'_>, hidden: Var, refined: &RefinedContext, slot: usize) -> Result<SpanOutput> {
        let tape = &ctx.tape;
        let s = tape.row(hidden, refined.slot_pos[slot])?;
        let ce = tape.gather_rows(hidden, &refined.dialogue_pos)?;
        let logits = |w: &Linear| -> Result<Var> { Ok(tape.matmul_t(ce, false, w.forward(ctx, s)?, true)?) };
        let log_p = tape.log_softmax(logits(&self.start)?, 0)?;
        let log_q = tape.log_softmax(logits(&self.end)?, 0)?;
        let p: Vec<f64> = tape.value(log_p).data().iter().map(|x| x.exp()).collect();
        let q: Vec<f64> = tape.value(log_q).data().iter().map(|x| x.exp()).collect();
        let span = (argmax(&p), argmax(&q));
        Ok(SpanOutput { log_p, log_q, p, q, span })
    }

    pub fn classify_value(
        &self,
        ctx: &Ctx<'_>,
        emb: &Embeddings,
        hidden: Var,
        refined: &RefinedContext,
        slot: usize,
    ) -> Result<ClassOutput> {
        let tape = &ctx.tape;
        let s = tape.row(hidden, refined.slot_pos[slot])?;
        let cc = tape.gather_rows(hidden, &refined.indicator_pos)?;
        let y = tape.softmax(tape.matmul_t(cc, false, self.indicator.forward(ctx, s)?, true)?, 0)?;
        let summary = tape.matmul_t(y, true, cc, false)?;
        let q = tape.tanh(self.query.forward(ctx, tape.concat_cols(&[summary, s])?)?)?;

        let cands = &self.candidate_tokens[slot];
        let flat: Vec<usize> = cands.iter().flatten().copied().collect();
        let mut avg = vec![0.0; cands.len() * flat.len()];
        let mut col = 0;
        for (i, c) in cands.iter().enumerate() {
            for _ in c {
                avg[i * flat.len() + col] = 1.0 / c.len() as f64;
                col += 1;
            }
        }
        let tokens = tape.gather_rows(ctx.p(emb.table), &flat)?;
        let mean = tape.matmul(tape.constant(Tensor::matrix(cands.len(), flat.len(), avg)?), tokens)?;
        let cand = self.candidate.forward(ctx, mean)?;
        let logits = tape.add(tape.matmul_t(cand, false, q, true)?, self.copy_bonus(ctx, hidden, refined, slot, s)?)?;
        let log_probs = tape.log_softmax(logits, 0)?;
        let probs = tape.value(log_probs).data().iter().map(|x| x.exp()).collect();
        Ok(ClassOutput { y: tape.value(y).into_vec(), log_probs, probs })
    }
}

impl Generator {
    /// `n_candidates × 1` logit bonus. Slot `slot` attends over `[CLS]` and
    /// the other slots of the state block; the weight on slot `z` goes to the
    /// candidate equal to `z`'s previous value, and `[CLS]` absorbs the rest.
    fn copy_bonus(&self, ctx: &Ctx<'_>, hidden: Var, refined: &RefinedContext, slot: usize, s: Var) -> Result<Var> {
        let tape = &ctx.tape;
        let cands = &self.candidate_tokens[slot];
        let n_slots = refined.slot_pos.len();
        let others: Vec<usize> = (0..n_slots).filter(|&z| z != slot).collect();
        let mut rows = vec![0];
        rows.extend(others.iter().map(|&z| refined.slot_pos[z]));
        let keys = tape.gather_rows(hidden, &rows)?;
        let scores = tape.matmul_t(keys, false, self.copy.forward(ctx, s)?, true)?;
        let alpha = tape.softmax(tape.scale(scores, 1.0 / (self.config.d as f64).sqrt())?, 0)?;

        let mut links = vec![0.0; cands.len() * rows.len()];
        for (col, &z) in others.iter().enumerate() {
            let start = refined.value_pos[z] + 1;
            let end = if z + 1 < n_slots { refined.slot_pos[z + 1] } else { refined.prefix_len() };
            let value = &refined.ids[start..end];
            if value == self.none_tokens.as_slice() {
                continue;
            }
            if let Some(c) = cands.iter().position(|c| c.as_slice() == value) {
                links[c * rows.len() + col + 1] = 1.0;
            }
        }
        let mass = tape.matmul(tape.constant(Tensor::matrix(cands.len(), rows.len(), links)?), alpha)?;
        Ok(tape.matmul(mass, ctx.p(self.copy_gain))?)
    }
}

/// Extractive value if the predicted span is a valid candidate, otherwise the
/// classification head's choice.
pub fn generate_value(
    schema: &SlotSchema,
    slot: usize,
    refined: &RefinedContext,
    span: &SpanOutput,
    class: &ClassOutput,
) -> ValuePrediction {
    let classified = schema.candidates(slot)[class.argmax()].clone();
    if span.is_valid() {
        let text = refined.span_text(span.span.0, span.span.1);
        if schema.candidate_index(slot, &text).is_some() {
            return ValuePrediction { slot, method: Method::Extractive, value: text, span: Some(span.span), classified };
        }
    }
    ValuePrediction { slot, method: Method::Classification, value: classified.clone(), span: None, classified }
}

/// Extractive and classification cross-entropy terms for one slot. The
/// extractive term is `None` when the gold value is not a span of `C_E`.
pub fn slot_losses(
    ctx: &Ctx<'_>,
    schema: &SlotSchema,
    slot: usize,
    gold: &str,
    refined: &RefinedContext,
    span: &SpanOutput,
    class: &ClassOutput,
) -> Result<(Option<Var>, Option<Var>)> {
    let tape = &ctx.tape;
    let ext = match refined.gold_span(gold) {
        Some((s, e)) => Some(tape.scale(tape.add(tape.pick(span.log_p, s)?, tape.pick(span.log_q, e)?)?, -1.0)?),
        None => None,
    };
    let cls = match schema.candidate_index(slot, gold) {
        Some(c) => Some(tape.scale(tape.pick(class.log_probs, c)?, -1.0)?),
        None => None,
    };
    if ext.is_none() && cls.is_none() {
        return Err(DstError::Validation {
            dialogue: String::new(),
            message: format!("gold value `{gold}` of {} is neither a candidate nor a span", schema.slot(slot).name),
        });
    }
    Ok((ext, cls))
}
