//! The full tracker: encoder, update head, selector and generator over one
//! parameter store, plus checkpoint I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use dst_numerics::{Ctx, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::corpus::{Dialogue, DialogueState, SlotSchema};
use crate::encoder::{encode_turns, EncodedTurnBatch, Embeddings, TurnEncoder};
use crate::error::{DstError, Result};
use crate::generator::{build_refined_context, generate_value, slot_losses, Generator, RefinedContext, ValuePrediction};
use crate::selector::{PerspectiveMask, SelectOptions, SelectionResult, Selector, SlotSelection};
use crate::update::{update_loss, UpdateDecision, UpdatePredictor};
use crate::vocab::Vocabulary;

/// How the generator's history is chosen at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// The per-slot selected turns.
    #[default]
    Dicos,
    /// Every turn from the earliest selected one up to the current turn.
    Granularity,
}

impl std::str::FromStr for EvalMode {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dicos" => Ok(Self::Dicos),
            "granularity" => Ok(Self::Granularity),
            _ => Err(DstError::Config(format!("unknown mode `{s}`, expected dicos or granularity"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InferenceOptions {
    pub mode: EvalMode,
    pub mask: PerspectiveMask,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotUpdate {
    pub slot: usize,
    pub prediction: ValuePrediction,
    pub selection: SelectionResult,
    /// History turns actually fed to the generator.
    pub context_turns: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnPrediction {
    pub decision: UpdateDecision,
    pub updates: Vec<SlotUpdate>,
    /// Selections of extra slots requested by the caller (not generated).
    pub probes: BTreeMap<usize, SelectionResult>,
    pub state: DialogueState,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub update: f64,
    pub extractive: f64,
    pub classification: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.update + self.extractive + self.classification
    }
}

#[derive(Clone, Debug)]
pub struct DstModel {
    pub config: Config,
    pub schema: SlotSchema,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub embeddings: Embeddings,
    pub encoder: TurnEncoder,
    pub update: UpdatePredictor,
    pub selector: Selector,
    pub generator: Generator,
}

const PARAMS_MAGIC: &[u8; 8] = b"DSTPARAM";

impl DstModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: Config, schema: SlotSchema, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let enc = config.encoder();
        let pos_len = config.max_len.max(config.context_max_len);
        let embeddings = Embeddings::new(&mut params, vocab.len(), enc.d, pos_len, &mut rng)?;
        let encoder = TurnEncoder::new(&mut params, &enc, &mut rng)?;
        let update = UpdatePredictor::new(&mut params, enc.d, &mut rng)?;
        let selector = Selector::new(&mut params, enc.d, enc.n_heads, &mut rng)?;
        let generator = Generator::new(&mut params, &enc, &schema, &vocab, &mut rng)?;
        Ok(Self { config, schema, vocab, params, embeddings, encoder, update, selector, generator })
    }

    pub fn num_slots(&self) -> usize {
        self.schema.len()
    }

    pub fn encode(&self, ctx: &Ctx<'_>, dialogue: &Dialogue, t: usize, prev: &DialogueState) -> Result<EncodedTurnBatch> {
        encode_turns(ctx, &self.encoder, &self.embeddings, &self.vocab, &self.schema, dialogue, t, prev)
    }

    fn select(
        &self,
        ctx: &Ctx<'_>,
        batch: &EncodedTurnBatch,
        slot: usize,
        latest: &[Option<usize>],
        opts: &SelectOptions,
    ) -> Result<SlotSelection> {
        if self.config.k == 0 {
            return Ok(SlotSelection { result: SelectionResult::default(), scores: None });
        }
        self.selector.select_for_slot(ctx, batch, &self.schema, slot, latest, opts)
    }

    fn context_hidden(&self, ctx: &Ctx<'_>, batch: &EncodedTurnBatch, refined: &RefinedContext) -> Result<Var> {
        if self.config.refine {
            self.generator.encode(ctx, &self.embeddings, refined)
        } else {
            self.generator.first_pass(ctx, batch, refined)
        }
    }

    /// Marks the history turns of `refined` with their selection scores.
    fn mark(&self, ctx: &Ctx<'_>, hidden: Var, refined: &RefinedContext, scores: Option<Var>) -> Result<Var> {
        let mut marks = BTreeMap::new();
        if let Some(scores) = scores {
            for &u in &refined.turns[..refined.turns.len() - 1] {
                marks.insert(u, ctx.tape.row(scores, u - 1)?);
            }
        }
        self.generator.mark_selected(ctx, hidden, refined, &marks, self.config.selection_grad_scale)
    }

    /// Training loss of turn `t` with gold previous state, gold update set
    /// and gold latest-update turns.
    pub fn turn_loss(&self, ctx: &Ctx<'_>, dialogue: &Dialogue, t: usize) -> Result<(Var, LossParts)> {
        let tape = &ctx.tape;
        let j_count = self.num_slots();
        let prev = dialogue.state_before(t, j_count);
        let latest = dialogue.latest_updates_before(t, j_count);
        let gold_state = &dialogue.states[t - 1];
        let gold_updates = gold_state.changed_from(&prev);
        let batch = self.encode(ctx, dialogue, t, &prev)?;

        let l_upd = update_loss(ctx, self.update.logits(ctx, batch.current())?, &gold_updates)?;
        let mut parts = LossParts { update: tape.value(l_upd).item(), ..Default::default() };
        if gold_updates.is_empty() {
            return Ok((l_upd, parts));
        }
        let opts = self.config.select_options(PerspectiveMask::ALL);
        let mut cache: BTreeMap<Vec<usize>, (RefinedContext, Var)> = BTreeMap::new();
        let mut terms = Vec::new();
        let (mut ext_sum, mut cls_sum) = (0.0, 0.0);
        for &j in &gold_updates {
            let sel = self.select(ctx, &batch, j, &latest, &opts)?;
            let key = sel.result.selected.clone();
            if !cache.contains_key(&key) {
                let refined = build_refined_context(&batch, &key, self.config.context_max_len)?;
                let hidden = self.context_hidden(ctx, &batch, &refined)?;
                cache.insert(key.clone(), (refined, hidden));
            }
            let (refined, hidden) = &cache[&key];
            let hidden = self.mark(ctx, *hidden, refined, sel.scores)?;
            let span = self.generator.extract_span(ctx, hidden, refined, j)?;
            let class = self.generator.classify_value(ctx, &self.embeddings, hidden, refined, j)?;
            let (ext, cls) = slot_losses(ctx, &self.schema, j, gold_state.get(j), refined, &span, &class).map_err(|e| match e {
                DstError::Validation { message, .. } => DstError::validation(&dialogue.id, message),
                e => e,
            })?;
            for (term, sum) in [(ext, &mut ext_sum), (cls, &mut cls_sum)] {
                if let Some(v) = term {
                    *sum += tape.value(v).item();
                    terms.push(v);
                }
            }
        }
        let n = gold_updates.len() as f64;
        parts.extractive = ext_sum / n;
        parts.classification = cls_sum / n;
        let gen = tape.scale(tape.sum(tape.concat_rows(&terms)?)?, 1.0 / n)?;
        Ok((tape.add(l_upd, gen)?, parts))
    }

    /// One tracked-inference step. `probe` lists extra slots whose selection
    /// is reported without generating a value.
    pub fn predict_turn(
        &self,
        dialogue: &Dialogue,
        t: usize,
        prev: &DialogueState,
        latest: &[Option<usize>],
        opts: &InferenceOptions,
        probe: &BTreeSet<usize>,
    ) -> Result<TurnPrediction> {
        let ctx = Ctx::eval(&self.params);
        let batch = self.encode(&ctx, dialogue, t, prev)?;
        let decision = self.update.predict(&ctx, batch.current(), self.config.update_threshold)?;
        let sel_opts = self.config.select_options(opts.mask);
        let mut state = prev.clone();
        let mut updates = Vec::new();
        let mut probes = BTreeMap::new();
        let mut cache: BTreeMap<Vec<usize>, (RefinedContext, Var)> = BTreeMap::new();
        for &j in decision.selected.union(probe) {
            let sel = self.select(&ctx, &batch, j, latest, &sel_opts)?;
            if !decision.selected.contains(&j) {
                probes.insert(j, sel.result);
                continue;
            }
            let turns = match (opts.mode, sel.result.selected.first()) {
                (EvalMode::Granularity, Some(&first)) => (first..t).collect(),
                _ => sel.result.selected.clone(),
            };
            if !cache.contains_key(&turns) {
                let refined = build_refined_context(&batch, &turns, self.config.context_max_len)?;
                let hidden = self.context_hidden(&ctx, &batch, &refined)?;
                cache.insert(turns.clone(), (refined, hidden));
            }
            let (refined, hidden) = &cache[&turns];
            let hidden = self.mark(&ctx, *hidden, refined, sel.scores)?;
            let span = self.generator.extract_span(&ctx, hidden, refined, j)?;
            let class = self.generator.classify_value(&ctx, &self.embeddings, hidden, refined, j)?;
            let prediction = generate_value(&self.schema, j, refined, &span, &class);
            state.set(j, prediction.value.clone());
            if probe.contains(&j) {
                probes.insert(j, sel.result.clone());
            }
            updates.push(SlotUpdate {
                slot: j,
                prediction,
                selection: sel.result,
                context_turns: refined.turns[..refined.turns.len() - 1].to_vec(),
            });
        }
        Ok(TurnPrediction { decision, updates, probes, state })
    }

    /// Writes `params.bin`, `vocab.txt`, `config.txt` and `schema.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DstError::io(dir, e))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (_, p) in self.params.iter() {
            buf.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            let shape = p.tensor.shape();
            buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
            for &s in shape {
                buf.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for &x in p.tensor.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let path = dir.join("params.bin");
        fs::write(&path, buf).map_err(|e| DstError::io(&path, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.config.save(&dir.join("config.txt"))?;
        self.schema.save(&dir.join("schema.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = Config::load(&dir.join("config.txt"))?;
        let schema = SlotSchema::load(&dir.join("schema.json"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let mut model = Self::new(config, schema, vocab)?;
        let path = dir.join("params.bin");
        let bytes = fs::read(&path).map_err(|e| DstError::io(&path, e))?;
        let bad = |m: &str| DstError::Checkpoint { path: path.clone(), message: m.to_string() };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != PARAMS_MAGIC {
            return Err(bad("bad magic"));
        }
        let count = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        if count != model.params.len() {
            return Err(bad(&format!("{count} tensors, model has {}", model.params.len())));
        }
        for _ in 0..count {
            let name_len = r.u64().ok_or_else(|| bad("truncated entry"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            let rank = r.u64().ok_or_else(|| bad("truncated shape"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|s| s as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated shape"))?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated data"))?;
            let id = model.params.id(&name).map_err(|_| bad(&format!("unknown tensor `{name}`")))?;
            model.params.set(id, Tensor::new(shape, data)?).map_err(|e| bad(&format!("`{name}`: {e}")))?;
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}
