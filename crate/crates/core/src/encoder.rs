//! Per-turn input assembly and the shared transformer encoder.

use std::ops::Range;

use dst_numerics::nn::sinusoidal_positions;
use dst_numerics::{Activation, Ctx, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialogue, DialogueState, SlotSchema, Turn};
use crate::error::{DstError, Result};
use crate::text::tokenize;
use crate::vocab::{self, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub word_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 64, n_layers: 2, n_heads: 4, ffn_dim: 128, max_len: 128, dropout: 0.1, word_dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(DstError::Config(format!("d_model {} must be a positive multiple of n_heads {}", self.d, self.n_heads)));
        }
        if self.ffn_dim == 0 || self.max_len < 4 {
            return Err(DstError::Config("ffn_dim must be positive and max_len at least 4".into()));
        }
        for (k, v) in [("dropout", self.dropout), ("word_dropout", self.word_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return Err(DstError::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// `[SLOT] name [VALUE] value` for every slot, in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBlock {
    pub ids: Vec<usize>,
    /// Offsets of each `[SLOT]` within `ids`.
    pub slot_pos: Vec<usize>,
    pub value_pos: Vec<usize>,
}

pub fn state_block(vocab: &Vocabulary, schema: &SlotSchema, state: &DialogueState) -> StateBlock {
    let mut block = StateBlock { ids: Vec::new(), slot_pos: Vec::new(), value_pos: Vec::new() };
    for (j, slot) in schema.slots().iter().enumerate() {
        block.slot_pos.push(block.ids.len());
        block.ids.push(vocab::SLOT);
        block.ids.extend(vocab.ids(&tokenize(&slot.name)));
        block.value_pos.push(block.ids.len());
        block.ids.push(vocab::VALUE);
        block.ids.extend(vocab.ids(&tokenize(state.get(j))));
    }
    block
}

/// `R_t ; U_t [SEP]` as strings.
pub fn dialogue_tokens(turn: &Turn) -> Vec<String> {
    let mut out = tokenize(&turn.system);
    out.push(vocab::RESERVED[vocab::SEMI].to_string());
    out.extend(tokenize(&turn.user));
    out.push(vocab::RESERVED[vocab::SEP].to_string());
    out
}

/// The token sequence `[CLS] B [SEP] D_t` of one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput {
    pub ids: Vec<usize>,
    pub slot_pos: Vec<usize>,
    pub value_pos: Vec<usize>,
    pub dialogue_span: Range<usize>,
    /// Surface form of the tokens in `dialogue_span`.
    pub dialogue_tokens: Vec<String>,
    /// Dialogue tokens dropped from the left to fit `max_len`.
    pub truncated: usize,
}

impl AssembledInput {
    pub const CLS_POS: usize = 0;

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn assemble_input(
    vocab: &Vocabulary,
    schema: &SlotSchema,
    turn: &Turn,
    prev_state: &DialogueState,
    max_len: usize,
) -> Result<AssembledInput> {
    if prev_state.len() != schema.len() {
        return Err(DstError::Config(format!(
            "state has {} slots, schema has {}",
            prev_state.len(),
            schema.len()
        )));
    }
    let block = state_block(vocab, schema, prev_state);
    // [CLS] + block + [SEP] + at least the closing [SEP] of D_t.
    let fixed = block.ids.len() + 2;
    if fixed + 1 > max_len {
        return Err(DstError::StateBlockTooLong { needed: fixed + 1, max_len });
    }
    let mut tokens = dialogue_tokens(turn);
    let truncated = tokens.len().saturating_sub(max_len - fixed);
    tokens.drain(..truncated);

    let mut ids = Vec::with_capacity(fixed + tokens.len());
    ids.push(vocab::CLS);
    ids.extend(&block.ids);
    ids.push(vocab::SEP);
    let start = ids.len();
    ids.extend(vocab.ids(&tokens));
    Ok(AssembledInput {
        slot_pos: block.slot_pos.iter().map(|p| p + 1).collect(),
        value_pos: block.value_pos.iter().map(|p| p + 1).collect(),
        dialogue_span: start..ids.len(),
        dialogue_tokens: tokens,
        truncated,
        ids,
    })
}

/// Post-LN transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), cfg.d, cfg.n_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d, rng)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.d, cfg.ffn_dim, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_dim, cfg.d, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d, rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var, dropout: f64) -> Result<Var> {
        let tape = &ctx.tape;
        let a = self.attention.forward(ctx, x, x)?;
        let a = ctx.dropout(a, dropout)?;
        let x = self.norm1.forward(ctx, tape.add(x, a)?)?;
        let f = self.ff1.forward(ctx, x)?;
        let f = self.ff2.forward(ctx, Activation::Relu.apply(tape, f)?)?;
        let f = ctx.dropout(f, dropout)?;
        Ok(self.norm2.forward(ctx, tape.add(x, f)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<TransformerBlock>,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let blocks = (0..cfg.n_layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, mut x: Var, dropout: f64) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x, dropout)?;
        }
        Ok(x)
    }
}

/// Token embedding table shared by the encoder and the generator, plus the
/// fixed position table.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub table: ParamId,
    positions: Tensor,
}

impl Embeddings {
    pub fn new(store: &mut ParamStore, vocab_size: usize, d: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let table = store.add("embeddings.tokens", &[vocab_size, d], Init::Xavier, rng)?;
        Ok(Self { table, positions: sinusoidal_positions(max_len, d) })
    }

    pub fn max_len(&self) -> usize {
        self.positions.rows()
    }

    /// Token embeddings scaled by `√d` plus position embeddings. In train mode, tokens inside
    /// `droppable` that are not special are replaced by `[UNK]` at
    /// `word_dropout`.
    pub fn embed(&self, ctx: &Ctx<'_>, ids: &[usize], droppable: &[Range<usize>], word_dropout: f64) -> Result<Var> {
        let n = ids.len();
        if n > self.max_len() {
            return Err(DstError::Config(format!("sequence of {n} tokens exceeds the position table ({})", self.max_len())));
        }
        let mut ids = ids.to_vec();
        if ctx.is_train() && word_dropout > 0.0 {
            ctx.with_rng(|rng| {
                for r in droppable {
                    for id in &mut ids[r.clone()] {
                        if !vocab::is_special(*id) && rng.gen::<f64>() < word_dropout {
                            *id = vocab::UNK;
                        }
                    }
                }
            });
        }
        let tape = &ctx.tape;
        let d = self.positions.cols();
        let tokens = tape.scale(tape.gather_rows(ctx.p(self.table), &ids)?, (d as f64).sqrt())?;
        let pos = Tensor::matrix(n, d, self.positions.data()[..n * d].to_vec())?;
        Ok(tape.add(tokens, tape.constant(pos))?)
    }
}

/// Shared-weight transformer applied to each turn separately.
#[derive(Clone, Debug)]
pub struct TurnEncoder {
    pub config: EncoderConfig,
    pub transformer: Transformer,
}

impl TurnEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { config: cfg.clone(), transformer: Transformer::new(store, "encoder", cfg, rng)? })
    }

    pub fn encode(&self, ctx: &Ctx<'_>, emb: &Embeddings, input: &AssembledInput) -> Result<Var> {
        let x = emb.embed(ctx, &input.ids, std::slice::from_ref(&input.dialogue_span), self.config.word_dropout)?;
        let x = ctx.dropout(x, self.config.dropout)?;
        self.transformer.forward(ctx, x, self.config.dropout)
    }
}

#[derive(Clone, Debug)]
pub struct EncodedTurn {
    /// 1-based turn id.
    pub turn: usize,
    pub input: AssembledInput,
    /// `len × d`.
    pub hidden: Var,
}

/// Encodings of turns `1..=T`, all built with the same `B_{T-1}`.
#[derive(Clone, Debug)]
pub struct EncodedTurnBatch {
    pub turns: Vec<EncodedTurn>,
}

impl EncodedTurnBatch {
    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    /// Turn `t`, 1-based.
    pub fn turn(&self, t: usize) -> &EncodedTurn {
        &self.turns[t - 1]
    }

    pub fn current(&self) -> &EncodedTurn {
        self.turns.last().expect("batch holds at least one turn")
    }
}

#[allow(clippy::too_many_arguments)]
pub fn encode_turns(
    ctx: &Ctx<'_>,
    encoder: &TurnEncoder,
    emb: &Embeddings,
    vocab: &Vocabulary,
    schema: &SlotSchema,
    dialogue: &Dialogue,
    upto: usize,
    prev_state: &DialogueState,
) -> Result<EncodedTurnBatch> {
    if upto == 0 || upto > dialogue.num_turns() {
        return Err(DstError::validation(&dialogue.id, format!("turn {upto} out of range")));
    }
    let turns = (1..=upto)
        .map(|t| {
            let input = assemble_input(vocab, schema, &dialogue.turns[t - 1], prev_state, encoder.config.max_len)?;
            let hidden = encoder.encode(ctx, emb, &input)?;
            Ok(EncodedTurn { turn: t, input, hidden })
        })
        .collect::<Result<_>>()?;
    Ok(EncodedTurnBatch { turns })
}
