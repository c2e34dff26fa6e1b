//! Per-slot history-turn scoring, gated fusion and top-k selection.

use std::collections::BTreeSet;

use dst_numerics::{Activation, Ctx, Linear, Mlp, MultiHeadAttention, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::SlotSchema;
use crate::encoder::{AssembledInput, EncodedTurnBatch};
use crate::error::{DstError, Result};

/// Graph node: a dialogue turn (1-based) or a slot-value pair (slot index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum NodeId {
    Dialogue(usize),
    SlotValue(usize),
}

/// Undirected edge, stored once with `a <= b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Edge {
    pub kind: u8,
    pub a: NodeId,
    pub b: NodeId,
}

impl Edge {
    pub fn new(kind: u8, x: NodeId, y: NodeId) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        Self { kind, a, b }
    }
}

pub const EDGE_TYPES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionGraph {
    pub num_turns: usize,
    pub num_slots: usize,
    pub target: usize,
    /// Turn of each slot's latest change before the current turn.
    pub latest: Vec<Option<usize>>,
    pub edges: Vec<Edge>,
}

impl SelectionGraph {
    /// Edge rules:
    /// 1. target slot-value node to the current turn;
    /// 2. target slot-value node to every other slot-value node;
    /// 3. every other slot-value node to the turn of its latest update;
    /// 4. every pair of slot-value nodes in the same domain.
    pub fn build(schema: &SlotSchema, num_turns: usize, target: usize, latest: &[Option<usize>]) -> Result<Self> {
        let j_count = schema.len();
        if num_turns == 0 || target >= j_count || latest.len() != j_count {
            return Err(DstError::Config(format!(
                "graph needs T >= 1, target < {j_count} and {j_count} update turns"
            )));
        }
        if let Some(t) = latest.iter().flatten().find(|&&t| t == 0 || t >= num_turns) {
            return Err(DstError::Config(format!("update turn {t} must lie in 1..{num_turns}")));
        }
        let sv = NodeId::SlotValue;
        let mut edges = vec![Edge::new(1, sv(target), NodeId::Dialogue(num_turns))];
        for z in (0..j_count).filter(|&z| z != target) {
            edges.push(Edge::new(2, sv(target), sv(z)));
        }
        for z in (0..j_count).filter(|&z| z != target) {
            if let Some(t) = latest[z] {
                edges.push(Edge::new(3, sv(z), NodeId::Dialogue(t)));
            }
        }
        for a in 0..j_count {
            for b in a + 1..j_count {
                if schema.same_domain(a, b) {
                    edges.push(Edge::new(4, sv(a), sv(b)));
                }
            }
        }
        Ok(Self { num_turns, num_slots: j_count, target, latest: latest.to_vec(), edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_turns + self.num_slots
    }

    /// Row of a node in the stacked embedding matrix: turns first.
    pub fn node_index(&self, node: NodeId) -> usize {
        match node {
            NodeId::Dialogue(t) => t - 1,
            NodeId::SlotValue(z) => self.num_turns + z,
        }
    }

    pub fn count(&self, kind: u8) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn edge_set(&self) -> BTreeSet<Edge> {
        self.edges.iter().copied().collect()
    }

    /// Row-normalised adjacency of one edge type, or `None` without edges.
    pub fn adjacency(&self, kind: u8) -> Option<Tensor> {
        let n = self.num_nodes();
        let mut a = vec![0.0; n * n];
        let mut any = false;
        for e in self.edges.iter().filter(|e| e.kind == kind) {
            let (x, y) = (self.node_index(e.a), self.node_index(e.b));
            a[x * n + y] = 1.0;
            a[y * n + x] = 1.0;
            any = true;
        }
        if !any {
            return None;
        }
        for row in a.chunks_mut(n) {
            let deg: f64 = row.iter().sum();
            if deg > 0.0 {
                row.iter_mut().for_each(|v| *v /= deg);
            }
        }
        Some(Tensor::matrix(n, n, a).expect("positive extents"))
    }
}

/// Forces the R-GCN update gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateOverride {
    #[default]
    Learned,
    /// g ≡ 0: embeddings pass through unchanged.
    Closed,
    /// g ≡ 1: embeddings replaced by tanh(u).
    Open,
}

/// Gated relational GCN with weights shared across hops.
#[derive(Clone, Debug)]
pub struct GatedRgcn {
    pub self_fn: Linear,
    pub relations: Vec<Linear>,
    pub gate: Linear,
}

impl GatedRgcn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            self_fn: Linear::new(store, &format!("{name}.self"), d, d, rng)?,
            relations: (1..=EDGE_TYPES)
                .map(|r| Linear::new(store, &format!("{name}.rel{r}"), d, d, rng))
                .collect::<std::result::Result<_, _>>()?,
            gate: Linear::new(store, &format!("{name}.gate"), 2 * d, d, rng)?,
        })
    }

    /// `u = f_s(h) + Σ_r A_r f_r(h)`.
    pub fn messages(&self, ctx: &Ctx<'_>, graph: &SelectionGraph, h: Var) -> Result<Var> {
        let tape = &ctx.tape;
        let mut u = self.self_fn.forward(ctx, h)?;
        for (r, f) in self.relations.iter().enumerate() {
            if let Some(adj) = graph.adjacency(r as u8 + 1) {
                let m = tape.matmul(tape.constant(adj), f.forward(ctx, h)?)?;
                u = tape.add(u, m)?;
            }
        }
        Ok(u)
    }

    pub fn hop(&self, ctx: &Ctx<'_>, graph: &SelectionGraph, h: Var, gate: GateOverride) -> Result<Var> {
        let tape = &ctx.tape;
        let u = self.messages(ctx, graph, h)?;
        let cand = tape.tanh(u)?;
        let shape = tape.shape(h);
        match gate {
            GateOverride::Learned => {
                let g = tape.sigmoid(self.gate.forward(ctx, tape.concat_cols(&[u, h])?)?)?;
                let keep = tape.affine(g, -1.0, 1.0)?;
                Ok(tape.add(tape.mul(cand, g)?, tape.mul(h, keep)?)?)
            }
            GateOverride::Closed => Ok(tape.add(
                tape.mask_mul(cand, Tensor::zeros(&shape))?,
                tape.mask_mul(h, Tensor::ones(&shape))?,
            )?),
            GateOverride::Open => Ok(tape.add(
                tape.mask_mul(cand, Tensor::ones(&shape))?,
                tape.mask_mul(h, Tensor::zeros(&shape))?,
            )?),
        }
    }

    pub fn forward(&self, ctx: &Ctx<'_>, graph: &SelectionGraph, mut h: Var, hops: usize, gate: GateOverride) -> Result<Var> {
        for _ in 0..hops {
            h = self.hop(ctx, graph, h, gate)?;
        }
        Ok(h)
    }
}

/// Which perspectives take part in fusion; a masked one gets β = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerspectiveMask {
    pub sndh: bool,
    pub ctdh: bool,
    pub imor: bool,
}

impl Default for PerspectiveMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl PerspectiveMask {
    pub const ALL: Self = Self { sndh: true, ctdh: true, imor: true };
    pub const NONE: Self = Self { sndh: false, ctdh: false, imor: false };

    pub fn as_array(self) -> [bool; 3] {
        [self.sndh, self.ctdh, self.imor]
    }

    /// The seven non-empty combinations, in table order.
    pub fn combinations() -> Vec<Self> {
        [[true, false, false], [false, true, false], [false, false, true], [true, true, false], [true, false, true], [false, true, true], [true, true, true]]
            .into_iter()
            .map(|[sndh, ctdh, imor]| Self { sndh, ctdh, imor })
            .collect()
    }

    pub fn label(self) -> String {
        let names: Vec<&str> = [(self.sndh, "SN-DH"), (self.ctdh, "CT-DH"), (self.imor, "IMOR")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() { "none".into() } else { names.join(" + ") }
    }
}

/// Gated fusion of the three perspectives and the scalar scoring MLP.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj: Vec<Linear>,
    pub gate: Vec<Linear>,
    pub score: Mlp,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut proj = Vec::new();
        let mut gate = Vec::new();
        for i in 1..=3 {
            proj.push(Linear::no_bias(store, &format!("{name}.proj{i}"), d, d, rng)?);
            gate.push(Linear::new(store, &format!("{name}.gate{i}"), d, 1, rng)?);
        }
        let score = Mlp::new(store, &format!("{name}.score"), &[d, d, 1], Activation::Relu, Activation::Identity, rng)?;
        Ok(Self { proj, gate, score })
    }

    /// Returns `(scores n×1, betas n×3)` for `n` turns.
    pub fn forward(&self, ctx: &Ctx<'_>, perspectives: [Var; 3], mask: PerspectiveMask) -> Result<(Var, Var)> {
        let tape = &ctx.tape;
        let shape = tape.shape(perspectives[0]);
        let n = shape[0];
        let mut sum: Option<Var> = None;
        let mut betas = Vec::with_capacity(3);
        for (i, on) in mask.as_array().into_iter().enumerate() {
            if !on {
                betas.push(tape.constant(Tensor::zeros(&[n, 1])));
                continue;
            }
            let z = tape.tanh(self.proj[i].forward(ctx, perspectives[i])?)?;
            let beta = tape.sigmoid(self.gate[i].forward(ctx, z)?)?;
            let term = tape.scale_rows(perspectives[i], beta)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, term)?,
                None => term,
            });
            betas.push(beta);
        }
        let sum = match sum {
            Some(s) => s,
            None => tape.constant(Tensor::zeros(&shape)),
        };
        let scores = self.score.forward(ctx, sum)?;
        Ok((scores, tape.concat_cols(&betas)?))
    }
}

/// Top-k history turns (1-based ids, ascending). `scores[i]` belongs to turn
/// `i + 1`; ties go to the more recent turn.
pub fn rank_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(DstError::Config("k must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    let mut top: Vec<usize> = order.into_iter().take(k).map(|i| i + 1).collect();
    top.sort_unstable();
    Ok(top)
}

/// Slot-name attention over one turn's dialogue tokens: `1 × d`.
pub fn sndh(ctx: &Ctx<'_>, hidden: Var, input: &AssembledInput, slot: usize) -> Result<Var> {
    let tape = &ctx.tape;
    let span = &input.dialogue_span;
    if span.is_empty() {
        return Err(DstError::Config("empty dialogue span".into()));
    }
    let d = tape.slice_rows(hidden, span.start, span.end)?;
    let s = tape.row(hidden, input.slot_pos[slot])?;
    let alpha = tape.softmax(tape.matmul_t(d, false, s, true)?, 0)?;
    Ok(tape.matmul_t(alpha, true, d, false)?)
}

/// `I = X + MHSA(X)` and `h_t = γ_t I_T + I_t` with `γ_t = σ(I_t·I_T/√d)`.
pub fn ctdh(ctx: &Ctx<'_>, mhsa: &MultiHeadAttention, cls: Var) -> Result<(Var, Var)> {
    let tape = &ctx.tape;
    let shape = tape.shape(cls);
    let (t, d) = (shape[0], shape[1]);
    let i = tape.add(cls, mhsa.forward(ctx, cls, cls)?)?;
    let last = tape.row(i, t - 1)?;
    let gamma = tape.sigmoid(tape.scale(tape.matmul_t(i, false, last, true)?, 1.0 / (d as f64).sqrt())?)?;
    let rep = tape.gather_rows(i, &vec![t - 1; t])?;
    let h = tape.add(tape.scale_rows(rep, gamma)?, i)?;
    Ok((i, h))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectOptions {
    pub k: usize,
    pub hops: usize,
    pub mask: PerspectiveMask,
    pub gate: GateOverride,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self { k: 2, hops: 3, mask: PerspectiveMask::ALL, gate: GateOverride::Learned }
    }
}

/// All-turn perspective embeddings, `T × d` each.
#[derive(Clone, Copy, Debug)]
pub struct Perspectives {
    pub sndh: Var,
    pub ctdh: Var,
    pub imor: Var,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Score of history turn `i + 1`.
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    /// `[β_1, β_2, β_3]` per history turn.
    pub betas: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct SlotSelection {
    pub result: SelectionResult,
    /// `(T−1) × 1` live scores, absent when there is no history.
    pub scores: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Selector {
    pub mhsa: MultiHeadAttention,
    pub slot_value: Linear,
    pub rgcn: GatedRgcn,
    pub fusion: Fusion,
}

impl Selector {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            mhsa: MultiHeadAttention::new(store, "selector.mhsa", d, heads, rng)?,
            slot_value: Linear::new(store, "selector.slot_value", 2 * d, d, rng)?,
            rgcn: GatedRgcn::new(store, "selector.rgcn", d, rng)?,
            fusion: Fusion::new(store, "selector.fusion", d, rng)?,
        })
    }

    /// Initial node embeddings: MHSA outputs for turns, projected
    /// `[SLOT] ⊕ [VALUE]` vectors of the current turn for slot-value nodes.
    pub fn node_init(&self, ctx: &Ctx<'_>, batch: &EncodedTurnBatch, hidden: &[Var], mhsa_out: Var) -> Result<Var> {
        let tape = &ctx.tape;
        let cur = batch.current();
        let h = hidden[hidden.len() - 1];
        let slots = tape.gather_rows(h, &cur.input.slot_pos)?;
        let values = tape.gather_rows(h, &cur.input.value_pos)?;
        let sv = self.slot_value.forward(ctx, tape.concat_cols(&[slots, values])?)?;
        Ok(tape.concat_rows(&[mhsa_out, sv])?)
    }

    /// The three perspectives over all turns, using `hidden[t-1]` as the
    /// encoding of turn `t`.
    pub fn perspectives(
        &self,
        ctx: &Ctx<'_>,
        batch: &EncodedTurnBatch,
        hidden: &[Var],
        graph: &SelectionGraph,
        opts: &SelectOptions,
    ) -> Result<Perspectives> {
        let tape = &ctx.tape;
        let t = batch.num_turns();
        let sn: Vec<Var> = batch
            .turns
            .iter()
            .zip(hidden)
            .map(|(turn, &h)| sndh(ctx, h, &turn.input, graph.target))
            .collect::<Result<_>>()?;
        let sn = tape.concat_rows(&sn)?;
        let cls: Vec<Var> = hidden.iter().map(|&h| tape.row(h, AssembledInput::CLS_POS)).collect::<std::result::Result<_, _>>()?;
        let (i, ct) = ctdh(ctx, &self.mhsa, tape.concat_rows(&cls)?)?;
        let init = self.node_init(ctx, batch, hidden, i)?;
        let nodes = self.rgcn.forward(ctx, graph, init, opts.hops, opts.gate)?;
        let im = tape.slice_rows(nodes, 0, t)?;
        Ok(Perspectives { sndh: sn, ctdh: ct, imor: im })
    }

    /// Scores of history turns `1..T−1` with per-turn `live` control over
    /// which encodings pass gradients.
    pub fn score_history(
        &self,
        ctx: &Ctx<'_>,
        batch: &EncodedTurnBatch,
        graph: &SelectionGraph,
        opts: &SelectOptions,
        live: &dyn Fn(usize) -> bool,
    ) -> Result<(Var, Var)> {
        let tape = &ctx.tape;
        let hidden: Vec<Var> = batch
            .turns
            .iter()
            .map(|e| if live(e.turn) { e.hidden } else { tape.detach(e.hidden) })
            .collect();
        let p = self.perspectives(ctx, batch, &hidden, graph, opts)?;
        let h = batch.num_turns() - 1;
        let hist = |v: Var| tape.slice_rows(v, 0, h);
        Ok(self.fusion.forward(ctx, [hist(p.sndh)?, hist(p.ctdh)?, hist(p.imor)?], opts.mask)?)
    }

    /// Selects history turns for one slot. In train mode the ranking pass runs
    /// on detached encodings; the returned scores come from a second pass in
    /// which only the selected turns and the current turn are live.
    pub fn select_for_slot(
        &self,
        ctx: &Ctx<'_>,
        batch: &EncodedTurnBatch,
        schema: &SlotSchema,
        slot: usize,
        latest: &[Option<usize>],
        opts: &SelectOptions,
    ) -> Result<SlotSelection> {
        let t = batch.num_turns();
        if opts.k < 1 {
            return Err(DstError::Config("k must be at least 1".into()));
        }
        if t == 1 {
            return Ok(SlotSelection { result: SelectionResult::default(), scores: None });
        }
        let graph = SelectionGraph::build(schema, t, slot, latest)?;
        let tape = &ctx.tape;
        let first_live: &dyn Fn(usize) -> bool = if ctx.is_train() { &|_| false } else { &|_| true };
        let (scores, betas) = self.score_history(ctx, batch, &graph, opts, first_live)?;
        let values = tape.value(scores).into_vec();
        let selected = rank_top_k(&values, opts.k)?;
        let beta_t = tape.value(betas);
        let result = SelectionResult {
            betas: (0..values.len()).map(|i| [beta_t.at(i, 0), beta_t.at(i, 1), beta_t.at(i, 2)]).collect(),
            scores: values,
            selected,
        };
        let scores = if ctx.is_train() {
            let keep: BTreeSet<usize> = result.selected.iter().copied().chain([t]).collect();
            self.score_history(ctx, batch, &graph, opts, &|u| keep.contains(&u))?.0
        } else {
            scores
        };
        Ok(SlotSelection { result, scores: Some(scores) })
    }
}
