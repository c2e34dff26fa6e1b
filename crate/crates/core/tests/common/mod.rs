//! Fixtures and checks shared by the integration tests and the acceptance
//! binary.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dst_core::corpus::{Dialogue, DialogueCorpus, DialogueState, Slot, SlotSchema, Turn};
use dst_core::encoder::EncodedTurnBatch;
use dst_core::generator::{build_refined_context, slot_losses};
use dst_core::selector::{Edge, GateOverride, NodeId, PerspectiveMask, SelectOptions, SelectionGraph};
use dst_core::vocab::Vocabulary;
use dst_core::{Config, DstModel};
use dst_numerics::{
    grad_check, scaled_dot_attention, Ctx, GradCheckConfig, Init, MultiHeadAttention, ParamId, ParamStore, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn slot(name: &str, values: &[&str]) -> Slot {
    let domain = name.split('-').next().unwrap().to_string();
    Slot { name: name.into(), domain, values: values.iter().map(|v| v.to_string()).collect() }
}

/// Two domains, three slots.
pub fn toy_schema() -> SlotSchema {
    SlotSchema::new(vec![
        slot("hotel-area", &["north", "south", "centre"]),
        slot("hotel-pricerange", &["cheap", "expensive"]),
        slot("taxi-area", &["north", "south", "centre"]),
    ])
    .unwrap()
}

pub fn state(values: &[&str]) -> DialogueState {
    DialogueState::from_values(values.iter().map(|v| v.to_string()).collect())
}

/// Three turns: an explicit hotel area, an explicit price, then a taxi whose
/// area is a reference to the hotel.
pub fn toy_dialogue() -> Dialogue {
    Dialogue {
        id: "toy".into(),
        turns: vec![
            Turn::new("hello .", "i need a hotel in the north"),
            Turn::new("ok .", "it should be cheap"),
            Turn::new("anything else ?", "a taxi to the same area as the hotel"),
        ],
        states: vec![
            state(&["north", "none", "none"]),
            state(&["north", "cheap", "none"]),
            state(&["north", "cheap", "north"]),
        ],
        evidence: None,
    }
}

pub fn toy_corpus() -> DialogueCorpus {
    DialogueCorpus { dialogues: vec![toy_dialogue()] }
}

/// A tiny deterministic configuration for gradient checks and unit tests.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.apply_overrides(&[
        "d_model=8",
        "n_layers=1",
        "n_heads=2",
        "ffn_dim=12",
        "max_len=48",
        "context_max_len=96",
        "dropout=0",
        "word_dropout=0",
        "selection_grad_scale=1",
        "hops=2",
    ])
    .unwrap();
    c
}

pub fn tiny_model(config: Config) -> DstModel {
    let schema = toy_schema();
    let corpus = toy_corpus();
    let vocab = Vocabulary::build(&schema, &corpus);
    DstModel::new(config, schema, vocab).unwrap()
}

pub fn batch(model: &DstModel, ctx: &Ctx<'_>, d: &Dialogue, t: usize) -> EncodedTurnBatch {
    let prev = d.state_before(t, model.num_slots());
    model.encode(ctx, d, t, &prev).unwrap()
}

pub fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes.iter().map(|(n, s)| store.add(n, s, Init::Xavier, &mut rng).unwrap()).collect();
    (store, ids)
}

fn random_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(w ⊙ x)` with a fixed random `w`, so the objective is not symmetric.
fn weighted_sum(ctx: &Ctx<'_>, x: Var, seed: u64) -> dst_numerics::Result<Var> {
    let t = &ctx.tape;
    let w = t.constant(random_weights(&t.shape(x), seed));
    t.sum(t.mul(x, w)?)
}

pub struct GradResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn run_check<F>(name: &'static str, store: &mut ParamStore, tolerance: f64, max_coords: Option<usize>, f: F) -> GradResult
where
    F: Fn(&Ctx<'_>) -> dst_numerics::Result<Var>,
{
    // A step of 1e-4 keeps round-off near 1e-12 on losses of order one while
    // the central-difference truncation error stays near 1e-8 relative.
    let cfg = GradCheckConfig { epsilon: 1e-4, tolerance, max_coords, seed: 5, ..GradCheckConfig::default() };
    let report = grad_check(f, store, None, &cfg).unwrap();
    GradResult { name, max_rel_err: report.max_rel_err, tolerance }
}

pub fn grad_softmax() -> GradResult {
    let (mut store, ids) = random_store(&[("x", &[3, 7])], 21);
    run_check("softmax", &mut store, 1e-5, None, |ctx| {
        let s = ctx.tape.softmax(ctx.p(ids[0]), 1)?;
        weighted_sum(ctx, s, 1)
    })
}

pub fn grad_attention() -> GradResult {
    let (mut store, ids) = random_store(&[("q", &[2, 4]), ("k", &[3, 4]), ("v", &[3, 4])], 22);
    run_check("attention", &mut store, 1e-5, None, |ctx| {
        let out = scaled_dot_attention(&ctx.tape, ctx.p(ids[0]), ctx.p(ids[1]), ctx.p(ids[2]))?;
        weighted_sum(ctx, out, 2)
    })
}

pub fn grad_mhsa() -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let mhsa = MultiHeadAttention::new(&mut store, "mhsa", 8, 2, &mut rng).unwrap();
    let x = store.add("x", &[3, 8], Init::Xavier, &mut rng).unwrap();
    run_check("MHSA", &mut store, 1e-5, None, |ctx| {
        let out = mhsa.forward(ctx, ctx.p(x), ctx.p(x))?;
        weighted_sum(ctx, out, 3)
    })
}

/// Two-slot graph at `T = 2` with every edge type present.
pub fn small_graph() -> (SlotSchema, SelectionGraph) {
    let schema = SlotSchema::new(vec![slot("hotel-area", &["north"]), slot("hotel-name", &["x"])]).unwrap();
    let graph = SelectionGraph::build(&schema, 2, 0, &[None, Some(1)]).unwrap();
    (schema, graph)
}

pub fn grad_rgcn() -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut store = ParamStore::new();
    let rgcn = dst_core::selector::GatedRgcn::new(&mut store, "rgcn", 6, &mut rng).unwrap();
    let (_, graph) = small_graph();
    let h = store.add("h", &[graph.num_nodes(), 6], Init::Xavier, &mut rng).unwrap();
    run_check("gated R-GCN", &mut store, 1e-5, None, |ctx| {
        let out = rgcn.forward(ctx, &graph, ctx.p(h), 3, GateOverride::Learned).map_err(core_err)?;
        weighted_sum(ctx, out, 4)
    })
}

pub fn grad_fusion() -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    let fusion = dst_core::selector::Fusion::new(&mut store, "fusion", 6, &mut rng).unwrap();
    let p: Vec<ParamId> = (0..3).map(|i| store.add(&format!("p{i}"), &[4, 6], Init::Xavier, &mut rng).unwrap()).collect();
    run_check("fusion", &mut store, 1e-5, None, |ctx| {
        let (scores, betas) =
            fusion.forward(ctx, [ctx.p(p[0]), ctx.p(p[1]), ctx.p(p[2])], PerspectiveMask::ALL).map_err(core_err)?;
        let a = weighted_sum(ctx, scores, 5)?;
        let b = weighted_sum(ctx, betas, 6)?;
        ctx.tape.add(a, b)
    })
}

fn core_err(e: dst_core::DstError) -> dst_numerics::NumericsError {
    match e {
        dst_core::DstError::Numerics(n) => n,
        other => panic!("{other}"),
    }
}

/// One generator loss (`ext` or `cls`) for the taxi slot at turn 3 of the
/// toy dialogue, with turns 1 and 2 as the refined history.
fn generator_loss(model: &DstModel, ctx: &Ctx<'_>, extractive: bool) -> dst_numerics::Result<Var> {
    let d = toy_dialogue();
    let b = batch(model, ctx, &d, 3);
    let refined = build_refined_context(&b, &[1, 2], model.config.context_max_len).unwrap();
    let hidden = model.generator.encode(ctx, &model.embeddings, &refined).map_err(core_err)?;
    let span = model.generator.extract_span(ctx, hidden, &refined, 2).map_err(core_err)?;
    let class = model.generator.classify_value(ctx, &model.embeddings, hidden, &refined, 2).map_err(core_err)?;
    let (ext, cls) = slot_losses(ctx, &model.schema, 2, "north", &refined, &span, &class).map_err(core_err)?;
    Ok(if extractive { ext.expect("north is a span of turn 1") } else { cls.expect("north is a candidate") })
}

pub fn grad_ext() -> GradResult {
    let mut model = tiny_model(tiny_config());
    let m = model.clone();
    run_check("L_ext", &mut model.params, 1e-5, Some(12), |ctx| generator_loss(&m, ctx, true))
}

pub fn grad_cls() -> GradResult {
    let mut model = tiny_model(tiny_config());
    let m = model.clone();
    run_check("L_cls", &mut model.params, 1e-5, Some(12), |ctx| generator_loss(&m, ctx, false))
}

/// Two-turn, two-slot dialogue for the composed check.
pub fn pipeline_fixture() -> (SlotSchema, Dialogue) {
    let schema = SlotSchema::new(vec![
        slot("hotel-area", &["north", "south"]),
        slot("taxi-area", &["north", "south"]),
    ])
    .unwrap();
    let d = Dialogue {
        id: "pipe".into(),
        turns: vec![
            Turn::new("hi .", "a hotel in the south please"),
            Turn::new("done .", "and a taxi to the same area"),
        ],
        states: vec![state(&["south", "none"]), state(&["south", "south"])],
        evidence: None,
    };
    (schema, d)
}

/// Update, selection, refined re-encoding and both generator losses, with
/// gradients reaching the fused scores.
pub fn grad_pipeline() -> GradResult {
    let (schema, d) = pipeline_fixture();
    let corpus = DialogueCorpus { dialogues: vec![d.clone()] };
    let vocab = Vocabulary::build(&schema, &corpus);
    let mut model = DstModel::new(tiny_config(), schema, vocab).unwrap();
    let m = model.clone();
    run_check("full pipeline", &mut model.params, 1e-4, Some(8), |ctx| {
        m.turn_loss(ctx, &d, 2).map(|(l, _)| l).map_err(core_err)
    })
}

pub fn gradient_suite() -> Vec<GradResult> {
    vec![grad_softmax(), grad_attention(), grad_mhsa(), grad_rgcn(), grad_fusion(), grad_ext(), grad_cls(), grad_pipeline()]
}

/// Independent enumeration of the four edge rules over all node pairs.
pub fn brute_force_edges(schema: &SlotSchema, t_count: usize, target: usize, latest: &[Option<usize>]) -> BTreeSet<Edge> {
    let mut nodes: Vec<NodeId> = (1..=t_count).map(NodeId::Dialogue).collect();
    nodes.extend((0..schema.len()).map(NodeId::SlotValue));
    let mut out = BTreeSet::new();
    for (i, &x) in nodes.iter().enumerate() {
        for &y in &nodes[i + 1..] {
            for (a, b) in [(x, y), (y, x)] {
                if a == NodeId::SlotValue(target) && b == NodeId::Dialogue(t_count) {
                    out.insert(Edge::new(1, a, b));
                }
                if let (NodeId::SlotValue(p), NodeId::SlotValue(q)) = (a, b) {
                    if p == target && q != target {
                        out.insert(Edge::new(2, a, b));
                    }
                    if p < q && schema.slot(p).domain == schema.slot(q).domain {
                        out.insert(Edge::new(4, a, b));
                    }
                }
                if let (NodeId::SlotValue(z), NodeId::Dialogue(u)) = (a, b) {
                    if z != target && latest[z] == Some(u) {
                        out.insert(Edge::new(3, a, b));
                    }
                }
            }
        }
    }
    out
}

pub struct GraphInstance {
    pub schema: SlotSchema,
    pub turns: usize,
    pub target: usize,
    pub latest: Vec<Option<usize>>,
}

pub fn random_graph_instance(rng: &mut ChaCha8Rng) -> GraphInstance {
    let j_count = rng.gen_range(1..=6);
    let domains = ["hotel", "taxi", "train"];
    let slots = (0..j_count)
        .map(|j| {
            let dom = domains[rng.gen_range(0..3)];
            slot(&format!("{dom}-s{j}"), &["v"])
        })
        .collect();
    let schema = SlotSchema::new(slots).unwrap();
    let turns = rng.gen_range(1..=6);
    let target = rng.gen_range(0..j_count);
    let latest = (0..j_count)
        .map(|_| if turns > 1 && rng.gen_bool(0.6) { Some(rng.gen_range(1..turns)) } else { None })
        .collect();
    GraphInstance { schema, turns, target, latest }
}

/// Number of the 200 random instances whose edge set matches the oracle.
pub fn graph_oracle(instances: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .filter(|_| {
            let g = random_graph_instance(&mut rng);
            let built = SelectionGraph::build(&g.schema, g.turns, g.target, &g.latest).unwrap();
            built.edges.len() == built.edge_set().len()
                && built.edge_set() == brute_force_edges(&g.schema, g.turns, g.target, &g.latest)
        })
        .count()
}

/// `(closed gate bit-identical, max |h − tanh(u)| with the gate open)` over
/// three hops on a random toy graph.
pub fn gate_identities() -> (bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let rgcn = dst_core::selector::GatedRgcn::new(&mut store, "rgcn", 6, &mut rng).unwrap();
    let schema = SlotSchema::new(vec![
        slot("hotel-area", &["north"]),
        slot("hotel-name", &["x"]),
        slot("taxi-area", &["north"]),
    ])
    .unwrap();
    let graph = SelectionGraph::build(&schema, 4, 0, &[None, Some(2), Some(3)]).unwrap();
    let h0 = random_weights(&[graph.num_nodes(), 6], 32);
    let ctx = Ctx::eval(&store);
    let t = &ctx.tape;
    let x = t.constant(h0.clone());
    let closed = t.value(rgcn.forward(&ctx, &graph, x, 3, GateOverride::Closed).unwrap());
    let identical = closed.data().iter().zip(h0.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut h = x;
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let u = t.value(rgcn.messages(&ctx, &graph, h).unwrap());
        let next = rgcn.hop(&ctx, &graph, h, GateOverride::Open).unwrap();
        for (a, b) in t.value(next).data().iter().zip(u.data()) {
            worst = worst.max((a - b.tanh()).abs());
        }
        h = next;
    }
    (identical, worst)
}

/// A dialogue whose history turns can be reordered.
pub fn long_dialogue(n: usize) -> Dialogue {
    let lines = [
        "i need a hotel in the north",
        "it should be cheap",
        "what about parking",
        "a taxi to the same area as the hotel",
        "make it expensive instead",
        "any place in the south",
    ];
    let turns = (0..n).map(|i| Turn::new("ok .", lines[i % lines.len()])).collect();
    let states = vec![state(&["none", "none", "none"]); n];
    Dialogue { id: format!("long{n}"), turns, states, evidence: None }
}

/// Scores of `d` at its last turn for `slot`.
pub fn eval_scores(model: &DstModel, d: &Dialogue, slot: usize, latest: &[Option<usize>], opts: &SelectOptions) -> (Vec<f64>, Vec<usize>) {
    let ctx = Ctx::eval(&model.params);
    let prev = DialogueState::empty(model.num_slots());
    let b = model.encode(&ctx, d, d.num_turns(), &prev).unwrap();
    let sel = model.selector.select_for_slot(&ctx, &b, &model.schema, slot, latest, opts).unwrap();
    (sel.result.scores, sel.result.selected)
}

pub struct SelectionInvariants {
    pub cardinality_ok: bool,
    pub max_permutation_err: f64,
    pub masked_recency_ok: bool,
}

pub fn selection_invariants() -> SelectionInvariants {
    let model = tiny_model(tiny_config());
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    let mut cardinality_ok = true;
    for t in 1..=6 {
        for k in 1..=4 {
            let d = long_dialogue(t);
            let opts = SelectOptions { k, hops: 2, ..SelectOptions::default() };
            let latest = vec![None; 3];
            let (_, selected) = eval_scores(&model, &d, 0, &latest, &opts);
            cardinality_ok &= selected.len() == k.min(t - 1);
            cardinality_ok &= selected.iter().all(|&u| (1..t).contains(&u));
        }
    }

    let mut max_err: f64 = 0.0;
    for _ in 0..10 {
        let t = 6;
        let d = long_dialogue(t);
        let latest: Vec<Option<usize>> = (0..3).map(|_| Some(rng.gen_range(1..t))).collect();
        let mut perm: Vec<usize> = (1..t).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        // Turn `u` of the original moves to position `new_of[u]`.
        let mut new_of = BTreeMap::new();
        for (i, &u) in perm.iter().enumerate() {
            new_of.insert(u, i + 1);
        }
        new_of.insert(t, t);
        let mut p = d.clone();
        for (&u, &v) in &new_of {
            p.turns[v - 1] = d.turns[u - 1].clone();
        }
        let p_latest: Vec<Option<usize>> = latest.iter().map(|l| l.map(|u| new_of[&u])).collect();
        let opts = SelectOptions { k: 2, hops: 2, ..SelectOptions::default() };
        for j in 0..3 {
            let (a, _) = eval_scores(&model, &d, j, &latest, &opts);
            let (b, _) = eval_scores(&model, &p, j, &p_latest, &opts);
            for u in 1..t {
                max_err = max_err.max((a[u - 1] - b[new_of[&u] - 1]).abs());
            }
        }
    }

    let mut masked_recency_ok = true;
    for t in 2..=6 {
        let opts = SelectOptions { k: 2, hops: 2, mask: PerspectiveMask::NONE, gate: GateOverride::Learned };
        let (scores, selected) = eval_scores(&model, &long_dialogue(t), 1, &[Some(1), None, None], &opts);
        let expected: Vec<usize> = (t.saturating_sub(2).max(1)..t).collect();
        masked_recency_ok &= selected == expected && scores.windows(2).all(|w| w[0] == w[1]);
    }
    SelectionInvariants { cardinality_ok, max_permutation_err: max_err, masked_recency_ok }
}
