mod common;

use std::collections::BTreeMap;

use common::*;
use dst_core::corpus::{Dialogue, SlotSchema, Turn};
use dst_core::encoder::dialogue_tokens;
use dst_core::generator::{build_refined_context, generate_value, slot_losses, ClassOutput, Method, SpanOutput};
use dst_core::vocab;
use dst_numerics::nn::sinusoidal_positions;
use dst_numerics::{Ctx, Tensor};

fn six_turns() -> Dialogue {
    let mut d = long_dialogue(6);
    d.id = "six".into();
    d
}

#[test]
fn refined_context_orders_turns_and_places_indicators() {
    let mut cfg = tiny_config();
    cfg.n_layers = 0;
    let model = tiny_model(cfg);
    let d = six_turns();
    let ctx = Ctx::eval(&model.params);
    let b = batch(&model, &ctx, &d, 6);
    let r = build_refined_context(&b, &[5, 2], 200).unwrap();
    assert_eq!(r.turns, vec![2, 5, 6]);
    assert_eq!(r.indicator_pos.len(), 3);
    assert!(r.dropped.is_empty());
    for &p in &r.indicator_pos {
        assert_eq!(r.ids[p], vocab::TURN);
    }
    // With no transformer layers each indicator row reads back the
    // indicator token's embedding plus its position.
    let hidden = ctx.tape.value(model.generator.encode(&ctx, &model.embeddings, &r).unwrap());
    let table = model.params.tensor(model.embeddings.table);
    let pos = sinusoidal_positions(r.len(), 8);
    for &p in &r.indicator_pos {
        let expect: Vec<f64> =
            table.row_slice(vocab::TURN).iter().zip(pos.row_slice(p)).map(|(e, q)| e * 8f64.sqrt() + q).collect();
        for (a, b) in hidden.row_slice(p).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(r.span_text(r.turn_ranges[0].start, r.turn_ranges[0].end - 1), dialogue_tokens(&d.turns[1]).join(" "));
}

#[test]
fn overflow_drops_oldest_selected_turn() {
    let model = tiny_model(tiny_config());
    let d = six_turns();
    let ctx = Ctx::eval(&model.params);
    let b = batch(&model, &ctx, &d, 6);
    let full = build_refined_context(&b, &[1, 3, 5], 500).unwrap();
    let shorter = build_refined_context(&b, &[1, 3, 5], full.len() - 1).unwrap();
    assert_eq!(shorter.dropped, vec![1]);
    assert_eq!(shorter.turns, vec![3, 5, 6]);
    assert!(build_refined_context(&b, &[6], 500).is_err());
}

#[test]
fn distributions_sum_to_one() {
    let model = tiny_model(tiny_config());
    let d = toy_dialogue();
    let ctx = Ctx::eval(&model.params);
    let b = batch(&model, &ctx, &d, 3);
    let r = build_refined_context(&b, &[1, 2], 200).unwrap();
    let h = model.generator.encode(&ctx, &model.embeddings, &r).unwrap();
    for j in 0..3 {
        let span = model.generator.extract_span(&ctx, h, &r, j).unwrap();
        let class = model.generator.classify_value(&ctx, &model.embeddings, h, &r, j).unwrap();
        assert!((span.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((span.q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((class.y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((class.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(class.probs.len(), model.schema.candidates(j).len());
    }
}

#[test]
fn single_position_and_single_candidate() {
    let schema = SlotSchema::new(vec![slot("hotel-area", &[])]).unwrap();
    assert_eq!(schema.candidates(0), ["none"]);
    let corpus = dst_core::corpus::DialogueCorpus::default();
    let vocab = dst_core::vocab::Vocabulary::build(&schema, &corpus);
    let model = dst_core::DstModel::new(tiny_config(), schema, vocab).unwrap();
    let d = Dialogue { id: "x".into(), turns: vec![Turn::new("", "")], states: vec![state(&["none"])], evidence: None };
    let ctx = Ctx::eval(&model.params);
    let b = batch(&model, &ctx, &d, 1);
    let mut r = build_refined_context(&b, &[], 200).unwrap();
    assert_eq!(r.dialogue_tokens, [";", "[SEP]"]);
    // Keep only the first dialogue position.
    r.dialogue_pos.truncate(1);
    r.dialogue_tokens.truncate(1);
    r.turn_ranges = vec![0..1];
    let h = model.generator.encode(&ctx, &model.embeddings, &r).unwrap();
    let span = model.generator.extract_span(&ctx, h, &r, 0).unwrap();
    assert_eq!((span.p.clone(), span.q.clone(), span.span), (vec![1.0], vec![1.0], (0, 0)));
    let class = model.generator.classify_value(&ctx, &model.embeddings, h, &r, 0).unwrap();
    assert_eq!(class.probs, vec![1.0]);
    assert_eq!(class.y, vec![1.0]);
}

fn fake_outputs(ctx: &Ctx<'_>, n: usize, span: (usize, usize), n_cls: usize, cls: usize) -> (SpanOutput, ClassOutput) {
    let t = &ctx.tape;
    let uniform = |m: usize| t.constant(Tensor::full(&[m, 1], -(m as f64).ln()));
    let mut probs = vec![0.0; n_cls];
    probs[cls] = 1.0;
    (
        SpanOutput { log_p: uniform(n), log_q: uniform(n), p: vec![1.0 / n as f64; n], q: vec![1.0 / n as f64; n], span },
        ClassOutput { y: vec![1.0], log_probs: uniform(n_cls), probs },
    )
}

#[test]
fn fallback_rules() {
    let schema = toy_schema();
    let model = tiny_model(tiny_config());
    let mut d = toy_dialogue();
    d.turns[2] = Turn::new("ok", "the guesthous in the north");
    let ctx = Ctx::eval(&model.params);
    let b = batch(&model, &ctx, &d, 3);
    let r = build_refined_context(&b, &[], 200).unwrap();
    let pos = |w: &str| r.dialogue_tokens.iter().position(|x| x == w).unwrap();

    let (span, class) = fake_outputs(&ctx, r.dialogue_tokens.len(), (pos("north"), pos("north")), 4, 2);
    let v = generate_value(&schema, 0, &r, &span, &class);
    assert_eq!((v.method, v.value.as_str(), v.classified.as_str()), (Method::Extractive, "north", "south"));

    let (span, class) = fake_outputs(&ctx, r.dialogue_tokens.len(), (pos("guesthous"), pos("guesthous")), 4, 2);
    let v = generate_value(&schema, 0, &r, &span, &class);
    assert_eq!((v.method, v.value.as_str()), (Method::Classification, "south"));

    let (span, class) = fake_outputs(&ctx, r.dialogue_tokens.len(), (pos("north"), pos("guesthous")), 4, 3);
    let v = generate_value(&schema, 0, &r, &span, &class);
    assert_eq!((v.method, v.value.as_str(), v.span), (Method::Classification, "centre", None));
}

#[test]
fn loss_values() {
    let schema = toy_schema();
    let model = tiny_model(tiny_config());
    let d = toy_dialogue();
    let ctx = Ctx::eval(&model.params);
    let b = batch(&model, &ctx, &d, 1);
    let r = build_refined_context(&b, &[], 200).unwrap();
    let n = r.dialogue_tokens.len();
    let (span, class) = fake_outputs(&ctx, n, (0, 0), 4, 0);
    let (ext, cls) = slot_losses(&ctx, &schema, 0, "north", &r, &span, &class).unwrap();
    let t = &ctx.tape;
    assert!((t.value(ext.unwrap()).item() - 2.0 * (n as f64).ln()).abs() < 1e-12);
    assert!((t.value(cls.unwrap()).item() - 4f64.ln()).abs() < 1e-12);

    let (s, e) = r.gold_span("north").unwrap();
    let mut lp = vec![-1e9; n];
    lp[s] = 0.0;
    let mut lq = vec![-1e9; n];
    lq[e] = 0.0;
    let onehot = SpanOutput {
        log_p: t.constant(Tensor::matrix(n, 1, lp).unwrap()),
        log_q: t.constant(Tensor::matrix(n, 1, lq).unwrap()),
        p: vec![],
        q: vec![],
        span: (s, e),
    };
    let mut lc = vec![-1e9; 4];
    lc[1] = 0.0;
    let sure = ClassOutput { y: vec![1.0], log_probs: t.constant(Tensor::matrix(4, 1, lc).unwrap()), probs: vec![] };
    let (ext, cls) = slot_losses(&ctx, &schema, 0, "north", &r, &onehot, &sure).unwrap();
    assert!(t.value(ext.unwrap()).item().abs() < 1e-6);
    assert!(t.value(cls.unwrap()).item().abs() < 1e-6);

    // Not a span and not a candidate.
    let (span, class) = fake_outputs(&ctx, n, (0, 0), 4, 0);
    assert!(slot_losses(&ctx, &schema, 0, "west", &r, &span, &class).unwrap_err().is_validation());
    let (ext, cls) = slot_losses(&ctx, &schema, 2, "centre", &r, &span, &class).unwrap();
    assert!(ext.is_none() && cls.is_some());
}

#[test]
fn generator_gradients() {
    for r in [grad_ext(), grad_cls(), grad_pipeline()] {
        assert!(r.passed(), "{} {}", r.name, r.max_rel_err);
    }
}

#[test]
fn unselected_turns_do_not_reach_the_generator() {
    let model = tiny_model(tiny_config());
    let d = six_turns();
    let mut e = d.clone();
    e.turns[2] = Turn::new("a totally", "different third turn");
    let run = |dl: &Dialogue| {
        let ctx = Ctx::eval(&model.params);
        let b = batch(&model, &ctx, dl, 6);
        let r = build_refined_context(&b, &[2, 5], 300).unwrap();
        let h = model.generator.encode(&ctx, &model.embeddings, &r).unwrap();
        let span = model.generator.extract_span(&ctx, h, &r, 0).unwrap();
        let class = model.generator.classify_value(&ctx, &model.embeddings, h, &r, 0).unwrap();
        (ctx.tape.value(h), span.p, class.probs)
    };
    assert_eq!(run(&d), run(&e));
}

#[test]
fn unselected_scores_receive_no_generator_gradient() {
    let model = tiny_model(tiny_config());
    let d = six_turns();
    let ctx = Ctx::eval(&model.params);
    let t = &ctx.tape;
    let b = batch(&model, &ctx, &d, 6);
    let r = build_refined_context(&b, &[2, 5], 300).unwrap();
    let scores = t.leaf(Tensor::matrix(5, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(), true);
    let rows: Vec<_> = (0..5).map(|i| t.row(scores, i).unwrap()).collect();
    let marks: BTreeMap<usize, _> = [(2, rows[1]), (5, rows[4])].into_iter().collect();
    let h = model.generator.encode(&ctx, &model.embeddings, &r).unwrap();
    let marked = model.generator.mark_selected(&ctx, h, &r, &marks, 1.0).unwrap();
    let (hv, mv) = (t.value(h), t.value(marked));
    for row in 0..r.len() {
        let turn = r.indicator_pos.iter().rposition(|&p| p <= row).map(|i| r.turns[i]);
        let factor = match turn {
            Some(2) => 1.0 + 0.2f64.tanh(),
            Some(5) => 1.0 + 0.5f64.tanh(),
            _ => 1.0,
        };
        for (a, b) in mv.row_slice(row).iter().zip(hv.row_slice(row)) {
            assert!((a - b * factor).abs() < 1e-12, "row {row}");
        }
    }
    let span = model.generator.extract_span(&ctx, marked, &r, 0).unwrap();
    let class = model.generator.classify_value(&ctx, &model.embeddings, marked, &r, 0).unwrap();
    let (ext, cls) = slot_losses(&ctx, &model.schema, 0, "north", &r, &span, &class).unwrap();
    let terms: Vec<_> = ext.into_iter().chain(cls).collect();
    t.backward(t.sum(t.concat_rows(&terms).unwrap()).unwrap()).unwrap();
    let g = t.grad(scores).unwrap();
    for (i, v) in g.data().iter().enumerate() {
        let selected = i == 1 || i == 4;
        assert_eq!(*v != 0.0, selected, "turn {}", i + 1);
    }
}

#[test]
fn copy_path_moves_mass_to_a_previous_value_of_another_slot() {
    // Turn 3 of the toy dialogue: the taxi slot can copy hotel-area = north.
    let logits = |gain: f64| {
        let mut model = tiny_model(tiny_config());
        let w = model.generator.copy.weight;
        let shape = model.params.tensor(w).shape().to_vec();
        model.params.set(w, Tensor::zeros(&shape)).unwrap();
        model.params.set(model.generator.copy_gain, Tensor::full(&[1, 1], gain)).unwrap();
        let d = toy_dialogue();
        let ctx = Ctx::eval(&model.params);
        let b = batch(&model, &ctx, &d, 3);
        let r = build_refined_context(&b, &[1, 2], 200).unwrap();
        let h = model.generator.encode(&ctx, &model.embeddings, &r).unwrap();
        let class = model.generator.classify_value(&ctx, &model.embeddings, h, &r, 2).unwrap();
        ctx.tape.value(class.log_probs).into_vec()
    };
    let (base, boosted) = (logits(0.0), logits(6.0));
    let shift: Vec<f64> = boosted.iter().zip(&base).map(|(b, a)| b - a - (boosted[0] - base[0])).collect();
    // Candidates [none, north, south, centre]; attention is uniform over
    // [CLS], hotel-area and hotel-pricerange, so north gains 6 / 3.
    for (s, want) in shift.iter().zip([0.0, 2.0, 0.0, 0.0]) {
        assert!((s - want).abs() < 1e-9, "{shift:?}");
    }
}
