use kgcrs::autograd::Tape;
use kgcrs::config::ModelConfig;
use kgcrs::gradcheck;
use kgcrs::model::{total_loss, Decoder, Objective, PromptTask, Segment};
use kgcrs::params::{Group, ParamStore};
use kgcrs::reference;
use kgcrs::train::Pipeline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pipeline() -> Pipeline {
    gradcheck::toy_pipeline(20, 2024).unwrap().0
}

fn example_with(p: &Pipeline, mentions: usize) -> usize {
    p.train.iter().position(|e| e.mentioned.len() == mentions).expect("fixture has such an example")
}

#[test]
fn prompt_segments_for_three_mentions() {
    let p = pipeline();
    let ex = &p.train[example_with(&p, 3)];
    let mut t = Tape::new();
    let gs = p.model.graph_state(&mut t, &p.store);
    let k = p.model.knowledge(&mut t, &p.store, &gs, ex).unwrap();
    let b = p.model.prompts(&mut t, &p.store, &k, PromptTask::Rec, true);
    let lens: Vec<usize> = [Segment::Rgcn, Segment::Tree, Segment::User, Segment::Soft]
        .iter()
        .map(|&s| b.segment_len(&t, s))
        .collect();
    assert_eq!(lens, vec![3, 4, 1, 10]);
    assert_eq!(b.len(&t), 18);
    let order: Vec<Segment> = b.segments.iter().map(|(s, _)| *s).collect();
    assert_eq!(order, vec![Segment::Rgcn, Segment::Tree, Segment::User, Segment::Soft]);
    for seg in [Segment::Rgcn, Segment::Tree, Segment::User, Segment::Soft] {
        assert_eq!(b.without(seg).len(&t), 18 - b.segment_len(&t, seg));
    }
    let cat = b.concat(&mut t).unwrap();
    assert_eq!(t.shape(cat).1, p.model.decoder.width);
}

#[test]
fn prompts_without_mentions() {
    let p = pipeline();
    let mut ex = p.train[0].clone();
    ex.mentioned.clear();
    let ex = &ex;
    let mut t = Tape::new();
    let gs = p.model.graph_state(&mut t, &p.store);
    let k = p.model.knowledge(&mut t, &p.store, &gs, ex).unwrap();
    let b = p.model.prompts(&mut t, &p.store, &k, PromptTask::Rec, true);
    assert_eq!(b.segment_len(&t, Segment::Rgcn), 0);
    assert_eq!(b.segment_len(&t, Segment::Tree), 1);
    assert_eq!(b.len(&t), 12);
    let no_soft = p.model.prompts(&mut t, &p.store, &k, PromptTask::Rec, false);
    assert_eq!(no_soft.len(&t), 2);
}

#[test]
fn weighted_total_loss() {
    assert!((total_loss(1.0, 2.0, 3.0, 0.008, 0.01).unwrap() - 1.046).abs() < 1e-12);
    assert_eq!(total_loss(0.7, 2.0, 3.0, 0.0, 0.0).unwrap(), 0.7);
    assert!(total_loss(1.0, 1.0, 1.0, -0.1, 0.0).is_err());
}

#[test]
fn zeroed_embeddings_give_uniform_next_token() {
    let cfg = ModelConfig {
        decoder_width: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        decoder_ffn: 16,
        decoder_max_len: 16,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let dec = Decoder::register(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg, 16);
    store.value_mut(dec.param_ids()[0]).fill(0.0);
    let ids = [3, 5, 7, 9, 2];
    let mut t = Tape::new();
    let l = dec.lm_nll(&mut t, &store, &ids, 0, 1);
    assert!((t.scalar(l) - 6.0 * 16f64.ln()).abs() < 1e-9);
}

#[test]
fn one_token_generation_and_determinism() {
    let p = pipeline();
    let ex = &p.train[0];
    let g = p.model.generate(&p.store, ex, 1, true).unwrap();
    assert_eq!(g.tokens.len(), 1);
    assert!(p.model.generate(&p.store, ex, 0, true).is_err());
    assert_eq!(p.model.generate(&p.store, ex, 6, true).unwrap(), p.model.generate(&p.store, ex, 6, true).unwrap());
    let r = p.model.recommend(&p.store, ex, None).unwrap();
    assert_eq!(r, p.model.recommend(&p.store, ex, None).unwrap());
}

#[test]
fn recommendation_scores_are_softmax_of_logits() {
    let p = pipeline();
    let ex = &p.train[example_with(&p, 3)];
    let resp = ex.response_ids.clone();
    let out = p.model.recommend(&p.store, ex, Some(&resp)).unwrap();
    let mut t = Tape::new();
    let gs = p.model.graph_state(&mut t, &p.store);
    let k = p.model.knowledge(&mut t, &p.store, &gs, ex).unwrap();
    let logits = p.model.rec_logits(&mut t, &p.store, &gs, ex, &k, Some(&resp));
    let want = reference::softmax_rows(t.value(logits));
    assert_eq!(out.scores.len(), p.model.num_items());
    for (a, b) in out.scores.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((out.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn end_to_end_gradient_and_frozen_backbone() {
    let (r, plm_zero) = gradcheck::end_to_end(5).unwrap();
    assert!(r.rel_error < 1e-3, "{r:?}");
    assert!(plm_zero);
}

fn full_rec_loss(p: &Pipeline) -> f64 {
    let refs: Vec<_> = p.train.iter().filter(|e| !e.target_cols.is_empty()).collect();
    let mut t = Tape::new();
    let (l, _) = p.model.batch_loss(&mut t, &p.store, &refs, Objective::Rec).unwrap();
    t.scalar(l)
}

#[test]
fn training_lowers_loss_and_keeps_backbone() {
    let mut p = pipeline();
    p.cfg.train.stage2_max_steps = 60;
    let before = full_rec_loss(&p);
    let plm = p.plm_hash();
    let prompts_before = p.store.group_hash(Group::Prompt);
    let s = p.train().unwrap();
    assert!(full_rec_loss(&p) < before);
    assert_eq!(s.plm_hash_before, plm);
    assert_eq!(s.plm_hash_after, plm);
    assert_ne!(s.prompt_hash_stage2_start, prompts_before);
    let start = p.log.iter().find(|l| l.contains("stage2_start")).expect("stage 2 start is logged");
    assert!(start.contains(&s.prompt_hash_stage2_start));
    assert_eq!(s.stage2.steps, 60);
}

#[test]
fn empty_batch_is_an_error() {
    let p = pipeline();
    let mut t = Tape::new();
    assert!(p.model.batch_loss(&mut t, &p.store, &[], Objective::Rec).is_err());
}
