use knowfuse::encoder::{Dropout, EncoderConfig, ModelState};
use knowfuse::lexkb::{LexicalKB, RelationKind};
use knowfuse::numcore::check_gradients;
use knowfuse::prior::{PriorMatrix, PriorMode};
use knowfuse::textio::{encode_pair, TokenizedPair, Vocab};
use knowfuse::Model;

fn kb() -> LexicalKB {
    let mut kb = LexicalKB::empty();
    kb.insert("hot", "cold", RelationKind::Antonym).unwrap();
    kb.insert("big", "large", RelationKind::Synonym).unwrap();
    kb.insert("soup", "food", RelationKind::Hypernym).unwrap();
    kb
}

fn vocab() -> Vocab {
    let words = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "the", "soup", "is", "hot", "cold", "big", "large", "food"];
    Vocab::from_tokens(words.iter().map(|s| s.to_string()).collect()).unwrap()
}

fn small_config(mode: PriorMode) -> EncoderConfig {
    EncoderConfig {
        d_h: 8,
        d_k: 4,
        d_v: 4,
        n_heads: 2,
        n_layers: 2,
        d_ff: 6,
        max_a: 5,
        max_b: 5,
        gamma: 1.5,
        prior_mode: mode,
        kappa: 1.0,
        dropout_rate: 0.2,
        seed: 3,
        ..EncoderConfig::default()
    }
}

fn batch(vocab: &Vocab) -> Vec<TokenizedPair> {
    let texts = [
        ("the soup is hot", "the food is cold", 0),
        ("big soup", "the large food is hot", 1),
        ("hot", "cold", 0),
    ];
    texts
        .iter()
        .map(|&(a, b, y)| {
            let mut p = encode_pair(vocab, a, b, 5, 5).unwrap();
            p.label = Some(y);
            p
        })
        .collect()
}

fn gradcheck(mode: PriorMode, dropout: Dropout) {
    let mut model = Model::new(small_config(mode), vocab()).unwrap();
    let kb = kb();
    let batch = batch(&model.vocab);
    let (_, grads) = model.loss_and_grads(&batch, &kb, dropout).unwrap();
    model.params.set_grads(grads).unwrap();
    let report = check_gradients(|p| model.batch_loss_with(p, &batch, &kb, dropout), &model.params, 1e-5, 1e-4).unwrap();
    for t in &report.tensors {
        // roundoff of the central difference is ~1e-11 at this loss scale
        let ok = t.max_rel_err < 1e-4 || (t.analytic - t.numeric).abs() < 1e-10;
        assert!(ok, "{t:?}");
    }
}

#[test]
fn perturbation_cache_matches_full_loss_bitwise() {
    let model = Model::new(small_config(PriorMode::Boost), vocab()).unwrap();
    let kb = kb();
    let batch = batch(&model.vocab);
    let dropout = Dropout::On { seed: 4 };
    let cache = model.perturbation_cache(&batch, &kb, dropout).unwrap();
    let base = model.batch_loss(&batch, &kb, dropout).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        assert_eq!(cache.loss(&model.params, id).unwrap().to_bits(), base.to_bits());
        let mut p = model.params.clone();
        for v in p.value_mut(id).data_mut() {
            *v += 0.01;
        }
        let full = model.batch_loss_with(&p, &batch, &kb, dropout).unwrap();
        let cached = cache.loss(&p, id).unwrap();
        assert_eq!(cached.to_bits(), full.to_bits(), "{}", model.params.name(id));
    }
}

#[test]
fn model_gradients_boost_prior_with_dropout() {
    gradcheck(PriorMode::Boost, Dropout::On { seed: 9 });
}

#[test]
fn model_gradients_raw_prior_without_dropout() {
    gradcheck(PriorMode::Raw, Dropout::Off);
}

#[test]
fn loss_is_deterministic_and_permutation_invariant() {
    let model = Model::new(small_config(PriorMode::Boost), vocab()).unwrap();
    let kb = kb();
    let mut b = batch(&model.vocab);
    let (l1, g1) = model.loss_and_grads(&b, &kb, Dropout::On { seed: 4 }).unwrap();
    let (l2, g2) = model.loss_and_grads(&b, &kb, Dropout::On { seed: 4 }).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
    let base = model.batch_loss(&b, &kb, Dropout::Off).unwrap();
    b.reverse();
    let permuted = model.batch_loss(&b, &kb, Dropout::Off).unwrap();
    assert!((base - permuted).abs() < 1e-12);
}

#[test]
fn zero_gamma_ignores_the_knowledge_base() {
    let cfg = EncoderConfig { gamma: 0.0, ..small_config(PriorMode::Raw) };
    let model = Model::new(cfg, vocab()).unwrap();
    for pair in batch(&model.vocab) {
        let with = model.forward(&pair, &kb(), Dropout::Off).unwrap();
        let without = model.forward(&pair, &LexicalKB::empty(), Dropout::Off).unwrap();
        assert!(with.hidden().max_abs_diff(without.hidden()).unwrap() < 1e-12);
        assert_eq!(with.probs, without.probs);
    }
}

#[test]
fn unit_prior_reduces_to_neutral_dual_path() {
    // Boost with κ = 0 writes 1 on the cross blocks as well
    let cfg = EncoderConfig { kappa: 0.0, ..small_config(PriorMode::Boost) };
    let model = Model::new(cfg, vocab()).unwrap();
    for pair in batch(&model.vocab) {
        let fwd = model.forward(&pair, &kb(), Dropout::Off).unwrap();
        assert!(fwd.prior.k.data().iter().all(|&v| v == 1.0));
        let neutral = model.encode(&fwd.h0, &PriorMatrix::neutral(pair.len())).unwrap();
        assert!(fwd.hidden().max_abs_diff(&neutral).unwrap() < 1e-12);
        for block in &fwd.blocks {
            for head in &block.attn.heads {
                assert!(head.dual.o_knw.max_abs_diff(&head.dual.o_sem).unwrap() < 1e-12);
            }
        }
    }
}

#[test]
fn raw_mode_with_empty_kb_is_not_a_unit_prior() {
    let cfg = EncoderConfig { gamma: 0.0, ..small_config(PriorMode::Raw) };
    let model = Model::new(cfg, vocab()).unwrap();
    let pair = &batch(&model.vocab)[0];
    let fwd = model.forward(pair, &LexicalKB::empty(), Dropout::Off).unwrap();
    let layout = pair.layout;
    let v = fwd.prior.k[(layout.pos_a(0), layout.pos_b(0))];
    assert!(v > 0.0 && v < 1.0);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = Model::new(small_config(PriorMode::Boost), vocab()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.to_checkpoint().save(&path).unwrap();
    let back = ModelState::<f64>::from_checkpoint(&knowfuse::encoder::Checkpoint::load(&path).unwrap()).unwrap();
    let kb = kb();
    let b = batch(&model.vocab);
    assert_eq!(
        model.batch_loss(&b, &kb, Dropout::Off).unwrap().to_bits(),
        back.batch_loss(&b, &kb, Dropout::Off).unwrap().to_bits()
    );
}

#[test]
fn generic_over_single_precision() {
    let model = ModelState::<f32>::new(small_config(PriorMode::Boost), vocab()).unwrap();
    let loss = model.batch_loss(&batch(&model.vocab), &kb(), Dropout::Off).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
}
