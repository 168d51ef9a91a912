//! Shared fixtures for the encoder-scaling benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossrec_core::backbone::BackboneConfig;
use crossrec_core::corpus::{Corpus, Domain};
use crossrec_core::disentangle::{OpdConfig, Stage1Batch, Stage1Model, Stage1Wiring};
use crossrec_core::graph::Graph;
use crossrec_core::params::Adam;
use crossrec_core::synth::{synthesize, SynthSpec};

pub fn bench_corpus(seq_len: usize) -> Corpus {
    synthesize(&SynthSpec {
        n_users: 16,
        n_items_per_domain: 40,
        seq_len_range: (seq_len, seq_len + 2),
        seq_len_range_y: None,
        signal_mix: (0.4, 0.4, 0.2),
        seed: 11,
    })
    .expect("valid spec")
    .corpus
}

pub fn bench_model(corpus: &Corpus, l_max: usize, wiring: Stage1Wiring) -> Stage1Model {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bb = BackboneConfig::new(32, 2, 2, l_max);
    bb.d_ff = 64;
    Stage1Model::init(bb, corpus.vocab.size(), wiring, &mut rng)
}

/// Forward-encode every user's domain-X training sequence once.
pub fn encode_all(model: &Stage1Model, corpus: &Corpus) -> f64 {
    let mut acc = 0.0;
    for u in &corpus.users {
        let mut g = Graph::new();
        let emb = g.param(&model.store, crossrec_core::disentangle::EMB);
        let seq = u.train(Domain::X);
        let (ids, mask) =
            crossrec_core::corpus::window_fit(seq, model.bb.l_max, crossrec_core::corpus::PAD);
        let enc = crossrec_core::backbone::encode(
            &mut g,
            &model.store,
            crossrec_core::disentangle::SPE,
            emb,
            &ids,
            &mask,
            &model.bb,
        );
        acc += g.value(enc.pooled)[[0, 0]];
    }
    acc
}

/// One Stage-1 epoch over a fixed batch split.
pub fn one_epoch(model: &mut Stage1Model, corpus: &Corpus) {
    let cfg = OpdConfig {
        epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batches: Vec<Stage1Batch> = corpus
        .users
        .chunks(8)
        .map(|c| Stage1Batch {
            users: c.iter().collect(),
        })
        .collect();
    let mut opt = Adam::new(cfg.learning_rate);
    crossrec_core::disentangle::stage1_epoch(
        model,
        corpus,
        Domain::X,
        &batches,
        &cfg,
        &mut opt,
        0,
        &mut rng,
    )
    .expect("epoch runs");
}

/// Wiring that exercises only the specific encoder (one encoder).
pub fn single_encoder_wiring() -> Stage1Wiring {
    Stage1Wiring {
        train_com: false,
        use_cross: false,
        use_align: false,
        use_sep: false,
        ..Stage1Wiring::default()
    }
}
