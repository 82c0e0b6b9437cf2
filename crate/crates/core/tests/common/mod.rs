#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reportgen::model::{Model, ModelConfig};
use reportgen::numerics::Tensor;
use reportgen::synthdata::{generate_corpus, Corpus, CorpusConfig};
use reportgen::tokenizer::Vocabulary;

pub struct Tiny {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub model: Model,
}

pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        policy_layers: 1,
        value_layers: 1,
        max_len: 96,
        ffn_mult: 2,
        ..ModelConfig::desk(vocab, 4, 16)
    }
}

/// Small corpus and an untrained model with a random value head.
pub fn tiny(seed: u64) -> Tiny {
    let corpus = generate_corpus(&CorpusConfig {
        n_train: 24,
        n_val: 8,
        n_test: 8,
        ..CorpusConfig::default()
    })
    .unwrap();
    let vocab = Vocabulary::from_reports(corpus.train.iter().map(|s| &s.report));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(tiny_config(vocab.len()), &mut rng).unwrap();
    model.init_value_from_policy();
    let head = model.value.as_ref().unwrap().head;
    *model.store.get_mut(head) = Tensor::randn(&[16, 1], 0.5, &mut rng);
    Tiny {
        corpus,
        vocab,
        model,
    }
}
