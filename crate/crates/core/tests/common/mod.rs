//! Shared helpers for integration tests: synthetic feature/report pairs and
//! small model configurations.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use r2gen_mamba::features::FeatureSequence;
use r2gen_mamba::model::{Model, ModelConfig, SampleInput};
use r2gen_mamba::scalar::Scalar;
use r2gen_mamba::tensor::Tensor;
use r2gen_mamba::text::{tokenize, Vocabulary};
use r2gen_mamba::train::{TrainData, TrainSample};

pub const WORDS: [&str; 12] = [
    "lungs", "clear", "heart", "normal", "no", "acute", "effusion", "stable", "severe",
    "opacity", "left", "right",
];

pub fn tiny_model_config(d: usize, vocab_size: usize, feat_dim: usize) -> ModelConfig {
    ModelConfig {
        d,
        d_state: 4,
        d_conv: 2,
        expand: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        heads: 2,
        d_ff: 4 * d,
        dropout: 0.1,
        vocab_size,
        max_len: 16,
        feat_dim,
        patch: 2,
    }
}

/// Deterministic synthetic reports: `n` distinct word sequences.
pub fn synthetic_reports(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(3..=6);
        let mut words: Vec<&str> =
            (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        // a unique anchor word keeps every report distinct
        words[0] = WORDS[i % WORDS.len()];
        words.push(".");
        reports.push(words.join(" "));
    }
    reports
}

pub fn random_features<T: Scalar>(
    rng: &mut ChaCha8Rng,
    s: usize,
    width: usize,
) -> FeatureSequence<T> {
    let data: Vec<T> =
        (0..s * width).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect();
    FeatureSequence::new(Tensor::from_vec(data, &[s, width]).unwrap()).unwrap()
}

/// `n` feature/report training pairs plus a validation split that reuses
/// the same pairs (memorization setting).
pub fn synthetic_dataset<T: Scalar>(
    seed: u64,
    n: usize,
    feat_dim: usize,
    max_len: usize,
) -> (Vocabulary, TrainData<T>) {
    let reports = synthetic_reports(seed, n);
    let vocab = Vocabulary::build(reports.iter().map(String::as_str), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let build = |rng: &mut ChaCha8Rng| -> Vec<TrainSample<T>> {
        reports
            .iter()
            .enumerate()
            .map(|(i, report)| TrainSample {
                id: format!("s{i}"),
                input: SampleInput::Features(random_features(rng, 4, feat_dim)),
                target: vocab.encode_report(report, max_len),
                reference: tokenize(report),
            })
            .collect()
    };
    let train = build(&mut rng);
    // identical inputs for validation: regenerate the same stream
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let val = build(&mut rng);
    (vocab, TrainData { train, val })
}

pub fn build_model<T: Scalar>(cfg: ModelConfig, seed: u64) -> Model<T> {
    Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}
