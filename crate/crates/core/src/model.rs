//! End-to-end model assembly: visual projection -> encoder -> decoder, the
//! teacher-forced likelihood loss, and beam-search generation.

use rand_chacha::ChaCha8Rng;

use crate::decoder::{DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureSequence, GrayImage};
use crate::nn::{Linear, Mode, ParamRef};
use crate::scalar::Scalar;
use crate::ssm::{EncoderConfig, MambaEncoder};
use crate::tensor::Tensor;
use crate::text::{TokenSequence, Vocabulary, BOS, EOS, PAD};

/// Every architecture hyperparameter in one place.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Width of raw input features (1 for the toy patch extractor).
    pub feat_dim: usize,
    pub patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 512,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            n_enc_layers: 1,
            n_dec_layers: 3,
            heads: 8,
            d_ff: 2048,
            dropout: 0.1,
            vocab_size: 0,
            max_len: 60,
            feat_dim: 512,
            patch: 16,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            n_layers: self.n_enc_layers,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            d: self.d,
            n_layers: self.n_dec_layers,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.decoder_config().validate()?;
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be positive".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch must be positive".into()));
        }
        Ok(())
    }
}

/// One sample's visual input.
pub enum SampleInput<T: Scalar> {
    Features(FeatureSequence<T>),
    Image(GrayImage<T>),
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    /// `feat_dim -> d` projection; the trainable stand-in for the visual
    /// extractor, so it gets the visual-group learning rate.
    pub visual_proj: Linear<T>,
    pub encoder: MambaEncoder<T>,
    pub decoder: DecoderParams<T>,
    params: Vec<ParamRef<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let visual_proj = Linear::init("visual.proj", cfg.feat_dim, cfg.d, true, rng);
        let encoder = MambaEncoder::init(cfg.encoder_config(), "encoder", rng)?;
        let decoder = DecoderParams::init(cfg.decoder_config(), "decoder", rng)?;
        let mut params = Vec::new();
        visual_proj.collect(&mut params);
        encoder.collect(&mut params);
        decoder.collect(&mut params);
        Ok(Model { cfg, visual_proj, encoder, decoder, params })
    }

    /// Ordered parameter registry; the order is the checkpoint order.
    pub fn params(&self) -> &[ParamRef<T>] {
        &self.params
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.get().zero_grad();
        }
    }

    /// Encoder memory for one sample.
    pub fn memory(&self, input: &SampleInput<T>) -> Result<Tensor<T>> {
        let projected = match input {
            SampleInput::Features(fs) => {
                if fs.width() != self.cfg.feat_dim {
                    return Err(Error::Config(format!(
                        "feature width {} does not match configured feat_dim {}",
                        fs.width(),
                        self.cfg.feat_dim
                    )));
                }
                self.visual_proj.forward(fs.values())?
            }
            SampleInput::Image(img) => {
                extract_features(img, self.cfg.patch, &self.visual_proj)?.values().clone()
            }
        };
        self.encoder.encode(&projected)
    }

    /// Teacher-forced mean NLL of a canonical target sequence given one
    /// sample's memory. PAD targets are masked out of the mean.
    pub fn teacher_forced_loss(
        &self,
        memory: &Tensor<T>,
        target: &TokenSequence,
        mode: &mut Mode,
    ) -> Result<Tensor<T>> {
        if target.len() < 2 || target.ids[0] != BOS {
            return Err(Error::Contract(
                "teacher forcing needs a BOS-prefixed target of length >= 2".into(),
            ));
        }
        let input_ids = &target.ids[..target.len() - 1];
        let target_ids = &target.ids[1..];
        let mask: Vec<bool> = target_ids.iter().map(|&id| id != PAD).collect();
        let emb = self.decoder.embed_tokens(input_ids, mode)?;
        let hidden = self.decoder.forward(&emb, memory, mode)?;
        let logits = self.decoder.logits(&hidden)?;
        nll_loss(&logits, target_ids, &mask)
    }

    /// Next-token logits for a BOS-prefixed prefix.
    pub fn decode_logits(&self, memory: &Tensor<T>, prefix: &TokenSequence) -> Result<Tensor<T>> {
        if prefix.ids.first() != Some(&BOS) {
            return Err(Error::Contract("decode prefix must begin with BOS".into()));
        }
        self.decoder.next_token_logits(memory, &prefix.ids)
    }
}

/// Mean over unmasked positions of `-log softmax(logits)[target]`; exactly
/// the per-token negative log-likelihood of the chain-rule factorization.
pub fn nll_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    pad_mask: &[bool],
) -> Result<Tensor<T>> {
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(logits.nll_loss(&ids, pad_mask)?)
}

/// A partial or finished decode.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Normalized score: `log_prob / generated_length^length_norm`.
    fn score(&self, length_norm: f64) -> f64 {
        if length_norm == 0.0 {
            return self.log_prob;
        }
        let generated = self.tokens.len().saturating_sub(1).max(1) as f64;
        self.log_prob / generated.powf(length_norm)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Length-normalization exponent; 0 keeps the raw log probability.
    pub length_norm: f64,
}

fn log_softmax_f64<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let data: Vec<f64> = logits.data().iter().map(|&v| v.to_f64()).collect();
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    data.iter().map(|v| v - lse).collect()
}

/// Standard beam search from BOS. Hypotheses that emit EOS retire to a pool;
/// expansion stops at `max_len` total tokens (BOS included); the pool's best
/// by normalized score wins, ties broken by lexicographically smallest
/// token sequence.
pub fn beam_search<T: Scalar>(
    model: &Model<T>,
    memory: &Tensor<T>,
    cfg: &BeamConfig,
) -> Result<TokenSequence> {
    if cfg.beam_size == 0 {
        return Err(Error::Contract("beam size must be >= 1".into()));
    }
    let vocab = model.cfg.vocab_size;
    let mut live = vec![Hypothesis {
        tokens: TokenSequence::new(vec![BOS]),
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        if live[0].tokens.len() >= cfg.max_len {
            pool.append(&mut live);
            break;
        }
        let mut candidates = Vec::with_capacity(live.len() * vocab);
        for hyp in &live {
            let logits = model.decode_logits(memory, &hyp.tokens)?;
            let log_probs = log_softmax_f64(&logits);
            for (v, lp) in log_probs.iter().enumerate() {
                let mut tokens = hyp.tokens.ids.clone();
                tokens.push(v as u32);
                candidates.push(Hypothesis {
                    tokens: TokenSequence::new(tokens),
                    log_prob: hyp.log_prob + lp,
                    finished: false,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(cfg.beam_size);
        live = Vec::new();
        for mut c in candidates {
            if c.tokens.ids.last() == Some(&EOS) {
                c.finished = true;
                pool.push(c);
            } else {
                live.push(c);
            }
        }
    }
    pool.into_iter()
        .max_by(|a, b| {
            a.score(cfg.length_norm)
                .total_cmp(&b.score(cfg.length_norm))
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .map(|h| h.tokens)
        .ok_or_else(|| Error::Contract("beam search produced no hypotheses".into()))
}

/// Greedy decoding; exactly beam search with beam 1.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    memory: &Tensor<T>,
    max_len: usize,
) -> Result<TokenSequence> {
    beam_search(model, memory, &BeamConfig { beam_size: 1, max_len, length_norm: 0.0 })
}

/// Full generation: features/image -> encode -> beam search -> text.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    input: &SampleInput<T>,
    vocab: &Vocabulary,
    cfg: &BeamConfig,
) -> Result<String> {
    let memory = model.memory(input)?;
    let tokens = beam_search(model, &memory, cfg)?;
    Ok(vocab.decode_report(&tokens))
}
