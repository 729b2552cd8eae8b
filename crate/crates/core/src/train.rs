//! Teacher-forced maximum-likelihood training: Adam with per-group learning
//! rates (visual projection vs everything else), multiplicative per-epoch
//! decay, greedy-decoding BLEU-4 validation for model selection, and
//! bit-exact resumability through checkpoints.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{bleu, TokenizedPair};
use crate::model::{greedy_decode, Model, SampleInput};
use crate::nn::{Mode, ParamRef};
use crate::scalar::Scalar;
use crate::text::{TokenSequence, Vocabulary, PAD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_visual: f64,
    pub lr_other: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_visual: 5e-5,
            lr_other: 1e-4,
            decay: 0.8,
            epochs: 50,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_visual <= 0.0 || self.lr_other <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("decay must be in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `(lr_visual, lr_other)` after `epoch` decay steps.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> (f64, f64) {
    let factor = cfg.decay.powi(epoch as i32);
    (cfg.lr_visual * factor, cfg.lr_other * factor)
}

/// Bias-corrected Adam state aligned with a parameter registry.
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[ParamRef<T>]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// One Adam update. Every parameter must carry a gradient; learning rates
/// are resolved per parameter name so groups can differ.
pub fn adam_step<T: Scalar>(
    params: &[ParamRef<T>],
    state: &mut Adam<T>,
    lr_for: &dyn Fn(&str) -> f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters vs state of {}",
            params.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - state.beta1.powi(state.step as i32));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(state.step as i32));
    let eps = T::from_f64(state.eps);
    for (idx, param) in params.iter().enumerate() {
        let tensor = param.get();
        let grad = tensor.grad().ok_or_else(|| {
            Error::Contract(format!("adam_step: parameter {} has no gradient", param.name()))
        })?;
        let lr = T::from_f64(lr_for(param.name()));
        let mut data = tensor.data().to_vec();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        param.set(crate::tensor::Tensor::from_vec(data, &tensor.shape().to_vec())?);
    }
    Ok(())
}

/// Learning-rate router: the visual-extractor group is every parameter
/// under the `visual.` prefix.
pub fn group_lrs(lr_visual: f64, lr_other: f64) -> impl Fn(&str) -> f64 {
    move |name: &str| if name.starts_with("visual.") { lr_visual } else { lr_other }
}

/// One training example: input features/image, the encoded target, and the
/// tokenized reference text for validation scoring.
pub struct TrainSample<T: Scalar> {
    pub id: String,
    pub input: SampleInput<T>,
    pub target: TokenSequence,
    pub reference: Vec<String>,
}

pub struct TrainData<T: Scalar> {
    pub train: Vec<TrainSample<T>>,
    pub val: Vec<TrainSample<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bleu4: f64,
    pub lr_visual: f64,
    pub lr_other: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub log: Vec<EpochStats>,
    /// Checkpoint of the epoch with the best validation BLEU-4.
    pub best: Checkpoint,
    /// Checkpoint of the final epoch, for resuming.
    pub last: Checkpoint,
}

/// Mutable training state; one epoch at a time so checkpoints can cut in
/// anywhere.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    pub next_epoch: usize,
    pub cfg: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { model, adam, rng, next_epoch: 0, cfg })
    }

    /// Teacher-forced loss over a batch, weighted by unmasked token counts
    /// so it equals the mean over all unmasked positions.
    fn batch_loss(
        &mut self,
        samples: &[&TrainSample<T>],
    ) -> Result<(crate::tensor::Tensor<T>, usize)> {
        let mut weighted: Option<crate::tensor::Tensor<T>> = None;
        let mut total_tokens = 0usize;
        for sample in samples {
            // no dropout sites in the visual projection or encoder
            let memory = self.model.memory(&sample.input)?;
            let tokens = sample.target.ids[1..].iter().filter(|&&id| id != PAD).count();
            total_tokens += tokens;
            let loss = self.model.teacher_forced_loss(
                &memory,
                &sample.target,
                &mut Mode::Train { rng: &mut self.rng },
            )?;
            let scaled = loss.mul_scalar(T::from_f64(tokens as f64))?;
            weighted = Some(match weighted {
                Some(acc) => acc.add(&scaled)?,
                None => scaled,
            });
        }
        let sum = weighted.ok_or_else(|| Error::Contract("empty batch".into()))?;
        Ok((sum.mul_scalar(T::from_f64(1.0 / total_tokens as f64))?, total_tokens))
    }

    fn train_batch(
        &mut self,
        batch: &[&TrainSample<T>],
        lr_visual: f64,
        lr_other: f64,
    ) -> Result<(f64, usize)> {
        let (loss, tokens) = self.batch_loss(batch)?;
        let value = loss.item().to_f64();
        if value.is_nan() {
            return Err(Error::Train("loss is NaN".into()));
        }
        loss.backward().map_err(Error::from)?;
        adam_step(self.model.params(), &mut self.adam, &group_lrs(lr_visual, lr_other))?;
        Ok((value, tokens))
    }

    /// Run one epoch: shuffled batches, one Adam step per batch, then
    /// greedy-decoding validation BLEU-4.
    pub fn run_epoch(&mut self, data: &TrainData<T>, vocab: &Vocabulary) -> Result<EpochStats> {
        let epoch = self.next_epoch;
        let (lr_visual, lr_other) = lr_at_epoch(&self.cfg, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (batch_idx, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&TrainSample<T>> = chunk.iter().map(|&i| &data.train[i]).collect();
            let result = self.train_batch(&batch, lr_visual, lr_other);
            match result {
                Ok((value, tokens)) => {
                    loss_sum += value * tokens as f64;
                    token_sum += tokens;
                }
                Err(e) => {
                    return Err(Error::Train(format!(
                        "epoch {epoch} batch {batch_idx} (samples {chunk:?}): {e}"
                    )))
                }
            }
        }
        let val_bleu4 = self.validation_bleu4(data, vocab)?;
        self.next_epoch += 1;
        Ok(EpochStats {
            epoch,
            train_loss: loss_sum / token_sum.max(1) as f64,
            val_bleu4,
            lr_visual,
            lr_other,
        })
    }

    /// Greedy (beam 1) decoding over the validation split.
    pub fn validation_bleu4(&self, data: &TrainData<T>, vocab: &Vocabulary) -> Result<f64> {
        if data.val.is_empty() {
            return Ok(0.0);
        }
        let mut corpus = Vec::with_capacity(data.val.len());
        for sample in &data.val {
            let memory = self.model.memory(&sample.input)?;
            let decoded = greedy_decode(&self.model, &memory, self.model.cfg.max_len)?;
            corpus.push(TokenizedPair::new(
                vocab.decode_tokens(&decoded),
                sample.reference.clone(),
            ));
        }
        Ok(bleu(&corpus, 4)?[3])
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.adam, &self.cfg, self.next_epoch, &self.rng)
    }
}

/// Full training run with best-BLEU-4 model selection.
pub fn train<T: Scalar>(
    model: Model<T>,
    data: &TrainData<T>,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<TrainOutcome<T>> {
    if data.train.is_empty() {
        return Err(Error::Contract("train: empty training split".into()));
    }
    let mut trainer = Trainer::new(model, *cfg)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for _ in 0..cfg.epochs {
        let stats = trainer.run_epoch(data, vocab)?;
        if best.as_ref().is_none_or(|(b, _)| stats.val_bleu4 > *b) {
            best = Some((stats.val_bleu4, trainer.checkpoint()));
        }
        log.push(stats);
    }
    let last = trainer.checkpoint();
    let best = best.expect("epochs >= 1").1;
    Ok(TrainOutcome { model: trainer.model, log, best, last })
}
