//! Checkpoint persistence.
//!
//! Layout (little-endian): magic `R2GC`, version u8 = 1, u32 byte length +
//! UTF-8 `key=value` lines for the config, a tensor table (u32 count, then
//! per tensor: u32 name length + name, u8 rank, u32 dims, f32 data), the
//! optimizer state in the same tensor-table encoding (first/second moments
//! per parameter plus a scalar `step`), and the u64 RNG word position.
//! Save -> load -> save is byte-identical; restoring resumes training
//! bit-exactly.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, FormatError, Result};
use crate::fsutil::{write_atomic, ByteReader};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"R2GC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key=value` pairs: model.*, train.*, epoch.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<TensorEntry>,
    pub opt: Vec<TensorEntry>,
    pub rng_word_pos: u64,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &Model<T>,
        adam: &Adam<T>,
        train_cfg: &TrainConfig,
        next_epoch: usize,
        rng: &ChaCha8Rng,
    ) -> Checkpoint {
        let cfg = &model.cfg;
        let config = vec![
            ("model.d".into(), cfg.d.to_string()),
            ("model.d_state".into(), cfg.d_state.to_string()),
            ("model.d_conv".into(), cfg.d_conv.to_string()),
            ("model.expand".into(), cfg.expand.to_string()),
            ("model.n_enc_layers".into(), cfg.n_enc_layers.to_string()),
            ("model.n_dec_layers".into(), cfg.n_dec_layers.to_string()),
            ("model.heads".into(), cfg.heads.to_string()),
            ("model.d_ff".into(), cfg.d_ff.to_string()),
            ("model.dropout".into(), format!("{:?}", cfg.dropout)),
            ("model.vocab_size".into(), cfg.vocab_size.to_string()),
            ("model.max_len".into(), cfg.max_len.to_string()),
            ("model.feat_dim".into(), cfg.feat_dim.to_string()),
            ("model.patch".into(), cfg.patch.to_string()),
            ("train.lr_visual".into(), format!("{:?}", train_cfg.lr_visual)),
            ("train.lr_other".into(), format!("{:?}", train_cfg.lr_other)),
            ("train.decay".into(), format!("{:?}", train_cfg.decay)),
            ("train.epochs".into(), train_cfg.epochs.to_string()),
            ("train.batch_size".into(), train_cfg.batch_size.to_string()),
            ("train.seed".into(), train_cfg.seed.to_string()),
            ("epoch".into(), next_epoch.to_string()),
        ];
        let tensors = model
            .params()
            .iter()
            .map(|p| {
                let t = p.get();
                TensorEntry {
                    name: p.name().to_string(),
                    dims: t.shape().to_vec(),
                    data: t.data().iter().map(|&v| v.to_f64() as f32).collect(),
                }
            })
            .collect();
        let mut opt = Vec::with_capacity(2 * model.params().len() + 1);
        for (idx, p) in model.params().iter().enumerate() {
            opt.push(TensorEntry {
                name: format!("m.{}", p.name()),
                dims: p.shape(),
                data: adam.m[idx].iter().map(|&v| v.to_f64() as f32).collect(),
            });
            opt.push(TensorEntry {
                name: format!("v.{}", p.name()),
                dims: p.shape(),
                data: adam.v[idx].iter().map(|&v| v.to_f64() as f32).collect(),
            });
        }
        opt.push(TensorEntry { name: "step".into(), dims: vec![1], data: vec![adam.step as f32] });
        Checkpoint { config, tensors, opt, rng_word_pos: rng.get_word_pos() as u64 }
    }

    fn value(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| FormatError::Malformed(format!("missing config key {key}")).into())
    }

    fn parse<F: std::str::FromStr>(&self, key: &str) -> Result<F> {
        self.value(key)?
            .parse()
            .map_err(|_| FormatError::Malformed(format!("unparsable config key {key}")).into())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            d: self.parse("model.d")?,
            d_state: self.parse("model.d_state")?,
            d_conv: self.parse("model.d_conv")?,
            expand: self.parse("model.expand")?,
            n_enc_layers: self.parse("model.n_enc_layers")?,
            n_dec_layers: self.parse("model.n_dec_layers")?,
            heads: self.parse("model.heads")?,
            d_ff: self.parse("model.d_ff")?,
            dropout: self.parse("model.dropout")?,
            vocab_size: self.parse("model.vocab_size")?,
            max_len: self.parse("model.max_len")?,
            feat_dim: self.parse("model.feat_dim")?,
            patch: self.parse("model.patch")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr_visual: self.parse("train.lr_visual")?,
            lr_other: self.parse("train.lr_other")?,
            decay: self.parse("train.decay")?,
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            seed: self.parse("train.seed")?,
        })
    }

    pub fn epoch(&self) -> Result<usize> {
        self.parse("epoch")
    }

    /// Load stored parameters into an existing model, verifying that names
    /// and shapes line up exactly.
    pub fn apply_to<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.tensors.len() != model.params().len() {
            return Err(FormatError::Malformed(format!(
                "checkpoint has {} tensors, model has {} parameters",
                self.tensors.len(),
                model.params().len()
            ))
            .into());
        }
        for (entry, param) in self.tensors.iter().zip(model.params()) {
            if entry.name != param.name() {
                return Err(FormatError::Malformed(format!(
                    "checkpoint tensor {} does not match parameter {}",
                    entry.name,
                    param.name()
                ))
                .into());
            }
            if entry.dims != param.shape() {
                return Err(FormatError::ShapeMismatch {
                    name: entry.name.clone(),
                    expected: param.shape(),
                    found: entry.dims.clone(),
                }
                .into());
            }
            let data: Vec<T> = entry.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            param.set(Tensor::from_vec(data, &entry.dims)?);
        }
        Ok(())
    }

    /// Rebuild the model alone (for inference).
    pub fn restore_model<T: Scalar>(&self) -> Result<Model<T>> {
        let cfg = self.model_config()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::init(cfg, &mut init_rng)?;
        self.apply_to(&model)?;
        Ok(model)
    }

    /// Rebuild the full training state: model, optimizer moments, epoch
    /// cursor, and the training RNG at its saved stream position.
    pub fn restore_trainer<T: Scalar>(&self) -> Result<Trainer<T>> {
        let model = self.restore_model::<T>()?;
        let train_cfg = self.train_config()?;
        let mut adam = Adam::new(model.params());
        let expected = 2 * model.params().len() + 1;
        if self.opt.len() != expected {
            return Err(FormatError::Malformed(format!(
                "optimizer table has {} entries, expected {expected}",
                self.opt.len()
            ))
            .into());
        }
        for (idx, param) in model.params().iter().enumerate() {
            let m = &self.opt[2 * idx];
            let v = &self.opt[2 * idx + 1];
            if m.name != format!("m.{}", param.name()) || v.name != format!("v.{}", param.name())
            {
                return Err(FormatError::Malformed(format!(
                    "optimizer entries {} / {} do not match parameter {}",
                    m.name,
                    v.name,
                    param.name()
                ))
                .into());
            }
            adam.m[idx] = m.data.iter().map(|&x| T::from_f64(x as f64)).collect();
            adam.v[idx] = v.data.iter().map(|&x| T::from_f64(x as f64)).collect();
        }
        let step_entry = &self.opt[expected - 1];
        if step_entry.name != "step" {
            return Err(FormatError::Malformed("missing optimizer step entry".into()).into());
        }
        adam.step = step_entry.data[0] as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        rng.set_word_pos(self.rng_word_pos as u128);
        Ok(Trainer { model, adam, rng, next_epoch: self.epoch()?, cfg: train_cfg })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let cfg_text: String =
            self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg_text.as_bytes());
        for table in [&self.tensors, &self.opt] {
            out.extend_from_slice(&(table.len() as u32).to_le_bytes());
            for entry in table {
                out.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
                out.extend_from_slice(entry.name.as_bytes());
                out.push(entry.dims.len() as u8);
                for &d in &entry.dims {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in &entry.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: [magic[0], magic[1], magic[2], magic[3]],
            }
            .into());
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            }
            .into());
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|e| Error::from(FormatError::Malformed(format!("config not UTF-8: {e}"))))?;
        let mut config = Vec::new();
        for line in cfg_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::from(FormatError::Malformed(format!("bad config line {line:?}")))
            })?;
            config.push((k.to_string(), v.to_string()));
        }
        let mut tables = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = r.u32()? as usize;
            let mut table = Vec::with_capacity(count);
            for _ in 0..count {
                let name_len = r.u32()? as usize;
                let name = std::str::from_utf8(r.take(name_len)?)
                    .map_err(|e| {
                        Error::from(FormatError::Malformed(format!("name not UTF-8: {e}")))
                    })?
                    .to_string();
                let rank = r.u8()? as usize;
                let mut dims = Vec::with_capacity(rank);
                for _ in 0..rank {
                    dims.push(r.u32()? as usize);
                }
                let numel: usize = dims.iter().product();
                let data = r
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                table.push(TensorEntry { name, dims, data });
            }
            tables.push(table);
        }
        let opt = tables.pop().expect("two tables");
        let tensors = tables.pop().expect("two tables");
        let rng_word_pos = r.u64()?;
        if r.remaining() != 0 {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes after checkpoint payload",
                r.remaining()
            ))
            .into());
        }
        Ok(Checkpoint { config, tensors, opt, rng_word_pos })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
