//! Transformer decoder: scaled token embedding with sinusoidal positions,
//! stacked pre-norm layers of masked self-attention, cross-attention over the
//! encoder memory, and a position-wise feed-forward, ending in a vocabulary
//! projection.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{dropout, uniform_init, LayerNorm, Linear, Mode, Param, ParamRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} must be divisible by head count {}",
                self.d, self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocabulary must include the four special tokens".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for BOS and EOS".into()));
        }
        Ok(())
    }
}

/// Sinusoidal position table `[max_len, d]`, in f64.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = 2.0 * ((i / 2) as f64) / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Multi-head attention; `q_in` and `kv_in` are `[tq, d]` / `[tk, d]`.
pub struct AttentionParams<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
    pub d_head: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init(prefix: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            q: Linear::init(&format!("{prefix}.q"), d, d, true, rng),
            k: Linear::init(&format!("{prefix}.k"), d, d, true, rng),
            v: Linear::init(&format!("{prefix}.v"), d, d, true, rng),
            o: Linear::init(&format!("{prefix}.o"), d, d, true, rng),
            heads,
            d_head: d / heads,
        }
    }

    /// `mask`, when present, is row-major `[tq, tk]`; masked positions get
    /// exactly zero attention weight.
    pub fn forward(
        &self,
        q_in: &Tensor<T>,
        kv_in: &Tensor<T>,
        mask: Option<&[bool]>,
        p_drop: f64,
        mode: &mut Mode,
    ) -> Result<Tensor<T>> {
        let q = self.q.forward(q_in)?;
        let k = self.k.forward(kv_in)?;
        let v = self.v.forward(kv_in)?;
        let scale = T::from_f64(1.0 / (self.d_head as f64).sqrt());
        let mut merged = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * self.d_head, self.d_head)?.mul_scalar(scale)?;
            let kh = k.slice_cols(h * self.d_head, self.d_head)?;
            let vh = v.slice_cols(h * self.d_head, self.d_head)?;
            let scores = qh.matmul(&kh.transpose()?)?;
            let attn = match mask {
                Some(m) => scores.masked_softmax(m)?,
                None => scores.softmax(1)?,
            };
            let attn = dropout(&attn, p_drop, mode)?;
            merged.push(attn.matmul(&vh)?);
        }
        self.o.forward(&Tensor::concat_cols(&merged)?)
    }

    pub fn collect(&self, out: &mut Vec<ParamRef<T>>) {
        self.q.collect(out);
        self.k.collect(out);
        self.v.collect(out);
        self.o.collect(out);
    }
}

pub struct DecoderLayer<T: Scalar> {
    pub norm_self: LayerNorm<T>,
    pub self_attn: AttentionParams<T>,
    pub norm_cross: LayerNorm<T>,
    pub cross_attn: AttentionParams<T>,
    pub norm_ff: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    fn init(cfg: &DecoderConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayer {
            norm_self: LayerNorm::init(&format!("{prefix}.norm_self"), cfg.d),
            self_attn: AttentionParams::init(&format!("{prefix}.self"), cfg.d, cfg.heads, rng),
            norm_cross: LayerNorm::init(&format!("{prefix}.norm_cross"), cfg.d),
            cross_attn: AttentionParams::init(&format!("{prefix}.cross"), cfg.d, cfg.heads, rng),
            norm_ff: LayerNorm::init(&format!("{prefix}.norm_ff"), cfg.d),
            ff1: Linear::init(&format!("{prefix}.ff1"), cfg.d, cfg.d_ff, true, rng),
            ff2: Linear::init(&format!("{prefix}.ff2"), cfg.d_ff, cfg.d, true, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        memory: &Tensor<T>,
        causal_mask: &[bool],
        p_drop: f64,
        mode: &mut Mode,
    ) -> Result<Tensor<T>> {
        let normed = self.norm_self.forward(x)?;
        let attn = self.self_attn.forward(&normed, &normed, Some(causal_mask), p_drop, mode)?;
        let x = x.add(&dropout(&attn, p_drop, mode)?)?;

        let normed = self.norm_cross.forward(&x)?;
        let attn = self.cross_attn.forward(&normed, memory, None, p_drop, mode)?;
        let x = x.add(&dropout(&attn, p_drop, mode)?)?;

        let normed = self.norm_ff.forward(&x)?;
        let ff = self.ff2.forward(&self.ff1.forward(&normed)?.relu()?)?;
        Ok(x.add(&dropout(&ff, p_drop, mode)?)?)
    }

    pub fn collect(&self, out: &mut Vec<ParamRef<T>>) {
        self.norm_self.collect(out);
        self.self_attn.collect(out);
        self.norm_cross.collect(out);
        self.cross_attn.collect(out);
        self.norm_ff.collect(out);
        self.ff1.collect(out);
        self.ff2.collect(out);
    }
}

pub struct DecoderParams<T: Scalar> {
    pub cfg: DecoderConfig,
    /// `[vocab_size, d]` token embedding.
    pub embed: ParamRef<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub final_norm: LayerNorm<T>,
    /// `d -> vocab_size`, untied from the embedding.
    pub out_proj: Linear<T>,
    positions: Vec<f64>,
}

impl<T: Scalar> DecoderParams<T> {
    pub fn init(cfg: DecoderConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (cfg.d as f64).sqrt();
        let embed = Param::new(
            format!("{prefix}.embed"),
            uniform_init(rng, &[cfg.vocab_size, cfg.d], bound),
        );
        let layers = (0..cfg.n_layers)
            .map(|l| DecoderLayer::init(&cfg, &format!("{prefix}.l{l}"), rng))
            .collect();
        let final_norm = LayerNorm::init(&format!("{prefix}.final_norm"), cfg.d);
        let out_proj =
            Linear::init(&format!("{prefix}.out"), cfg.d, cfg.vocab_size, true, rng);
        Ok(DecoderParams {
            positions: sinusoidal_positions(cfg.max_len, cfg.d),
            cfg,
            embed,
            layers,
            final_norm,
            out_proj,
        })
    }

    /// Scaled embedding plus sinusoidal positions for a token prefix.
    pub fn embed_tokens(&self, tokens: &[u32], mode: &mut Mode) -> Result<Tensor<T>> {
        if tokens.len() > self.cfg.max_len {
            return Err(Error::Length { len: tokens.len(), max: self.cfg.max_len });
        }
        let mut ids = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::Vocab(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.cfg.vocab_size
                )));
            }
            ids.push(t as usize);
        }
        let emb = self
            .embed
            .get()
            .embed_rows(&ids)?
            .mul_scalar(T::from_f64((self.cfg.d as f64).sqrt()))?;
        let pe_data: Vec<T> = self.positions[..tokens.len() * self.cfg.d]
            .iter()
            .map(|&v| T::from_f64(v))
            .collect();
        let pe = Tensor::from_vec(pe_data, &[tokens.len(), self.cfg.d])?;
        dropout(&emb.add(&pe)?, self.cfg.dropout, mode)
    }

    /// Run the layer stack over embedded tokens against the encoder memory.
    pub fn forward(
        &self,
        y_emb: &Tensor<T>,
        memory: &Tensor<T>,
        mode: &mut Mode,
    ) -> Result<Tensor<T>> {
        let t = y_emb.shape()[0];
        let mask = causal_mask(t);
        let mut x = y_emb.clone();
        for layer in &self.layers {
            x = layer.forward(&x, memory, &mask, self.cfg.dropout, mode)?;
        }
        Ok(self.final_norm.forward(&x)?)
    }

    /// Vocabulary logits for every position.
    pub fn logits(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        self.out_proj.forward(hidden)
    }

    /// Next-token logits after a prefix, as a detached `[vocab_size]` tensor.
    pub fn next_token_logits(&self, memory: &Tensor<T>, prefix: &[u32]) -> Result<Tensor<T>> {
        let emb = self.embed_tokens(prefix, &mut Mode::Eval)?;
        let hidden = self.forward(&emb, memory, &mut Mode::Eval)?;
        let logits = self.logits(&hidden)?;
        let v = self.cfg.vocab_size;
        let last = logits.data()[(prefix.len() - 1) * v..prefix.len() * v].to_vec();
        Ok(Tensor::from_vec(last, &[v])?)
    }

    pub fn collect(&self, out: &mut Vec<ParamRef<T>>) {
        out.push(self.embed.clone());
        for layer in &self.layers {
            layer.collect(out);
        }
        self.final_norm.collect(out);
        self.out_proj.collect(out);
    }
}

/// Row-major `[t, t]` lower-triangular mask: position t sees <= t.
pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut mask = vec![false; t * t];
    for r in 0..t {
        for c in 0..=r {
            mask[r * t + c] = true;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg() -> DecoderConfig {
        DecoderConfig { d: 16, n_layers: 2, heads: 2, d_ff: 32, dropout: 0.1, vocab_size: 11, max_len: 12 }
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn positions_at_zero_alternate_sin_cos() {
        let dec = DecoderParams::<f64>::init(cfg(), "dec", &mut rng(0)).unwrap();
        dec.embed.set(Tensor::zeros(&[cfg().vocab_size, cfg().d]));
        let emb = dec.embed_tokens(&[1], &mut Mode::Eval).unwrap();
        for (i, &v) in emb.data().iter().enumerate() {
            let want = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert!((v - want).abs() < 1e-15, "dim {i}: {v}");
        }
    }

    #[test]
    fn position_one_first_dim_is_sin_one() {
        let pe = sinusoidal_positions(4, 8);
        assert!((pe[8] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn embed_shape_and_range_checks() {
        let dec = DecoderParams::<f64>::init(cfg(), "dec", &mut rng(1)).unwrap();
        for t in 1..=cfg().max_len {
            let tokens: Vec<u32> = (0..t as u32).map(|v| v % 4).collect();
            let emb = dec.embed_tokens(&tokens, &mut Mode::Eval).unwrap();
            assert_eq!(emb.shape(), &[t, cfg().d]);
        }
        assert!(matches!(
            dec.embed_tokens(&[99], &mut Mode::Eval),
            Err(Error::Vocab(_))
        ));
        let too_long: Vec<u32> = vec![1; cfg().max_len + 1];
        assert!(matches!(
            dec.embed_tokens(&too_long, &mut Mode::Eval),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn single_position_attention_weight_is_one() {
        // with one query and one key the softmax weight is exactly 1, so the
        // attention output equals o(v(x))
        let mut r = rng(2);
        let attn = AttentionParams::<f64>::init("a", 16, 2, &mut r);
        let x = rand_tensor(&mut r, &[1, 16]);
        let out = attn
            .forward(&x, &x, Some(&causal_mask(1)), 0.0, &mut Mode::Eval)
            .unwrap();
        let direct = attn.o.forward(&attn.v.forward(&x).unwrap()).unwrap();
        assert_eq!(out.data(), direct.data());
    }

    #[test]
    fn zero_query_gives_uniform_average_of_values() {
        let mut r = rng(3);
        let d = 16;
        let attn = AttentionParams::<f64>::init("a", d, 2, &mut r);
        attn.q.w.set(Tensor::zeros(&[d, d]));
        attn.q.b.as_ref().unwrap().set(Tensor::zeros(&[d]));
        let tq = 3;
        let x = rand_tensor(&mut r, &[tq, d]);
        let out = attn
            .forward(&x, &x, Some(&causal_mask(tq)), 0.0, &mut Mode::Eval)
            .unwrap();
        // oracle: per row, average v over unmasked prefix, then o
        let v = attn.v.forward(&x).unwrap();
        let mut avg = vec![0.0; tq * d];
        for t in 0..tq {
            for c in 0..d {
                let mut acc = 0.0;
                for s in 0..=t {
                    acc += v.data()[s * d + c];
                }
                avg[t * d + c] = acc / (t + 1) as f64;
            }
        }
        let direct =
            attn.o.forward(&Tensor::from_vec(avg, &[tq, d]).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_outputs_ignore_future_positions() {
        let mut r = rng(4);
        let dec = DecoderParams::<f64>::init(cfg(), "dec", &mut r).unwrap();
        let memory = rand_tensor(&mut r, &[5, cfg().d]);
        let tokens: Vec<u32> = vec![1, 5, 7, 2];
        let full = {
            let emb = dec.embed_tokens(&tokens, &mut Mode::Eval).unwrap();
            dec.forward(&emb, &memory, &mut Mode::Eval).unwrap()
        };
        let prefix = {
            let emb = dec.embed_tokens(&tokens[..2], &mut Mode::Eval).unwrap();
            dec.forward(&emb, &memory, &mut Mode::Eval).unwrap()
        };
        for i in 0..2 * cfg().d {
            assert_eq!(full.data()[i], prefix.data()[i]);
        }
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic() {
        let mut r = rng(5);
        let dec = DecoderParams::<f64>::init(cfg(), "dec", &mut r).unwrap();
        let memory = rand_tensor(&mut r, &[4, cfg().d]);
        let once = dec.next_token_logits(&memory, &[1, 4, 6]).unwrap();
        let twice = dec.next_token_logits(&memory, &[1, 4, 6]).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn memory_permutation_sanity_pair() {
        let mut r = rng(6);
        let dec = DecoderParams::<f64>::init(cfg(), "dec", &mut r).unwrap();
        let s = 4;
        let memory = rand_tensor(&mut r, &[s, cfg().d]);
        let permute = |m: &Tensor<f64>, order: &[usize]| {
            let mut data = Vec::new();
            for &i in order {
                data.extend_from_slice(&m.data()[i * cfg().d..(i + 1) * cfg().d]);
            }
            Tensor::from_vec(data, &[s, cfg().d]).unwrap()
        };
        let shuffled = permute(&memory, &[2, 0, 3, 1]);
        let restored = permute(&shuffled, &[1, 3, 0, 2]);
        let logits = |m: &Tensor<f64>| dec.next_token_logits(m, &[1, 5]).unwrap();
        let base = logits(&memory);
        let moved = logits(&shuffled);
        let back = logits(&restored);
        assert_eq!(base.data(), back.data());
        assert!(base.data().iter().zip(moved.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn incremental_decoding_equals_full_forward_slices() {
        let mut r = rng(7);
        let dec = DecoderParams::<f32>::init(cfg(), "dec", &mut r).unwrap();
        let memory = {
            let n = 4 * cfg().d;
            let data: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(data, &[4, cfg().d]).unwrap()
        };
        let tokens: Vec<u32> = vec![1, 6, 3, 9, 2];
        let emb = dec.embed_tokens(&tokens, &mut Mode::Eval).unwrap();
        let hidden = dec.forward(&emb, &memory, &mut Mode::Eval).unwrap();
        let full = dec.logits(&hidden).unwrap();
        let v = cfg().vocab_size;
        for t in 1..=tokens.len() {
            let step = dec.next_token_logits(&memory, &tokens[..t]).unwrap();
            for c in 0..v {
                let want = full.data()[(t - 1) * v + c];
                let got = step.data()[c];
                assert!((want - got).abs() < 1e-6, "t={t} c={c}");
            }
        }
    }
}
