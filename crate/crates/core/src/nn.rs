//! Shared building blocks for the encoder and decoder: named parameters,
//! linear layers, layer norm, dropout, and deterministic initializers.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::error::Result;
use crate::tensor::Tensor;

/// A named, trainable tensor slot. The optimizer swaps in a fresh leaf on
/// every step, so recorded graphs never see mutation.
pub struct Param<T: Scalar> {
    name: String,
    value: RefCell<Tensor<T>>,
}

pub type ParamRef<T> = Rc<Param<T>>;

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> ParamRef<T> {
        Rc::new(Param { name: name.into(), value: RefCell::new(tensor.trainable()) })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn get(&self) -> Tensor<T> {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    /// Replace the stored value with a fresh trainable leaf.
    pub fn set(&self, tensor: Tensor<T>) {
        *self.value.borrow_mut() = tensor.trainable();
    }
}

/// Uniform values in `[-bound, bound]`, sampled in f64 so every element type
/// sees the same stream.
pub fn uniform_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    bound: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(data, shape).expect("uniform_init: finite by construction")
}

/// Linear map `[rows, d_in] -> [rows, d_out]` with optional bias.
pub struct Linear<T: Scalar> {
    pub w: ParamRef<T>,
    pub b: Option<ParamRef<T>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn init(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Param::new(format!("{prefix}.w"), uniform_init(rng, &[d_in, d_out], bound));
        let b = bias
            .then(|| Param::new(format!("{prefix}.b"), uniform_init(rng, &[d_out], bound)));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.w.get())?;
        match &self.b {
            Some(b) => Ok(y.add_bias(&b.get())?),
            None => Ok(y),
        }
    }

    pub fn collect(&self, out: &mut Vec<ParamRef<T>>) {
        out.push(self.w.clone());
        if let Some(b) = &self.b {
            out.push(b.clone());
        }
    }

    pub fn param_count(&self) -> u64 {
        (self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }) as u64
    }
}

/// Last-dimension layer norm with learned gain and bias.
pub struct LayerNorm<T: Scalar> {
    pub gain: ParamRef<T>,
    pub bias: ParamRef<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn init(prefix: &str, d: usize) -> Self {
        let gain = Param::new(format!("{prefix}.g"), Tensor::from_vec(vec![T::one(); d], &[d]).unwrap());
        let bias = Param::new(format!("{prefix}.b"), Tensor::zeros(&[d]));
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.layer_norm(&self.gain.get(), &self.bias.get(), self.eps)?)
    }

    pub fn collect(&self, out: &mut Vec<ParamRef<T>>) {
        out.push(self.gain.clone());
        out.push(self.bias.clone());
    }
}

/// Forward-pass mode: dropout is active only in training, where it draws its
/// masks from the training RNG.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Inverted dropout; identity (the same tensor) in eval mode.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, mode: &mut Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train { rng } => {
            if p <= 0.0 {
                return Ok(x.clone());
            }
            let keep = T::from_f64(1.0 / (1.0 - p));
            let mask: Vec<T> = (0..x.numel())
                .map(|_| if rng.random_range(0.0..1.0) < p { T::zero() } else { keep })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape())?;
            Ok(x.mul(&mask)?)
        }
    }
}
