//! Operation counting for the complexity profiler.
//!
//! Convention: one multiply-add pair is 2 FLOPs, so a `[m,k] x [k,n]` matmul
//! records `2*m*n*k`. Elementwise arithmetic records 1 FLOP per output element
//! per primitive (add, mul, div, compare-select). Transcendentals (exp, ln,
//! sqrt) are itemized separately at 1 per element. The [`cost`] submodule is
//! the single source of truth for per-op formulas: the live ops record through
//! it and the analytic profiler sums the same functions, so a measured forward
//! pass and an analytic count agree by construction.
//!
//! The counter is thread-local; readings from worker threads can be merged
//! with [`take`].

use std::cell::Cell;
use std::ops::{Add, AddAssign};

/// FLOP totals for one operation or one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    /// Multiply/add/divide/compare arithmetic.
    pub flops: u64,
    /// exp/ln/sqrt evaluations, itemized separately.
    pub transcendentals: u64,
}

impl Cost {
    pub const ZERO: Cost = Cost { flops: 0, transcendentals: 0 };

    pub fn arith(flops: u64) -> Cost {
        Cost { flops, transcendentals: 0 }
    }

    pub fn new(flops: u64, transcendentals: u64) -> Cost {
        Cost { flops, transcendentals }
    }

    /// Arithmetic plus transcendentals, for single-number reporting.
    pub fn total(&self) -> u64 {
        self.flops + self.transcendentals
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost {
            flops: self.flops + rhs.flops,
            transcendentals: self.transcendentals + rhs.transcendentals,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        *self = *self + rhs;
    }
}

/// Snapshot of the thread-local counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub flops: u64,
    pub transcendentals: u64,
    pub enabled: bool,
}

impl OpCounter {
    pub fn total(&self) -> u64 {
        self.flops + self.transcendentals
    }
}

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
    static TRANSC: Cell<u64> = const { Cell::new(0) };
    static ENABLED: Cell<bool> = const { Cell::new(false) };
}

pub fn enable() {
    ENABLED.with(|e| e.set(true));
}

pub fn disable() {
    ENABLED.with(|e| e.set(false));
}

pub fn is_enabled() -> bool {
    ENABLED.with(|e| e.get())
}

pub fn reset() {
    FLOPS.with(|f| f.set(0));
    TRANSC.with(|t| t.set(0));
}

pub fn snapshot() -> OpCounter {
    OpCounter {
        flops: FLOPS.with(|f| f.get()),
        transcendentals: TRANSC.with(|t| t.get()),
        enabled: is_enabled(),
    }
}

/// Read and reset in one step, for merging per-thread counts.
pub fn take() -> OpCounter {
    let snap = snapshot();
    reset();
    snap
}

pub(crate) fn record(c: Cost) {
    if is_enabled() {
        FLOPS.with(|f| f.set(f.get() + c.flops));
        TRANSC.with(|t| t.set(t.get() + c.transcendentals));
    }
}

/// Per-op cost formulas shared by the recording ops and the analytic profiler.
pub mod cost {
    use super::Cost;

    pub fn matmul(m: usize, k: usize, n: usize) -> Cost {
        Cost::arith(2 * (m as u64) * (k as u64) * (n as u64))
    }

    /// add / sub / mul / scale / relu: one primitive per element.
    pub fn elementwise(n: usize) -> Cost {
        Cost::arith(n as u64)
    }

    pub fn add_bias(rows: usize, cols: usize) -> Cost {
        Cost::arith((rows * cols) as u64)
    }

    pub fn exp(n: usize) -> Cost {
        Cost::new(0, n as u64)
    }

    /// x * sigmoid(x): neg, add, div, mul + one exp.
    pub fn silu(n: usize) -> Cost {
        Cost::new(4 * n as u64, n as u64)
    }

    /// ln(1 + exp(x)) in stable form: abs, max, two adds + exp and ln.
    pub fn softplus(n: usize) -> Cost {
        Cost::new(4 * n as u64, 2 * n as u64)
    }

    /// Per lane of length `len`: max scan, subtract, sum, divide + exp.
    pub fn softmax(lanes: usize, len: usize) -> Cost {
        Cost::new(4 * (lanes * len) as u64, (lanes * len) as u64)
    }

    /// Same shape as [`softmax`] but counted per unmasked element.
    pub fn masked_softmax(unmasked: usize) -> Cost {
        Cost::new(4 * unmasked as u64, unmasked as u64)
    }

    /// Mean, variance, normalize, affine per row + one rsqrt.
    pub fn layer_norm(rows: usize, d: usize) -> Cost {
        Cost::new((rows * (7 * d + 3)) as u64, rows as u64)
    }

    /// Depthwise causal conv: k multiplies + k adds per output element.
    pub fn causal_conv1d(s: usize, channels: usize, k: usize) -> Cost {
        Cost::arith((2 * k * s * channels) as u64)
    }

    /// exp(delta * a): one multiply + one exp per element.
    pub fn zoh_decay(n: usize) -> Cost {
        Cost::new(n as u64, n as u64)
    }

    /// ((exp(delta*a) - 1) / a) * delta-limit * b: four primitives + one exp.
    pub fn zoh_drive(n: usize) -> Cost {
        Cost::new(4 * n as u64, n as u64)
    }

    /// Recurrence (2 mul + 1 add) and output mix (mul + add) per state cell,
    /// plus the per-channel skip term.
    pub fn selective_scan(s: usize, d_inner: usize, d_state: usize) -> Cost {
        Cost::arith((5 * s * d_inner * d_state + 2 * s * d_inner) as u64)
    }

    /// Log-softmax per row plus gather/accumulate.
    pub fn nll_loss(rows: usize, vocab: usize) -> Cost {
        Cost::new((rows * (4 * vocab + 2)) as u64, (rows * vocab) as u64)
    }

    pub fn reduce(n: usize) -> Cost {
        Cost::arith(n as u64)
    }
}
