//! Bag-level MIL heads mapping an `m×D` feature bag to `B` time-bin logits.
//!
//! Layer sizes are fixed so that, at `D = 1024` with default widths, the
//! trainable parameter counts are 526,852 (MeanMIL, MaxMIL), 592,645
//! (ABMIL) and 2,673,172 (TransMIL).

mod nystrom;
mod transmil;

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub use nystrom::{nystrom_attention, pinv_newton_schulz};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Axis, Reduce, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    Mean,
    Max,
    Abmil,
    TransMil,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Mean, HeadKind::Max, HeadKind::Abmil, HeadKind::TransMil];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Mean => "mean",
            HeadKind::Max => "max",
            HeadKind::Abmil => "abmil",
            HeadKind::TransMil => "transmil",
        }
    }

    /// Name as printed in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            HeadKind::Mean => "MeanMIL",
            HeadKind::Max => "MaxMIL",
            HeadKind::Abmil => "ABMIL",
            HeadKind::TransMil => "TransMIL",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" | "meanmil" => Ok(HeadKind::Mean),
            "max" | "maxmil" => Ok(HeadKind::Max),
            "abmil" => Ok(HeadKind::Abmil),
            "transmil" => Ok(HeadKind::TransMil),
            _ => Err(Error::Config(format!("unknown head kind '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransMilConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub landmarks: usize,
    pub pinv_iterations: usize,
    pub residual_kernel: usize,
}

impl Default for TransMilConfig {
    fn default() -> Self {
        TransMilConfig {
            layers: 2,
            heads: 8,
            head_dim: 64,
            landmarks: 256,
            pinv_iterations: 6,
            residual_kernel: 33,
        }
    }
}

impl TransMilConfig {
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Depthwise PPEG kernel sizes, applied in parallel and summed.
pub const PPEG_KERNELS: [usize; 3] = [7, 5, 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub bins: usize,
    pub dropout: f64,
    pub transmil: TransMilConfig,
}

impl HeadConfig {
    pub const BINS: usize = 4;

    pub fn new(kind: HeadKind, input_dim: usize) -> Self {
        HeadConfig {
            kind,
            input_dim,
            hidden_dim: 512,
            attn_dim: 128,
            bins: Self::BINS,
            dropout: 0.25,
            transmil: TransMilConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (D={}, H={}, A={})",
                self.input_dim, self.hidden_dim, self.attn_dim
            )));
        }
        if self.bins != Self::BINS {
            return Err(Error::Config(format!(
                "the survival heads use {} time bins, got {}",
                Self::BINS,
                self.bins
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.kind == HeadKind::TransMil {
            let t = &self.transmil;
            if t.layers == 0 || t.heads == 0 || t.head_dim == 0 || t.landmarks == 0 || t.pinv_iterations == 0 {
                return Err(Error::Config(format!("invalid TransMIL settings {t:?}")));
            }
            if t.residual_kernel.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "residual kernel must be odd, got {}",
                    t.residual_kernel
                )));
            }
        }
        Ok(())
    }

    /// Exact number of trainable scalars, biases, class token and norm
    /// parameters included.
    pub fn parameter_count(&self) -> usize {
        let (d, h, a, b) = (self.input_dim, self.hidden_dim, self.attn_dim, self.bins);
        let linear = |i: usize, o: usize| i * o + o;
        match self.kind {
            HeadKind::Mean | HeadKind::Max => linear(d, h) + linear(h, b),
            HeadKind::Abmil => linear(d, h) + linear(h, a) + linear(a, 1) + linear(h, b),
            HeadKind::TransMil => {
                let t = &self.transmil;
                let inner = t.inner_dim();
                let layer = 2 * h + h * 3 * inner + linear(inner, h) + t.heads * t.residual_kernel;
                let ppeg: usize = PPEG_KERNELS.iter().map(|k| h * k * k + h).sum();
                linear(d, h) + h + t.layers * layer + ppeg + 2 * h + linear(h, b)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    fn build<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, uniform(fan_in, fan_out, fan_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(1, fan_out)));
        Linear { weight, bias }
    }

    pub(crate) fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// `rows×cols` weights uniform in `(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn uniform<T: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let data = (0..rows * cols).map(|_| T::lit(rng.uniform_in(-bound, bound))).collect();
    Tensor::new(rows, cols, data).expect("positive dims")
}

pub(crate) enum Layout {
    Pooled {
        fc1: Linear,
        fc2: Linear,
        reduce: Reduce,
    },
    Abmil {
        embed: Linear,
        attn_hidden: Linear,
        attn_score: Linear,
        classifier: Linear,
    },
    TransMil(transmil::Layout),
}

/// Intermediate values of a forward pass.
impl Layout {
    /// Forward pass without the binding checks of [`MilHead::forward_traced`].
    pub(crate) fn run<T: Real>(
        &self,
        config: &HeadConfig,
        tape: &mut Tape<'_, T>,
        bag: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<HeadTrace> {
        let rate = config.dropout;
        match self {
            Layout::Pooled { fc1, fc2, reduce } => {
                let h = fc1.apply(tape, bag)?;
                let h = tape.relu(h);
                let h = tape.dropout(h, rate, rng, training)?;
                let inst = fc2.apply(tape, h)?;
                let logits = tape.reduce_rows(inst, *reduce)?;
                Ok(HeadTrace {
                    logits,
                    attention: None,
                })
            }
            Layout::Abmil {
                embed,
                attn_hidden,
                attn_score,
                classifier,
            } => {
                let h = embed.apply(tape, bag)?;
                let h = tape.relu(h);
                let h = tape.dropout(h, rate, rng, training)?;
                let a = attn_hidden.apply(tape, h)?;
                let a = tape.tanh(a);
                let scores = attn_score.apply(tape, a)?;
                let weights = tape.softmax(scores, Axis::Rows);
                let wt = tape.transpose(weights);
                let pooled = tape.matmul(wt, h)?;
                let logits = classifier.apply(tape, pooled)?;
                Ok(HeadTrace {
                    logits,
                    attention: Some(weights),
                })
            }
            Layout::TransMil(layout) => Ok(HeadTrace {
                logits: layout.forward(config, tape, bag, training, rng)?,
                attention: None,
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadTrace {
    /// `1×B` bin logits.
    pub logits: Var,
    /// `m×1` ABMIL attention weights.
    pub attention: Option<Var>,
}

pub struct MilHead<T> {
    config: HeadConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> MilHead<T> {
    /// Builds and initializes a head. Linear weights are uniform in
    /// `±1/√fan_in`, biases zero, the class token uniform in `±0.02`, norm
    /// gains one and shifts zero.
    pub fn new(config: HeadConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (d, h, a, b) = (config.input_dim, config.hidden_dim, config.attn_dim, config.bins);
        let layout = match config.kind {
            HeadKind::Mean | HeadKind::Max => Layout::Pooled {
                fc1: Linear::build(&mut store, "fc1", d, h, true, rng),
                fc2: Linear::build(&mut store, "fc2", h, b, true, rng),
                reduce: if config.kind == HeadKind::Mean { Reduce::Mean } else { Reduce::Max },
            },
            HeadKind::Abmil => Layout::Abmil {
                embed: Linear::build(&mut store, "embed", d, h, true, rng),
                attn_hidden: Linear::build(&mut store, "attention.hidden", h, a, true, rng),
                attn_score: Linear::build(&mut store, "attention.score", a, 1, true, rng),
                classifier: Linear::build(&mut store, "classifier", h, b, true, rng),
            },
            HeadKind::TransMil => Layout::TransMil(transmil::Layout::build(&config, &mut store, rng)),
        };
        debug_assert_eq!(store.scalar_count(), config.parameter_count());
        Ok(MilHead {
            config,
            params: store,
            layout,
        })
    }

    /// Rebuilds a head around existing parameter values (e.g. a checkpoint).
    pub fn with_params(config: HeadConfig, params: ParamStore<T>) -> Result<Self> {
        let mut head = MilHead::new(config, &mut Rng::new(0, 0))?;
        if params.len() != head.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                head.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in head.params.iter().zip(params.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter '{}' {} does not match '{}' {}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        head.params = params;
        Ok(head)
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// A fresh tape bound to this head's parameters.
    pub fn tape(&self) -> Tape<'_, T> {
        Tape::new(&self.params)
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, bag: Var, training: bool, rng: &mut Rng) -> Result<Var> {
        Ok(self.forward_traced(tape, bag, training, rng)?.logits)
    }

    pub fn forward_traced(&self, tape: &mut Tape<'_, T>, bag: Var, training: bool, rng: &mut Rng) -> Result<HeadTrace> {
        if !core::ptr::eq(tape.params(), &self.params) {
            return Err(Error::Contract("tape is bound to a different parameter store".into()));
        }
        let shape = tape.shape(bag);
        if shape.cols != self.config.input_dim {
            return Err(Error::Contract(format!(
                "bag has {} features, head expects {}",
                shape.cols, self.config.input_dim
            )));
        }
        self.layout.run(&self.config, tape, bag, training, rng)
    }

    pub(crate) fn into_raw(self) -> (HeadConfig, ParamStore<T>, Layout) {
        (self.config, self.params, self.layout)
    }

    /// Evaluation-mode logits for one bag.
    pub fn predict(&self, bag: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = self.tape();
        let x = tape.constant_ref(bag);
        let logits = self.forward(&mut tape, x, false, &mut Rng::new(0, 0))?;
        Ok(tape.value(logits).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_counts_at_1024() {
        assert_eq!(HeadConfig::new(HeadKind::Mean, 1024).parameter_count(), 526_852);
        assert_eq!(HeadConfig::new(HeadKind::Max, 1024).parameter_count(), 526_852);
        assert_eq!(HeadConfig::new(HeadKind::Abmil, 1024).parameter_count(), 592_645);
        assert_eq!(HeadConfig::new(HeadKind::TransMil, 1024).parameter_count(), 2_673_172);
    }

    #[test]
    fn non_default_bins_rejected() {
        let mut c = HeadConfig::new(HeadKind::Mean, 8);
        c.bins = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(MilHead::<f32>::new(c, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("MeanMIL".parse::<HeadKind>().unwrap(), HeadKind::Mean);
        assert_eq!("transmil".parse::<HeadKind>().unwrap(), HeadKind::TransMil);
        assert!("mambamil".parse::<HeadKind>().is_err());
    }

    #[test]
    fn built_store_matches_formula() {
        for kind in HeadKind::ALL {
            let mut c = HeadConfig::new(kind, 16);
            c.hidden_dim = 8;
            c.attn_dim = 4;
            c.transmil.head_dim = 1;
            c.transmil.landmarks = 4;
            let head = MilHead::<f64>::new(c, &mut Rng::new(1, 0)).unwrap();
            assert_eq!(head.params().scalar_count(), c.parameter_count(), "{kind}");
        }
    }
}
