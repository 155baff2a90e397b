//! Per-fold training: Adam, one slide per forward pass, gradient
//! accumulation, L1 on weights, validation c-index and early stopping.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::MilHead;
use crate::optim::Adam;
use crate::params::{Gradients, ParamKind, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::survival::{concordance_index, nll_loss, risk_score, DEFAULT_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Cohorts with published hyperparameter columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Blca,
    Luad,
    Brca,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blca" => Ok(Preset::Blca),
            "luad" => Ok(Preset::Luad),
            "brca" => Ok(Preset::Brca),
            _ => Err(Error::Config(format!("unknown preset '{s}' (blca, luad, brca)"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Blca => "BLCA",
            Preset::Luad => "LUAD",
            Preset::Brca => "BRCA",
        }
    }

    /// Number of slides in the full cohort.
    pub fn cohort_size(self) -> usize {
        match self {
            Preset::Blca => 373,
            Preset::Luad => 443,
            Preset::Brca => 1061,
        }
    }

    /// Approximate censored fraction of the full cohort.
    pub fn censor_fraction(self) -> f64 {
        match self {
            Preset::Blca => 0.45,
            Preset::Luad => 0.65,
            Preset::Brca => 0.86,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub l1_coeff: f64,
    pub epochs: usize,
    pub earliest_stop_epoch: usize,
    pub patience: usize,
    pub grad_accum_steps: usize,
    pub dropout: f64,
    /// Mixing weight for an instance-level auxiliary loss. None of the heads
    /// define one, so it is carried for the record only.
    pub bag_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Blca)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (learning_rate, weight_decay, patience) = match preset {
            Preset::Blca => (2e-4, 1e-3, 10),
            Preset::Luad => (1e-4, 5e-4, 5),
            Preset::Brca => (5e-5, 5e-4, 10),
        };
        TrainConfig {
            learning_rate,
            weight_decay,
            l1_coeff: 1e-4,
            epochs: 200,
            earliest_stop_epoch: 40,
            patience,
            grad_accum_steps: 32,
            dropout: 0.25,
            bag_weight: 0.7,
            seed: 0,
        }
    }

    /// Shortens the schedule to `epochs`, moving the earliest stop epoch
    /// proportionally (rounded, at least 1).
    pub fn scaled_to(mut self, epochs: usize) -> Self {
        let earliest = (self.earliest_stop_epoch * epochs + self.epochs / 2) / self.epochs;
        self.earliest_stop_epoch = earliest.max(1);
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("l1_coeff", self.l1_coeff),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.epochs == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("epochs and grad_accum_steps must be at least 1".into()));
        }
        if self.earliest_stop_epoch > self.epochs {
            return Err(Error::Config(format!(
                "earliest_stop_epoch {} exceeds epochs {}",
                self.earliest_stop_epoch, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Early stopping on a maximized validation metric.
///
/// Training stops once the epoch (1-based) is at least `earliest` and the
/// best value has not improved for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    earliest: usize,
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(earliest: usize, patience: usize) -> Self {
        EarlyStopping {
            earliest,
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records the metric for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = match self.best {
            Some((_, b)) => metric > b,
            None => true,
        };
        if improved {
            self.best = Some((epoch, metric));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, epoch >= self.earliest && self.stale >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One slide with its survival label.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, T> {
    pub case_id: &'a str,
    pub bag: &'a Tensor<T>,
    pub bin: usize,
    pub time: f64,
    pub censored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cindex: f64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome<T> {
    pub best_epoch: usize,
    pub best_val_cindex: f64,
    pub final_train_loss: f64,
    pub stopped_epoch: usize,
    pub best_params: ParamStore<T>,
    pub log: Vec<EpochLog>,
}

/// `nll + l1_coeff · Σ|w|` over weight parameters (biases, norms and the
/// class token are excluded).
pub fn slide_loss<T: Real>(
    head: &MilHead<T>,
    tape: &mut Tape<'_, T>,
    bag: Var,
    bin: usize,
    censored: bool,
    l1_coeff: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let logits = head.forward(tape, bag, training, rng)?;
    let mut loss = nll_loss(tape, logits, bin, censored, T::lit(DEFAULT_EPS))?;
    if l1_coeff > 0.0 {
        let ids: Vec<_> = head
            .params()
            .ids()
            .filter(|&id| head.params().param(id).kind == ParamKind::Weight)
            .collect();
        let mut l1: Option<Var> = None;
        for id in ids {
            let p = tape.param(id);
            let s = tape.abs_sum(p);
            l1 = Some(match l1 {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        if let Some(l1) = l1 {
            let l1 = tape.scale(l1, T::lit(l1_coeff));
            loss = tape.add(loss, l1)?;
        }
    }
    Ok(loss)
}

/// Runs forward and backward for one slide, adding `scale · ∇loss` into
/// `grads`. Returns the unscaled loss.
pub fn accumulate_slide<T: Real>(
    head: &MilHead<T>,
    grads: &mut Gradients<T>,
    sample: &Sample<'_, T>,
    l1_coeff: f64,
    scale: f64,
    epoch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut tape = head.tape();
    let x = tape.constant_ref(sample.bag);
    let loss = slide_loss(head, &mut tape, x, sample.bin, sample.censored, l1_coeff, true, rng)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            slide: String::from(sample.case_id),
        });
    }
    let scaled = tape.scale(loss, T::lit(scale));
    tape.backward(scaled, grads)?;
    Ok(value.as_f64())
}

/// Evaluation-mode risk score per sample.
pub fn predict_risks<T: Real>(head: &MilHead<T>, samples: &[Sample<'_, T>]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| Ok(risk_score(&head.predict(s.bag)?).as_f64()))
        .collect()
}

pub fn evaluate<T: Real>(head: &MilHead<T>, samples: &[Sample<'_, T>]) -> Result<f64> {
    let risks = predict_risks(head, samples)?;
    let times: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let censored: Vec<bool> = samples.iter().map(|s| s.censored).collect();
    concordance_index(&risks, &times, &censored)
}

/// Trains `head` on `train`, selecting the epoch with the highest
/// validation c-index. On return `head` holds the best parameters.
pub fn train_fold<T: Real>(
    head: &mut MilHead<T>,
    train: &[Sample<'_, T>],
    val: &[Sample<'_, T>],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<FoldOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut adam = Adam::new(head.params(), cfg.learning_rate, cfg.weight_decay);
    let mut grads = Gradients::for_params(head.params());
    let mut stopper = EarlyStopping::new(cfg.earliest_stop_epoch, cfg.patience);
    let scale = 1.0 / cfg.grad_accum_steps as f64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_params = head.params().clone();
    let mut log = Vec::new();
    let mut final_train_loss = f64::NAN;
    let mut stopped_epoch = cfg.epochs;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        grads.zero();
        let mut pending = 0;
        let mut total = 0.0;
        for &i in &order {
            total += accumulate_slide(head, &mut grads, &train[i], cfg.l1_coeff, scale, epoch, rng)?;
            pending += 1;
            if pending == cfg.grad_accum_steps {
                adam.step(head.params_mut(), &grads);
                grads.zero();
                pending = 0;
            }
        }
        if pending > 0 {
            adam.step(head.params_mut(), &grads);
            grads.zero();
        }
        final_train_loss = total / train.len() as f64;
        let val_cindex = evaluate(head, val)?;
        log.push(EpochLog {
            epoch,
            train_loss: final_train_loss,
            val_cindex,
        });
        let (improved, stop) = stopper.observe(epoch, val_cindex);
        if improved {
            best_params = head.params().clone();
        }
        if stop {
            stopped_epoch = epoch;
            break;
        }
    }

    let (best_epoch, best_val_cindex) = stopper.best().expect("at least one epoch ran");
    *head.params_mut() = best_params.clone();
    Ok(FoldOutcome {
        best_epoch,
        best_val_cindex,
        final_train_loss,
        stopped_epoch,
        best_params,
        log,
    })
}
