//! Central finite-difference verification of tape gradients.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::heads::{nystrom_attention, pinv_newton_schulz, HeadConfig, HeadKind, MilHead};
use crate::params::{Gradients, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::survival::{nll_loss, DEFAULT_EPS};
use crate::tape::{Axis, Reduce, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub tolerance: f64,
    /// Set when the function produced a non-finite value at any probe.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_error() < self.tolerance
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval<F>(params: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape)?;
    Ok(tape.value(out).item())
}

/// Gradients of the scalar produced by `f` with respect to every parameter,
/// from one backward pass.
pub fn analytic_gradients<F>(params: &ParamStore<f64>, f: &F) -> Result<Gradients<f64>>
where
    F: for<'t> Fn(&mut Tape<'t, f64>) -> Result<Var>,
{
    let mut grads = Gradients::for_params(params);
    let mut tape = Tape::new(params);
    let out = f(&mut tape)?;
    tape.backward(out, &mut grads)?;
    Ok(grads)
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every scalar parameter.
/// Returns `Ok(None)` if any probe is non-finite.
pub fn numeric_gradients<F>(params: &mut ParamStore<f64>, f: &F, step: f64) -> Result<Option<Gradients<f64>>>
where
    F: for<'t> Fn(&mut Tape<'t, f64>) -> Result<Var>,
{
    let mut out = Gradients::for_params(params);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(params, f)?;
            params.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(params, f)?;
            params.get_mut(id).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Ok(None);
            }
            out.get_mut(id).data_mut()[k] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(Some(out))
}

pub fn compare(params: &ParamStore<f64>, analytic: &Gradients<f64>, numeric: &Gradients<f64>, tolerance: f64) -> GradCheckReport {
    let per_param = params
        .ids()
        .map(|id| {
            let max_rel_error = analytic
                .get(id)
                .data()
                .iter()
                .zip(numeric.get(id).data())
                .fold(0.0f64, |m, (&a, &n)| m.max(relative_error(a, n)));
            ParamError {
                name: params.param(id).name.clone(),
                max_rel_error,
            }
        })
        .collect();
    GradCheckReport {
        per_param,
        tolerance,
        non_finite: false,
    }
}

/// Checks tape gradients of `f` against central differences for every
/// parameter in `params`.
pub fn grad_check<F>(params: &mut ParamStore<f64>, f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(alloc::format!("finite-difference step {step} must be positive")));
    }
    let base = eval(params, &f)?;
    let non_finite_report = |params: &ParamStore<f64>| GradCheckReport {
        per_param: params
            .iter()
            .map(|p| ParamError {
                name: p.name.clone(),
                max_rel_error: f64::INFINITY,
            })
            .collect(),
        tolerance,
        non_finite: true,
    };
    if !base.is_finite() {
        return Ok(non_finite_report(params));
    }
    let analytic = analytic_gradients(params, &f)?;
    match numeric_gradients(params, &f, step)? {
        Some(numeric) => Ok(compare(params, &analytic, &numeric, tolerance)),
        None => Ok(non_finite_report(params)),
    }
}

/// Tolerance for single tape operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Tolerance for whole heads, end to end through the survival loss.
pub const HEAD_TOLERANCE: f64 = 1e-4;

/// Reduced sizes used for end-to-end head checks: bag size, input, hidden
/// and attention widths.
pub const SMALL_BAG: usize = 7;

/// Small-width configuration of `kind` (D=16, H=8, A=4). TransMIL uses two
/// heads of width 4 and four landmarks so that landmark averaging and the
/// iterative pseudo-inverse are both exercised.
pub fn small_head_config(kind: HeadKind) -> HeadConfig {
    let mut c = HeadConfig::new(kind, 16);
    c.hidden_dim = 8;
    c.attn_dim = 4;
    c.transmil.heads = 2;
    c.transmil.head_dim = 4;
    c.transmil.landmarks = 4;
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

type CaseFn = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    Tensor::new(rows, cols, data).expect("positive dims")
}

/// Entries with magnitude in `[0.2, 1]`, keeping kinked ops (ReLU, |x|)
/// away from their non-differentiable points.
fn off_zero(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
    random(rows, cols, rng).map(|x| if x < 0.0 { x - 0.2 } else { x + 0.2 } * 0.8)
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// element carries a distinct upstream gradient.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let s = tape.shape(y);
    let w = random(s.rows, s.cols, &mut Rng::new(seed, 0x5eed));
    let w = tape.constant(w);
    let yw = tape.mul(y, w)?;
    Ok(tape.sum(yw))
}

fn primitive_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = Rng::new(seed, 1);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $f:expr) => {
            cases.push(Case { name: $name, inputs: vec![$($input),*], f: Box::new($f) })
        };
    }
    case!("matmul", [random(3, 4, r), random(4, 2, r)], |t, v| t.matmul(v[0], v[1]));
    case!("linear", [random(3, 4, r), random(4, 2, r), random(1, 2, r)], |t, v| t.linear(v[0], v[1], Some(v[2])));
    case!("transpose", [random(3, 2, r)], |t, v| Ok(t.transpose(v[0])));
    case!("add", [random(2, 3, r), random(2, 3, r)], |t, v| t.add(v[0], v[1]));
    case!("sub", [random(2, 3, r), random(2, 3, r)], |t, v| t.sub(v[0], v[1]));
    case!("mul", [random(2, 3, r), random(2, 3, r)], |t, v| t.mul(v[0], v[1]));
    case!("add_row", [random(3, 2, r), random(1, 2, r)], |t, v| t.add_row(v[0], v[1]));
    case!("scale", [random(2, 2, r)], |t, v| Ok(t.scale(v[0], -1.7)));
    case!("add_scalar", [random(2, 2, r)], |t, v| Ok(t.add_scalar(v[0], 0.3)));
    case!("rsub", [random(2, 2, r)], |t, v| Ok(t.rsub(1.0, v[0])));
    case!("relu", [off_zero(3, 3, r)], |t, v| Ok(t.relu(v[0])));
    case!("tanh", [random(3, 3, r)], |t, v| Ok(t.tanh(v[0])));
    case!("sigmoid", [random(3, 3, r)], |t, v| Ok(t.sigmoid(v[0])));
    case!("log", [random(2, 3, r).map(|x| 1.1 + x)], |t, v| Ok(t.log(v[0])));
    case!(
        "clamp",
        [Tensor::from_f64(2, 3, &[-0.9, -0.31, 0.05, 0.2, 0.44, 0.83])?],
        |t, v| Ok(t.clamp(v[0], -0.5, 0.5))
    );
    case!("abs_sum", [off_zero(2, 3, r)], |t, v| Ok(t.abs_sum(v[0])));
    case!("softmax_rows", [random(4, 3, r)], |t, v| Ok(t.softmax(v[0], Axis::Rows)));
    case!("softmax_cols", [random(4, 3, r)], |t, v| Ok(t.softmax(v[0], Axis::Cols)));
    case!("reduce_mean", [random(5, 3, r)], |t, v| t.reduce_rows(v[0], Reduce::Mean));
    case!("reduce_max", [random(5, 3, r)], |t, v| t.reduce_rows(v[0], Reduce::Max));
    case!("sum", [random(3, 2, r)], |t, v| Ok(t.sum(v[0])));
    case!(
        "layer_norm",
        [random(3, 5, r), random(1, 5, r), random(1, 5, r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)
    );
    case!("dropout", [random(4, 4, r)], |t, v| t.dropout(v[0], 0.25, &mut Rng::new(3, 3), true));
    case!("gather_rows", [random(3, 2, r)], |t, v| t.gather_rows(v[0], vec![2, 0, 2, 1]));
    case!("concat_rows", [random(2, 3, r), random(1, 3, r)], |t, v| t.concat_rows(&[v[0], v[1]]));
    case!("slice_cols", [random(3, 5, r)], |t, v| t.slice_cols(v[0], 1, 3));
    case!("concat_cols", [random(3, 2, r), random(3, 1, r)], |t, v| t.concat_cols(&[v[0], v[1]]));
    case!("cumprod", [random(2, 4, r)], |t, v| Ok(t.cumprod(v[0])));
    case!("pick", [random(2, 4, r)], |t, v| t.pick(v[0], 1, 2));
    case!("seq_conv", [random(6, 3, r), random(1, 5, r)], |t, v| t.seq_conv(v[0], v[1]));
    case!(
        "depthwise_conv2d",
        [random(9, 2, r), random(2, 9, r), random(1, 2, r)],
        |t, v| t.depthwise_conv2d(v[0], v[1], v[2], 3)
    );
    case!(
        "depthwise_conv2d_wide",
        [random(4, 2, r), random(2, 25, r), random(1, 2, r)],
        |t, v| t.depthwise_conv2d(v[0], v[1], v[2], 2)
    );
    case!("pinv_init", [random(3, 3, r)], |t, v| Ok(t.pinv_init(v[0])));
    case!("identity_minus", [random(3, 3, r)], |t, v| t.identity_minus(7.0, v[0]));
    let well_posed = random(4, 4, r).map(|x| 0.15 * x);
    let well_posed = Tensor::<f64>::identity(4)
        .data()
        .iter()
        .zip(well_posed.data())
        .map(|(a, b)| a + b)
        .collect::<Vec<_>>();
    case!("pinv_newton_schulz", [Tensor::new(4, 4, well_posed)?], |t, v| pinv_newton_schulz(t, v[0], 6));
    case!(
        "nystrom_attention",
        [random(6, 3, r), random(6, 3, r), random(6, 3, r)],
        |t, v| nystrom_attention(t, v[0], v[1], v[2], 3, 6)
    );
    case!("nll_uncensored", [random(1, 4, r)], |t, v| nll_loss(t, v[0], 2, false, DEFAULT_EPS));
    case!("nll_censored", [random(1, 4, r)], |t, v| nll_loss(t, v[0], 1, true, DEFAULT_EPS));
    Ok(cases)
}

/// Gradient checks of every differentiable tape operation on small random
/// inputs, each against [`PRIMITIVE_TOLERANCE`].
pub fn primitive_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    for case in primitive_cases(seed)? {
        let mut store = ParamStore::new();
        let ids: Vec<_> = case
            .inputs
            .iter()
            .enumerate()
            .map(|(i, x)| store.add(format!("{}.in{i}", case.name), ParamKind::Weight, x.clone()))
            .collect();
        let f = &case.f;
        let report = grad_check(
            &mut store,
            |tape| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
                let y = f(tape, &vars)?;
                project(tape, y, seed)
            },
            DEFAULT_STEP,
            PRIMITIVE_TOLERANCE,
        )?;
        out.push(NamedReport {
            name: case.name.into(),
            report,
        });
    }
    Ok(out)
}

/// End-to-end check of one head: survival NLL of a random `7×16` bag, with
/// dropout active under a fixed mask.
pub fn head_check(kind: HeadKind, seed: u64) -> Result<NamedReport> {
    let config = small_head_config(kind);
    let mut rng = Rng::new(seed, 2);
    let head = MilHead::<f64>::new(config, &mut rng)?;
    let bag = random(SMALL_BAG, config.input_dim, &mut rng);
    let (config, mut store, layout) = head.into_raw();
    let report = grad_check(
        &mut store,
        |tape| {
            let x = tape.constant(bag.clone());
            let logits = layout.run(&config, tape, x, true, &mut Rng::new(seed, 4))?.logits;
            nll_loss(tape, logits, 1, false, DEFAULT_EPS)
        },
        DEFAULT_STEP,
        HEAD_TOLERANCE,
    )?;
    Ok(NamedReport {
        name: kind.display_name().into(),
        report,
    })
}

pub fn head_suite(seed: u64) -> Result<Vec<NamedReport>> {
    HeadKind::ALL.iter().map(|&k| head_check(k, seed)).collect()
}
