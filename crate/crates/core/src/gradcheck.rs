//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so near-zero gradients are
/// compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    /// Number of scalar parameters compared.
    pub checked: usize,
}

impl GradCheckReport {
    fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let max_rel_error = self.max_rel_error.max(other.max_rel_error);
        GradCheckReport {
            max_rel_error,
            tol: self.tol,
            passed: self.passed && other.passed,
            checked: self.checked + other.checked,
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks d`f`/d`x` for a single input tensor.
pub fn gradient_check<S, F>(f: F, x: &Tensor<S>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    gradient_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x), step, tol)
}

/// Checks the gradient of `f` with respect to every tensor in `xs`.
pub fn gradient_check_many<S, F>(f: F, xs: &[Tensor<S>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    check_with_hook(&f, xs, step, tol, 1.0)
}

/// `analytic_scale` multiplies the analytic gradient before comparison; any
/// value other than 1 simulates a broken backward rule.
pub(crate) fn check_with_hook<S, F>(
    f: &F,
    xs: &[Tensor<S>],
    step: f64,
    tol: f64,
    analytic_scale: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |inputs: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Shape(format!("checked function returned shape {:?}", v.shape())));
        }
        let v = v.item().f64();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("function value {v} is not finite")));
        }
        Ok(v)
    };
    eval(xs)?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = xs.to_vec();
    for (which, v) in vars.iter().enumerate() {
        let analytic = grads.data(*v).to_vec();
        for i in 0..xs[which].len() {
            let orig = xs[which].data()[i];
            probe[which].data_mut()[i] = S::of(orig.f64() + step);
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = S::of(orig.f64() - step);
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(i).map(|g| g.f64()).unwrap_or(0.0) * analytic_scale;
            worst = worst.max(rel_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        tol,
        passed: worst <= tol,
        checked,
    })
}

/// Op kinds covered by [`check_op`].
pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "relu",
    "linear",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "scale",
    "affine",
    "mul_scalar",
    "masked_sum",
    "l2_normalize",
    "dot",
    "sum",
    "matmul_nt",
    "concat",
    "stack_rows",
    "row",
    "reshape",
    "softmax_cross_entropy",
];

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Values in [-2, 2] kept at least `gap` away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    if tape.value(y).is_scalar() {
        return Ok(y);
    }
    let w = tape.constant(weights.clone().reshaped(tape.value(y).shape().to_vec())?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, usize);

fn build_case(name: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let case: (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, usize) = match name {
        "conv2d" => (
            vec![uniform(rng, vec![4, 4, 2]), uniform(rng, vec![3, 3, 2, 3]), uniform(rng, vec![3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2])),
            48,
        ),
        "relu" => (vec![away_from_zero(rng, vec![6], 0.05)], Box::new(|t, v| t.relu(v[0])), 6),
        "linear" => (
            vec![uniform(rng, vec![3, 4]), uniform(rng, vec![4, 5]), uniform(rng, vec![5])],
            Box::new(|t, v| t.linear(v[0], v[1], v[2])),
            15,
        ),
        "sigmoid" => (vec![uniform(rng, vec![6])], Box::new(|t, v| t.sigmoid(v[0])), 6),
        "add" => (vec![uniform(rng, vec![5]), uniform(rng, vec![5])], Box::new(|t, v| t.add(v[0], v[1])), 5),
        "sub" => (vec![uniform(rng, vec![5]), uniform(rng, vec![5])], Box::new(|t, v| t.sub(v[0], v[1])), 5),
        "mul" => (vec![uniform(rng, vec![5]), uniform(rng, vec![5])], Box::new(|t, v| t.mul(v[0], v[1])), 5),
        "scale" => {
            let c = rng.gen_range(-2.0..2.0);
            (vec![uniform(rng, vec![5])], Box::new(move |t, v| t.scale(v[0], c)), 5)
        }
        "affine" => {
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            (vec![uniform(rng, vec![5])], Box::new(move |t, v| t.affine(v[0], a, b)), 5)
        }
        "mul_scalar" => (
            vec![uniform(rng, vec![5]), uniform(rng, vec![])],
            Box::new(|t, v| t.mul_scalar(v[0], v[1])),
            5,
        ),
        "masked_sum" => {
            let mask: Vec<bool> = (0..9).map(|_| rng.gen_bool(0.5)).collect();
            (
                vec![uniform(rng, vec![3, 3, 4])],
                Box::new(move |t, v| {
                    let flat = t.reshape(v[0], vec![9, 4])?;
                    t.masked_sum(flat, mask.clone())
                }),
                4,
            )
        }
        "l2_normalize" => (vec![uniform(rng, vec![3, 4])], Box::new(|t, v| t.l2_normalize(v[0])), 12),
        "dot" => (vec![uniform(rng, vec![5]), uniform(rng, vec![5])], Box::new(|t, v| t.dot(v[0], v[1])), 1),
        "sum" => (vec![uniform(rng, vec![2, 3])], Box::new(|t, v| t.sum(v[0])), 1),
        "matmul_nt" => (
            vec![uniform(rng, vec![3, 4]), uniform(rng, vec![2, 4])],
            Box::new(|t, v| t.matmul_nt(v[0], v[1])),
            6,
        ),
        "concat" => (
            vec![uniform(rng, vec![2, 3]), uniform(rng, vec![1, 3])],
            Box::new(|t, v| t.concat(&[v[0], v[1]])),
            9,
        ),
        "stack_rows" => (
            vec![uniform(rng, vec![3]), uniform(rng, vec![3])],
            Box::new(|t, v| t.stack_rows(&[v[0], v[1]])),
            6,
        ),
        "row" => (vec![uniform(rng, vec![3, 4])], Box::new(|t, v| t.row(v[0], 1)), 4),
        "reshape" => (vec![uniform(rng, vec![2, 3])], Box::new(|t, v| t.reshape(v[0], vec![3, 2])), 6),
        "softmax_cross_entropy" => {
            let mut targets: Vec<Option<usize>> = (0..5).map(|_| Some(rng.gen_range(0..4))).collect();
            targets[2] = None;
            (
                vec![uniform(rng, vec![5, 4])],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], targets.clone())),
                1,
            )
        }
        other => return Err(Error::UnsupportedOp(other.to_string())),
    };
    Ok(case)
}

/// Randomized finite-difference check of one op kind over `trials` draws.
pub fn check_op(name: &str, trials: usize, seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    check_op_hooked(name, trials, seed, step, tol, 1.0)
}

pub fn check_op_hooked(
    name: &str,
    trials: usize,
    seed: u64,
    step: f64,
    tol: f64,
    analytic_scale: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report: Option<GradCheckReport> = None;
    for _ in 0..trials.max(1) {
        let (inputs, op, out_len) = build_case(name, &mut rng)?;
        let weights = uniform(&mut rng, vec![out_len]);
        let f = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let y = op(t, v)?;
            weighted_sum(t, y, &weights)
        };
        let r = check_with_hook(&f, &inputs, step, tol, analytic_scale)?;
        report = Some(match report {
            None => r,
            Some(acc) => acc.merge(r),
        });
    }
    Ok(report.expect("at least one trial"))
}

/// Name under which the end-to-end dual-loss check is reported.
pub const DUAL_LOSS: &str = "dual_loss";

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks every op kind and the end-to-end dual loss. `corrupt` names an
/// entry whose analytic gradient is deliberately scaled by 1.01.
pub fn run_suite(trials: usize, seed: u64, step: f64, tol: f64, corrupt: Option<&str>) -> Result<Vec<SuiteEntry>> {
    if let Some(name) = corrupt {
        if name != DUAL_LOSS && !OP_NAMES.contains(&name) {
            return Err(Error::UnsupportedOp(name.to_string()));
        }
    }
    let scale = |name: &str| if corrupt == Some(name) { 1.01 } else { 1.0 };
    let mut out = Vec::with_capacity(OP_NAMES.len() + 1);
    for (i, &name) in OP_NAMES.iter().enumerate() {
        let report = check_op_hooked(name, trials, seed.wrapping_add(i as u64), step, tol, scale(name))?;
        out.push(SuiteEntry {
            name: name.to_string(),
            report,
        });
    }
    let report = crate::train::check_dual_loss_gradients(seed, step, tol, scale(DUAL_LOSS))?;
    out.push(SuiteEntry {
        name: DUAL_LOSS.to_string(),
        report,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_with_itself_passes() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let r = gradient_check(|t, v| t.dot(v, v), &x, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::vector(vec![1.0]);
        assert!(matches!(gradient_check(|t, v| t.sum(v), &x, 0.0, 1e-4), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_value_is_numerical_error() {
        let x = Tensor::vector(vec![f64::INFINITY]);
        assert!(matches!(
            gradient_check(|t, v| t.sum(v), &x, 1e-5, 1e-4),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn unknown_op_name() {
        assert!(matches!(check_op("fft", 1, 0, 1e-5, 1e-4), Err(Error::UnsupportedOp(_))));
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let r = check_op_hooked("linear", 3, 1, 1e-5, 1e-4, 1.01).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn softmax_ce_random_logits_pass() {
        let r = check_op("softmax_cross_entropy", 10, 5, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
