//! Finite-difference gradient checking.
//!
//! The tape computes gradients in 32-bit floats; the oracle here recomputes
//! them by central differences on a 64-bit evaluation of the same objective,
//! so rounding noise in the check sits far below the tolerances it enforces.
//! The oracle only ever runs forward passes — it is independent of every
//! backward rule it validates.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{AdResult, NodeId, Tape};
use crate::tensor::Tensor;

/// A scalar-valued function of named parameter tensors, buildable on a tape
/// at any scalar precision.
///
/// `params` arrive as leaf ids in the order the harness registered them;
/// any constants the objective needs must be deterministic across calls.
pub trait Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[NodeId]) -> AdResult<NodeId>;
}

/// Knobs for a gradient check.
#[derive(Clone, Debug)]
pub struct CheckSettings {
    /// Central-difference step.
    pub step: f64,
    /// Maximum acceptable relative error.
    pub tol: f64,
    /// When set, check only this many entries per parameter tensor
    /// (deterministically sampled); otherwise check every entry.
    pub samples_per_param: Option<usize>,
    /// Seed for entry sampling.
    pub seed: u64,
}

impl CheckSettings {
    pub fn exhaustive(tol: f64) -> Self {
        CheckSettings { step: 1e-3, tol, samples_per_param: None, seed: 0x5eed }
    }
}

/// Worst relative error observed for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

/// Outcome of checking one objective.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

/// Symmetrized relative error between an autodiff and a finite-difference
/// gradient entry.
pub fn relative_error(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8)
}

/// Checks the tape gradient of `obj` against central finite differences.
pub fn grad_check<O: Objective>(
    obj: &O,
    params: &[(String, Tensor<f64>)],
    settings: &CheckSettings,
) -> AdResult<CheckReport> {
    // Production pass: f32 tape, backward.
    let mut tape = Tape::<f32>::new();
    let ids: Vec<NodeId> =
        params.iter().map(|(_, t)| tape.leaf(t.cast::<f32>(), true)).collect();
    let loss = obj.eval(&mut tape, &ids)?;
    tape.backward(loss)?;
    let ad: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf requires grad").iter().map(|v| v.wide()).collect())
        .collect();

    // Oracle pass: perturbed f64 forward evaluations only.
    let mut work: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = Rng::new(settings.seed);
    let mut reports = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let n = work[pi].numel();
        let entries: Vec<usize> = match settings.samples_per_param {
            Some(k) if k < n => {
                let mut picked = Vec::with_capacity(k);
                while picked.len() < k {
                    let e = rng.below(n);
                    if !picked.contains(&e) {
                        picked.push(e);
                    }
                }
                picked
            }
            _ => (0..n).collect(),
        };
        let mut max_rel = 0.0f64;
        for &e in &entries {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + settings.step;
            let f_plus = eval_forward(obj, &work)?;
            work[pi].data_mut()[e] = orig - settings.step;
            let f_minus = eval_forward(obj, &work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (f_plus - f_minus) / (2.0 * settings.step);
            max_rel = max_rel.max(relative_error(ad[pi][e], fd));
        }
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_err: max_rel,
            entries_checked: entries.len(),
        });
    }
    Ok(CheckReport { tol: settings.tol, params: reports })
}

fn eval_forward<O: Objective>(obj: &O, params: &[Tensor<f64>]) -> AdResult<f64> {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = obj.eval(&mut tape, &ids)?;
    Ok(tape.scalar_value(loss))
}

// ───────────────────────── per-op objectives ─────────────────────────

/// Reduces a node to a scalar through a fixed pseudo-random weighting, so
/// permutation and transposition mistakes cannot cancel out.
fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, y: NodeId, seed: u64) -> AdResult<NodeId> {
    let shape = tape.shape(y).to_vec();
    let mut rng = Rng::new(seed);
    let w = Tensor::<f64>::randn(&shape, 1.0, &mut rng).cast::<T>();
    let wid = tape.constant(w);
    let p = tape.mul(y, wid)?;
    Ok(tape.sum_all(p))
}

enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    MatMul,
    Transpose,
    SliceConcat,
    Linear,
    Conv2d,
    Silu,
    Sqrt,
    SoftmaxRows,
    PoolDown,
    PoolUp,
    Rope,
    ColSums,
    MeanAll,
}

struct OpObjective {
    kind: OpKind,
}

impl Objective for OpObjective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: &[NodeId]) -> AdResult<NodeId> {
        let y = match self.kind {
            OpKind::Add => tape.add(p[0], p[1])?,
            OpKind::Sub => tape.sub(p[0], p[1])?,
            OpKind::Mul => tape.mul(p[0], p[1])?,
            OpKind::Div => tape.div(p[0], p[1])?,
            OpKind::Affine => tape.affine(p[0], T::lit(1.7), T::lit(-0.3)),
            OpKind::MatMul => tape.matmul(p[0], p[1])?,
            OpKind::Transpose => tape.transpose2d(p[0])?,
            OpKind::SliceConcat => {
                let top = tape.slice_rows(p[0], 0, 2)?;
                let rest = tape.slice_rows(p[0], 3, 5)?;
                tape.concat_rows(rest, top)?
            }
            OpKind::Linear => tape.linear(p[0], p[1], p[2])?,
            OpKind::Conv2d => tape.conv2d(p[0], p[1], p[2])?,
            OpKind::Silu => tape.silu(p[0]),
            OpKind::Sqrt => tape.sqrt(p[0])?,
            OpKind::SoftmaxRows => tape.softmax_rows(p[0])?,
            OpKind::PoolDown => tape.adaptive_avg_pool2d(p[0], 3, 2)?,
            OpKind::PoolUp => tape.resize_pool(p[0], 5, 4)?,
            OpKind::Rope => {
                let (n, d) = (6usize, 8usize);
                let mut rng = Rng::new(0xA11);
                let angles: Vec<f64> = (0..n * d / 2).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
                let cos: Vec<T> = angles.iter().map(|a| T::lit(a.cos())).collect();
                let sin: Vec<T> = angles.iter().map(|a| T::lit(a.sin())).collect();
                tape.rope_rows(p[0], &cos, &sin)?
            }
            OpKind::ColSums => tape.col_sums(p[0])?,
            OpKind::MeanAll => return Ok(tape.mean_all(p[0])),
        };
        weighted_sum(tape, y, 0xC0FE)
    }
}

fn named(name: &str, shapes: &[&[usize]], seed: u64) -> Vec<(String, Tensor<f64>)> {
    let mut rng = Rng::new(seed);
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("{name}.{i}"), Tensor::randn(s, 1.0, &mut rng)))
        .collect()
}

fn positive(params: &mut [(String, Tensor<f64>)], lo: f64, hi: f64, seed: u64) {
    let mut rng = Rng::new(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.uniform_in(lo, hi);
        }
    }
}

/// Gradient-checks every tape op in isolation at the given tolerance.
pub fn op_suite(tol: f64) -> Vec<(String, AdResult<CheckReport>)> {
    let settings = CheckSettings::exhaustive(tol);
    let mut out = Vec::new();
    let mut run = |name: &str, kind: OpKind, params: Vec<(String, Tensor<f64>)>| {
        let report = grad_check(&OpObjective { kind }, &params, &settings);
        out.push((name.to_string(), report));
    };

    run("add", OpKind::Add, named("add", &[&[3, 4], &[3, 4]], 101));
    run("sub", OpKind::Sub, named("sub", &[&[3, 4], &[3, 4]], 102));
    run("mul", OpKind::Mul, named("mul", &[&[3, 4], &[3, 4]], 103));
    let mut div = named("div", &[&[3, 4], &[3, 4]], 104);
    positive(&mut div[1..], 0.5, 1.5, 105);
    run("div", OpKind::Div, div);
    run("affine", OpKind::Affine, named("affine", &[&[2, 5]], 106));
    run("matmul", OpKind::MatMul, named("matmul", &[&[3, 4], &[4, 5]], 107));
    run("transpose", OpKind::Transpose, named("transpose", &[&[3, 5]], 108));
    run("slice_concat", OpKind::SliceConcat, named("slice_concat", &[&[5, 3]], 109));
    run("linear", OpKind::Linear, named("linear", &[&[5, 3], &[3, 4], &[4]], 110));
    run("conv2d", OpKind::Conv2d, named("conv2d", &[&[2, 4, 5], &[3, 2, 3, 3], &[3]], 111));
    run("silu", OpKind::Silu, named("silu", &[&[4, 4]], 112));
    let mut sq = named("sqrt", &[&[3, 3]], 113);
    positive(&mut sq, 0.5, 2.0, 114);
    run("sqrt", OpKind::Sqrt, sq);
    run("softmax_rows", OpKind::SoftmaxRows, named("softmax_rows", &[&[4, 7]], 115));
    run("pool_down", OpKind::PoolDown, named("pool_down", &[&[2, 7, 5]], 116));
    run("pool_up", OpKind::PoolUp, named("pool_up", &[&[2, 3, 3]], 117));
    run("rope", OpKind::Rope, named("rope", &[&[6, 8]], 118));
    run("col_sums", OpKind::ColSums, named("col_sums", &[&[4, 6]], 119));
    run("mean_all", OpKind::MeanAll, named("mean_all", &[&[3, 4]], 120));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for (name, report) in op_suite(1e-4) {
            let report = report.expect(&name);
            assert!(
                report.passed(),
                "{name}: max rel err {} over tol {}",
                report.max_rel_err(),
                report.tol
            );
        }
    }

    #[test]
    fn op_checks_repeat_identically() {
        let errs = |suite: Vec<(String, AdResult<CheckReport>)>| {
            suite
                .into_iter()
                .map(|(n, r)| (n, r.unwrap().max_rel_err().to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(errs(op_suite(1e-4)), errs(op_suite(1e-4)));
    }

    /// An objective whose 32-bit path computes the negated function: the
    /// harness must flag the resulting sign-flipped gradients.
    struct SignCorrupted;

    impl Objective for SignCorrupted {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: &[NodeId]) -> AdResult<NodeId> {
            let flip = if std::mem::size_of::<T>() == 4 { -1.0 } else { 1.0 };
            let y = tape.mul_scalar(p[0], T::lit(flip));
            weighted_sum(tape, y, 0xBAD)
        }
    }

    #[test]
    fn sign_flipped_gradients_fail_the_check() {
        let params = named("x", &[&[3, 3]], 200);
        let report = grad_check(&SignCorrupted, &params, &CheckSettings::exhaustive(1e-4)).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err() > 0.5, "rel err {}", report.max_rel_err());
    }

    #[test]
    fn relative_error_formula_matches_definition() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, -1.0) - 1.0).abs() < 1e-12);
        // Tiny denominators clamp at 1e-8.
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-9);
    }
}
