//! Central finite-difference checks against tape gradients.
//!
//! The checker rebuilds the graph from scratch for every perturbed input,
//! so the numerical side never touches any backward rule.

use rand::Rng;

use crate::autodiff::tape::{Mode, RunningStats, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares backward against central differences of `f`.
///
/// `f` builds a scalar loss from leaves holding `inputs`. `which` selects
/// the inputs to check; `coords` caps the number of coordinates checked per
/// input (chosen at random), or checks every coordinate when `None`.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor],
    which: &[usize],
    coords: Option<usize>,
    step: f64,
    rng: &mut impl Rng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), which.contains(&i)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &i in which {
        let analytic = tape.grad(vars[i]);
        let n = inputs[i].numel();
        let positions: Vec<usize> = match coords {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for p in positions {
            let orig = inputs[i].data()[p];
            work[i].data_mut()[p] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[p] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[p] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[p], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Uniform random tensor with entries in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Uniform entries in `±[margin, 1)`, keeping clear of kinks at zero.
pub fn uniform_away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize, margin: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let mag = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// `sum(x ⊙ w)`: a scalar readout whose gradient is not structurally zero.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

/// Largest relative error any suite check may show.
pub const SUITE_TOLERANCE: f64 = 1e-4;

type Case<'a> = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>);

/// Every differentiable tape operation at `trials` random points with
/// entries in [-1, 1]; kink-sensitive inputs stay clear of their kinks.
/// Returns one report per operation, holding the worst error over trials.
pub fn op_suite(rng: &mut impl Rng, trials: usize) -> Result<Vec<GradCheckReport>> {
    let mut worst: Vec<GradCheckReport> = Vec::new();
    for _ in 0..trials {
        let w43 = uniform(rng, 4, 3, -1.0, 1.0);
        let a = uniform(rng, 4, 3, -1.0, 1.0);
        let b = uniform(rng, 4, 3, -1.0, 1.0);
        let bias = uniform(rng, 1, 3, -1.0, 1.0);
        let wmat = uniform(rng, 3, 3, -1.0, 1.0);
        let w32 = uniform(rng, 3, 2, -1.0, 1.0);
        let w42 = uniform(rng, 4, 2, -1.0, 1.0);
        let kinked = uniform_away_from_zero(rng, 4, 3, 0.05);
        let shifted: Vec<f64> = a.data().iter().zip(kinked.data()).map(|(x, k)| x + k).collect();
        let shifted = Tensor::from_parts(vec![4, 3], shifted);
        let w46 = uniform(rng, 4, 6, -1.0, 1.0);
        let w29 = uniform(rng, 2, 9, -1.0, 1.0);
        let w23 = uniform(rng, 2, 3, -1.0, 1.0);
        let w26 = uniform(rng, 2, 6, -1.0, 1.0);
        let logits = uniform(rng, 3, 5, -1.0, 1.0);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
        let gamma = uniform(rng, 1, 3, 0.5, 1.5);
        let beta = uniform(rng, 1, 3, -1.0, 1.0);

        let ew = |op: fn(&mut Tape, Var, Var) -> Result<Var>, w: Tensor| -> Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>> {
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = op(t, v[0], v[1])?;
                weighted_sum(t, y, &w)
            })
        };
        let cases: Vec<Case> = vec![
            ("matmul", vec![a.clone(), w32.clone()], ew(Tape::matmul, w42.clone())),
            ("add", vec![a.clone(), b.clone()], ew(Tape::add, w43.clone())),
            ("sub", vec![a.clone(), b.clone()], ew(Tape::sub, w43.clone())),
            ("mul", vec![a.clone(), b.clone()], ew(Tape::mul, w43.clone())),
            ("concat", vec![a.clone(), b.clone()], ew(Tape::concat, w46.clone())),
            ("linear", vec![a.clone(), wmat.clone(), bias.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y, &w43)
            })),
            ("relu", vec![kinked.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y, &w43)
            })),
            ("mae_loss", vec![a.clone(), shifted.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.mae_loss(v[0], v[1]))),
            ("tdnn_splice", vec![a.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.tdnn_splice(v[0], &[-1, 0, 1], 1)?;
                weighted_sum(t, y, &w29)
            })),
            ("trim_frames", vec![a.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.trim_frames(v[0], 2, 0, 1)?;
                weighted_sum(t, y, &w23)
            })),
            ("stats_pool", vec![a.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.stats_pool(v[0], 2)?;
                weighted_sum(t, y, &w26)
            })),
            ("batch_norm", vec![a.clone(), gamma.clone(), beta.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
                let mut stats = RunningStats::new(3);
                let y = t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)?;
                weighted_sum(t, y, &w43)
            })),
            ("softmax_cross_entropy", vec![logits.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
                t.softmax_cross_entropy(v[0], &labels)
            })),
            ("sum", vec![a.clone()], Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.mul(v[0], v[0])?;
                t.sum(y)
            })),
        ];
        for (name, inputs, f) in cases {
            let which: Vec<usize> = (0..inputs.len()).collect();
            let rep = check(name, &inputs, &which, None, DEFAULT_STEP, rng, f)?;
            merge(&mut worst, rep);
        }
    }
    Ok(worst)
}

/// Keeps one report per name with the worst error and the total count.
pub fn merge(reports: &mut Vec<GradCheckReport>, rep: GradCheckReport) {
    match reports.iter_mut().find(|r| r.name == rep.name) {
        Some(r) => {
            r.checked += rep.checked;
            r.max_rel_error = r.max_rel_error.max(rep.max_rel_error);
        }
        None => reports.push(rep),
    }
}
