//! Finite-difference checks of the whole step-two loss for every variant.

use rand::Rng;

use crate::autodiff::gradcheck::{check, merge, uniform, GradCheckReport, DEFAULT_STEP};
use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::demix::head::{DemixHead, DemixVariant, FinalActivation};
use crate::error::{Error, Result};

/// Draws closer than this to a ReLU or MAE kink are redrawn, so a
/// finite-difference step cannot straddle one.
const KINK_MARGIN: f64 = 1e-3;

fn loss(head: &DemixHead, tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let n = head.params.len();
    let bound = Bound::from_vars(v[..n].to_vec());
    let y = head.forward(tape, &bound, v[n], v[n + 1])?;
    tape.mae_loss(y, v[n + 2])
}

/// MAE of each variant against a random target, differentiated with
/// respect to every head parameter, at `trials` random points each.
/// Variants with a final activation are checked with and without it.
pub fn variant_suite(rng: &mut impl Rng, trials: usize) -> Result<Vec<GradCheckReport>> {
    let (dim, rows) = (4, 3);
    let mut reports = Vec::new();
    for variant in DemixVariant::ALL {
        let acts: &[FinalActivation] = if variant.has_final_activation() {
            &[FinalActivation::Relu, FinalActivation::None]
        } else {
            &[FinalActivation::None]
        };
        for &act in acts {
            let name = match (variant.has_final_activation(), act) {
                (true, FinalActivation::Relu) => format!("demix {variant} (relu output)"),
                (true, FinalActivation::None) => format!("demix {variant} (linear output)"),
                _ => format!("demix {variant}"),
            };
            for _ in 0..trials {
                let (head, inputs) = draw(variant, act, dim, rows, rng)?;
                let which: Vec<usize> = (0..head.params.len()).collect();
                let rep = check(&name, &inputs, &which, None, DEFAULT_STEP, rng, |t, v| loss(&head, t, v))?;
                merge(&mut reports, rep);
            }
        }
    }
    Ok(reports)
}

/// A random head and inputs whose loss surface is smooth around the draw.
fn draw(variant: DemixVariant, act: FinalActivation, dim: usize, rows: usize, rng: &mut impl Rng) -> Result<(DemixHead, Vec<Tensor>)> {
    for _ in 0..1000 {
        let mut head = DemixHead::new(variant, dim, act, rng)?;
        let shapes: Vec<(usize, usize)> = head.params.tensors().iter().map(|t| (t.rows(), t.cols())).collect();
        for (t, (r, c)) in head.params.tensors_mut().iter_mut().zip(shapes) {
            *t = uniform(rng, r, c, -1.0, 1.0);
        }
        let mut inputs: Vec<Tensor> = head.params.tensors().to_vec();
        for _ in 0..3 {
            inputs.push(uniform(rng, rows, dim, -1.0, 1.0));
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        loss(&head, &mut tape, &vars)?;
        if tape.kink_margin() > KINK_MARGIN {
            return Ok((head, inputs));
        }
    }
    Err(Error::GradCheck(format!("no smooth point found for {variant}")))
}
