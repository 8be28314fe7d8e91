//! The six de-mixing functions and their parameters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::embedding::{push_dense, Dense};
use crate::error::{Error, Result};
use crate::store::Archive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemixVariant {
    Sub,
    Mul,
    Concat1,
    Concat2,
    ShareConcat,
    SeparateConcat,
}

impl DemixVariant {
    pub const ALL: [DemixVariant; 6] = [
        DemixVariant::Sub,
        DemixVariant::Mul,
        DemixVariant::Concat1,
        DemixVariant::Concat2,
        DemixVariant::ShareConcat,
        DemixVariant::SeparateConcat,
    ];

    /// Command-line and file-name spelling.
    pub fn slug(self) -> &'static str {
        match self {
            DemixVariant::Sub => "sub",
            DemixVariant::Mul => "mul",
            DemixVariant::Concat1 => "concat1",
            DemixVariant::Concat2 => "concat2",
            DemixVariant::ShareConcat => "share-concat",
            DemixVariant::SeparateConcat => "separate-concat",
        }
    }

    /// Row label in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            DemixVariant::Sub => "Sub",
            DemixVariant::Mul => "Mul",
            DemixVariant::Concat1 => "Concat1",
            DemixVariant::Concat2 => "Concat2",
            DemixVariant::ShareConcat => "Share-Concat",
            DemixVariant::SeparateConcat => "Separate-Concat",
        }
    }

    /// Whether the final activation setting applies to this variant.
    pub fn has_final_activation(self) -> bool {
        matches!(self, DemixVariant::ShareConcat | DemixVariant::SeparateConcat)
    }
}

impl fmt::Display for DemixVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for DemixVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DemixVariant::ALL
            .into_iter()
            .find(|v| v.slug() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Which speaker's clean embedding is supplied and which one is predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// The interferer is known; the target is predicted.
    KnownInterferer,
    /// The target is known; the interferer is predicted.
    KnownTarget,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::KnownInterferer, Direction::KnownTarget];

    pub fn slug(self) -> &'static str {
        match self {
            Direction::KnownInterferer => "known-interferer",
            Direction::KnownTarget => "known-target",
        }
    }

    /// (known, predicted) utterances of a target/interferer pair.
    pub fn roles<'a>(self, target: &'a str, interferer: &'a str) -> (&'a str, &'a str) {
        match self {
            Direction::KnownInterferer => (interferer, target),
            Direction::KnownTarget => (target, interferer),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.slug() == s)
            .ok_or_else(|| Error::UnknownDirection(s.to_string()))
    }
}

/// Activation on the output of the two branch variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalActivation {
    #[default]
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layout {
    /// Sub, Mul and Concat1: one affine layer.
    Single(Dense),
    /// Concat2: ReLU layer then affine layer.
    Stacked(Dense, Dense),
    /// Share-Concat: one branch transform applied to both inputs.
    Shared { branch: Dense, out: Dense },
    /// Separate-Concat: one branch transform per input.
    Separate { mix: Dense, known: Dense, out: Dense },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemixHead {
    pub variant: DemixVariant,
    pub dim: usize,
    pub final_activation: FinalActivation,
    pub params: ParamSet,
    layout: Layout,
}

const KIND: &str = "demix-head";

impl DemixHead {
    pub fn new(variant: DemixVariant, dim: usize, final_activation: FinalActivation, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        let mut p = ParamSet::new();
        let relu_out = final_activation == FinalActivation::Relu;
        let layout = match variant {
            DemixVariant::Sub | DemixVariant::Mul => Layout::Single(push_dense(&mut p, "out", dim, dim, false, rng)),
            DemixVariant::Concat1 => Layout::Single(push_dense(&mut p, "out", 2 * dim, dim, false, rng)),
            DemixVariant::Concat2 => Layout::Stacked(
                push_dense(&mut p, "hidden", 2 * dim, dim, true, rng),
                push_dense(&mut p, "out", dim, dim, false, rng),
            ),
            DemixVariant::ShareConcat => Layout::Shared {
                branch: push_dense(&mut p, "branch", dim, dim, true, rng),
                out: push_dense(&mut p, "out", 2 * dim, dim, relu_out, rng),
            },
            DemixVariant::SeparateConcat => Layout::Separate {
                mix: push_dense(&mut p, "branch_mix", dim, dim, true, rng),
                known: push_dense(&mut p, "branch_known", dim, dim, true, rng),
                out: push_dense(&mut p, "out", 2 * dim, dim, relu_out, rng),
            },
        };
        Ok(DemixHead {
            variant,
            dim,
            final_activation,
            params: p,
            layout,
        })
    }

    /// Predicted embeddings for each row pair of `e_mix` and `e_known`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, e_mix: Var, e_known: Var) -> Result<Var> {
        let (m, k) = (tape.value(e_mix), tape.value(e_known));
        if m.cols() != self.dim || !m.same_shape(k) {
            return Err(Error::ShapeMismatch {
                op: "demix",
                left: m.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        let affine = |tape: &mut Tape, x: Var, d: Dense| tape.linear(x, p.var(d.w), p.var(d.b));
        let out = match (self.variant, self.layout) {
            (DemixVariant::Sub, Layout::Single(d)) => {
                let x = tape.sub(e_mix, e_known)?;
                affine(tape, x, d)?
            }
            (DemixVariant::Mul, Layout::Single(d)) => {
                let x = tape.mul(e_mix, e_known)?;
                affine(tape, x, d)?
            }
            (DemixVariant::Concat1, Layout::Single(d)) => {
                let x = tape.concat(e_mix, e_known)?;
                affine(tape, x, d)?
            }
            (_, Layout::Stacked(h, o)) => {
                let x = tape.concat(e_mix, e_known)?;
                let x = affine(tape, x, h)?;
                let x = tape.relu(x)?;
                affine(tape, x, o)?
            }
            (_, Layout::Shared { branch, out }) => {
                let a = affine(tape, e_mix, branch)?;
                let a = tape.relu(a)?;
                let b = affine(tape, e_known, branch)?;
                let b = tape.relu(b)?;
                self.output(tape, a, b, |t, x| affine(t, x, out))?
            }
            (_, Layout::Separate { mix, known, out }) => {
                let a = affine(tape, e_mix, mix)?;
                let a = tape.relu(a)?;
                let b = affine(tape, e_known, known)?;
                let b = tape.relu(b)?;
                self.output(tape, a, b, |t, x| affine(t, x, out))?
            }
            (v, _) => unreachable!("layout does not belong to {v}"),
        };
        Ok(out)
    }

    fn output(&self, tape: &mut Tape, a: Var, b: Var, out: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<Var> {
        let x = tape.concat(a, b)?;
        let y = out(tape, x)?;
        match self.final_activation {
            FinalActivation::Relu => tape.relu(y),
            FinalActivation::None => Ok(y),
        }
    }

    /// Predictions without recording gradients.
    pub fn predict(&self, e_mix: &Tensor, e_known: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let m = tape.constant(e_mix.clone());
        let k = tape.constant(e_known.clone());
        let y = self.forward(&mut tape, &p, m, k)?;
        Ok(tape.value(y).clone())
    }

    /// Writes the head into `archive`, whose architecture must be the variant slug.
    pub fn to_archive(&self, archive: &mut Archive) -> Result<()> {
        archive.set_meta("dim", self.dim)?;
        archive.set_meta("final_activation", self.final_activation)?;
        archive.push_params("head.", &self.params);
        Ok(())
    }

    pub fn archive(&self, seed: u64) -> Result<Archive> {
        let mut a = Archive::new(KIND, self.variant.slug(), seed);
        self.to_archive(&mut a)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != KIND {
            return Err(Error::Corrupt(format!("expected a {KIND} file, found {:?}", a.kind)));
        }
        let variant: DemixVariant = a.architecture.parse().map_err(|e: Error| Error::Corrupt(e.to_string()))?;
        let dim: usize = a.meta("dim")?;
        let act: FinalActivation = a.meta("final_activation")?;
        let mut rng = crate::rng::stream(0, crate::rng::Purpose::DemixInit, 0);
        let mut head = DemixHead::new(variant, dim, act, &mut rng).map_err(|e| Error::Corrupt(e.to_string()))?;
        a.load_params("head.", &mut head.params)?;
        Ok(head)
    }
}
