//! Tagged description of one inverse problem.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RirError};
use crate::forward_ops::{ClipSpec, ConvOperator, LinearOperator, MaskOperator};
use crate::refine::{
    refine_declip_gn, refine_denoise, refine_huber_irls, refine_inpaint, refine_linear_cg,
    RefineResult, SolverTolerances,
};
use crate::rng::NoiseStream;
use crate::signal::SignalBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Denoise,
    Deconv,
    DeconvRobust,
    Inpaint,
    Declip,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Denoise,
        TaskKind::Deconv,
        TaskKind::DeconvRobust,
        TaskKind::Inpaint,
        TaskKind::Declip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Denoise => "denoise",
            TaskKind::Deconv => "deconv",
            TaskKind::DeconvRobust => "deconv-robust",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Declip => "declip",
        }
    }

    /// Whether the measurement is a convolution with a known excitation.
    pub fn uses_excitation(self) -> bool {
        matches!(self, TaskKind::Deconv | TaskKind::DeconvRobust | TaskKind::Declip)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = RirError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| RirError::config(format!("unknown task '{s}'")))
    }
}

/// Forward model and noise description for one measurement.
#[derive(Debug, Clone)]
pub enum MeasurementTask {
    Denoise {
        sigma_n: f64,
    },
    Deconv {
        op: ConvOperator,
        sigma_n: f64,
    },
    DeconvRobust {
        op: ConvOperator,
        sigma_n: f64,
        laplace_b: f64,
    },
    Inpaint {
        mask: MaskOperator,
        sigma_n: f64,
    },
    Declip {
        op: ConvOperator,
        clip: ClipSpec,
        sigma_n: f64,
    },
}

impl MeasurementTask {
    pub fn kind(&self) -> TaskKind {
        match self {
            MeasurementTask::Denoise { .. } => TaskKind::Denoise,
            MeasurementTask::Deconv { .. } => TaskKind::Deconv,
            MeasurementTask::DeconvRobust { .. } => TaskKind::DeconvRobust,
            MeasurementTask::Inpaint { .. } => TaskKind::Inpaint,
            MeasurementTask::Declip { .. } => TaskKind::Declip,
        }
    }

    pub fn sigma_n(&self) -> f64 {
        match self {
            MeasurementTask::Denoise { sigma_n }
            | MeasurementTask::Deconv { sigma_n, .. }
            | MeasurementTask::DeconvRobust { sigma_n, .. }
            | MeasurementTask::Inpaint { sigma_n, .. }
            | MeasurementTask::Declip { sigma_n, .. } => *sigma_n,
        }
    }

    /// Length of the unknown RIR implied by a measurement, after checking that
    /// the measurement fits the forward model.
    pub fn unknown_len(&self, y: &SignalBuffer) -> Result<usize> {
        let sigma = self.sigma_n();
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(RirError::config("sigma_n must be positive and finite"));
        }
        match self {
            MeasurementTask::Denoise { .. } => Ok(y.len()),
            MeasurementTask::Inpaint { mask, .. } => {
                check_len(mask.keep.len(), y.len())?;
                Ok(y.len())
            }
            MeasurementTask::Deconv { op, .. }
            | MeasurementTask::DeconvRobust { op, .. }
            | MeasurementTask::Declip { op, .. } => {
                check_len(op.output_len(), y.len())?;
                Ok(op.input_len())
            }
        }
    }

    /// Step 2 of the sampler: proximal mean and perturbation at `ν_t`.
    pub fn refine(
        &self,
        y: &SignalBuffer,
        x_hat: &SignalBuffer,
        nu_t: f64,
        tol: &SolverTolerances,
        rng: Option<&mut NoiseStream>,
    ) -> Result<RefineResult> {
        match self {
            MeasurementTask::Denoise { sigma_n } => refine_denoise(y, x_hat, *sigma_n, nu_t, rng),
            MeasurementTask::Deconv { op, sigma_n } => {
                refine_linear_cg(op, y, x_hat, *sigma_n, nu_t, tol, rng)
            }
            MeasurementTask::DeconvRobust {
                op,
                sigma_n,
                laplace_b,
            } => refine_huber_irls(op, y, x_hat, *sigma_n, *laplace_b, nu_t, tol, rng),
            MeasurementTask::Inpaint { mask, sigma_n } => {
                refine_inpaint(mask, y, x_hat, *sigma_n, nu_t, rng)
            }
            MeasurementTask::Declip { op, clip, sigma_n } => {
                refine_declip_gn(op, clip, y, x_hat, *sigma_n, nu_t, tol, rng)
            }
        }
    }
}
