//! Central-difference gradient checking in 64-bit precision.
//!
//! The checker rebuilds the function on a fresh [`Tape`] for every probe, so
//! the numeric side never touches the backward rules it is checking.
//!
//! Relu and clamp make the functions piecewise smooth. A central difference
//! whose two probes land on different sides of a kink says nothing about the
//! derivative, so every probe records the branch pattern of those ops; when a
//! probe's pattern differs from the base point the step is halved (up to
//! [`MAX_STEP_HALVINGS`] times). Coordinates that still straddle a kink after
//! that are reported in [`GradCheckReport::kinked`] and excluded from the
//! error.

pub mod suite;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const MAX_STEP_HALVINGS: usize = 8;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1e−8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Flat coordinate (across all inputs, in order) of the maximum.
    pub worst_index: usize,
    /// Analytic and numeric derivative at `worst_index`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
    /// Coordinates whose probes could not be kept inside one smooth region.
    pub kinked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = self.coordinates + other.worst_index;
            self.worst_values = other.worst_values;
        }
        self.coordinates += other.coordinates;
        self.kinked += other.kinked;
    }

    /// Combines the reports of independent checks (for example one per seed).
    pub fn combine<'a>(reports: impl IntoIterator<Item = &'a GradCheckReport>) -> GradCheckReport {
        let mut acc = GradCheckReport {
            max_rel_error: 0.0,
            worst_index: 0,
            worst_values: (0.0, 0.0),
            coordinates: 0,
            kinked: 0,
        };
        for r in reports {
            acc.merge(r);
        }
        acc
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

struct Probe {
    value: f64,
    signature: Option<u64>,
    vars: Vec<Var>,
    out: Var,
    tape: Tape<f64>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], grad: bool) -> Result<Probe>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.track_kinks();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(Probe {
        value: tape.value(out).data()[0],
        signature: tape.kink_signature(),
        vars,
        out,
        tape,
    })
}

/// Checks the gradient of a scalar function of several tensors at once.
/// Coordinates are numbered across the inputs in argument order.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let Probe {
        value,
        signature: base_sig,
        vars,
        out,
        mut tape,
    } = evaluate(&f, inputs, true)?;
    if !value.is_finite() {
        return Err(Error::GradCheck {
            index: 0,
            msg: format!("function value is {value} at the base point"),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| match tape.grad(*v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; x.numel()],
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_values: (0.0, 0.0),
        coordinates: 0,
        kinked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut flat = 0;
    for (which, x) in inputs.iter().enumerate() {
        for (coord, &a) in analytic[which].iter().enumerate().take(x.numel()) {
            if !a.is_finite() {
                return Err(Error::GradCheck {
                    index: flat,
                    msg: format!("analytic gradient is {a}"),
                });
            }
            let orig = x.data()[coord];
            let mut h = eps;
            let mut numeric = None;
            for _ in 0..=MAX_STEP_HALVINGS {
                probe[which].data_mut()[coord] = orig + h;
                let p = evaluate(&f, &probe, false)?;
                let (plus, sig_plus) = (p.value, p.signature);
                probe[which].data_mut()[coord] = orig - h;
                let m = evaluate(&f, &probe, false)?;
                let (minus, sig_minus) = (m.value, m.signature);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::GradCheck {
                        index: flat,
                        msg: format!("non-finite probe values {plus} / {minus}"),
                    });
                }
                if sig_plus == base_sig && sig_minus == base_sig {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
                h *= 0.5;
            }
            probe[which].data_mut()[coord] = orig;
            match numeric {
                Some(n) => {
                    let err = relative_error(a, n);
                    if err > report.max_rel_error {
                        report.max_rel_error = err;
                        report.worst_index = flat;
                        report.worst_values = (a, n);
                    }
                }
                None => report.kinked += 1,
            }
            report.coordinates += 1;
            flat += 1;
        }
    }
    Ok(report)
}
