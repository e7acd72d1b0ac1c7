use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{FrameMask, Scalar, Tensor};

/// Weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the smoothing term.
    pub lambda: f64,
    /// Clip on the per-entry log-probability difference.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            tau: 4.0,
        }
    }
}

/// Cross-entropy plus truncated-MSE smoothing, summed over stages.
///
/// Per stage, with `n` real frames and `p` pairs of consecutive real frames:
/// `CE = −(1/n) Σ_t log p_t[y_t]` and
/// `S = (1/(p·C)) Σ_{t,c} min(τ², (log p_t[c] − log p_{t−1}[c])²)` where the
/// earlier frame is gradient-stopped. The stage loss is `CE + λ·S`.
pub fn seg_loss<E: Scalar>(
    tape: &mut Tape<E>,
    stage_logits: &[Var],
    labels: &[usize],
    mask: &FrameMask,
    cfg: LossConfig,
) -> Result<Var> {
    seg_loss_impl(tape, stage_logits, labels, mask, cfg, None)
}

/// [`seg_loss`] with the gradient-stopped smoothing targets taken from
/// `targets[s]`, the log-probabilities `[C × T]` of stage `s` at a fixed
/// point. At that point value and gradient equal those of [`seg_loss`], but
/// the function is an honest one for finite differences.
pub fn seg_loss_frozen<E: Scalar>(
    tape: &mut Tape<E>,
    stage_logits: &[Var],
    targets: &[Tensor<E>],
    labels: &[usize],
    mask: &FrameMask,
    cfg: LossConfig,
) -> Result<Var> {
    if targets.len() != stage_logits.len() {
        return Err(Error::Contract(format!(
            "{} frozen targets for {} stages",
            targets.len(),
            stage_logits.len()
        )));
    }
    seg_loss_impl(tape, stage_logits, labels, mask, cfg, Some(targets))
}

/// Log-probabilities of each stage, the frozen targets for
/// [`seg_loss_frozen`].
pub fn smoothing_targets<E: Scalar>(stage_logits: &[Tensor<E>]) -> Result<Vec<Tensor<E>>> {
    stage_logits
        .iter()
        .map(|l| {
            let mut tape = Tape::new();
            let v = tape.constant(l.clone());
            let lp = tape.log_softmax(v, 0)?;
            Ok(tape.value(lp).clone())
        })
        .collect()
}

fn seg_loss_impl<E: Scalar>(
    tape: &mut Tape<E>,
    stage_logits: &[Var],
    labels: &[usize],
    mask: &FrameMask,
    cfg: LossConfig,
    frozen: Option<&[Tensor<E>]>,
) -> Result<Var> {
    if stage_logits.is_empty() {
        return Err(Error::Contract("seg_loss needs at least one stage".into()));
    }
    let shape = tape.shape(stage_logits[0]).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "seg_loss",
            msg: format!("logits must be [C × T], got {shape:?}"),
        });
    }
    let (c, t) = (shape[0], shape[1]);
    if labels.len() != t || mask.len() != t {
        return Err(Error::Dimension {
            op: "seg_loss labels",
            lhs: shape,
            rhs: vec![labels.len(), mask.len()],
        });
    }
    if let Some((frame, label)) = labels
        .iter()
        .enumerate()
        .find(|(f, l)| mask.get(*f) && **l >= c)
    {
        return Err(Error::Data(format!(
            "label {label} at frame {frame} is outside 0..{c}"
        )));
    }
    let real = mask.count();
    if real == 0 {
        return Err(Error::Data(
            "seg_loss on a sequence with no real frames".into(),
        ));
    }

    let mut ce_w = Tensor::zeros(vec![c, t]);
    let inv_n = E::one() / E::from_usize(real);
    for (f, &y) in labels.iter().enumerate() {
        if mask.get(f) {
            ce_w.data_mut()[y * t + f] = -inv_n;
        }
    }
    let pairs: Vec<bool> = (1..t).map(|f| mask.get(f) && mask.get(f - 1)).collect();
    let n_pairs = pairs.iter().filter(|p| **p).count();
    let smooth_w = (n_pairs > 0).then(|| {
        let w = E::one() / E::from_usize(n_pairs * c);
        let mut out = Tensor::zeros(vec![c, t - 1]);
        for ch in 0..c {
            for (f, &p) in pairs.iter().enumerate() {
                if p {
                    out.data_mut()[ch * (t - 1) + f] = w;
                }
            }
        }
        out
    });
    let tau_sq = E::from_f64(cfg.tau * cfg.tau);
    let lambda = E::from_f64(cfg.lambda);

    let mut total: Option<Var> = None;
    for (s, &logits) in stage_logits.iter().enumerate() {
        if tape.shape(logits) != [c, t] {
            return Err(Error::Dimension {
                op: "seg_loss stages",
                lhs: vec![c, t],
                rhs: tape.shape(logits).to_vec(),
            });
        }
        let logp = tape.log_softmax(logits, 0)?;
        let mut stage = tape.weighted_sum(logp, ce_w.clone())?;
        if let Some(w) = &smooth_w {
            let next = tape.slice(logp, 1, 1, t)?;
            let prev = match frozen {
                Some(targets) => {
                    if targets[s].shape() != [c, t] {
                        return Err(Error::Dimension {
                            op: "seg_loss frozen targets",
                            lhs: vec![c, t],
                            rhs: targets[s].shape().to_vec(),
                        });
                    }
                    let full = tape.constant(targets[s].clone());
                    tape.slice(full, 1, 0, t - 1)?
                }
                None => {
                    let prev = tape.slice(logp, 1, 0, t - 1)?;
                    tape.detach(prev)
                }
            };
            let diff = tape.sub(next, prev)?;
            let sq = tape.mul(diff, diff)?;
            let clipped = tape.clamp_max(sq, tau_sq);
            let smooth = tape.weighted_sum(clipped, w.clone())?;
            let smooth = tape.scale(smooth, lambda);
            stage = tape.add(stage, smooth)?;
        }
        total = Some(match total {
            None => stage,
            Some(acc) => tape.add(acc, stage)?,
        });
    }
    Ok(total.expect("at least one stage"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(logits: Tensor<f64>, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let mask = FrameMask::all(labels.len());
        let l = seg_loss(&mut tape, &[x], labels, &mask, LossConfig::default()).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let l = loss_of(Tensor::zeros(vec![4, 5]), &[0, 1, 2, 3, 0]);
        assert!((l - 4f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut t = Tensor::full(vec![3, 4], -10.0);
        for f in 0..4 {
            t.data_mut()[f] = 10.0;
        }
        let l = loss_of(t, &[0, 0, 0, 0]);
        assert!(l > 0.0 && l < 1e-8, "{l}");
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = seg_loss(
            &mut tape,
            &[x],
            &[0, 2, 1],
            &FrameMask::all(3),
            LossConfig::default(),
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn padded_frames_are_ignored() {
        let logits = Tensor::<f64>::from_rows(&[[1.0, -0.5, 3.0], [0.2, 0.9, -4.0]]);
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        let full = seg_loss(
            &mut tape,
            &[x],
            &[0, 1, 0],
            &FrameMask::right_padded(2, 1),
            LossConfig::default(),
        )
        .unwrap();
        let short = Tensor::from_rows(&[[1.0, -0.5], [0.2, 0.9]]);
        let y = tape.constant(short);
        let cut = seg_loss(
            &mut tape,
            &[y],
            &[0, 1],
            &FrameMask::all(2),
            LossConfig::default(),
        )
        .unwrap();
        assert!((tape.value(full).data()[0] - tape.value(cut).data()[0]).abs() < 1e-15);
    }

    #[test]
    fn stages_add_up() {
        let logits = Tensor::from_rows(&[[1.0, -0.5, 3.0], [0.2, 0.9, -4.0]]);
        let one = loss_of(logits.clone(), &[1, 1, 0]);
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let l = seg_loss(
            &mut tape,
            &[x, x, x],
            &[1, 1, 0],
            &FrameMask::all(3),
            LossConfig::default(),
        )
        .unwrap();
        assert!((tape.value(l).data()[0] - 3.0 * one).abs() < 1e-12);
    }

    #[test]
    fn frozen_targets_give_the_same_value_and_gradient() {
        let logits = vec![
            Tensor::<f64>::from_rows(&[&[0.3, -1.0, 2.0, 0.1], &[1.5, 0.2, -0.7, 0.0]]),
            Tensor::<f64>::from_rows(&[&[-0.4, 0.9, 0.3, 1.1], &[0.8, -2.0, 0.6, 0.2]]),
        ];
        let labels = [0, 1, 1, 0];
        let mask = FrameMask::all(4);
        let cfg = LossConfig::default();
        let run = |frozen: bool| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = logits.iter().map(|l| tape.param(l.clone())).collect();
            let loss = if frozen {
                let targets = smoothing_targets(&logits).unwrap();
                seg_loss_frozen(&mut tape, &vars, &targets, &labels, &mask, cfg).unwrap()
            } else {
                seg_loss(&mut tape, &vars, &labels, &mask, cfg).unwrap()
            };
            tape.backward(loss).unwrap();
            let value = tape.value(loss).data()[0];
            let grads: Vec<f64> = vars
                .iter()
                .flat_map(|v| tape.grad(*v).unwrap().data().to_vec())
                .collect();
            (value, grads)
        };
        let (a, ga) = run(false);
        let (b, gb) = run(true);
        assert!((a - b).abs() < 1e-15);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
