use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Inverted dropout driven by its own seeded stream.
///
/// Each call zeroes entries with probability `p` and scales the survivors by
/// `1/(1−p)`. The mask is recorded as a constant factor, so the backward pass
/// needs no rule of its own.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {p}"
            )));
        }
        Ok(Self { p, rng })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn apply<E: Scalar>(&mut self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = E::from_f64(1.0 / (1.0 - self.p));
        let data = (0..tape.value(x).numel())
            .map(|_| {
                if self.rng.random::<f64>() < self.p {
                    E::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(tape.shape(x).to_vec(), data)?);
        tape.mul(x, mask)
    }
}
