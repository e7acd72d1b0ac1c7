use super::kernels::{self, ConvGeom};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{FrameMask, Scalar, Tensor};

fn tensor<E: Scalar>(shape: Vec<usize>, data: Vec<E>) -> Tensor<E> {
    Tensor::new(shape, data).expect("kernel output matches its shape")
}

impl<E: Scalar> Tape<E> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::Shape {
                op,
                msg: format!("expected rank {rank}, got shape {:?}", self.shape(v)),
            });
        }
        Ok(())
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank("matmul", a, 2)?;
        self.rank("matmul", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(tensor(vec![m, n], out), Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.rank("transpose", x, 2)?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let out = kernels::transpose(self.value(x).data(), r, c);
        Ok(self.push(tensor(vec![c, r], out), Op::Transpose { x }))
    }

    /// Same-padded dilated convolution of a `[C_in × T]` map with a
    /// `[C_out × C_in × K]` kernel, optionally adding a `[C_out]` bias.
    ///
    /// Tap `j` reads frame `t + dilation·(j − (K−1)/2)`; out-of-range frames
    /// read as zero, so the output keeps length `T`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        self.rank("conv1d", x, 2)?;
        self.rank("conv1d", w, 3)?;
        let (c_in, frames) = (self.shape(x)[0], self.shape(x)[1]);
        let (c_out, w_in, kernel) = (self.shape(w)[0], self.shape(w)[1], self.shape(w)[2]);
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel size must be odd, got {kernel}"
            )));
        }
        if dilation < 1 {
            return Err(Error::Config("conv1d dilation must be at least 1".into()));
        }
        if w_in != c_in {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::Dimension {
                    op: "conv1d bias",
                    lhs: vec![c_out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            kernel,
            frames,
            dilation,
        };
        let out = kernels::conv1d(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        Ok(self.push(
            tensor(vec![c_out, frames], out),
            Op::Conv1d { x, w, bias, geom },
        ))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Shape {
                op,
                msg: format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let split = kernels::axis_split(self.shape(x), axis);
        let out = kernels::softmax(self.value(x).data(), split, false);
        let shape = self.shape(x).to_vec();
        Ok(self.push(tensor(shape, out), Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let split = kernels::axis_split(self.shape(x), axis);
        let out = kernels::softmax(self.value(x).data(), split, true);
        let shape = self.shape(x).to_vec();
        Ok(self.push(tensor(shape, out), Op::LogSoftmax { x, axis }))
    }

    /// Rectifier. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.max(E::zero()))
            .collect();
        if self.kinks.is_some() {
            let branches: Vec<bool> = self
                .value(x)
                .data()
                .iter()
                .map(|v| *v > E::zero())
                .collect();
            self.note_kinks(branches.into_iter());
        }
        let shape = self.shape(x).to_vec();
        self.push(tensor(shape, data), Op::Relu { x })
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        tensor(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let data = self.value(x).data().iter().map(|v| *v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(tensor(shape, data), Op::Scale { x, c })
    }

    /// `min(x, max)`; the gradient passes only where `x < max`.
    pub fn clamp_max(&mut self, x: Var, max: E) -> Var {
        let data = self.value(x).data().iter().map(|v| v.min(max)).collect();
        if self.kinks.is_some() {
            let branches: Vec<bool> = self.value(x).data().iter().map(|v| *v < max).collect();
            self.note_kinks(branches.into_iter());
        }
        let shape = self.shape(x).to_vec();
        self.push(tensor(shape, data), Op::ClampMax { x, max })
    }

    /// Stacks tensors along `axis` in argument order.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Shape {
                op: "concat",
                msg: "nothing to concatenate".into(),
            });
        };
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            tensor(shape, data),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// The half-open range `[start, end)` of `x` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let src_shape = self.shape(x).to_vec();
        if start >= end || end > src_shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                msg: format!(
                    "range {start}..{end} invalid for extent {}",
                    src_shape[axis]
                ),
            });
        }
        let (outer, total, inner) = kernels::axis_split(&src_shape, axis);
        let len = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        Ok(self.push(tensor(shape, data), Op::Slice { x, axis, start }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: E = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// `Σ weights[i] · x[i]` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<E>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let s: E = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| *a * *b)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.into_data(),
            },
        ))
    }

    /// A gradient-stopped copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn check_frames(&self, op: &'static str, x: Var, mask: &FrameMask, axis: usize) -> Result<()> {
        if self.shape(x)[axis] != mask.len() {
            return Err(Error::Shape {
                op,
                msg: format!(
                    "mask covers {} frames but tensor has shape {:?}",
                    mask.len(),
                    self.shape(x)
                ),
            });
        }
        Ok(())
    }

    /// Per-channel normalization of a `[C × T]` map over its real frames,
    /// without affine parameters. Padded frames become zero.
    pub fn instance_norm(&mut self, x: Var, mask: &FrameMask) -> Result<Var> {
        self.rank("instance_norm", x, 2)?;
        self.check_frames("instance_norm", x, mask, 1)?;
        let c = self.shape(x)[0];
        let (out, inv_std) = kernels::instance_norm(self.value(x).data(), c, mask);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            tensor(shape, out),
            Op::InstanceNorm {
                x,
                inv_std,
                mask: mask.clone(),
            },
        ))
    }

    /// Zeroes the padded frames (columns) of a `[C × T]` map.
    pub fn mask_frames(&mut self, x: Var, mask: &FrameMask) -> Result<Var> {
        self.rank("mask_frames", x, 2)?;
        self.check_frames("mask_frames", x, mask, 1)?;
        let t = mask.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if mask.get(i % t) { *v } else { E::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            tensor(shape, data),
            Op::MaskFrames {
                x,
                mask: mask.clone(),
            },
        ))
    }

    /// Scaled dot-product attention restricted to non-overlapping chunks of
    /// `window` frames. `q`, `k`, `v` are `[T × d]`.
    ///
    /// Equivalent to dense attention with a block-diagonal mask that also
    /// hides padded keys; padded queries produce zero rows.
    pub fn windowed_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        mask: &FrameMask,
    ) -> Result<Var> {
        if window < 1 {
            return Err(Error::Config("attention window must be at least 1".into()));
        }
        self.rank("windowed_attention", q, 2)?;
        self.same_shape("windowed_attention", q, k)?;
        self.same_shape("windowed_attention", q, v)?;
        self.check_frames("windowed_attention", q, mask, 0)?;
        let d = self.shape(q)[1];
        let (out, probs) = kernels::windowed_attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            window,
            mask,
        );
        let shape = self.shape(q).to_vec();
        Ok(self.push(
            tensor(shape, out),
            Op::Attention {
                q,
                k,
                v,
                window,
                mask: mask.clone(),
                probs,
            },
        ))
    }

    /// The dense `[T × T]` attention weights behind a recorded
    /// [`windowed_attention`](Self::windowed_attention) node; `None` for any
    /// other node.
    pub fn attention_weights(&self, att: Var) -> Option<Tensor<E>> {
        let Op::Attention {
            window,
            mask,
            probs,
            ..
        } = &self.nodes[att.0].op
        else {
            return None;
        };
        let t = mask.len();
        let stride = (*window).min(t);
        let mut dense = vec![E::zero(); t * t];
        for i in 0..t {
            let start = (i / window) * window;
            let end = (start + window).min(t);
            for j in start..end {
                dense[i * t + j] = probs[i * stride + (j - start)];
            }
        }
        Some(tensor(vec![t, t], dense))
    }
}
