//! Windowed attention and the dual dilated attention (DA) block.
//!
//! A DA block runs two branches over the same normalized input. Each branch is
//! a dilated convolution, a relu and a chunked attention layer whose window
//! equals the convolution's dilation. Along a stage of `N` blocks the first
//! branch's window grows as `2^i` and the second shrinks as `2^(N−i)`, so
//! every block sees one local and one global context. The two branch outputs
//! are concatenated, fused by a 1×1 convolution and added back to the input.
//!
//! Encoder blocks attend over their own features. Decoder blocks receive the
//! feature map of the matching encoder block ("cross" input) and build some of
//! the attention projections from the concatenation of their own branch
//! features and that map; see [`CrossQvMode`].

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Dropout, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{FrameMask, Scalar};

/// Kernel size of every branch convolution.
pub const BRANCH_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Window `2^i`: local context in early blocks.
    Increasing,
    /// Window `2^(N−i)`: global context in early blocks.
    Decreasing,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Increasing, Branch::Decreasing];

    fn tag(self) -> &'static str {
        match self {
            Branch::Increasing => "inc",
            Branch::Decreasing => "dec",
        }
    }
}

/// Window size (and convolution dilation) of `branch` in block `i` of `n`.
pub fn window_size(branch: Branch, i: usize, n: usize) -> Result<usize> {
    if i < 1 || i > n {
        return Err(Error::Config(format!("block index {i} outside 1..={n}")));
    }
    let exp = match branch {
        Branch::Increasing => i,
        Branch::Decreasing => n - i,
    };
    if exp >= usize::BITS as usize {
        return Err(Error::Config(format!(
            "window 2^{exp} does not fit in usize"
        )));
    }
    Ok(1 << exp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockRole {
    Encoder,
    Decoder,
}

/// Which decoder projections read the concatenation of the branch features
/// and the cross-connected encoder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CrossQvMode {
    /// Query and key from the concatenation, value from the branch alone.
    #[default]
    QueryKey,
    /// Query and value from the concatenation, key from the branch alone.
    QueryValue,
}

impl fmt::Display for CrossQvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossQvMode::QueryKey => "query_key",
            CrossQvMode::QueryValue => "query_value",
        })
    }
}

impl FromStr for CrossQvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_key" => Ok(CrossQvMode::QueryKey),
            "query_value" => Ok(CrossQvMode::QueryValue),
            other => Err(Error::Config(format!(
                "cross_qv_mode must be query_key or query_value, got {other:?}"
            ))),
        }
    }
}

/// Position of a block within its stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    index: usize,
    blocks: usize,
    role: BlockRole,
}

impl BlockSpec {
    /// Block `index` (1-based) of a stage with `blocks` blocks.
    pub fn new(index: usize, blocks: usize, role: BlockRole) -> Result<Self> {
        window_size(Branch::Increasing, index, blocks)?;
        window_size(Branch::Decreasing, index, blocks)?;
        Ok(Self {
            index,
            blocks,
            role,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn role(&self) -> BlockRole {
        self.role
    }

    pub fn window(&self, branch: Branch) -> usize {
        window_size(branch, self.index, self.blocks).expect("validated on construction")
    }

    /// Increasing-branch window.
    pub fn w_inc(&self) -> usize {
        self.window(Branch::Increasing)
    }

    /// Decreasing-branch window.
    pub fn w_dec(&self) -> usize {
        self.window(Branch::Decreasing)
    }
}

/// Name and shape of one learnable tensor, plus its fan-in for
/// initialization (`None` for biases).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    pub(crate) fn weight(name: String, shape: Vec<usize>) -> Self {
        let fan_in = shape[1..].iter().product();
        Self {
            name,
            shape,
            fan_in: Some(fan_in),
        }
    }

    pub(crate) fn bias(name: String, len: usize) -> Self {
        Self {
            name,
            shape: vec![len],
            fan_in: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Input widths of the query, key and value projections.
fn projection_widths(role: BlockRole, mode: CrossQvMode, model_dim: usize) -> [usize; 3] {
    let (f, f2) = (model_dim, 2 * model_dim);
    match (role, mode) {
        (BlockRole::Encoder, _) => [f, f, f],
        (BlockRole::Decoder, CrossQvMode::QueryKey) => [f2, f2, f],
        (BlockRole::Decoder, CrossQvMode::QueryValue) => [f2, f, f2],
    }
}

/// Parameter layout of one DA block under `prefix`.
///
/// Keys carry no bias: a per-row constant on the scores cancels in the softmax.
pub fn block_layout(
    prefix: &str,
    role: BlockRole,
    mode: CrossQvMode,
    model_dim: usize,
    attn_dim: usize,
) -> Vec<ParamSpec> {
    let f = model_dim;
    let [wq, wk, wv] = projection_widths(role, mode, f);
    let mut out = Vec::new();
    for b in Branch::BOTH {
        let p = format!("{prefix}.{}", b.tag());
        out.push(ParamSpec::weight(
            format!("{p}.conv.w"),
            vec![f, f, BRANCH_KERNEL],
        ));
        out.push(ParamSpec::bias(format!("{p}.conv.b"), f));
        out.push(ParamSpec::weight(format!("{p}.q.w"), vec![attn_dim, wq, 1]));
        out.push(ParamSpec::bias(format!("{p}.q.b"), attn_dim));
        out.push(ParamSpec::weight(format!("{p}.k.w"), vec![attn_dim, wk, 1]));
        out.push(ParamSpec::weight(format!("{p}.v.w"), vec![attn_dim, wv, 1]));
        out.push(ParamSpec::bias(format!("{p}.v.b"), attn_dim));
        out.push(ParamSpec::weight(format!("{p}.o.w"), vec![f, attn_dim, 1]));
        out.push(ParamSpec::bias(format!("{p}.o.b"), f));
    }
    out.push(ParamSpec::weight(
        format!("{prefix}.fuse.w"),
        vec![f, 2 * f, 1],
    ));
    out.push(ParamSpec::bias(format!("{prefix}.fuse.b"), f));
    out
}

/// Tape handles of one branch's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BranchParams {
    pub conv_w: Var,
    pub conv_b: Var,
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub o_w: Var,
    pub o_b: Var,
}

/// Tape handles of one DA block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct DaBlockParams {
    pub increasing: BranchParams,
    pub decreasing: BranchParams,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

impl DaBlockParams {
    /// Resolves the handles of the block stored under `prefix`.
    pub fn lookup(prefix: &str, mut get: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        let mut branch = |b: Branch| -> Result<BranchParams> {
            let p = format!("{prefix}.{}", b.tag());
            Ok(BranchParams {
                conv_w: get(&format!("{p}.conv.w"))?,
                conv_b: get(&format!("{p}.conv.b"))?,
                q_w: get(&format!("{p}.q.w"))?,
                q_b: get(&format!("{p}.q.b"))?,
                k_w: get(&format!("{p}.k.w"))?,
                v_w: get(&format!("{p}.v.w"))?,
                v_b: get(&format!("{p}.v.b"))?,
                o_w: get(&format!("{p}.o.w"))?,
                o_b: get(&format!("{p}.o.b"))?,
            })
        };
        let increasing = branch(Branch::Increasing)?;
        let decreasing = branch(Branch::Decreasing)?;
        Ok(Self {
            increasing,
            decreasing,
            fuse_w: get(&format!("{prefix}.fuse.w"))?,
            fuse_b: get(&format!("{prefix}.fuse.b"))?,
        })
    }

    pub fn branch(&self, b: Branch) -> &BranchParams {
        match b {
            Branch::Increasing => &self.increasing,
            Branch::Decreasing => &self.decreasing,
        }
    }
}

/// Query, key and value for one attention call, each `[T × d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInput<'a> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub pad_mask: &'a FrameMask,
}

/// Chunked scaled dot-product attention with window `window`.
pub fn windowed_attention<E: Scalar>(
    tape: &mut Tape<E>,
    input: &AttentionInput<'_>,
    window: usize,
) -> Result<Var> {
    tape.windowed_attention(input.q, input.k, input.v, window, input.pad_mask)
}

/// Intermediate handles of one branch, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct BranchTrace {
    /// Conv → relu features, before anything from the cross input is mixed in.
    pub hidden: Var,
    /// Attention output, `[T × d]`.
    pub attention: Var,
    /// Branch output after the `d → F` projection, `[F × T]`.
    pub output: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DaBlockOutput {
    pub output: Var,
    pub increasing: BranchTrace,
    pub decreasing: BranchTrace,
}

fn project<E: Scalar>(tape: &mut Tape<E>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let p = tape.conv1d(x, w, b, 1)?;
    tape.transpose(p)
}

/// Runs one branch: dilated conv → relu → windowed attention → `d → F`
/// projection.
pub fn branch_forward<E: Scalar>(
    tape: &mut Tape<E>,
    normed: Var,
    cross: Option<Var>,
    window: usize,
    p: &BranchParams,
    mode: CrossQvMode,
    mask: &FrameMask,
) -> Result<BranchTrace> {
    let h = tape.conv1d(normed, p.conv_w, Some(p.conv_b), window)?;
    let h = tape.relu(h);
    let hidden = tape.mask_frames(h, mask)?;
    let (q_src, k_src, v_src) = match cross {
        None => (hidden, hidden, hidden),
        Some(c) => {
            let joined = tape.concat(&[hidden, c], 0)?;
            match mode {
                CrossQvMode::QueryKey => (joined, joined, hidden),
                CrossQvMode::QueryValue => (joined, hidden, joined),
            }
        }
    };
    let q = project(tape, q_src, p.q_w, Some(p.q_b))?;
    let k = project(tape, k_src, p.k_w, None)?;
    let v = project(tape, v_src, p.v_w, Some(p.v_b))?;
    let input = AttentionInput {
        q,
        k,
        v,
        pad_mask: mask,
    };
    let attention = windowed_attention(tape, &input, window)?;
    let att_cf = tape.transpose(attention)?;
    let output = tape.conv1d(att_cf, p.o_w, Some(p.o_b), 1)?;
    Ok(BranchTrace {
        hidden,
        attention,
        output,
    })
}

/// Forward pass of a DA block on an `[F × T]` map.
///
/// `cross` must be given exactly when the block is a decoder block and must
/// match the shape of `x`.
pub fn da_block_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    cross: Option<Var>,
    spec: &BlockSpec,
    params: &DaBlockParams,
    mode: CrossQvMode,
    mask: &FrameMask,
) -> Result<DaBlockOutput> {
    da_block_forward_with(tape, x, cross, spec, params, mode, mask, None)
}

/// [`da_block_forward`] with optional dropout on the fused update before it
/// joins the residual stream (training only).
#[allow(clippy::too_many_arguments)]
pub fn da_block_forward_with<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    cross: Option<Var>,
    spec: &BlockSpec,
    params: &DaBlockParams,
    mode: CrossQvMode,
    mask: &FrameMask,
    dropout: Option<&mut Dropout>,
) -> Result<DaBlockOutput> {
    match (spec.role(), cross) {
        (BlockRole::Decoder, None) => {
            return Err(Error::Wiring(format!(
                "decoder block {} needs a cross-connected encoder feature map",
                spec.index()
            )))
        }
        (BlockRole::Encoder, Some(_)) => {
            return Err(Error::Wiring(format!(
                "encoder block {} does not take a cross input",
                spec.index()
            )))
        }
        (_, Some(c)) if tape.shape(c) != tape.shape(x) => {
            return Err(Error::Dimension {
                op: "da_block cross",
                lhs: tape.shape(x).to_vec(),
                rhs: tape.shape(c).to_vec(),
            })
        }
        _ => {}
    }
    let normed = tape.instance_norm(x, mask)?;
    let inc = branch_forward(
        tape,
        normed,
        cross,
        spec.w_inc(),
        &params.increasing,
        mode,
        mask,
    )?;
    let dec = branch_forward(
        tape,
        normed,
        cross,
        spec.w_dec(),
        &params.decreasing,
        mode,
        mask,
    )?;
    let joined = tape.concat(&[inc.output, dec.output], 0)?;
    let mut fused = tape.conv1d(joined, params.fuse_w, Some(params.fuse_b), 1)?;
    if let Some(d) = dropout {
        fused = d.apply(tape, fused)?;
    }
    let sum = tape.add(x, fused)?;
    let output = tape.mask_frames(sum, mask)?;
    Ok(DaBlockOutput {
        output,
        increasing: inc,
        decreasing: dec,
    })
}
