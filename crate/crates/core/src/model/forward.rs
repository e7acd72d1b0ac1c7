use super::{stage_prefix, BoundParams, ModelConfig, ParameterSet};
use crate::attention::{da_block_forward_with, BlockRole, BlockSpec, DaBlockOutput, DaBlockParams};
use crate::autodiff::{Dropout, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{FrameMask, Scalar, Tensor};

/// Handles produced by one stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// Class scores, `[C × T]`, zero on padded frames.
    pub logits: Var,
    /// Output of every DA block, in order. Index `j` is block `j + 1`.
    pub block_feats: Vec<Var>,
    pub blocks: Vec<DaBlockOutput>,
    /// Cross input handed to each block (decoders only).
    pub cross_inputs: Vec<Var>,
}

/// Handles of a full forward pass, encoder first.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub stages: Vec<StageOutput>,
}

impl ModelOutput {
    pub fn encoder(&self) -> &StageOutput {
        &self.stages[0]
    }

    pub fn decoders(&self) -> &[StageOutput] {
        &self.stages[1..]
    }

    /// Logits of the last stage.
    pub fn final_logits(&self) -> Var {
        self.stages.last().expect("at least the encoder").logits
    }
}

fn check_mask<E: Scalar>(tape: &Tape<E>, x: Var, mask: &FrameMask) -> Result<()> {
    let t = tape.shape(x)[1];
    if mask.len() != t {
        return Err(Error::Dimension {
            op: "frame mask",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    Ok(())
}

fn check_features<E: Scalar>(
    tape: &Tape<E>,
    cfg: &ModelConfig,
    features: Var,
    mask: &FrameMask,
) -> Result<()> {
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[0] != cfg.input_dim {
        return Err(Error::Dimension {
            op: "encoder input",
            lhs: shape.to_vec(),
            rhs: vec![cfg.input_dim],
        });
    }
    check_mask(tape, features, mask)?;
    tape.value(features).ensure_finite("input features")
}

fn project<E: Scalar>(
    tape: &mut Tape<E>,
    params: &BoundParams,
    name: &str,
    x: Var,
    mask: &FrameMask,
) -> Result<Var> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    let y = tape.conv1d(x, w, Some(b), 1)?;
    tape.mask_frames(y, mask)
}

#[allow(clippy::too_many_arguments)]
fn run_stage<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    params: &BoundParams,
    stage: usize,
    input: Var,
    enc_feats: Option<&[Var]>,
    mask: &FrameMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<StageOutput> {
    let prefix = stage_prefix(stage);
    let role = if stage == 0 {
        BlockRole::Encoder
    } else {
        BlockRole::Decoder
    };
    let n = cfg.blocks_per_stage;
    let mut x = project(tape, params, &format!("{prefix}.in"), input, mask)?;
    let mut block_feats = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(n);
    let mut cross_inputs = Vec::new();
    for i in 1..=n {
        let spec = BlockSpec::new(i, n, role)?;
        let bp = DaBlockParams::lookup(&format!("{prefix}.blk{i}"), |name| params.get(name))?;
        let cross = enc_feats.map(|feats| {
            if cfg.cross_connections {
                feats[i - 1]
            } else {
                feats[n - 1]
            }
        });
        if let Some(c) = cross {
            cross_inputs.push(c);
        }
        let out = da_block_forward_with(
            tape,
            x,
            cross,
            &spec,
            &bp,
            cfg.cross_qv_mode,
            mask,
            dropout.as_deref_mut(),
        )?;
        x = out.output;
        block_feats.push(x);
        blocks.push(out);
    }
    let logits = project(tape, params, &format!("{prefix}.out"), x, mask)?;
    Ok(StageOutput {
        logits,
        block_feats,
        blocks,
        cross_inputs,
    })
}

/// Encoder on a `[D × T]` feature map.
pub fn encoder_forward<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    params: &BoundParams,
    features: Var,
    mask: &FrameMask,
) -> Result<StageOutput> {
    check_features(tape, cfg, features, mask)?;
    run_stage(tape, cfg, params, 0, features, None, mask, None)
}

/// Decoder `stage` (1-based) refining the previous stage's logits.
///
/// `enc_feats` are the encoder's block outputs; block `j` of the decoder
/// attends to `enc_feats[j]`, or to the last one when cross connections are
/// disabled.
pub fn decoder_forward<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    params: &BoundParams,
    stage: usize,
    prev_logits: Var,
    enc_feats: &[Var],
    mask: &FrameMask,
) -> Result<StageOutput> {
    if stage == 0 || stage > cfg.num_decoders {
        return Err(Error::Wiring(format!(
            "decoder stage {stage} outside 1..={}",
            cfg.num_decoders
        )));
    }
    if enc_feats.len() != cfg.blocks_per_stage {
        return Err(Error::Wiring(format!(
            "decoder needs {} encoder feature maps, got {}",
            cfg.blocks_per_stage,
            enc_feats.len()
        )));
    }
    check_mask(tape, prev_logits, mask)?;
    let probs = tape.softmax(prev_logits, 0)?;
    run_stage(tape, cfg, params, stage, probs, Some(enc_feats), mask, None)
}

/// Encoder followed by every decoder.
pub fn dxformer_forward<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    params: &BoundParams,
    features: Var,
    mask: &FrameMask,
) -> Result<ModelOutput> {
    dxformer_forward_with(tape, cfg, params, features, mask, None)
}

/// [`dxformer_forward`] with dropout inside every block (training only).
pub fn dxformer_forward_with<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    params: &BoundParams,
    features: Var,
    mask: &FrameMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<ModelOutput> {
    check_features(tape, cfg, features, mask)?;
    let enc = run_stage(
        tape,
        cfg,
        params,
        0,
        features,
        None,
        mask,
        dropout.as_deref_mut(),
    )?;
    let feats = enc.block_feats.clone();
    let mut prev = enc.logits;
    let mut stages = vec![enc];
    for s in 1..=cfg.num_decoders {
        let probs = tape.softmax(prev, 0)?;
        let out = run_stage(
            tape,
            cfg,
            params,
            s,
            probs,
            Some(&feats),
            mask,
            dropout.as_deref_mut(),
        )?;
        prev = out.logits;
        stages.push(out);
    }
    Ok(ModelOutput { stages })
}

/// Frame-wise class predictions of the last stage for one unpadded video.
pub fn predict<E: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    features: &Tensor<E>,
) -> Result<Vec<usize>> {
    Ok(final_logits(cfg, params, features)?.argmax_columns())
}

/// Last-stage logits for one unpadded video.
pub fn final_logits<E: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    features: &Tensor<E>,
) -> Result<Tensor<E>> {
    if features.rank() != 2 {
        return Err(Error::Dimension {
            op: "encoder input",
            lhs: features.shape().to_vec(),
            rhs: vec![cfg.input_dim],
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(features.clone());
    let mask = FrameMask::all(features.shape()[1]);
    let out = dxformer_forward(&mut tape, cfg, &bound, x, &mask)?;
    Ok(tape.value(out.final_logits()).clone())
}
