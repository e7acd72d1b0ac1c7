//! The 64-bit gradient suite: every differentiable op, the DA block in both
//! roles, the segmentation loss and a small end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_many, GradCheckReport, DEFAULT_EPS};
use crate::attention::{
    block_layout, da_block_forward, BlockRole, BlockSpec, CrossQvMode, DaBlockParams,
};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{dxformer_forward, BoundParams, ModelConfig, ParameterSet};
use crate::tensor::{FrameMask, Tensor};
use crate::training::{seg_loss_frozen, smoothing_targets, LossConfig};

/// Tolerance for single ops, the DA block and the loss.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the full model.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// Sizes of the suite's toy problems.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub frames: usize,
    pub model_dim: usize,
    pub blocks: usize,
    pub decoders: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub eps: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            frames: 8,
            model_dim: 4,
            blocks: 3,
            decoders: 1,
            classes: 3,
            input_dim: 3,
            eps: DEFAULT_EPS,
        }
    }
}

/// Worst result of one component over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl ComponentResult {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// A random linear read-out so that no output coordinate is privileged.
fn readout(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = random(rng, tape.shape(y).to_vec(), 1.0);
    tape.weighted_sum(y, w)
}

type OpCase = (
    &'static str,
    fn(&mut Tape<f64>, &[Var], &FrameMask) -> Result<Var>,
    fn(usize) -> Vec<Vec<usize>>,
);

/// Shapes are `[C × T]` unless stated; attention inputs are `[T × d]`.
fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            |t, v, _| t.matmul(v[0], v[1]),
            |f| vec![vec![3, 4], vec![4, f]],
        ),
        (
            "transpose",
            |t, v, _| t.transpose(v[0]),
            |f| vec![vec![3, f]],
        ),
        (
            "conv1d",
            |t, v, _| {
                let mut acc = t.conv1d(v[0], v[1], Some(v[2]), 1)?;
                for d in [2, 4] {
                    let y = t.conv1d(v[0], v[1], Some(v[2]), d)?;
                    acc = t.add(acc, y)?;
                }
                Ok(acc)
            },
            |f| vec![vec![3, f], vec![2, 3, 3], vec![2]],
        ),
        (
            "softmax",
            |t, v, _| t.softmax(v[0], 0),
            |f| vec![vec![4, f]],
        ),
        (
            "log_softmax",
            |t, v, _| t.log_softmax(v[0], 1),
            |f| vec![vec![3, f]],
        ),
        ("relu", |t, v, _| Ok(t.relu(v[0])), |f| vec![vec![3, f]]),
        (
            "add_sub_mul_scale",
            |t, v, _| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(a, v[1])?;
                let m = t.mul(s, v[1])?;
                Ok(t.scale(m, 0.7))
            },
            |f| vec![vec![2, f], vec![2, f]],
        ),
        (
            "clamp_max",
            |t, v, _| Ok(t.clamp_max(v[0], 0.3)),
            |f| vec![vec![3, f]],
        ),
        (
            "concat_slice",
            |t, v, _| {
                let c = t.concat(&[v[0], v[1]], 0)?;
                let s = t.slice(c, 0, 1, 4)?;
                let r = t.concat(&[s, v[1]], 1)?;
                t.slice(r, 1, 1, 5)
            },
            |f| vec![vec![2, f], vec![3, f]],
        ),
        (
            "instance_norm",
            |t, v, m| t.instance_norm(v[0], m),
            |f| vec![vec![3, f]],
        ),
        (
            "mask_frames",
            |t, v, m| t.mask_frames(v[0], m),
            |f| vec![vec![3, f]],
        ),
        (
            "windowed_attention",
            |t, v, m| {
                let mut acc = t.windowed_attention(v[0], v[1], v[2], 1, m)?;
                for w in [2, 3, 8] {
                    let y = t.windowed_attention(v[0], v[1], v[2], w, m)?;
                    acc = t.add(acc, y)?;
                }
                Ok(acc)
            },
            |f| vec![vec![f, 4], vec![f, 4], vec![f, 4]],
        ),
    ]
}

/// Gradient checks of the individual ops, one result per op.
pub fn check_ops(cfg: &SuiteConfig) -> Result<Vec<ComponentResult>> {
    let frames = cfg.frames;
    // one padded frame so the masked paths are exercised
    let mask = FrameMask::right_padded(frames - 1, 1);
    op_cases()
        .into_iter()
        .map(|(name, f, shapes)| {
            let mut reports = Vec::new();
            for seed in 0..cfg.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor<f64>> = shapes(frames)
                    .into_iter()
                    .map(|s| random(&mut rng, s, 1.0))
                    .collect();
                let read_seed = rng.random::<u64>();
                reports.push(grad_check_many(
                    |tape, vars| {
                        let y = f(tape, vars, &mask)?;
                        let mut r = ChaCha8Rng::seed_from_u64(read_seed);
                        readout(tape, y, &mut r)
                    },
                    &inputs,
                    cfg.eps,
                )?);
            }
            Ok(ComponentResult {
                name: format!("op/{name}"),
                report: GradCheckReport::combine(&reports),
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

/// DA block output (random read-out) against its input, its cross input and
/// every parameter.
pub fn check_da_block(
    cfg: &SuiteConfig,
    role: BlockRole,
    mode: CrossQvMode,
) -> Result<ComponentResult> {
    let (f, t) = (cfg.model_dim, cfg.frames);
    let d = crate::model::default_attn_dim(f);
    let specs = block_layout("blk", role, mode, f, d);
    let mask = FrameMask::right_padded(t - 1, 1);
    let mut reports = Vec::new();
    for seed in 0..cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // block index varies with the seed so every window pair is covered
        let index = 1 + (seed as usize % cfg.blocks);
        let spec = BlockSpec::new(index, cfg.blocks, role)?;
        let mut inputs = vec![random(&mut rng, vec![f, t], 1.0)];
        let has_cross = role == BlockRole::Decoder;
        if has_cross {
            inputs.push(random(&mut rng, vec![f, t], 1.0));
        }
        let first_param = inputs.len();
        for p in &specs {
            inputs.push(random(&mut rng, p.shape.clone(), 0.8));
        }
        let read_seed = rng.random::<u64>();
        let names: Vec<String> = specs.iter().map(|p| p.name.clone()).collect();
        reports.push(grad_check_many(
            |tape, vars| {
                let params = DaBlockParams::lookup("blk", |n| {
                    let i = names.iter().position(|m| m == n).expect("layout name");
                    Ok(vars[first_param + i])
                })?;
                let cross = has_cross.then(|| vars[1]);
                let out = da_block_forward(tape, vars[0], cross, &spec, &params, mode, &mask)?;
                let mut r = ChaCha8Rng::seed_from_u64(read_seed);
                readout(tape, out.output, &mut r)
            },
            &inputs,
            cfg.eps,
        )?);
    }
    let label = match (role, mode) {
        (BlockRole::Encoder, _) => "da_block/encoder".to_string(),
        (BlockRole::Decoder, m) => format!("da_block/decoder_{m}"),
    };
    Ok(ComponentResult {
        name: label,
        report: GradCheckReport::combine(&reports),
        tolerance: OP_TOLERANCE,
    })
}

/// Segmentation loss against the logits of two stages.
pub fn check_seg_loss(cfg: &SuiteConfig) -> Result<ComponentResult> {
    let (c, t) = (cfg.classes, cfg.frames.max(2) - 2);
    let t = t.max(2);
    let mut reports = Vec::new();
    for seed in 0..cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, vec![c, t], 2.0),
            random(&mut rng, vec![c, t], 2.0),
        ];
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
        let mask = FrameMask::all(t);
        let targets = smoothing_targets(&inputs)?;
        reports.push(grad_check_many(
            |tape, vars| {
                seg_loss_frozen(tape, vars, &targets, &labels, &mask, LossConfig::default())
            },
            &inputs,
            cfg.eps,
        )?);
    }
    Ok(ComponentResult {
        name: "seg_loss".into(),
        report: GradCheckReport::combine(&reports),
        tolerance: OP_TOLERANCE,
    })
}

/// The suite's toy model configuration.
pub fn toy_model(cfg: &SuiteConfig, seed: u64) -> ModelConfig {
    let mut m =
        ModelConfig::new(cfg.input_dim, cfg.classes, cfg.blocks).with_model_dim(cfg.model_dim);
    m.num_decoders = cfg.decoders;
    m.seed = seed;
    m
}

/// Segmentation loss of the full model against its input and every
/// parameter.
pub fn check_end_to_end(cfg: &SuiteConfig) -> Result<ComponentResult> {
    check_end_to_end_from(cfg, 0)
}

#[doc(hidden)]
pub fn check_end_to_end_from(cfg: &SuiteConfig, first: u64) -> Result<ComponentResult> {
    let t = cfg.frames;
    let mut reports = Vec::new();
    for seed in first..first + cfg.seeds {
        let model = toy_model(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
        // Large weights keep attention away from uniform and small biases
        // keep every relu branch live. Either failure mode pushes some true
        // derivatives down to the round-off floor of the difference quotient.
        let params = ParameterSet::<f64>::init(&model)?;
        let mut inputs = vec![random(&mut rng, vec![cfg.input_dim, t], 1.0)];
        for (name, p) in params.iter() {
            let scale = if name.ends_with(".b") { 0.2 } else { 0.8 };
            inputs.push(random(&mut rng, p.shape().to_vec(), scale));
        }
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..cfg.classes)).collect();
        let mask = FrameMask::all(t);
        let names = params.names().to_vec();
        let forward = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Vec<Var>> {
            let bound = BoundParams::from_vars(names.clone(), vars[1..].to_vec());
            let out = dxformer_forward(tape, &model, &bound, vars[0], &mask)?;
            Ok(out.stages.iter().map(|s| s.logits).collect())
        };
        let targets = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let logits = forward(&mut tape, &vars)?;
            let values: Vec<Tensor<f64>> = logits.iter().map(|l| tape.value(*l).clone()).collect();
            smoothing_targets(&values)?
        };
        reports.push(grad_check_many(
            |tape, vars| {
                let logits = forward(tape, vars)?;
                seg_loss_frozen(
                    tape,
                    &logits,
                    &targets,
                    &labels,
                    &mask,
                    LossConfig::default(),
                )
            },
            &inputs,
            cfg.eps,
        )?);
    }
    Ok(ComponentResult {
        name: "end_to_end".into(),
        report: GradCheckReport::combine(&reports),
        tolerance: END_TO_END_TOLERANCE,
    })
}

/// Every component, in a fixed order.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<ComponentResult>> {
    let mut out = check_ops(cfg)?;
    out.push(check_da_block(
        cfg,
        BlockRole::Encoder,
        CrossQvMode::QueryKey,
    )?);
    out.push(check_da_block(
        cfg,
        BlockRole::Decoder,
        CrossQvMode::QueryKey,
    )?);
    out.push(check_da_block(
        cfg,
        BlockRole::Decoder,
        CrossQvMode::QueryValue,
    )?);
    out.push(check_seg_loss(cfg)?);
    out.push(check_end_to_end(cfg)?);
    Ok(out)
}
