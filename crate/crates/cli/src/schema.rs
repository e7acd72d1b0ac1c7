//! The closed key schema shared by config files and command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    Path,
    Choice(&'static [&'static str]),
}

impl Kind {
    pub fn check(self, raw: &str) -> Result<(), String> {
        let ok = match self {
            Kind::Uint => raw.parse::<u64>().is_ok(),
            Kind::Float => raw.parse::<f64>().map(f64::is_finite).unwrap_or(false),
            Kind::Bool => raw.parse::<bool>().is_ok(),
            Kind::Text | Kind::Path => true,
            Kind::Choice(opts) => opts.contains(&raw),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("expected {self}"))
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Uint => f.write_str("a non-negative integer"),
            Kind::Float => f.write_str("a finite number"),
            Kind::Bool => f.write_str("true or false"),
            Kind::Text => f.write_str("text"),
            Kind::Path => f.write_str("a path"),
            Kind::Choice(opts) => write!(f, "one of {}", opts.join(", ")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Predict,
    Eval,
    Metrics,
    GradCheck,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Synth,
        Command::Train,
        Command::Predict,
        Command::Eval,
        Command::Metrics,
        Command::GradCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Eval => "eval",
            Command::Metrics => "metrics",
            Command::GradCheck => "gradcheck",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::Synth => "Generate a synthetic dataset on disk",
            Command::Train => "Train a model and write a checkpoint",
            Command::Predict => "Write per-video label files from a checkpoint",
            Command::Eval => "Score a checkpoint on a dataset split",
            Command::Metrics => "Score prediction files against ground truth",
            Command::GradCheck => "Run the 64-bit gradient suite",
        }
    }
}

use Command::*;

/// One configuration key.
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    /// Default as text; `None` means unset.
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub commands: &'static [Command],
}

const DATA: &[Command] = &[Train, Predict, Eval];
const MODEL: &[Command] = &[Train, GradCheck];
const ALL: &[Command] = &[Synth, Train, Predict, Eval, Metrics, GradCheck];

const fn key(
    name: &'static str,
    kind: Kind,
    default: Option<&'static str>,
    help: &'static str,
    commands: &'static [Command],
) -> Key {
    Key {
        name,
        kind,
        default,
        help,
        commands,
    }
}

#[rustfmt::skip]
pub const SCHEMA: &[Key] = &[
    // paths
    key("data_root", Kind::Path, None, "Dataset root holding mapping.txt, features/, groundTruth/ and splits/", &[Train, Predict, Eval]),
    key("features_dir", Kind::Path, None, "Feature directory (default <data_root>/features)", DATA),
    key("labels_dir", Kind::Path, None, "Ground-truth label directory (default <data_root>/groundTruth)", &[Train, Eval]),
    key("mapping", Kind::Path, None, "Class mapping file (default <data_root>/mapping.txt)", &[Train, Predict, Eval, Metrics]),
    key("split", Kind::Path, None, "Manifest listing the videos to use, one id per line", DATA),
    key("fold", Kind::Uint, Some("0"), "Fold k: train on the videos not in <data_root>/splits/fold<k>.txt, predict and eval on the ones in it; 0 uses every video", DATA),
    key("out", Kind::Path, None, "Output directory", &[Synth, Train, Predict]),
    key("checkpoint", Kind::Path, None, "Checkpoint file: written by train (default <out>/model.ckpt), read by predict and eval", &[Train, Predict, Eval]),
    key("resume", Kind::Bool, Some("false"), "Continue training from the checkpoint", &[Train]),
    key("pred_dir", Kind::Path, None, "Directory of predicted label files", &[Metrics]),
    key("gt_dir", Kind::Path, None, "Directory of ground-truth label files", &[Metrics]),
    key("ignore_class", Kind::Text, None, "Class name left out of the F1 scores", &[Eval, Metrics]),
    // model
    key("preset", Kind::Choice(&["small", "large"]), Some("small"), "small: 9 blocks per stage, lr 5e-4, batch 1; large: 7 blocks, lr 1e-3, batch 8", &[Train]),
    key("model_dim", Kind::Uint, None, "Residual stream width F (default 64 when training, 4 for gradcheck)", MODEL),
    key("blocks_per_stage", Kind::Uint, None, "DA blocks per stage N (default from preset; 3 for gradcheck)", MODEL),
    key("num_decoders", Kind::Uint, None, "Decoder stages (default 3; 1 for gradcheck)", MODEL),
    key("attn_dim", Kind::Uint, None, "Query/key/value width (default max(F/4, 4))", &[Train]),
    key("cross_qv_mode", Kind::Choice(&["query_key", "query_value"]), Some("query_key"), "Which decoder projections see the encoder feature", &[Train]),
    key("cross_connections", Kind::Bool, Some("true"), "Decoder block j attends to encoder block j (false: to the last encoder block)", &[Train]),
    // training
    key("learning_rate", Kind::Float, None, "Adam learning rate (default from preset)", &[Train]),
    key("batch_size", Kind::Uint, None, "Videos per step (default from preset)", &[Train]),
    key("epochs", Kind::Uint, Some("120"), "Training epochs", &[Train]),
    key("max_steps", Kind::Uint, Some("0"), "Stop after this many steps (0 = no cap)", &[Train]),
    key("lambda_smooth", Kind::Float, Some("0.15"), "Weight of the smoothing loss", &[Train]),
    key("tau_clip", Kind::Float, Some("4"), "Clip on log-probability differences in the smoothing loss", &[Train]),
    key("dropout", Kind::Float, Some("0.5"), "Dropout on each block's update", &[Train]),
    key("checkpoint_every", Kind::Uint, Some("0"), "Also checkpoint every this many epochs (0 = only at the end)", &[Train]),
    key("workers", Kind::Uint, Some("1"), "Worker threads; 1 keeps runs bitwise reproducible", &[Train]),
    // synthetic data
    key("num_videos", Kind::Uint, Some("25"), "Videos to generate", &[Synth]),
    key("num_classes", Kind::Uint, None, "Classes (default 4 for synth, 3 for gradcheck)", &[Synth, GradCheck]),
    key("input_dim", Kind::Uint, None, "Feature width D (default 32 for synth, 3 for gradcheck)", &[Synth, GradCheck]),
    key("min_frames", Kind::Uint, Some("100"), "Shortest video", &[Synth]),
    key("max_frames", Kind::Uint, Some("300"), "Longest video", &[Synth]),
    key("mean_duration", Kind::Float, Some("20"), "Mean segment length in frames", &[Synth]),
    key("signal", Kind::Float, Some("1"), "Scale of the class centroids", &[Synth]),
    key("noise", Kind::Float, Some("0.25"), "Scale of the per-frame noise", &[Synth]),
    key("folds", Kind::Uint, Some("4"), "Cross-validation folds", &[Synth]),
    // gradient suite
    key("seeds", Kind::Uint, Some("20"), "Random seeds per component", &[GradCheck]),
    key("frames", Kind::Uint, Some("8"), "Sequence length", &[GradCheck]),
    key("eps", Kind::Float, Some("1e-5"), "Finite-difference step", &[GradCheck]),
    // shared
    key("seed", Kind::Uint, Some("0"), "Random seed", &[Synth, Train]),
    key("timing", Kind::Bool, Some("false"), "Print one elapsed-time line at the end", ALL),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

pub fn keys_for(cmd: Command) -> impl Iterator<Item = &'static Key> {
    SCHEMA.iter().filter(move |k| k.commands.contains(&cmd))
}

/// Parses a `key = value` file. Blank lines and `#` comments are skipped.
/// Every key must be in the schema; keys of other subcommands are accepted so
/// one file can drive a whole pipeline.
pub fn parse_config(path: &Path, text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}: expected key = value", at()))?;
        let (k, v) = (k.trim(), v.trim());
        let spec = lookup(k).ok_or_else(|| format!("{}: unknown key {k}", at()))?;
        spec.kind
            .check(v)
            .map_err(|e| format!("{}: {k}: {e}, got {v:?}", at()))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("{}: duplicate key {k}", at()));
        }
    }
    Ok(out)
}

/// Resolved values for one subcommand: file values overridden by flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    cmd: Command,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(cmd: Command, values: BTreeMap<String, String>) -> Self {
        Self { cmd, values }
    }

    fn spec(&self, name: &str) -> &'static Key {
        let spec = lookup(name).unwrap_or_else(|| panic!("key {name} is not in the schema"));
        debug_assert!(
            spec.commands.contains(&self.cmd),
            "{name} is not a {:?} key",
            self.cmd
        );
        spec
    }

    /// Raw value, falling back to the schema default.
    pub fn raw(&self, name: &str) -> Option<&str> {
        let spec = self.spec(name);
        self.values.get(name).map(String::as_str).or(spec.default)
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<Option<T>, String> {
        match self.raw(name) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| format!("{name}: {}, got {raw:?}", self.spec(name).kind)),
        }
    }

    pub fn get_or<T: FromStr>(&self, name: &str, fallback: T) -> Result<T, String> {
        Ok(self.get(name)?.unwrap_or(fallback))
    }

    pub fn require<T: FromStr>(&self, name: &str) -> Result<T, String> {
        self.get(name)?
            .ok_or_else(|| format!("missing required key {name}"))
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.raw(name).map(PathBuf::from)
    }

    pub fn require_path(&self, name: &str) -> Result<PathBuf, String> {
        self.path(name)
            .ok_or_else(|| format!("missing required key {name}"))
    }
}
