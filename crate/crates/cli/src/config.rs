// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use svtrace::ioi::Role;
use svtrace::model::{load_weights, FoldedWeights, HeadId};
use svtrace::omega::OmegaSet;
use svtrace::tokenizer::BpeVocab;
use svtrace::trace::SliceMode;

/// Bad invocation: missing inputs, out-of-range values, unknown selectors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(
    name = "svtrace",
    version,
    about = "Sparse attention decomposition and singular vector tracing for GPT-2 small"
)]
pub struct Cli {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Signal,
    AllSlices,
}

impl From<ModeArg> for SliceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Signal => SliceMode::Signal,
            ModeArg::AllSlices => SliceMode::AllSlices,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// GPT-2 small safetensors file.
    #[arg(
        long,
        global = true,
        env = "SVT_WEIGHTS",
        default_value = "data/gpt2/model.safetensors"
    )]
    pub weights: PathBuf,
    #[arg(long, global = true, env = "SVT_VOCAB", default_value = "data/vocab.json")]
    pub vocab: PathBuf,
    #[arg(long, global = true, env = "SVT_MERGES", default_value = "data/merges.txt")]
    pub merges: PathBuf,
    /// IOI dataset seed.
    #[arg(long, global = true, env = "SVT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, env = "SVT_N_PROMPTS", default_value_t = 256)]
    pub n_prompts: usize,
    /// Comma-separated `layer.head` list.
    #[arg(long, global = true, env = "SVT_START_HEADS", default_value = "9.6,9.9,10.0", value_delimiter = ',', value_parser = parse_head)]
    pub start_heads: Vec<HeadId>,
    #[arg(long, global = true, env = "SVT_FIRING_THRESHOLD", default_value_t = 0.5)]
    pub firing_threshold: f64,
    #[arg(long, global = true, env = "SVT_SIGNIFICANCE", default_value_t = 0.70)]
    pub significance: f64,
    /// Edge occurrence threshold at 256 prompts; scaled by n/256, rounded up.
    #[arg(long, global = true, env = "SVT_EDGE_MIN", default_value_t = 65)]
    pub edge_min: usize,
    /// Skeleton occurrence threshold at 256 prompts; scaled like --edge-min.
    #[arg(long, global = true, env = "SVT_SKELETON_MIN", default_value_t = 170)]
    pub skeleton_min: usize,
    #[arg(long, global = true, env = "SVT_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for prompt-level parallelism (default: all cores).
    #[arg(long, global = true, env = "SVT_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true, env = "SVT_MODE", value_enum, default_value_t = ModeArg::Signal)]
    pub mode: ModeArg,
    /// Binary cache of the per-head SVDs, keyed by weight digest.
    #[arg(long, global = true, env = "SVT_OMEGA_CACHE")]
    pub omega_cache: Option<PathBuf>,
    /// Reduce token ids modulo the model vocabulary. Only meaningful for
    /// small synthetic test models.
    #[arg(long, global = true, env = "SVT_FOLD_IDS", hide = true)]
    pub fold_ids: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace the circuit from the start heads over an IOI dataset.
    Trace,
    /// Histogram of signal-set sizes over all firings.
    Sparsity {
        /// `ioi` or a UTF-8 text file (one sample per non-empty line).
        #[arg(long, default_value = "ioi")]
        input: String,
    },
    /// Intervene on traced edges and report per-prompt metrics.
    Intervene(InterveneArgs),
    /// Upstream-contribution matrix into one head at one token role.
    Heatmap {
        /// `layer.head`
        #[arg(long, value_parser = parse_head)]
        downstream: HeadId,
        #[arg(long, value_parser = parse_role, default_value = "end")]
        role: Role,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SiteArg {
    Global,
    Local,
    LocalLayerwide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Ablate,
    Boost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Signal,
    Random,
}

#[derive(Debug, Clone, Args)]
pub struct InterveneArgs {
    /// Directory written by `svtrace trace` (default: --out).
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Edge selector, repeatable for a joint intervention. Either
    /// `U.H-D.H:side:dest_role:src_role` or `top:D.H:role` for the
    /// heaviest edge into head D.H writing to `role`.
    #[arg(long, required = true)]
    pub edge: Vec<String>,
    #[arg(long, value_enum, default_value_t = SiteArg::Global)]
    pub site: SiteArg,
    #[arg(long, value_enum, default_value_t = DirectionArg::Ablate)]
    pub direction: DirectionArg,
    #[arg(long, value_enum, default_value_t = BasisArg::Signal)]
    pub basis: BasisArg,
    /// Seed for `--basis random`.
    #[arg(long, default_value_t = 1)]
    pub random_seed: u64,
}

pub fn parse_head(s: &str) -> std::result::Result<HeadId, String> {
    let (l, h) = s
        .trim()
        .trim_matches(|c| c == '(' || c == ')')
        .split_once(['.', ','])
        .ok_or_else(|| format!("expected layer.head, got `{s}`"))?;
    let l = l.trim().parse().map_err(|_| format!("bad layer in `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad head in `{s}`"))?;
    Ok(HeadId::new(l, h))
}

pub fn parse_role(s: &str) -> std::result::Result<Role, String> {
    Role::parse(s).ok_or_else(|| {
        let all: Vec<&str> = Role::ALL.iter().map(|r| r.as_str()).collect();
        format!("unknown role `{s}`, expected one of {}", all.join(", "))
    })
}

impl RunArgs {
    pub fn validate(&self) -> Result<()> {
        if !(self.firing_threshold > 0.0 && self.firing_threshold < 1.0) {
            return usage(format!(
                "--firing-threshold must be in (0, 1), got {}",
                self.firing_threshold
            ));
        }
        if !(self.significance > 0.0 && self.significance <= 1.0) {
            return usage(format!("--significance must be in (0, 1], got {}", self.significance));
        }
        if self.n_prompts == 0 {
            return usage("--n-prompts must be at least 1");
        }
        if self.workers == Some(0) {
            return usage("--workers must be at least 1");
        }
        Ok(())
    }

    pub fn check_heads(&self, weights: &FoldedWeights, heads: &[HeadId]) -> Result<()> {
        let c = weights.config;
        for h in heads {
            if h.layer >= c.n_layers || h.head >= c.n_heads {
                return usage(format!(
                    "head {h} out of range: the model has {} layers of {} heads",
                    c.n_layers, c.n_heads
                ));
            }
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Result<BpeVocab> {
        require(&self.vocab, "--vocab (GPT-2 vocab.json)")?;
        require(&self.merges, "--merges (GPT-2 merges.txt)")?;
        Ok(BpeVocab::load(&self.vocab, &self.merges)?)
    }

    pub fn model(&self) -> Result<Model> {
        require(
            &self.weights,
            "--weights (GPT-2 small safetensors; fetch it with the weights-fetch tool)",
        )?;
        let m = load_weights(&self.weights).with_context(|| format!("loading {}", self.weights.display()))?;
        let omegas = match &self.omega_cache {
            Some(p) => match OmegaSet::read_cache(p, &m.digest) {
                Ok(o) => o,
                Err(_) => {
                    let o = OmegaSet::compute(&m.weights)?;
                    o.write_cache(p, &m.digest)?;
                    o
                }
            },
            None => OmegaSet::compute(&m.weights)?,
        };
        Ok(Model {
            weights: m.weights,
            digest: m.digest,
            omegas,
        })
    }
}

pub struct Model {
    pub weights: FoldedWeights,
    pub digest: String,
    pub omegas: OmegaSet,
}

fn require(p: &Path, what: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        usage(format!("{} not found; pass {what}", p.display()))
    }
}
