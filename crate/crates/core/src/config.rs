//! Flat `key=value` run configuration shared by every pipeline stage.
//!
//! Keys are kebab-case. A config file sets any subset of them; command-line
//! flags of the same name override the file. The hash of the fully
//! resolved configuration is recorded in every artifact sidecar.

use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Real;
use crate::distance::InferenceScheme;
use crate::error::{Error, Result};
use crate::eval::{EvalFlags, DEFAULT_BOOTSTRAP_ITERATIONS, MIN_BOOTSTRAP_ITERATIONS};
use crate::imitation::ImitationConfig;
use crate::prpn::PrpnConfig;
use crate::treelstm::TreeLstmConfig;

/// Every recognized key with a one-line description, in rendering order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base random seed for every stage"),
    ("count", "number of synthetic sentences"),
    ("max-len", "maximum synthetic sentence length"),
    (
        "min-count",
        "minimum token frequency kept in the vocabulary",
    ),
    ("max-vocab", "vocabulary size cap, reserved tokens included"),
    ("prpn-embed-dim", "language-model embedding size"),
    ("prpn-hidden-dim", "language-model hidden size"),
    ("window", "left-context window of the distance network"),
    ("tau", "gate temperature"),
    ("prpn-lr", "language-model SGD learning rate"),
    ("prpn-epochs", "language-model training epochs"),
    ("prpn-batch-size", "language-model minibatch size"),
    ("scheme", "tree inference scheme, a or b"),
    ("embed-dim", "Tree-LSTM embedding size"),
    ("hidden-dim", "Tree-LSTM hidden size"),
    ("classifier-dim", "pair classifier hidden size"),
    ("lambda", "parse-loss weight during step-by-step training"),
    ("sbs-lr", "step-by-step Adam learning rate"),
    ("sbs-epochs", "step-by-step training epochs"),
    ("refine-lr", "refinement Adam learning rate"),
    ("refine-epochs", "refinement epochs"),
    ("refine-runs", "independently seeded refinement runs"),
    ("batch-size", "Tree-LSTM minibatch size"),
    ("gamma", "initial Gumbel-Softmax temperature for refinement"),
    ("learn-gamma", "train the temperature during refinement"),
    ("clip", "gradient norm clip"),
    ("include-root", "count the whole-sentence span when scoring"),
    (
        "micro",
        "pool bracket counts instead of averaging sentence F",
    ),
    ("strip-punctuation", "drop punctuation before scoring"),
    ("bootstrap-iterations", "paired bootstrap resamples"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub count: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub max_vocab: usize,
    pub prpn_embed_dim: usize,
    pub prpn_hidden_dim: usize,
    pub window: usize,
    pub tau: Real,
    pub prpn_lr: Real,
    pub prpn_epochs: usize,
    pub prpn_batch_size: usize,
    pub scheme: InferenceScheme,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub classifier_dim: usize,
    pub lambda: Real,
    pub sbs_lr: Real,
    pub sbs_epochs: usize,
    pub refine_lr: Real,
    pub refine_epochs: usize,
    pub refine_runs: usize,
    pub batch_size: usize,
    pub gamma: Real,
    pub learn_gamma: bool,
    pub clip: Real,
    pub include_root: bool,
    pub micro: bool,
    pub strip_punctuation: bool,
    pub bootstrap_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prpn = PrpnConfig::default();
        let tree = TreeLstmConfig::default();
        let imit = ImitationConfig::default();
        let eval = EvalFlags::default();
        RunConfig {
            seed: 1,
            count: 300,
            max_len: 10,
            min_count: 1,
            max_vocab: 10_000,
            prpn_embed_dim: prpn.embed_dim,
            prpn_hidden_dim: prpn.hidden_dim,
            window: prpn.window,
            tau: prpn.tau,
            prpn_lr: prpn.lr,
            prpn_epochs: prpn.epochs,
            prpn_batch_size: prpn.batch_size,
            scheme: InferenceScheme::MaxSplit,
            embed_dim: tree.embed_dim,
            hidden_dim: tree.hidden_dim,
            classifier_dim: tree.classifier_dim,
            lambda: imit.lambda,
            sbs_lr: imit.sbs_lr,
            sbs_epochs: imit.sbs_epochs,
            refine_lr: imit.refine_lr,
            refine_epochs: imit.refine_epochs,
            refine_runs: 1,
            batch_size: imit.batch_size,
            gamma: imit.gamma,
            learn_gamma: imit.learn_gamma,
            clip: imit.clip,
            include_root: eval.include_root,
            micro: eval.micro,
            strip_punctuation: false,
            bootstrap_iterations: DEFAULT_BOOTSTRAP_ITERATIONS,
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.trim()
        .parse()
        .map_err(|e| Error::Usage(format!("{key}: cannot parse {raw:?}: {e}")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Usage(format!(
            "{key}: expected true or false, got {other:?}"
        ))),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are usage errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "seed" => self.seed = value(key, raw)?,
            "count" => self.count = value(key, raw)?,
            "max-len" => self.max_len = value(key, raw)?,
            "min-count" => self.min_count = value(key, raw)?,
            "max-vocab" => self.max_vocab = value(key, raw)?,
            "prpn-embed-dim" => self.prpn_embed_dim = value(key, raw)?,
            "prpn-hidden-dim" => self.prpn_hidden_dim = value(key, raw)?,
            "window" => self.window = value(key, raw)?,
            "tau" => self.tau = value(key, raw)?,
            "prpn-lr" => self.prpn_lr = value(key, raw)?,
            "prpn-epochs" => self.prpn_epochs = value(key, raw)?,
            "prpn-batch-size" => self.prpn_batch_size = value(key, raw)?,
            "scheme" => {
                self.scheme = raw
                    .trim()
                    .parse()
                    .map_err(|e| Error::Usage(format!("scheme: {e}")))?
            }
            "embed-dim" => self.embed_dim = value(key, raw)?,
            "hidden-dim" => self.hidden_dim = value(key, raw)?,
            "classifier-dim" => self.classifier_dim = value(key, raw)?,
            "lambda" => self.lambda = value(key, raw)?,
            "sbs-lr" => self.sbs_lr = value(key, raw)?,
            "sbs-epochs" => self.sbs_epochs = value(key, raw)?,
            "refine-lr" => self.refine_lr = value(key, raw)?,
            "refine-epochs" => self.refine_epochs = value(key, raw)?,
            "refine-runs" => self.refine_runs = value(key, raw)?,
            "batch-size" => self.batch_size = value(key, raw)?,
            "gamma" => self.gamma = value(key, raw)?,
            "learn-gamma" => self.learn_gamma = flag(key, raw)?,
            "clip" => self.clip = value(key, raw)?,
            "include-root" => self.include_root = flag(key, raw)?,
            "micro" => self.micro = flag(key, raw)?,
            "strip-punctuation" => self.strip_punctuation = flag(key, raw)?,
            "bootstrap-iterations" => self.bootstrap_iterations = value(key, raw)?,
            _ => return Err(Error::Usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut offset = 0;
        for line in text.split('\n') {
            let body = line.split('#').next().unwrap_or("").trim();
            if !body.is_empty() {
                let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                    offset,
                    message: format!("expected key=value, got {body:?}"),
                })?;
                self.set(k.trim(), v)?;
            }
            offset += line.len() + 1;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        Ok(c)
    }

    /// The value of `key` as it would be written to a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "count" => self.count.to_string(),
            "max-len" => self.max_len.to_string(),
            "min-count" => self.min_count.to_string(),
            "max-vocab" => self.max_vocab.to_string(),
            "prpn-embed-dim" => self.prpn_embed_dim.to_string(),
            "prpn-hidden-dim" => self.prpn_hidden_dim.to_string(),
            "window" => self.window.to_string(),
            "tau" => self.tau.to_string(),
            "prpn-lr" => self.prpn_lr.to_string(),
            "prpn-epochs" => self.prpn_epochs.to_string(),
            "prpn-batch-size" => self.prpn_batch_size.to_string(),
            "scheme" => self.scheme.to_string(),
            "embed-dim" => self.embed_dim.to_string(),
            "hidden-dim" => self.hidden_dim.to_string(),
            "classifier-dim" => self.classifier_dim.to_string(),
            "lambda" => self.lambda.to_string(),
            "sbs-lr" => self.sbs_lr.to_string(),
            "sbs-epochs" => self.sbs_epochs.to_string(),
            "refine-lr" => self.refine_lr.to_string(),
            "refine-epochs" => self.refine_epochs.to_string(),
            "refine-runs" => self.refine_runs.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "gamma" => self.gamma.to_string(),
            "learn-gamma" => self.learn_gamma.to_string(),
            "clip" => self.clip.to_string(),
            "include-root" => self.include_root.to_string(),
            "micro" => self.micro.to_string(),
            "strip-punctuation" => self.strip_punctuation.to_string(),
            "bootstrap-iterations" => self.bootstrap_iterations.to_string(),
            _ => return None,
        })
    }

    /// Hex SHA-256 of the rendered configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.prpn(2).validate()?;
        self.treelstm(2, 0).validate()?;
        self.imitation(self.seed).validate()?;
        if self.refine_runs == 0 {
            return Err(Error::Usage("refine-runs must be at least 1".into()));
        }
        if self.bootstrap_iterations < MIN_BOOTSTRAP_ITERATIONS {
            return Err(Error::Usage(format!(
                "bootstrap-iterations must be at least {MIN_BOOTSTRAP_ITERATIONS}"
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Usage("max-len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn prpn(&self, vocab_size: usize) -> PrpnConfig {
        PrpnConfig {
            vocab_size,
            embed_dim: self.prpn_embed_dim,
            hidden_dim: self.prpn_hidden_dim,
            window: self.window,
            tau: self.tau,
            lr: self.prpn_lr,
            clip: self.clip,
            epochs: self.prpn_epochs,
            batch_size: self.prpn_batch_size,
            seed: self.seed,
        }
    }

    pub fn treelstm(&self, vocab_size: usize, seed: u64) -> TreeLstmConfig {
        TreeLstmConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            classifier_dim: self.classifier_dim,
            gamma: self.gamma,
            learn_gamma: self.learn_gamma,
            seed,
        }
    }

    pub fn imitation(&self, seed: u64) -> ImitationConfig {
        ImitationConfig {
            lambda: self.lambda,
            sbs_lr: self.sbs_lr,
            sbs_epochs: self.sbs_epochs,
            refine_lr: self.refine_lr,
            refine_epochs: self.refine_epochs,
            batch_size: self.batch_size,
            gamma: self.gamma,
            learn_gamma: self.learn_gamma,
            clip: self.clip,
            seed,
        }
    }

    pub fn eval_flags(&self) -> EvalFlags {
        EvalFlags {
            include_root: self.include_root,
            micro: self.micro,
        }
    }
}

impl fmt::Display for RunConfig {
    /// One `key=value` line per key, in [`KEYS`] order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, _) in KEYS {
            writeln!(f, "{k}={}", self.get(k).unwrap_or_default())?;
        }
        Ok(())
    }
}
