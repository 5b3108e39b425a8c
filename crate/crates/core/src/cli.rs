//! Command-line front end: argument parsing, artifact files and exit codes.
//!
//! Every subcommand accepts `--config FILE` plus one flag per configuration
//! key; flags override the file. Each written artifact gets a `.meta`
//! sidecar recording the software version, seed and configuration hash.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{
    value_parser, Arg, ArgAction, ArgGroup, ArgMatches, Args, Command, FromArgMatches, Parser,
    Subcommand,
};

use crate::autodiff::{read_metadata, CheckpointMeta};
use crate::config::{RunConfig, KEYS};
use crate::corpus::{
    read_binary_trees, read_distances, read_labeled_trees, read_nli, read_sentences, write_lines,
    Vocab,
};
use crate::distance::infer_tree;
use crate::error::{Error, Result};
use crate::eval::{render_report, ReportRow};
use crate::pipeline::{
    build_vocab, evaluate_runs, fresh_parser, infer_with_prpn, pair_sentences, parse_sentences,
    refine_stage, train_prpn, train_sbs_stage, DevData, TeacherParse,
};
use crate::prpn::Prpn;
use crate::render::render_tree;
use crate::synth::{generate, Grammar};
use crate::treelstm::TreeLstm;
use crate::trees::{PunctuationSet, Token};

/// Exit status for an error: 1 usage, 3 numeric failure, 2 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Parser)]
#[command(
    name = "imitparse",
    version,
    about = "Unsupervised constituency parsing by imitation learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample sentences, gold trees and sentence pairs from a grammar.
    GenSynthetic(GenArgs),
    /// Train the distance-gated language model.
    TrainPrpn(TrainPrpnArgs),
    /// Induce trees from a checkpoint or from distance vectors.
    InferTrees(InferArgs),
    /// Train a Tree-LSTM parser to imitate teacher trees step by step.
    TrainSbs(SbsArgs),
    /// Refine a parser on the pair task with Gumbel-Softmax sampling.
    Refine(RefineArgs),
    /// Score predicted tree files against references.
    Evaluate(EvalArgs),
    /// Draw one tree of a tree file.
    Render(RenderArgs),
}

/// `--config FILE` plus one optional flag per configuration key.
#[derive(Clone, Debug, Default)]
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

const BOOL_KEYS: &[&str] = &["learn-gamma", "include-root", "micro", "strip-punctuation"];

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        Ok(ConfigArgs {
            file: m.get_one::<PathBuf>("config").cloned(),
            overrides: KEYS
                .iter()
                .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
                .collect(),
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("key=value configuration file")
                .help_heading("Configuration"),
        );
        for (key, help) in KEYS {
            let mut arg = Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help(*help)
                .help_heading("Configuration")
                .action(ArgAction::Set);
            if BOOL_KEYS.contains(key) {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            cmd = cmd.arg(arg);
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.file {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for (k, v) in &self.overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenArgs {
    /// Grammar file; the bundled toy grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Receives sentences.txt, gold.trees and pairs.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainPrpnArgs {
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    sentences: PathBuf,
    /// Checkpoint path; the vocabulary and epoch log go next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["sentences", "pairs", "distances"])))]
struct InferArgs {
    /// Language-model or parser checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    sentences: Option<PathBuf>,
    /// Parse every distinct sentence of a pair file.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Build trees over w1..wN straight from distance vectors.
    #[arg(long)]
    distances: Option<PathBuf>,
    /// Induced trees, one per line.
    #[arg(long)]
    out_trees: PathBuf,
    /// Language-model distances, one vector per tree.
    #[arg(long)]
    out_distances: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SbsArgs {
    /// Teacher trees from infer-trees.
    #[arg(long)]
    trees: PathBuf,
    /// Teacher distances, aligned with the trees.
    #[arg(long)]
    distances: PathBuf,
    /// Sentence pairs for the task loss; parse loss only when omitted.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Checkpoint path; the vocabulary and epoch log go next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
#[command(group(ArgGroup::new("start").required(true).args(["checkpoint", "init"])))]
struct RefineArgs {
    /// Labeled pairs, `label<TAB>premise<TAB>hypothesis` per line.
    #[arg(long)]
    pairs: PathBuf,
    /// Parser checkpoint from train-sbs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `random` starts from a fresh parser instead of a checkpoint.
    #[arg(long)]
    init: Option<String>,
    /// Receives one checkpoint per run, named by seed.
    #[arg(long)]
    out_dir: PathBuf,
    /// Sentences scored after every epoch; needs --dev-gold.
    #[arg(long, requires = "dev_gold")]
    dev_sentences: Option<PathBuf>,
    /// Reference trees for the dev sentences.
    #[arg(long, requires = "dev_sentences")]
    dev_gold: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted tree file; repeat for several runs.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Reference trees, labeled or not.
    #[arg(long)]
    gold: PathBuf,
    /// Comma-separated constituent labels for per-label accuracy.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Run tested against the first --pred with the paired bootstrap.
    #[arg(long)]
    against: Option<PathBuf>,
    /// Punctuation tokens, one per line, for --strip-punctuation.
    #[arg(long)]
    punctuation: Option<PathBuf>,
    /// Report file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RenderArgs {
    /// Bracketed trees, one per line.
    #[arg(long)]
    trees: PathBuf,
    /// 1-based line of the tree to draw.
    #[arg(long, default_value_t = 1)]
    index: usize,
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynthetic(a) => gen_synthetic(a),
        Cmd::TrainPrpn(a) => cmd_train_prpn(a),
        Cmd::InferTrees(a) => infer_trees(a),
        Cmd::TrainSbs(a) => cmd_train_sbs(a),
        Cmd::Refine(a) => cmd_refine(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Render(a) => render(a),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `<artifact>.meta`: provenance of a text artifact.
fn write_sidecar(
    artifact: &Path,
    stage: &str,
    config: &RunConfig,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let mut lines = vec![
        format!("software=imitparse {}", env!("CARGO_PKG_VERSION")),
        format!("stage={stage}"),
        format!("seed={}", config.seed),
        format!("config_hash={}", config.hash()),
    ];
    lines.extend(
        inputs
            .iter()
            .map(|(k, p)| format!("input.{k}={}", p.display())),
    );
    lines.extend(config.to_string().lines().map(|l| format!("config.{l}")));
    write_lines(&with_suffix(artifact, ".meta"), &lines)
}

fn checkpoint_meta(stage: &str, config: &RunConfig, seed: u64, steps: u64) -> CheckpointMeta {
    CheckpointMeta {
        seed,
        steps,
        config_hash: config.hash(),
        ..Default::default()
    }
    .with("stage", stage)
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} does not exist; run {produced_by} first",
            path.display()
        )))
    }
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let grammar = match &a.grammar {
        Some(p) => Grammar::load(p)?,
        None => Grammar::bundled(),
    };
    let corpus = generate(&grammar, config.count, config.max_len, config.seed)?;
    let sentences: Vec<String> = corpus.sentences.iter().map(|s| s.join(" ")).collect();
    let trees: Vec<String> = corpus.trees.iter().map(|t| t.to_string()).collect();
    let pairs: Vec<String> = corpus.pairs.iter().map(|p| p.to_string()).collect();
    let grammar_path = a
        .grammar
        .clone()
        .unwrap_or_else(|| PathBuf::from("<bundled>"));
    for (name, lines) in [
        ("sentences.txt", &sentences),
        ("gold.trees", &trees),
        ("pairs.tsv", &pairs),
    ] {
        let path = a.out_dir.join(name);
        write_lines(&path, lines)?;
        write_sidecar(
            &path,
            "gen-synthetic",
            &config,
            &[("grammar", &grammar_path)],
        )?;
    }
    eprintln!(
        "gen-synthetic: {} sentences and pairs in {}",
        config.count,
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_train_prpn(a: TrainPrpnArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let sentences = read_sentences(&a.sentences)?;
    let run = train_prpn(&sentences, &config)?;
    run.model.save(&a.out, run.steps, &config.hash())?;
    run.vocab.save(&with_suffix(&a.out, ".vocab"))?;
    let log: Vec<String> = run
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(i, l)| format!("epoch={} loss={l:.6}", i + 1))
        .collect();
    let log_path = with_suffix(&a.out, ".log");
    write_lines(&log_path, &log)?;
    write_sidecar(
        &log_path,
        "train-prpn",
        &config,
        &[("sentences", &a.sentences)],
    )?;
    if let Some(last) = run.epoch_loss.last() {
        eprintln!(
            "train-prpn: {} epochs, {} updates, final loss {last:.4}",
            run.epoch_loss.len(),
            run.steps
        );
    }
    Ok(())
}

fn load_vocab(checkpoint: &Path) -> Result<Vocab> {
    Vocab::load(&with_suffix(checkpoint, ".vocab"))
}

fn infer_trees(a: InferArgs) -> Result<()> {
    let config = a.config.resolve()?;
    if let Some(dpath) = &a.distances {
        if a.checkpoint.is_some() || a.out_distances.is_some() {
            return Err(Error::Usage(
                "--distances builds trees directly; drop --checkpoint and --out-distances".into(),
            ));
        }
        let trees = read_distances(dpath)?
            .iter()
            .map(|d| infer_tree(d, &Token::placeholders(d.sentence_len()), config.scheme))
            .collect::<Result<Vec<_>>>()?;
        let lines: Vec<String> = trees.iter().map(|t| t.to_string()).collect();
        write_lines(&a.out_trees, &lines)?;
        return write_sidecar(
            &a.out_trees,
            "infer-trees",
            &config,
            &[("distances", dpath)],
        );
    }
    let checkpoint = a.checkpoint.as_ref().ok_or_else(|| {
        Error::Usage("--checkpoint is required with --sentences or --pairs".into())
    })?;
    require(checkpoint, "train-prpn or train-sbs")?;
    let (input, sentences) = match (&a.sentences, &a.pairs) {
        (Some(p), _) => (p, read_sentences(p)?),
        (None, Some(p)) => (p, pair_sentences(&read_nli(p)?)),
        (None, None) => unreachable!("clap enforces one input"),
    };
    let vocab = load_vocab(checkpoint)?;
    let inputs = [
        ("checkpoint", checkpoint.as_path()),
        ("sentences", input.as_path()),
    ];
    match read_metadata(checkpoint)?.get("model") {
        Some("prpn") => {
            let model = Prpn::load(checkpoint)?;
            let parses = infer_with_prpn(&model, &vocab, &sentences, config.scheme)?;
            let trees: Vec<String> = parses.iter().map(|p| p.tree.to_string()).collect();
            write_lines(&a.out_trees, &trees)?;
            write_sidecar(&a.out_trees, "infer-trees", &config, &inputs)?;
            if let Some(out) = &a.out_distances {
                let d: Vec<String> = parses.iter().map(|p| p.distances.to_string()).collect();
                write_lines(out, &d)?;
                write_sidecar(out, "infer-trees", &config, &inputs)?;
            }
        }
        Some("treelstm") => {
            if a.out_distances.is_some() {
                return Err(Error::Usage(
                    "a parser checkpoint produces no distances".into(),
                ));
            }
            let (model, _) = TreeLstm::load(checkpoint)?;
            let trees: Vec<String> = parse_sentences(&model, &vocab, &sentences)?
                .iter()
                .map(|t| t.to_string())
                .collect();
            write_lines(&a.out_trees, &trees)?;
            write_sidecar(&a.out_trees, "infer-trees", &config, &inputs)?;
        }
        other => {
            return Err(Error::invalid(format!(
                "{}: unknown model kind {:?}",
                checkpoint.display(),
                other.unwrap_or("?")
            )))
        }
    }
    eprintln!(
        "infer-trees: {} trees to {}",
        sentences.len(),
        a.out_trees.display()
    );
    Ok(())
}

fn cmd_train_sbs(a: SbsArgs) -> Result<()> {
    let config = a.config.resolve()?;
    require(&a.trees, "infer-trees")?;
    require(&a.distances, "infer-trees --out-distances")?;
    let trees = read_binary_trees(&a.trees)?;
    let distances = read_distances(&a.distances)?;
    if trees.len() != distances.len() {
        return Err(Error::invalid(format!(
            "{} teacher trees but {} distance vectors",
            trees.len(),
            distances.len()
        )));
    }
    let teacher = trees
        .into_iter()
        .zip(distances)
        .map(|(tree, distances)| TeacherParse { tree, distances })
        .collect::<Vec<_>>();
    let pairs = match &a.pairs {
        Some(p) => read_nli(p)?,
        None => Vec::new(),
    };
    let (vocab, model, log) = train_sbs_stage(&teacher, &pairs, &config)?;
    let steps = (log.len() * teacher.len().max(pairs.len()).div_ceil(config.batch_size)) as u64;
    model.save(
        &a.out,
        checkpoint_meta("train-sbs", &config, config.seed, steps),
    )?;
    vocab.save(&with_suffix(&a.out, ".vocab"))?;
    let lines: Vec<String> = log
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!(
                "epoch={} task_loss={:.6} parse_loss={:.6} total={:.6}",
                i + 1,
                e.task_loss,
                e.parse_loss,
                e.total
            )
        })
        .collect();
    let log_path = with_suffix(&a.out, ".log");
    write_lines(&log_path, &lines)?;
    let mut inputs = vec![
        ("trees", a.trees.as_path()),
        ("distances", a.distances.as_path()),
    ];
    if let Some(p) = &a.pairs {
        inputs.push(("pairs", p));
    }
    write_sidecar(&log_path, "train-sbs", &config, &inputs)?;
    if let Some(last) = log.last() {
        eprintln!(
            "train-sbs: {} epochs, final parse loss {:.4}, task loss {:.4}",
            log.len(),
            last.parse_loss,
            last.task_loss
        );
    }
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let pairs = read_nli(&a.pairs)?;
    let start = match (&a.checkpoint, a.init.as_deref()) {
        (Some(ck), None) => {
            require(ck, "train-sbs")?;
            let (model, _) = TreeLstm::load(ck)?;
            Some((model, load_vocab(ck)?))
        }
        (None, Some("random")) => None,
        (None, Some(other)) => {
            return Err(Error::Usage(format!(
                "--init accepts only `random`, got {other:?}"
            )))
        }
        _ => {
            return Err(Error::Usage(
                "give either --checkpoint or --init random".into(),
            ))
        }
    };
    let dev_data = match (&a.dev_sentences, &a.dev_gold) {
        (Some(s), Some(g)) => Some((read_sentences(s)?, read_labeled_trees(g)?)),
        _ => None,
    };
    let dev = dev_data.as_ref().map(|(s, g)| DevData {
        sentences: s,
        gold: g,
    });
    let vocab = match &start {
        Some((_, v)) => v.clone(),
        None => build_vocab(&pair_sentences(&pairs), &config),
    };
    for r in 0..config.refine_runs as u64 {
        let seed = config.seed + r;
        let model = match &start {
            Some((m, _)) => m.clone(),
            None => fresh_parser(&vocab, &config, seed)?,
        };
        let (model, log) = refine_stage(model, &vocab, &pairs, &config, seed, dev.as_ref())?;
        let out = a.out_dir.join(format!("refine-s{seed}.ckpt"));
        let steps = (log.len() * pairs.len().div_ceil(config.batch_size)) as u64;
        let origin = if start.is_some() {
            "checkpoint"
        } else {
            "random"
        };
        model.save(
            &out,
            checkpoint_meta("refine", &config, seed, steps).with("init", origin),
        )?;
        vocab.save(&with_suffix(&out, ".vocab"))?;
        let lines: Vec<String> = log
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut l = format!(
                    "epoch={} task_loss={:.6} accuracy={:.6}",
                    i + 1,
                    e.task_loss,
                    e.accuracy
                );
                if let Some(f) = e.dev_f {
                    let _ = write!(l, " dev_f={f:.6}");
                }
                l
            })
            .collect();
        let log_path = with_suffix(&out, ".log");
        write_lines(&log_path, &lines)?;
        let mut inputs = vec![("pairs", a.pairs.as_path())];
        if let Some(ck) = &a.checkpoint {
            inputs.push(("checkpoint", ck));
        }
        write_sidecar(&log_path, "refine", &config, &inputs)?;
        if let Some(last) = log.last() {
            eprintln!(
                "refine: seed {seed}, accuracy {:.4}, wrote {}",
                last.accuracy,
                out.display()
            );
        }
    }
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let gold = read_labeled_trees(&a.gold)?;
    let runs = a
        .pred
        .iter()
        .map(|p| read_binary_trees(p))
        .collect::<Result<Vec<_>>>()?;
    let against = a
        .against
        .as_ref()
        .map(|p| read_binary_trees(p))
        .transpose()?;
    let punct = match (&a.punctuation, config.strip_punctuation) {
        (Some(p), true) => Some(PunctuationSet::load(p)?),
        (None, true) => Some(PunctuationSet::default()),
        (Some(_), false) => {
            return Err(Error::Usage(
                "--punctuation only applies with --strip-punctuation".into(),
            ))
        }
        (None, false) => None,
    };
    let e = evaluate_runs(
        &runs,
        &gold,
        &a.labels,
        against.as_deref(),
        punct.as_ref(),
        &config,
    )?;
    let mut rows: Vec<ReportRow> = a
        .pred
        .iter()
        .zip(&e.run_f)
        .map(|(p, f)| ReportRow {
            label: format!("run:{}", p.display()),
            count: gold.len(),
            value: Some(*f),
        })
        .collect();
    rows.extend(e.labels.iter().map(|(l, acc)| ReportRow {
        label: l.clone(),
        count: acc.count,
        value: acc.accuracy(),
    }));
    let fmt = |v: f64| format!("{v:.6}");
    let mut kv = vec![
        ("runs".to_string(), runs.len().to_string()),
        ("sentences".to_string(), gold.len().to_string()),
        (
            "averaging".to_string(),
            if config.micro { "micro" } else { "macro" }.to_string(),
        ),
        ("include_root".to_string(), config.include_root.to_string()),
        (
            "punctuation".to_string(),
            if punct.is_some() { "stripped" } else { "kept" }.to_string(),
        ),
        ("mean_f".to_string(), fmt(e.mean_f)),
    ];
    if let Some(s) = e.self_agreement {
        kv.push(("self_agreement".to_string(), fmt(s)));
    }
    kv.push(("rb_agreement".to_string(), fmt(e.rb_agreement)));
    if let Some(p) = e.bootstrap_p {
        kv.push(("bootstrap_p".to_string(), fmt(p)));
        kv.push((
            "bootstrap_iterations".to_string(),
            config.bootstrap_iterations.to_string(),
        ));
    }
    let report = render_report(&rows, &kv);
    match &a.out {
        Some(out) => {
            write_lines(out, &report.lines().collect::<Vec<_>>())?;
            let mut inputs: Vec<(&str, &Path)> =
                a.pred.iter().map(|p| ("pred", p.as_path())).collect();
            inputs.push(("gold", &a.gold));
            write_sidecar(out, "evaluate", &config, &inputs)?;
        }
        None => print!("{report}"),
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let trees = read_labeled_trees(&a.trees)?;
    if a.index == 0 || a.index > trees.len() {
        return Err(Error::Usage(format!(
            "--index {} outside 1..={} for {}",
            a.index,
            trees.len(),
            a.trees.display()
        )));
    }
    print!("{}", render_tree(&trees[a.index - 1]));
    Ok(())
}
