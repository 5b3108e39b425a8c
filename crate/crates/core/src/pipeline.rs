//! In-memory stage functions behind the CLI: language-model training, tree
//! induction, step-by-step imitation, refinement and run evaluation.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::Real;
use crate::config::RunConfig;
use crate::corpus::{NliPair, Vocab};
use crate::distance::{infer_tree, DistanceVector, InferenceScheme};
use crate::error::{Error, Result};
use crate::eval::{
    corpus_mean_f, paired_bootstrap, per_label_accuracy, rb_agreement, self_agreement,
    LabelAccuracy,
};
use crate::imitation::{
    make_sbs_targets, refine, train_sbs, DevSet, PairExample, RefineEpoch, SbsEpoch, SbsExample,
    Supervised,
};
use crate::prpn::{train_lm, Prpn};
use crate::treelstm::TreeLstm;
use crate::trees::{
    strip_punctuation, BinaryTree, Constituency, LabeledTree, PunctuationSet, Token,
};

/// A teacher tree with the distances it was induced from.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParse {
    pub tree: BinaryTree,
    pub distances: DistanceVector,
}

pub struct PrpnRun {
    pub vocab: Vocab,
    pub model: Prpn,
    pub epoch_loss: Vec<Real>,
    pub steps: u64,
}

pub fn build_vocab<S: AsRef<str>>(sentences: &[Vec<S>], config: &RunConfig) -> Vocab {
    Vocab::build(sentences, config.min_count, config.max_vocab)
}

pub fn train_prpn(sentences: &[Vec<String>], config: &RunConfig) -> Result<PrpnRun> {
    let vocab = build_vocab(sentences, config);
    let ids: Vec<Vec<usize>> = sentences.iter().map(|s| vocab.encode(s)).collect();
    let (model, epoch_loss, steps) = train_lm(&ids, &config.prpn(vocab.len()))?;
    Ok(PrpnRun {
        vocab,
        model,
        epoch_loss,
        steps,
    })
}

/// Distances and induced trees for each sentence. One-word sentences get
/// an empty distance vector and a bare leaf.
pub fn infer_with_prpn(
    model: &Prpn,
    vocab: &Vocab,
    sentences: &[Vec<String>],
    scheme: InferenceScheme,
) -> Result<Vec<TeacherParse>> {
    sentences
        .iter()
        .map(|s| {
            let distances = match s.len() {
                0 => return Err(Error::invalid("cannot induce a tree for an empty sentence")),
                1 => DistanceVector::new(Vec::new())?,
                _ => model.extract_distances(&vocab.encode(s))?,
            };
            let tree = infer_tree(&distances, &Token::sequence(s), scheme)?;
            Ok(TeacherParse { tree, distances })
        })
        .collect()
}

/// Every distinct sentence of `pairs`, premise before hypothesis, in order
/// of first appearance.
pub fn pair_sentences(pairs: &[NliPair]) -> Vec<Vec<String>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in pairs {
        for s in [&p.premise, &p.hypothesis] {
            if seen.insert(s.join(" ")) {
                out.push(s.clone());
            }
        }
    }
    out
}

/// Vocabulary of the parser: teacher sentences plus pair sentences.
pub fn parser_vocab(teacher: &[TeacherParse], pairs: &[NliPair], config: &RunConfig) -> Vocab {
    let mut sentences: Vec<Vec<String>> = teacher.iter().map(|t| t.tree.words()).collect();
    sentences.extend(pair_sentences(pairs));
    build_vocab(&sentences, config)
}

/// Step-by-step examples. With pairs, one example per pair, both sides
/// supervised; every sentence must have a teacher parse. Without pairs,
/// one parse-only example per teacher tree.
pub fn sbs_examples(
    vocab: &Vocab,
    teacher: &[TeacherParse],
    pairs: &[NliPair],
) -> Result<Vec<SbsExample>> {
    let supervise = |t: &TeacherParse| -> Result<Supervised> {
        Ok(Supervised {
            ids: vocab.encode(&t.tree.words()),
            targets: make_sbs_targets(&t.tree, &t.distances)?,
        })
    };
    if pairs.is_empty() {
        return teacher
            .iter()
            .map(|t| {
                Ok(SbsExample {
                    premise: supervise(t)?,
                    task: None,
                })
            })
            .collect();
    }
    let index: HashMap<String, &TeacherParse> = teacher
        .iter()
        .map(|t| (t.tree.words().join(" "), t))
        .collect();
    let lookup = |s: &[String], k: usize| -> Result<&TeacherParse> {
        index.get(&s.join(" ")).copied().ok_or_else(|| {
            Error::invalid(format!(
                "pair {}: no teacher tree for {:?}; run infer-trees on the pair file",
                k + 1,
                s.join(" ")
            ))
        })
    };
    pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            Ok(SbsExample {
                premise: supervise(lookup(&p.premise, k)?)?,
                task: Some((supervise(lookup(&p.hypothesis, k)?)?, p.label)),
            })
        })
        .collect()
}

pub fn pair_examples(vocab: &Vocab, pairs: &[NliPair]) -> Vec<PairExample> {
    pairs
        .iter()
        .map(|p| PairExample {
            premise: vocab.encode(&p.premise),
            hypothesis: vocab.encode(&p.hypothesis),
            label: p.label,
        })
        .collect()
}

/// A freshly initialized parser seeded with `seed`.
pub fn fresh_parser(vocab: &Vocab, config: &RunConfig, seed: u64) -> Result<TreeLstm> {
    TreeLstm::new(config.treelstm(vocab.len(), seed))
}

/// Step-by-step training of a fresh parser seeded with `config.seed`.
pub fn train_sbs_stage(
    teacher: &[TeacherParse],
    pairs: &[NliPair],
    config: &RunConfig,
) -> Result<(Vocab, TreeLstm, Vec<SbsEpoch>)> {
    let vocab = parser_vocab(teacher, pairs, config);
    let examples = sbs_examples(&vocab, teacher, pairs)?;
    let model = fresh_parser(&vocab, config, config.seed)?;
    let (model, log) = train_sbs(&examples, model, &config.imitation(config.seed))?;
    Ok((vocab, model, log))
}

/// Reference sentences scored after each refinement epoch.
pub struct DevData<'a> {
    pub sentences: &'a [Vec<String>],
    pub gold: &'a [LabeledTree],
}

/// One refinement run with sampling seed `seed`.
pub fn refine_stage(
    model: TreeLstm,
    vocab: &Vocab,
    pairs: &[NliPair],
    config: &RunConfig,
    seed: u64,
    dev: Option<&DevData<'_>>,
) -> Result<(TreeLstm, Vec<RefineEpoch>)> {
    let examples = pair_examples(vocab, pairs);
    let dev_ids: Vec<Vec<usize>> = dev
        .map(|d| d.sentences.iter().map(|s| vocab.encode(s)).collect())
        .unwrap_or_default();
    let dev_set = dev.map(|d| DevSet {
        sentences: &dev_ids,
        gold: d.gold,
        flags: config.eval_flags(),
    });
    refine(&examples, model, &config.imitation(seed), dev_set.as_ref())
}

/// Greedy parses with the sentence's words at the leaves.
pub fn parse_sentences(
    model: &TreeLstm,
    vocab: &Vocab,
    sentences: &[Vec<String>],
) -> Result<Vec<BinaryTree>> {
    sentences
        .iter()
        .map(|s| model.parse(&vocab.encode(s))?.relabel_leaves(s))
        .collect()
}

/// Removes punctuation from a predicted tree and its reference.
fn strip_pair(
    pred: &BinaryTree,
    gold: &LabeledTree,
    punct: &PunctuationSet,
) -> Result<(BinaryTree, LabeledTree)> {
    let (_, gold) = strip_punctuation(&gold.words(), gold, punct)?;
    let (_, pred) = strip_punctuation(&pred.words(), &pred.to_labeled(), punct)?;
    Ok((pred.to_binary()?, gold))
}

/// Scores for a set of runs over the same sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct RunEvaluation {
    pub run_f: Vec<f64>,
    pub mean_f: f64,
    pub self_agreement: Option<f64>,
    pub rb_agreement: f64,
    /// Counts pooled over runs.
    pub labels: BTreeMap<String, LabelAccuracy>,
    /// One-tailed p for "first run beats the comparison run".
    pub bootstrap_p: Option<f64>,
}

pub fn evaluate_runs(
    runs: &[Vec<BinaryTree>],
    gold: &[LabeledTree],
    labels: &[String],
    against: Option<&[BinaryTree]>,
    punct: Option<&PunctuationSet>,
    config: &RunConfig,
) -> Result<RunEvaluation> {
    if runs.is_empty() {
        return Err(Error::Usage(
            "evaluation needs at least one predicted run".into(),
        ));
    }
    let flags = config.eval_flags();
    let prepare = |run: &[BinaryTree]| -> Result<(Vec<BinaryTree>, Vec<LabeledTree>)> {
        if run.len() != gold.len() {
            return Err(Error::invalid(format!(
                "{} predicted trees for {} references",
                run.len(),
                gold.len()
            )));
        }
        match punct {
            None => Ok((run.to_vec(), gold.to_vec())),
            Some(p) => run
                .iter()
                .zip(gold)
                .map(|(t, g)| strip_pair(t, g, p))
                .unzip_result(),
        }
    };
    let mut prepared = Vec::with_capacity(runs.len());
    let mut reports = Vec::with_capacity(runs.len());
    let mut pooled: BTreeMap<String, LabelAccuracy> = BTreeMap::new();
    let mut rb = 0.0;
    for run in runs {
        let (pred, g) = prepare(run)?;
        reports.push(corpus_mean_f(&pred, &g, flags)?);
        rb += rb_agreement(&pred, flags)?.mean_f;
        for (label, acc) in per_label_accuracy(&pred, &g, labels)? {
            let e = pooled.entry(label).or_insert(LabelAccuracy {
                count: 0,
                correct: 0,
            });
            e.count += acc.count;
            e.correct += acc.correct;
        }
        prepared.push(pred);
    }
    let run_f: Vec<f64> = reports.iter().map(|r| r.mean_f).collect();
    let bootstrap_p = match against {
        None => None,
        Some(b) => {
            let (pred, g) = prepare(b)?;
            let other = corpus_mean_f(&pred, &g, flags)?;
            Some(paired_bootstrap(
                &reports[0].per_sentence,
                &other.per_sentence,
                config.bootstrap_iterations,
                config.seed,
            )?)
        }
    };
    Ok(RunEvaluation {
        mean_f: run_f.iter().sum::<f64>() / run_f.len() as f64,
        run_f,
        self_agreement: (prepared.len() >= 2)
            .then(|| self_agreement(&prepared, flags))
            .transpose()?,
        rb_agreement: rb / runs.len() as f64,
        labels: pooled,
        bootstrap_p,
    })
}

trait UnzipResult<A, B> {
    fn unzip_result(self) -> Result<(Vec<A>, Vec<B>)>;
}

impl<A, B, I: Iterator<Item = Result<(A, B)>>> UnzipResult<A, B> for I {
    fn unzip_result(self) -> Result<(Vec<A>, Vec<B>)> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for item in self {
            let (x, y) = item?;
            a.push(x);
            b.push(y);
        }
        Ok((a, b))
    }
}
