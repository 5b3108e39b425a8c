//! Python bindings: trees, distance conversions, metrics, synthetic data and
//! the two trainable models.

use std::path::{Path, PathBuf};

use imitparse::autodiff::Real;
use imitparse::config::RunConfig;
use imitparse::corpus::{NliLabel, NliPair, Vocab};
use imitparse::distance::{
    composition_order, infer_tree, tree_to_distances, DistanceVector, InferenceScheme,
};
use imitparse::eval::{
    corpus_mean_f, paired_bootstrap, rb_agreement, self_agreement, unlabeled_f, EvalFlags,
};
use imitparse::pipeline::{
    infer_with_prpn, pair_sentences, parse_sentences, refine_stage, train_prpn, train_sbs_stage,
};
use imitparse::prpn::Prpn as CorePrpn;
use imitparse::render::render_tree;
use imitparse::synth::{generate as generate_corpus, Grammar};
use imitparse::treelstm::TreeLstm;
use imitparse::trees::{baseline_tree, BinaryTree, Constituency, LabeledTree, Token};
use imitparse::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for imitparse::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn flags(include_root: bool) -> EvalFlags {
    EvalFlags {
        include_root,
        ..Default::default()
    }
}

/// `key=value` overrides on top of the defaults, keys as in config files.
fn run_config(overrides: Option<Vec<(String, String)>>) -> PyResult<RunConfig> {
    let mut config = RunConfig::default();
    for (k, v) in overrides.unwrap_or_default() {
        config.set(&k, &v).py()?;
    }
    config.validate().py()?;
    Ok(config)
}

fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

type PyPair = (Vec<String>, Vec<String>, String);
type PyCorpus = (Vec<Vec<String>>, Vec<String>, Vec<PyPair>);

fn nli_pairs(pairs: Vec<PyPair>) -> PyResult<Vec<NliPair>> {
    pairs
        .into_iter()
        .map(|(premise, hypothesis, label)| {
            Ok(NliPair {
                premise,
                hypothesis,
                label: label.parse::<NliLabel>().py()?,
            })
        })
        .collect()
}

/// An unlabeled binary constituency tree.
#[pyclass(name = "Tree", module = "imitparse_py", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct Tree(BinaryTree);

#[pymethods]
impl Tree {
    /// Reads a bracketed tree. Labeled and n-ary input is binarized.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Tree> {
        let labeled: LabeledTree = text.parse().py()?;
        Ok(Tree(labeled.to_binary().py()?))
    }

    /// Builds the tree a distance vector implies. `words` defaults to
    /// placeholders `w1..wN`; `scheme` is "a" (max split) or "b"
    /// (right-biased).
    #[staticmethod]
    #[pyo3(signature = (distances, words=None, scheme="a"))]
    fn from_distances(
        distances: Vec<f64>,
        words: Option<Vec<String>>,
        scheme: &str,
    ) -> PyResult<Tree> {
        let d = DistanceVector::new(distances).py()?;
        let tokens = match words {
            Some(w) => Token::sequence(&w),
            None => Token::placeholders(d.sentence_len()),
        };
        Ok(Tree(
            infer_tree(&d, &tokens, scheme.parse::<InferenceScheme>().py()?).py()?,
        ))
    }

    /// Left-branching ("lb"), right-branching ("rb") or balanced tree over
    /// `n` placeholder words.
    #[staticmethod]
    fn baseline(kind: &str, n: usize) -> PyResult<Tree> {
        Ok(Tree(baseline_tree(kind.parse().py()?, n).py()?))
    }

    #[getter]
    fn num_leaves(&self) -> usize {
        self.0.num_leaves()
    }

    fn words(&self) -> Vec<String> {
        self.0.words()
    }

    /// Constituent spans as 1-based inclusive `(start, end)` pairs, single
    /// words excluded.
    #[pyo3(signature = (include_root=false))]
    fn spans(&self, include_root: bool) -> Vec<(usize, usize)> {
        self.0
            .spans(include_root)
            .into_iter()
            .map(|s| (s.start, s.end))
            .collect()
    }

    /// Canonical distances: the height of the lowest node covering each
    /// adjacent word pair.
    fn distances(&self) -> Vec<f64> {
        tree_to_distances(&self.0).values().to_vec()
    }

    /// Merge positions that build this tree bottom-up, lowest distance
    /// first.
    fn composition_order(&self) -> PyResult<Vec<usize>> {
        let d = tree_to_distances(&self.0);
        Ok(composition_order(&self.0, &d).py()?.steps().to_vec())
    }

    fn render(&self) -> String {
        render_tree(&self.0.to_labeled())
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Tree.parse({:?})", self.0.to_string())
    }
}

/// Unlabeled bracketing F1 of `pred` against `gold`.
#[pyfunction]
#[pyo3(signature = (pred, gold, include_root=false))]
fn unlabeled_f1(pred: &Tree, gold: &Tree, include_root: bool) -> PyResult<f64> {
    Ok(unlabeled_f(&pred.0, &gold.0, flags(include_root)).py()?.f)
}

/// Sentence-averaged F1 of `pred` against bracketed gold trees, which may
/// be labeled and n-ary.
#[pyfunction]
#[pyo3(signature = (pred, gold, include_root=false))]
fn mean_f1(pred: Vec<Tree>, gold: Vec<String>, include_root: bool) -> PyResult<f64> {
    let gold: Vec<LabeledTree> = gold
        .iter()
        .map(|g| g.parse())
        .collect::<Result<_, _>>()
        .py()?;
    let pred: Vec<BinaryTree> = pred.into_iter().map(|t| t.0).collect();
    Ok(corpus_mean_f(&pred, &gold, flags(include_root))
        .py()?
        .mean_f)
}

/// Mean pairwise F1 between runs over the same sentences.
#[pyfunction]
#[pyo3(signature = (runs, include_root=false))]
fn agreement(runs: Vec<Vec<Tree>>, include_root: bool) -> PyResult<f64> {
    let runs: Vec<Vec<BinaryTree>> = runs
        .into_iter()
        .map(|r| r.into_iter().map(|t| t.0).collect())
        .collect();
    self_agreement(&runs, flags(include_root)).py()
}

/// Mean F1 of a run against right-branching trees.
#[pyfunction]
#[pyo3(signature = (run, include_root=false))]
fn right_branching_agreement(run: Vec<Tree>, include_root: bool) -> PyResult<f64> {
    let run: Vec<BinaryTree> = run.into_iter().map(|t| t.0).collect();
    Ok(rb_agreement(&run, flags(include_root)).py()?.mean_f)
}

/// One-sided paired bootstrap p-value for "`a` scores higher than `b`".
#[pyfunction]
#[pyo3(signature = (a, b, iterations=10000, seed=1))]
fn bootstrap_p(a: Vec<f64>, b: Vec<f64>, iterations: usize, seed: u64) -> PyResult<f64> {
    paired_bootstrap(&a, &b, iterations, seed).py()
}

/// Samples `(sentences, gold_trees, pairs)` from the bundled grammar, or
/// from the grammar text given.
#[pyfunction]
#[pyo3(signature = (count, max_len=10, seed=1, grammar=None))]
fn generate(count: usize, max_len: usize, seed: u64, grammar: Option<&str>) -> PyResult<PyCorpus> {
    let grammar = match grammar {
        Some(text) => Grammar::parse(text).py()?,
        None => Grammar::bundled(),
    };
    let c = generate_corpus(&grammar, count, max_len, seed).py()?;
    let trees = c.trees.iter().map(|t| t.to_string()).collect();
    let pairs = c
        .pairs
        .into_iter()
        .map(|p| (p.premise, p.hypothesis, p.label.to_string()))
        .collect();
    Ok((c.sentences, trees, pairs))
}

/// The distance-predicting language model that acts as teacher.
#[pyclass(name = "Prpn", module = "imitparse_py", frozen)]
struct Prpn {
    model: CorePrpn,
    vocab: Vocab,
    steps: u64,
}

#[pymethods]
impl Prpn {
    /// Trains on tokenized sentences. `config` holds `(key, value)` string
    /// pairs with the same keys as run config files.
    #[staticmethod]
    #[pyo3(signature = (sentences, config=None))]
    fn train(
        py: Python<'_>,
        sentences: Vec<Vec<String>>,
        config: Option<Vec<(String, String)>>,
    ) -> PyResult<Prpn> {
        let config = run_config(config)?;
        let run = py.detach(|| train_prpn(&sentences, &config)).py()?;
        Ok(Prpn {
            model: run.model,
            vocab: run.vocab,
            steps: run.steps,
        })
    }

    /// Loads a checkpoint written by `train-prpn` or `save`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Prpn> {
        Ok(Prpn {
            model: CorePrpn::load(&path).py()?,
            vocab: Vocab::load(&vocab_path(&path)).py()?,
            steps: 0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path, self.steps, "").py()?;
        self.vocab.save(&vocab_path(&path)).py()
    }

    /// Distances between adjacent words; empty for a single word.
    fn distances(&self, words: Vec<String>) -> PyResult<Vec<f64>> {
        if words.len() < 2 {
            return Ok(Vec::new());
        }
        Ok(self
            .model
            .extract_distances(&self.vocab.encode(&words))
            .py()?
            .values()
            .to_vec())
    }

    #[pyo3(signature = (words, scheme="a"))]
    fn parse(&self, words: Vec<String>, scheme: &str) -> PyResult<Tree> {
        let scheme: InferenceScheme = scheme.parse().py()?;
        let parsed = infer_with_prpn(&self.model, &self.vocab, &[words], scheme).py()?;
        Ok(Tree(
            parsed
                .into_iter()
                .next()
                .expect("one sentence in, one out")
                .tree,
        ))
    }

    /// Mean token cross-entropy over the sentences that have two or more
    /// words.
    fn loss(&self, sentences: Vec<Vec<String>>) -> PyResult<Real> {
        let ids: Vec<Vec<usize>> = sentences.iter().map(|s| self.vocab.encode(s)).collect();
        self.model.mean_loss(&ids).py()
    }
}

/// The Tree-LSTM sentence-pair model whose merge decisions give parses.
#[pyclass(name = "Parser", module = "imitparse_py", frozen)]
struct Parser {
    model: TreeLstm,
    vocab: Vocab,
}

#[pymethods]
impl Parser {
    /// Step-by-step imitation of `teacher` on the sentences of `pairs`,
    /// each pair given as `(premise_words, hypothesis_words, label)`.
    #[staticmethod]
    #[pyo3(signature = (teacher, pairs, config=None))]
    fn imitate(
        py: Python<'_>,
        teacher: &Prpn,
        pairs: Vec<PyPair>,
        config: Option<Vec<(String, String)>>,
    ) -> PyResult<Parser> {
        let config = run_config(config)?;
        let pairs = nli_pairs(pairs)?;
        let (vocab, model, _) = py
            .detach(|| {
                let parses = infer_with_prpn(
                    &teacher.model,
                    &teacher.vocab,
                    &pair_sentences(&pairs),
                    config.scheme,
                )?;
                train_sbs_stage(&parses, &pairs, &config)
            })
            .py()?;
        Ok(Parser { model, vocab })
    }

    /// A copy refined with straight-through Gumbel sampling on the pair
    /// task alone.
    #[pyo3(signature = (pairs, seed=1, config=None))]
    fn refine(
        &self,
        py: Python<'_>,
        pairs: Vec<PyPair>,
        seed: u64,
        config: Option<Vec<(String, String)>>,
    ) -> PyResult<Parser> {
        let config = run_config(config)?;
        let pairs = nli_pairs(pairs)?;
        let (model, _) = py
            .detach(|| refine_stage(self.model.clone(), &self.vocab, &pairs, &config, seed, None))
            .py()?;
        Ok(Parser {
            model,
            vocab: self.vocab.clone(),
        })
    }

    /// Loads a checkpoint written by `train-sbs` or `refine`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Parser> {
        Ok(Parser {
            model: TreeLstm::load(&path).py()?.0,
            vocab: Vocab::load(&vocab_path(&path)).py()?,
        })
    }

    fn parse(&self, words: Vec<String>) -> PyResult<Tree> {
        let trees = parse_sentences(&self.model, &self.vocab, &[words]).py()?;
        Ok(Tree(
            trees.into_iter().next().expect("one sentence in, one out"),
        ))
    }
}

#[pymodule]
pub fn imitparse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tree>()?;
    m.add_class::<Prpn>()?;
    m.add_class::<Parser>()?;
    m.add_function(wrap_pyfunction!(unlabeled_f1, m)?)?;
    m.add_function(wrap_pyfunction!(mean_f1, m)?)?;
    m.add_function(wrap_pyfunction!(agreement, m)?)?;
    m.add_function(wrap_pyfunction!(right_branching_agreement, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_p, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
