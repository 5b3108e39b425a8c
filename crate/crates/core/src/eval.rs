//! Unlabeled bracket scoring and the run-level statistics built on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trees::{baseline_tree, BaselineKind, BinaryTree, Constituency, LabeledTree, Span};

/// Iteration count used by the CLI unless overridden.
pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 10_000;
pub const MIN_BOOTSTRAP_ITERATIONS: usize = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalFlags {
    /// Count the full-sentence span.
    pub include_root: bool,
    /// Pool bracket counts over the corpus instead of averaging sentence F.
    pub micro: bool,
}

impl Default for EvalFlags {
    fn default() -> Self {
        EvalFlags {
            include_root: true,
            micro: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Scores two span sets. Both empty counts as a perfect match; exactly one
/// empty as no match.
pub fn span_prf(pred: &BTreeSet<Span>, gold: &BTreeSet<Span>) -> Prf {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f: 1.0,
            }
        }
        (true, false) | (false, true) => {
            return Prf {
                precision: 0.0,
                recall: 0.0,
                f: 0.0,
            }
        }
        _ => {}
    }
    let hit = pred.intersection(gold).count() as f64;
    let precision = hit / pred.len() as f64;
    let recall = hit / gold.len() as f64;
    let f = if hit == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f,
    }
}

fn check_lengths(pred: &impl Constituency, gold: &impl Constituency) -> Result<()> {
    let (a, b) = (pred.num_leaves(), gold.num_leaves());
    if a != b {
        return Err(Error::invalid(format!(
            "prediction has {a} tokens, reference has {b}"
        )));
    }
    Ok(())
}

/// Unlabeled bracket precision, recall and F.
pub fn unlabeled_f(
    pred: &impl Constituency,
    gold: &impl Constituency,
    flags: EvalFlags,
) -> Result<Prf> {
    check_lengths(pred, gold)?;
    Ok(span_prf(
        &pred.spans(flags.include_root),
        &gold.spans(flags.include_root),
    ))
}

/// Corpus-level scores for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mean_f: f64,
    pub per_sentence: Vec<f64>,
}

/// Mean F of `run` against `gold`: the average of sentence F, or with
/// `flags.micro` the F of pooled bracket counts.
pub fn corpus_mean_f<P: Constituency, G: Constituency>(
    run: &[P],
    gold: &[G],
    flags: EvalFlags,
) -> Result<MetricReport> {
    if run.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predicted trees for {} references",
            run.len(),
            gold.len()
        )));
    }
    let mut per_sentence = Vec::with_capacity(run.len());
    let (mut hit, mut npred, mut ngold) = (0usize, 0usize, 0usize);
    for (k, (p, g)) in run.iter().zip(gold).enumerate() {
        check_lengths(p, g).map_err(|e| Error::invalid(format!("sentence {}: {e}", k + 1)))?;
        let (ps, gs) = (p.spans(flags.include_root), g.spans(flags.include_root));
        hit += ps.intersection(&gs).count();
        npred += ps.len();
        ngold += gs.len();
        per_sentence.push(span_prf(&ps, &gs).f);
    }
    let mean_f = if flags.micro {
        if npred == 0 && ngold == 0 {
            1.0
        } else if hit == 0 {
            0.0
        } else {
            let (p, r) = (hit as f64 / npred as f64, hit as f64 / ngold as f64);
            2.0 * p * r / (p + r)
        }
    } else if per_sentence.is_empty() {
        0.0
    } else {
        per_sentence.iter().sum::<f64>() / per_sentence.len() as f64
    };
    Ok(MetricReport {
        mean_f,
        per_sentence,
    })
}

/// Mean corpus F over every unordered pair of runs.
pub fn self_agreement<R: AsRef<[BinaryTree]>>(runs: &[R], flags: EvalFlags) -> Result<f64> {
    if runs.len() < 2 {
        return Err(Error::invalid("self-agreement needs at least two runs"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            total += corpus_mean_f(runs[i].as_ref(), runs[j].as_ref(), flags)?.mean_f;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Corpus F of `run` against right-branching trees of the same lengths.
pub fn rb_agreement(run: &[BinaryTree], flags: EvalFlags) -> Result<MetricReport> {
    let rb = run
        .iter()
        .map(|t| baseline_tree(BaselineKind::RightBranching, t.num_leaves()))
        .collect::<Result<Vec<_>>>()?;
    corpus_mean_f(run, &rb, flags)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelAccuracy {
    /// Reference constituents with this label spanning at least two tokens.
    pub count: usize,
    pub correct: usize,
}

impl LabelAccuracy {
    /// `None` when the label never occurs.
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

/// For each requested label, the share of reference constituents (length
/// at least two) whose exact span the prediction also contains. Labels
/// match exactly.
pub fn per_label_accuracy(
    run: &[BinaryTree],
    gold: &[LabeledTree],
    labels: &[String],
) -> Result<BTreeMap<String, LabelAccuracy>> {
    if run.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predicted trees for {} references",
            run.len(),
            gold.len()
        )));
    }
    let mut out: BTreeMap<String, LabelAccuracy> = labels
        .iter()
        .map(|l| {
            (
                l.clone(),
                LabelAccuracy {
                    count: 0,
                    correct: 0,
                },
            )
        })
        .collect();
    for (k, (p, g)) in run.iter().zip(gold).enumerate() {
        check_lengths(p, g).map_err(|e| Error::invalid(format!("sentence {}: {e}", k + 1)))?;
        let predicted = p.spans(true);
        g.for_each_constituent(|label, span| {
            if span.len() < 2 {
                return;
            }
            if let Some(acc) = out.get_mut(label) {
                acc.count += 1;
                acc.correct += usize::from(predicted.contains(&span));
            }
        });
    }
    Ok(out)
}

/// One-tailed paired bootstrap for "A scores higher than B": the share of
/// resamples whose mean difference is not positive.
pub fn paired_bootstrap(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "{} scores paired with {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one paired score"));
    }
    if iterations < MIN_BOOTSTRAP_ITERATIONS {
        return Err(Error::invalid(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_ITERATIONS} iterations, got {iterations}"
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..iterations {
        let total: f64 = (0..n).map(|_| diffs[rng.gen_range(0..n)]).sum();
        if total <= 0.0 {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / iterations as f64)
}

/// A table row of [`render_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub count: usize,
    pub value: Option<f64>,
}

/// A fixed-width `label count value` table followed by a `key=value` block.
pub fn render_report(rows: &[ReportRow], values: &[(String, String)]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>8}", "label", "count", "value");
    for r in rows {
        let value = r
            .value
            .map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>8}", r.label, r.count, value);
    }
    out.push('\n');
    for (k, v) in values {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}
