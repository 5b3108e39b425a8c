//! Transfers a language model's trees into the Tree-LSTM parser.
//!
//! Step-by-step (SbS) training replays each teacher tree in forced mode and
//! scores every round's distribution against the teacher's merge position.
//! Refinement then drops the parse loss and trains on the sentence-pair task
//! alone, sampling trees with straight-through Gumbel-Softmax.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, ParamStore, Real, Tape, Var};
use crate::corpus::NliLabel;
use crate::distance::{composition_order, CompositionSequence, DistanceVector};
use crate::error::{Error, Result};
use crate::eval::{corpus_mean_f, EvalFlags};
use crate::treelstm::{Noise, Selection, TreeLstm};
use crate::trees::{BinaryTree, LabeledTree};

/// Parse-loss weight used unless configured otherwise.
pub const DEFAULT_LAMBDA: Real = 0.03;
/// Initial refinement temperature.
pub const DEFAULT_REFINE_GAMMA: Real = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ImitationConfig {
    pub lambda: Real,
    pub sbs_lr: Real,
    pub sbs_epochs: usize,
    pub refine_lr: Real,
    pub refine_epochs: usize,
    pub batch_size: usize,
    /// Temperature set on the parser when refinement starts.
    pub gamma: Real,
    pub learn_gamma: bool,
    pub clip: Real,
    pub seed: u64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig {
            lambda: DEFAULT_LAMBDA,
            sbs_lr: 0.005,
            sbs_epochs: 10,
            refine_lr: 0.001,
            refine_epochs: 5,
            batch_size: 16,
            gamma: DEFAULT_REFINE_GAMMA,
            learn_gamma: false,
            clip: 5.0,
            seed: 1,
        }
    }
}

impl ImitationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.sbs_lr >= 0.0 && self.refine_lr >= 0.0 && self.clip > 0.0) {
            return Err(Error::invalid("learning rates must be >= 0 and clip > 0"));
        }
        Ok(())
    }
}

/// A sentence with its teacher merge order.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervised {
    pub ids: Vec<usize>,
    pub targets: CompositionSequence,
}

/// One SbS training item: the premise with teacher targets and, for the
/// task term, a hypothesis with its own targets and the pair label.
#[derive(Clone, Debug, PartialEq)]
pub struct SbsExample {
    pub premise: Supervised,
    pub task: Option<(Supervised, NliLabel)>,
}

/// A labeled sentence pair for refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: NliLabel,
}

/// Sentences with reference trees, scored after every refinement epoch.
pub struct DevSet<'a> {
    pub sentences: &'a [Vec<usize>],
    pub gold: &'a [LabeledTree],
    pub flags: EvalFlags,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SbsEpoch {
    pub task_loss: Real,
    pub parse_loss: Real,
    pub total: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineEpoch {
    pub task_loss: Real,
    pub accuracy: Real,
    pub dev_f: Option<f64>,
}

/// Teacher merge order for a tree, disambiguated by its distances.
pub fn make_sbs_targets(tree: &BinaryTree, d: &DistanceVector) -> Result<CompositionSequence> {
    composition_order(tree, d)
}

/// `-sum_j log p^(j)[target_j]` from per-round distributions.
pub fn parse_loss(probs: &[Vec<Real>], targets: &CompositionSequence) -> Result<Real> {
    let n = targets.sentence_len();
    if probs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} rounds of probabilities for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (j, (p, &t)) in probs.iter().zip(targets.steps()).enumerate() {
        let candidates = n - 1 - j;
        if p.len() != candidates {
            return Err(Error::invalid(format!(
                "round {} has {} candidates, expected {candidates}",
                j + 1,
                p.len()
            )));
        }
        if t == 0 || t > candidates {
            return Err(Error::invalid(format!(
                "target {t} outside 1..={candidates} in round {}",
                j + 1
            )));
        }
        total -= p[t - 1].max(1e-300).ln();
    }
    Ok(total)
}

/// The parse loss recorded on `tape` from per-round log-probabilities.
pub fn parse_loss_on_tape(tape: &Tape, log_probs: &[Var], targets: &[usize]) -> Result<Var> {
    if log_probs.len() != targets.len() {
        return Err(Error::invalid("one target per round required"));
    }
    let picked = log_probs
        .iter()
        .zip(targets)
        .map(|(&lp, &t)| {
            let len = tape.shape(lp)[0];
            if t == 0 || t > len {
                return Err(Error::invalid(format!("target {t} outside 1..={len}")));
            }
            tape.index(lp, t - 1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.neg(tape.add_all(&picked)?))
}

/// `J_task + lambda * J_parse`.
pub fn joint_loss(task: Real, parse: Real, lambda: Real) -> Real {
    task + lambda * parse
}

/// Task cross-entropy and forced-mode parse loss for one example, recorded
/// on `tape`. Returns `(task, parse)`; `task` is `None` without a pair.
fn sbs_terms(
    model: &TreeLstm,
    tape: &Tape,
    params: &ParamStore,
    ex: &SbsExample,
) -> Result<(Option<Var>, Var)> {
    let steps = ex.premise.targets.steps();
    let p = model.encode_with(tape, params, &ex.premise.ids, &mut Selection::Forced(steps))?;
    let mut parse = parse_loss_on_tape(tape, &p.log_probs, steps)?;
    let mut task = None;
    if let Some((hyp, label)) = &ex.task {
        let hs = hyp.targets.steps();
        let h = model.encode_with(tape, params, &hyp.ids, &mut Selection::Forced(hs))?;
        parse = tape.add(parse, parse_loss_on_tape(tape, &h.log_probs, hs)?)?;
        let logits = model.classify_with(tape, params, p.vector, h.vector)?;
        task = Some(tape.cross_entropy(logits, &[label.index()])?);
    }
    Ok((task, parse))
}

fn check_supervised(s: &Supervised) -> Result<()> {
    if s.targets.sentence_len() != s.ids.len() {
        return Err(Error::invalid(format!(
            "{} targets for a sentence of {} tokens",
            s.targets.len(),
            s.ids.len()
        )));
    }
    Ok(())
}

/// The objective `J` of one example, recorded on `tape`, for a parameter
/// store that may differ from `model.params` (as in gradient checks).
pub fn sbs_objective(
    model: &TreeLstm,
    tape: &Tape,
    params: &ParamStore,
    ex: &SbsExample,
    lambda: Real,
) -> Result<Var> {
    let (task, parse) = sbs_terms(model, tape, params, ex)?;
    let weighted = tape.scale(parse, lambda);
    match task {
        Some(t) => tape.add(t, weighted),
        None => Ok(weighted),
    }
}

/// Step-by-step supervised training of `model` on teacher merge orders.
pub fn train_sbs(
    examples: &[SbsExample],
    mut model: TreeLstm,
    config: &ImitationConfig,
) -> Result<(TreeLstm, Vec<SbsEpoch>)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid(
            "step-by-step training needs at least one example",
        ));
    }
    for ex in examples {
        check_supervised(&ex.premise)?;
        if let Some((h, _)) = &ex.task {
            check_supervised(h)?;
        }
    }
    let mut opt = Adam::new(config.sbs_lr, Some(config.clip));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5342_5300);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(config.sbs_epochs);
    for _ in 0..config.sbs_epochs {
        order.shuffle(&mut rng);
        let (mut task_sum, mut parse_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as Real;
            for &k in batch {
                let tape = Tape::new();
                let (task, parse) = sbs_terms(&model, &tape, &model.params, &examples[k])?;
                let mut j = tape.scale(parse, config.lambda);
                parse_sum += tape.item(parse);
                if let Some(t) = task {
                    task_sum += tape.item(t);
                    j = tape.add(t, j)?;
                }
                if !tape.item(j).is_finite() {
                    return Err(Error::NonFinite(format!(
                        "step-by-step loss {}",
                        tape.item(j)
                    )));
                }
                tape.backward(tape.scale(j, scale))?;
                tape.accumulate_param_grads(&mut model.params)?;
            }
            opt.step(&mut model.params)?;
            model.clamp_gamma();
        }
        let n = examples.len() as Real;
        let (task, parse) = (task_sum / n, parse_sum / n);
        log.push(SbsEpoch {
            task_loss: task,
            parse_loss: parse,
            total: joint_loss(task, parse, config.lambda),
        });
    }
    Ok((model, log))
}

/// Mean forced-mode parse loss of `model` over `examples` (premises only).
pub fn mean_parse_loss(model: &TreeLstm, examples: &[SbsExample]) -> Result<Real> {
    let mut total = 0.0;
    for ex in examples {
        let r = model.encode_sentence(
            &ex.premise.ids,
            &mut Selection::Forced(ex.premise.targets.steps()),
        )?;
        total += parse_loss(&r.probs, &ex.premise.targets)?;
    }
    Ok(total / examples.len().max(1) as Real)
}

/// Mean F of greedy parses against references.
pub fn dev_f(model: &TreeLstm, dev: &DevSet<'_>) -> Result<f64> {
    let preds = dev
        .sentences
        .iter()
        .map(|s| model.parse(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(corpus_mean_f(&preds, dev.gold, dev.flags)?.mean_f)
}

/// Policy refinement on the pair task alone with ST-Gumbel sampling.
pub fn refine(
    pairs: &[PairExample],
    mut model: TreeLstm,
    config: &ImitationConfig,
    dev: Option<&DevSet<'_>>,
) -> Result<(TreeLstm, Vec<RefineEpoch>)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid(
            "refinement needs at least one sentence pair",
        ));
    }
    if let Some(g) = model.params.get_mut("gamma") {
        g.data_mut()[0] = config.gamma;
    }
    model.config.gamma = config.gamma;
    model.config.learn_gamma = config.learn_gamma;
    let mut opt = Adam::new(config.refine_lr, Some(config.clip));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5245_4649);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(config.refine_epochs);
    for _ in 0..config.refine_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as Real;
            for &k in batch {
                let ex = &pairs[k];
                let tape = Tape::new();
                let u = model
                    .encode_with(
                        &tape,
                        &model.params,
                        &ex.premise,
                        &mut Selection::Sample(Noise::Rng(&mut rng)),
                    )?
                    .vector;
                let v = model
                    .encode_with(
                        &tape,
                        &model.params,
                        &ex.hypothesis,
                        &mut Selection::Sample(Noise::Rng(&mut rng)),
                    )?
                    .vector;
                let logits = model.classify_with(&tape, &model.params, u, v)?;
                let loss = tape.cross_entropy(logits, &[ex.label.index()])?;
                let l = tape.item(loss);
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("refinement loss {l}")));
                }
                loss_sum += l;
                let scores = tape.data(logits);
                let predicted = (0..3).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
                correct += usize::from(predicted == ex.label.index());
                tape.backward(tape.scale(loss, scale))?;
                tape.accumulate_param_grads(&mut model.params)?;
            }
            opt.step(&mut model.params)?;
            model.clamp_gamma();
        }
        let n = pairs.len() as Real;
        log.push(RefineEpoch {
            task_loss: loss_sum / n,
            accuracy: correct as Real / n,
            dev_f: dev.map(|d| dev_f(&model, d)).transpose()?,
        });
    }
    Ok((model, log))
}
