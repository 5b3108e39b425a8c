//! Pyramid Tree-LSTM parser with a query scorer over adjacent-pair
//! compositions, straight-through Gumbel-Softmax selection and a
//! sentence-pair classifier.
//!
//! Every round composes all `M - 1` adjacent pairs at once, scores them
//! against the query vector, selects one position and rebuilds the node row
//! as `sel * composed + left_mask * left + right_mask * right`, where the masks
//! come from the cumulative sum of the selection vector. With a one-hot
//! selection this copies every unselected node unchanged; with a relaxed
//! selection the same expression stays differentiable.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore, Real, Tape, Tensor, Var,
};
use crate::distance::CompositionSequence;
use crate::error::{Error, Result};
use crate::trees::{BinaryTree, Token};

/// Smallest temperature kept after an update of a learnable `gamma`.
pub const MIN_GAMMA: Real = 0.05;
/// Floor applied to probabilities before taking logs.
const LOG_FLOOR: Real = 1e-20;

#[derive(Clone, Debug, PartialEq)]
pub struct TreeLstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the classifier's hidden layer.
    pub classifier_dim: usize,
    /// Initial Gumbel-Softmax temperature.
    pub gamma: Real,
    pub learn_gamma: bool,
    pub seed: u64,
}

impl Default for TreeLstmConfig {
    fn default() -> Self {
        TreeLstmConfig {
            vocab_size: 2,
            embed_dim: 32,
            hidden_dim: 32,
            classifier_dim: 32,
            gamma: 0.5,
            learn_gamma: false,
            seed: 1,
        }
    }
}

impl TreeLstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.classifier_dim == 0
        {
            return Err(Error::invalid("tree-lstm config: sizes must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("tree-lstm config: gamma must be positive"));
        }
        Ok(())
    }
}

/// `(h, c)` of one tree node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub h: Vec<Real>,
    pub c: Vec<Real>,
}

/// Where Gumbel noise comes from.
pub enum Noise<'a> {
    Rng(&'a mut ChaCha8Rng),
    /// One vector per step, each as long as that step's candidate list.
    Fixed(&'a [Vec<Real>]),
}

impl Noise<'_> {
    fn draw(&mut self, step: usize, len: usize) -> Result<Vec<Real>> {
        match self {
            Noise::Rng(rng) => Ok(gumbel_noise(rng, len)),
            Noise::Fixed(all) => match all.get(step) {
                Some(v) if v.len() == len => Ok(v.clone()),
                _ => Err(Error::invalid(format!(
                    "no fixed noise of length {len} for step {}",
                    step + 1
                ))),
            },
        }
    }
}

/// How each round picks the pair to compose.
pub enum Selection<'a> {
    /// Most probable position, leftmost on ties.
    Argmax,
    /// Follow a given 1-based composition sequence.
    Forced(&'a [usize]),
    /// Straight-through Gumbel-Softmax: the forward pass uses the sampled
    /// one-hot action, the backward pass the relaxed distribution.
    Sample(Noise<'a>),
    /// Relaxed Gumbel-Softmax in both passes.
    Relaxed(Noise<'a>),
}

/// Recorded result of encoding one sentence.
pub struct Encoding {
    /// Root hidden state.
    pub vector: Var,
    /// Tree built over `w1 .. wN`.
    pub tree: BinaryTree,
    /// `log p^(j)` for every round.
    pub log_probs: Vec<Var>,
    /// `p^(j)` values for every round.
    pub probs: Vec<Vec<Real>>,
    /// Chosen 1-based positions.
    pub positions: Vec<usize>,
}

/// Value-only view of an [`Encoding`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeResult {
    pub vector: Vec<Real>,
    pub tree: BinaryTree,
    pub probs: Vec<Vec<Real>>,
    pub positions: Vec<usize>,
}

/// `n` draws of `-ln(-ln u)`, `u ~ Uniform(0, 1)`.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -(-(u.ln())).ln() as Real
        })
        .collect()
}

fn argmax(v: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-max action and its relaxation for given noise.
pub fn st_gumbel_sample_with_noise(
    p: &[Real],
    gamma: Real,
    noise: &[Real],
) -> Result<(Vec<Real>, Vec<Real>)> {
    if p.is_empty() || noise.len() != p.len() {
        return Err(Error::Shape {
            op: "st_gumbel_sample",
            shapes: format!("[{}] vs [{}]", p.len(), noise.len()),
        });
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    let perturbed: Vec<Real> = p
        .iter()
        .zip(noise)
        .map(|(pi, g)| pi.max(LOG_FLOOR).ln() + g)
        .collect();
    let mut a = vec![0.0; p.len()];
    a[argmax(&perturbed)] = 1.0;
    let max = perturbed
        .iter()
        .copied()
        .fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<Real> = perturbed
        .iter()
        .map(|v| ((v - max) / gamma).exp())
        .collect();
    let z: Real = e.iter().sum();
    Ok((a, e.into_iter().map(|v| v / z).collect()))
}

/// Samples a one-hot action from `p` by the Gumbel-max trick and returns it
/// with the temperature-`gamma` relaxation of the same draw.
pub fn st_gumbel_sample(
    p: &[Real],
    gamma: Real,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Real>, Vec<Real>)> {
    let g = gumbel_noise(rng, p.len());
    st_gumbel_sample_with_noise(p, gamma, &g)
}

/// `softmax_i(q . h_i)` over candidate states.
pub fn score_candidates(candidates: &[Vec<Real>], q: &[Real]) -> Result<Vec<Real>> {
    if candidates.is_empty() {
        return Err(Error::invalid("scoring needs at least two nodes"));
    }
    let scores: Vec<Real> = candidates
        .iter()
        .map(|h| h.iter().zip(q).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<Real> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: Real = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

/// A pyramid Tree-LSTM encoder with its pair classifier.
#[derive(Clone, Debug)]
pub struct TreeLstm {
    pub config: TreeLstmConfig,
    pub params: ParamStore,
}

impl TreeLstm {
    pub fn new(config: TreeLstmConfig) -> Result<Self> {
        config.validate()?;
        let (v, e, h, k) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.classifier_dim,
        );
        let mut p = ParamStore::new(config.seed);
        p.add_embedding("embed", v, e)?;
        p.add_matrix("leaf.w", e, 2 * h)?;
        p.add_bias("leaf.b", 2 * h)?;
        p.add_matrix("comp.w", 2 * h, 5 * h)?;
        p.add_bias("comp.b", 5 * h)?;
        p.add_vector("query", h)?;
        p.add_matrix("clf.w1", 4 * h, k)?;
        p.add_bias("clf.b1", k)?;
        p.add_matrix("clf.w2", k, 3)?;
        p.add_bias("clf.b2", 3)?;
        p.add_scalar("gamma", config.gamma)?;
        Ok(TreeLstm { config, params: p })
    }

    pub fn gamma(&self) -> Real {
        self.params
            .get("gamma")
            .map(|g| g.item())
            .unwrap_or(self.config.gamma)
    }

    /// Keeps a learned temperature away from zero.
    pub fn clamp_gamma(&mut self) {
        if let Some(g) = self.params.get_mut("gamma") {
            let v = &mut g.data_mut()[0];
            *v = v.max(MIN_GAMMA);
        }
    }

    /// Composes two nodes with the current parameters, by direct arithmetic.
    pub fn compose(&self, left: &NodeState, right: &NodeState) -> Result<NodeState> {
        treelstm_compose(left, right, &self.params)
    }

    /// Leaf states `(h, c)` for `ids`, recorded on `tape`.
    fn leaves(&self, tape: &Tape, params: &ParamStore, ids: &[usize]) -> Result<(Var, Var)> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let h = self.config.hidden_dim;
        let e = tape.embedding(tape.param(params, "embed")?, ids)?;
        let hc = tape.linear(
            e,
            tape.param(params, "leaf.w")?,
            tape.param(params, "leaf.b")?,
        )?;
        Ok((tape.slice(hc, 1, 0, h)?, tape.slice(hc, 1, h, h)?))
    }

    /// Records the encoding of one sentence on `tape`.
    pub fn encode_with(
        &self,
        tape: &Tape,
        params: &ParamStore,
        ids: &[usize],
        selection: &mut Selection<'_>,
    ) -> Result<Encoding> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::invalid("cannot encode an empty sentence"));
        }
        if let Selection::Forced(steps) = selection {
            CompositionSequence::new(steps.to_vec(), n)?;
        }
        let hd = self.config.hidden_dim;
        let (mut hs, mut cs) = self.leaves(tape, params, ids)?;
        let mut nodes: Vec<BinaryTree> = Token::placeholders(n)
            .into_iter()
            .map(BinaryTree::Leaf)
            .collect();
        let mut out = Encoding {
            vector: hs,
            tree: nodes[0].clone(),
            log_probs: Vec::with_capacity(n.saturating_sub(1)),
            probs: Vec::with_capacity(n.saturating_sub(1)),
            positions: Vec::with_capacity(n.saturating_sub(1)),
        };
        if n > 1 {
            let comp_w = tape.param(params, "comp.w")?;
            let comp_b = tape.param(params, "comp.b")?;
            let query = tape.param(params, "query")?;
            let gamma = if self.config.learn_gamma {
                tape.param(params, "gamma")?
            } else {
                tape.scalar(self.gamma())
            };
            for step in 0..n - 1 {
                let m = n - step;
                let (hl, hr) = (tape.slice(hs, 0, 0, m - 1)?, tape.slice(hs, 0, 1, m - 1)?);
                let (cl, cr) = (tape.slice(cs, 0, 0, m - 1)?, tape.slice(cs, 0, 1, m - 1)?);
                let z = tape.linear(tape.concat(&[hl, hr], 1)?, comp_w, comp_b)?;
                let gate = |k: usize| tape.slice(z, 1, k * hd, hd);
                let i = tape.sigmoid(gate(0)?);
                let fl = tape.sigmoid(gate(1)?);
                let fr = tape.sigmoid(gate(2)?);
                let o = tape.sigmoid(gate(3)?);
                let u = tape.tanh(gate(4)?);
                let c_new = tape.add(
                    tape.add(tape.mul(fl, cl)?, tape.mul(fr, cr)?)?,
                    tape.mul(i, u)?,
                )?;
                let h_new = tape.mul(o, tape.tanh(c_new))?;

                let logp = tape.log_softmax(tape.matmul(h_new, query)?)?;
                let p: Vec<Real> = tape.data(logp).iter().map(|v| v.exp()).collect();

                let straight = matches!(selection, Selection::Sample(_));
                let (sel, pos) = match selection {
                    Selection::Argmax => {
                        let k = argmax(&p);
                        (tape.constant(Tensor::one_hot(m - 1, k)), k)
                    }
                    Selection::Forced(steps) => {
                        let k = steps[step] - 1;
                        (tape.constant(Tensor::one_hot(m - 1, k)), k)
                    }
                    Selection::Sample(noise) | Selection::Relaxed(noise) => {
                        let g = noise.draw(step, m - 1)?;
                        let perturbed = tape.add(logp, tape.vector(g))?;
                        let relaxed = tape.softmax(tape.div(perturbed, gamma)?, 0)?;
                        let k = argmax(&tape.data(perturbed));
                        let sel = if straight {
                            tape.straight_through(Tensor::one_hot(m - 1, k), relaxed)?
                        } else {
                            relaxed
                        };
                        (sel, k)
                    }
                };

                let csum = tape.cumsum(sel)?;
                let left = tape.shift(tape.neg(csum), 1.0);
                let right = tape.sub(csum, sel)?;
                let col = |v: Var| tape.reshape(v, &[m - 1, 1]);
                let (sel_c, left_c, right_c) = (col(sel)?, col(left)?, col(right)?);
                let mix = |new: Var, l: Var, r: Var| -> Result<Var> {
                    let a = tape.mul(sel_c, new)?;
                    let b = tape.mul(left_c, l)?;
                    let c = tape.mul(right_c, r)?;
                    tape.add(tape.add(a, b)?, c)
                };
                hs = mix(h_new, hl, hr)?;
                cs = mix(c_new, cl, cr)?;

                let right_node = nodes.remove(pos + 1);
                let left_node = std::mem::replace(&mut nodes[pos], BinaryTree::leaf("", 0));
                nodes[pos] = BinaryTree::node(left_node, right_node);
                out.log_probs.push(logp);
                out.probs.push(p);
                out.positions.push(pos + 1);
            }
            out.tree = nodes.pop().expect("one node remains");
        }
        out.vector = tape.row(hs, 0)?;
        Ok(out)
    }

    /// Encodes one sentence with the stored parameters.
    pub fn encode_sentence(
        &self,
        ids: &[usize],
        selection: &mut Selection<'_>,
    ) -> Result<EncodeResult> {
        let tape = Tape::new();
        let e = self.encode_with(&tape, &self.params, ids, selection)?;
        Ok(EncodeResult {
            vector: tape.data(e.vector),
            tree: e.tree,
            probs: e.probs,
            positions: e.positions,
        })
    }

    /// Greedy parse over `w1 .. wN`.
    pub fn parse(&self, ids: &[usize]) -> Result<BinaryTree> {
        Ok(self.encode_sentence(ids, &mut Selection::Argmax)?.tree)
    }

    /// Class logits for a pair of sentence vectors, recorded on `tape`.
    pub fn classify_with(&self, tape: &Tape, params: &ParamStore, u: Var, v: Var) -> Result<Var> {
        let diff = tape.abs(tape.sub(u, v)?);
        let prod = tape.mul(u, v)?;
        let features = tape.concat(&[u, v, diff, prod], 0)?;
        let hidden = tape.tanh(tape.linear(
            features,
            tape.param(params, "clf.w1")?,
            tape.param(params, "clf.b1")?,
        )?);
        tape.linear(
            hidden,
            tape.param(params, "clf.w2")?,
            tape.param(params, "clf.b2")?,
        )
    }

    /// Label distribution (entailment, neutral, contradiction) for two
    /// sentence vectors.
    pub fn classify_pair(&self, u: &[Real], v: &[Real]) -> Result<Vec<Real>> {
        if u.len() != v.len() || u.len() != self.config.hidden_dim {
            return Err(Error::Shape {
                op: "classify_pair",
                shapes: format!("[{}] vs [{}]", u.len(), v.len()),
            });
        }
        let tape = Tape::new();
        let logits = self.classify_with(
            &tape,
            &self.params,
            tape.vector(u.to_vec()),
            tape.vector(v.to_vec()),
        )?;
        let probs = tape.softmax(logits, 0)?;
        Ok(tape.data(probs))
    }

    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<()> {
        let c = &self.config;
        let meta = meta
            .with("model", "treelstm")
            .with("vocab_size", c.vocab_size)
            .with("embed_dim", c.embed_dim)
            .with("hidden_dim", c.hidden_dim)
            .with("classifier_dim", c.classifier_dim)
            .with("gamma_init", c.gamma)
            .with("learn_gamma", c.learn_gamma);
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (params, meta) = load_checkpoint(path)?;
        if meta.get("model") != Some("treelstm") {
            return Err(Error::invalid(format!(
                "{} holds model {:?}, expected treelstm",
                path.display(),
                meta.get("model").unwrap_or("?")
            )));
        }
        fn field<T: std::str::FromStr>(meta: &CheckpointMeta, key: &str) -> Result<T> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks a valid {key}")))
        }
        let config = TreeLstmConfig {
            vocab_size: field(&meta, "vocab_size")?,
            embed_dim: field(&meta, "embed_dim")?,
            hidden_dim: field(&meta, "hidden_dim")?,
            classifier_dim: field(&meta, "classifier_dim")?,
            gamma: field(&meta, "gamma_init")?,
            learn_gamma: field(&meta, "learn_gamma")?,
            seed: params.seed(),
        };
        let fresh = TreeLstm::new(config.clone())?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "checkpoint parameter {name} missing or misshapen"
                    )))
                }
            }
        }
        Ok((TreeLstm { config, params }, meta))
    }
}

/// Binary Tree-LSTM cell with separate left and right forget gates, written
/// out element by element.
pub fn treelstm_compose(
    left: &NodeState,
    right: &NodeState,
    params: &ParamStore,
) -> Result<NodeState> {
    let w = params
        .get("comp.w")
        .ok_or_else(|| Error::invalid("missing comp.w"))?;
    let b = params
        .get("comp.b")
        .ok_or_else(|| Error::invalid("missing comp.b"))?;
    let h = left.h.len();
    if right.h.len() != h || left.c.len() != h || right.c.len() != h || w.shape() != [2 * h, 5 * h]
    {
        return Err(Error::Shape {
            op: "treelstm_compose",
            shapes: format!("[{h}] vs [{}], W {:?}", right.h.len(), w.shape()),
        });
    }
    let x: Vec<Real> = left.h.iter().chain(&right.h).copied().collect();
    let pre = |col: usize| -> Real {
        b.data()[col]
            + x.iter()
                .enumerate()
                .map(|(r, xv)| xv * w.data()[r * 5 * h + col])
                .sum::<Real>()
    };
    let mut out = NodeState {
        h: vec![0.0; h],
        c: vec![0.0; h],
    };
    for k in 0..h {
        let i = sigmoid(pre(k));
        let fl = sigmoid(pre(h + k));
        let fr = sigmoid(pre(2 * h + k));
        let o = sigmoid(pre(3 * h + k));
        let u = pre(4 * h + k).tanh();
        out.c[k] = fl * left.c[k] + fr * right.c[k] + i * u;
        out.h[k] = o * out.c[k].tanh();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy() -> TreeLstm {
        TreeLstm::new(TreeLstmConfig {
            vocab_size: 20,
            embed_dim: 6,
            hidden_dim: 5,
            classifier_dim: 4,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn compose_with_zero_parameters() {
        let mut m = toy();
        for name in ["comp.w", "comp.b"] {
            m.params
                .get_mut(name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let l = NodeState {
            h: vec![0.3; 5],
            c: vec![1.0; 5],
        };
        let r = NodeState {
            h: vec![-0.2; 5],
            c: vec![-0.4; 5],
        };
        let out = m.compose(&l, &r).unwrap();
        // All gates 0.5, candidate tanh(0) = 0.
        let c = 0.5 * 1.0 + 0.5 * -0.4;
        assert!(out.c.iter().all(|&v| (v - c).abs() < 1e-15));
        assert!(out.h.iter().all(|&v| (v - 0.5 * c.tanh()).abs() < 1e-15));
    }

    #[test]
    fn scoring() {
        let p = score_candidates(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = score_candidates(&[vec![(2.0 as Real).ln()], vec![0.0]], &[1.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(score_candidates(&[vec![0.7]], &[2.0]).unwrap(), vec![1.0]);
        assert!(score_candidates(&[], &[1.0]).is_err());
    }

    #[test]
    fn gumbel_degenerate_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (a, _) = st_gumbel_sample(&[1.0, 0.0], 0.5, &mut rng).unwrap();
            assert_eq!(a, vec![1.0, 0.0]);
        }
        let p = [0.2, 0.3, 0.5];
        let (_, soft) = st_gumbel_sample_with_noise(&p, 1.0, &[0.0; 3]).unwrap();
        assert!(soft.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn forced_replay_builds_expected_tree() {
        let m = toy();
        let r = m
            .encode_sentence(&[2, 3, 4, 5], &mut Selection::Forced(&[2, 2, 1]))
            .unwrap();
        assert_eq!(r.tree.to_string(), "(X w1 (X (X w2 w3) w4))");
        assert_eq!(r.positions, vec![2, 2, 1]);
        for (j, p) in r.probs.iter().enumerate() {
            assert_eq!(p.len(), 3 - j);
            assert!((p.iter().sum::<Real>() - 1.0).abs() < 1e-12);
        }
        assert!(m
            .encode_sentence(&[2, 3, 4, 5], &mut Selection::Forced(&[3, 3, 1]))
            .is_err());
        assert!(m
            .encode_sentence(&[2, 3, 4, 5], &mut Selection::Forced(&[1, 1]))
            .is_err());
    }

    #[test]
    fn single_token_sentence() {
        let m = toy();
        let r = m.encode_sentence(&[7], &mut Selection::Argmax).unwrap();
        assert!(r.tree.is_leaf() && r.probs.is_empty());
        let leaf = m.params.get("leaf.w").unwrap();
        let e = m.params.get("embed").unwrap().row(7);
        let h0: Real = (0..6).map(|k| e[k] * leaf.data()[k * 10]).sum();
        assert!((r.vector[0] - h0).abs() < 1e-12);
    }

    #[test]
    fn batched_rounds_match_direct_cell() {
        // Forcing the first merge at position 1 must produce compose(leaf1, leaf2)
        // as the first node of the next round; with two tokens it is the root.
        let m = toy();
        let ids = [4, 11];
        let r = m
            .encode_sentence(&ids, &mut Selection::Forced(&[1]))
            .unwrap();
        let leaf = |id: usize| {
            let e = m.params.get("embed").unwrap().row(id);
            let w = m.params.get("leaf.w").unwrap();
            let hd = 5;
            let v: Vec<Real> = (0..2 * hd)
                .map(|c| (0..6).map(|k| e[k] * w.data()[k * 2 * hd + c]).sum())
                .collect();
            NodeState {
                h: v[..hd].to_vec(),
                c: v[hd..].to_vec(),
            }
        };
        let root = m.compose(&leaf(4), &leaf(11)).unwrap();
        assert!(root
            .h
            .iter()
            .zip(&r.vector)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn argmax_is_deterministic_and_matches_forced() {
        let m = toy();
        let ids = [3, 9, 4, 12, 5, 6];
        let a = m.encode_sentence(&ids, &mut Selection::Argmax).unwrap();
        let b = m.encode_sentence(&ids, &mut Selection::Argmax).unwrap();
        assert_eq!(a, b);
        let f = m
            .encode_sentence(&ids, &mut Selection::Forced(&a.positions))
            .unwrap();
        assert_eq!(a, f);
    }

    #[test]
    fn classifier_outputs_distribution() {
        let m = toy();
        let u = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let p = m.classify_pair(&u, &u).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<Real>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn straight_through_gradient_ignores_tie_break() {
        // Two different hard actions over the same relaxed sample give the
        // same gradient.
        let grads: Vec<Vec<Real>> = [0usize, 1]
            .iter()
            .map(|&hard| {
                let t = Tape::new();
                let x = t.input(Tensor::vector(vec![0.4, 0.4, 0.2]).with_grad(true));
                let soft = t.softmax(t.scale(x, 2.0), 0).unwrap();
                let st = t.straight_through(Tensor::one_hot(3, hard), soft).unwrap();
                let w = t.vector(vec![1.0, -2.0, 0.5]);
                t.backward(t.dot(st, w).unwrap()).unwrap();
                t.grad(x).unwrap()
            })
            .collect();
        assert_eq!(grads[0], grads[1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let m = toy();
        m.save(&p, CheckpointMeta::default()).unwrap();
        let (back, _) = TreeLstm::load(&p).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(
            back.parse(&[2, 3, 4]).unwrap(),
            m.parse(&[2, 3, 4]).unwrap()
        );
    }
}
