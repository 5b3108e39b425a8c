//! The parsing-reading-predict network: a language model whose inner-sentence
//! attention is gated by per-boundary syntactic distances.
//!
//! Positions are 1-based in the docs below. For a sentence `w_1..w_N` the
//! distance MLP yields `d_2..d_N` (`d_t` sits between `w_{t-1}` and `w_t`);
//! slices of distances store `d_t` at index `t - 2`.
//!
//! The reader is one LSTM cell over `[w_t; context_t; h_{t-1}]`. At step `t`
//! it predicts `w_{t+1}`, and at the last step the boundary id, so every
//! distance including `d_N` takes part in the loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore, Real, Sgd, Tape, Tensor, Var,
};
use crate::corpus::BOUNDARY_ID;
use crate::distance::DistanceVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PrpnConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Tokens of left context fed to the distance MLP.
    pub window: usize,
    /// Gate sharpness.
    pub tau: Real,
    pub lr: Real,
    pub clip: Real,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PrpnConfig {
    fn default() -> Self {
        PrpnConfig {
            vocab_size: 2,
            embed_dim: 32,
            hidden_dim: 32,
            window: 3,
            tau: 10.0,
            lr: 2.0,
            clip: 5.0,
            epochs: 60,
            batch_size: 8,
            seed: 1,
        }
    }
}

impl PrpnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("prpn config: {m}")));
        if self.vocab_size < 2 {
            return bad("vocabulary needs at least the UNK and boundary ids");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be at least 1");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lr >= 0.0) || !(self.clip > 0.0) {
            return bad("learning rate must be >= 0 and clip > 0");
        }
        Ok(())
    }

    fn to_meta(&self, meta: CheckpointMeta) -> CheckpointMeta {
        meta.with("model", "prpn")
            .with("vocab_size", self.vocab_size)
            .with("embed_dim", self.embed_dim)
            .with("hidden_dim", self.hidden_dim)
            .with("window", self.window)
            .with("tau", self.tau)
            .with("lr", self.lr)
            .with("clip", self.clip)
            .with("epochs", self.epochs)
            .with("batch_size", self.batch_size)
    }

    fn from_meta(meta: &CheckpointMeta) -> Result<Self> {
        if meta.get("model") != Some("prpn") {
            return Err(Error::invalid(format!(
                "checkpoint holds model {:?}, expected prpn",
                meta.get("model").unwrap_or("?")
            )));
        }
        fn field<T: std::str::FromStr>(meta: &CheckpointMeta, key: &str) -> Result<T> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks a valid {key}")))
        }
        Ok(PrpnConfig {
            vocab_size: field(meta, "vocab_size")?,
            embed_dim: field(meta, "embed_dim")?,
            hidden_dim: field(meta, "hidden_dim")?,
            window: field(meta, "window")?,
            tau: field(meta, "tau")?,
            lr: field(meta, "lr")?,
            clip: field(meta, "clip")?,
            epochs: field(meta, "epochs")?,
            batch_size: field(meta, "batch_size")?,
            seed: meta.seed,
        })
    }
}

/// Intermediate quantities of one forward pass, 1-based positions stored
/// 0-based.
#[derive(Clone, Debug, Default)]
pub struct PrpnState {
    /// Reader outputs `h_1..h_N`.
    pub hidden: Vec<Vec<Real>>,
    /// `d_2..d_N`.
    pub distances: Vec<Real>,
    /// `gates[t-1]` holds `g_1^t..g_{t-1}^t`; empty for `t = 1`.
    pub gates: Vec<Vec<Real>>,
    /// `attention[t-1]` holds `s_1^t..s_{t-1}^t`; empty for `t = 1`.
    pub attention: Vec<Vec<Real>>,
}

#[derive(Clone, Debug)]
pub struct LmOutput {
    /// Row `t-1` is the predicted distribution of the token after `w_t`.
    pub distributions: Vec<Vec<Real>>,
    pub loss: Real,
    pub state: PrpnState,
}

/// `alpha_j^t` and `g_i^t` for one step, from distances `d_2..d_t`.
///
/// Returns `g_1^t..g_{t-1}^t`.
pub fn attention_gates(distances: &[Real], tau: Real, t: usize) -> Vec<Real> {
    assert!(t >= 2 && distances.len() >= t - 1, "gates need d_2..d_t");
    let dt = distances[t - 2];
    let mut g = vec![1.0; t - 1];
    // g_i = alpha_{i+1} * g_{i+1}, right to left.
    for i in (1..t - 1).rev() {
        let j = i + 1;
        let alpha = ((tau * (dt - distances[j - 2])).clamp(-1.0, 1.0) + 1.0) / 2.0;
        g[i - 1] = alpha * g[i];
    }
    g
}

/// Gated attention over earlier reader states.
///
/// `history` holds `h_1..h_{t-1}`, `w` is `W` with shape
/// `[hidden + embed, hidden]`. Returns the context vector and the weights
/// `s_1^t..s_{t-1}^t`.
pub fn structured_attention(
    history: &[Vec<Real>],
    h_prev: &[Real],
    w_t: &[Real],
    w: &Tensor,
    gates: &[Real],
) -> Result<(Vec<Real>, Vec<Real>)> {
    let k = history.len();
    let hdim = h_prev.len();
    if k == 0 || gates.len() != k || w.shape() != [hdim + w_t.len(), hdim] {
        return Err(Error::Shape {
            op: "structured_attention",
            shapes: format!("{k} states, {} gates, W {:?}", gates.len(), w.shape()),
        });
    }
    let input: Vec<Real> = h_prev.iter().chain(w_t).copied().collect();
    let mut query = vec![0.0; hdim];
    for (r, x) in input.iter().enumerate() {
        for (c, q) in query.iter_mut().enumerate() {
            *q += x * w.data()[r * hdim + c];
        }
    }
    let scores: Vec<Real> = history
        .iter()
        .map(|h| h.iter().zip(&query).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let exp: Vec<Real> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: Real = exp.iter().sum();
    let weighted: Vec<Real> = exp.iter().zip(gates).map(|(e, g)| e / z * g).collect();
    let total: Real = weighted.iter().sum();
    let s: Vec<Real> = if total > 0.0 {
        weighted.iter().map(|v| v / total).collect()
    } else {
        let mut s = vec![0.0; k];
        s[k - 1] = 1.0;
        s
    };
    let mut ctx = vec![0.0; hdim];
    for (h, si) in history.iter().zip(&s) {
        for (c, hv) in ctx.iter_mut().zip(h) {
            *c += si * hv;
        }
    }
    Ok((ctx, s))
}

/// Handles to the pieces of a recorded forward pass.
pub struct PrpnTrace {
    pub loss: Var,
    pub logits: Var,
    pub distances: Var,
    pub state: PrpnState,
}

/// A PRPN language model: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Prpn {
    pub config: PrpnConfig,
    pub params: ParamStore,
}

impl Prpn {
    pub fn new(config: PrpnConfig) -> Result<Self> {
        config.validate()?;
        let (v, e, h, l) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.window,
        );
        let mut p = ParamStore::new(config.seed);
        p.add_embedding("embed", v, e)?;
        p.add_matrix("dist.w1", (l + 1) * e, h)?;
        p.add_bias("dist.b1", h)?;
        p.add_vector("dist.w2", h)?;
        p.add_scalar("dist.b2", 0.0)?;
        p.add_matrix("attn.w", h + e, h)?;
        p.add_matrix("cell.w", e + h, 4 * h)?;
        p.add_bias("cell.b", 4 * h)?;
        p.add_matrix("out.w", h, v)?;
        p.add_bias("out.b", v)?;
        Ok(Prpn { config, params: p })
    }

    fn check_sentence(&self, ids: &[usize]) -> Result<()> {
        if ids.len() < 2 {
            return Err(Error::invalid(format!(
                "sentence of length {} is too short; need at least 2 tokens",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the distance MLP for `d_2..d_N` on `tape`.
    pub fn distances_on_tape(
        &self,
        tape: &Tape,
        params: &ParamStore,
        ids: &[usize],
    ) -> Result<Var> {
        let l = self.config.window;
        let n = ids.len();
        let mut padded = vec![BOUNDARY_ID; l];
        padded.extend_from_slice(ids);
        // Window for d_t is w_{t-L}..w_t, i.e. padded[t-1 ..= t-1+L].
        let mut window_ids = Vec::with_capacity((n - 1) * (l + 1));
        for t in 2..=n {
            window_ids.extend_from_slice(&padded[t - 1..t + l]);
        }
        let embed = tape.param(params, "embed")?;
        let rows = tape.embedding(embed, &window_ids)?;
        let x = tape.reshape(rows, &[n - 1, (l + 1) * self.config.embed_dim])?;
        let hidden = tape.linear(
            x,
            tape.param(params, "dist.w1")?,
            tape.param(params, "dist.b1")?,
        )?;
        let hidden = tape.tanh(hidden);
        let d = tape.matmul(hidden, tape.param(params, "dist.w2")?)?;
        tape.add(d, tape.param(params, "dist.b2")?)
    }

    /// Records `g_1^t..g_{t-1}^t` for `t >= 3` from the recorded distances.
    fn gates_on_tape(&self, tape: &Tape, d: Var, t: usize) -> Result<Var> {
        let dt = tape.index(d, t - 2)?;
        let earlier = tape.slice(d, 0, 0, t - 2)?;
        let diff = tape.sub(dt, earlier)?;
        let alpha = tape.hardtanh(tape.scale(diff, self.config.tau));
        let alpha = tape.scale(tape.shift(alpha, 1.0), 0.5);
        tape.suffix_product(alpha)
    }

    /// Records the full language-model pass for one sentence using the
    /// parameters in `params` (normally `self.params`).
    pub fn forward_with(
        &self,
        tape: &Tape,
        params: &ParamStore,
        ids: &[usize],
    ) -> Result<PrpnTrace> {
        self.check_sentence(ids)?;
        let n = ids.len();
        let h = self.config.hidden_dim;
        let d = self.distances_on_tape(tape, params, ids)?;
        let embed = tape.param(params, "embed")?;
        let words = tape.embedding(embed, ids)?;
        let attn_w = tape.param(params, "attn.w")?;
        let cell_w = tape.param(params, "cell.w")?;
        let cell_b = tape.param(params, "cell.b")?;

        let mut state = PrpnState {
            distances: tape.data(d),
            ..Default::default()
        };
        // The reader keeps no recurrent state of its own: the previous hidden
        // and cell vectors are replaced by gated attention reads over all
        // earlier positions, so the distances decide what the cell remembers.
        let zeros = tape.constant(Tensor::zeros(&[h]));
        let mut hs: Vec<Var> = Vec::with_capacity(n);
        let mut cs: Vec<Var> = Vec::with_capacity(n);
        for t in 1..=n {
            let x = tape.row(words, t - 1)?;
            let (h_read, c_read) = if t == 1 {
                state.gates.push(Vec::new());
                state.attention.push(Vec::new());
                (zeros, zeros)
            } else {
                let history = tape.stack(&hs)?;
                let query = tape.matmul(tape.concat(&[hs[t - 2], x], 0)?, attn_w)?;
                let scores = tape.matmul(history, query)?;
                let s_tilde = tape.softmax(scores, 0)?;
                let weights = if t == 2 {
                    state.gates.push(vec![1.0]);
                    s_tilde
                } else {
                    let g = self.gates_on_tape(tape, d, t)?;
                    state.gates.push(tape.data(g));
                    tape.mul(g, s_tilde)?
                };
                let total = tape.sum(weights);
                let s = if tape.item(total) > 0.0 {
                    tape.div(weights, total)?
                } else {
                    tape.constant(Tensor::one_hot(t - 1, t - 2))
                };
                state.attention.push(tape.data(s));
                (tape.matmul(s, history)?, tape.matmul(s, tape.stack(&cs)?)?)
            };
            let z = tape.linear(tape.concat(&[x, h_read], 0)?, cell_w, cell_b)?;
            let gate = |k: usize| tape.slice(z, 0, k * h, h);
            let i = tape.sigmoid(gate(0)?);
            let f = tape.sigmoid(gate(1)?);
            let o = tape.sigmoid(gate(2)?);
            let u = tape.tanh(gate(3)?);
            let c = tape.add(tape.mul(f, c_read)?, tape.mul(i, u)?)?;
            let hv = tape.mul(o, tape.tanh(c))?;
            hs.push(hv);
            cs.push(c);
        }
        state.hidden = hs.iter().map(|&v| tape.data(v)).collect();
        let all = tape.stack(&hs)?;
        let logits = tape.linear(
            all,
            tape.param(params, "out.w")?,
            tape.param(params, "out.b")?,
        )?;
        let mut targets: Vec<usize> = ids[1..].to_vec();
        targets.push(BOUNDARY_ID);
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok(PrpnTrace {
            loss,
            logits,
            distances: d,
            state,
        })
    }

    /// Next-word distributions, mean token cross-entropy and the internal
    /// state for one sentence.
    pub fn lm_forward(&self, ids: &[usize]) -> Result<LmOutput> {
        let tape = Tape::new();
        let trace = self.forward_with(&tape, &self.params, ids)?;
        let logits = tape.value(trace.logits);
        let distributions = (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                let e: Vec<Real> = row.iter().map(|v| (v - max).exp()).collect();
                let z: Real = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect();
        Ok(LmOutput {
            distributions,
            loss: tape.item(trace.loss),
            state: trace.state,
        })
    }

    /// `d_2..d_N` from the distance MLP alone.
    pub fn estimate_distances(&self, ids: &[usize]) -> Result<Vec<Real>> {
        self.check_sentence(ids)?;
        let tape = Tape::new();
        Ok(tape.data(self.distances_on_tape(&tape, &self.params, ids)?))
    }

    pub fn extract_distances(&self, ids: &[usize]) -> Result<DistanceVector> {
        let d = self.estimate_distances(ids)?;
        #[allow(clippy::useless_conversion)] // Real is f32 under the `f32` feature
        DistanceVector::new(d.into_iter().map(f64::from).collect())
    }

    /// Mean per-sentence loss over `corpus`, skipping sentences shorter
    /// than two tokens.
    pub fn mean_loss(&self, corpus: &[Vec<usize>]) -> Result<Real> {
        let mut total = 0.0;
        let mut count = 0;
        for s in corpus.iter().filter(|s| s.len() >= 2) {
            total += self.lm_forward(s)?.loss;
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("no sentence with at least two tokens"));
        }
        Ok(total / count as Real)
    }

    pub fn save(&self, path: &Path, steps: u64, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            seed: self.config.seed,
            steps,
            config_hash: config_hash.to_string(),
            ..Default::default()
        };
        save_checkpoint(path, &self.params, &self.config.to_meta(meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        let config = PrpnConfig::from_meta(&meta)?;
        let fresh = Prpn::new(config.clone())?;
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
        Ok(Prpn { config, params })
    }
}

/// Trains a language model on `corpus` (token-id sentences). Returns the
/// model, the mean training loss of each epoch and the number of updates.
pub fn train_lm(corpus: &[Vec<usize>], config: &PrpnConfig) -> Result<(Prpn, Vec<Real>, u64)> {
    let usable: Vec<&Vec<usize>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "training corpus has no sentence with at least two tokens",
        ));
    }
    let mut model = Prpn::new(config.clone())?;
    let opt = Sgd::new(config.lr, Some(config.clip));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5052_504e);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut steps = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            for &k in batch {
                let tape = Tape::new();
                let trace = model.forward_with(&tape, &model.params, usable[k])?;
                let loss = tape.item(trace.loss);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("language-model loss {loss}")));
                }
                epoch_loss += loss;
                let scaled = tape.scale(trace.loss, 1.0 / batch.len() as Real);
                tape.backward(scaled)?;
                tape.accumulate_param_grads(&mut model.params)?;
            }
            opt.step(&mut model.params)?;
            steps += 1;
        }
        log.push(epoch_loss / usable.len() as Real);
    }
    Ok((model, log, steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Prpn {
        Prpn::new(PrpnConfig {
            vocab_size: 20,
            embed_dim: 8,
            hidden_dim: 8,
            window: 2,
            tau: 1.0,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn distance_count() {
        let m = Prpn::new(PrpnConfig {
            vocab_size: 20,
            window: 3,
            embed_dim: 4,
            hidden_dim: 4,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(m.estimate_distances(&[2, 3, 4, 5, 6]).unwrap().len(), 4);
        assert_eq!(m.extract_distances(&[2, 3]).unwrap().values().len(), 1);
        assert!(m.extract_distances(&[2]).is_err());
    }

    #[test]
    fn zero_parameters_give_equal_distances() {
        let mut m = toy();
        let names: Vec<String> = m.params.names().map(String::from).collect();
        for n in names {
            m.params
                .get_mut(&n)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        m.params.get_mut("dist.b2").unwrap().data_mut()[0] = 0.25;
        assert_eq!(m.estimate_distances(&[4, 5, 6, 7]).unwrap(), vec![0.25; 3]);
    }

    #[test]
    fn gates_worked_example() {
        // d_2 = 0.1, d_3 = 0.5, t = 3: alpha_2 = 0.7.
        let g = attention_gates(&[0.1, 0.5], 1.0, 3);
        assert!((g[0] - 0.7).abs() < 1e-12);
        assert_eq!(g[1], 1.0);
    }

    #[test]
    fn gates_saturate_to_nearest_token() {
        let g = attention_gates(&[5.0, 4.0, 6.0, -3.0], 100.0, 5);
        assert_eq!(g, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_masking() {
        let w = Tensor::matrix(3, 2, vec![0.3, -0.1, 0.2, 0.4, -0.5, 0.6]).unwrap();
        let hist = vec![vec![1.0, 2.0], vec![-0.5, 0.3]];
        let (_, s) = structured_attention(&hist, &[-0.5, 0.3], &[0.7], &w, &[0.0, 1.0]).unwrap();
        assert_eq!(s, vec![0.0, 1.0]);
        let (_, s1) = structured_attention(&hist, &[-0.5, 0.3], &[0.7], &w, &[1.0, 1.0]).unwrap();
        let (_, s2) = structured_attention(&hist, &[-0.5, 0.3], &[0.7], &w, &[0.5, 0.5]).unwrap();
        assert!(s1.iter().zip(&s2).all(|(a, b)| (a - b).abs() < 1e-15));
        let (_, s0) = structured_attention(&hist, &[-0.5, 0.3], &[0.7], &w, &[0.0, 0.0]).unwrap();
        assert_eq!(s0, vec![0.0, 1.0]);
    }

    #[test]
    fn recorded_state_matches_direct_arithmetic() {
        let m = toy();
        let ids = [3, 7, 2, 9, 11];
        let out = m.lm_forward(&ids).unwrap();
        let w = m.params.get("attn.w").unwrap();
        let embed = m.params.get("embed").unwrap();
        for t in 2..=ids.len() {
            let g = attention_gates(&out.state.distances, m.config.tau, t);
            let recorded = &out.state.gates[t - 1];
            assert!(g.iter().zip(recorded).all(|(a, b)| (a - b).abs() < 1e-12));
            let hist = &out.state.hidden[..t - 1];
            let (_, s) =
                structured_attention(hist, &hist[t - 2], embed.row(ids[t - 1]), w, &g).unwrap();
            let rec = &out.state.attention[t - 1];
            assert!(s.iter().zip(rec).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!((rec.iter().sum::<Real>() - 1.0).abs() < 1e-12);
        }
        for d in &out.distributions {
            assert!((d.iter().sum::<Real>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_is_inert() {
        let corpus: Vec<Vec<usize>> = (0..6).map(|k| vec![2 + k % 3, 5, 6 + k % 2, 9]).collect();
        let cfg = PrpnConfig {
            vocab_size: 12,
            embed_dim: 6,
            hidden_dim: 6,
            window: 2,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let (a, la, _) = train_lm(&corpus, &cfg).unwrap();
        let (_, lb, _) = train_lm(&corpus, &cfg).unwrap();
        assert_eq!(la, lb);
        assert!(la.last().unwrap() < &la[0]);
        let frozen = PrpnConfig {
            lr: 0.0,
            ..cfg.clone()
        };
        let (b, _, _) = train_lm(&corpus, &frozen).unwrap();
        let init = Prpn::new(cfg).unwrap();
        for (name, t) in init.params.iter() {
            assert_eq!(b.params.get(name), Some(t));
        }
        assert!(a.params.get("embed") != init.params.get("embed"));
        assert!(train_lm(&[], &frozen).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        let m = toy();
        m.save(&path, 5, "h").unwrap();
        let back = Prpn::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        let ids = [2, 4, 6];
        assert_eq!(
            back.estimate_distances(&ids).unwrap(),
            m.estimate_distances(&ids).unwrap()
        );
    }
}
