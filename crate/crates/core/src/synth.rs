//! Probabilistic context-free grammars for generating small benchmark
//! corpora with gold derivations and heuristic sentence-pair labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{NliLabel, NliPair};
use crate::error::{Error, Result};
use crate::trees::{Constituency, LabeledTree, Token};

/// The grammar shipped with the crate.
pub const BUNDLED_GRAMMAR: &str = include_str!("../data/toy.grammar");

const MAX_DEPTH: usize = 40;
const MAX_ATTEMPTS: usize = 100_000;
/// Cross pairs sharing at least this Jaccard overlap of content words are
/// labeled contradiction, the rest neutral.
const OVERLAP_THRESHOLD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
struct Rule {
    prob: f64,
    rhs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    start: String,
    rules: BTreeMap<String, Vec<Rule>>,
}

impl Grammar {
    /// Parses `probability LHS -> RHS...` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Grammar> {
        let mut rules: BTreeMap<String, Vec<Rule>> = BTreeMap::new();
        let mut start = None;
        let mut offset = 0;
        for line in text.split('\n') {
            let body = line.split('#').next().unwrap_or("").trim();
            if !body.is_empty() {
                let err = |m: String| Error::Parse { offset, message: m };
                let fields: Vec<&str> = body.split_whitespace().collect();
                if fields.len() < 4 || fields[2] != "->" {
                    return Err(err(format!("expected `prob LHS -> RHS...`, got {body:?}")));
                }
                let prob: f64 = fields[0]
                    .parse()
                    .map_err(|e| err(format!("bad probability {:?}: {e}", fields[0])))?;
                if !(0.0..=1.0).contains(&prob) {
                    return Err(err(format!("probability {prob} outside [0, 1]")));
                }
                let lhs = fields[1].to_string();
                start.get_or_insert_with(|| lhs.clone());
                rules.entry(lhs).or_default().push(Rule {
                    prob,
                    rhs: fields[3..].iter().map(|s| s.to_string()).collect(),
                });
            }
            offset += line.len() + 1;
        }
        let start = start.ok_or_else(|| Error::invalid("grammar has no rules"))?;
        for (lhs, rs) in &rules {
            let total: f64 = rs.iter().map(|r| r.prob).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "rule probabilities for {lhs} sum to {total}, not 1"
                )));
            }
        }
        Ok(Grammar { start, rules })
    }

    pub fn load(path: &Path) -> Result<Grammar> {
        Grammar::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn bundled() -> Grammar {
        Grammar::parse(BUNDLED_GRAMMAR).expect("bundled grammar is valid")
    }

    pub fn start(&self) -> &str {
        &self.start
    }

    pub fn nonterminals(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }

    pub fn terminals(&self) -> BTreeSet<&str> {
        self.rules
            .values()
            .flatten()
            .flat_map(|r| r.rhs.iter())
            .filter(|s| !self.rules.contains_key(*s))
            .map(String::as_str)
            .collect()
    }

    fn expand(
        &self,
        symbol: &str,
        rng: &mut ChaCha8Rng,
        depth: usize,
        words: &mut usize,
        max_len: usize,
    ) -> Option<LabeledTree> {
        let Some(rules) = self.rules.get(symbol) else {
            *words += 1;
            return Some(LabeledTree::Leaf(Token::new(symbol, *words)));
        };
        if depth > MAX_DEPTH || *words > max_len {
            return None;
        }
        let mut u: f64 = rng.gen();
        let mut chosen = &rules[rules.len() - 1];
        for r in rules {
            if u < r.prob {
                chosen = r;
                break;
            }
            u -= r.prob;
        }
        let children = chosen
            .rhs
            .iter()
            .map(|s| self.expand(s, rng, depth + 1, words, max_len))
            .collect::<Option<Vec<_>>>()?;
        Some(LabeledTree::Node {
            label: symbol.to_string(),
            children,
        })
    }

    /// Draws derivations until one yields between 2 and `max_len` words.
    pub fn sample(&self, rng: &mut ChaCha8Rng, max_len: usize) -> Result<LabeledTree> {
        if max_len < 2 {
            return Err(Error::invalid("maximum sentence length must be at least 2"));
        }
        for _ in 0..MAX_ATTEMPTS {
            let mut words = 0;
            if let Some(t) = self.expand(&self.start, rng, 0, &mut words, max_len) {
                if (2..=max_len).contains(&words) {
                    return Ok(t);
                }
            }
        }
        Err(Error::invalid(format!(
            "grammar produced no sentence of 2..={max_len} words in {MAX_ATTEMPTS} attempts"
        )))
    }
}

/// Sentences, their derivations and sentence pairs built from them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub sentences: Vec<Vec<String>>,
    pub trees: Vec<LabeledTree>,
    pub pairs: Vec<NliPair>,
}

/// Leaves with their preterminal labels.
fn tagged(t: &LabeledTree) -> Vec<(String, String)> {
    fn walk(t: &LabeledTree, parent: &str, out: &mut Vec<(String, String)>) {
        match t {
            LabeledTree::Leaf(tok) => out.push((parent.to_string(), tok.surface.clone())),
            LabeledTree::Node { label, children } => {
                children.iter().for_each(|c| walk(c, label, out))
            }
        }
    }
    let mut out = Vec::new();
    walk(t, "", &mut out);
    out
}

fn content_words(t: &LabeledTree) -> BTreeSet<String> {
    tagged(t)
        .into_iter()
        .filter(|(tag, _)| !matches!(tag.as_str(), "DT" | "PU" | "IN" | "COMP"))
        .map(|(_, w)| w)
        .collect()
}

/// Samples `count` sentences and one pair per sentence: every third pair
/// is the sentence against itself with its determiners redrawn
/// (entailment); the others pair it with a random other sentence and are
/// labeled by content-word overlap.
pub fn generate(
    grammar: &Grammar,
    count: usize,
    max_len: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trees = (0..count)
        .map(|_| grammar.sample(&mut rng, max_len))
        .collect::<Result<Vec<_>>>()?;
    let sentences: Vec<Vec<String>> = trees.iter().map(|t| t.words()).collect();
    let determiners: Vec<String> = grammar
        .rules
        .get("DT")
        .map(|rs| rs.iter().flat_map(|r| r.rhs.clone()).collect())
        .unwrap_or_default();
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let premise = sentences[i].clone();
        let pair = if i % 3 == 0 || count < 2 {
            let hypothesis = tagged(&trees[i])
                .into_iter()
                .map(
                    |(tag, w)| match (tag.as_str(), determiners.choose(&mut rng)) {
                        ("DT", Some(d)) => d.clone(),
                        _ => w,
                    },
                )
                .collect();
            NliPair {
                label: NliLabel::Entailment,
                premise,
                hypothesis,
            }
        } else {
            let mut j = rng.gen_range(0..count - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (content_words(&trees[i]), content_words(&trees[j]));
            let union = a.union(&b).count().max(1) as f64;
            let overlap = a.intersection(&b).count() as f64 / union;
            NliPair {
                label: if overlap >= OVERLAP_THRESHOLD {
                    NliLabel::Contradiction
                } else {
                    NliLabel::Neutral
                },
                premise,
                hypothesis: sentences[j].clone(),
            }
        };
        pairs.push(pair);
    }
    Ok(SyntheticCorpus {
        sentences,
        trees,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::parse_ptb;

    #[test]
    fn bundled_grammar_is_valid() {
        let g = Grammar::bundled();
        assert_eq!(g.start(), "TOP");
        assert!(g.terminals().len() + 2 >= 50);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(Grammar::parse("0.5 S -> a\n0.4 S -> b\n").is_err());
        assert!(Grammar::parse("1.0 S a\n").is_err());
        assert!(Grammar::parse("# nothing\n").is_err());
        assert!(Grammar::parse("0.5 S -> a\n0.5 S -> b b\n").is_ok());
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let g = Grammar::bundled();
        let a = generate(&g, 50, 10, 4).unwrap();
        assert_eq!(a, generate(&g, 50, 10, 4).unwrap());
        assert_ne!(a, generate(&g, 50, 10, 5).unwrap());
        for (s, t) in a.sentences.iter().zip(&a.trees) {
            assert!((2..=10).contains(&s.len()));
            assert_eq!(&parse_ptb(&t.to_string()).unwrap(), t);
        }
        assert_eq!(a.pairs.len(), 50);
        assert!(a.pairs.iter().any(|p| p.label == NliLabel::Entailment));
        assert!(a.pairs.iter().any(|p| p.label != NliLabel::Entailment));
        assert_eq!(generate(&g, 0, 10, 4).unwrap(), SyntheticCorpus::default());
    }
}
