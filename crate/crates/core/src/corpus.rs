//! Vocabularies and the line-oriented corpus files every stage reads and
//! writes.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::distance::{CompositionSequence, DistanceVector};
use crate::error::{Error, Result};
use crate::trees::{parse_ptb, BinaryTree, LabeledTree};

pub const UNK_ID: usize = 0;
/// Pads the distance window and marks the end of a sentence.
pub const BOUNDARY_ID: usize = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const BOUNDARY_TOKEN: &str = "<s>";

/// Token ↔ id map. Ids follow line order in the vocabulary file.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved ids, then tokens by descending frequency (ties in byte
    /// order), keeping those seen at least `min_count` times, up to
    /// `max_size` entries overall.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], min_count: usize, max_size: usize) -> Vocab {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for w in s {
                *counts.entry(w.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(w, c)| c >= min_count && w != UNK_TOKEN && w != BOUNDARY_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = vec![UNK_TOKEN.to_string(), BOUNDARY_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
        tokens.truncate(max_size.max(2));
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(path, &self.tokens)
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let tokens = read_lines(path)?;
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != BOUNDARY_TOKEN {
            return Err(Error::invalid(format!(
                "{}: vocabulary must start with {UNK_TOKEN} and {BOUNDARY_TOKEN}",
                path.display()
            )));
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Non-empty lines with trailing whitespace removed.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end().to_string())
        .filter(|l| !l.trim().is_empty())
        .collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses every non-empty line of `path` with `parse`, shifting parse-error
/// offsets to be relative to the file and naming the line.
fn read_parsed<T>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (lineno, line) in text.split('\n').enumerate() {
        if !line.trim().is_empty() {
            let item = parse(line).map_err(|e| match e {
                Error::Parse { offset: o, message } => Error::Parse {
                    offset: offset + o,
                    message: format!("{} line {}: {message}", path.display(), lineno + 1),
                },
                Error::Invalid(m) => {
                    Error::Invalid(format!("{} line {}: {m}", path.display(), lineno + 1))
                }
                other => other,
            })?;
            out.push(item);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?
        .into_iter()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

pub fn read_labeled_trees(path: &Path) -> Result<Vec<LabeledTree>> {
    read_parsed(path, parse_ptb)
}

pub fn read_binary_trees(path: &Path) -> Result<Vec<BinaryTree>> {
    read_parsed(path, BinaryTree::from_ptb)
}

pub fn read_distances(path: &Path) -> Result<Vec<DistanceVector>> {
    read_parsed(path, str::parse)
}

pub fn read_sequences(path: &Path) -> Result<Vec<CompositionSequence>> {
    read_parsed(path, str::parse)
}

/// Three-way sentence-pair label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [
        NliLabel::Entailment,
        NliLabel::Neutral,
        NliLabel::Contradiction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        })
    }
}

impl FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            _ => Err(Error::invalid(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliPair {
    pub label: NliLabel,
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
}

impl fmt::Display for NliPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}",
            self.label,
            self.premise.join(" "),
            self.hypothesis.join(" ")
        )
    }
}

impl FromStr for NliPair {
    type Err = Error;

    /// `label<TAB>premise tokens<TAB>hypothesis tokens`.
    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::invalid(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let pair = NliPair {
            label: fields[0].trim().parse()?,
            premise: words(fields[1]),
            hypothesis: words(fields[2]),
        };
        if pair.premise.is_empty() || pair.hypothesis.is_empty() {
            return Err(Error::invalid("empty premise or hypothesis"));
        }
        Ok(pair)
    }
}

pub fn read_nli(path: &Path) -> Result<Vec<NliPair>> {
    read_parsed(path, str::parse)
}
