//! Constituency trees, PTB bracket I/O, span extraction, baseline trees and
//! punctuation pruning.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Label written for every internal node of an unlabeled binary tree.
pub const PLACEHOLDER_LABEL: &str = "X";

/// A word at a 1-based position in its sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub surface: String,
    pub index: usize,
}

impl Token {
    pub fn new(surface: impl Into<String>, index: usize) -> Self {
        Token {
            surface: surface.into(),
            index,
        }
    }

    /// Numbers `words` 1..=N.
    pub fn sequence<S: AsRef<str>>(words: &[S]) -> Vec<Token> {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| Token::new(w.as_ref(), i + 1))
            .collect()
    }

    /// `w1 .. wN`, used when only the shape of a tree matters.
    pub fn placeholders(n: usize) -> Vec<Token> {
        (1..=n).map(|i| Token::new(format!("w{i}"), i)).collect()
    }
}

/// An inclusive, 1-based constituent span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BinaryTree {
    Leaf(Token),
    Node(Box<BinaryTree>, Box<BinaryTree>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabeledTree {
    Leaf(Token),
    Node {
        label: String,
        children: Vec<LabeledTree>,
    },
}

/// Operations shared by predicted binary trees and labeled reference trees.
pub trait Constituency {
    /// Leaves in left-to-right order.
    fn fringe(&self) -> Vec<&Token>;

    /// Spans of every constituent covering at least two tokens. The
    /// full-sentence span is included iff `include_root`.
    fn spans(&self, include_root: bool) -> BTreeSet<Span>;

    /// Bracketed one-line rendering.
    fn serialize(&self) -> String;

    fn num_leaves(&self) -> usize {
        self.fringe().len()
    }

    fn words(&self) -> Vec<String> {
        self.fringe()
            .into_iter()
            .map(|t| t.surface.clone())
            .collect()
    }
}

impl BinaryTree {
    pub fn leaf(surface: impl Into<String>, index: usize) -> Self {
        BinaryTree::Leaf(Token::new(surface, index))
    }

    pub fn node(left: BinaryTree, right: BinaryTree) -> Self {
        BinaryTree::Node(Box::new(left), Box::new(right))
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, BinaryTree::Leaf(_))
    }

    /// Renumbers leaves 1..=N in fringe order.
    pub fn renumber(&mut self) {
        fn walk(t: &mut BinaryTree, next: &mut usize) {
            match t {
                BinaryTree::Leaf(tok) => {
                    tok.index = *next;
                    *next += 1;
                }
                BinaryTree::Node(l, r) => {
                    walk(l, next);
                    walk(r, next);
                }
            }
        }
        let mut next = 1;
        walk(self, &mut next);
    }

    /// Replaces leaf surfaces with `words`, keeping the shape.
    pub fn relabel_leaves<S: AsRef<str>>(&self, words: &[S]) -> Result<BinaryTree> {
        if words.len() != self.num_leaves() {
            return Err(Error::invalid(format!(
                "tree has {} leaves but {} words were given",
                self.num_leaves(),
                words.len()
            )));
        }
        fn walk<S: AsRef<str>>(t: &BinaryTree, words: &[S], next: &mut usize) -> BinaryTree {
            match t {
                BinaryTree::Leaf(_) => {
                    let i = *next;
                    *next += 1;
                    BinaryTree::leaf(words[i].as_ref(), i + 1)
                }
                BinaryTree::Node(l, r) => {
                    let l = walk(l, words, next);
                    let r = walk(r, words, next);
                    BinaryTree::node(l, r)
                }
            }
        }
        Ok(walk(self, words, &mut 0))
    }

    /// Parses a bracketed tree whose internal nodes all have two children
    /// after unary chains are collapsed. Labels are ignored.
    pub fn from_ptb(text: &str) -> Result<BinaryTree> {
        parse_ptb(text)?.to_binary()
    }

    pub fn to_labeled(&self) -> LabeledTree {
        match self {
            BinaryTree::Leaf(t) => LabeledTree::Leaf(t.clone()),
            BinaryTree::Node(l, r) => LabeledTree::Node {
                label: PLACEHOLDER_LABEL.to_string(),
                children: vec![l.to_labeled(), r.to_labeled()],
            },
        }
    }

    fn collect_spans(&self, offset: usize, out: &mut BTreeSet<Span>) -> usize {
        match self {
            BinaryTree::Leaf(_) => 1,
            BinaryTree::Node(l, r) => {
                let nl = l.collect_spans(offset, out);
                let nr = r.collect_spans(offset + nl, out);
                out.insert(Span::new(offset + 1, offset + nl + nr));
                nl + nr
            }
        }
    }
}

impl Constituency for BinaryTree {
    fn fringe(&self) -> Vec<&Token> {
        fn walk<'a>(t: &'a BinaryTree, out: &mut Vec<&'a Token>) {
            match t {
                BinaryTree::Leaf(tok) => out.push(tok),
                BinaryTree::Node(l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    fn spans(&self, include_root: bool) -> BTreeSet<Span> {
        let mut out = BTreeSet::new();
        let n = self.collect_spans(0, &mut out);
        if !include_root {
            out.remove(&Span::new(1, n));
        }
        out
    }

    fn serialize(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BinaryTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinaryTree::Leaf(t) => f.write_str(&t.surface),
            BinaryTree::Node(l, r) => write!(f, "({PLACEHOLDER_LABEL} {l} {r})"),
        }
    }
}

impl FromStr for BinaryTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BinaryTree::from_ptb(s)
    }
}

impl LabeledTree {
    pub fn label(&self) -> Option<&str> {
        match self {
            LabeledTree::Leaf(_) => None,
            LabeledTree::Node { label, .. } => Some(label),
        }
    }

    /// Collapses unary chains and drops labels. Fails on nodes with more
    /// than two children.
    pub fn to_binary(&self) -> Result<BinaryTree> {
        match self {
            LabeledTree::Leaf(t) => Ok(BinaryTree::Leaf(t.clone())),
            LabeledTree::Node { children, label } => match children.as_slice() {
                [only] => only.to_binary(),
                [l, r] => Ok(BinaryTree::node(l.to_binary()?, r.to_binary()?)),
                _ => Err(Error::invalid(format!(
                    "node {label} has {} children; binary tree expected",
                    children.len()
                ))),
            },
        }
    }

    /// Visits every labeled constituent with its span, children first.
    pub fn for_each_constituent(&self, mut f: impl FnMut(&str, Span)) {
        fn walk(t: &LabeledTree, offset: usize, f: &mut dyn FnMut(&str, Span)) -> usize {
            match t {
                LabeledTree::Leaf(_) => 1,
                LabeledTree::Node { label, children } => {
                    let mut n = 0;
                    for c in children {
                        n += walk(c, offset + n, f);
                    }
                    f(label, Span::new(offset + 1, offset + n));
                    n
                }
            }
        }
        walk(self, 0, &mut f);
    }

    fn renumber(&mut self) {
        fn walk(t: &mut LabeledTree, next: &mut usize) {
            match t {
                LabeledTree::Leaf(tok) => {
                    tok.index = *next;
                    *next += 1;
                }
                LabeledTree::Node { children, .. } => {
                    for c in children {
                        walk(c, next);
                    }
                }
            }
        }
        let mut next = 1;
        walk(self, &mut next);
    }
}

impl Constituency for LabeledTree {
    fn fringe(&self) -> Vec<&Token> {
        fn walk<'a>(t: &'a LabeledTree, out: &mut Vec<&'a Token>) {
            match t {
                LabeledTree::Leaf(tok) => out.push(tok),
                LabeledTree::Node { children, .. } => children.iter().for_each(|c| walk(c, out)),
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    fn spans(&self, include_root: bool) -> BTreeSet<Span> {
        let mut out = BTreeSet::new();
        self.for_each_constituent(|_, span| {
            if span.len() >= 2 {
                out.insert(span);
            }
        });
        if !include_root {
            out.remove(&Span::new(1, self.num_leaves()));
        }
        out
    }

    fn serialize(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LabeledTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabeledTree::Leaf(t) => f.write_str(&t.surface),
            LabeledTree::Node { label, children } => {
                write!(f, "({label}")?;
                for c in children {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl FromStr for LabeledTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_ptb(s)
    }
}

/// Parses one bracketed tree, e.g. `(S (NP the dog) (VP ran))`.
///
/// Leaves may be bare tokens or preterminal nodes such as `(DT the)`. The
/// label-less outer wrapper PTB files put around each tree, `( (S ...) )`,
/// is removed. Error offsets are byte offsets into `text`.
pub fn parse_ptb(text: &str) -> Result<LabeledTree> {
    let mut parser = PtbParser {
        src: text,
        pos: 0,
        next_index: 1,
    };
    parser.skip_ws();
    if parser.pos == text.len() {
        return Err(Error::Parse {
            offset: 0,
            message: "empty input".into(),
        });
    }
    let tree = parser.tree()?;
    parser.skip_ws();
    if parser.pos != text.len() {
        return Err(parser.error("trailing input after tree"));
    }
    let mut tree = tree;
    tree.renumber();
    Ok(tree)
}

struct PtbParser<'a> {
    src: &'a str,
    pos: usize,
    next_index: usize,
}

impl PtbParser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn atom(&mut self) -> &str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn tree(&mut self) -> Result<LabeledTree> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(')') => Err(self.error("unexpected ')'")),
            Some('(') => {
                self.pos += 1;
                self.skip_ws();
                let label = match self.peek() {
                    Some('(') => String::new(),
                    Some(')') => return Err(self.error("empty constituent")),
                    None => return Err(self.error("unbalanced brackets")),
                    Some(_) => self.atom().to_string(),
                };
                let mut children = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        None => return Err(self.error("unbalanced brackets")),
                        Some(')') => {
                            self.pos += 1;
                            break;
                        }
                        Some(_) => children.push(self.tree()?),
                    }
                }
                if children.is_empty() {
                    return Err(Error::Parse {
                        offset: self.pos - 1,
                        message: format!("empty constituent ({label})"),
                    });
                }
                if label.is_empty() {
                    if children.len() == 1 {
                        return Ok(children.pop().expect("one child"));
                    }
                    return Err(self.error("constituent without a label"));
                }
                Ok(LabeledTree::Node { label, children })
            }
            Some(_) => {
                let index = self.next_index;
                self.next_index += 1;
                Ok(LabeledTree::Leaf(Token::new(self.atom(), index)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    LeftBranching,
    RightBranching,
    Balanced,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lb" | "left" => Ok(BaselineKind::LeftBranching),
            "rb" | "right" => Ok(BaselineKind::RightBranching),
            "balanced" | "bal" => Ok(BaselineKind::Balanced),
            other => Err(Error::Usage(format!("unknown baseline kind {other:?}"))),
        }
    }
}

/// Baseline tree over `w1 .. wn`.
pub fn baseline_tree(kind: BaselineKind, n: usize) -> Result<BinaryTree> {
    baseline_tree_over(kind, &Token::placeholders(n))
}

/// Baseline tree over the given tokens. Balanced trees split at
/// `ceil(n/2)`, left part larger.
pub fn baseline_tree_over(kind: BaselineKind, tokens: &[Token]) -> Result<BinaryTree> {
    if tokens.is_empty() {
        return Err(Error::invalid("baseline tree needs at least one token"));
    }
    let leaf = |t: &Token| BinaryTree::Leaf(t.clone());
    Ok(match kind {
        BaselineKind::LeftBranching => {
            let mut tree = leaf(&tokens[0]);
            for t in &tokens[1..] {
                tree = BinaryTree::node(tree, leaf(t));
            }
            tree
        }
        BaselineKind::RightBranching => {
            let mut tree = leaf(&tokens[tokens.len() - 1]);
            for t in tokens[..tokens.len() - 1].iter().rev() {
                tree = BinaryTree::node(leaf(t), tree);
            }
            tree
        }
        BaselineKind::Balanced => {
            fn build(tokens: &[Token]) -> BinaryTree {
                if tokens.len() == 1 {
                    return BinaryTree::Leaf(tokens[0].clone());
                }
                let split = tokens.len().div_ceil(2);
                BinaryTree::node(build(&tokens[..split]), build(&tokens[split..]))
            }
            build(tokens)
        }
    })
}

/// Tokens treated as punctuation when evaluating without punctuation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PunctuationSet(HashSet<String>);

impl Default for PunctuationSet {
    fn default() -> Self {
        const DEFAULT: &[&str] = &[
            ".", ",", ";", ":", "!", "?", "\"", "'", "``", "''", "-LRB-", "-RRB-", "(", ")", "-",
            "--",
        ];
        PunctuationSet(DEFAULT.iter().map(|s| s.to_string()).collect())
    }
}

impl PunctuationSet {
    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        PunctuationSet(tokens.into_iter().map(Into::into).collect())
    }

    /// One token per line; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(
            text.lines().map(str::trim).filter(|l| !l.is_empty()),
        ))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }
}

/// Removes punctuation from a sentence and its reference tree. Constituents
/// left empty are deleted; single-child chains are kept; leaves are
/// renumbered.
pub fn strip_punctuation<S: AsRef<str>>(
    sentence: &[S],
    gold: &LabeledTree,
    punct: &PunctuationSet,
) -> Result<(Vec<String>, LabeledTree)> {
    let kept: Vec<String> = sentence
        .iter()
        .map(|s| s.as_ref())
        .filter(|w| !punct.contains(w))
        .map(str::to_string)
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid(
            "sentence is empty after removing punctuation",
        ));
    }
    fn prune(t: &LabeledTree, punct: &PunctuationSet) -> Option<LabeledTree> {
        match t {
            LabeledTree::Leaf(tok) if punct.contains(&tok.surface) => None,
            LabeledTree::Leaf(_) => Some(t.clone()),
            LabeledTree::Node { label, children } => {
                let children: Vec<_> = children.iter().filter_map(|c| prune(c, punct)).collect();
                (!children.is_empty()).then(|| LabeledTree::Node {
                    label: label.clone(),
                    children,
                })
            }
        }
    }
    let mut tree = prune(gold, punct)
        .ok_or_else(|| Error::invalid("reference tree is empty after removing punctuation"))?;
    tree.renumber();
    Ok((kept, tree))
}
