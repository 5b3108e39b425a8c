//! Syntactic distances: per-boundary heights of lowest common ancestors.
//!
//! `values[t - 2]` holds the distance between `w_{t-1}` and `w_t`, so a
//! sentence of `N` tokens has `N - 1` distances. Trees are read off a
//! distance vector by recursively splitting at the largest distance; the
//! same vector also fixes the order in which a bottom-up parser composes
//! the tree's nodes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trees::{BinaryTree, Constituency, Token};

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceVector(Vec<f64>);

impl DistanceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "distance at boundary {} is {}",
                i + 2,
                values[i]
            )));
        }
        Ok(DistanceVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Number of tokens in the sentence the vector describes.
    pub fn sentence_len(&self) -> usize {
        self.0.len() + 1
    }
}

impl fmt::Display for DistanceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for DistanceVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut offset = 0;
        for field in s.split_whitespace() {
            let at = s[offset..].find(field).map_or(offset, |p| offset + p);
            offset = at + field.len();
            values.push(field.parse::<f64>().map_err(|e| Error::Parse {
                offset: at,
                message: format!("bad distance {field:?}: {e}"),
            })?);
        }
        DistanceVector::new(values)
    }
}

/// Tree inference procedure applied to a distance vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceScheme {
    /// Split at the largest distance and recurse on both sides.
    MaxSplit,
    /// As `MaxSplit`, but a right part of two or more words is always split
    /// off as `(w_i) (w_{i+1} ...)`. Biased toward right-branching trees.
    RightBiased,
}

impl FromStr for InferenceScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "max-split" => Ok(InferenceScheme::MaxSplit),
            "b" | "right-biased" => Ok(InferenceScheme::RightBiased),
            other => Err(Error::Usage(format!(
                "unknown inference scheme {other:?}; expected a or b"
            ))),
        }
    }
}

impl fmt::Display for InferenceScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceScheme::MaxSplit => "a",
            InferenceScheme::RightBiased => "b",
        })
    }
}

pub fn infer_tree_scheme_a(d: &DistanceVector) -> BinaryTree {
    infer_tree(
        d,
        &Token::placeholders(d.sentence_len()),
        InferenceScheme::MaxSplit,
    )
    .expect("placeholder tokens match the vector length")
}

pub fn infer_tree_scheme_b(d: &DistanceVector) -> BinaryTree {
    infer_tree(
        d,
        &Token::placeholders(d.sentence_len()),
        InferenceScheme::RightBiased,
    )
    .expect("placeholder tokens match the vector length")
}

/// Builds a binary tree over `tokens` from their boundary distances. Ties
/// between equal maxima go to the leftmost boundary.
pub fn infer_tree(
    d: &DistanceVector,
    tokens: &[Token],
    scheme: InferenceScheme,
) -> Result<BinaryTree> {
    if tokens.len() != d.sentence_len() {
        return Err(Error::invalid(format!(
            "{} distances do not fit a sentence of {} tokens",
            d.values().len(),
            tokens.len()
        )));
    }
    Ok(split(d.values(), tokens, 0, tokens.len() - 1, scheme))
}

// Region lo..=hi of 0-based token positions; boundary b sits before token b.
fn split(d: &[f64], tokens: &[Token], lo: usize, hi: usize, scheme: InferenceScheme) -> BinaryTree {
    if lo == hi {
        return BinaryTree::Leaf(tokens[lo].clone());
    }
    let mut best = lo + 1;
    for b in lo + 2..=hi {
        if d[b - 1] > d[best - 1] {
            best = b;
        }
    }
    let left = split(d, tokens, lo, best - 1, scheme);
    let right = match scheme {
        InferenceScheme::RightBiased if hi > best => BinaryTree::node(
            BinaryTree::Leaf(tokens[best].clone()),
            split(d, tokens, best + 1, hi, scheme),
        ),
        _ => split(d, tokens, best, hi, scheme),
    };
    BinaryTree::node(left, right)
}

/// Canonical distances of a tree: each boundary gets the height of the
/// lowest common ancestor of its two neighbours (leaves have height 0).
pub fn tree_to_distances(t: &BinaryTree) -> DistanceVector {
    fn walk(t: &BinaryTree, out: &mut Vec<f64>) -> usize {
        match t {
            BinaryTree::Leaf(_) => 0,
            BinaryTree::Node(l, r) => {
                let hl = walk(l, out);
                let boundary = out.len();
                out.push(0.0);
                let hr = walk(r, out);
                let h = 1 + hl.max(hr);
                out[boundary] = h as f64;
                h
            }
        }
    }
    // In-order traversal visits boundaries left to right.
    let mut out = Vec::with_capacity(t.num_leaves().saturating_sub(1));
    walk(t, &mut out);
    DistanceVector(out)
}

/// Merge positions for a bottom-up parser, 1-based. Step `j` picks among the
/// `N - j` adjacent pairs of the current node sequence.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CompositionSequence(Vec<usize>);

impl CompositionSequence {
    /// Checks that the steps can be replayed over `n` tokens.
    pub fn new(steps: Vec<usize>, n: usize) -> Result<Self> {
        if n == 0 || steps.len() != n - 1 {
            return Err(Error::invalid(format!(
                "a composition sequence over {n} tokens needs {} steps, got {}",
                n.saturating_sub(1),
                steps.len()
            )));
        }
        for (j, &pos) in steps.iter().enumerate() {
            let candidates = n - 1 - j;
            if pos == 0 || pos > candidates {
                return Err(Error::invalid(format!(
                    "step {} position {pos} is outside 1..={candidates}",
                    j + 1
                )));
            }
        }
        Ok(CompositionSequence(steps))
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sentence_len(&self) -> usize {
        self.0.len() + 1
    }
}

impl fmt::Display for CompositionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for CompositionSequence {
    type Err = Error;

    /// The sentence length is implied by the number of steps.
    fn from_str(s: &str) -> Result<Self> {
        let steps = s
            .split_whitespace()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|e| Error::invalid(format!("bad step {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = steps.len() + 1;
        CompositionSequence::new(steps, n)
    }
}

/// Composition order that assembles `t` bottom-up, always merging the ready
/// node (both children already built) with the smallest boundary distance.
/// Ties go to the leftmost candidate.
pub fn composition_order(t: &BinaryTree, d: &DistanceVector) -> Result<CompositionSequence> {
    let n = t.num_leaves();
    if d.sentence_len() != n {
        return Err(Error::invalid(format!(
            "{} distances are inconsistent with a tree of {n} leaves",
            d.values().len()
        )));
    }

    // Flatten the tree: leaves are ids 0..n, internal nodes follow.
    struct Internal {
        left: usize,
        right: usize,
        boundary: usize,
    }
    fn flatten(
        t: &BinaryTree,
        next_leaf: &mut usize,
        nodes: &mut Vec<Internal>,
        n: usize,
    ) -> usize {
        match t {
            BinaryTree::Leaf(_) => {
                *next_leaf += 1;
                *next_leaf - 1
            }
            BinaryTree::Node(l, r) => {
                let left = flatten(l, next_leaf, nodes, n);
                let boundary = *next_leaf;
                let right = flatten(r, next_leaf, nodes, n);
                nodes.push(Internal {
                    left,
                    right,
                    boundary,
                });
                n + nodes.len() - 1
            }
        }
    }
    let mut nodes = Vec::with_capacity(n.saturating_sub(1));
    flatten(t, &mut 0, &mut nodes, n);

    let mut parent_of = vec![usize::MAX; n + nodes.len()];
    for (k, node) in nodes.iter().enumerate() {
        parent_of[node.left] = n + k;
        parent_of[node.right] = n + k;
    }

    let dist = d.values();
    let mut current: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(n.saturating_sub(1));
    while current.len() > 1 {
        let mut chosen: Option<(usize, f64)> = None;
        for k in 0..current.len() - 1 {
            let (a, b) = (current[k], current[k + 1]);
            let p = parent_of[a];
            if p == usize::MAX || p != parent_of[b] || nodes[p - n].left != a {
                continue;
            }
            let dk = dist[nodes[p - n].boundary - 1];
            if chosen.is_none_or(|(_, best)| dk < best) {
                chosen = Some((k, dk));
            }
        }
        let (k, _) = chosen.expect("a binary tree always has a ready node");
        steps.push(k + 1);
        let merged = parent_of[current[k]];
        current.splice(k..k + 2, [merged]);
    }
    Ok(CompositionSequence(steps))
}

/// Replays merge positions over `w1 .. wn`.
pub fn order_to_tree(steps: &CompositionSequence, n: usize) -> Result<BinaryTree> {
    order_to_tree_over(steps.steps(), &Token::placeholders(n))
}

pub fn order_to_tree_over(steps: &[usize], tokens: &[Token]) -> Result<BinaryTree> {
    let n = tokens.len();
    if n == 0 || steps.len() != n - 1 {
        return Err(Error::invalid(format!(
            "{} steps cannot assemble {n} tokens",
            steps.len()
        )));
    }
    let mut nodes: Vec<BinaryTree> = tokens.iter().cloned().map(BinaryTree::Leaf).collect();
    for (j, &pos) in steps.iter().enumerate() {
        if pos == 0 || pos >= nodes.len() {
            return Err(Error::invalid(format!(
                "step {} position {pos} is outside 1..={}",
                j + 1,
                nodes.len() - 1
            )));
        }
        let right = nodes.remove(pos);
        let left = std::mem::replace(&mut nodes[pos - 1], BinaryTree::leaf("", 0));
        nodes[pos - 1] = BinaryTree::node(left, right);
    }
    Ok(nodes.pop().expect("one node remains"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> DistanceVector {
        DistanceVector::new(v.to_vec()).unwrap()
    }

    fn tree(s: &str) -> BinaryTree {
        BinaryTree::from_ptb(s).unwrap()
    }

    #[test]
    fn scheme_a_examples() {
        assert_eq!(
            infer_tree_scheme_a(&d(&[3., 1., 2.])),
            tree("(X w1 (X (X w2 w3) w4))")
        );
        assert_eq!(infer_tree_scheme_a(&d(&[1.])), tree("(X w1 w2)"));
        assert_eq!(
            infer_tree_scheme_a(&d(&[3., 2., 1.])),
            tree("(X w1 (X w2 (X w3 w4)))")
        );
        assert_eq!(infer_tree_scheme_a(&d(&[])), tree("w1"));
    }

    #[test]
    fn scheme_b_examples() {
        assert_eq!(
            infer_tree_scheme_b(&d(&[3., 1., 2.])),
            tree("(X w1 (X w2 (X w3 w4)))")
        );
        assert_eq!(
            infer_tree_scheme_b(&d(&[1., 3., 2.])),
            tree("(X (X w1 w2) (X w3 w4))")
        );
        assert_eq!(infer_tree_scheme_b(&d(&[1.])), tree("(X w1 w2)"));
    }

    #[test]
    fn ties_go_left() {
        assert_eq!(
            infer_tree_scheme_a(&d(&[1., 1., 1.])),
            tree("(X w1 (X w2 (X w3 w4)))")
        );
        assert_eq!(
            infer_tree_scheme_a(&d(&[2., 1., 2.])),
            tree("(X w1 (X (X w2 w3) w4))")
        );
    }

    #[test]
    fn distances_from_trees() {
        assert_eq!(
            tree_to_distances(&tree("(X (X w1 w2) (X w3 w4))")),
            d(&[1., 2., 1.])
        );
        assert_eq!(tree_to_distances(&tree("(X w1 w2)")), d(&[1.]));
        assert_eq!(
            tree_to_distances(&tree("(X w1 (X (X w2 w3) w4))")),
            d(&[3., 1., 2.])
        );
        assert_eq!(tree_to_distances(&tree("w1")), d(&[]));
    }

    #[test]
    fn composition_order_examples() {
        let order =
            |t: &str, v: &[f64]| composition_order(&tree(t), &d(v)).unwrap().steps().to_vec();
        assert_eq!(
            order("(X w1 (X (X w2 w3) w4))", &[3., 1., 2.]),
            vec![2, 2, 1]
        );
        assert_eq!(order("(X w1 w2)", &[1.]), vec![1]);
        assert_eq!(
            order("(X (X w1 w2) (X w3 w4))", &[1., 2., 1.]),
            vec![1, 2, 1]
        );
        assert!(composition_order(&tree("(X w1 w2)"), &d(&[1., 2.])).is_err());
    }

    #[test]
    fn composition_order_follows_distances_not_position() {
        // Right pair is lower, so it merges first.
        let steps =
            composition_order(&tree("(X (X w1 w2) (X w3 w4))"), &d(&[0.5, 2., 0.1])).unwrap();
        assert_eq!(steps.steps(), &[3, 1, 1]);
    }

    #[test]
    fn replay() {
        let steps = CompositionSequence::new(vec![2, 2, 1], 4).unwrap();
        assert_eq!(
            order_to_tree(&steps, 4).unwrap(),
            tree("(X w1 (X (X w2 w3) w4))")
        );
        let steps = CompositionSequence::new(vec![1], 2).unwrap();
        assert_eq!(order_to_tree(&steps, 2).unwrap(), tree("(X w1 w2)"));
        assert!(order_to_tree_over(&[5], &Token::placeholders(3)).is_err());
        assert!(order_to_tree_over(&[5, 1], &Token::placeholders(3)).is_err());
        assert!(CompositionSequence::new(vec![5, 1], 3).is_err());
    }

    #[test]
    fn distance_text_round_trip() {
        let v: DistanceVector = "3 1 2.5 -0.25".parse().unwrap();
        assert_eq!(v.values(), &[3., 1., 2.5, -0.25]);
        assert_eq!(v.to_string(), "3 1 2.5 -0.25");
        assert!("1 nan".parse::<DistanceVector>().is_err());
        assert!("1 x".parse::<DistanceVector>().is_err());
    }
}
