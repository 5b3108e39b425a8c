//! Indented ASCII drawings of trees.

use crate::trees::LabeledTree;

/// Draws `tree` one node per line, children below their parent:
///
/// ```text
/// X
/// ├── w1
/// └── X
///     ├── w2
///     └── w3
/// ```
pub fn render_tree(tree: &LabeledTree) -> String {
    fn walk(t: &LabeledTree, prefix: &str, out: &mut String) {
        if let LabeledTree::Node { children, .. } = t {
            for (i, c) in children.iter().enumerate() {
                let last = i + 1 == children.len();
                out.push_str(prefix);
                out.push_str(if last { "└── " } else { "├── " });
                out.push_str(&node_text(c));
                out.push('\n');
                walk(
                    c,
                    &format!("{prefix}{}", if last { "    " } else { "│   " }),
                    out,
                );
            }
        }
    }
    let mut out = node_text(tree);
    out.push('\n');
    walk(tree, "", &mut out);
    out
}

fn node_text(t: &LabeledTree) -> String {
    match t {
        LabeledTree::Leaf(tok) => tok.surface.clone(),
        LabeledTree::Node { label, .. } => label.clone(),
    }
}
