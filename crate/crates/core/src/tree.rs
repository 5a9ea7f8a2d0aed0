//! Constituency parse trees: bracketed notation, the compact node-level
//! linearization, template truncation, and root-to-leaf path enumeration.
//!
//! A tree is rooted, ordered, and labeled; leaves are parse nodes without
//! children (words are never tree nodes). The node-level linearization
//! pairs each node's label with its depth (root depth 1) in preorder. A
//! bracketed rendering spends three tokens per node (label plus two
//! parentheses), so the node-level form is exactly a third of its length.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid level sequence at position {position}: {message}")]
    InvalidLevels { position: usize, message: String },
}

/// Rooted ordered labeled tree of constituency nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParseTree {
    pub label: String,
    pub children: Vec<ParseTree>,
}

impl ParseTree {
    pub fn leaf(label: impl Into<String>) -> Self {
        ParseTree {
            label: label.into(),
            children: Vec::new(),
        }
    }

    pub fn node(label: impl Into<String>, children: Vec<ParseTree>) -> Self {
        ParseTree {
            label: label.into(),
            children,
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(ParseTree::node_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(ParseTree::depth)
            .max()
            .unwrap_or(0)
    }
}

/// A parse tree as paired node and level sequences (preorder).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearParse {
    pub nodes: Vec<String>,
    pub levels: Vec<u32>,
}

impl LinearParse {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// One index set per leaf: the root-to-leaf ancestor chain, as indices
/// into a [`LinearParse`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSet {
    pub paths: Vec<Vec<usize>>,
}

impl PathSet {
    /// Number of paths, i.e. number of leaves.
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }
}

/// Parse bracketed notation like `(S(NP(PRP))(VP(VBD)))`. Whitespace
/// between tokens is tolerated on input; the canonical rendering from
/// [`to_bracketed`] uses none.
pub fn parse_bracketed(text: &str) -> Result<ParseTree, TreeError> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    skip_ws(bytes, &mut pos);
    let tree = parse_node(bytes, &mut pos)?;
    skip_ws(bytes, &mut pos);
    if pos != bytes.len() {
        return Err(TreeError::Parse {
            offset: pos,
            message: "trailing input after closing bracket".into(),
        });
    }
    Ok(tree)
}

fn skip_ws(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
}

fn parse_node(bytes: &[u8], pos: &mut usize) -> Result<ParseTree, TreeError> {
    if *pos >= bytes.len() || bytes[*pos] != b'(' {
        return Err(TreeError::Parse {
            offset: *pos,
            message: "expected '('".into(),
        });
    }
    *pos += 1;
    skip_ws(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !matches!(bytes[*pos], b'(' | b')') && !bytes[*pos].is_ascii_whitespace()
    {
        *pos += 1;
    }
    if *pos == start {
        return Err(TreeError::Parse {
            offset: start,
            message: "empty label".into(),
        });
    }
    let label = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| TreeError::Parse {
            offset: start,
            message: "label is not valid UTF-8".into(),
        })?
        .to_string();
    let mut children = Vec::new();
    loop {
        skip_ws(bytes, pos);
        match bytes.get(*pos) {
            Some(b')') => {
                *pos += 1;
                return Ok(ParseTree { label, children });
            }
            Some(b'(') => children.push(parse_node(bytes, pos)?),
            Some(_) => {
                return Err(TreeError::Parse {
                    offset: *pos,
                    message: "expected '(' or ')'".into(),
                })
            }
            None => {
                return Err(TreeError::Parse {
                    offset: *pos,
                    message: "unbalanced brackets: unexpected end of input".into(),
                })
            }
        }
    }
}

/// Canonical bracketed rendering, no whitespace.
pub fn to_bracketed(tree: &ParseTree) -> String {
    let mut out = String::new();
    write_bracketed(tree, &mut out);
    out
}

fn write_bracketed(tree: &ParseTree, out: &mut String) {
    out.push('(');
    out.push_str(&tree.label);
    for child in &tree.children {
        write_bracketed(child, out);
    }
    out.push(')');
}

/// Preorder node-level linearization; the root has level 1.
pub fn linearize(tree: &ParseTree) -> LinearParse {
    let mut lp = LinearParse {
        nodes: Vec::with_capacity(tree.node_count()),
        levels: Vec::with_capacity(tree.node_count()),
    };
    fn walk(t: &ParseTree, level: u32, lp: &mut LinearParse) {
        lp.nodes.push(t.label.clone());
        lp.levels.push(level);
        for c in &t.children {
            walk(c, level + 1, lp);
        }
    }
    walk(tree, 1, &mut lp);
    lp
}

/// Rebuild the unique tree whose [`linearize`] equals `lp`. The parent of
/// node `i` is the nearest preceding node at level `levels[i] − 1`.
pub fn delinearize(lp: &LinearParse) -> Result<ParseTree, TreeError> {
    if lp.nodes.len() != lp.levels.len() {
        return Err(TreeError::InvalidLevels {
            position: 0,
            message: format!(
                "node and level sequences differ in length ({} vs {})",
                lp.nodes.len(),
                lp.levels.len()
            ),
        });
    }
    if let Err(position) = check_levels(&lp.levels) {
        let message = match position {
            0 if lp.levels.is_empty() => "sequence is empty".to_string(),
            0 => format!("first level must be 1, got {}", lp.levels[0]),
            _ if lp.levels[position] < 2 => {
                format!("only the root may sit at level {}", lp.levels[position])
            }
            _ => format!(
                "level may rise by at most 1 (got {} after {})",
                lp.levels[position],
                lp.levels[position - 1]
            ),
        };
        return Err(TreeError::InvalidLevels { position, message });
    }

    // stack of open nodes, one per level from 1 to current
    let mut stack: Vec<ParseTree> = vec![ParseTree::leaf(lp.nodes[0].clone())];
    for i in 1..lp.nodes.len() {
        let level = lp.levels[i] as usize;
        while stack.len() >= level {
            let done = stack.pop().expect("stack not empty");
            stack
                .last_mut()
                .expect("level 1 node never popped here")
                .children
                .push(done);
        }
        stack.push(ParseTree::leaf(lp.nodes[i].clone()));
    }
    while stack.len() > 1 {
        let done = stack.pop().expect("stack not empty");
        stack.last_mut().expect("root remains").children.push(done);
    }
    Ok(stack.pop().expect("root"))
}

fn check_levels(levels: &[u32]) -> Result<(), usize> {
    if levels.is_empty() || levels[0] != 1 {
        return Err(0);
    }
    for i in 1..levels.len() {
        // only the root sits at level 1; every later node is a child of
        // an earlier one, so levels stay >= 2 and rise by at most 1
        if levels[i] < 2 || levels[i] > levels[i - 1] + 1 {
            return Err(i);
        }
    }
    Ok(())
}

/// True iff `levels` is the level sequence of some tree: non-empty,
/// starts at 1, later entries in `2..=previous+1`.
pub fn validate_levels(levels: &[u32]) -> bool {
    check_levels(levels).is_ok()
}

/// Drop all nodes deeper than `max_level` (root is level 1).
pub fn truncate(tree: &ParseTree, max_level: u32) -> ParseTree {
    assert!(max_level >= 1, "truncate: max_level must be at least 1");
    fn walk(t: &ParseTree, level: u32, max: u32) -> ParseTree {
        ParseTree {
            label: t.label.clone(),
            children: if level < max {
                t.children.iter().map(|c| walk(c, level + 1, max)).collect()
            } else {
                Vec::new()
            },
        }
    }
    walk(tree, 1, max_level)
}

/// One path per leaf, each the full ancestor chain root→leaf, in leaf
/// (preorder) order.
pub fn enumerate_paths(lp: &LinearParse) -> Result<PathSet, TreeError> {
    paths_from_levels(&lp.levels)
}

/// [`enumerate_paths`] on the level sequence alone; node labels play no
/// part in the tree shape.
pub fn paths_from_levels(levels: &[u32]) -> Result<PathSet, TreeError> {
    if !validate_levels(levels) {
        return Err(TreeError::InvalidLevels {
            position: 0,
            message: "not a valid preorder level sequence".into(),
        });
    }
    let n = levels.len();
    let mut paths = Vec::new();
    // chain[d] = index of the currently open node at level d+1
    let mut chain: Vec<usize> = Vec::new();
    for i in 0..n {
        let level = levels[i] as usize;
        chain.truncate(level - 1);
        chain.push(i);
        let is_leaf = match levels.get(i + 1) {
            Some(&next) => next <= levels[i],
            None => true,
        };
        if is_leaf {
            paths.push(chain.clone());
        }
    }
    Ok(PathSet { paths })
}

/// Boolean matrix `[n_p × n]`: entry `(i, j)` is true iff node `j` lies
/// on path `i`. `n` may exceed the parse length (padding columns stay
/// false).
pub fn path_mask_matrix(ps: &PathSet, n: usize) -> Vec<Vec<bool>> {
    let mut rows = Vec::with_capacity(ps.paths.len());
    for path in &ps.paths {
        let mut row = vec![false; n];
        for &j in path {
            assert!(j < n, "path index {j} out of bounds for width {n}");
            row[j] = true;
        }
        rows.push(row);
    }
    rows
}

/// Number of bracketed-format tokens for a tree: one label and two
/// parentheses per node.
pub fn bracketed_token_count(tree: &ParseTree) -> usize {
    3 * tree.node_count()
}
