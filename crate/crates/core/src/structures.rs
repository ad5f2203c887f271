//! Local structures: connected fragments of a program's syntax tree extended
//! with edges between consecutive siblings.
//!
//! A node set is a valid local structure when it is connected in the
//! sibling-augmented graph and a sibling edge joins two of its nodes exactly
//! when both nodes are leaves of the fragment. Every such fragment is a
//! downward path, a downward path ending in a pair of consecutive sibling
//! leaves, or a bare consecutive sibling pair, which is what
//! [`enumerate_local_structures`] walks directly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::program::{AstNode, ProgramAst, ROOT_SYMBOL};

pub const PARENT_ARROW: &str = " -> ";
pub const SIBLING_ARROW: &str = " <-> ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub symbol: String,
    pub depth: usize,
    pub parent: Option<usize>,
    /// Children in argument order.
    pub children: Vec<usize>,
}

/// Syntax tree plus sibling edges. Node 0 is the root marker; nodes are
/// numbered in pre-order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureGraph {
    nodes: Vec<GraphNode>,
    sibling_edges: Vec<(usize, usize)>,
}

impl StructureGraph {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &GraphNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tree_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().enumerate().flat_map(|(p, n)| n.children.iter().map(move |&c| (p, c)))
    }

    /// Consecutive-sibling pairs `(left, right)` in argument order.
    pub fn sibling_edges(&self) -> &[(usize, usize)] {
        &self.sibling_edges
    }

    pub fn are_siblings(&self, a: usize, b: usize) -> bool {
        self.sibling_edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
    }
}

pub fn build_structure_graph(ast: &ProgramAst) -> StructureGraph {
    fn visit(node: &AstNode, depth: usize, parent: Option<usize>, graph: &mut StructureGraph) -> usize {
        let id = graph.nodes.len();
        graph.nodes.push(GraphNode {
            symbol: node.symbol.clone(),
            depth,
            parent,
            children: Vec::with_capacity(node.children.len()),
        });
        let mut prev = None;
        for child in &node.children {
            let cid = visit(child, depth + 1, Some(id), graph);
            graph.nodes[id].children.push(cid);
            if let Some(p) = prev {
                graph.sibling_edges.push((p, cid));
            }
            prev = Some(cid);
        }
        id
    }

    let mut graph = StructureGraph { nodes: Vec::new(), sibling_edges: Vec::new() };
    visit(ast.root(), 0, None, &mut graph);
    graph
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocalStructure {
    pub canonical: String,
    pub size: usize,
    /// Node symbols in root-to-leaf order, sibling pair left to right.
    pub symbols: Vec<String>,
}

impl LocalStructure {
    fn from_parts(path: &[&str], fork: Option<(&str, &str)>) -> Self {
        let mut canonical = path.join(PARENT_ARROW);
        let mut symbols: Vec<String> = path.iter().map(|s| s.to_string()).collect();
        if let Some((left, right)) = fork {
            if !path.is_empty() {
                canonical.push_str(PARENT_ARROW);
            }
            canonical.push_str(left);
            canonical.push_str(SIBLING_ARROW);
            canonical.push_str(right);
            symbols.push(left.to_string());
            symbols.push(right.to_string());
        }
        Self { size: symbols.len(), canonical, symbols }
    }

    pub fn contains_root(&self) -> bool {
        self.symbols.first().is_some_and(|s| s == ROOT_SYMBOL)
    }
}

/// Upper bound on local-structure size. `None` means unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaxSize(pub Option<usize>);

impl MaxSize {
    pub const UNBOUNDED: MaxSize = MaxSize(None);

    pub fn at_most(n: usize) -> Self {
        MaxSize(Some(n))
    }

    pub fn admits(self, size: usize) -> bool {
        self.0.is_none_or(|m| size <= m)
    }
}

/// Every occurrence of every valid local structure up to `max_size`,
/// repeated once per matching node set.
pub fn local_structure_occurrences(graph: &StructureGraph, max_size: MaxSize) -> Vec<LocalStructure> {
    let mut out = Vec::new();
    let mut path: Vec<&str> = Vec::new();

    fn walk<'g>(
        graph: &'g StructureGraph,
        node: usize,
        path: &mut Vec<&'g str>,
        max_size: MaxSize,
        out: &mut Vec<LocalStructure>,
    ) {
        path.push(&graph.nodes[node].symbol);
        let len = path.len();
        if !max_size.admits(len) {
            path.pop();
            return;
        }
        if !(len == 1 && node == 0) {
            out.push(LocalStructure::from_parts(path, None));
        }
        let children = &graph.nodes[node].children;
        if max_size.admits(len + 2) {
            for pair in children.windows(2) {
                out.push(LocalStructure::from_parts(
                    path,
                    Some((&graph.nodes[pair[0]].symbol, &graph.nodes[pair[1]].symbol)),
                ));
            }
        }
        for &child in children {
            walk(graph, child, path, max_size, out);
        }
        path.pop();
    }

    for top in 0..graph.nodes.len() {
        walk(graph, top, &mut path, max_size, &mut out);
    }
    if max_size.admits(2) {
        for &(a, b) in &graph.sibling_edges {
            out.push(LocalStructure::from_parts(&[], Some((&graph.nodes[a].symbol, &graph.nodes[b].symbol))));
        }
    }
    out
}

pub fn enumerate_local_structures(graph: &StructureGraph, max_size: MaxSize) -> BTreeSet<LocalStructure> {
    local_structure_occurrences(graph, max_size).into_iter().collect()
}

/// Occurrence counts keyed by canonical form.
pub fn local_structure_counts(graph: &StructureGraph, max_size: MaxSize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for ls in local_structure_occurrences(graph, max_size) {
        *counts.entry(ls.canonical).or_insert(0) += 1;
    }
    counts
}

/// Canonical forms of all local structures of a program.
pub fn program_structures(ast: &ProgramAst, max_size: MaxSize) -> BTreeSet<String> {
    local_structure_occurrences(&build_structure_graph(ast), max_size).into_iter().map(|ls| ls.canonical).collect()
}

pub fn canonical_form(ls: &LocalStructure) -> &str {
    &ls.canonical
}

/// Size of a local structure recovered from its canonical form.
pub fn canonical_size(canonical: &str) -> usize {
    canonical.matches(PARENT_ARROW).count() + canonical.matches(SIBLING_ARROW).count() + 1
}

/// Serializes an arbitrary node set of `graph`, or `None` if the node set is
/// not shaped like a local structure (path with an optional sibling-leaf
/// fork, or a bare sibling pair). Does not check connectivity or the sibling
/// condition; callers validate first.
pub fn canonicalize_fragment(graph: &StructureGraph, fragment: &BTreeSet<usize>) -> Option<LocalStructure> {
    let in_fragment_children =
        |n: usize| -> Vec<usize> { graph.nodes[n].children.iter().copied().filter(|c| fragment.contains(c)).collect() };
    let tops: Vec<usize> =
        fragment.iter().copied().filter(|&n| graph.nodes[n].parent.is_none_or(|p| !fragment.contains(&p))).collect();
    match tops.as_slice() {
        [a, b] => {
            let (left, right) = if a < b { (*a, *b) } else { (*b, *a) };
            if fragment.len() == 2 && graph.sibling_edges.contains(&(left, right)) {
                Some(LocalStructure::from_parts(&[], Some((&graph.nodes[left].symbol, &graph.nodes[right].symbol))))
            } else {
                None
            }
        }
        [top] => {
            let mut path = vec![graph.nodes[*top].symbol.as_str()];
            let mut current = *top;
            loop {
                let kids = in_fragment_children(current);
                match kids.as_slice() {
                    [] => return Some(LocalStructure::from_parts(&path, None)),
                    [only] => {
                        path.push(&graph.nodes[*only].symbol);
                        current = *only;
                    }
                    [l, r] if in_fragment_children(*l).is_empty() && in_fragment_children(*r).is_empty() => {
                        return Some(LocalStructure::from_parts(
                            &path,
                            Some((&graph.nodes[*l].symbol, &graph.nodes[*r].symbol)),
                        ));
                    }
                    _ => return None,
                }
            }
        }
        _ => None,
    }
}

/// Union of the local-structure sets of several candidate programs.
pub fn ls_union(beams: &[ProgramAst], max_size: MaxSize) -> Result<BTreeSet<String>> {
    if beams.is_empty() {
        return Err(Error::EmptyInput("beam list"));
    }
    Ok(beams.iter().flat_map(|b| program_structures(b, max_size)).collect())
}
