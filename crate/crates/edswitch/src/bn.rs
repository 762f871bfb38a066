//! Directed acyclic graphs and d-separation.
//!
//! Two independent deciders are provided: a reachability traversal over the DAG
//! (the path-blocking criterion) and separation in the moralized ancestral graph.
//! An explicit simple-path enumeration is kept for small graphs as a cross-check.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Node budget for [`d_separated_by_paths`].
pub const PATH_ENUMERATION_MAX_NODES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Active-trail reachability on the DAG.
    Pathwise,
    /// Connectivity in the moralized ancestral graph with the conditioning set removed.
    Moralize,
}

/// Directed acyclic graph over named nodes.
#[derive(Debug, Clone)]
pub struct Dag {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl Dag {
    /// Builds a DAG from named nodes and `(parent, child)` edges; rejects cycles.
    pub fn new<S: AsRef<str>>(nodes: &[S], edges: &[(S, S)]) -> Result<Self> {
        let mut dag = Dag { names: Vec::new(), index: HashMap::new(), parents: Vec::new(), children: Vec::new() };
        for n in nodes {
            dag.add_node(n.as_ref());
        }
        for (a, b) in edges {
            let (a, b) = (dag.add_node(a.as_ref()), dag.add_node(b.as_ref()));
            if a == b {
                return Err(Error::Graph(format!("self loop on {}", dag.names[a])));
            }
            if !dag.children[a].contains(&b) {
                dag.children[a].push(b);
                dag.parents[b].push(a);
            }
        }
        dag.topological_order()?;
        Ok(dag)
    }

    /// Builds from index edges over nodes `0..n`, named by their index.
    pub fn from_indices(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let names: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let named: Vec<(String, String)> = edges.iter().map(|&(a, b)| (a.to_string(), b.to_string())).collect();
        Self::new(&names, &named)
    }

    /// Parses one edge per line as `a -> b` or `a b`; `#` starts a comment.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut nodes: Vec<String> = Vec::new();
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|p| !p.is_empty() && *p != "->").collect();
            match parts.as_slice() {
                [single] => nodes.push(single.to_string()),
                [a, b] => edges.push((a.to_string(), b.to_string())),
                _ => return Err(Error::Graph(format!("line {}: expected `a -> b`", lineno + 1))),
            }
        }
        Self::new(&nodes, &edges)
    }

    fn add_node(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
        i
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn node(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::Graph(format!("unknown node {name}")))
    }

    /// Resolves a list of names to node indices.
    pub fn nodes<S: AsRef<str>>(&self, names: &[S]) -> Result<BTreeSet<usize>> {
        names.iter().map(|n| self.node(n.as_ref())).collect()
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    /// Kahn's algorithm; fails on a directed cycle.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &c in &self.children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if order.len() != self.len() {
            return Err(Error::Graph("graph contains a directed cycle".into()));
        }
        Ok(order)
    }

    /// `set` together with all of its ancestors.
    pub fn ancestral_closure(&self, set: &BTreeSet<usize>) -> BTreeSet<usize> {
        let mut out = set.clone();
        let mut stack: Vec<usize> = set.iter().copied().collect();
        while let Some(i) = stack.pop() {
            for &p in &self.parents[i] {
                if out.insert(p) {
                    stack.push(p);
                }
            }
        }
        out
    }

    fn descendants(&self, i: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![i];
        while let Some(n) = stack.pop() {
            for &c in &self.children[n] {
                if out.insert(c) {
                    stack.push(c);
                }
            }
        }
        out
    }

    /// Random DAG on `n` nodes: edges follow a random order, each present with probability `p`.
    pub fn random<R: Rng>(n: usize, p: f64, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.gen::<f64>() < p {
                    edges.push((order[a], order[b]));
                }
            }
        }
        Self::from_indices(n, &edges).expect("edges follow a topological order")
    }
}

fn check_sets(g: &Dag, x: &BTreeSet<usize>, y: &BTreeSet<usize>, z: &BTreeSet<usize>) -> Result<()> {
    if x.iter().chain(y).chain(z).any(|&i| i >= g.len()) {
        return Err(Error::Graph("node index out of range".into()));
    }
    if !x.is_disjoint(y) || !x.is_disjoint(z) || !y.is_disjoint(z) {
        return Err(Error::InvalidParameter("X, Y and Z must be disjoint".into()));
    }
    Ok(())
}

/// True when `x` and `y` are d-separated by `z` in `g`.
pub fn d_separated(
    g: &Dag,
    x: &BTreeSet<usize>,
    y: &BTreeSet<usize>,
    z: &BTreeSet<usize>,
    method: Method,
) -> Result<bool> {
    check_sets(g, x, y, z)?;
    Ok(match method {
        Method::Pathwise => reachable(g, x, z).is_disjoint(y),
        Method::Moralize => moral_separated(g, x, y, z),
    })
}

/// Convenience wrapper over node names.
pub fn d_separated_named<S: AsRef<str>>(g: &Dag, x: &[S], y: &[S], z: &[S], method: Method) -> Result<bool> {
    d_separated(g, &g.nodes(x)?, &g.nodes(y)?, &g.nodes(z)?, method)
}

/// Nodes reachable from `x` along active trails given `z`.
fn reachable(g: &Dag, x: &BTreeSet<usize>, z: &BTreeSet<usize>) -> BTreeSet<usize> {
    let anc_z = g.ancestral_closure(z);
    // (node, arrived_from_child): arriving "up" means travelling against an edge.
    let mut visited = vec![[false; 2]; g.len()];
    let mut queue: VecDeque<(usize, bool)> = x.iter().map(|&i| (i, true)).collect();
    let mut out = BTreeSet::new();
    while let Some((n, up)) = queue.pop_front() {
        let slot = usize::from(up);
        if visited[n][slot] {
            continue;
        }
        visited[n][slot] = true;
        if !z.contains(&n) {
            out.insert(n);
        }
        if up {
            if !z.contains(&n) {
                queue.extend(g.parents(n).iter().map(|&p| (p, true)));
                queue.extend(g.children(n).iter().map(|&c| (c, false)));
            }
        } else {
            if !z.contains(&n) {
                queue.extend(g.children(n).iter().map(|&c| (c, false)));
            }
            if anc_z.contains(&n) {
                queue.extend(g.parents(n).iter().map(|&p| (p, true)));
            }
        }
    }
    out
}

fn moral_separated(g: &Dag, x: &BTreeSet<usize>, y: &BTreeSet<usize>, z: &BTreeSet<usize>) -> bool {
    let all: BTreeSet<usize> = x.iter().chain(y).chain(z).copied().collect();
    let keep = g.ancestral_closure(&all);
    let mut adj = vec![BTreeSet::new(); g.len()];
    for &n in &keep {
        let ps = g.parents(n);
        for &p in ps {
            adj[n].insert(p);
            adj[p].insert(n);
        }
        for (i, &a) in ps.iter().enumerate() {
            for &b in &ps[i + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
    }
    let mut seen = vec![false; g.len()];
    let mut stack: Vec<usize> = x.iter().copied().collect();
    for &i in x {
        seen[i] = true;
    }
    while let Some(n) = stack.pop() {
        if y.contains(&n) {
            return false;
        }
        for &m in &adj[n] {
            if !seen[m] && !z.contains(&m) && keep.contains(&m) {
                seen[m] = true;
                stack.push(m);
            }
        }
    }
    true
}

/// Explicit enumeration of every simple undirected path, each checked for blocking.
pub fn d_separated_by_paths(g: &Dag, x: &BTreeSet<usize>, y: &BTreeSet<usize>, z: &BTreeSet<usize>) -> Result<bool> {
    check_sets(g, x, y, z)?;
    if g.len() > PATH_ENUMERATION_MAX_NODES {
        return Err(Error::Budget(format!("path enumeration limited to {PATH_ENUMERATION_MAX_NODES} nodes")));
    }
    let desc: Vec<BTreeSet<usize>> = (0..g.len()).map(|i| g.descendants(i)).collect();
    let is_edge = |a: usize, b: usize| g.children(a).contains(&b);
    let blocked = |path: &[usize]| {
        path.windows(3).any(|w| {
            let (a, m, b) = (w[0], w[1], w[2]);
            let collider = is_edge(a, m) && is_edge(b, m);
            if collider {
                !z.contains(&m) && desc[m].is_disjoint(z)
            } else {
                z.contains(&m)
            }
        })
    };
    let neighbours = |n: usize| g.parents(n).iter().chain(g.children(n)).copied().collect::<Vec<_>>();
    for &start in x {
        let mut path = vec![start];
        let mut on_path = vec![false; g.len()];
        on_path[start] = true;
        // Depth-first over simple paths, stack of neighbour iterators.
        let mut stack = vec![neighbours(start).into_iter()];
        while let Some(iter) = stack.last_mut() {
            match iter.next() {
                Some(n) if !on_path[n] => {
                    path.push(n);
                    if y.contains(&n) {
                        if !blocked(&path) {
                            return Ok(false);
                        }
                        path.pop();
                        continue;
                    }
                    on_path[n] = true;
                    stack.push(neighbours(n).into_iter());
                }
                Some(_) => {}
                None => {
                    stack.pop();
                    if let Some(n) = path.pop() {
                        on_path[n] = false;
                    }
                }
            }
        }
    }
    Ok(true)
}

/// Four-node graph with `x1 -> x3`, `x2 -> x3`, `x3 -> x4`, `x2 -> x4`.
pub fn collider_example() -> Dag {
    Dag::new(
        &["x1", "x2", "x3", "x4"],
        &[("x1", "x3"), ("x2", "x3"), ("x3", "x4"), ("x2", "x4")],
    )
    .expect("acyclic")
}

/// First-order-in-observations switching chain on `t = 1..=len`:
/// `s{t-1} -> s{t}`, `s{t} -> v{t}`, `v{t-1} -> v{t}`.
pub fn switching_ar_graph(len: usize) -> Dag {
    let mut edges = Vec::new();
    for t in 1..=len {
        edges.push((format!("s{t}"), format!("v{t}")));
        if t > 1 {
            edges.push((format!("s{}", t - 1), format!("s{t}")));
            edges.push((format!("v{}", t - 1), format!("v{t}")));
        }
    }
    let nodes: Vec<String> = Vec::new();
    Dag::new(&nodes, &edges).expect("acyclic")
}

/// Switching state-space model with decreasing counts, `t = 1..=len`.
///
/// Edges per step: `c{t-1} -> c{t}`, `c{t-1} -> s{t}`, `s{t-1} -> s{t}`, `s{t} -> c{t}`,
/// `s{t} -> h{t}`, `h{t-1} -> h{t}`, `h{t} -> v{t}`, `s{t} -> v{t}`. With `reset` set,
/// `c{t-1} -> h{t}` is added as well.
pub fn switching_lgssm_dec_graph(len: usize, reset: bool) -> Dag {
    let mut edges = Vec::new();
    for t in 1..=len {
        edges.push((format!("s{t}"), format!("c{t}")));
        edges.push((format!("s{t}"), format!("h{t}")));
        edges.push((format!("h{t}"), format!("v{t}")));
        edges.push((format!("s{t}"), format!("v{t}")));
        if t > 1 {
            let p = t - 1;
            edges.push((format!("c{p}"), format!("c{t}")));
            edges.push((format!("c{p}"), format!("s{t}")));
            edges.push((format!("s{p}"), format!("s{t}")));
            edges.push((format!("h{p}"), format!("h{t}")));
            if reset {
                edges.push((format!("c{p}"), format!("h{t}")));
            }
        }
    }
    let nodes: Vec<String> = Vec::new();
    Dag::new(&nodes, &edges).expect("acyclic")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::substream;

    fn both(g: &Dag, x: &[&str], y: &[&str], z: &[&str]) -> bool {
        let a = d_separated_named(g, x, y, z, Method::Pathwise).unwrap();
        let b = d_separated_named(g, x, y, z, Method::Moralize).unwrap();
        let c = d_separated_by_paths(g, &g.nodes(x).unwrap(), &g.nodes(y).unwrap(), &g.nodes(z).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        a
    }

    #[test]
    fn collider_cases() {
        let g = collider_example();
        assert!(both(&g, &["x1"], &["x2"], &[]));
        assert!(!both(&g, &["x1"], &["x2"], &["x4"]));
        assert!(!both(&g, &["x1"], &["x2"], &["x3"]));
    }

    #[test]
    fn disconnected_nodes() {
        let g = Dag::new(&["a", "b", "c"], &[("a", "c")]).unwrap();
        assert!(both(&g, &["a"], &["b"], &[]));
        assert!(both(&g, &["a"], &["b"], &["c"]));
    }

    #[test]
    fn rejects_cycles_and_overlap() {
        assert!(Dag::new(&["a", "b"], &[("a", "b"), ("b", "a")]).is_err());
        let g = collider_example();
        assert!(d_separated_named(&g, &["x1"], &["x1"], &[], Method::Pathwise).is_err());
    }

    #[test]
    fn parses_edge_lists() {
        let g = Dag::parse_edge_list("# demo\nx1 -> x3\nx2 x3\nx5\n").unwrap();
        assert_eq!(g.len(), 4);
        assert!(both(&g, &["x1"], &["x5"], &[]));
    }

    #[test]
    fn methods_agree_on_random_graphs() {
        let mut rng = substream(11, 0);
        for _ in 0..300 {
            let n = rng.gen_range(2..=8);
            let g = Dag::random(n, rng.gen_range(0.1..0.6), &mut rng);
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut rng);
            let nx = rng.gen_range(1..n);
            let ny = rng.gen_range(1..=n - nx);
            let nz = rng.gen_range(0..=n - nx - ny);
            let x: BTreeSet<usize> = ids[..nx].iter().copied().collect();
            let y: BTreeSet<usize> = ids[nx..nx + ny].iter().copied().collect();
            let z: BTreeSet<usize> = ids[nx + ny..nx + ny + nz].iter().copied().collect();
            let a = d_separated(&g, &x, &y, &z, Method::Pathwise).unwrap();
            assert_eq!(a, d_separated(&g, &x, &y, &z, Method::Moralize).unwrap());
            assert_eq!(a, d_separated_by_paths(&g, &x, &y, &z).unwrap());
        }
    }
}
