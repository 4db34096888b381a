//! Road-network graphs and learned weighted adjacency.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Undirected sensor graph with a binary, symmetric, zero-diagonal adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    adjacency: Vec<bool>,
    weights: Option<Vec<f64>>,
    node_ids: Option<Vec<String>>,
}

impl Graph {
    /// Builds a graph from undirected edges. Self-loops are dropped.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Config("graph needs at least one node".into()));
        }
        let mut adjacency = vec![false; n_nodes * n_nodes];
        for &(a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::Contract(format!(
                    "edge ({a},{b}) outside {n_nodes} nodes"
                )));
            }
            if a != b {
                adjacency[a * n_nodes + b] = true;
                adjacency[b * n_nodes + a] = true;
            }
        }
        Ok(Graph {
            n_nodes,
            adjacency,
            weights: None,
            node_ids: None,
        })
    }

    /// Graph with every distinct pair connected.
    pub fn complete(n_nodes: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n_nodes)
            .flat_map(|i| (i + 1..n_nodes).map(move |j| (i, j)))
            .collect();
        Self::from_edges(n_nodes, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n_nodes + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_nodes).filter(move |&j| self.has_edge(i, j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Undirected edges with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n_nodes)
            .flat_map(|i| (i + 1..self.n_nodes).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Edge costs from the ingested file, `0` where no edge was listed.
    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn node_ids(&self) -> Option<&[String]> {
        self.node_ids.as_deref()
    }

    /// Binary adjacency as an `[N,N]` tensor.
    pub fn adjacency<T: Real>(&self) -> Tensor<T> {
        let data = self
            .adjacency
            .iter()
            .map(|&e| if e { T::one() } else { T::zero() })
            .collect();
        Tensor::new([self.n_nodes, self.n_nodes], data).expect("square")
    }

    /// Adjacency with each row divided by its degree; isolated rows stay zero.
    pub fn row_normalized<T: Real>(&self) -> Tensor<T> {
        let n = self.n_nodes;
        let mut t = self.adjacency::<T>();
        for i in 0..n {
            let deg = self.degree(i);
            if deg > 0 {
                let inv = T::one() / T::lit(deg as f64);
                for v in &mut t.data_mut()[i * n..(i + 1) * n] {
                    *v *= inv;
                }
            }
        }
        t
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.n_nodes;
        let mut adjacency = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                adjacency[i * n + j] = self.has_edge(perm[i], perm[j]);
            }
        }
        Graph {
            n_nodes: n,
            adjacency,
            weights: None,
            node_ids: None,
        }
    }

    /// Writes `index,id` rows for graphs ingested with external sensor ids.
    pub fn write_id_map(&self, path: &Path) -> Result<()> {
        let ids = self
            .node_ids
            .as_ref()
            .ok_or_else(|| Error::State("graph has no external node ids".into()))?;
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut body = String::from("index,id\n");
        for (i, id) in ids.iter().enumerate() {
            body.push_str(&format!("{i},{id}\n"));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Writes the graph as a `from,to,cost` edge list.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut body = String::from("from,to,cost\n");
        for (i, j) in self.edges() {
            let cost = self
                .weights
                .as_ref()
                .map_or(1.0, |w| w[i * self.n_nodes + j]);
            body.push_str(&format!("{i},{j},{cost}\n"));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

struct EdgeRecord {
    line: usize,
    from: String,
    to: String,
    cost: f64,
}

fn read_edge_records(path: &Path) -> Result<Vec<EdgeRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if idx == 0 && fields[0].parse::<f64>().is_err() {
            continue; // header
        }
        if fields.len() < 2 {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected `from,to,cost`, got `{trimmed}`"),
            });
        }
        let cost = match fields.get(2) {
            Some(c) if !c.is_empty() => c.parse::<f64>().map_err(|_| Error::Ingest {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("non-numeric cost `{c}`"),
            })?,
            _ => 1.0,
        };
        out.push(EdgeRecord {
            line: lineno,
            from: fields[0].to_string(),
            to: fields[1].to_string(),
            cost,
        });
    }
    Ok(out)
}

fn build_from_records(
    path: &Path,
    n_nodes: usize,
    records: &[EdgeRecord],
    index_of: impl Fn(&str) -> Option<usize>,
) -> Result<Graph> {
    let mut graph = Graph::from_edges(n_nodes, &[])?;
    let mut weights = vec![0.0; n_nodes * n_nodes];
    for r in records {
        let resolve = |field: &str| {
            index_of(field)
                .filter(|&i| i < n_nodes)
                .ok_or_else(|| Error::Ingest {
                    path: path.to_path_buf(),
                    line: r.line,
                    msg: format!("node `{field}` outside [0, {n_nodes})"),
                })
        };
        let (a, b) = (resolve(&r.from)?, resolve(&r.to)?);
        if a == b {
            warn!(
                "{}:{}: ignoring self-loop on node {a}",
                path.display(),
                r.line
            );
            continue;
        }
        graph.adjacency[a * n_nodes + b] = true;
        graph.adjacency[b * n_nodes + a] = true;
        weights[a * n_nodes + b] = r.cost;
        weights[b * n_nodes + a] = r.cost;
    }
    graph.weights = Some(weights);
    Ok(graph)
}

/// Reads a `from,to,cost` edge list whose endpoints are node indices in
/// `[0, n_nodes)`. A header line is recognised by a non-numeric first field.
pub fn load_edge_list(path: &Path, n_nodes: usize) -> Result<Graph> {
    let records = read_edge_records(path)?;
    build_from_records(path, n_nodes, &records, |s| s.parse::<usize>().ok())
}

/// Reads an edge list whose endpoints are external sensor ids.
///
/// With `ids`, node `i` is the sensor `ids[i]` (the column order of the flow
/// file). Without it, the distinct ids are sorted (numerically when they all
/// parse as integers) and numbered in that order.
pub fn load_edge_list_with_ids(path: &Path, ids: Option<&[String]>) -> Result<Graph> {
    let records = read_edge_records(path)?;
    let ids: Vec<String> = match ids {
        Some(ids) => ids.to_vec(),
        None => {
            let mut seen: Vec<String> = records
                .iter()
                .flat_map(|r| [r.from.clone(), r.to.clone()])
                .collect();
            seen.sort_by(|a, b| match (a.parse::<u64>(), b.parse::<u64>()) {
                (Ok(x), Ok(y)) => x.cmp(&y),
                _ => a.cmp(b),
            });
            seen.dedup();
            seen
        }
    };
    let lookup: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut graph = build_from_records(path, ids.len(), &records, |s| lookup.get(s).copied())?;
    graph.node_ids = Some(ids);
    Ok(graph)
}

/// Reads one sensor id per line (blank lines skipped).
pub fn load_node_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Learnable `N x d` node embedding dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbedding<T> {
    matrix: Tensor<T>,
}

impl<T: Real> NodeEmbedding<T> {
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        if matrix.ndim() != 2 || matrix.shape()[1] == 0 {
            return Err(Error::Contract(format!(
                "node embedding must be N x d with d >= 1, got {:?}",
                matrix.shape()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::Contract(
                "node embedding has non-finite entries".into(),
            ));
        }
        Ok(NodeEmbedding { matrix })
    }

    /// I.i.d. normal entries with mean 0 and standard deviation `std`.
    pub fn random(n_nodes: usize, dim: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n_nodes * dim)
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Self::new(Tensor::new([n_nodes, dim], data)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.matrix
    }
}

/// How the learned similarity matrix is combined with the predefined adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyCombine {
    /// Elementwise product: the graph masks the learned weights.
    #[default]
    Mask,
    /// Matrix product with the adjacency.
    Matmul,
}

/// `softmax(relu(E·Eᵀ))` combined with `mask`; `mask = None` keeps the
/// learned matrix as is.
///
/// `embedding` is `[N,d]`, `mask` an `[N,N]` adjacency (usually a constant).
pub fn learned_adjacency<T: Real>(
    tape: &mut Tape<T>,
    embedding: Var,
    mask: Option<Var>,
    combine: AdjacencyCombine,
) -> Result<Var> {
    let n = tape.shape(embedding)[0];
    if let Some(m) = mask {
        if tape.shape(m) != [n, n] {
            return Err(Error::dim(
                "learned_adjacency",
                tape.shape(embedding),
                tape.shape(m),
            ));
        }
    }
    let sim = tape.batch_matmul(embedding, embedding, true)?;
    let sim = tape.relu(sim);
    let learned = tape.softmax_rows(sim)?;
    match (mask, combine) {
        (None, _) => Ok(learned),
        (Some(m), AdjacencyCombine::Mask) => tape.mul(learned, m),
        (Some(m), AdjacencyCombine::Matmul) => tape.matmul(learned, m),
    }
}

/// `I_N + adj`.
pub fn augmented_operator<T: Real>(tape: &mut Tape<T>, adj: Var) -> Result<Var> {
    let s = tape.shape(adj);
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("augmented_operator", s, &[s[0], s[0]]));
    }
    let eye = tape.constant(Tensor::eye(s[0]));
    tape.add(eye, adj)
}

/// Evaluates [`learned_adjacency`] on plain tensors.
pub fn learned_adjacency_value<T: Real>(
    embedding: &NodeEmbedding<T>,
    graph: &Graph,
    combine: AdjacencyCombine,
) -> Result<Tensor<T>> {
    if embedding.tensor().shape()[0] != graph.n_nodes() {
        return Err(Error::dim(
            "learned_adjacency",
            embedding.tensor().shape(),
            &[graph.n_nodes(), graph.n_nodes()],
        ));
    }
    let mut tape = Tape::new();
    let e = tape.constant(embedding.tensor().clone());
    let a = tape.constant(graph.adjacency());
    let out = learned_adjacency(&mut tape, e, Some(a), combine)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_edge_is_symmetric() {
        let f = write("from,to,cost\n0,1,3.5\n");
        let g = load_edge_list(f.path(), 2).unwrap();
        assert_eq!(g.adjacency::<f64>().data(), &[0., 1., 1., 0.]);
        assert_eq!(g.weights().unwrap()[1], 3.5);
    }

    #[test]
    fn empty_file_gives_zero_matrix() {
        let f = write("");
        let g = load_edge_list(f.path(), 3).unwrap();
        assert!(g.adjacency::<f32>().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_index_reports_line() {
        let f = write("from,to,cost\n0,1,1\n1,5,2\n");
        match load_edge_list(f.path(), 3) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn self_loops_are_ignored() {
        let f = write("0,0,1\n0,1,1\n");
        let g = load_edge_list(f.path(), 2).unwrap();
        assert!(!g.has_edge(0, 0));
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn external_ids_are_remapped() {
        let f = write("from,to,cost\n317842,318450,0.5\n318450,400000,1.0\n");
        let g = load_edge_list_with_ids(f.path(), None).unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.node_ids().unwrap(), ["317842", "318450", "400000"]);
        assert!(g.has_edge(0, 1) && g.has_edge(1, 2) && !g.has_edge(0, 2));
        let out = tempfile::NamedTempFile::new().unwrap();
        g.write_id_map(out.path()).unwrap();
        let text = std::fs::read_to_string(out.path()).unwrap();
        assert_eq!(text, "index,id\n0,317842\n1,318450\n2,400000\n");
    }

    #[test]
    fn pems08_edge_file_if_present() {
        // PEMS08_EDGES points at the public distance file when available.
        let Ok(path) = std::env::var("PEMS08_EDGES") else {
            return;
        };
        let g = load_edge_list(Path::new(&path), 170).unwrap();
        assert_eq!(g.n_nodes(), 170);
        assert_eq!(g.edge_count(), 295);
    }

    #[test]
    fn zero_embedding_gives_uniform_rows_times_mask() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let e = NodeEmbedding::new(Tensor::<f64>::zeros([4, 2])).unwrap();
        let a = learned_adjacency_value(&e, &g, AdjacencyCombine::Mask).unwrap();
        let expect = g.adjacency::<f64>().map(|v| v / 4.0);
        assert!(a.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn single_isolated_node() {
        let g = Graph::from_edges(1, &[]).unwrap();
        let e = NodeEmbedding::new(Tensor::<f64>::from_f64([1, 1], &[0.7]).unwrap()).unwrap();
        let a = learned_adjacency_value(&e, &g, AdjacencyCombine::Mask).unwrap();
        assert_eq!(a.data(), &[0.0]);
    }

    #[test]
    fn random_embedding_rows_and_support() {
        let mut rng = SeedStreams::new(3).rng("t");
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (3, 4), (0, 4)]).unwrap();
        let e = NodeEmbedding::<f64>::random(5, 3, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ev = tape.constant(e.tensor().clone());
        let learned = learned_adjacency(&mut tape, ev, None, AdjacencyCombine::Mask).unwrap();
        for r in tape.value(learned).data().chunks(5) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = learned_adjacency_value(&e, &g, AdjacencyCombine::Mask).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let v = a.at(&[i, j]);
                assert!(v >= 0.0);
                if !g.has_edge(i, j) {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn embedding_row_mismatch_is_dimension_error() {
        let g = Graph::from_edges(3, &[]).unwrap();
        let e = NodeEmbedding::new(Tensor::<f64>::zeros([2, 2])).unwrap();
        assert!(matches!(
            learned_adjacency_value(&e, &g, AdjacencyCombine::Mask),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn augmented_operator_adds_identity() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([3, 3]));
        let out = augmented_operator(&mut tape, z).unwrap();
        assert_eq!(tape.value(out), &Tensor::eye(3));

        let z1 = tape.constant(Tensor::zeros([1, 1]));
        let out = augmented_operator(&mut tape, z1).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0]);

        let mut rng = SeedStreams::new(5).rng("t");
        let r = NodeEmbedding::<f64>::random(4, 4, 1.0, &mut rng)
            .unwrap()
            .into_tensor();
        let rv = tape.constant(r.clone());
        let out = augmented_operator(&mut tape, rv).unwrap();
        for i in 0..4 {
            assert_eq!(tape.value(out).at(&[i, i]), r.at(&[i, i]) + 1.0);
        }
    }

    #[test]
    fn matmul_combine_differs_from_mask() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut rng = SeedStreams::new(9).rng("t");
        let e = NodeEmbedding::<f64>::random(3, 2, 1.0, &mut rng).unwrap();
        let masked = learned_adjacency_value(&e, &g, AdjacencyCombine::Mask).unwrap();
        let product = learned_adjacency_value(&e, &g, AdjacencyCombine::Matmul).unwrap();
        // The product reading leaks weight onto the non-edge (0,2).
        assert_eq!(masked.at(&[0, 2]), 0.0);
        assert!(product.at(&[0, 2]) > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn learned_adjacency_is_permutation_equivariant(seed in 0u64..10_000, n in 2usize..8) {
            let streams = SeedStreams::new(seed);
            let mut rng = streams.rng("t");
            let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| (i * 7 + j * 3 + seed as usize) % 3 == 0).collect();
            let g = Graph::from_edges(n, &edges).unwrap();
            let e = NodeEmbedding::<f64>::random(n, 3, 1.0, &mut rng).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);

            let mut pe = Tensor::<f64>::zeros([n, 3]);
            for i in 0..n {
                for k in 0..3 {
                    pe.set(&[i, k], e.tensor().at(&[perm[i], k]));
                }
            }
            let base = learned_adjacency_value(&e, &g, AdjacencyCombine::Mask).unwrap();
            let moved = learned_adjacency_value(&NodeEmbedding::new(pe).unwrap(), &g.permuted(&perm), AdjacencyCombine::Mask).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((moved.at(&[i, j]) - base.at(&[perm[i], perm[j]])).abs() < 1e-5);
                }
            }
        }
    }
}
