//! LINE node embeddings (second-order proximity) and their file format.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::numerics::Matrix;

/// One embedding row per graph node, in graph node order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    node_ids: Vec<String>,
    vectors: Matrix,
}

impl EmbeddingTable {
    pub fn new(node_ids: Vec<String>, vectors: Matrix) -> Result<Self> {
        if vectors.rows() != node_ids.len() {
            return Err(Error::Shape(format!(
                "embedding table: {} rows for {} nodes",
                vectors.rows(),
                node_ids.len()
            )));
        }
        if !vectors.all_finite() {
            return Err(Error::Data("embedding table contains non-finite entries".into()));
        }
        Ok(EmbeddingTable {
            dim: vectors.cols(),
            node_ids,
            vectors,
        })
    }

    /// All-zero embeddings, for runs without a pretrained table.
    pub fn zeros(node_ids: Vec<String>, dim: usize) -> Self {
        let vectors = Matrix::zeros(node_ids.len(), dim);
        EmbeddingTable { dim, node_ids, vectors }
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn vector(&self, node: usize) -> &[f64] {
        self.vectors.row(node)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }
}

/// Trains second-order LINE embeddings by weighted edge sampling with
/// negative sampling. One epoch draws one sample per edge.
pub fn line_embed(
    g: &RoadGraph,
    dim: usize,
    epochs: usize,
    negative_samples: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::Contract("line_embed: dim must be >= 1".into()));
    }
    let n = g.node_count();
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let w = g.adjacency().get(i, j);
            if w > 0.0 {
                edges.push((i, j, w));
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::Graph("line_embed: graph has no edges".into()));
    }

    // Cumulative tables for weighted edge sampling and degree^0.75
    // negative sampling over context nodes.
    let edge_cdf = cumulative(edges.iter().map(|&(_, _, w)| w));
    let mut degree = vec![1e-12; n];
    for &(_, j, w) in &edges {
        degree[j] += w;
    }
    let noise_cdf = cumulative(degree.iter().map(|d| d.powf(0.75)));

    let init = 0.5 / dim as f64;
    let mut vertex = Matrix::from_fn(n, dim, |_, _| rng.random_range(-init..init));
    let mut context = Matrix::zeros(n, dim);

    let total = (epochs * edges.len()).max(1);
    let lr0 = 0.025;
    for sample in 0..total {
        let lr = (lr0 * (1.0 - sample as f64 / total as f64)).max(lr0 * 1e-4);
        let (src, dst, _) = edges[sample_cdf(&edge_cdf, rng)];

        let mut src_delta = vec![0.0; dim];
        for neg in 0..=negative_samples {
            let (target, label) = if neg == 0 {
                (dst, 1.0)
            } else {
                (sample_cdf(&noise_cdf, rng), 0.0)
            };
            let dot: f64 = vertex
                .row(src)
                .iter()
                .zip(context.row(target))
                .map(|(a, b)| a * b)
                .sum();
            let gradient = (label - sigmoid(dot)) * lr;
            let ctx_row = context.row_mut(target);
            for d in 0..dim {
                src_delta[d] += gradient * ctx_row[d];
                ctx_row[d] += gradient * vertex.get(src, d);
            }
        }
        let src_row = vertex.row_mut(src);
        for d in 0..dim {
            src_row[d] += src_delta[d];
        }
    }

    EmbeddingTable::new(g.node_ids().to_vec(), vertex)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let total = *cdf.last().expect("non-empty cdf");
    let x = rng.random_range(0.0..total);
    cdf.partition_point(|&c| c <= x).min(cdf.len() - 1)
}

/// Writes `#dim=<d>` then one `<node_id> <v1> ... <vdim>` line per node.
pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "#dim={}", table.dim)?;
    for (i, id) in table.node_ids.iter().enumerate() {
        write!(out, "{id}")?;
        for v in table.vector(i) {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Loads an embedding file and aligns rows to the graph's node order.
/// Every graph node must appear exactly once and no unknown ids are
/// allowed.
pub fn load_embeddings(path: impl AsRef<Path>, g: &RoadGraph) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))??;
    let dim: usize = header
        .strip_prefix("#dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| Error::Data(format!("{}: expected '#dim=<d>' header", path.display())))?;

    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .ok_or_else(|| Error::Data(format!("line {}: missing node id", k + 2)))?
            .to_string();
        if g.node_index(&id).is_none() {
            return Err(Error::Data(format!("unknown node id {id} in embedding file")));
        }
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {}: bad value {p:?}", k + 2)))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Data(format!(
                "node {id}: dimension mismatch, expected {dim}, got {}",
                values.len()
            )));
        }
        if rows.insert(id.clone(), values).is_some() {
            return Err(Error::Data(format!("duplicate embedding row for node {id}")));
        }
    }

    let mut vectors = Matrix::zeros(g.node_count(), dim);
    for (i, id) in g.node_ids().iter().enumerate() {
        let row = rows
            .get(id)
            .ok_or_else(|| Error::Data(format!("embedding file missing node {id}")))?;
        vectors.row_mut(i).copy_from_slice(row);
    }
    EmbeddingTable::new(g.node_ids().to_vec(), vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Edge, Weighting};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_cluster_graph() -> RoadGraph {
        // Two dense 5-cliques joined by a single edge.
        let nodes: Vec<String> = (0..10).map(|i| format!("n{i}")).collect();
        let mut edges = Vec::new();
        for base in [0, 5] {
            for i in 0..5 {
                for j in 0..5 {
                    if i != j {
                        edges.push(Edge {
                            from: format!("n{}", base + i),
                            to: format!("n{}", base + j),
                            distance: 1.0,
                        });
                    }
                }
            }
        }
        edges.push(Edge { from: "n0".into(), to: "n5".into(), distance: 1.0 });
        build_graph(&nodes, &edges, &Weighting::Raw).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb + 1e-12)
    }

    #[test]
    fn embed_shape_and_determinism() {
        let g = two_cluster_graph();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = line_embed(&g, 8, 50, 5, &mut r1).unwrap();
        let b = line_embed(&g, 8, 50, 5, &mut r2).unwrap();
        assert_eq!(a.vectors().shape(), (10, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn edgeless_graph_is_error() {
        let g = RoadGraph::from_adjacency(vec!["a".into()], Matrix::zeros(1, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(line_embed(&g, 4, 10, 5, &mut rng).is_err());
    }

    #[test]
    fn clusters_separate_in_cosine_similarity() {
        let g = two_cluster_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let table = line_embed(&g, 8, 2000, 5, &mut rng).unwrap();
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                if i == j {
                    continue;
                }
                let c = cosine(table.vector(i), table.vector(j));
                if (i < 5) == (j < 5) {
                    intra.push(c);
                } else {
                    inter.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&intra) > mean(&inter),
            "intra {} vs inter {}",
            mean(&intra),
            mean(&inter)
        );
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let g = two_cluster_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = line_embed(&g, 8, 20, 5, &mut rng).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_embeddings(&table, f.path()).unwrap();
        let loaded = load_embeddings(f.path(), &g).unwrap();
        assert_eq!(table, loaded);
    }

    #[test]
    fn load_missing_node_names_it() {
        let g = two_cluster_graph();
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "#dim=2\nn0 1.0 2.0\n").unwrap();
        let err = load_embeddings(f.path(), &g).unwrap_err().to_string();
        assert!(err.contains("missing node n1"), "{err}");
    }

    #[test]
    fn load_unknown_id_is_error() {
        let g = two_cluster_graph();
        let mut content = String::from("#dim=1\n");
        for i in 0..10 {
            content.push_str(&format!("n{i} 0.5\n"));
        }
        content.push_str("mystery 0.5\n");
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), content).unwrap();
        let err = load_embeddings(f.path(), &g).unwrap_err().to_string();
        assert!(err.contains("mystery"), "{err}");
    }

    #[test]
    fn load_dimension_mismatch_is_error() {
        let g = two_cluster_graph();
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "#dim=3\nn0 1.0 2.0\n").unwrap();
        let err = load_embeddings(f.path(), &g).unwrap_err().to_string();
        assert!(err.contains("dimension mismatch"), "{err}");
    }
}
