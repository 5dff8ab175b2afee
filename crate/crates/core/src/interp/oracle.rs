//! Dense brute-force oracles.
//!
//! These deliberately take the slow road: they materialize the full dense
//! masked adjacency and walk it, so they share no code with the
//! interpreter or the lowered kernels they check. Contributions per
//! destination are re-ordered by ascending edge index before summation so
//! comparisons against the interpreter hold to 1e-12.

use crate::graph::{GraphStats, HeteroGraph};
use crate::tensor::{TensorValue, ValueRole};

/// Generalized sparse-dense matmul: for each destination, aggregate
/// `message_fn(edge, edge_row, src_row)` over its incoming edges.
pub fn gspmm_oracle(
    g: &HeteroGraph,
    edge_data: Option<&TensorValue>,
    node_data: &TensorValue,
    out_cols: usize,
    message_fn: &dyn Fn(usize, &[f64], &[f64]) -> Vec<f64>,
) -> TensorValue {
    let n = g.num_nodes();
    // Dense masked adjacency: every (dst, src) cell holds the edge ids
    // connecting src -> dst (a multigraph cell may hold several).
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); n * n];
    for e in 0..g.num_edges() {
        cells[g.dst(e) * n + g.src(e)].push(e);
    }
    let empty: Vec<f64> = Vec::new();
    let mut out = TensorValue::zeros(n, out_cols, ValueRole::Node);
    for v in 0..n {
        let mut msgs: Vec<(usize, Vec<f64>)> = Vec::new();
        for u in 0..n {
            for &e in &cells[v * n + u] {
                let erow: &[f64] = match edge_data {
                    Some(t) => t.row(e),
                    None => &empty,
                };
                msgs.push((e, message_fn(e, erow, node_data.row(u))));
            }
        }
        msgs.sort_by_key(|(e, _)| *e);
        let row = out.row_mut(v);
        for (_, m) in msgs {
            for (o, x) in row.iter_mut().zip(m) {
                *o += x;
            }
        }
    }
    out
}

/// Generalized sampled dense-dense matmul: one `message_fn(edge,
/// edge_row, dst_row, src_row)` value per existing edge; the zero pattern
/// is exactly the adjacency.
pub fn gsddmm_oracle(
    g: &HeteroGraph,
    src_data: &TensorValue,
    dst_data: &TensorValue,
    edge_data: Option<&TensorValue>,
    out_cols: usize,
    message_fn: &dyn Fn(usize, &[f64], &[f64], &[f64]) -> Vec<f64>,
) -> TensorValue {
    let empty: Vec<f64> = Vec::new();
    let mut out = TensorValue::zeros(g.num_edges(), out_cols, ValueRole::Edge);
    for e in 0..g.num_edges() {
        let erow: &[f64] = match edge_data {
            Some(t) => t.row(e),
            None => &empty,
        };
        let m = message_fn(e, erow, dst_data.row(g.dst(e)), src_data.row(g.src(e)));
        out.row_mut(e).copy_from_slice(&m);
    }
    out
}

/// Plain SpMM via an explicitly materialized dense weighted adjacency:
/// `out = A * B` with `A[dst][src] = sum of scalar edge weights`.
pub fn spmm_dense(g: &HeteroGraph, edge_weights: &[f64], b: &TensorValue) -> TensorValue {
    let n = g.num_nodes();
    let mut a = vec![0.0; n * n];
    for e in 0..g.num_edges() {
        a[g.dst(e) * n + g.src(e)] += edge_weights[e];
    }
    let mut out = TensorValue::zeros(n, b.cols(), ValueRole::Node);
    for i in 0..n {
        for j in 0..n {
            let w = a[i * n + j];
            if w == 0.0 {
                continue;
            }
            let brow = b.row(j);
            let orow = out.row_mut(i);
            for (o, &x) in orow.iter_mut().zip(brow) {
                *o += w * x;
            }
        }
    }
    out
}

/// Dense evaluation of one relational graph convolution layer: for each
/// relation, a normalized dense adjacency is materialized explicitly and
/// `H' = H W0 + sum_r A*_r H W_r` is computed by dense products.
pub fn rgcn_dense_oracle(
    g: &HeteroGraph,
    stats: &GraphStats,
    h: &TensorValue,
    w_rel: &TensorValue,
    w_self: &TensorValue,
) -> TensorValue {
    let n = g.num_nodes();
    let d_out = w_self.cols();
    let mut out = TensorValue::zeros(n, d_out, ValueRole::Node);
    // self-loop term
    for v in 0..n {
        let row = out.row_mut(v);
        crate::tensor::vec_mat_accum(h.row(v), w_self.data(), d_out, row);
    }
    for r in 0..g.num_edge_types() {
        // normalized dense adjacency of relation r
        let mut a = vec![0.0; n * n];
        for e in 0..g.num_edges() {
            if g.etype(e) == r {
                a[g.dst(e) * n + g.src(e)] += stats.edge_norm[e];
            }
        }
        // H W_r
        let wr = w_rel.weight_slice(r);
        let mut hw = vec![0.0; n * d_out];
        for v in 0..n {
            crate::tensor::vec_mat_accum(h.row(v), wr, d_out, &mut hw[v * d_out..(v + 1) * d_out]);
        }
        // out += A*_r (H W_r)
        for i in 0..n {
            for j in 0..n {
                let w = a[i * n + j];
                if w == 0.0 {
                    continue;
                }
                let row = out.row_mut(i);
                for (o, &x) in row.iter_mut().zip(&hw[j * d_out..(j + 1) * d_out]) {
                    *o += w * x;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SynthSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(seed: u64) -> HeteroGraph {
        HeteroGraph::generate_synthetic(
            &SynthSpec {
                node_counts: vec![5, 3],
                edge_type_count: 2,
                edge_count: 24,
                allow_duplicates: true,
                degree: crate::graph::DegreeModel::Uniform,
            },
            seed,
        )
        .unwrap()
        .sort_edges_by_type()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, role: ValueRole) -> TensorValue {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        TensorValue::from_flat(rows, cols, data, role)
    }

    #[test]
    fn gspmm_with_scalar_weights_reduces_to_spmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..5 {
            let g = random_graph(seed);
            let b = random_tensor(&mut rng, g.num_nodes(), 6, ValueRole::Node);
            let w: Vec<f64> = (0..g.num_edges()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let edge = TensorValue::from_flat(g.num_edges(), 1, w.clone(), ValueRole::Edge);
            let via_gspmm = gspmm_oracle(&g, Some(&edge), &b, 6, &|_, erow, srow| {
                srow.iter().map(|&x| erow[0] * x).collect()
            });
            let via_dense = spmm_dense(&g, &w, &b);
            let err = via_gspmm.max_rel_err(&via_dense);
            assert!(err < 1e-12, "err {err}");
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let g = random_graph(3);
        let b = TensorValue::zeros(g.num_nodes(), 4, ValueRole::Node);
        let out = gspmm_oracle(&g, None, &b, 4, &|_, _, srow| srow.to_vec());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gsddmm_dot_is_classic_sddmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_graph(7);
        let a = random_tensor(&mut rng, g.num_nodes(), 5, ValueRole::Node);
        let b = random_tensor(&mut rng, g.num_nodes(), 5, ValueRole::Node);
        let out = gsddmm_oracle(&g, &b, &a, None, 1, &|_, _, drow, srow| {
            vec![crate::tensor::dot(drow, srow)]
        });
        for e in 0..g.num_edges() {
            let want = crate::tensor::dot(a.row(g.dst(e)), b.row(g.src(e)));
            assert!((out.at(e, 0) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gsddmm_empty_graph() {
        let g = HeteroGraph::new(vec![3], 1, vec![]).unwrap().sort_edges_by_type();
        let nd = TensorValue::zeros(3, 2, ValueRole::Node);
        let out = gsddmm_oracle(&g, &nd, &nd, None, 1, &|_, _, _, _| vec![0.0]);
        assert_eq!(out.rows(), 0);
    }
}
