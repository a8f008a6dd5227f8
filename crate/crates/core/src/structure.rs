//! Structure matrices for intrinsic spatial (ICAR) and temporal (RW1)
//! effects, and their generalized-variance scaling.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::ArealGraph;
use crate::sparse::{SymMatrix, SymPattern};

/// Sparse symmetric, positive semi-definite structure matrix with zero row
/// sums on every non-singleton component.
#[derive(Debug, Clone)]
pub struct StructureMatrix {
    matrix: SymMatrix,
    components: Vec<Vec<usize>>,
    rank_deficiency: usize,
    scale_factor: f64,
    component_scales: Vec<f64>,
}

impl StructureMatrix {
    fn from_matrix(matrix: SymMatrix) -> Self {
        let components = components_of(&matrix);
        let rank_deficiency = components.len();
        let component_scales = vec![1.0; components.len()];
        Self {
            matrix,
            components,
            rank_deficiency,
            scale_factor: 1.0,
            component_scales,
        }
    }

    pub fn dimension(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn rank_deficiency(&self) -> usize {
        self.rank_deficiency
    }

    /// Overall multiplier applied by [`scale_gv`]; the geometric mean of the
    /// per-component factors when the graph is disconnected, 1.0 unscaled.
    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    /// Connected components of the matrix graph, ordered by smallest member.
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    /// Scale factor of each component, parallel to [`Self::components`];
    /// singletons keep 1.0.
    pub fn component_scales(&self) -> &[f64] {
        &self.component_scales
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.to_dense()
    }
}

fn components_of(m: &SymMatrix) -> Vec<Vec<usize>> {
    let n = m.dim();
    let pattern = m.pattern();
    let mut label = vec![usize::MAX; n];
    let mut out = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        label[start] = id;
        let mut members = vec![start];
        let mut head = 0;
        while head < members.len() {
            let j = members[head];
            head += 1;
            for &i in pattern.column(j) {
                if i != j && m.get(i, j) != 0.0 && label[i] == usize::MAX {
                    label[i] = id;
                    members.push(i);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// ICAR structure `Q = D − W` of an areal graph.
pub fn icar_structure(graph: &ArealGraph) -> Result<StructureMatrix> {
    let n = graph.n_units();
    if n < 2 {
        return Err(Error::invalid("ICAR structure needs at least two units"));
    }
    let pattern = Arc::new(SymPattern::from_entries(n, graph.edges().iter().copied()));
    let mut m = SymMatrix::zeros(pattern);
    for &(i, j) in graph.edges() {
        m.add(i, j, -1.0);
        m.add(i, i, 1.0);
        m.add(j, j, 1.0);
    }
    Ok(StructureMatrix::from_matrix(m))
}

/// First-order random walk structure on `t` equally spaced time points.
pub fn rw1_structure(t: usize) -> Result<StructureMatrix> {
    if t < 2 {
        return Err(Error::invalid(format!("RW1 needs at least 2 time points, got {t}")));
    }
    let pattern = Arc::new(SymPattern::from_entries(t, (1..t).map(|k| (k - 1, k))));
    let mut m = SymMatrix::zeros(pattern);
    for k in 1..t {
        m.add(k - 1, k, -1.0);
        m.add(k - 1, k - 1, 1.0);
        m.add(k, k, 1.0);
    }
    Ok(StructureMatrix::from_matrix(m))
}

/// Marginal variances of the sum-to-zero-constrained GMRF with intrinsic
/// precision `block` (one connected component): the diagonal of its
/// Moore-Penrose inverse, computed as `(Q + 11ᵀ/m)⁻¹ − 11ᵀ/m`.
pub(crate) fn constrained_variances(block: &DMatrix<f64>) -> Result<Vec<f64>> {
    let m = block.nrows();
    let shift = 1.0 / m as f64;
    let augmented = block.map(|v| v + shift);
    let chol = augmented.cholesky().ok_or(Error::NotPositiveDefinite {
        pivot: 0,
        value: f64::NAN,
    })?;
    let inv = chol.inverse();
    Ok((0..m).map(|i| inv[(i, i)] - shift).collect())
}

fn dense_block(m: &SymMatrix, members: &[usize]) -> DMatrix<f64> {
    let k = members.len();
    DMatrix::from_fn(k, k, |a, b| m.get(members[a], members[b]))
}

/// Scales each non-singleton component of an intrinsic structure matrix so
/// that the geometric mean of the constrained marginal variances is one.
/// Singleton components are left untouched and excluded.
pub fn scale_gv(q: &StructureMatrix) -> Result<StructureMatrix> {
    let mut scaled = q.matrix.clone();
    let mut component_scales = Vec::with_capacity(q.components.len());
    let mut log_sum = 0.0;
    let mut scaled_count = 0usize;
    for members in &q.components {
        if members.len() < 2 {
            component_scales.push(1.0);
            continue;
        }
        let block = dense_block(&q.matrix, members);
        for r in 0..block.nrows() {
            let s: f64 = block.row(r).sum();
            if s.abs() > 1e-9 * (1.0 + block[(r, r)].abs()) {
                return Err(Error::invalid("structure matrix rows do not sum to zero"));
            }
        }
        let var = constrained_variances(&block)?;
        let log_geo = var.iter().map(|v| v.ln()).sum::<f64>() / var.len() as f64;
        let factor = log_geo.exp();
        component_scales.push(factor);
        log_sum += log_geo;
        scaled_count += 1;
        let pattern = scaled.pattern().clone();
        let values = scaled.values_mut();
        for &j in members {
            for &i in pattern.column(j) {
                let p = pattern.position(i, j).unwrap();
                values[p] *= factor;
            }
        }
    }
    if scaled_count == 0 {
        return Err(Error::invalid(
            "cannot scale: every component is a singleton",
        ));
    }
    Ok(StructureMatrix {
        matrix: scaled,
        components: q.components.clone(),
        rank_deficiency: q.rank_deficiency,
        scale_factor: (log_sum / scaled_count as f64).exp(),
        component_scales,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_edge_list;

    fn path3() -> ArealGraph {
        load_edge_list("src,dst\nA,B\nB,C\n", None).unwrap()
    }

    #[test]
    fn icar_path_of_three() {
        let q = icar_structure(&path3()).unwrap();
        let expected = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(q.get(i, j), expected[i][j]);
            }
        }
        assert_eq!(q.rank_deficiency(), 1);
    }

    #[test]
    fn icar_complete_and_disjoint() {
        let k3 = load_edge_list("src,dst\nA,B\nB,C\nA,C\n", None).unwrap();
        let q = icar_structure(&k3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(q.get(i, j), if i == j { 2.0 } else { -1.0 });
            }
        }
        let two = load_edge_list("src,dst\nA,B\nC,D\n", None).unwrap();
        let q = icar_structure(&two).unwrap();
        assert_eq!(q.rank_deficiency(), 2);
        assert_eq!(q.get(1, 2), 0.0);
    }

    #[test]
    fn icar_needs_two_units() {
        let g = ArealGraph::new(vec!["A".into()], &[]).unwrap();
        assert!(icar_structure(&g).is_err());
    }

    #[test]
    fn rw1_examples() {
        let q = rw1_structure(2).unwrap();
        assert_eq!(q.to_dense(), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let q = rw1_structure(3).unwrap();
        let icar = icar_structure(&path3()).unwrap();
        assert_eq!(q.to_dense(), icar.to_dense());
        assert_eq!(q.rank_deficiency(), 1);
        let q = rw1_structure(17).unwrap().to_dense();
        for r in 0..17 {
            assert_eq!(q.row(r).sum(), 0.0);
        }
        assert!(rw1_structure(1).is_err());
    }

    #[test]
    fn scaling_rejects_all_singletons() {
        let g = ArealGraph::new(vec!["A".into(), "B".into()], &[]).unwrap();
        let q = icar_structure(&g).unwrap();
        assert!(scale_gv(&q).is_err());
    }

    #[test]
    fn singleton_components_stay_unscaled() {
        let g = load_edge_list("src,dst\nA,B\nB,C\n", Some(&["A", "B", "C", "D"].map(String::from)))
            .unwrap();
        let q = scale_gv(&icar_structure(&g).unwrap()).unwrap();
        assert_eq!(q.components().len(), 2);
        assert_eq!(q.component_scales()[1], 1.0);
        assert_eq!(q.get(3, 3), 0.0);
    }
}
