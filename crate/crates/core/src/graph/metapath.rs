//! Meta-path adjacency construction by boolean incidence-matrix composition.

use super::{HeteroGraph, MetaPath, MetaPathView};
use crate::error::Result;
use crate::matrix::Matrix;

/// Row-major bit matrix; enough for boolean incidence products.
struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        BitMatrix {
            rows,
            cols,
            words_per_row,
            bits: vec![0; rows * words_per_row],
        }
    }

    fn set(&mut self, r: usize, c: usize) {
        self.bits[r * self.words_per_row + c / 64] |= 1 << (c % 64);
    }

    fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.words_per_row + c / 64] & (1 << (c % 64)) != 0
    }

    fn row(&self, r: usize) -> &[u64] {
        &self.bits[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Boolean product: out[i][j] = OR_k self[i][k] AND other[k][j].
    fn compose(&self, other: &BitMatrix) -> BitMatrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = BitMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_start = i * out.words_per_row;
            for k in 0..self.cols {
                if self.get(i, k) {
                    let krow = other.row(k);
                    let orow = &mut out.bits[out_start..out_start + out.words_per_row];
                    for (o, w) in orow.iter_mut().zip(krow) {
                        *o |= w;
                    }
                }
            }
        }
        out
    }
}

/// Build the view induced by `p`: adjacency[a][b] = 1 iff some path
/// instance of `p` connects a and b (in either direction) or a == b.
///
/// Per-relation binary incidence matrices are composed in sequence and
/// binarized, so path multiplicities are discarded. The result is
/// symmetrized and given a unit diagonal; features are attached separately.
pub fn build_meta_path_view(g: &HeteroGraph, p: &MetaPath) -> Result<MetaPathView> {
    g.validate_meta_path(p)?;
    let n = g.target_count();

    let mut acc: Option<BitMatrix> = None;
    for rname in &p.relations {
        let (rel_idx, rel) = g.relation(rname).expect("validated");
        let rows = g.type_count(&rel.src).expect("validated");
        let cols = g.type_count(&rel.dst).expect("validated");
        let mut inc = BitMatrix::zeros(rows, cols);
        for &(src, r, dst) in &g.edges {
            if r == rel_idx {
                inc.set(src, dst);
            }
        }
        acc = Some(match acc {
            None => inc,
            Some(prev) => prev.compose(&inc),
        });
    }
    let reach = acc.expect("nonempty relation sequence");

    let mut adjacency = Matrix::identity(n);
    for a in 0..n {
        for b in 0..n {
            if a != b && (reach.get(a, b) || reach.get(b, a)) {
                adjacency.set(a, b, 1.0);
                adjacency.set(b, a, 1.0);
            }
        }
    }
    let neighbors = (0..n)
        .map(|a| (0..n).filter(|&b| adjacency.get(a, b) != 0.0).collect())
        .collect();

    Ok(MetaPathView {
        meta_path: p.clone(),
        adjacency,
        neighbors,
        features: Matrix::zeros(n, 0),
    })
}
