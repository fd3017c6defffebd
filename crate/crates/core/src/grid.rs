//! Layout arithmetic for the triangular process grid.
//!
//! `P = D(D+1)/2` workers are arranged on the lower triangle of a `D x D`
//! grid. A matrix of order `n` is cut into `B = hD` blocks per dimension
//! (`h` is the replication factor) and block `(I, J)` is owned by the grid
//! coordinate obtained by folding the residue pair `((I-1) mod D, (J-1) mod D)`
//! onto the lower triangle. Each diagonal worker then owns `h(h+1)/2` blocks
//! of a triangular matrix and every off-diagonal worker owns `h^2`.
//!
//! Everything in the public API of this module is 1-based: ranks run from
//! `1..=P`, coordinates satisfy `1 <= col <= row <= D`, and block and element
//! indices start at 1. The `*0` helpers are the 0-based forms used by the
//! kernels.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Target block size of the default replication heuristic.
pub const TARGET_BLOCK_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("{0} is not a triangular number D(D+1)/2")]
    NotTriangularNumber(usize),
    #[error("block ({i}, {j}) lies above the diagonal")]
    OutOfTriangle { i: usize, j: usize },
    #[error("index {index} outside 1..={bound}")]
    OutOfRange { index: usize, bound: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
}

/// A worker coordinate `(row, col)` on the lower-triangular grid, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub const fn new(row: usize, col: usize) -> Self {
        Coord { row, col }
    }

    pub fn is_diagonal(&self) -> bool {
        self.row == self.col
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// The `D x D` lower-triangular process grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessGrid {
    order: usize,
}

impl ProcessGrid {
    /// Grid of order `d >= 1`.
    pub fn with_order(d: usize) -> Result<Self, GridError> {
        if d == 0 {
            return Err(GridError::InvalidLayout("grid order must be positive".into()));
        }
        Ok(ProcessGrid { order: d })
    }

    /// Recovers `D` from `P = D(D+1)/2`.
    pub fn from_process_count(p: usize) -> Result<Self, GridError> {
        if p == 0 {
            return Err(GridError::NotTriangularNumber(p));
        }
        // isqrt(2P) is either D or D+1 off by rounding; check both neighbours.
        let guess = ((2.0 * p as f64).sqrt()) as usize;
        for d in guess.saturating_sub(1)..=guess + 1 {
            if d > 0 && d * (d + 1) / 2 == p {
                return Ok(ProcessGrid { order: d });
            }
        }
        Err(GridError::NotTriangularNumber(p))
    }

    /// Grid order `D`.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Worker count `P = D(D+1)/2`.
    pub fn process_count(&self) -> usize {
        self.order * (self.order + 1) / 2
    }

    /// Ranks are assigned column-major down the lower triangle, so for
    /// `D = 4` the diagonal carries ranks 1, 5, 8 and 10.
    pub fn coord_to_rank(&self, c: Coord) -> Result<usize, GridError> {
        let d = self.order;
        if c.col == 0 || c.col > c.row || c.row > d {
            return Err(GridError::OutOfTriangle { i: c.row, j: c.col });
        }
        let z = c.col - 1;
        // Columns 1..z hold D, D-1, ..., D-z+1 coordinates.
        Ok(z * d - z * z.saturating_sub(1) / 2 + (c.row - c.col) + 1)
    }

    pub fn rank_to_coord(&self, rank: usize) -> Result<Coord, GridError> {
        let p = self.process_count();
        if rank == 0 || rank > p {
            return Err(GridError::OutOfRange { index: rank, bound: p });
        }
        let mut remaining = rank - 1;
        for col in 1..=self.order {
            let height = self.order - col + 1;
            if remaining < height {
                return Ok(Coord::new(col + remaining, col));
            }
            remaining -= height;
        }
        unreachable!("rank {rank} checked against P = {p}")
    }

    /// All coordinates in rank order.
    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (1..=self.order).flat_map(move |col| (col..=self.order).map(move |row| Coord::new(row, col)))
    }

    /// Owner of lower-triangular block `(i, j)`, `j <= i`.
    pub fn block_owner(&self, i: usize, j: usize) -> Result<Coord, GridError> {
        if i == 0 || j == 0 {
            return Err(GridError::OutOfRange { index: 0, bound: usize::MAX });
        }
        if j > i {
            return Err(GridError::OutOfTriangle { i, j });
        }
        Ok(self.fold0(i - 1, j - 1))
    }

    /// Owner of block `(i, j)` of a rectangular matrix. Same folding rule,
    /// without the triangle restriction.
    pub fn rect_block_owner(&self, i: usize, j: usize) -> Result<Coord, GridError> {
        if i == 0 || j == 0 {
            return Err(GridError::OutOfRange { index: 0, bound: usize::MAX });
        }
        Ok(self.fold0(i - 1, j - 1))
    }

    /// Vector blocks live on the diagonal workers, block-cyclically.
    pub fn vector_block_owner(&self, j: usize) -> Result<Coord, GridError> {
        if j == 0 {
            return Err(GridError::OutOfRange { index: 0, bound: usize::MAX });
        }
        Ok(self.vector_owner0(j - 1))
    }

    /// Residue folding for 0-based block indices.
    pub(crate) fn fold0(&self, i: usize, j: usize) -> Coord {
        let a = i % self.order + 1;
        let b = j % self.order + 1;
        if a >= b {
            Coord::new(a, b)
        } else {
            Coord::new(b, a)
        }
    }

    pub(crate) fn vector_owner0(&self, j: usize) -> Coord {
        let c = j % self.order + 1;
        Coord::new(c, c)
    }

    pub(crate) fn rank_of(&self, c: Coord) -> usize {
        self.coord_to_rank(c).expect("coordinate produced by the grid")
    }
}

/// Smallest `h` with `ceil(n / (hD)) <= TARGET_BLOCK_SIZE`.
pub fn default_replication(n: usize, d: usize) -> usize {
    n.div_ceil(TARGET_BLOCK_SIZE * d.max(1)).max(1)
}

/// Blocking of one matrix dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    n: usize,
    h: usize,
    d: usize,
    block_size: usize,
}

impl BlockLayout {
    pub fn new(n: usize, h: usize, grid: &ProcessGrid) -> Result<Self, GridError> {
        if n == 0 {
            return Err(GridError::InvalidLayout("dimension must be positive".into()));
        }
        if h == 0 {
            return Err(GridError::InvalidLayout("replication factor must be positive".into()));
        }
        let d = grid.order();
        Ok(BlockLayout { n, h, d, block_size: n.div_ceil(h * d) })
    }

    /// Layout using [`default_replication`].
    pub fn with_default_h(n: usize, grid: &ProcessGrid) -> Result<Self, GridError> {
        Self::new(n, default_replication(n, grid.order()), grid)
    }

    /// Unpadded length.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn replication(&self) -> usize {
        self.h
    }

    pub fn grid_order(&self) -> usize {
        self.d
    }

    /// `B = hD`.
    pub fn nblocks(&self) -> usize {
        self.h * self.d
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// `B * blockSize`, always `>= n`.
    pub fn padded_len(&self) -> usize {
        self.nblocks() * self.block_size
    }

    /// 0-based global index of local offset `k` in 0-based block `b`.
    pub(crate) fn global0(&self, b: usize, k: usize) -> usize {
        b * self.block_size + k
    }
}

/// Which kind of distributed object a layout describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectKind {
    /// Lower-triangular (or symmetric, lower-stored) square matrix.
    Triangular,
    Rectangular,
    Vector,
}

/// An element of a local index set: 1-based global `(row, col)` and whether
/// it lies in the padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub row: usize,
    pub col: usize,
    pub padded: bool,
}

/// Full layout of a distributed object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLayout {
    pub kind: ObjectKind,
    pub rows: BlockLayout,
    /// Column blocking; equals `rows` for triangular objects, a single
    /// one-wide block for vectors.
    pub cols: BlockLayout,
}

impl ObjectLayout {
    pub fn triangular(rows: BlockLayout) -> Self {
        ObjectLayout { kind: ObjectKind::Triangular, rows, cols: rows }
    }

    pub fn rectangular(rows: BlockLayout, cols: BlockLayout) -> Self {
        ObjectLayout { kind: ObjectKind::Rectangular, rows, cols }
    }

    pub fn vector(rows: BlockLayout) -> Self {
        let cols = BlockLayout { n: 1, h: 1, d: 1, block_size: 1 };
        ObjectLayout { kind: ObjectKind::Vector, rows, cols }
    }

    fn grid(&self) -> ProcessGrid {
        ProcessGrid { order: self.rows.d }
    }

    /// Unpadded `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.rows.n, self.cols.n)
    }

    /// Padded shape of every block.
    pub fn block_shape(&self) -> (usize, usize) {
        (self.rows.block_size, self.cols.block_size)
    }

    pub(crate) fn row_blocks(&self) -> usize {
        self.rows.nblocks()
    }

    pub(crate) fn col_blocks(&self) -> usize {
        match self.kind {
            ObjectKind::Vector => 1,
            _ => self.cols.nblocks(),
        }
    }

    /// Whether 0-based block `(i, j)` is part of the object.
    pub(crate) fn has_block0(&self, i: usize, j: usize) -> bool {
        i < self.row_blocks()
            && j < self.col_blocks()
            && (self.kind != ObjectKind::Triangular || j <= i)
    }

    /// Owner of 0-based block `(i, j)`.
    pub(crate) fn owner0(&self, i: usize, j: usize) -> Coord {
        let grid = self.grid();
        match self.kind {
            ObjectKind::Vector => grid.vector_owner0(i),
            _ => grid.fold0(i, j),
        }
    }

    /// 0-based blocks owned by `c`, column-major over the block grid.
    pub(crate) fn blocks_of0(&self, c: Coord) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.col_blocks() {
            for i in 0..self.row_blocks() {
                if self.has_block0(i, j) && self.owner0(i, j) == c {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Entries of a 0-based block that belong to the object, column-major.
    /// Diagonal blocks of a triangular object contribute their lower part only.
    pub(crate) fn block_entries0(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        let (br, bc) = self.block_shape();
        let tri_diag = self.kind == ObjectKind::Triangular && i == j;
        let mut out = Vec::with_capacity(br * bc);
        for c in 0..bc {
            let r0 = if tri_diag { c } else { 0 };
            for r in r0..br {
                out.push((r, c));
            }
        }
        out
    }

    pub(crate) fn is_padding0(&self, gi: usize, gj: usize) -> bool {
        gi >= self.rows.n || gj >= self.cols.n
    }

    /// Blocks owned by coordinate `c`, 1-based and column-major.
    pub fn owned_blocks(&self, c: Coord) -> Vec<(usize, usize)> {
        self.blocks_of0(c).into_iter().map(|(i, j)| (i + 1, j + 1)).collect()
    }

    /// Number of entries held by `c`: the distributed vector, triangular or
    /// rectangular length of the object on that worker, padding included.
    pub fn local_len(&self, c: Coord) -> usize {
        self.blocks_of0(c).iter().map(|&(i, j)| self.block_entries0(i, j).len()).sum()
    }

    /// Global element indices held by `c`, in storage order: blocks
    /// column-major over the block grid, elements column-major within a block.
    pub fn local_index_set(&self, c: Coord) -> Vec<IndexEntry> {
        let mut out = Vec::with_capacity(self.local_len(c));
        for (bi, bj) in self.blocks_of0(c) {
            for (r, k) in self.block_entries0(bi, bj) {
                let gi = self.rows.global0(bi, r);
                let gj = if self.kind == ObjectKind::Vector { 0 } else { self.cols.global0(bj, k) };
                out.push(IndexEntry { row: gi + 1, col: gj + 1, padded: self.is_padding0(gi, gj) });
            }
        }
        out
    }
}

/// Local index set for `kind` on coordinate `c`; the free-function form of
/// [`ObjectLayout::local_index_set`].
pub fn local_index_sets(layout: &ObjectLayout, c: Coord) -> Vec<IndexEntry> {
    layout.local_index_set(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn grid(d: usize) -> ProcessGrid {
        ProcessGrid::with_order(d).unwrap()
    }

    #[test]
    fn process_count_examples() {
        assert_eq!(ProcessGrid::from_process_count(1).unwrap().order(), 1);
        assert_eq!(ProcessGrid::from_process_count(10).unwrap().order(), 4);
        assert_eq!(ProcessGrid::from_process_count(7), Err(GridError::NotTriangularNumber(7)));
        assert_eq!(ProcessGrid::from_process_count(0), Err(GridError::NotTriangularNumber(0)));
        for d in 1..200 {
            let p = d * (d + 1) / 2;
            assert_eq!(ProcessGrid::from_process_count(p).unwrap().order(), d);
            assert!(ProcessGrid::from_process_count(p + 1).is_err() || d == 0);
        }
    }

    #[test]
    fn diagonal_ranks_for_order_four() {
        let g = grid(4);
        let diag: Vec<usize> = (1..=4).map(|c| g.coord_to_rank(Coord::new(c, c)).unwrap()).collect();
        assert_eq!(diag, vec![1, 5, 8, 10]);
        let off: Vec<usize> = g
            .coords()
            .filter(|c| !c.is_diagonal())
            .map(|c| g.coord_to_rank(c).unwrap())
            .collect();
        assert_eq!(off, vec![2, 3, 4, 6, 7, 9]);
    }

    #[test]
    fn block_owner_examples() {
        let g = grid(4);
        let c = g.block_owner(3, 2).unwrap();
        assert_eq!(c, Coord::new(3, 2));
        assert_eq!(g.coord_to_rank(c).unwrap(), 6);
        assert_eq!(g.block_owner(2, 3), Err(GridError::OutOfTriangle { i: 2, j: 3 }));

        // h = 3: every diagonal process owns six diagonal-or-below blocks.
        let l = BlockLayout::new(120, 3, &g).unwrap();
        let tri = ObjectLayout::triangular(l);
        for c in g.coords() {
            let expect = if c.is_diagonal() { 6 } else { 9 };
            assert_eq!(tri.owned_blocks(c).len(), expect, "{c}");
        }
        // The diagonal blocks (I, I) fall only on diagonal processes, three each.
        let mut diag_counts: HashMap<Coord, usize> = HashMap::new();
        for i in 1..=12 {
            *diag_counts.entry(g.block_owner(i, i).unwrap()).or_default() += 1;
        }
        assert!(diag_counts.keys().all(|c| c.is_diagonal()));
        assert!(diag_counts.values().all(|&k| k == 3));
    }

    #[test]
    fn folded_counts_small_grid() {
        let g = grid(2);
        assert_eq!(g.block_owner(1, 1).unwrap(), Coord::new(1, 1));
        let tri = ObjectLayout::triangular(BlockLayout::new(8, 2, &g).unwrap());
        let counts: Vec<usize> = g.coords().map(|c| tri.owned_blocks(c).len()).collect();
        assert_eq!(counts, vec![3, 4, 3]);

        let l = BlockLayout::new(8, 2, &g).unwrap();
        let rect = ObjectLayout::rectangular(l, l);
        let counts: Vec<usize> = g.coords().map(|c| rect.owned_blocks(c).len()).collect();
        assert_eq!(counts, vec![4, 8, 4]);
    }

    #[test]
    fn rect_and_vector_owners() {
        let g = grid(4);
        assert_eq!(g.rect_block_owner(1, 2).unwrap(), Coord::new(2, 1));
        assert_eq!(g.rect_block_owner(2, 2).unwrap(), Coord::new(2, 2));
        assert_eq!(g.vector_block_owner(1).unwrap(), Coord::new(1, 1));
        assert_eq!(g.vector_block_owner(6).unwrap(), Coord::new(2, 2));
        let v = ObjectLayout::vector(BlockLayout::new(24, 3, &g).unwrap());
        for c in g.coords() {
            let expect = if c.is_diagonal() { 3 } else { 0 };
            assert_eq!(v.owned_blocks(c).len(), expect);
        }
        let g1 = grid(1);
        assert!((1..10).all(|j| g1.vector_block_owner(j).unwrap() == Coord::new(1, 1)));
    }

    #[test]
    fn index_set_examples() {
        let g1 = grid(1);
        let tri = ObjectLayout::triangular(BlockLayout::new(2, 1, &g1).unwrap());
        let idx: Vec<(usize, usize)> =
            tri.local_index_set(Coord::new(1, 1)).iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(idx, vec![(1, 1), (2, 1), (2, 2)]);
        assert!(tri.local_index_set(Coord::new(1, 1)).iter().all(|e| !e.padded));

        let g2 = grid(2);
        let tri = ObjectLayout::triangular(BlockLayout::new(4, 1, &g2).unwrap());
        let idx: Vec<(usize, usize)> =
            tri.local_index_set(Coord::new(2, 1)).iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(idx, vec![(3, 1), (4, 1), (3, 2), (4, 2)]);

        // A full block in the upper-left corner, listed column-wise.
        let l = BlockLayout::new(4, 1, &g2).unwrap();
        let rect = ObjectLayout::rectangular(l, l);
        let idx: Vec<(usize, usize)> =
            rect.local_index_set(Coord::new(1, 1)).iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(idx[..4], [(1, 1), (2, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn padding_is_flagged() {
        let g = grid(2);
        let v = ObjectLayout::vector(BlockLayout::new(5, 1, &g).unwrap());
        // blockSize 3, padded length 6; entry 6 sits on (2,2).
        let idx = v.local_index_set(Coord::new(2, 2));
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.iter().filter(|e| e.padded).count(), 1);
        assert_eq!(idx.last().unwrap().row, 6);
        assert_eq!(v.local_len(Coord::new(2, 1)), 0);
    }

    #[test]
    fn default_h_targets_thousand() {
        assert_eq!(default_replication(400, 1), 1);
        assert_eq!(default_replication(3000, 1), 3);
        assert_eq!(default_replication(3001, 3), 2);
        let g = grid(4);
        let l = BlockLayout::with_default_h(67_275, &g).unwrap();
        assert!(l.block_size() <= TARGET_BLOCK_SIZE);
        assert!(l.padded_len() as f64 / 67_275.0 <= 1.0 + 1.0 / l.nblocks() as f64);
    }

    #[test]
    fn layout_rejects_zero() {
        let g = grid(2);
        assert!(BlockLayout::new(0, 1, &g).is_err());
        assert!(BlockLayout::new(3, 0, &g).is_err());
        assert!(ProcessGrid::with_order(0).is_err());
    }

    #[test]
    fn ownership_partitions_triangle() {
        for d in 1..=5 {
            let g = grid(d);
            for h in 1..=4 {
                let tri = ObjectLayout::triangular(BlockLayout::new(h * d * 2, h, &g).unwrap());
                let b = h * d;
                let mut seen = vec![vec![0u8; b]; b];
                for c in g.coords() {
                    let blocks = tri.owned_blocks(c);
                    let expect = if c.is_diagonal() { h * (h + 1) / 2 } else { h * h };
                    assert_eq!(blocks.len(), expect);
                    for (i, j) in blocks {
                        assert_eq!(g.block_owner(i, j).unwrap(), c);
                        seen[i - 1][j - 1] += 1;
                    }
                }
                for (i, row) in seen.iter().enumerate() {
                    for (j, &count) in row.iter().enumerate() {
                        assert_eq!(count, u8::from(j <= i));
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn rank_coord_round_trip(d in 1usize..=20) {
            let g = grid(d);
            let mut coords = std::collections::HashSet::new();
            for r in 1..=g.process_count() {
                let c = g.rank_to_coord(r).unwrap();
                prop_assert!(c.col >= 1 && c.col <= c.row && c.row <= d);
                prop_assert_eq!(g.coord_to_rank(c).unwrap(), r);
                coords.insert(c);
            }
            prop_assert_eq!(coords.len(), g.process_count());
            prop_assert!(g.rank_to_coord(g.process_count() + 1).is_err());
        }

        #[test]
        fn padding_bounds(n in 1usize..200_000, d in 1usize..=20, h in 1usize..=8) {
            let g = grid(d);
            let l = BlockLayout::new(n, h, &g).unwrap();
            prop_assert!(l.padded_len() >= n);
            let b = l.nblocks();
            prop_assert!(l.padded_len() - n < b);
            if n >= b * (b - 1) {
                prop_assert!(l.padded_len() - n < l.block_size().max(1) || l.padded_len() == n);
                prop_assert!(l.padded_len() as f64 / n as f64 <= 1.0 + 1.0 / b as f64);
            }
        }

        #[test]
        fn index_set_lengths_cover_object(n in 1usize..40, m in 1usize..30, d in 1usize..=4, h in 1usize..=3) {
            let g = grid(d);
            let rows = BlockLayout::new(n, h, &g).unwrap();
            let cols = BlockLayout::new(m, h, &g).unwrap();
            let p = rows.padded_len();
            let tri = ObjectLayout::triangular(rows);
            let total: usize = g.coords().map(|c| tri.local_index_set(c).len()).sum();
            prop_assert_eq!(total, p * (p + 1) / 2);
            let rect = ObjectLayout::rectangular(rows, cols);
            let total: usize = g.coords().map(|c| rect.local_len(c)).sum();
            prop_assert_eq!(total, p * cols.padded_len());
            let unpadded: usize = g.coords()
                .map(|c| rect.local_index_set(c).iter().filter(|e| !e.padded).count())
                .sum();
            prop_assert_eq!(unpadded, n * m);
        }
    }
}
