//! SPMD communication: a communicator contract, per-category timers, and
//! process grids.
//!
//! Every rank of a worker group runs the same program and meets its peers at
//! collective calls. The in-process backend ([`threads`]) executes ranks as
//! threads of one process; a network backend could implement the same trait
//! without changing any algorithm code. Reductions accumulate contributions
//! in rank-ascending order, never tree order, so a collective's result is
//! bit-identical across runs with the same rank count.

pub mod threads;

use std::time::Instant;

use crate::error::{NttError, Result};

/// Timing categories accumulated during factorization.
///
/// The first five cover local compute: Gram products, products with the
/// input matrix and factors, elementwise update arithmetic, norms, and
/// factor initialization. The last three cover communication: all_gather,
/// all_reduce, and reduce_scatter (each including the wait for peers).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Gr,
    Mm,
    Mad,
    Norm,
    Init,
    Ag,
    Ar,
    Rsc,
}

pub const CATEGORIES: [Category; 8] = [
    Category::Gr,
    Category::Mm,
    Category::Mad,
    Category::Norm,
    Category::Init,
    Category::Ag,
    Category::Ar,
    Category::Rsc,
];

impl Category {
    pub fn index(self) -> usize {
        match self {
            Category::Gr => 0,
            Category::Mm => 1,
            Category::Mad => 2,
            Category::Norm => 3,
            Category::Init => 4,
            Category::Ag => 5,
            Category::Ar => 6,
            Category::Rsc => 7,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Gr => "GR",
            Category::Mm => "MM",
            Category::Mad => "MAD",
            Category::Norm => "Norm",
            Category::Init => "INIT",
            Category::Ag => "AG",
            Category::Ar => "AR",
            Category::Rsc => "RSC",
        }
    }
}

/// Snapshot of accumulated per-category wall time, in seconds.
#[derive(Debug, Clone, Default)]
pub struct TimingReport {
    pub secs: [f64; 8],
}

impl TimingReport {
    pub fn get(&self, cat: Category) -> f64 {
        self.secs[cat.index()]
    }

    pub fn total(&self) -> f64 {
        self.secs.iter().sum()
    }

    pub fn add(&mut self, other: &TimingReport) {
        for (a, b) in self.secs.iter_mut().zip(&other.secs) {
            *a += b;
        }
    }

    pub fn scale(&mut self, f: f64) {
        for s in &mut self.secs {
            *s *= f;
        }
    }
}

/// Which axis a reduce_scatter splits after summing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScatterAxis {
    Rows,
    Cols,
}

/// Collective contract shared by all backends.
///
/// Every member of a group must call the same sequence of collectives with
/// compatible arguments; a detected mismatch fails identically on every
/// member. `rank` is the position within this group, not the world rank.
pub trait Communicator {
    fn rank(&self) -> usize;

    fn size(&self) -> usize;

    /// Concatenation of all members' blocks in rank order. Blocks must have
    /// equal length.
    fn all_gather(&self, local: &[f64]) -> Result<Vec<f64>>;

    /// Elementwise sum over all members, accumulated in rank order.
    fn all_reduce_sum(&self, local: &[f64]) -> Result<Vec<f64>>;

    /// Sums `rows x cols` blocks over the group, then hands each member its
    /// slice along `axis`: member k gets rows (or columns)
    /// [k * extent/size, (k+1) * extent/size).
    fn reduce_scatter_sum(
        &self,
        local: &[f64],
        rows: usize,
        cols: usize,
        axis: ScatterAxis,
    ) -> Result<Vec<f64>>;

    /// Blocks until every member arrives. Not charged to any timing category.
    fn barrier(&self) -> Result<()>;

    /// Splits the group: members sharing `color` form a subgroup, ordered by
    /// their rank in the parent. Every member must call this collectively.
    fn split(&self, color: usize) -> Result<Box<dyn Communicator>>;

    /// A second handle to the same group, sharing the timer set.
    fn clone_comm(&self) -> Box<dyn Communicator>;

    fn record(&self, cat: Category, secs: f64);

    fn timing_report(&self) -> TimingReport;

    fn reset_timers(&self);
}

/// Runs `f`, charging its wall time to `cat` on `c`'s timer set.
pub fn timed<T>(c: &dyn Communicator, cat: Category, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    c.record(cat, start.elapsed().as_secs_f64());
    out
}

/// Reassembles an all_gather of row-major `rows x cols_each` blocks into the
/// row-major `rows x (parts * cols_each)` matrix whose column slabs are the
/// blocks in rank order.
pub fn concat_block_cols(gathered: &[f64], rows: usize, cols_each: usize, parts: usize) -> Vec<f64> {
    debug_assert_eq!(gathered.len(), rows * cols_each * parts);
    let total_cols = cols_each * parts;
    let mut out = vec![0.0; rows * total_cols];
    for part in 0..parts {
        let block = &gathered[part * rows * cols_each..(part + 1) * rows * cols_each];
        for r in 0..rows {
            let src = &block[r * cols_each..(r + 1) * cols_each];
            let dst_start = r * total_cols + part * cols_each;
            out[dst_start..dst_start + cols_each].copy_from_slice(src);
        }
    }
    out
}

/// A d-dimensional process grid over a communicator, ranks laid out
/// row-major (last grid dimension fastest).
pub struct ProcessGrid {
    dims: Vec<usize>,
    coords: Vec<usize>,
    world: Box<dyn Communicator>,
}

impl ProcessGrid {
    pub fn new(world: Box<dyn Communicator>, dims: Vec<usize>) -> Result<Self> {
        let p: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) || p != world.size() {
            return Err(NttError::Dimension(format!(
                "process grid {dims:?} does not tile {} ranks",
                world.size()
            )));
        }
        let mut coords = vec![0usize; dims.len()];
        crate::tensor::flat_to_multi(world.rank(), &dims, &mut coords);
        Ok(ProcessGrid { dims, coords, world })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn world(&self) -> &dyn Communicator {
        self.world.as_ref()
    }
}

/// A 2D grid with row and column subgroups, the layout every matrix stage
/// runs on.
///
/// Rank i * pc + j sits at grid position (i, j). The row group of (i, j)
/// holds the pc ranks sharing i (ordered by j); the column group holds the
/// pr ranks sharing j (ordered by i). Factor blocks refine the grid blocks:
/// rank (i, j) owns rows [i*m/pr + j*m/p, ..) of an m-row left factor and
/// columns [j*n/pc + i*n/p, ..) of an n-column right factor, so that
/// concatenation in gather order reproduces the global factor.
pub struct MatrixGrid {
    pr: usize,
    pc: usize,
    row_coord: usize,
    col_coord: usize,
    world: Box<dyn Communicator>,
    row_group: Box<dyn Communicator>,
    col_group: Box<dyn Communicator>,
}

impl MatrixGrid {
    pub fn new(world: Box<dyn Communicator>, pr: usize, pc: usize) -> Result<Self> {
        if pr == 0 || pc == 0 || pr * pc != world.size() {
            return Err(NttError::Dimension(format!(
                "matrix grid {pr}x{pc} does not tile {} ranks",
                world.size()
            )));
        }
        let rank = world.rank();
        let row_coord = rank / pc;
        let col_coord = rank % pc;
        let row_group = world.split(row_coord)?;
        let col_group = world.split(col_coord)?;
        debug_assert_eq!(row_group.rank(), col_coord);
        debug_assert_eq!(col_group.rank(), row_coord);
        Ok(MatrixGrid {
            pr,
            pc,
            row_coord,
            col_coord,
            world,
            row_group,
            col_group,
        })
    }

    pub fn pr(&self) -> usize {
        self.pr
    }

    pub fn pc(&self) -> usize {
        self.pc
    }

    pub fn size(&self) -> usize {
        self.pr * self.pc
    }

    /// (row, column) position of this rank.
    pub fn coords(&self) -> (usize, usize) {
        (self.row_coord, self.col_coord)
    }

    pub fn world(&self) -> &dyn Communicator {
        self.world.as_ref()
    }

    pub fn row_group(&self) -> &dyn Communicator {
        self.row_group.as_ref()
    }

    pub fn col_group(&self) -> &dyn Communicator {
        self.col_group.as_ref()
    }

    fn divisible(&self, extent: usize, parts: usize, what: &str) -> Result<usize> {
        if parts == 0 || extent % parts != 0 {
            return Err(NttError::Dimension(format!(
                "{what}: extent {extent} is not divisible by {parts} on a {}x{} grid",
                self.pr, self.pc
            )));
        }
        Ok(extent / parts)
    }

    /// Rows of this rank's block of an m-row distributed input matrix.
    pub fn x_rows_local(&self, m: usize) -> Result<usize> {
        self.divisible(m, self.pr, "input rows")
    }

    /// Columns of this rank's block of an n-column distributed input matrix.
    pub fn x_cols_local(&self, n: usize) -> Result<usize> {
        self.divisible(n, self.pc, "input columns")
    }

    pub fn x_row_offset(&self, m: usize) -> Result<usize> {
        Ok(self.row_coord * self.x_rows_local(m)?)
    }

    pub fn x_col_offset(&self, n: usize) -> Result<usize> {
        Ok(self.col_coord * self.x_cols_local(n)?)
    }

    /// Rows of this rank's left-factor block (m/p rows per rank).
    pub fn w_rows_local(&self, m: usize) -> Result<usize> {
        self.divisible(m, self.size(), "left factor rows")
    }

    /// First global row of this rank's left-factor block.
    pub fn w_row_offset(&self, m: usize) -> Result<usize> {
        let per_rank = self.w_rows_local(m)?;
        Ok(self.row_coord * (self.pc * per_rank) + self.col_coord * per_rank)
    }

    /// Columns of this rank's right-factor block (n/p columns per rank).
    pub fn h_cols_local(&self, n: usize) -> Result<usize> {
        self.divisible(n, self.size(), "right factor columns")
    }

    /// First global column of this rank's right-factor block.
    pub fn h_col_offset(&self, n: usize) -> Result<usize> {
        let per_rank = self.h_cols_local(n)?;
        Ok(self.col_coord * (self.pr * per_rank) + self.row_coord * per_rank)
    }

    /// Position of this rank's right-factor block in the column-major chunk
    /// order (j, i), the order in which blocks tile the global columns.
    pub fn h_chunk_index(&self) -> usize {
        self.col_coord * self.pr + self.row_coord
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::threads::run_spmd;

    #[test]
    fn category_labels_and_indices_are_stable() {
        let labels: Vec<_> = CATEGORIES.iter().map(|c| c.label()).collect();
        assert_eq!(
            labels,
            ["GR", "MM", "MAD", "Norm", "INIT", "AG", "AR", "RSC"]
        );
        for (i, c) in CATEGORIES.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
    }

    #[test]
    fn concat_block_cols_interleaves_column_slabs() {
        // Two 2x2 blocks become the 2x4 matrix whose left half is block 0.
        let gathered = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let out = concat_block_cols(&gathered, 2, 2, 2);
        assert_eq!(out, vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn grid_coords_cover_all_ranks_once() {
        let seen = run_spmd(6, |world| {
            let grid = MatrixGrid::new(world, 2, 3).unwrap();
            grid.coords()
        });
        let mut pairs: Vec<_> = seen.into_iter().collect();
        pairs.sort();
        let expect: Vec<_> = (0..2).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        assert_eq!(pairs, expect);
    }

    #[test]
    fn factor_layouts_tile_the_global_extents() {
        let spans = run_spmd(4, |world| {
            let grid = MatrixGrid::new(world, 2, 2).unwrap();
            let w = (grid.w_row_offset(8).unwrap(), grid.w_rows_local(8).unwrap());
            let h = (grid.h_col_offset(8).unwrap(), grid.h_cols_local(8).unwrap());
            let chunk = grid.h_chunk_index();
            (w, h, chunk)
        });
        let mut w_offsets: Vec<_> = spans.iter().map(|(w, _, _)| w.0).collect();
        w_offsets.sort();
        assert_eq!(w_offsets, vec![0, 2, 4, 6]);
        let mut h_offsets: Vec<_> = spans.iter().map(|(_, h, _)| h.0).collect();
        h_offsets.sort();
        assert_eq!(h_offsets, vec![0, 2, 4, 6]);
        // The h chunk index must equal the column offset in block units.
        for (_, h, chunk) in &spans {
            assert_eq!(h.0 / h.1, *chunk);
        }
    }

    #[test]
    fn grid_rejects_wrong_rank_count() {
        let errs = run_spmd(4, |world| MatrixGrid::new(world, 3, 2).err().is_some());
        assert!(errs.iter().all(|e| *e));
    }
}
