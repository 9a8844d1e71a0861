//! Block-distributed matrices and tensors, the store-mediated distributed
//! reshape, and the multiplication kernels the factorization loop is built
//! from.
//!
//! Layout conventions, with p = pr*pc ranks on a pr x pc grid and this rank
//! at grid coordinates (i, j):
//!
//! * matrix X (m x n): block of rows [i*m/pr, ..) x cols [j*n/pc, ..),
//!   each block m/pr x n/pc;
//! * factor W (m x r): rows [i*m/pr + j*m/p, ..), block m/p x r, so
//!   concatenating blocks in world rank order reproduces W;
//! * factor H (r x n): cols [j*n/pc + i*n/p, ..), block r x n/p.
//!
//! Global element order is row-major everywhere, which makes reshape a pure
//! reindexing: writers dump blocks into a chunked store and readers pull
//! their new block out by flat position, with one barrier in between.

use std::path::Path;

use crate::comm::{
    concat_block_cols, timed, Category, Communicator, MatrixGrid, ProcessGrid, ScatterAxis,
};
use crate::error::{NttError, Result};
use crate::store::{StoreReader, TensorStore};
use crate::tensor::{DenseTensor, Matrix};

/// This rank's block of a tensor distributed over a dim-per-dim grid.
pub struct DistTensor {
    shape: Vec<usize>,
    block: DenseTensor,
}

impl DistTensor {
    pub fn new(shape: Vec<usize>, grid: &ProcessGrid, block: DenseTensor) -> Result<Self> {
        let extents = tensor_block_extents(&shape, grid)?;
        if block.shape() != &extents[..] {
            return Err(NttError::Dimension(format!(
                "tensor block has shape {:?}, grid {:?} over {:?} expects {:?}",
                block.shape(),
                grid.dims(),
                shape,
                extents
            )));
        }
        Ok(DistTensor { shape, block })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn block(&self) -> &DenseTensor {
        &self.block
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Per-dimension block extents for a tensor grid; every grid dim must divide
/// the corresponding mode size.
pub fn tensor_block_extents(shape: &[usize], grid: &ProcessGrid) -> Result<Vec<usize>> {
    if shape.len() != grid.dims().len() {
        return Err(NttError::Dimension(format!(
            "grid has {} dims for a {}-mode tensor",
            grid.dims().len(),
            shape.len()
        )));
    }
    shape
        .iter()
        .zip(grid.dims())
        .map(|(n, p)| {
            if n % p == 0 {
                Ok(n / p)
            } else {
                Err(NttError::Dimension(format!(
                    "grid extent {p} does not divide mode size {n}"
                )))
            }
        })
        .collect()
}


/// Source of a distributed reshape: whose blocks get written to the store,
/// and under which chunk layout.
pub enum ReshapeSrc<'a> {
    /// Tensor blocks on a dim-per-dim grid; chunk per rank at its grid
    /// coordinates.
    Tensor(&'a DistTensor, &'a ProcessGrid),
    /// X-layout matrix blocks; chunk grid is the process grid.
    Matrix {
        block: &'a Matrix,
        rows: usize,
        cols: usize,
        grid: &'a MatrixGrid,
    },
    /// H-layout factor blocks; chunks are column slabs in H chunk order.
    HFactor {
        block: &'a Matrix,
        rows: usize,
        cols: usize,
        grid: &'a MatrixGrid,
    },
    /// Data already on disk under any chunking with matching element count;
    /// no write phase.
    Store(&'a TensorStore),
}

impl<'a> ReshapeSrc<'a> {
    fn numel(&self) -> usize {
        match self {
            ReshapeSrc::Tensor(t, _) => t.numel(),
            ReshapeSrc::Matrix { rows, cols, .. } => rows * cols,
            ReshapeSrc::HFactor { rows, cols, .. } => rows * cols,
            ReshapeSrc::Store(s) => s.numel(),
        }
    }
}

/// Redistributes the source's elements as a (rows x cols) matrix blocked on
/// the target grid, returning this rank's block. Writers emit their block as
/// one chunk, a barrier separates the phases, then every rank assembles its
/// target block from flat-position runs. Flat element order is preserved, so
/// the result equals the serial row-major reshape.
pub fn dist_reshape(
    src: ReshapeSrc,
    rows: usize,
    cols: usize,
    tgrid: &MatrixGrid,
    dir: &Path,
) -> Result<Matrix> {
    if src.numel() != rows * cols {
        return Err(NttError::Dimension(format!(
            "cannot reshape {} elements to {rows}x{cols}",
            src.numel()
        )));
    }
    let world = tgrid.world();
    let store = match src {
        ReshapeSrc::Store(s) => s.clone(),
        ReshapeSrc::Tensor(t, grid) => {
            let extents = tensor_block_extents(t.shape(), grid)?;
            let store = create_shared(world, dir, t.shape(), &extents)?;
            store.write_chunk(grid.coords(), t.block().as_slice())?;
            store
        }
        ReshapeSrc::Matrix {
            block,
            rows: m,
            cols: n,
            grid,
        } => {
            let (br, bc) = (grid.x_rows_local(m)?, grid.x_cols_local(n)?);
            check_block(block, br, bc, "X block")?;
            let store = create_shared(world, dir, &[m, n], &[br, bc])?;
            let (i, j) = grid.coords();
            store.write_chunk(&[i, j], block.as_slice())?;
            store
        }
        ReshapeSrc::HFactor {
            block,
            rows: r,
            cols: n,
            grid,
        } => {
            let bc = grid.h_cols_local(n)?;
            check_block(block, r, bc, "H block")?;
            let store = create_shared(world, dir, &[r, n], &[r, bc])?;
            store.write_chunk(&[0, grid.h_chunk_index()], block.as_slice())?;
            store
        }
    };
    world.barrier()?;

    let (br, bc) = (tgrid.x_rows_local(rows)?, tgrid.x_cols_local(cols)?);
    let (ro, co) = (tgrid.x_row_offset(rows)?, tgrid.x_col_offset(cols)?);
    let mut reader = StoreReader::new(&store);
    let mut out = vec![0.0; br * bc];
    for lr in 0..br {
        let flat = (ro + lr) * cols + co;
        reader.copy_flat_range(flat, &mut out[lr * bc..(lr + 1) * bc])?;
    }
    // Leave the scratch store for the caller's workdir cleanup; ranks may
    // still be reading when the first one finishes.
    Matrix::new(br, bc, out)
}

/// Creates the store on one rank and opens it everywhere else.
fn create_shared(
    world: &dyn Communicator,
    dir: &Path,
    shape: &[usize],
    chunk_shape: &[usize],
) -> Result<TensorStore> {
    if world.rank() == 0 {
        let store = TensorStore::create(dir, shape, chunk_shape)?;
        world.barrier()?;
        Ok(store)
    } else {
        world.barrier()?;
        TensorStore::open(dir)
    }
}

fn check_block(block: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if block.rows() != rows || block.cols() != cols {
        return Err(NttError::Dimension(format!(
            "{what} is {}x{}, layout expects {rows}x{cols}",
            block.rows(),
            block.cols()
        )));
    }
    Ok(())
}

/// Persists a distributed tensor: one chunk per rank at its grid
/// coordinates. Complete on every rank once this returns.
pub fn write_dist_tensor(t: &DistTensor, grid: &ProcessGrid, dir: &Path) -> Result<TensorStore> {
    let extents = tensor_block_extents(t.shape(), grid)?;
    let store = create_shared(grid.world(), dir, t.shape(), &extents)?;
    store.write_chunk(grid.coords(), t.block().as_slice())?;
    grid.world().barrier()?;
    Ok(store)
}

/// Sum over all ranks of the local block's row Gram b*b^T, replicated.
/// Pass H blocks to get H*H^T.
pub fn dist_gram_rows(block: &Matrix, world: &dyn Communicator) -> Result<Matrix> {
    let local = timed(world, Category::Gr, || block.matmul_abt(block))?;
    finish_gram(local, world)
}

/// Sum over all ranks of the local block's column Gram b^T*b, replicated.
/// Pass W blocks to get W^T*W.
pub fn dist_gram_cols(block: &Matrix, world: &dyn Communicator) -> Result<Matrix> {
    let local = timed(world, Category::Gr, || block.matmul_atb(block))?;
    finish_gram(local, world)
}

fn finish_gram(local: Matrix, world: &dyn Communicator) -> Result<Matrix> {
    let r = local.rows();
    let summed = world.all_reduce_sum(local.as_slice())?;
    let g = Matrix::new(r, r, summed)?;
    // Exact symmetry keeps the spectral-norm iteration and the Jacobi solver
    // honest; the average is deterministic because the reduce is.
    let mut sym = Matrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            sym.set(i, j, 0.5 * (g.at(i, j) + g.at(j, i)));
        }
    }
    Ok(sym)
}

/// X*H^T for X in block layout and H in factor layout; the result lands in
/// W factor layout. All-gather of H over the column group, one local
/// product, reduce-scatter over the row group.
pub fn dist_xht(x: &Matrix, h: &Matrix, grid: &MatrixGrid, m: usize, n: usize) -> Result<Matrix> {
    let r = h.rows();
    check_block(x, grid.x_rows_local(m)?, grid.x_cols_local(n)?, "X block")?;
    check_block(h, r, grid.h_cols_local(n)?, "H block")?;
    let gathered = grid.col_group().all_gather(h.as_slice())?;
    let slab_data = concat_block_cols(&gathered, r, grid.h_cols_local(n)?, grid.pr());
    let slab = Matrix::new(r, grid.x_cols_local(n)?, slab_data)?;
    let world = grid.world();
    let partial = timed(world, Category::Mm, || x.matmul_abt(&slab))?;
    let piece = grid.row_group().reduce_scatter_sum(
        partial.as_slice(),
        partial.rows(),
        partial.cols(),
        ScatterAxis::Rows,
    )?;
    Matrix::new(grid.w_rows_local(m)?, r, piece)
}

/// W^T*X for W in factor layout and X in block layout; the result lands in
/// H factor layout. All-gather of W over the row group, one local product,
/// reduce-scatter over the column group.
pub fn dist_wtx(w: &Matrix, x: &Matrix, grid: &MatrixGrid, m: usize, n: usize) -> Result<Matrix> {
    let r = w.cols();
    check_block(x, grid.x_rows_local(m)?, grid.x_cols_local(n)?, "X block")?;
    check_block(w, grid.w_rows_local(m)?, r, "W block")?;
    let gathered = grid.row_group().all_gather(w.as_slice())?;
    // Row-major blocks stacked in row order concatenate directly.
    let slab = Matrix::new(grid.x_rows_local(m)?, r, gathered)?;
    let world = grid.world();
    let partial = timed(world, Category::Mm, || slab.matmul_atb(x))?;
    let piece = grid.col_group().reduce_scatter_sum(
        partial.as_slice(),
        partial.rows(),
        partial.cols(),
        ScatterAxis::Cols,
    )?;
    Matrix::new(r, grid.h_cols_local(n)?, piece)
}

/// Full W (m x r), replicated: blocks concatenated in world rank order.
pub fn gather_w_full(w: &Matrix, grid: &MatrixGrid, m: usize) -> Result<Matrix> {
    check_block(w, grid.w_rows_local(m)?, w.cols(), "W block")?;
    let gathered = grid.world().all_gather(w.as_slice())?;
    Matrix::new(m, w.cols(), gathered)
}

/// Full H (r x n), replicated: block of world rank t = (i, j) starts at
/// global column j*n/pc + i*n/p.
pub fn gather_h_full(h: &Matrix, grid: &MatrixGrid, n: usize) -> Result<Matrix> {
    let r = h.rows();
    let bc = grid.h_cols_local(n)?;
    check_block(h, r, bc, "H block")?;
    let gathered = grid.world().all_gather(h.as_slice())?;
    let per_col_block = n / grid.pc();
    let mut out = Matrix::zeros(r, n);
    for t in 0..grid.size() {
        let (i, j) = (t / grid.pc(), t % grid.pc());
        let off = j * per_col_block + i * bc;
        let block = &gathered[t * r * bc..(t + 1) * r * bc];
        for row in 0..r {
            out.as_mut_slice()[row * n + off..row * n + off + bc]
                .copy_from_slice(&block[row * bc..(row + 1) * bc]);
        }
    }
    Ok(out)
}

/// ||X - W*H||_F^2 computed directly: gather the factor slabs this rank's X
/// block needs, form the local product, reduce the squared residual. Exact
/// where the Gram identity loses digits to cancellation.
pub fn dist_residual_sq(
    x: &Matrix,
    w: &Matrix,
    h: &Matrix,
    grid: &MatrixGrid,
    m: usize,
    n: usize,
) -> Result<f64> {
    let r = w.cols();
    check_block(x, grid.x_rows_local(m)?, grid.x_cols_local(n)?, "X block")?;
    check_block(w, grid.w_rows_local(m)?, r, "W block")?;
    check_block(h, r, grid.h_cols_local(n)?, "H block")?;
    let w_rows = grid.row_group().all_gather(w.as_slice())?;
    let w_slab = Matrix::new(grid.x_rows_local(m)?, r, w_rows)?;
    let h_cols = grid.col_group().all_gather(h.as_slice())?;
    let h_data = concat_block_cols(&h_cols, r, grid.h_cols_local(n)?, grid.pr());
    let h_slab = Matrix::new(r, grid.x_cols_local(n)?, h_data)?;
    let world = grid.world();
    let local = timed(world, Category::Mm, || -> Result<f64> {
        let wh = w_slab.matmul(&h_slab)?;
        Ok(x.as_slice()
            .iter()
            .zip(wh.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    })?;
    Ok(world.all_reduce_sum(&[local])?[0])
}

/// Global squared Frobenius norm of a distributed piece.
pub fn dist_frob_norm_sq(local: &Matrix, world: &dyn Communicator) -> Result<f64> {
    let s = timed(world, Category::Norm, || local.frob_norm_sq());
    Ok(world.all_reduce_sum(&[s])?[0])
}

/// Global elementwise minimum of a distributed piece. Reduced through sum of
/// per-rank minima bit patterns is wrong; reduce by gathering the p scalars.
pub fn dist_min(local: f64, world: &dyn Communicator) -> Result<f64> {
    let all = world.all_gather(&[local])?;
    Ok(all.into_iter().fold(f64::INFINITY, f64::min))
}

/// Global dot product of two identically distributed pieces.
pub fn dist_dot(a: &Matrix, b: &Matrix, world: &dyn Communicator) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(NttError::Dimension(format!(
            "dot of {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let local = timed(world, Category::Norm, || {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x * y)
            .sum::<f64>()
    });
    Ok(world.all_reduce_sum(&[local])?[0])
}

/// Extracts this rank's X-layout block from a replicated matrix.
pub fn x_block_of(full: &Matrix, grid: &MatrixGrid) -> Result<Matrix> {
    let (br, bc) = (
        grid.x_rows_local(full.rows())?,
        grid.x_cols_local(full.cols())?,
    );
    let (ro, co) = (
        grid.x_row_offset(full.rows())?,
        grid.x_col_offset(full.cols())?,
    );
    Ok(Matrix::from_fn(br, bc, |i, j| full.at(ro + i, co + j)))
}

/// Extracts this rank's W-layout block from a replicated matrix.
pub fn w_block_of(full: &Matrix, grid: &MatrixGrid) -> Result<Matrix> {
    let br = grid.w_rows_local(full.rows())?;
    let ro = grid.w_row_offset(full.rows())?;
    Ok(Matrix::from_fn(br, full.cols(), |i, j| full.at(ro + i, j)))
}

/// Extracts this rank's H-layout block from a replicated matrix.
pub fn h_block_of(full: &Matrix, grid: &MatrixGrid) -> Result<Matrix> {
    let bc = grid.h_cols_local(full.cols())?;
    let co = grid.h_col_offset(full.cols())?;
    Ok(Matrix::from_fn(full.rows(), bc, |i, j| full.at(i, co + j)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::threads::run_spmd;
    use crate::rng::CounterRng;
    use tempfile::TempDir;

    fn tensor_block_offsets(shape: &[usize], grid: &ProcessGrid) -> Result<Vec<usize>> {
        let extents = tensor_block_extents(shape, grid)?;
        Ok(grid
            .coords()
            .iter()
            .zip(&extents)
            .map(|(c, e)| c * e)
            .collect())
    }

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let rng = CounterRng::new(seed, &[90]);
        Matrix::from_fn(rows, cols, |i, j| rng.uniform((i * cols + j) as u64))
    }

    fn seeded_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let rng = CounterRng::new(seed, &[91]);
        let numel: usize = shape.iter().product();
        let data = (0..numel as u64).map(|i| rng.uniform(i)).collect();
        DenseTensor::new(shape.to_vec(), data).unwrap()
    }

    fn tensor_block(full: &DenseTensor, grid: &ProcessGrid) -> DenseTensor {
        let extents = tensor_block_extents(full.shape(), grid).unwrap();
        let offsets = tensor_block_offsets(full.shape(), grid).unwrap();
        let numel: usize = extents.iter().product();
        let mut idx = vec![0usize; extents.len()];
        let mut data = Vec::with_capacity(numel);
        for f in 0..numel {
            crate::tensor::flat_to_multi(f, &extents, &mut idx);
            let global: Vec<usize> = idx.iter().zip(&offsets).map(|(a, b)| a + b).collect();
            data.push(full.get(&global).unwrap());
        }
        DenseTensor::new(extents, data).unwrap()
    }

    #[test]
    fn reshape_on_one_rank_matches_serial_unfold() {
        let full = seeded_tensor(&[4, 6], 11);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("rs");
        let outs = run_spmd(1, move |world| {
            let grid = ProcessGrid::new(world.clone_comm(), vec![1, 1]).unwrap();
            let tgrid = MatrixGrid::new(world, 1, 1).unwrap();
            let t = DistTensor::new(vec![4, 6], &grid, seeded_tensor(&[4, 6], 11)).unwrap();
            dist_reshape(ReshapeSrc::Tensor(&t, &grid), 3, 8, &tgrid, &path)
                .unwrap()
                .into_vec()
        });
        assert_eq!(outs[0], full.as_slice());
    }

    #[test]
    fn reshape_2x2_grid_to_2x1_grid_matches_serial_rows() {
        let full = seeded_tensor(&[4, 4], 12);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("rs");
        let outs = run_spmd(2, move |world| {
            let grid = ProcessGrid::new(world.clone_comm(), vec![2, 1]).unwrap();
            let block = tensor_block(&seeded_tensor(&[4, 4], 12), &grid);
            let t = DistTensor::new(vec![4, 4], &grid, block).unwrap();
            let tgrid = MatrixGrid::new(world, 2, 1).unwrap();
            dist_reshape(ReshapeSrc::Tensor(&t, &grid), 2, 8, &tgrid, &path)
                .unwrap()
                .into_vec()
        });
        assert_eq!(outs[0], full.as_slice()[..8]);
        assert_eq!(outs[1], full.as_slice()[8..]);
    }

    #[test]
    fn reshape_4d_tensor_matches_serial_unfold_probes() {
        let shape = [8usize, 8, 8, 8];
        let full = seeded_tensor(&shape, 13);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("rs");
        let outs = run_spmd(16, move |world| {
            let grid = ProcessGrid::new(world.clone_comm(), vec![2, 2, 2, 2]).unwrap();
            let block = tensor_block(&seeded_tensor(&[8, 8, 8, 8], 13), &grid);
            let t = DistTensor::new(vec![8, 8, 8, 8], &grid, block).unwrap();
            let tgrid = MatrixGrid::new(world, 2, 8).unwrap();
            let local = dist_reshape(ReshapeSrc::Tensor(&t, &grid), 8, 512, &tgrid, &path)
                .unwrap()
                .into_vec();
            let (i, j) = ((tgrid.coords()).0, (tgrid.coords()).1);
            (i, j, local)
        });
        let rng = CounterRng::new(99, &[1]);
        for probe in 0..50u64 {
            let row = (rng.bits(2 * probe) % 8) as usize;
            let col = (rng.bits(2 * probe + 1) % 512) as usize;
            let expect = full.as_slice()[row * 512 + col];
            let (i, j) = (row / 4, col / 64);
            let (_, _, ref local) = outs[i * 8 + j];
            let got = local[(row % 4) * 64 + (col % 64)];
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn reshape_covers_every_position_exactly_once() {
        // Bijection check: tag each element with its global flat index and
        // verify the target blocks hold exactly the right tags.
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("rs");
        let outs = run_spmd(4, move |world| {
            let grid = ProcessGrid::new(world.clone_comm(), vec![2, 2, 1]).unwrap();
            let extents = tensor_block_extents(&[4, 4, 3], &grid).unwrap();
            let offsets = tensor_block_offsets(&[4, 4, 3], &grid).unwrap();
            let numel: usize = extents.iter().product();
            let mut idx = vec![0usize; 3];
            let mut data = Vec::with_capacity(numel);
            for f in 0..numel {
                crate::tensor::flat_to_multi(f, &extents, &mut idx);
                let g: Vec<usize> = idx.iter().zip(&offsets).map(|(a, b)| a + b).collect();
                data.push(crate::tensor::multi_to_flat(&g, &[4, 4, 3]) as f64);
            }
            let block = DenseTensor::new(extents, data).unwrap();
            let t = DistTensor::new(vec![4, 4, 3], &grid, block).unwrap();
            let tgrid = MatrixGrid::new(world, 4, 1).unwrap();
            dist_reshape(ReshapeSrc::Tensor(&t, &grid), 12, 4, &tgrid, &path)
                .unwrap()
                .into_vec()
        });
        let mut seen = vec![false; 48];
        for (rank, local) in outs.iter().enumerate() {
            for (k, v) in local.iter().enumerate() {
                let flat = rank * 12 + k;
                assert_eq!(*v as usize, flat);
                assert!(!seen[flat]);
                seen[flat] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn h_factor_reshape_round_trips_through_the_store() {
        // H (3 x 8) on a 2x2 grid, reshaped to 6x4 on a 2x2 grid; compare
        // against the serial reshape of the gathered H.
        let h_full = seeded_matrix(3, 8, 14);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("rs");
        let expect = h_full.clone();
        let outs = run_spmd(4, move |world| {
            let grid = MatrixGrid::new(world.clone_comm(), 2, 2).unwrap();
            let h = h_block_of(&seeded_matrix(3, 8, 14), &grid).unwrap();
            let tgrid = MatrixGrid::new(world, 2, 2).unwrap();
            let local = dist_reshape(
                ReshapeSrc::HFactor {
                    block: &h,
                    rows: 3,
                    cols: 8,
                    grid: &grid,
                },
                6,
                4,
                &tgrid,
                &path,
            )
            .unwrap();
            let (i, j) = tgrid.coords();
            (i, j, local.into_vec())
        });
        for (i, j, local) in outs {
            for li in 0..3 {
                for lj in 0..2 {
                    let flat = (i * 3 + li) * 4 + (j * 2 + lj);
                    assert_eq!(local[li * 2 + lj], expect.as_slice()[flat]);
                }
            }
        }
    }

    #[test]
    fn gram_of_small_matrix_matches_hand_values() {
        let outs = run_spmd(1, |world| {
            let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
            dist_gram_rows(&m, world.as_ref()).unwrap().into_vec()
        });
        assert_eq!(outs[0], vec![5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn gram_of_split_identity_is_identity() {
        let outs = run_spmd(2, |world| {
            // The row-orthonormal 2x4 matrix [I 0] split into column halves:
            // rank 0 holds I, rank 1 holds zeros, and the row Gram sums to I.
            let mut block = Matrix::zeros(2, 2);
            if world.rank() == 0 {
                block.set(0, 0, 1.0);
                block.set(1, 1, 1.0);
            }
            dist_gram_rows(&block, world.as_ref()).unwrap().into_vec()
        });
        let eye = Matrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(outs[0], eye.as_slice());
        assert_eq!(outs[1], eye.as_slice());
    }

    #[test]
    fn distributed_grams_match_serial_to_1e12() {
        let m = 64;
        let r = 4;
        let h_full = seeded_matrix(r, m, 15);
        let w_full = seeded_matrix(m, r, 16);
        let hh_serial = h_full.matmul_abt(&h_full).unwrap();
        let ww_serial = w_full.matmul_atb(&w_full).unwrap();
        let outs = run_spmd(4, move |world| {
            let grid = MatrixGrid::new(world, 2, 2).unwrap();
            let h = h_block_of(&seeded_matrix(r, m, 15), &grid).unwrap();
            let w = w_block_of(&seeded_matrix(m, r, 16), &grid).unwrap();
            let hh = dist_gram_rows(&h, grid.world()).unwrap();
            let ww = dist_gram_cols(&w, grid.world()).unwrap();
            (hh.into_vec(), ww.into_vec())
        });
        for (hh, ww) in outs {
            for (a, b) in hh.iter().zip(hh_serial.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for (a, b) in ww.iter().zip(ww_serial.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn xht_on_one_rank_is_plain_product() {
        let x = seeded_matrix(4, 6, 17);
        let h = seeded_matrix(2, 6, 18);
        let expect = x.matmul_abt(&h).unwrap();
        let outs = run_spmd(1, move |world| {
            let grid = MatrixGrid::new(world, 1, 1).unwrap();
            let x = seeded_matrix(4, 6, 17);
            let h = seeded_matrix(2, 6, 18);
            dist_xht(&x, &h, &grid, 4, 6).unwrap().into_vec()
        });
        assert_eq!(outs[0], expect.as_slice());
    }

    #[test]
    fn xht_with_identity_x_returns_ht_slices() {
        let h_full = seeded_matrix(2, 4, 19);
        let expect = h_full.transpose();
        let outs = run_spmd(4, move |world| {
            let grid = MatrixGrid::new(world, 2, 2).unwrap();
            let eye = Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
            let x = x_block_of(&eye, &grid).unwrap();
            let h = h_block_of(&seeded_matrix(2, 4, 19), &grid).unwrap();
            let out = dist_xht(&x, &h, &grid, 4, 4).unwrap();
            (grid.w_row_offset(4).unwrap(), out.into_vec())
        });
        for (off, local) in outs {
            assert_eq!(local.len(), 2);
            for (k, v) in local.iter().enumerate() {
                assert!((v - expect.at(off, k)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn distributed_xht_and_wtx_match_serial_to_1e12() {
        let (m, n, r) = (64, 64, 3);
        let x_full = seeded_matrix(m, n, 20);
        let h_full = seeded_matrix(r, n, 21);
        let w_full = seeded_matrix(m, r, 22);
        let xht_serial = x_full.matmul_abt(&h_full).unwrap();
        let wtx_serial = w_full.matmul_atb(&x_full).unwrap();
        let outs = run_spmd(4, move |world| {
            let grid = MatrixGrid::new(world, 2, 2).unwrap();
            let x = x_block_of(&seeded_matrix(m, n, 20), &grid).unwrap();
            let h = h_block_of(&seeded_matrix(r, n, 21), &grid).unwrap();
            let w = w_block_of(&seeded_matrix(m, r, 22), &grid).unwrap();
            let xht = dist_xht(&x, &h, &grid, m, n).unwrap();
            let wtx = dist_wtx(&w, &x, &grid, m, n).unwrap();
            let gw = gather_w_full(&xht, &grid, m).unwrap();
            let gh = gather_h_full(&wtx, &grid, n).unwrap();
            (gw.into_vec(), gh.into_vec())
        });
        for (gw, gh) in outs {
            for (a, b) in gw.iter().zip(xht_serial.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for (a, b) in gh.iter().zip(wtx_serial.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gathered_factors_reproduce_the_replicated_originals() {
        let (m, n, r) = (8, 12, 3);
        let w_full = seeded_matrix(m, r, 23);
        let h_full = seeded_matrix(r, n, 24);
        let outs = run_spmd(4, move |world| {
            let grid = MatrixGrid::new(world, 2, 2).unwrap();
            let w = w_block_of(&seeded_matrix(m, r, 23), &grid).unwrap();
            let h = h_block_of(&seeded_matrix(r, n, 24), &grid).unwrap();
            let gw = gather_w_full(&w, &grid, m).unwrap();
            let gh = gather_h_full(&h, &grid, n).unwrap();
            (gw.into_vec(), gh.into_vec())
        });
        for (gw, gh) in outs {
            assert_eq!(gw, w_full.as_slice());
            assert_eq!(gh, h_full.as_slice());
        }
    }

    #[test]
    fn residual_matches_dense_evaluation() {
        let (m, n, r) = (8, 8, 2);
        let x_full = seeded_matrix(m, n, 25);
        let w_full = seeded_matrix(m, r, 26);
        let h_full = seeded_matrix(r, n, 27);
        let wh = w_full.matmul(&h_full).unwrap();
        let expect: f64 = x_full
            .as_slice()
            .iter()
            .zip(wh.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let outs = run_spmd(4, move |world| {
            let grid = MatrixGrid::new(world, 2, 2).unwrap();
            let x = x_block_of(&seeded_matrix(m, n, 25), &grid).unwrap();
            let w = w_block_of(&seeded_matrix(m, r, 26), &grid).unwrap();
            let h = h_block_of(&seeded_matrix(r, n, 27), &grid).unwrap();
            dist_residual_sq(&x, &w, &h, &grid, m, n).unwrap()
        });
        for got in outs {
            assert!((got - expect).abs() <= 1e-12 * expect.max(1.0));
        }
    }

    #[test]
    fn reshape_rejects_element_count_mismatch() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("rs");
        let outs = run_spmd(1, move |world| {
            let grid = ProcessGrid::new(world.clone_comm(), vec![1, 1]).unwrap();
            let t = DistTensor::new(vec![2, 3], &grid, seeded_tensor(&[2, 3], 1)).unwrap();
            let tgrid = MatrixGrid::new(world, 1, 1).unwrap();
            dist_reshape(ReshapeSrc::Tensor(&t, &grid), 2, 4, &tgrid, &path).is_err()
        });
        assert!(outs[0]);
    }
}
