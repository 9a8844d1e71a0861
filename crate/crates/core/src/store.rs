//! Chunked on-disk tensor store and the decomposition archive built on it.
//!
//! A store is a directory holding `meta.json` and one raw chunk file per
//! chunk-grid cell. Chunks tile the tensor exactly (chunk extents divide the
//! shape), file `c.<i1>.<i2>...<id>` holds chunk (i1, .., id) as little-endian
//! f64 in row-major order, and global element order is row-major throughout,
//! so a store written under one shape can be read back under any shape with
//! the same element count by addressing flat positions.
//!
//! An archive is a directory with `tt_meta.json` plus one store per core,
//! named `core_1` .. `core_d`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NttError, Result};
use crate::tensor::{flat_to_multi, multi_to_flat, DenseTensor, TensorTrain};

pub const STORE_FORMAT_VERSION: u32 = 1;
pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreMeta {
    format_version: u32,
    shape: Vec<usize>,
    chunk_shape: Vec<usize>,
    dtype: String,
    order: String,
}

/// Handle to a chunked tensor store directory.
#[derive(Debug, Clone)]
pub struct TensorStore {
    dir: PathBuf,
    shape: Vec<usize>,
    chunk_shape: Vec<usize>,
}

impl TensorStore {
    /// Creates the directory and writes `meta.json`. Chunk extents must
    /// divide the shape elementwise.
    pub fn create(dir: &Path, shape: &[usize], chunk_shape: &[usize]) -> Result<Self> {
        validate_chunking(shape, chunk_shape)?;
        fs::create_dir_all(dir).map_err(|e| NttError::store_io(dir, e))?;
        let meta = StoreMeta {
            format_version: STORE_FORMAT_VERSION,
            shape: shape.to_vec(),
            chunk_shape: chunk_shape.to_vec(),
            dtype: "f64le".into(),
            order: "C".into(),
        };
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| NttError::Store(format!("meta encoding: {e}")))?;
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, text + "\n").map_err(|e| NttError::store_io(&meta_path, e))?;
        Ok(TensorStore {
            dir: dir.to_path_buf(),
            shape: shape.to_vec(),
            chunk_shape: chunk_shape.to_vec(),
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text =
            fs::read_to_string(&meta_path).map_err(|e| NttError::store_io(&meta_path, e))?;
        let meta: StoreMeta = serde_json::from_str(&text)
            .map_err(|e| NttError::Store(format!("{}: {e}", meta_path.display())))?;
        if meta.format_version != STORE_FORMAT_VERSION {
            return Err(NttError::Store(format!(
                "{}: unsupported format version {}",
                dir.display(),
                meta.format_version
            )));
        }
        if meta.dtype != "f64le" || meta.order != "C" {
            return Err(NttError::Store(format!(
                "{}: unsupported dtype {:?} / order {:?}",
                dir.display(),
                meta.dtype,
                meta.order
            )));
        }
        validate_chunking(&meta.shape, &meta.chunk_shape)?;
        Ok(TensorStore {
            dir: dir.to_path_buf(),
            shape: meta.shape,
            chunk_shape: meta.chunk_shape,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn chunk_shape(&self) -> &[usize] {
        &self.chunk_shape
    }

    /// Chunk counts per dimension.
    pub fn chunk_grid(&self) -> Vec<usize> {
        self.shape
            .iter()
            .zip(&self.chunk_shape)
            .map(|(n, c)| n / c)
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn chunk_numel(&self) -> usize {
        self.chunk_shape.iter().product()
    }

    fn chunk_path(&self, coords: &[usize]) -> PathBuf {
        let mut name = String::from("c");
        for c in coords {
            name.push('.');
            name.push_str(&c.to_string());
        }
        self.dir.join(name)
    }

    fn check_chunk_coords(&self, coords: &[usize]) -> Result<()> {
        let grid = self.chunk_grid();
        if coords.len() != grid.len() || coords.iter().zip(&grid).any(|(c, g)| c >= g) {
            return Err(NttError::Index(format!(
                "chunk {coords:?} outside chunk grid {grid:?}"
            )));
        }
        Ok(())
    }

    pub fn write_chunk(&self, coords: &[usize], data: &[f64]) -> Result<()> {
        self.check_chunk_coords(coords)?;
        if data.len() != self.chunk_numel() {
            return Err(NttError::Dimension(format!(
                "chunk {coords:?} expects {} values, got {}",
                self.chunk_numel(),
                data.len()
            )));
        }
        let path = self.chunk_path(coords);
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(&path).map_err(|e| NttError::store_io(&path, e))?;
        file.write_all(&bytes).map_err(|e| NttError::store_io(&path, e))?;
        Ok(())
    }

    pub fn read_chunk(&self, coords: &[usize]) -> Result<Vec<f64>> {
        self.check_chunk_coords(coords)?;
        let path = self.chunk_path(coords);
        let mut bytes = Vec::new();
        let mut file = fs::File::open(&path).map_err(|e| NttError::store_io(&path, e))?;
        file.read_to_end(&mut bytes)
            .map_err(|e| NttError::store_io(&path, e))?;
        if bytes.len() != self.chunk_numel() * 8 {
            return Err(NttError::Store(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                self.chunk_numel() * 8,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn validate_chunking(shape: &[usize], chunk_shape: &[usize]) -> Result<()> {
    if shape.is_empty()
        || shape.len() != chunk_shape.len()
        || chunk_shape.iter().any(|&c| c == 0)
        || shape.iter().zip(chunk_shape).any(|(n, c)| n % c != 0)
    {
        return Err(NttError::Dimension(format!(
            "chunk shape {chunk_shape:?} does not tile tensor shape {shape:?}"
        )));
    }
    Ok(())
}

/// Cursor over a store that resolves global flat positions to chunk files,
/// caching chunks it has touched. One reader per rank; chunks read across
/// ranks may overlap freely because access is read-only.
pub struct StoreReader<'a> {
    store: &'a TensorStore,
    cache: HashMap<Vec<usize>, Vec<f64>>,
}

impl<'a> StoreReader<'a> {
    pub fn new(store: &'a TensorStore) -> Self {
        StoreReader {
            store,
            cache: HashMap::new(),
        }
    }

    fn chunk(&mut self, coords: &[usize]) -> Result<&[f64]> {
        if !self.cache.contains_key(coords) {
            let data = self.store.read_chunk(coords)?;
            self.cache.insert(coords.to_vec(), data);
        }
        Ok(self.cache.get(coords).unwrap())
    }

    /// Copies the elements at global flat positions [start, start + dst.len())
    /// into `dst`, splitting the range into per-chunk contiguous runs.
    pub fn copy_flat_range(&mut self, start: usize, dst: &mut [f64]) -> Result<()> {
        let shape = self.store.shape().to_vec();
        let chunk_shape = self.store.chunk_shape().to_vec();
        let d = shape.len();
        if start + dst.len() > self.store.numel() {
            return Err(NttError::Index(format!(
                "flat range [{start}, {}) exceeds {} elements",
                start + dst.len(),
                self.store.numel()
            )));
        }
        let mut idx = vec![0usize; d];
        let mut chunk_coords = vec![0usize; d];
        let mut within = vec![0usize; d];
        let mut cursor = start;
        let mut written = 0;
        while written < dst.len() {
            flat_to_multi(cursor, &shape, &mut idx);
            for k in 0..d {
                chunk_coords[k] = idx[k] / chunk_shape[k];
                within[k] = idx[k] % chunk_shape[k];
            }
            // Consecutive flat positions advance only the last index while it
            // stays inside this chunk's slab, so that span is one read.
            let run = (chunk_shape[d - 1] - within[d - 1]).min(dst.len() - written);
            let src_off = multi_to_flat(&within, &chunk_shape);
            let chunk = self.chunk(&chunk_coords)?;
            dst[written..written + run].copy_from_slice(&chunk[src_off..src_off + run]);
            cursor += run;
            written += run;
        }
        Ok(())
    }

    /// Reads a rectangular region, row-major, given its offset and extents
    /// in the store's own shape.
    pub fn read_region(&mut self, offset: &[usize], extents: &[usize]) -> Result<Vec<f64>> {
        let shape = self.store.shape().to_vec();
        let d = shape.len();
        if offset.len() != d
            || extents.len() != d
            || offset
                .iter()
                .zip(extents)
                .zip(&shape)
                .any(|((o, e), n)| *e == 0 || o + e > *n)
        {
            return Err(NttError::Index(format!(
                "region offset {offset:?} extents {extents:?} outside shape {shape:?}"
            )));
        }
        let row_len = extents[d - 1];
        let lead_count: usize = extents[..d - 1].iter().product();
        let mut out = vec![0.0; lead_count * row_len];
        let mut lead = vec![0usize; d.saturating_sub(1)];
        let mut global = vec![0usize; d];
        for q in 0..lead_count {
            flat_to_multi(q, &extents[..d - 1], &mut lead);
            for k in 0..d - 1 {
                global[k] = offset[k] + lead[k];
            }
            global[d - 1] = offset[d - 1];
            let start = multi_to_flat(&global, &shape);
            self.copy_flat_range(start, &mut out[q * row_len..(q + 1) * row_len])?;
        }
        Ok(out)
    }
}

/// Writes a full tensor into a new store at `dir`.
pub fn write_dense(dir: &Path, tensor: &DenseTensor, chunk_shape: &[usize]) -> Result<TensorStore> {
    let store = TensorStore::create(dir, tensor.shape(), chunk_shape)?;
    let grid = store.chunk_grid();
    let chunk_count: usize = grid.iter().product();
    let mut coords = vec![0usize; grid.len()];
    let mut buf = vec![0.0; store.chunk_numel()];
    for c in 0..chunk_count {
        flat_to_multi(c, &grid, &mut coords);
        let offset: Vec<usize> = coords
            .iter()
            .zip(store.chunk_shape())
            .map(|(c, s)| c * s)
            .collect();
        gather_region(tensor, &offset, store.chunk_shape(), &mut buf);
        store.write_chunk(&coords, &buf)?;
    }
    Ok(store)
}

/// Reads a full tensor out of a store.
pub fn read_dense(dir: &Path) -> Result<DenseTensor> {
    let store = TensorStore::open(dir)?;
    let shape = store.shape().to_vec();
    let mut reader = StoreReader::new(&store);
    let offset = vec![0usize; shape.len()];
    let data = reader.read_region(&offset, &shape)?;
    DenseTensor::new(shape, data)
}

fn gather_region(tensor: &DenseTensor, offset: &[usize], extents: &[usize], out: &mut [f64]) {
    let shape = tensor.shape();
    let d = shape.len();
    let row_len = extents[d - 1];
    let lead_count: usize = extents[..d - 1].iter().product();
    let mut lead = vec![0usize; d.saturating_sub(1)];
    let mut global = vec![0usize; d];
    let data = tensor.as_slice();
    for q in 0..lead_count {
        flat_to_multi(q, &extents[..d - 1], &mut lead);
        for k in 0..d - 1 {
            global[k] = offset[k] + lead[k];
        }
        global[d - 1] = offset[d - 1];
        let start = multi_to_flat(&global, shape);
        out[q * row_len..(q + 1) * row_len].copy_from_slice(&data[start..start + row_len]);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub format_version: u32,
    pub shape: Vec<usize>,
    pub ranks: Vec<usize>,
    pub method: String,
    /// Per-stage thresholds when rank selection was spectrum-driven.
    pub eps: Option<Vec<f64>>,
    pub seed: u64,
    /// Seed of the index sampler when the reported error used probes.
    pub probe_seed: Option<u64>,
}

/// Writes a decomposition archive: `tt_meta.json` plus one single-chunk
/// store per core.
pub fn write_archive(dir: &Path, train: &TensorTrain, meta: &ArchiveMeta) -> Result<()> {
    if meta.ranks != train.ranks() || meta.shape != train.shape() {
        return Err(NttError::Rank(format!(
            "archive metadata (shape {:?}, ranks {:?}) disagrees with the train (shape {:?}, ranks {:?})",
            meta.shape,
            meta.ranks,
            train.shape(),
            train.ranks()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| NttError::store_io(dir, e))?;
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| NttError::Store(format!("archive meta encoding: {e}")))?;
    let meta_path = dir.join("tt_meta.json");
    fs::write(&meta_path, text + "\n").map_err(|e| NttError::store_io(&meta_path, e))?;
    for (l, core) in train.cores().iter().enumerate() {
        let core_dir = dir.join(format!("core_{}", l + 1));
        write_dense(&core_dir, core, core.shape())?;
    }
    Ok(())
}

/// Reads an archive back, validating that core shapes match the recorded
/// ranks and mode sizes.
pub fn read_archive(dir: &Path) -> Result<(TensorTrain, ArchiveMeta)> {
    let meta_path = dir.join("tt_meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| NttError::store_io(&meta_path, e))?;
    let meta: ArchiveMeta = serde_json::from_str(&text)
        .map_err(|e| NttError::Store(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != ARCHIVE_FORMAT_VERSION {
        return Err(NttError::Store(format!(
            "{}: unsupported archive version {}",
            dir.display(),
            meta.format_version
        )));
    }
    let d = meta.shape.len();
    if meta.ranks.len() != d + 1 {
        return Err(NttError::Rank(format!(
            "{}: {} ranks recorded for {} modes",
            dir.display(),
            meta.ranks.len(),
            d
        )));
    }
    let mut cores = Vec::with_capacity(d);
    for l in 0..d {
        let core = read_dense(&dir.join(format!("core_{}", l + 1)))?;
        let expect = [meta.ranks[l], meta.shape[l], meta.ranks[l + 1]];
        if core.shape() != expect {
            return Err(NttError::Rank(format!(
                "core {} has shape {:?}, metadata expects {:?}",
                l + 1,
                core.shape(),
                expect
            )));
        }
        cores.push(core);
    }
    let train = TensorTrain::new(cores)?;
    Ok((train, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use tempfile::TempDir;

    fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let rng = CounterRng::new(seed, &[50]);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel as u64).map(|i| rng.uniform(i) - 0.25).collect();
        DenseTensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical_across_chunkings() {
        let tensor = random_tensor(&[6, 4, 10], 1);
        for chunk in [[6, 4, 10], [3, 2, 5], [2, 4, 1], [1, 1, 10]] {
            let dir = TempDir::new().unwrap();
            write_dense(dir.path(), &tensor, &chunk).unwrap();
            let back = read_dense(dir.path()).unwrap();
            assert_eq!(back.shape(), tensor.shape());
            for (a, b) in back.as_slice().iter().zip(tensor.as_slice()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn flat_ranges_cross_chunk_boundaries_correctly() {
        let tensor = random_tensor(&[4, 6], 2);
        let dir = TempDir::new().unwrap();
        let store = write_dense(dir.path(), &tensor, &[2, 3]).unwrap();
        let mut reader = StoreReader::new(&store);
        let mut out = vec![0.0; 13];
        reader.copy_flat_range(5, &mut out).unwrap();
        assert_eq!(&out[..], &tensor.as_slice()[5..18]);
    }

    #[test]
    fn regions_match_direct_slicing() {
        let tensor = random_tensor(&[4, 6, 8], 3);
        let dir = TempDir::new().unwrap();
        let store = write_dense(dir.path(), &tensor, &[2, 3, 4]).unwrap();
        let mut reader = StoreReader::new(&store);
        let region = reader.read_region(&[1, 2, 3], &[2, 3, 4]).unwrap();
        let mut k = 0;
        for i in 1..3 {
            for j in 2..5 {
                for l in 3..7 {
                    assert_eq!(region[k], tensor.get(&[i, j, l]).unwrap());
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn create_rejects_nontiling_chunks() {
        let dir = TempDir::new().unwrap();
        assert!(matches!(
            TensorStore::create(&dir.path().join("s"), &[4, 6], &[3, 2]),
            Err(NttError::Dimension(_))
        ));
    }

    #[test]
    fn open_rejects_missing_and_malformed_meta() {
        let dir = TempDir::new().unwrap();
        assert!(matches!(
            TensorStore::open(&dir.path().join("absent")),
            Err(NttError::Store(_))
        ));
        let bad = dir.path().join("bad");
        fs::create_dir_all(&bad).unwrap();
        fs::write(bad.join("meta.json"), "{not json").unwrap();
        assert!(matches!(TensorStore::open(&bad), Err(NttError::Store(_))));
    }

    #[test]
    fn read_reports_truncated_chunk_files() {
        let tensor = random_tensor(&[4, 4], 4);
        let dir = TempDir::new().unwrap();
        let store = write_dense(dir.path(), &tensor, &[2, 2]).unwrap();
        fs::write(dir.path().join("c.0.1"), [0u8; 7]).unwrap();
        assert!(matches!(store.read_chunk(&[0, 1]), Err(NttError::Store(_))));
    }

    #[test]
    fn archive_round_trip_preserves_cores_bitwise() {
        let shape = [4usize, 3, 5];
        let ranks = [1usize, 2, 3, 1];
        let mut cores = Vec::new();
        for l in 0..3 {
            let rng = CounterRng::new(60, &[l as u64]);
            let numel = ranks[l] * shape[l] * ranks[l + 1];
            let data: Vec<f64> = (0..numel as u64).map(|i| rng.uniform(i)).collect();
            cores.push(DenseTensor::new(vec![ranks[l], shape[l], ranks[l + 1]], data).unwrap());
        }
        let train = TensorTrain::new(cores).unwrap();
        let meta = ArchiveMeta {
            format_version: ARCHIVE_FORMAT_VERSION,
            shape: shape.to_vec(),
            ranks: ranks.to_vec(),
            method: "ntt-bcd".into(),
            eps: Some(vec![0.1, 0.1]),
            seed: 7,
            probe_seed: None,
        };
        let dir = TempDir::new().unwrap();
        write_archive(dir.path(), &train, &meta).unwrap();
        let (back, back_meta) = read_archive(dir.path()).unwrap();
        assert_eq!(back_meta.ranks, ranks);
        assert_eq!(back_meta.method, "ntt-bcd");
        for (a, b) in back.cores().iter().zip(train.cores()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn archive_rejects_inconsistent_core_shapes() {
        let g1 = DenseTensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap();
        let g2 = DenseTensor::new(vec![2, 3, 1], vec![1.0; 6]).unwrap();
        let train = TensorTrain::new(vec![g1, g2]).unwrap();
        let meta = ArchiveMeta {
            format_version: ARCHIVE_FORMAT_VERSION,
            shape: vec![2, 3],
            ranks: vec![1, 2, 1],
            method: "svd-tt".into(),
            eps: None,
            seed: 0,
            probe_seed: None,
        };
        let dir = TempDir::new().unwrap();
        write_archive(dir.path(), &train, &meta).unwrap();
        // Corrupt one core's metadata by rewriting it under a different shape.
        let core_dir = dir.path().join("core_2");
        fs::remove_dir_all(&core_dir).unwrap();
        let other = DenseTensor::new(vec![2, 2, 1], vec![1.0; 4]).unwrap();
        write_dense(&core_dir, &other, &[2, 2, 1]).unwrap();
        assert!(read_archive(dir.path()).is_err());
    }
}
