//! Synthetic tensors with known train ranks, plus Gaussian noise injection.
//!
//! Cores are drawn from a seeded stream and are identical on every rank;
//! each rank then evaluates its own block elementwise through the core
//! chain. Because elements are keyed by global position, the generated
//! tensor is bit-identical for every process count, which the distribution
//! equivalence tests rely on.

use crate::comm::ProcessGrid;
use crate::dist::{tensor_block_extents, DistTensor};
use crate::error::{NttError, Result};
use crate::rng::CounterRng;
use crate::tensor::{flat_to_multi, multi_to_flat, DenseTensor, TensorTrain};

const TAG_CORE: u64 = 0x47;
const TAG_NOISE: u64 = 0x4e;

#[derive(Debug, Clone)]
pub struct GenSpec {
    pub shape: Vec<usize>,
    pub ranks: Vec<usize>,
    pub seed: u64,
    /// Variance of zero-mean Gaussian noise added per element.
    pub noise_variance: Option<f64>,
    /// Clamp noisy values at zero (the nonnegative pipeline needs it).
    pub clip: bool,
}

impl GenSpec {
    pub fn noiseless(shape: Vec<usize>, ranks: Vec<usize>, seed: u64) -> Self {
        GenSpec {
            shape,
            ranks,
            seed,
            noise_variance: None,
            clip: false,
        }
    }
}

/// The deterministic uniform(0,1) core train for a given seed, identical on
/// every rank.
pub fn seeded_train(shape: &[usize], ranks: &[usize], seed: u64) -> Result<TensorTrain> {
    if ranks.len() != shape.len() + 1 {
        return Err(NttError::Rank(format!(
            "{} ranks supplied for {} modes",
            ranks.len(),
            shape.len()
        )));
    }
    let mut cores = Vec::with_capacity(shape.len());
    for l in 0..shape.len() {
        let rng = CounterRng::new(seed, &[TAG_CORE, l as u64]);
        let numel = ranks[l] * shape[l] * ranks[l + 1];
        let data: Vec<f64> = (0..numel as u64).map(|i| rng.uniform(i)).collect();
        cores.push(DenseTensor::new(
            vec![ranks[l], shape[l], ranks[l + 1]],
            data,
        )?);
    }
    TensorTrain::new(cores)
}

/// Generates this rank's block of the synthetic tensor, with optional noise
/// and clipping applied as `spec` requests.
pub fn generate(spec: &GenSpec, grid: &ProcessGrid) -> Result<DistTensor> {
    let train = seeded_train(&spec.shape, &spec.ranks, spec.seed)?;
    let extents = tensor_block_extents(&spec.shape, grid)?;
    let offsets: Vec<usize> = grid
        .coords()
        .iter()
        .zip(&extents)
        .map(|(c, e)| c * e)
        .collect();
    let numel: usize = extents.iter().product();
    let mut local_idx = vec![0usize; spec.shape.len()];
    let mut global_idx = vec![0usize; spec.shape.len()];
    let mut data = Vec::with_capacity(numel);
    let noise = spec
        .noise_variance
        .map(|v| (CounterRng::new(spec.seed, &[TAG_NOISE]), v.sqrt()));
    for f in 0..numel {
        flat_to_multi(f, &extents, &mut local_idx);
        for (k, (l, o)) in local_idx.iter().zip(&offsets).enumerate() {
            global_idx[k] = l + o;
        }
        let mut v = train.tt_element(&global_idx)?;
        if let Some((ref rng, sd)) = noise {
            let gflat = multi_to_flat(&global_idx, &spec.shape) as u64;
            v += sd * rng.std_normal(gflat);
        }
        if spec.clip && v < 0.0 {
            v = 0.0;
        }
        data.push(v);
    }
    let block = DenseTensor::new(extents, data)?;
    DistTensor::new(spec.shape.clone(), grid, block)
}

/// Adds iid Gaussian(0, variance) noise to a full tensor, keyed by flat
/// position; pairs with the noise a distributed generate would apply.
pub fn add_noise(t: &DenseTensor, variance: f64, seed: u64) -> Result<DenseTensor> {
    if variance < 0.0 {
        return Err(NttError::Config(format!(
            "noise variance must be nonnegative, got {variance}"
        )));
    }
    let rng = CounterRng::new(seed, &[TAG_NOISE]);
    let sd = variance.sqrt();
    let data: Vec<f64> = t
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, v)| v + sd * rng.std_normal(k as u64))
        .collect();
    DenseTensor::new(t.shape().to_vec(), data)
}

/// Clamps all entries at zero.
pub fn clip_nonneg(t: &DenseTensor) -> DenseTensor {
    let data: Vec<f64> = t.as_slice().iter().map(|v| v.max(0.0)).collect();
    DenseTensor::new(t.shape().to_vec(), data).unwrap()
}
