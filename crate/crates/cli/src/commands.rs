use std::path::PathBuf;

use ntt_core::comm::threads::run_spmd;
use ntt_core::comm::ProcessGrid;
use ntt_core::datagen::{self, GenSpec};
use ntt_core::dist::write_dist_tensor;
use ntt_core::driver::{
    dist_ntt, evaluate_error_store, probe_seed_for, MethodRegistry, NttInput, TtConfig, TtReport,
    FULL_EVAL_LIMIT, PROBE_COUNT_DEFAULT,
};
use ntt_core::error::{NttError, Result};
use ntt_core::metrics::{relative_error, ssim};
use ntt_core::nmf::NmfConfig;
use ntt_core::spectra::DEFAULT_GRAM_CAP;
use ntt_core::store::{
    read_archive, read_dense, write_archive, write_dense, ArchiveMeta, TensorStore,
    ARCHIVE_FORMAT_VERSION,
};
use ntt_core::tensor::{DenseTensor, Matrix, TensorTrain};

use crate::util::{
    accumulate_timing, auto_grid, bench_csv, first_error, join_dims, join_list, parse_dims,
    parse_usize_list, print_report, write_metrics_csv, BenchRow, ScratchDir,
};
use crate::{BenchArgs, DecomposeArgs, GenerateArgs, MetricsArgs, ReconstructArgs};

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let shape = parse_dims("shape", &a.shape)?;
    let ranks = parse_usize_list("ranks", &a.ranks)?;
    let dims = match &a.grid {
        Some(g) => parse_dims("grid", g)?,
        None => vec![1; shape.len()],
    };
    if dims.len() != shape.len() {
        return Err(NttError::Config(format!(
            "--grid has {} extents but the shape has {} modes",
            dims.len(),
            shape.len()
        )));
    }
    let p: usize = dims.iter().product();
    let spec = GenSpec {
        shape: shape.clone(),
        ranks,
        seed: a.seed,
        noise_variance: a.noise_var,
        clip: a.clip,
    };
    let outs = run_spmd(p, |world| -> Result<usize> {
        let grid = ProcessGrid::new(world, dims.clone())?;
        let t = datagen::generate(&spec, &grid)?;
        let store = write_dist_tensor(&t, &grid, &a.out)?;
        Ok(store.numel())
    });
    let numel = first_error(outs)?[0];
    println!("shape: {}", join_dims(&shape));
    println!("elements: {numel}");
    println!("store: {}", a.out.display());
    Ok(())
}

pub fn decompose(a: &DecomposeArgs) -> Result<()> {
    let store = TensorStore::open(&a.input)?;
    let shape = store.shape().to_vec();
    let d = shape.len();
    let dims = match &a.grid {
        Some(g) => parse_dims("grid", g)?,
        None => vec![1; d],
    };
    if dims.len() != d {
        return Err(NttError::Config(format!(
            "--grid has {} extents but the input has {} modes",
            dims.len(),
            d
        )));
    }
    let p: usize = dims.iter().product();
    let fixed_ranks = match &a.ranks {
        Some(s) => {
            let vals = parse_usize_list("ranks", s)?;
            let vals = if vals.len() == 1 && d > 2 {
                vec![vals[0]; d - 1]
            } else {
                vals
            };
            if vals.len() + 1 != d {
                return Err(NttError::Config(format!(
                    "--ranks needs 1 or {} values for a {d}-mode tensor, got {}",
                    d - 1,
                    vals.len()
                )));
            }
            Some(vals)
        }
        None => None,
    };
    MethodRegistry::standard().get(&a.method)?;

    let scratch = ScratchDir::new()?;
    let mut nmf = NmfConfig::new(1, a.seed);
    nmf.max_iters = a.iters;
    nmf.delta = a.delta;
    nmf.h_step_sqrt_norm = a.sqrt_h_step;
    let cfg = TtConfig {
        eps: vec![a.eps.unwrap_or(0.1)],
        fixed_ranks,
        nmf,
        p1: dims[0],
        gram_cap: DEFAULT_GRAM_CAP,
        workdir: scratch.path().join("run"),
    };
    let pseed = probe_seed_for(a.seed);
    let outs = run_spmd(p, |world| -> Result<(TensorTrain, TtReport, f64, bool)> {
        let reg = MethodRegistry::standard();
        let solver = reg.get(&a.method)?;
        let eval_world = world.clone_comm();
        let (train, report) = dist_ntt(NttInput::Store(&store), solver, &cfg, world)?;
        let (rel, probed) =
            evaluate_error_store(&train, &store, eval_world.as_ref(), a.probe_error, pseed)?;
        Ok((train, report, rel, probed))
    });
    let mut results = first_error(outs)?;
    let (train, report, rel_error, probed) = results.swap_remove(0);

    let eps_meta: Option<Vec<f64>> = report.stages.iter().map(|s| s.eps).collect();
    let meta = ArchiveMeta {
        format_version: ARCHIVE_FORMAT_VERSION,
        shape,
        ranks: train.ranks().to_vec(),
        method: report.method.clone(),
        eps: eps_meta,
        seed: a.seed,
        probe_seed: probed.then_some(pseed),
    };
    write_archive(&a.out, &train, &meta)?;

    let compression = report.compression()?;
    let probe_label = probed.then(|| a.probe_error.unwrap_or(PROBE_COUNT_DEFAULT));
    print_report(&report, compression, rel_error, probe_label);
    let csv_path = a.metrics_csv.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".metrics.csv");
        PathBuf::from(s)
    });
    write_metrics_csv(&csv_path, &report, compression, rel_error)?;
    println!();
    println!("archive: {}", a.out.display());
    println!("metrics_csv: {}", csv_path.display());
    Ok(())
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let (train, meta) = read_archive(&a.archive)?;
    let shape = train.shape();
    let numel: usize = shape.iter().product();
    if numel > FULL_EVAL_LIMIT {
        return Err(NttError::Dimension(format!(
            "reconstruction would materialize {numel} elements; the cap is {FULL_EVAL_LIMIT}"
        )));
    }
    let chunk = match &a.chunk {
        Some(c) => {
            let chunk = parse_dims("chunk", c)?;
            if chunk.len() != shape.len() {
                return Err(NttError::Config(format!(
                    "--chunk has {} extents but the archive has {} modes",
                    chunk.len(),
                    shape.len()
                )));
            }
            chunk
        }
        None => shape.clone(),
    };
    let dense = train.reconstruct()?;
    write_dense(&a.out, &dense, &chunk)?;
    println!("method: {}", meta.method);
    println!("shape: {}", join_dims(&shape));
    println!("ranks: {}", join_list(&meta.ranks));
    println!("store: {}", a.out.display());
    Ok(())
}

pub fn metrics(a: &MetricsArgs) -> Result<()> {
    let ta = read_dense(&a.a)?;
    let tb = read_dense(&a.b)?;
    let rel = relative_error(&ta, &tb)?;
    println!("rel_error: {rel}");
    if a.ssim {
        let ma = leading_slice(&ta)?;
        let mb = leading_slice(&tb)?;
        let s = ssim(&ma, &mb, None)?;
        println!("ssim: {s}");
    }
    Ok(())
}

/// The 2-D slice at index zero of every leading mode; contiguous in
/// row-major order, so it is the first rows*cols stored values.
fn leading_slice(t: &DenseTensor) -> Result<Matrix> {
    let shape = t.shape();
    let d = shape.len();
    if d < 2 {
        return Err(NttError::Dimension(
            "structural similarity needs at least 2 modes".to_string(),
        ));
    }
    let rows = shape[d - 2];
    let cols = shape[d - 1];
    Matrix::new(rows, cols, t.as_slice()[..rows * cols].to_vec())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let shape = parse_dims("shape", &a.shape)?;
    let gen_ranks = parse_usize_list("ranks", &a.ranks)?;
    let d = shape.len();
    if a.rank == 0 {
        return Err(NttError::Config("--rank must be positive".to_string()));
    }
    if a.repeat == 0 {
        return Err(NttError::Config("--repeat must be positive".to_string()));
    }
    let plist = parse_usize_list("grid-list", &a.grid_list)?;
    if plist.is_empty() || plist.contains(&0) {
        return Err(NttError::Config(
            "--grid-list expects positive worker counts".to_string(),
        ));
    }
    MethodRegistry::standard().get(&a.method)?;

    let scratch = ScratchDir::new()?;
    let spec = GenSpec {
        shape: shape.clone(),
        ranks: gen_ranks,
        seed: a.seed,
        noise_variance: None,
        clip: false,
    };
    let mut rows = Vec::new();
    for &p in &plist {
        let dims = auto_grid(p, d);
        for rep in 0..a.repeat {
            let mut nmf = NmfConfig::new(1, a.seed);
            nmf.max_iters = a.iters;
            let cfg = TtConfig {
                eps: vec![0.1],
                fixed_ranks: Some(vec![a.rank; d.saturating_sub(1)]),
                nmf,
                p1: dims[0],
                gram_cap: DEFAULT_GRAM_CAP,
                workdir: scratch.path().join(format!("p{p}_rep{rep}")),
            };
            let outs = run_spmd(p, |world| -> Result<TtReport> {
                let reg = MethodRegistry::standard();
                let solver = reg.get(&a.method)?;
                let grid = ProcessGrid::new(world.clone_comm(), dims.clone())?;
                let t = datagen::generate(&spec, &grid)?;
                let (_, report) = dist_ntt(NttInput::Tensor(&t, &grid), solver, &cfg, world)?;
                Ok(report)
            });
            let report = first_error(outs)?.swap_remove(0);
            let mut categories = [0.0f64; 8];
            accumulate_timing(&mut categories, &report);
            let solver_s: f64 = report.stages.iter().map(|s| s.solver_s).sum();
            rows.push(BenchRow {
                grid: join_dims(&dims),
                p,
                repeat: rep,
                iters: a.iters,
                categories,
                solver_s,
                total_s: report.total_s,
            });
        }
    }
    let csv = bench_csv(&rows);
    match &a.out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(|e| NttError::store_io(path, e))?;
            println!("bench_csv: {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
