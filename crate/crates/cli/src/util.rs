use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ntt_core::comm::CATEGORIES;
use ntt_core::driver::TtReport;
use ntt_core::error::{NttError, Result};

/// Parses an 'x'-separated extent list such as "16x16x8".
pub fn parse_dims(flag: &str, s: &str) -> Result<Vec<usize>> {
    let dims = s
        .split('x')
        .map(|part| {
            part.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| {
                    NttError::Config(format!(
                        "--{flag} expects positive extents separated by 'x', got '{s}'"
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    if dims.is_empty() {
        return Err(NttError::Config(format!("--{flag} must not be empty")));
    }
    Ok(dims)
}

/// Parses a comma-separated list of nonnegative integers such as "1,4,6,4,1".
pub fn parse_usize_list(flag: &str, s: &str) -> Result<Vec<usize>> {
    let vals = s
        .split(',')
        .map(|part| {
            part.trim().parse::<usize>().map_err(|_| {
                NttError::Config(format!(
                    "--{flag} expects comma-separated integers, got '{s}'"
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(NttError::Config(format!("--{flag} must not be empty")));
    }
    Ok(vals)
}

/// Temporary scratch root for reshape spill files. Honors NTT_WORKDIR,
/// falls back to the system temp dir, and removes itself on drop.
pub struct ScratchDir {
    path: PathBuf,
}

impl ScratchDir {
    pub fn new() -> Result<Self> {
        let base = std::env::var_os("NTT_WORKDIR")
            .map(PathBuf::from)
            .unwrap_or_else(std::env::temp_dir);
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_nanos();
        let path = base.join(format!("ntt-{}-{}", std::process::id(), nanos));
        std::fs::create_dir_all(&path).map_err(|e| NttError::store_io(&path, e))?;
        Ok(ScratchDir { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.path);
    }
}

/// Spreads p workers over d modes: prime factors of p are folded, largest
/// first, onto the mode with the smallest extent so far.
pub fn auto_grid(p: usize, d: usize) -> Vec<usize> {
    let mut dims = vec![1usize; d];
    let mut factors = Vec::new();
    let mut rest = p;
    let mut f = 2;
    while f * f <= rest {
        while rest % f == 0 {
            factors.push(f);
            rest /= f;
        }
        f += 1;
    }
    if rest > 1 {
        factors.push(rest);
    }
    for &f in factors.iter().rev() {
        let slot = (0..d).min_by_key(|&i| (dims[i], i)).unwrap_or(0);
        dims[slot] *= f;
    }
    dims
}

/// Unwraps one result per worker, surfacing the lowest-rank error.
pub fn first_error<T>(outs: Vec<Result<T>>) -> Result<Vec<T>> {
    outs.into_iter().collect()
}

pub fn join_dims(dims: &[usize]) -> String {
    dims.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub fn join_list(vals: &[usize]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Prints the run summary and per-stage tables for a finished decomposition.
pub fn print_report(report: &TtReport, compression: f64, rel_error: f64, probes: Option<usize>) {
    println!("method: {}", report.method);
    println!("shape: {}", join_dims(&report.shape));
    println!("ranks: {}", join_list(&report.ranks));
    println!("compression: {compression:.6}");
    match probes {
        Some(n) => println!("rel_error: {rel_error} ({n} probes)"),
        None => println!("rel_error: {rel_error} (full)"),
    }
    println!();
    println!(
        "{:>5} {:>6} {:>10} {:>12} {:>6} {:>9} {:>9}",
        "stage", "rank", "eps", "rel_resid", "iters", "restarts", "wall_s"
    );
    for s in &report.stages {
        let eps = match s.eps {
            Some(e) => format!("{e}"),
            None => "-".to_string(),
        };
        println!(
            "{:>5} {:>6} {:>10} {:>12.3e} {:>6} {:>9} {:>9.3}",
            s.stage,
            s.rank,
            eps,
            s.rel_residual(),
            s.iters,
            s.restarts,
            s.wall_s
        );
    }
    println!();
    print!("{:>5}", "stage");
    for cat in CATEGORIES {
        print!(" {:>9}", cat.label());
    }
    println!(" {:>9}", "total_s");
    let mut totals = [0.0f64; 8];
    let mut wall = 0.0;
    for s in &report.stages {
        print!("{:>5}", s.stage);
        for (k, cat) in CATEGORIES.iter().enumerate() {
            let v = s.timing.get(*cat);
            totals[k] += v;
            print!(" {:>9.4}", v);
        }
        wall += s.wall_s;
        println!(" {:>9.3}", s.wall_s);
    }
    print!("{:>5}", "total");
    for v in totals {
        print!(" {v:>9.4}");
    }
    println!(" {wall:>9.3}");
}

/// Writes the per-stage metrics CSV for a finished decomposition. Ratios
/// are run-level and repeat on every row.
pub fn write_metrics_csv(
    path: &Path,
    report: &TtReport,
    compression: f64,
    rel_error: f64,
) -> Result<()> {
    let mut out = String::from("stage,eps,rank,compression,rel_error");
    for cat in CATEGORIES {
        out.push(',');
        out.push_str(cat.label());
    }
    out.push_str(",total_s\n");
    for s in &report.stages {
        let eps = s.eps.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}",
            s.stage, eps, s.rank, compression, rel_error
        ));
        for cat in CATEGORIES {
            out.push_str(&format!(",{}", s.timing.get(cat)));
        }
        out.push_str(&format!(",{}\n", s.wall_s));
    }
    std::fs::write(path, out).map_err(|e| NttError::store_io(path, e))?;
    Ok(())
}

/// One bench CSV row: timings for a single decomposition run.
pub struct BenchRow {
    pub grid: String,
    pub p: usize,
    pub repeat: usize,
    pub iters: usize,
    pub categories: [f64; 8],
    pub solver_s: f64,
    pub total_s: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("grid,p,repeat,iters");
    for cat in CATEGORIES {
        out.push(',');
        out.push_str(cat.label());
    }
    out.push_str(",nmf_s,total_s\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.grid, r.p, r.repeat, r.iters));
        for (k, _) in CATEGORIES.iter().enumerate() {
            out.push_str(&format!(",{}", r.categories[k]));
        }
        out.push_str(&format!(",{},{}\n", r.solver_s, r.total_s));
    }
    out
}

/// Sums a stage timing into a running category array.
pub fn accumulate_timing(acc: &mut [f64; 8], report: &TtReport) {
    for s in &report.stages {
        for (k, cat) in CATEGORIES.iter().enumerate() {
            acc[k] += s.timing.get(*cat);
        }
    }
}
