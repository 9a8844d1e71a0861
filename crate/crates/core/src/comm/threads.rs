//! In-process SPMD backend: ranks run as threads of one process and meet at
//! exchange points with barrier semantics.
//!
//! Each group of ranks shares an [`Exchange`]: every member deposits its
//! contribution into its own slot, waits until all slots are filled, computes
//! its result from the full slot table, and the last reader resets the table
//! for the next collective. Because every member sees the identical table,
//! contract checks (matching kinds and shapes) fail on all members at once
//! instead of deadlocking, and reductions can run in rank-ascending slot
//! order on every member, which makes results bit-identical across runs.
//!
//! A panic inside one worker poisons every exchange so blocked peers fail
//! fast; the original panic is then resurfaced by [`run_spmd`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use crate::error::{NttError, Result};
use crate::comm::{Category, Communicator, ScatterAxis, TimingReport};

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    AllGather,
    AllReduce,
    ReduceScatter { rows: usize, cols: usize, axis: ScatterAxis },
    Barrier,
    Split { color: usize },
}

#[derive(Debug, Clone)]
struct Deposit {
    kind: Kind,
    data: Vec<f64>,
}

#[derive(Debug, PartialEq)]
enum Phase {
    Collecting,
    Draining,
}

struct ExchangeState {
    phase: Phase,
    deposits: Vec<Option<Deposit>>,
    n_deposited: usize,
    n_read: usize,
    poisoned: bool,
}

/// One synchronization point shared by all members of a group.
struct Exchange {
    state: Mutex<ExchangeState>,
    cv: Condvar,
}

impl Exchange {
    fn new(size: usize, poisoned: bool) -> Self {
        Exchange {
            state: Mutex::new(ExchangeState {
                phase: Phase::Collecting,
                deposits: (0..size).map(|_| None).collect(),
                n_deposited: 0,
                n_read: 0,
                poisoned,
            }),
            cv: Condvar::new(),
        }
    }

    /// Deposits `dep` in slot `pos` and returns a copy of the full slot
    /// table once every member has deposited.
    fn exchange(&self, pos: usize, dep: Deposit) -> Result<Vec<Deposit>> {
        let size = {
            let mut st = self.state.lock().unwrap();
            while st.phase == Phase::Draining && !st.poisoned {
                st = self.cv.wait(st).unwrap();
            }
            if st.poisoned {
                return Err(poison_error());
            }
            if st.deposits[pos].is_some() {
                return Err(NttError::CollectiveContract(format!(
                    "rank slot {pos} deposited twice in one collective"
                )));
            }
            let size = st.deposits.len();
            st.deposits[pos] = Some(dep);
            st.n_deposited += 1;
            if st.n_deposited == size {
                st.phase = Phase::Draining;
                self.cv.notify_all();
            }
            size
        };
        let mut st = self.state.lock().unwrap();
        while st.phase == Phase::Collecting && !st.poisoned {
            st = self.cv.wait(st).unwrap();
        }
        if st.poisoned {
            return Err(poison_error());
        }
        let view: Vec<Deposit> = st
            .deposits
            .iter()
            .map(|d| d.as_ref().expect("all slots filled").clone())
            .collect();
        st.n_read += 1;
        if st.n_read == size {
            for slot in &mut st.deposits {
                *slot = None;
            }
            st.n_deposited = 0;
            st.n_read = 0;
            st.phase = Phase::Collecting;
            self.cv.notify_all();
        }
        Ok(view)
    }

    fn poison(&self) {
        let mut st = self.state.lock().unwrap();
        st.poisoned = true;
        self.cv.notify_all();
    }
}

fn poison_error() -> NttError {
    NttError::CollectiveContract("worker group poisoned by a peer rank failure".into())
}

/// Shared table of exchanges, keyed by the world-rank membership of each
/// group. All members derive the same key, so the first to arrive creates
/// the exchange and the rest attach to it.
pub(crate) struct ExchangeRegistry {
    map: Mutex<HashMap<Vec<usize>, Arc<Exchange>>>,
    poisoned: AtomicBool,
}

impl ExchangeRegistry {
    fn new() -> Self {
        ExchangeRegistry {
            map: Mutex::new(HashMap::new()),
            poisoned: AtomicBool::new(false),
        }
    }

    fn get_or_create(&self, members: &[usize]) -> Arc<Exchange> {
        let mut map = self.map.lock().unwrap();
        map.entry(members.to_vec())
            .or_insert_with(|| {
                Arc::new(Exchange::new(
                    members.len(),
                    self.poisoned.load(Ordering::SeqCst),
                ))
            })
            .clone()
    }

    fn poison_all(&self) {
        self.poisoned.store(true, Ordering::SeqCst);
        let map = self.map.lock().unwrap();
        for ex in map.values() {
            ex.poison();
        }
    }
}

/// Communicator handle for one rank of one group. Confined to the worker
/// thread that created it.
pub struct ThreadComm {
    members: Arc<Vec<usize>>,
    pos: usize,
    registry: Arc<ExchangeRegistry>,
    exchange: Arc<Exchange>,
    timers: Rc<RefCell<[f64; 8]>>,
}

impl ThreadComm {
    fn new(
        members: Arc<Vec<usize>>,
        pos: usize,
        registry: Arc<ExchangeRegistry>,
        timers: Rc<RefCell<[f64; 8]>>,
    ) -> Self {
        let exchange = registry.get_or_create(&members);
        ThreadComm {
            members,
            pos,
            registry,
            exchange,
            timers,
        }
    }

    /// A standalone single-rank communicator; collectives become identities.
    pub fn solo() -> Self {
        ThreadComm::new(
            Arc::new(vec![0]),
            0,
            Arc::new(ExchangeRegistry::new()),
            Rc::new(RefCell::new([0.0; 8])),
        )
    }

    /// Runs one collective and validates that all members agreed on it.
    /// Split colors are each rank's own choice; every other kind must match
    /// exactly, block length included.
    fn collective(&self, kind: Kind, data: Vec<f64>, cat: Option<Category>) -> Result<Vec<Deposit>> {
        fn compatible(a: &Kind, b: &Kind) -> bool {
            matches!((a, b), (Kind::Split { .. }, Kind::Split { .. })) || a == b
        }
        let start = Instant::now();
        let my_kind = kind.clone();
        let my_len = data.len();
        let view = self.exchange.exchange(self.pos, Deposit { kind, data })?;
        for (slot, dep) in view.iter().enumerate() {
            if !compatible(&dep.kind, &my_kind) || dep.data.len() != my_len {
                return Err(NttError::CollectiveContract(format!(
                    "group of {} disagreed at a collective: rank slot {} brought {:?} of {} values, \
                     rank slot {} brought {:?} of {} values",
                    self.members.len(),
                    self.pos,
                    my_kind,
                    my_len,
                    slot,
                    dep.kind,
                    dep.data.len()
                )));
            }
        }
        if let Some(cat) = cat {
            self.record(cat, start.elapsed().as_secs_f64());
        }
        Ok(view)
    }
}

impl Communicator for ThreadComm {
    fn rank(&self) -> usize {
        self.pos
    }

    fn size(&self) -> usize {
        self.members.len()
    }

    fn all_gather(&self, local: &[f64]) -> Result<Vec<f64>> {
        let view = self.collective(Kind::AllGather, local.to_vec(), Some(Category::Ag))?;
        let mut out = Vec::with_capacity(local.len() * view.len());
        for dep in &view {
            out.extend_from_slice(&dep.data);
        }
        Ok(out)
    }

    fn all_reduce_sum(&self, local: &[f64]) -> Result<Vec<f64>> {
        let view = self.collective(Kind::AllReduce, local.to_vec(), Some(Category::Ar))?;
        let mut out = vec![0.0; local.len()];
        for dep in &view {
            for (o, v) in out.iter_mut().zip(&dep.data) {
                *o += v;
            }
        }
        Ok(out)
    }

    fn reduce_scatter_sum(
        &self,
        local: &[f64],
        rows: usize,
        cols: usize,
        axis: ScatterAxis,
    ) -> Result<Vec<f64>> {
        if local.len() != rows * cols {
            return Err(NttError::Dimension(format!(
                "reduce_scatter: block of {} values is not {rows}x{cols}",
                local.len()
            )));
        }
        let view = self.collective(
            Kind::ReduceScatter { rows, cols, axis },
            local.to_vec(),
            Some(Category::Rsc),
        )?;
        let g = view.len();
        let extent = match axis {
            ScatterAxis::Rows => rows,
            ScatterAxis::Cols => cols,
        };
        if extent % g != 0 {
            return Err(NttError::CollectiveContract(format!(
                "reduce_scatter: axis extent {extent} is not divisible by group size {g}"
            )));
        }
        let mut sum = vec![0.0; rows * cols];
        for dep in &view {
            for (o, v) in sum.iter_mut().zip(&dep.data) {
                *o += v;
            }
        }
        let piece = extent / g;
        let out = match axis {
            ScatterAxis::Rows => {
                sum[self.pos * piece * cols..(self.pos + 1) * piece * cols].to_vec()
            }
            ScatterAxis::Cols => {
                let mut out = Vec::with_capacity(rows * piece);
                for r in 0..rows {
                    let start = r * cols + self.pos * piece;
                    out.extend_from_slice(&sum[start..start + piece]);
                }
                out
            }
        };
        Ok(out)
    }

    fn barrier(&self) -> Result<()> {
        self.collective(Kind::Barrier, Vec::new(), None)?;
        Ok(())
    }

    fn split(&self, color: usize) -> Result<Box<dyn Communicator>> {
        let view = self.collective(Kind::Split { color }, Vec::new(), None)?;
        let mut members = Vec::new();
        let mut pos = 0;
        for (slot, dep) in view.iter().enumerate() {
            if let Kind::Split { color: c } = dep.kind {
                if c == color {
                    if slot == self.pos {
                        pos = members.len();
                    }
                    members.push(self.members[slot]);
                }
            }
        }
        Ok(Box::new(ThreadComm::new(
            Arc::new(members),
            pos,
            self.registry.clone(),
            self.timers.clone(),
        )))
    }

    fn clone_comm(&self) -> Box<dyn Communicator> {
        Box::new(ThreadComm {
            members: self.members.clone(),
            pos: self.pos,
            registry: self.registry.clone(),
            exchange: self.exchange.clone(),
            timers: self.timers.clone(),
        })
    }

    fn record(&self, cat: Category, secs: f64) {
        self.timers.borrow_mut()[cat.index()] += secs;
    }

    fn timing_report(&self) -> TimingReport {
        TimingReport {
            secs: *self.timers.borrow(),
        }
    }

    fn reset_timers(&self) {
        *self.timers.borrow_mut() = [0.0; 8];
    }
}

/// Runs `f` as `p` concurrent ranks and returns their results in rank order.
///
/// The split contract would let a collective on a kind mismatch deadlock if
/// a rank stopped calling collectives entirely, so workers that panic poison
/// every exchange first; the panic is then re-raised on the caller's thread.
pub fn run_spmd<R, F>(p: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Box<dyn Communicator>) -> R + Sync,
{
    assert!(p > 0, "worker group must have at least one rank");
    let registry = Arc::new(ExchangeRegistry::new());
    let f = &f;
    let outcomes: Vec<std::result::Result<R, Box<dyn std::any::Any + Send>>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..p)
                .map(|rank| {
                    let registry = registry.clone();
                    let members: Arc<Vec<usize>> = Arc::new((0..p).collect());
                    scope.spawn(move || {
                        let comm = ThreadComm::new(
                            members,
                            rank,
                            registry.clone(),
                            Rc::new(RefCell::new([0.0; 8])),
                        );
                        match catch_unwind(AssertUnwindSafe(|| f(Box::new(comm)))) {
                            Ok(v) => Ok(v),
                            Err(payload) => {
                                registry.poison_all();
                                Err(payload)
                            }
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread must not die outside catch_unwind"))
                .collect()
        });
    let mut results = Vec::with_capacity(p);
    for outcome in outcomes {
        match outcome {
            Ok(v) => results.push(v),
            Err(payload) => resume_unwind(payload),
        }
    }
    results
}
