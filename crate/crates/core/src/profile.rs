//! Operation counting and temporary-allocation accounting.
//!
//! Counting is thread-local and off by default. [`count_macs`] switches it on for the
//! duration of a closure and returns a [`MacReport`]. Ops call the `record_*` functions
//! unconditionally; they are no-ops when nothing is listening. Counting only observes
//! shapes, so an instrumented run is bit-identical to an uninstrumented one.
//!
//! Accounting rules:
//! * matmul `(n × k)·(k × m)` is `n·k·m` MACs
//! * conv is `c_out · c_in/groups · kh · kw · h_out · w_out` MACs per batch item
//! * everything else (activations, adds, normalizer reductions such as softmax
//!   denominators and the linear-attention `φ(q)ᵀz`) is an elementwise op
//! * temporary buffers of fewer than [`TEMP_EXEMPT_ELEMENTS`] elements are not tracked

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const TEMP_EXEMPT_ELEMENTS: usize = 1024;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub matmul_macs: u64,
    pub conv_macs: u64,
    pub elementwise_ops: u64,
    /// Highest simultaneous temporary element count.
    pub peak_temp_elements: u64,
    /// Largest single temporary buffer.
    pub largest_temp_elements: u64,
    /// Rows whose attention denominator hit the 1e-6 guard.
    pub guard_triggers: u64,
    /// MACs attributed to each named scope (a MAC counts once toward every enclosing scope).
    pub scopes: BTreeMap<String, u64>,
}

impl MacReport {
    pub fn total_macs(&self) -> u64 {
        self.matmul_macs + self.conv_macs
    }

    pub fn scope(&self, name: &str) -> u64 {
        self.scopes.get(name).copied().unwrap_or(0)
    }

    /// Sequential composition: counts add, peaks take the max.
    pub fn absorb(&mut self, other: &MacReport) {
        self.matmul_macs += other.matmul_macs;
        self.conv_macs += other.conv_macs;
        self.elementwise_ops += other.elementwise_ops;
        self.guard_triggers += other.guard_triggers;
        self.peak_temp_elements = self.peak_temp_elements.max(other.peak_temp_elements);
        self.largest_temp_elements = self.largest_temp_elements.max(other.largest_temp_elements);
        for (k, v) in &other.scopes {
            *self.scopes.entry(k.clone()).or_default() += v;
        }
    }
}

#[derive(Default)]
struct Recorder {
    report: MacReport,
    live_temp: u64,
    scopes: Vec<&'static str>,
}

impl Recorder {
    fn add_macs(&mut self, macs: u64) {
        for (i, s) in self.scopes.iter().enumerate() {
            if self.scopes[..i].contains(s) {
                continue;
            }
            *self.report.scopes.entry((*s).to_string()).or_default() += macs;
        }
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Recorder>> = const { RefCell::new(None) };
}

fn with_recorder(f: impl FnOnce(&mut Recorder)) {
    ACTIVE.with(|a| {
        if let Some(r) = a.borrow_mut().as_mut() {
            f(r);
        }
    });
}

pub fn is_active() -> bool {
    ACTIVE.with(|a| a.borrow().is_some())
}

/// Runs `f` with counting enabled and returns its result together with the counts.
///
/// Nested calls report their own counts and also feed them to the enclosing counter.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, MacReport) {
    let outer = ACTIVE.with(|a| a.borrow_mut().replace(Recorder::default()));
    let outer_scopes = outer.as_ref().map(|o| o.scopes.clone()).unwrap_or_default();
    ACTIVE.with(|a| {
        if let Some(r) = a.borrow_mut().as_mut() {
            r.scopes = outer_scopes.clone();
        }
    });
    let out = f();
    let inner = ACTIVE
        .with(|a| a.borrow_mut().take())
        .expect("recorder present");
    let mut report = inner.report;
    if let Some(mut o) = outer {
        let live = o.live_temp;
        o.report.matmul_macs += report.matmul_macs;
        o.report.conv_macs += report.conv_macs;
        o.report.elementwise_ops += report.elementwise_ops;
        o.report.guard_triggers += report.guard_triggers;
        o.report.peak_temp_elements = o
            .report
            .peak_temp_elements
            .max(live + report.peak_temp_elements);
        o.report.largest_temp_elements = o
            .report
            .largest_temp_elements
            .max(report.largest_temp_elements);
        for (k, v) in &report.scopes {
            *o.report.scopes.entry(k.clone()).or_default() += v;
        }
        ACTIVE.with(|a| *a.borrow_mut() = Some(o));
    }
    // Scopes inherited from the outer counter are not this closure's business.
    for s in outer_scopes {
        report.scopes.remove(s);
    }
    (out, report)
}

/// Attributes all MACs recorded inside `f` to `name`.
pub fn scope<R>(name: &'static str, f: impl FnOnce() -> R) -> R {
    with_recorder(|r| r.scopes.push(name));
    let out = f();
    with_recorder(|r| {
        r.scopes.pop();
    });
    out
}

pub fn record_matmul(n: usize, k: usize, m: usize) {
    with_recorder(|r| {
        let macs = (n * k * m) as u64;
        r.report.matmul_macs += macs;
        r.add_macs(macs);
    });
}

pub fn record_conv(macs: u64) {
    with_recorder(|r| {
        r.report.conv_macs += macs;
        r.add_macs(macs);
    });
}

pub fn record_elementwise(ops: usize) {
    with_recorder(|r| r.report.elementwise_ops += ops as u64);
}

pub fn record_guard(rows: usize) {
    with_recorder(|r| r.report.guard_triggers += rows as u64);
}

/// Registers a temporary buffer of `elements` for the lifetime of the guard.
#[must_use = "the allocation is released when the guard drops"]
pub fn temp(elements: usize) -> TempGuard {
    let tracked = if elements < TEMP_EXEMPT_ELEMENTS { 0 } else { elements as u64 };
    if tracked > 0 {
        with_recorder(|r| {
            r.live_temp += tracked;
            r.report.peak_temp_elements = r.report.peak_temp_elements.max(r.live_temp);
            r.report.largest_temp_elements = r.report.largest_temp_elements.max(tracked);
        });
    }
    TempGuard { tracked }
}

pub struct TempGuard {
    tracked: u64,
}

impl Drop for TempGuard {
    fn drop(&mut self) {
        if self.tracked > 0 {
            let t = self.tracked;
            with_recorder(|r| r.live_temp = r.live_temp.saturating_sub(t));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn off_by_default() {
        record_matmul(10, 10, 10);
        assert!(!is_active());
        let ((), rep) = count_macs(|| record_matmul(2, 3, 4));
        assert_eq!(rep.matmul_macs, 24);
        assert!(!is_active());
    }

    #[test]
    fn scopes_and_nesting() {
        let ((), outer) = count_macs(|| {
            scope("a", || {
                record_matmul(1, 1, 5);
                let ((), inner) = count_macs(|| scope("b", || record_conv(7)));
                assert_eq!(inner.total_macs(), 7);
                assert_eq!(inner.scope("b"), 7);
                assert_eq!(inner.scope("a"), 0);
            });
            record_elementwise(3);
        });
        assert_eq!(outer.total_macs(), 12);
        assert_eq!(outer.scope("a"), 12);
        assert_eq!(outer.scope("b"), 7);
        assert_eq!(outer.elementwise_ops, 3);
    }

    #[test]
    fn temp_peaks() {
        let ((), rep) = count_macs(|| {
            let _a = temp(2000);
            {
                let _b = temp(3000);
            }
            let _c = temp(1500);
            let _tiny = temp(100);
        });
        assert_eq!(rep.peak_temp_elements, 5000);
        assert_eq!(rep.largest_temp_elements, 3000);
    }
}
