//! Whole-tensor allocation accounting.
//!
//! A measurement session is opened with [`measure`]. While it is active,
//! every [`Tensor`](crate::Tensor) created on the current thread registers
//! its buffer size under the category currently selected by [`tagged`]
//! (or [`Category::Other`] when untagged) and releases it when dropped.
//! Sessions are thread-local, so concurrent benchmark runs on different
//! threads never see each other's allocations.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

/// Current and peak byte counts for one stream of allocations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AllocationMeter {
    current_bytes: usize,
    peak_bytes: usize,
}

impl AllocationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self, bytes: usize) {
        self.current_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.current_bytes);
    }

    pub fn release(&mut self, bytes: usize) {
        debug_assert!(bytes <= self.current_bytes, "released more than allocated");
        self.current_bytes = self.current_bytes.saturating_sub(bytes);
    }

    pub fn reset(&mut self) {
        self.current_bytes = 0;
        self.peak_bytes = 0;
    }

    pub fn current_bytes(&self) -> usize {
        self.current_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }
}

/// What an allocation is for, following the split between relative
/// embedding intermediates and relative logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Gathered relative embeddings: the `(L, L, D_h)` tensor `R` on the
    /// naive path, the effective `(L, D_h)` table on the skewed path.
    RelativeEmbedding,
    /// `Q E^T`, its padded/reshaped forms and `S^rel` itself.
    RelativeLogits,
    Other,
}

/// Result of one measurement session.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MemoryReport {
    pub total: AllocationMeter,
    pub categories: BTreeMap<Category, AllocationMeter>,
}

impl MemoryReport {
    pub fn category(&self, category: Category) -> AllocationMeter {
        self.categories.get(&category).copied().unwrap_or_default()
    }

    /// Peak bytes over the categories attributed to relative attention.
    pub fn relative_peak_bytes(&self) -> usize {
        self.category(Category::RelativeEmbedding).peak_bytes() + self.category(Category::RelativeLogits).peak_bytes()
    }

    fn allocate(&mut self, category: Category, bytes: usize) {
        self.total.allocate(bytes);
        self.categories.entry(category).or_default().allocate(bytes);
    }

    fn release(&mut self, category: Category, bytes: usize) {
        self.total.release(bytes);
        if let Some(m) = self.categories.get_mut(&category) {
            m.release(bytes);
        }
    }
}

/// Registration handle stored inside a metered tensor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ticket {
    session: u64,
    category: Category,
    bytes: usize,
}

struct Session {
    id: u64,
    report: MemoryReport,
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static ACTIVE: RefCell<Option<Session>> = const { RefCell::new(None) };
    static TAG: Cell<Category> = const { Cell::new(Category::Other) };
}

/// Runs `f` inside a fresh measurement session and returns what it allocated.
///
/// Nested sessions shadow the outer one for their duration; tensors created
/// in the outer session are not double counted by the inner one.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MemoryReport) {
    let id = NEXT_SESSION.fetch_add(1, Ordering::Relaxed);
    let outer = ACTIVE.with(|a| a.borrow_mut().replace(Session { id, report: MemoryReport::default() }));
    let out = f();
    let session = ACTIVE.with(|a| std::mem::replace(&mut *a.borrow_mut(), outer));
    let report = session.map(|s| s.report).unwrap_or_default();
    (out, report)
}

/// Attributes allocations made by `f` to `category`.
pub fn tagged<R>(category: Category, f: impl FnOnce() -> R) -> R {
    let previous = TAG.with(|t| t.replace(category));
    let out = f();
    TAG.with(|t| t.set(previous));
    out
}

pub fn is_active() -> bool {
    ACTIVE.with(|a| a.borrow().is_some())
}

pub(crate) fn register(bytes: usize) -> Option<Ticket> {
    ACTIVE.with(|a| {
        let mut guard = a.borrow_mut();
        let session = guard.as_mut()?;
        let category = TAG.with(|t| t.get());
        session.report.allocate(category, bytes);
        Some(Ticket { session: session.id, category, bytes })
    })
}

pub(crate) fn release(ticket: Ticket) {
    // try_with: tensors may be dropped during thread-local teardown.
    let _ = ACTIVE.try_with(|a| {
        if let Ok(mut guard) = a.try_borrow_mut() {
            if let Some(session) = guard.as_mut() {
                if session.id == ticket.session {
                    session.report.release(ticket.category, ticket.bytes);
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn meter_tracks_peak() {
        let mut m = AllocationMeter::new();
        m.allocate(10);
        m.allocate(5);
        m.release(10);
        assert_eq!(m.current_bytes(), 5);
        assert_eq!(m.peak_bytes(), 15);
        m.reset();
        assert_eq!((m.current_bytes(), m.peak_bytes()), (0, 0));
    }

    #[test]
    fn single_tensor_matches_analytic_bytes() {
        let (_, report) = measure(|| {
            let t = Tensor::<f32>::zeros(&[7, 13]);
            drop(t);
        });
        assert_eq!(report.total.peak_bytes(), 7 * 13 * 4);
        assert_eq!(report.total.current_bytes(), 0);

        let (_, report) = measure(|| tagged(Category::RelativeLogits, || Tensor::<f64>::zeros(&[3, 5])));
        assert_eq!(report.category(Category::RelativeLogits).peak_bytes(), 3 * 5 * 8);
    }

    #[test]
    fn tensors_outside_session_are_not_counted() {
        let outside = Tensor::<f64>::zeros(&[100]);
        let (_, report) = measure(|| {
            let inner = outside.clone();
            drop(inner);
        });
        assert_eq!(report.total.peak_bytes(), 800);
        drop(outside);
        assert!(!is_active());
    }

    #[test]
    fn reshape_does_not_allocate() {
        let (_, report) = measure(|| {
            let t = Tensor::<f32>::zeros(&[4, 6]);
            let r = t.reshape(&[6, 4]).unwrap();
            r.reshape(&[24]).unwrap()
        });
        assert_eq!(report.total.peak_bytes(), 96);
    }
}
