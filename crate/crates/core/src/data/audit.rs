//! Read accounting for target-domain box annotations.
//!
//! Every access to a target sample's boxes goes through
//! [`ImageSample::boxes`](super::ImageSample::boxes), which records the read
//! against the scope active on the current thread. Pipelines wrap each
//! regime in [`scoped`] and inspect [`snapshot`] afterwards.

use std::cell::RefCell;
use std::collections::BTreeMap;

pub const UNSCOPED: &str = "unscoped";

thread_local! {
    static SCOPE: RefCell<Vec<String>> = const { RefCell::new(Vec::new()) };
    static READS: RefCell<BTreeMap<String, usize>> = const { RefCell::new(BTreeMap::new()) };
}

/// Runs `f` with `name` as the active audit scope.
pub fn scoped<R>(name: &str, f: impl FnOnce() -> R) -> R {
    SCOPE.with(|s| s.borrow_mut().push(name.to_string()));
    struct Pop;
    impl Drop for Pop {
        fn drop(&mut self) {
            SCOPE.with(|s| s.borrow_mut().pop());
        }
    }
    let _pop = Pop;
    f()
}

pub fn current_scope() -> String {
    SCOPE.with(|s| s.borrow().last().cloned().unwrap_or_else(|| UNSCOPED.to_string()))
}

pub(crate) fn record_target_box_read(n_boxes: usize) {
    let scope = current_scope();
    READS.with(|r| *r.borrow_mut().entry(scope).or_default() += n_boxes);
}

/// Target boxes read so far on this thread, keyed by scope.
pub fn snapshot() -> BTreeMap<String, usize> {
    READS.with(|r| r.borrow().clone())
}

pub fn reset() {
    READS.with(|r| r.borrow_mut().clear());
}
