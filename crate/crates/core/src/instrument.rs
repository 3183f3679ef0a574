//! Runtime operation counter.
//!
//! Every tensor kernel reports its arithmetic cost here under a fixed
//! convention: a matmul of `m x k` by `k x n` costs `2mkn`, a softmax over a
//! row of length `n` costs `5n`, and any other element-wise kernel costs one
//! per output element. Shape-only kernels (concat, slice, transpose,
//! broadcast) cost nothing. Counting is off unless a [`measure`] scope is
//! active on the current thread, so the kernels pay only a thread-local check.

use std::cell::Cell;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add_flops(n: u64) {
    ACTIVE.with(|a| {
        if a.get() {
            FLOPS.with(|f| f.set(f.get() + n));
        }
    });
}

/// Runs `f` and returns its result together with the flops it executed.
/// Nested scopes are not supported: the inner scope's total is also charged
/// to the outer one.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let was_active = ACTIVE.with(|a| a.replace(true));
    let before = FLOPS.with(|c| c.get());
    let out = f();
    let after = FLOPS.with(|c| c.get());
    ACTIVE.with(|a| a.set(was_active));
    if !was_active {
        FLOPS.with(|c| c.set(0));
    }
    (out, after - before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_by_default() {
        add_flops(10);
        let ((), n) = measure(|| add_flops(3));
        assert_eq!(n, 3);
    }

    #[test]
    fn nested_scopes_accumulate() {
        let (inner, outer) = measure(|| {
            add_flops(2);
            let ((), inner) = measure(|| add_flops(5));
            inner
        });
        assert_eq!(inner, 5);
        assert_eq!(outer, 7);
    }
}
