//! Thread-local recycling of the large scan-cache buffers.
//!
//! Each selective-scan op keeps two L*D*S caches alive until its graph is
//! dropped. At training shapes those are a quarter megabyte each, built and
//! dropped once per example; without reuse every one crosses the allocator's
//! mmap threshold and costs page faults instead of arithmetic.

use std::cell::RefCell;

const MAX_POOLED: usize = 32;

thread_local! {
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A length-`n` buffer with unspecified contents (callers overwrite fully).
pub(crate) fn take(n: usize) -> Vec<f64> {
    let recycled = POOL.with(|p| p.borrow_mut().pop());
    match recycled {
        Some(mut v) => {
            if v.len() >= n {
                v.truncate(n);
            } else {
                v.resize(n, 0.0);
            }
            v
        }
        None => vec![0.0; n],
    }
}

pub(crate) fn give(v: Vec<f64>) {
    if v.capacity() == 0 {
        return;
    }
    POOL.with(|p| {
        let mut pool = p.borrow_mut();
        if pool.len() < MAX_POOLED {
            pool.push(v);
        }
    });
}
