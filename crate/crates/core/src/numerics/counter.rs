//! Op-counting hook.
//!
//! Primitives that perform multiply-accumulates call [`record`] with the
//! number of MACs they executed. Counting is off unless a [`MacCounter`] is
//! live on the current thread; counts are attributed to the innermost
//! [`scope`] label.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{bail, Result};

#[derive(Default)]
struct State {
    scope: String,
    counts: BTreeMap<String, u64>,
}

thread_local! {
    static STATE: RefCell<Option<State>> = const { RefCell::new(None) };
}

/// Adds `macs` to the current scope. No-op when counting is disabled.
#[inline]
pub fn record(macs: u64) {
    if macs == 0 {
        return;
    }
    STATE.with(|s| {
        if let Some(state) = s.borrow_mut().as_mut() {
            let key = state.scope.clone();
            *state.counts.entry(key).or_insert(0) += macs;
        }
    });
}

pub fn is_enabled() -> bool {
    STATE.with(|s| s.borrow().is_some())
}

/// Live counting session on the current thread.
pub struct MacCounter {
    _private: (),
}

impl MacCounter {
    /// Enables the hook. Fails if a session is already active on this thread.
    pub fn start() -> Result<Self> {
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            if s.is_some() {
                bail!(Contract, "MAC counter already active on this thread");
            }
            *s = Some(State::default());
            Ok(MacCounter { _private: () })
        })
    }

    /// Disables the hook and returns the per-scope counts.
    pub fn finish(self) -> BTreeMap<String, u64> {
        let counts = STATE.with(|s| s.borrow_mut().take().map(|st| st.counts));
        std::mem::forget(self);
        counts.unwrap_or_default()
    }
}

impl Drop for MacCounter {
    fn drop(&mut self) {
        STATE.with(|s| s.borrow_mut().take());
    }
}

/// Current per-scope counts; a contract error when the hook is not enabled.
pub fn snapshot() -> Result<BTreeMap<String, u64>> {
    STATE.with(|s| match s.borrow().as_ref() {
        Some(state) => Ok(state.counts.clone()),
        None => bail!(Contract, "MAC counting hook is not enabled"),
    })
}

/// Restores the previous scope label on drop.
pub struct ScopeGuard {
    previous: Option<String>,
}

/// Attributes subsequent [`record`] calls to `name` until the guard drops.
pub fn scope(name: &str) -> ScopeGuard {
    let previous = STATE.with(|s| {
        s.borrow_mut()
            .as_mut()
            .map(|st| std::mem::replace(&mut st.scope, name.to_string()))
    });
    ScopeGuard { previous }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        if let Some(prev) = self.previous.take() {
            STATE.with(|s| {
                if let Some(st) = s.borrow_mut().as_mut() {
                    st.scope = prev;
                }
            });
        }
    }
}
