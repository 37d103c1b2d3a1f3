use std::collections::BTreeSet;
use std::sync::{Arc, Condvar, Mutex};

use crate::error::{Error, Result};
use crate::types::RailId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Io,
    Communication,
    Computation,
}

#[derive(Debug)]
struct PoolState {
    free: usize,
    holders: BTreeSet<RailId>,
}

/// Compute-token semaphore. Only the computation phase draws from the pool;
/// io and communication grants are immediate and hold a single token outside
/// the budget.
#[derive(Debug, Clone)]
pub struct ComputePool {
    total: usize,
    inner: Arc<(Mutex<PoolState>, Condvar)>,
}

impl ComputePool {
    pub fn new(total_tokens: usize) -> Self {
        let total = total_tokens.max(1);
        Self { total, inner: Arc::new((Mutex::new(PoolState { free: total, holders: BTreeSet::new() }), Condvar::new())) }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn outstanding(&self) -> usize {
        self.total - self.inner.0.lock().expect("pool lock").free
    }

    /// Grants tokens for `phase`. A rail may hold one grant at a time.
    /// Computation demand above the pool size is capped to the pool size.
    pub fn acquire(&self, rail: RailId, phase: Phase, demand: usize) -> Result<Grant> {
        let (lock, cv) = &*self.inner;
        let mut st = lock.lock().expect("pool lock");
        if st.holders.contains(&rail) {
            return Err(Error::GrantOutstanding(rail));
        }
        let tokens = match phase {
            Phase::Io | Phase::Communication => {
                st.holders.insert(rail);
                return Ok(Grant { pool: self.clone(), rail, tokens: 0, phase });
            }
            Phase::Computation => demand.clamp(1, self.total),
        };
        st.holders.insert(rail);
        while st.free < tokens {
            st = cv.wait(st).expect("pool lock");
        }
        st.free -= tokens;
        Ok(Grant { pool: self.clone(), rail, tokens, phase })
    }

    fn release(&self, rail: RailId, tokens: usize) {
        let (lock, cv) = &*self.inner;
        let mut st = lock.lock().expect("pool lock");
        st.free += tokens;
        st.holders.remove(&rail);
        cv.notify_all();
    }
}

/// Tokens held for one phase; released on drop.
#[derive(Debug)]
pub struct Grant {
    pool: ComputePool,
    rail: RailId,
    tokens: usize,
    phase: Phase,
}

impl Grant {
    pub fn tokens(&self) -> usize {
        self.tokens.max(1)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }
}

impl Drop for Grant {
    fn drop(&mut self) {
        self.pool.release(self.rail, self.tokens);
    }
}
