//! Bootstrap exchange of per-rail listen addresses.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::RailId;

pub const RENDEZVOUS_DIR_ENV: &str = "NEZHA_RENDEZVOUS_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RendezvousRecord {
    pub rank: usize,
    pub rail: RailId,
    pub addr: String,
}

/// A publish/wait key-value surface shared by all ranks.
pub trait RendezvousStore: Send + Sync {
    fn publish(&self, record: &RendezvousRecord) -> Result<()>;

    /// Returns every record currently visible.
    fn snapshot(&self) -> Result<Vec<RendezvousRecord>>;

    /// Blocks until something new may have been published or `timeout` passes.
    fn wait_change(&self, timeout: Duration) {
        std::thread::sleep(timeout.min(Duration::from_millis(5)));
    }

    /// Waits until one record exists for every `(rank, rail)` pair.
    fn wait_all(
        &self,
        world_size: usize,
        rails: &[RailId],
        timeout: Duration,
    ) -> Result<HashMap<(usize, RailId), String>> {
        let deadline = Instant::now() + timeout;
        loop {
            let mut found = HashMap::new();
            for r in self.snapshot()? {
                if r.rank < world_size && rails.contains(&r.rail) {
                    found.insert((r.rank, r.rail), r.addr);
                }
            }
            let want = world_size * rails.len();
            if found.len() == want {
                return Ok(found);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::RendezvousTimeout { missing: want - found.len() });
            }
            self.wait_change(deadline - now);
        }
    }
}

/// Directory of `rank-<r>-rail-<i>.json` files. Records are written to a
/// temporary name and renamed so readers never see partial JSON.
#[derive(Debug, Clone)]
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    /// Uses `$NEZHA_RENDEZVOUS_DIR` when set, otherwise `default`.
    pub fn from_env_or(default: impl Into<PathBuf>) -> Result<Self> {
        match std::env::var_os(RENDEZVOUS_DIR_ENV) {
            Some(dir) => Self::new(PathBuf::from(dir)),
            None => Self::new(default),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl RendezvousStore for FileStore {
    fn publish(&self, record: &RendezvousRecord) -> Result<()> {
        let name = format!("rank-{}-rail-{}.json", record.rank, record.rail);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, serde_json::to_vec(record)?)?;
        fs::rename(&tmp, self.dir.join(name))?;
        Ok(())
    }

    fn snapshot(&self) -> Result<Vec<RendezvousRecord>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let is_record = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("rank-") && n.ends_with(".json"));
            if !is_record {
                continue;
            }
            match fs::read(&path) {
                Ok(bytes) => out.push(serde_json::from_slice(&bytes)?),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }
}

/// In-process store for tests and single-process launches.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    inner: Arc<(Mutex<BTreeMap<(usize, RailId), String>>, Condvar)>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RendezvousStore for MemoryStore {
    fn publish(&self, record: &RendezvousRecord) -> Result<()> {
        let (lock, cv) = &*self.inner;
        lock.lock().expect("store lock").insert((record.rank, record.rail), record.addr.clone());
        cv.notify_all();
        Ok(())
    }

    fn snapshot(&self) -> Result<Vec<RendezvousRecord>> {
        let map = self.inner.0.lock().expect("store lock");
        Ok(map
            .iter()
            .map(|(&(rank, rail), addr)| RendezvousRecord { rank, rail, addr: addr.clone() })
            .collect())
    }

    fn wait_change(&self, timeout: Duration) {
        let (lock, cv) = &*self.inner;
        let guard = lock.lock().expect("store lock");
        let _ = cv.wait_timeout(guard, timeout.min(Duration::from_millis(50)));
    }
}
