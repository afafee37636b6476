use serde::{Deserialize, Serialize};

use super::{Command, Reply, System, SystemConfig, SystemError};
use crate::store::{RecordKind, StateStore, StoreError, Truncation};

impl From<StoreError> for SystemError {
    fn from(e: StoreError) -> Self {
        SystemError::Store(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Sequence number of the checkpoint recovery started from.
    pub checkpoint_seq: u64,
    pub replayed: usize,
    pub truncation: Option<Truncation>,
}

/// A [`System`] whose command stream is persisted. Each command is appended
/// to the store before it is applied, and a checkpoint of the resulting state
/// is written whenever the store says one is due.
#[derive(Debug)]
pub struct Orchestrator {
    system: System,
    store: StateStore,
}

impl Orchestrator {
    /// Starts a fresh system on an empty store.
    pub fn create(config: SystemConfig, mut store: StateStore) -> Result<Self, SystemError> {
        if !store.records().is_empty() {
            return Err(SystemError::Invalid("store already holds records; recover instead".into()));
        }
        let system = System::new(config)?;
        store.append(0, RecordKind::Checkpoint, system.snapshot())?;
        Ok(Self { system, store })
    }

    pub fn in_memory(config: SystemConfig) -> Result<Self, SystemError> {
        Self::create(config, StateStore::in_memory())
    }

    /// Rebuilds state from the latest checkpoint and the commands after it.
    pub fn recover(store: StateStore) -> Result<(Self, RecoveryReport), SystemError> {
        let truncation = store.truncation().cloned();
        let records = store.records();
        let start = records.iter().rposition(|r| r.kind == RecordKind::Checkpoint).ok_or_else(|| SystemError::Invalid("log has no checkpoint".into()))?;
        let mut system = System::from_snapshot(&records[start].body)?;
        let mut replayed = 0;
        for record in &records[start + 1..] {
            if record.kind == RecordKind::Event {
                let command: Command = record.body_as()?;
                system.apply(&command);
                replayed += 1;
            }
        }
        let report = RecoveryReport { checkpoint_seq: records[start].seq, replayed, truncation };
        Ok((Self { system, store }, report))
    }

    /// Persists, then applies, one command.
    pub fn execute(&mut self, command: &Command) -> Result<Reply, SystemError> {
        self.store.append_json(self.system.now(), RecordKind::Event, command)?;
        let reply = self.system.apply(command);
        if self.store.checkpoint_due() {
            self.store.append(self.system.now(), RecordKind::Checkpoint, self.system.snapshot())?;
        }
        Ok(reply)
    }

    /// Rewrites the log as a single checkpoint of the current state.
    pub fn compact(&mut self) -> Result<u64, SystemError> {
        Ok(self.store.compact(self.system.now(), self.system.snapshot())?)
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    pub fn store(&self) -> &StateStore {
        &self.store
    }

    pub fn into_parts(self) -> (System, StateStore) {
        (self.system, self.store)
    }
}
