use std::collections::BTreeMap;

use super::{PersistentState, Record, Storage, StorageError};
use crate::types::ConfigId;

/// In-memory backend. It survives simulated crashes because the simulator
/// keeps it outside the process state it throws away.
#[derive(Debug, Clone, Default)]
pub struct VolatileStorage {
    states: BTreeMap<ConfigId, PersistentState>,
    writes: u64,
}

impl VolatileStorage {
    pub fn new() -> Self {
        VolatileStorage::default()
    }

    /// Number of successful writes so far.
    pub fn writes(&self) -> u64 {
        self.writes
    }
}

impl Storage for VolatileStorage {
    fn configs(&self) -> Result<Vec<ConfigId>, StorageError> {
        Ok(self.states.keys().copied().collect())
    }

    fn load(&self, config: ConfigId) -> Result<Option<PersistentState>, StorageError> {
        Ok(self.states.get(&config).cloned())
    }

    fn write(&mut self, config: ConfigId, record: &Record) -> Result<(), StorageError> {
        match record {
            Record::Init(state) => {
                self.states.insert(config, state.clone());
            }
            other => {
                let state = self.states.get_mut(&config).ok_or(StorageError::Missing(config))?;
                state.apply(other)?;
            }
        }
        self.writes += 1;
        Ok(())
    }

    fn destroy(&mut self, config: ConfigId) -> Result<(), StorageError> {
        self.states.remove(&config);
        Ok(())
    }
}
