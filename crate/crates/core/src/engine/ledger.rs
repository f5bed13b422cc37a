use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("insufficient KV capacity: requested {requested}, free {free}")]
    Insufficient { requested: u64, free: u64 },
    #[error("release of {requested} tokens exceeds resident {resident}")]
    Underflow { requested: u64, resident: u64 },
}

/// Token-granular KV-cache accounting. `0 <= resident <= capacity` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryLedger {
    capacity: u64,
    resident: u64,
}

impl MemoryLedger {
    pub fn new(capacity: u64) -> Self {
        MemoryLedger { capacity, resident: 0 }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn resident(&self) -> u64 {
        self.resident
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.resident
    }

    /// Reserves `tokens`, leaving the ledger untouched when they do not fit.
    pub fn reserve(&mut self, tokens: u64) -> Result<(), LedgerError> {
        if tokens > self.free() {
            return Err(LedgerError::Insufficient {
                requested: tokens,
                free: self.free(),
            });
        }
        self.resident += tokens;
        Ok(())
    }

    /// Releasing more than is resident is a bookkeeping bug in the caller.
    pub fn release(&mut self, tokens: u64) -> Result<(), LedgerError> {
        if tokens > self.resident {
            return Err(LedgerError::Underflow {
                requested: tokens,
                resident: self.resident,
            });
        }
        self.resident -= tokens;
        Ok(())
    }
}
