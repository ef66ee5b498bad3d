use serde::{Deserialize, Serialize};

/// Global merge schedule: a merge is attempted after step `i` iff `i % N == 0`
/// (steps are counted from 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct P4Schedule {
    merge_interval: u64,
    step: u64,
    merges_attempted: u64,
}

impl P4Schedule {
    pub fn new(merge_interval: u64) -> Self {
        assert!(merge_interval > 0, "merge interval must be positive");
        Self {
            merge_interval,
            step: 0,
            merges_attempted: 0,
        }
    }

    pub fn merge_interval(&self) -> u64 {
        self.merge_interval
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn merges_attempted(&self) -> u64 {
        self.merges_attempted
    }

    /// Advances the step counter; returns whether this step should merge.
    pub fn advance(&mut self) -> bool {
        self.step += 1;
        let fire = self.step.is_multiple_of(self.merge_interval);
        if fire {
            self.merges_attempted += 1;
        }
        fire
    }
}
