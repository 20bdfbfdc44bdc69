//! Bonded stake, slashing and the slashed-funds treasury.
//!
//! `Σ balances + treasury` is fixed once deposits are made: slashing moves
//! stake into the treasury and rewards move it back out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("{participant} was already slashed for {offense}")]
    AlreadySlashed { participant: String, offense: OffenseKey },
    #[error("{participant} has {available} free stake, needs {requested}")]
    InsufficientBalance { participant: String, available: f64, requested: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OffenseKind {
    /// Proven by a fraud proof or a failed spot-check.
    InvalidExecution,
    /// A dispute the claimant lost.
    FrivolousDispute { session_id: u64 },
}

/// Identifies one offense; a participant is slashed at most once per key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OffenseKey {
    pub batch_id: u64,
    pub tuple_index: u32,
    pub kind: OffenseKind,
}

impl fmt::Display for OffenseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            OffenseKind::InvalidExecution => {
                write!(f, "invalid-execution(batch={},tuple={})", self.batch_id, self.tuple_index)
            }
            OffenseKind::FrivolousDispute { session_id } => write!(
                f,
                "frivolous-dispute(batch={},tuple={},session={})",
                self.batch_id, self.tuple_index, session_id
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlashEvent {
    pub participant: String,
    /// Amount actually debited.
    pub amount: f64,
    /// Requested minus debited; non-zero when the stake ran out.
    pub shortfall: f64,
    pub offense: OffenseKey,
    pub reason: String,
    pub time: f64,
}

#[derive(Clone, Debug, Default)]
pub struct StakeLedger {
    balances: BTreeMap<String, f64>,
    locked: BTreeMap<String, f64>,
    treasury: f64,
    minted: f64,
    slash_events: Vec<SlashEvent>,
    slashed: BTreeSet<(OffenseKey, String)>,
}

impl StakeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Genesis deposit; the only way stake enters the system.
    pub fn deposit(&mut self, participant: &str, amount: f64) {
        assert!(amount >= 0.0, "negative deposit");
        *self.balances.entry(participant.to_string()).or_default() += amount;
        self.minted += amount;
    }

    pub fn balance(&self, participant: &str) -> f64 {
        self.balances.get(participant).copied().unwrap_or(0.0)
    }

    pub fn locked(&self, participant: &str) -> f64 {
        self.locked.get(participant).copied().unwrap_or(0.0)
    }

    pub fn free_balance(&self, participant: &str) -> f64 {
        (self.balance(participant) - self.locked(participant)).max(0.0)
    }

    pub fn treasury(&self) -> f64 {
        self.treasury
    }

    pub fn slash_events(&self) -> &[SlashEvent] {
        &self.slash_events
    }

    pub fn total_slashed(&self) -> f64 {
        self.slash_events.iter().map(|e| e.amount).sum()
    }

    /// `Σ balances + treasury`.
    pub fn total_supply(&self) -> f64 {
        self.balances.values().sum::<f64>() + self.treasury
    }

    pub fn minted(&self) -> f64 {
        self.minted
    }

    pub fn balances(&self) -> impl Iterator<Item = (&str, f64)> {
        self.balances.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn lock(&mut self, participant: &str, amount: f64) -> Result<(), LedgerError> {
        let available = self.free_balance(participant);
        if available < amount {
            return Err(LedgerError::InsufficientBalance {
                participant: participant.to_string(),
                available,
                requested: amount,
            });
        }
        *self.locked.entry(participant.to_string()).or_default() += amount;
        Ok(())
    }

    pub fn unlock(&mut self, participant: &str, amount: f64) {
        if let Some(l) = self.locked.get_mut(participant) {
            *l = (*l - amount).max(0.0);
        }
    }

    /// Debits up to `amount` into the treasury. A stake smaller than `amount` is
    /// taken in full and the remainder recorded as shortfall.
    pub fn slash(
        &mut self,
        participant: &str,
        amount: f64,
        offense: OffenseKey,
        reason: &str,
        time: f64,
    ) -> Result<&SlashEvent, LedgerError> {
        let key = (offense, participant.to_string());
        if self.slashed.contains(&key) {
            return Err(LedgerError::AlreadySlashed { participant: participant.to_string(), offense });
        }
        let balance = self.balances.entry(participant.to_string()).or_default();
        let debit = amount.min(*balance).max(0.0);
        *balance -= debit;
        let remaining = *balance;
        if let Some(l) = self.locked.get_mut(participant) {
            *l = l.min(remaining);
        }
        self.treasury += debit;
        self.slashed.insert(key);
        self.slash_events.push(SlashEvent {
            participant: participant.to_string(),
            amount: debit,
            shortfall: amount - debit,
            offense,
            reason: reason.to_string(),
            time,
        });
        Ok(self.slash_events.last().expect("just pushed"))
    }

    /// Pays out of the treasury; returns the amount actually paid.
    pub fn pay_from_treasury(&mut self, to: &str, amount: f64) -> f64 {
        let paid = amount.min(self.treasury).max(0.0);
        self.treasury -= paid;
        *self.balances.entry(to.to_string()).or_default() += paid;
        paid
    }
}
