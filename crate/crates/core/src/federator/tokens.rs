use serde::{Deserialize, Serialize};

use super::FederatorError;
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenEntryKind {
    Debit,
    Refund,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub time: SimTime,
    pub request_id: String,
    pub machine_id: String,
    pub kind: TokenEntryKind,
    pub amount: f64,
}

/// Per-incident allowance. Spending is recorded in an append-only ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub incident_id: String,
    pub initial_tokens: f64,
    pub spent_tokens: f64,
    pub ledger: Vec<TokenEntry>,
}

impl TokenBudget {
    pub fn new(incident_id: impl Into<String>, initial_tokens: f64) -> Self {
        Self { incident_id: incident_id.into(), initial_tokens: initial_tokens.max(0.0), spent_tokens: 0.0, ledger: Vec::new() }
    }

    pub fn remaining(&self) -> f64 {
        self.initial_tokens - self.spent_tokens
    }

    pub fn can_cover(&self, amount: f64) -> bool {
        amount <= self.remaining() + 1e-9
    }

    pub fn debit(&mut self, time: SimTime, request_id: &str, machine_id: &str, amount: f64) -> Result<(), FederatorError> {
        if !self.can_cover(amount) {
            return Err(FederatorError::InsufficientTokens {
                incident_id: self.incident_id.clone(),
                needed: amount,
                available: self.remaining(),
            });
        }
        self.spent_tokens += amount;
        self.push(time, request_id, machine_id, TokenEntryKind::Debit, amount);
        Ok(())
    }

    pub fn refund(&mut self, time: SimTime, request_id: &str, machine_id: &str, amount: f64) {
        let amount = amount.min(self.spent_tokens).max(0.0);
        self.spent_tokens -= amount;
        self.push(time, request_id, machine_id, TokenEntryKind::Refund, amount);
    }

    fn push(&mut self, time: SimTime, request_id: &str, machine_id: &str, kind: TokenEntryKind, amount: f64) {
        self.ledger.push(TokenEntry { time, request_id: request_id.into(), machine_id: machine_id.into(), kind, amount });
    }

    /// Debits minus refunds, recomputed from the ledger.
    pub fn ledger_balance(&self) -> f64 {
        self.ledger
            .iter()
            .map(|e| match e.kind {
                TokenEntryKind::Debit => e.amount,
                TokenEntryKind::Refund => -e.amount,
            })
            .sum()
    }
}
