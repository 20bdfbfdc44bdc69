//! The simulated on-chain verifier.
//!
//! [`Contract`] owns the model registry, the stake ledger and the DA store and
//! runs the batch verification logic: a VRF draw below ρ demands a validity
//! proof for one uniformly chosen tuple, otherwise the batch is provisionally
//! final and a challenge window opens.

mod ledger;
mod pricing;
mod registry;
mod vrf;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{LedgerError, OffenseKey, OffenseKind, SlashEvent, StakeLedger};
pub use pricing::{choose_rho, PriceBand, PricingPolicy};
pub use registry::{verify_poea, ModelRegistry, PoeaVerdict};
pub use vrf::{select_index, vrf_eval, vrf_verify, VrfKey, VrfOutput};

use crate::attest::{digest, digest_parts, CommitmentTuple, Digest, RootOfTrust};
use crate::dispute::{self, DisputeError, DisputeOutcome, DisputeSession, OpenRequest, WindowCheck};
use crate::model_exec::{execute, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContractError {
    #[error("measurement {mrenclave} already attributed to {existing}, cannot register for {requested}")]
    AmbiguousAttribution { mrenclave: Digest, existing: String, requested: String },
    #[error("invalid pricing policy: {0}")]
    InvalidPolicy(String),
    #[error("sequencer {sequencer} has {available} free stake, batch requires {required}")]
    InsufficientStake { sequencer: String, available: f64, required: f64 },
    #[error("query payload {0} is not available on the DA layer")]
    MissingQueryData(Digest),
    #[error("model {0} has no registered spec")]
    UnknownModel(String),
    #[error("unknown batch {0}")]
    UnknownBatch(u64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch mixes sequencers")]
    MixedSequencers,
    #[error("tuple {index} out of range for batch {batch_id}")]
    UnknownTuple { batch_id: u64, index: u32 },
    #[error("tuple is {0:?} and cannot be disputed")]
    NotDisputable(TupleStatus),
    #[error("challenge window of batch {batch_id} is open until {deadline}")]
    WindowOpen { batch_id: u64, deadline: f64 },
    #[error("batch {0} still has open tuples")]
    NotSettled(u64),
    #[error("dispute session {0} is not closed")]
    SessionOpen(u64),
    #[error(transparent)]
    Dispute(#[from] DisputeError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Query payloads published alongside commitments.
#[derive(Clone, Debug, Default)]
pub struct DaLayer {
    payloads: HashMap<Digest, Vec<u8>>,
}

impl DaLayer {
    pub fn publish(&mut self, payload: &[u8]) -> Digest {
        let h = digest(payload);
        self.payloads.insert(h, payload.to_vec());
        h
    }

    pub fn get(&self, query_hash: &Digest) -> Option<&[u8]> {
        self.payloads.get(query_hash).map(Vec::as_slice)
    }

    pub fn withhold(&mut self, query_hash: &Digest) {
        self.payloads.remove(query_hash);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpotCheckResult {
    Pass,
    Fail,
}

/// Simulated validity proof: re-executes the claimed model on the committed query.
pub fn spot_check(
    tuple: &CommitmentTuple,
    claimed_model: &ModelSpec,
    da: &DaLayer,
) -> Result<SpotCheckResult, ContractError> {
    let payload = da.get(&tuple.query_hash).ok_or(ContractError::MissingQueryData(tuple.query_hash))?;
    debug_assert_eq!(digest(payload), tuple.query_hash);
    let trace = execute(claimed_model, tuple.query_hash, None);
    if tuple.is_self_consistent() && trace.response_hash() == tuple.response_hash {
        Ok(SpotCheckResult::Pass)
    } else {
        Ok(SpotCheckResult::Fail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    SpotCheck,
    Optimistic,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SpotCheck => "spot-check",
            Mode::Optimistic => "optimistic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchStatus {
    ProvisionallyFinal,
    HardFinal,
    Slashed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TupleStatus {
    Provisional,
    Disputed,
    HardFinal,
    Slashed,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub batch_id: u64,
    pub tuples: Vec<CommitmentTuple>,
    pub claimed_model: String,
    pub block_height: u64,
    pub sequencer_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationOutcome {
    pub batch_id: u64,
    pub mode: Mode,
    pub checked_index: Option<usize>,
    pub status: BatchStatus,
    /// Provisional finality for optimistic batches, hard finality for spot-checked ones.
    pub finality_time: f64,
    pub vrf: VrfOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractParams {
    pub t_chal: f64,
    pub t_zk_prove: f64,
    pub l_slash: f64,
    /// Claimant bond as a fraction of `l_slash`.
    pub bond_fraction: f64,
    /// Share of the defendant's slash paid to a winning claimant.
    pub fisher_reward_fraction: f64,
    pub round_timeout: f64,
}

impl ContractParams {
    pub fn fisher_bond(&self) -> f64 {
        self.l_slash * self.bond_fraction
    }
}

/// Audit-log entries emitted by the contract.
#[derive(Clone, Debug, PartialEq)]
pub enum ContractEvent {
    TupleRejected { sequencer: String, query_hash: Digest, verdict: PoeaVerdict },
    BatchRejected { batch_id: u64, sequencer: String, reason: String },
    BatchCommitted { batch_id: u64, sequencer: String, n: usize, mode: Mode, vrf: Digest },
    SpotCheck { batch_id: u64, index: usize, result: SpotCheckResult },
    WindowOpened { batch_id: u64, deadline: f64 },
    WindowExpired { batch_id: u64, finalized: usize },
    DisputeOpened { session_id: u64, batch_id: u64, tuple_index: u32, claimant: String },
    DisputeClosed { session_id: u64, outcome: DisputeOutcome, rounds: u32 },
    Slash { participant: String, amount: f64, shortfall: f64, offense: OffenseKey },
    Reward { to: String, amount: f64 },
}

impl fmt::Display for ContractEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ContractEvent::*;
        match self {
            TupleRejected { sequencer, query_hash, verdict } => {
                write!(f, "tuple-rejected sequencer={sequencer} query={query_hash} verdict={verdict:?}")
            }
            BatchRejected { batch_id, sequencer, reason } => {
                write!(f, "batch-rejected batch={batch_id} sequencer={sequencer} reason={reason}")
            }
            BatchCommitted { batch_id, sequencer, n, mode, vrf } => {
                write!(f, "batch-committed batch={batch_id} sequencer={sequencer} n={n} mode={mode} vrf={vrf}")
            }
            SpotCheck { batch_id, index, result } => {
                write!(f, "spot-check batch={batch_id} index={index} result={result:?}")
            }
            WindowOpened { batch_id, deadline } => {
                write!(f, "window-opened batch={batch_id} deadline={deadline:.6}")
            }
            WindowExpired { batch_id, finalized } => {
                write!(f, "window-expired batch={batch_id} finalized={finalized}")
            }
            DisputeOpened { session_id, batch_id, tuple_index, claimant } => write!(
                f,
                "dispute-opened session={session_id} batch={batch_id} tuple={tuple_index} claimant={claimant}"
            ),
            DisputeClosed { session_id, outcome, rounds } => {
                write!(f, "dispute-closed session={session_id} outcome={outcome} rounds={rounds}")
            }
            Slash { participant, amount, shortfall, offense } => write!(
                f,
                "slash participant={participant} amount={amount:.6} shortfall={shortfall:.6} offense={offense}"
            ),
            Reward { to, amount } => write!(f, "reward to={to} amount={amount:.6}"),
        }
    }
}

#[derive(Clone, Debug)]
struct BatchRecord {
    batch: Batch,
    outcome: VerificationOutcome,
    deadline: Option<f64>,
    tuple_status: Vec<TupleStatus>,
    expired: bool,
}

impl BatchRecord {
    fn refresh_status(&mut self) {
        if self.tuple_status.contains(&TupleStatus::Slashed) {
            self.outcome.status = BatchStatus::Slashed;
        } else if self.tuple_status.iter().all(|s| *s == TupleStatus::HardFinal) {
            self.outcome.status = BatchStatus::HardFinal;
        }
    }
}

/// Result of settling a closed dispute.
#[derive(Clone, Debug, PartialEq)]
pub struct DisputeSettlement {
    pub outcome: DisputeOutcome,
    pub slashed: String,
    pub amount: f64,
    pub paid_to: String,
    pub paid: f64,
}

pub struct Contract {
    pub registry: ModelRegistry,
    pub root: RootOfTrust,
    pub ledger: StakeLedger,
    pub da: DaLayer,
    pub params: ContractParams,
    vrf_key: VrfKey,
    specs: BTreeMap<String, ModelSpec>,
    batches: BTreeMap<u64, BatchRecord>,
    events: Vec<(f64, ContractEvent)>,
    xi: Digest,
    next_session: u64,
}

impl Contract {
    pub fn new(
        registry: ModelRegistry,
        root: RootOfTrust,
        vrf_key: VrfKey,
        params: ContractParams,
        specs: impl IntoIterator<Item = ModelSpec>,
        genesis: &[u8],
    ) -> Self {
        Contract {
            registry,
            root,
            ledger: StakeLedger::new(),
            da: DaLayer::default(),
            params,
            vrf_key,
            specs: specs.into_iter().map(|s| (s.model_id.clone(), s)).collect(),
            batches: BTreeMap::new(),
            events: Vec::new(),
            xi: digest_parts("otr/xi-genesis", &[genesis]),
            next_session: 0,
        }
    }

    pub fn spec(&self, model_id: &str) -> Result<&ModelSpec, ContractError> {
        self.specs.get(model_id).ok_or_else(|| ContractError::UnknownModel(model_id.to_string()))
    }

    pub fn events(&self) -> &[(f64, ContractEvent)] {
        &self.events
    }

    /// Removes and returns events emitted since the last drain.
    pub fn drain_events(&mut self) -> Vec<(f64, ContractEvent)> {
        std::mem::take(&mut self.events)
    }

    fn emit(&mut self, time: f64, e: ContractEvent) {
        self.events.push((time, e));
    }

    /// PoEA check at commitment intake. Only rejections are logged.
    pub fn intake(&mut self, tuple: &CommitmentTuple, claimed_model: &str, now: f64) -> PoeaVerdict {
        let verdict = verify_poea(&self.registry, tuple, claimed_model, &self.root);
        if verdict != PoeaVerdict::Accept {
            let e = ContractEvent::TupleRejected {
                sequencer: tuple.sequencer_id.clone(),
                query_hash: tuple.query_hash,
                verdict,
            };
            self.emit(now, e);
        }
        verdict
    }

    /// Stake a sequencer must hold to commit a batch of `n` tuples.
    pub fn required_bond(&self, n: usize) -> f64 {
        self.params.l_slash * n as f64
    }

    /// Current VRF seed ξ.
    pub fn xi(&self) -> Digest {
        self.xi
    }

    /// Batch verification: spot-check with probability ρ, optimistic otherwise.
    pub fn process_batch(&mut self, batch: Batch, rho: f64, now: f64) -> Result<VerificationOutcome, ContractError> {
        let n = batch.tuples.len();
        if n == 0 {
            return Err(ContractError::EmptyBatch);
        }
        if batch.tuples.iter().any(|t| t.sequencer_id != batch.sequencer_id) {
            return Err(ContractError::MixedSequencers);
        }
        let required = self.required_bond(n);
        let available = self.ledger.free_balance(&batch.sequencer_id);
        if available < required {
            self.emit(
                now,
                ContractEvent::BatchRejected {
                    batch_id: batch.batch_id,
                    sequencer: batch.sequencer_id.clone(),
                    reason: "insufficient-stake".into(),
                },
            );
            return Err(ContractError::InsufficientStake {
                sequencer: batch.sequencer_id.clone(),
                available,
                required,
            });
        }
        let spec = self.spec(&batch.claimed_model)?.clone();

        let vrf = vrf_eval(&self.vrf_key, &self.xi.0, batch.block_height);
        let batch_id = batch.batch_id;
        let mode = if vrf.value < rho { Mode::SpotCheck } else { Mode::Optimistic };
        self.emit(
            now,
            ContractEvent::BatchCommitted {
                batch_id,
                sequencer: batch.sequencer_id.clone(),
                n,
                mode,
                vrf: vrf.proof,
            },
        );

        let (outcome, deadline, tuple_status) = match mode {
            Mode::SpotCheck => {
                let index = select_index(&vrf.proof, n);
                let result = spot_check(&batch.tuples[index], &spec, &self.da)?;
                let done = now + self.params.t_zk_prove;
                self.emit(done, ContractEvent::SpotCheck { batch_id, index, result });
                let status = match result {
                    SpotCheckResult::Pass => BatchStatus::HardFinal,
                    SpotCheckResult::Fail => {
                        for i in 0..n as u32 {
                            self.slash_sequencer(&batch.sequencer_id, batch_id, i, "failed-spot-check", done)?;
                        }
                        BatchStatus::Slashed
                    }
                };
                let ts = match status {
                    BatchStatus::Slashed => TupleStatus::Slashed,
                    _ => TupleStatus::HardFinal,
                };
                let outcome = VerificationOutcome {
                    batch_id,
                    mode,
                    checked_index: Some(index),
                    status,
                    finality_time: done,
                    vrf,
                };
                (outcome, None, vec![ts; n])
            }
            Mode::Optimistic => {
                let deadline = now + self.params.t_chal;
                self.emit(now, ContractEvent::WindowOpened { batch_id, deadline });
                let outcome = VerificationOutcome {
                    batch_id,
                    mode,
                    checked_index: None,
                    status: BatchStatus::ProvisionallyFinal,
                    finality_time: now,
                    vrf,
                };
                (outcome, Some(deadline), vec![TupleStatus::Provisional; n])
            }
        };

        let status_tag = [outcome.status as u8, mode as u8];
        self.xi = digest_parts("otr/xi", &[&self.xi.0, &batch_id.to_be_bytes(), &vrf.proof.0, &status_tag]);
        self.batches.insert(
            batch_id,
            BatchRecord { batch, outcome, deadline, tuple_status, expired: false },
        );
        Ok(outcome)
    }

    fn slash_sequencer(
        &mut self,
        sequencer: &str,
        batch_id: u64,
        tuple_index: u32,
        reason: &str,
        now: f64,
    ) -> Result<f64, ContractError> {
        let offense = OffenseKey { batch_id, tuple_index, kind: OffenseKind::InvalidExecution };
        let e = self.ledger.slash(sequencer, self.params.l_slash, offense, reason, now)?.clone();
        self.emit(
            now,
            ContractEvent::Slash {
                participant: e.participant,
                amount: e.amount,
                shortfall: e.shortfall,
                offense,
            },
        );
        Ok(e.amount)
    }

    fn record(&self, batch_id: u64) -> Result<&BatchRecord, ContractError> {
        self.batches.get(&batch_id).ok_or(ContractError::UnknownBatch(batch_id))
    }

    fn record_mut(&mut self, batch_id: u64) -> Result<&mut BatchRecord, ContractError> {
        self.batches.get_mut(&batch_id).ok_or(ContractError::UnknownBatch(batch_id))
    }

    pub fn batch(&self, batch_id: u64) -> Option<&Batch> {
        self.batches.get(&batch_id).map(|r| &r.batch)
    }

    pub fn batch_outcome(&self, batch_id: u64) -> Option<VerificationOutcome> {
        self.batches.get(&batch_id).map(|r| r.outcome)
    }

    pub fn window_deadline(&self, batch_id: u64) -> Option<f64> {
        self.batches.get(&batch_id).and_then(|r| r.deadline)
    }

    pub fn tuple_status(&self, batch_id: u64, index: u32) -> Option<TupleStatus> {
        self.batches.get(&batch_id).and_then(|r| r.tuple_status.get(index as usize).copied())
    }

    /// Drops the record of a settled batch. Fails while any tuple is still open.
    pub fn retire(&mut self, batch_id: u64) -> Result<BatchStatus, ContractError> {
        let rec = self.record(batch_id)?;
        if rec.outcome.status == BatchStatus::ProvisionallyFinal
            || rec.tuple_status.iter().any(|s| matches!(s, TupleStatus::Provisional | TupleStatus::Disputed))
        {
            return Err(ContractError::NotSettled(batch_id));
        }
        let status = rec.outcome.status;
        self.batches.remove(&batch_id);
        Ok(status)
    }

    pub fn batch_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.batches.keys().copied()
    }

    /// A fisherman challenges tuple `tuple_index` with its recomputed response hash.
    pub fn open_dispute(
        &mut self,
        batch_id: u64,
        tuple_index: u32,
        claimant: &str,
        claimant_root: Digest,
        now: f64,
    ) -> Result<DisputeSession, ContractError> {
        let bond = self.params.fisher_bond();
        let round_timeout = self.params.round_timeout;
        let free = self.ledger.free_balance(claimant);
        let session_id = self.next_session;
        let rec = self.record(batch_id)?;
        let status = *rec
            .tuple_status
            .get(tuple_index as usize)
            .ok_or(ContractError::UnknownTuple { batch_id, index: tuple_index })?;
        if rec.outcome.mode == Mode::Optimistic && status != TupleStatus::Provisional {
            return Err(ContractError::NotDisputable(status));
        }
        let tuple = &rec.batch.tuples[tuple_index as usize];
        let spec = self.spec(&rec.batch.claimed_model)?;
        let session = dispute::open_dispute(
            OpenRequest {
                session_id,
                batch_id,
                tuple_index,
                claimant: claimant.to_string(),
                defendant: rec.batch.sequencer_id.clone(),
                query_hash: tuple.query_hash,
                committed_root: tuple.response_hash,
                claimant_root,
                bond,
                layer_count: spec.layer_count,
                ops_per_layer: spec.ops_per_layer,
            },
            WindowCheck { now, deadline: rec.deadline, claimant_free_stake: free, round_timeout },
        )?;
        self.ledger.lock(claimant, bond)?;
        self.next_session += 1;
        self.record_mut(batch_id)?.tuple_status[tuple_index as usize] = TupleStatus::Disputed;
        self.emit(
            now,
            ContractEvent::DisputeOpened { session_id, batch_id, tuple_index, claimant: claimant.to_string() },
        );
        Ok(session)
    }

    /// Applies a closed session's outcome: the loser is slashed.
    pub fn settle_dispute(&mut self, session: &DisputeSession, now: f64) -> Result<DisputeSettlement, ContractError> {
        let outcome = session.outcome.ok_or(ContractError::SessionOpen(session.session_id))?;
        let (batch_id, index) = (session.batch_id, session.tuple_index);
        let bond = session.claimant_bond;
        self.ledger.unlock(&session.claimant, bond);
        self.emit(
            now,
            ContractEvent::DisputeClosed { session_id: session.session_id, outcome, rounds: session.rounds },
        );
        let settlement = match outcome {
            DisputeOutcome::ClaimantWins => {
                let amount = self.slash_sequencer(&session.defendant, batch_id, index, "fraud-proof", now)?;
                let paid = self
                    .ledger
                    .pay_from_treasury(&session.claimant, amount * self.params.fisher_reward_fraction);
                self.emit(now, ContractEvent::Reward { to: session.claimant.clone(), amount: paid });
                let rec = self.record_mut(batch_id)?;
                rec.tuple_status[index as usize] = TupleStatus::Slashed;
                rec.refresh_status();
                DisputeSettlement {
                    outcome,
                    slashed: session.defendant.clone(),
                    amount,
                    paid_to: session.claimant.clone(),
                    paid,
                }
            }
            DisputeOutcome::DefendantWins => {
                let offense = OffenseKey {
                    batch_id,
                    tuple_index: index,
                    kind: OffenseKind::FrivolousDispute { session_id: session.session_id },
                };
                let e = self.ledger.slash(&session.claimant, bond, offense, "lost-dispute", now)?.clone();
                self.emit(
                    now,
                    ContractEvent::Slash {
                        participant: e.participant,
                        amount: e.amount,
                        shortfall: e.shortfall,
                        offense,
                    },
                );
                let paid = self.ledger.pay_from_treasury(&session.defendant, e.amount);
                self.emit(now, ContractEvent::Reward { to: session.defendant.clone(), amount: paid });
                let rec = self.record_mut(batch_id)?;
                rec.tuple_status[index as usize] =
                    if rec.expired { TupleStatus::HardFinal } else { TupleStatus::Provisional };
                rec.refresh_status();
                DisputeSettlement {
                    outcome,
                    slashed: session.claimant.clone(),
                    amount: e.amount,
                    paid_to: session.defendant.clone(),
                    paid,
                }
            }
        };
        Ok(settlement)
    }

    /// Closes the challenge window; undisputed provisional tuples become hard-final.
    pub fn expire_window(&mut self, batch_id: u64, now: f64) -> Result<Vec<u32>, ContractError> {
        let rec = self.record_mut(batch_id)?;
        let Some(deadline) = rec.deadline else {
            return Ok(Vec::new());
        };
        if now < deadline {
            return Err(ContractError::WindowOpen { batch_id, deadline });
        }
        let mut finalized = Vec::new();
        for (i, s) in rec.tuple_status.iter_mut().enumerate() {
            if *s == TupleStatus::Provisional {
                *s = TupleStatus::HardFinal;
                finalized.push(i as u32);
            }
        }
        rec.expired = true;
        rec.refresh_status();
        let n = finalized.len();
        self.emit(now, ContractEvent::WindowExpired { batch_id, finalized: n });
        Ok(finalized)
    }
}
