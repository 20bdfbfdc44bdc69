//! Two-party bisection game over execution traces.
//!
//! Bounds are trace *positions*: in the layer phase position `p` is the state
//! entering layer `p` (position 0 is the query hash, position `L` the final
//! state); inside a layer position `p` is the state entering op `p`. `lo` is
//! always a position both parties agree on and `hi` one they disagree on, so
//! `hi - lo == 1` isolates exactly one step.
//!
//! Each round the defendant posts its digest at `mid = ⌊(lo+hi)/2⌋`, then the
//! claimant posts its own. Agreement moves `lo` up to `mid`, disagreement moves
//! `hi` down to `mid`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attest::Digest;
use crate::model_exec::{self, op_step, response_hash_of_state, ExecutionTrace, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    LayerBisect,
    OpBisect,
    Adjudicate,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    Defendant,
    Claimant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DisputeOutcome {
    DefendantWins,
    ClaimantWins,
}

impl fmt::Display for DisputeOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisputeOutcome::DefendantWins => "defendant-wins",
            DisputeOutcome::ClaimantWins => "claimant-wins",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DisputeError {
    #[error("challenge window closed at {deadline}, dispute raised at {now}")]
    WindowClosed { now: f64, deadline: f64 },
    #[error("tuple was settled by a spot-check and is hard-final")]
    HardFinal,
    #[error("claimant free stake {available} is below the bond {bond}")]
    InsufficientBond { available: f64, bond: f64 },
    #[error("claimant trace root equals the committed root")]
    NoDivergence,
    #[error("it is the {0:?}'s turn")]
    NotYourTurn(Party),
    #[error("operation not allowed in phase {0:?}")]
    WrongPhase(Phase),
    #[error("round deadline {deadline} passed at {now}")]
    RoundExpired { now: f64, deadline: f64 },
    #[error("adjudication input does not match the last agreed state")]
    InputMismatch,
}

/// One probed position in the transcript.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Position {
    /// `None` while bisecting layers; the divergent layer once inside it.
    pub layer: Option<u32>,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptRecord {
    pub session_id: u64,
    pub phase: Phase,
    pub lo: u32,
    pub hi: u32,
    pub position: Position,
    pub defendant: Digest,
    pub claimant: Digest,
    pub time: f64,
}

impl fmt::Display for TranscriptRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layer = self.position.layer.map_or_else(|| "-".to_string(), |l| l.to_string());
        write!(
            f,
            "session={} phase={:?} lo={} hi={} layer={} pos={} defendant={} claimant={}",
            self.session_id,
            self.phase,
            self.lo,
            self.hi,
            layer,
            self.position.index,
            self.defendant,
            self.claimant
        )
    }
}

/// Everything needed to open a session.
#[derive(Clone, Debug)]
pub struct OpenRequest {
    pub session_id: u64,
    pub batch_id: u64,
    pub tuple_index: u32,
    pub claimant: String,
    pub defendant: String,
    pub query_hash: Digest,
    /// The defendant's committed `H(r)`.
    pub committed_root: Digest,
    /// The claimant's recomputed `H(r')`.
    pub claimant_root: Digest,
    pub bond: f64,
    pub layer_count: u32,
    pub ops_per_layer: u32,
}

/// Contract-side facts the opening checks depend on.
#[derive(Clone, Copy, Debug)]
pub struct WindowCheck {
    pub now: f64,
    /// `None` when the tuple's batch was spot-checked.
    pub deadline: Option<f64>,
    pub claimant_free_stake: f64,
    pub round_timeout: f64,
}

#[derive(Clone, Debug)]
pub struct DisputeSession {
    pub session_id: u64,
    pub batch_id: u64,
    pub tuple_index: u32,
    pub claimant: String,
    pub defendant: String,
    pub claimant_bond: f64,
    pub phase: Phase,
    pub lo: u32,
    pub hi: u32,
    pub turn: Party,
    /// Divergent layer, known once the layer phase ends.
    pub layer: Option<u32>,
    pub asserted_states: BTreeMap<Position, (Digest, Digest)>,
    pub outcome: Option<DisputeOutcome>,
    pub rounds: u32,
    pub deadline: f64,
    pub transcript: Vec<TranscriptRecord>,
    layer_count: u32,
    ops_per_layer: u32,
    round_timeout: f64,
    committed_root: Digest,
    agreed: Digest,
    /// Defendant's digest at `hi`; `None` while `hi` is the committed final position.
    defendant_at_hi: Option<Digest>,
    pending: Option<Digest>,
}

/// Opens a session in the layer phase over positions `[0, L]`.
pub fn open_dispute(req: OpenRequest, check: WindowCheck) -> Result<DisputeSession, DisputeError> {
    let deadline = check.deadline.ok_or(DisputeError::HardFinal)?;
    if check.now > deadline {
        return Err(DisputeError::WindowClosed { now: check.now, deadline });
    }
    if check.claimant_free_stake < req.bond {
        return Err(DisputeError::InsufficientBond { available: check.claimant_free_stake, bond: req.bond });
    }
    if req.claimant_root == req.committed_root {
        return Err(DisputeError::NoDivergence);
    }
    let mut s = DisputeSession {
        session_id: req.session_id,
        batch_id: req.batch_id,
        tuple_index: req.tuple_index,
        claimant: req.claimant,
        defendant: req.defendant,
        claimant_bond: req.bond,
        phase: Phase::LayerBisect,
        lo: 0,
        hi: req.layer_count,
        turn: Party::Defendant,
        layer: None,
        asserted_states: BTreeMap::new(),
        outcome: None,
        rounds: 0,
        deadline: check.now + check.round_timeout,
        transcript: Vec::new(),
        layer_count: req.layer_count,
        ops_per_layer: req.ops_per_layer,
        round_timeout: check.round_timeout,
        committed_root: req.committed_root,
        agreed: req.query_hash,
        defendant_at_hi: None,
        pending: None,
    };
    s.normalize();
    Ok(s)
}

impl DisputeSession {
    pub fn shape(&self) -> (u32, u32) {
        (self.layer_count, self.ops_per_layer)
    }

    /// The position whose digest the current round asks for.
    pub fn probe(&self) -> Option<Position> {
        match self.phase {
            Phase::LayerBisect | Phase::OpBisect => {
                Some(Position { layer: self.layer, index: (self.lo + self.hi) / 2 })
            }
            _ => None,
        }
    }

    /// `(layer, op)` of the single disputed step, once isolated.
    pub fn disputed_op(&self) -> Option<(u32, u32)> {
        match self.phase {
            Phase::Adjudicate | Phase::Closed if self.layer.is_some() && self.hi - self.lo == 1 => {
                Some((self.layer.unwrap(), self.lo))
            }
            _ => None,
        }
    }

    /// Last state both parties agreed on; the adjudication input.
    pub fn agreed_state(&self) -> Digest {
        self.agreed
    }

    /// Collapses finished ranges into the next phase.
    fn normalize(&mut self) {
        if self.phase == Phase::LayerBisect && self.hi - self.lo == 1 {
            self.layer = Some(self.lo);
            self.phase = Phase::OpBisect;
            self.lo = 0;
            self.hi = self.ops_per_layer;
        }
        if self.phase == Phase::OpBisect && self.hi - self.lo == 1 {
            self.phase = Phase::Adjudicate;
        }
    }

    fn ensure_bisecting(&self, party: Party, now: f64) -> Result<(), DisputeError> {
        if !matches!(self.phase, Phase::LayerBisect | Phase::OpBisect) {
            return Err(DisputeError::WrongPhase(self.phase));
        }
        if self.turn != party {
            return Err(DisputeError::NotYourTurn(self.turn));
        }
        if now > self.deadline {
            return Err(DisputeError::RoundExpired { now, deadline: self.deadline });
        }
        Ok(())
    }

    pub fn post_defendant(&mut self, digest: Digest, now: f64) -> Result<(), DisputeError> {
        self.ensure_bisecting(Party::Defendant, now)?;
        self.pending = Some(digest);
        self.turn = Party::Claimant;
        self.deadline = now + self.round_timeout;
        Ok(())
    }

    pub fn post_claimant(&mut self, digest: Digest, now: f64) -> Result<(), DisputeError> {
        self.ensure_bisecting(Party::Claimant, now)?;
        let defendant = self.pending.take().expect("defendant posted first");
        let position = self.probe().expect("bisecting");
        self.transcript.push(TranscriptRecord {
            session_id: self.session_id,
            phase: self.phase,
            lo: self.lo,
            hi: self.hi,
            position,
            defendant,
            claimant: digest,
            time: now,
        });
        self.asserted_states.insert(position, (defendant, digest));
        if defendant == digest {
            self.lo = position.index;
            self.agreed = digest;
        } else {
            self.hi = position.index;
            self.defendant_at_hi = Some(defendant);
        }
        self.rounds += 1;
        self.turn = Party::Defendant;
        self.deadline = now + self.round_timeout;
        self.normalize();
        Ok(())
    }

    /// Forfeits the party that failed to respond by the round deadline.
    pub fn claim_timeout(&mut self, now: f64) -> Option<DisputeOutcome> {
        if self.phase == Phase::Closed || now <= self.deadline {
            return None;
        }
        let outcome = match self.phase {
            Phase::Adjudicate => return None,
            _ if self.turn == Party::Defendant => DisputeOutcome::ClaimantWins,
            _ => DisputeOutcome::DefendantWins,
        };
        self.close(outcome);
        Some(outcome)
    }

    fn close(&mut self, outcome: DisputeOutcome) {
        self.phase = Phase::Closed;
        self.outcome = Some(outcome);
    }
}

/// One full round with both digests supplied.
pub fn bisect_round(
    session: &mut DisputeSession,
    defendant_state: Digest,
    claimant_state: Digest,
    now: f64,
) -> Result<(), DisputeError> {
    session.post_defendant(defendant_state, now)?;
    session.post_claimant(claimant_state, now)
}

/// Re-executes the single disputed op.
///
/// The defendant wins iff the step applied to the agreed input yields its claim, the
/// claim is the digest it already asserted at `hi`, and, at the final position, the
/// claim renders to the committed response.
pub fn adjudicate(
    session: &mut DisputeSession,
    spec: &ModelSpec,
    input_state: Digest,
    defendant_claim: Digest,
) -> Result<DisputeOutcome, DisputeError> {
    if session.phase != Phase::Adjudicate {
        return Err(DisputeError::WrongPhase(session.phase));
    }
    if input_state != session.agreed {
        return Err(DisputeError::InputMismatch);
    }
    let (layer, op) = session.disputed_op().expect("isolated step");
    let consistent = match session.defendant_at_hi {
        Some(asserted) => asserted == defendant_claim,
        None => response_hash_of_state(&defendant_claim) == session.committed_root,
    };
    let recomputed = op_step(spec.theta_seed, layer, op, &input_state);
    let outcome = if consistent && recomputed == defendant_claim {
        DisputeOutcome::DefendantWins
    } else {
        DisputeOutcome::ClaimantWins
    };
    session.rounds += 1;
    session.close(outcome);
    Ok(outcome)
}

/// Answers digest queries during bisection.
pub trait TraceReporter {
    /// State entering layer `pos` (`pos == L` is the final state).
    fn layer_position(&self, pos: u32) -> Digest;
    /// State entering op `pos` of `layer` (`pos == M` is the layer output).
    fn op_position(&self, layer: u32, pos: u32) -> Digest;

    fn at(&self, p: Position) -> Digest {
        match p.layer {
            None => self.layer_position(p.index),
            Some(l) => self.op_position(l, p.index),
        }
    }
}

/// Reports the true states of an execution (possibly a faulty one).
pub struct TrueTrace<'a> {
    pub spec: &'a ModelSpec,
    pub trace: &'a ExecutionTrace,
}

impl TraceReporter for TrueTrace<'_> {
    fn layer_position(&self, pos: u32) -> Digest {
        self.trace.layer_input(pos.min(self.spec.layer_count))
    }

    fn op_position(&self, layer: u32, pos: u32) -> Digest {
        match pos {
            0 => self.trace.layer_input(layer),
            p => model_exec::op_state(self.trace, self.spec, layer, p - 1).expect("position in range"),
        }
    }
}

/// Drives a session to a closed outcome with both parties answering from reporters.
///
/// Each round advances the clock by `round_time`; returns the closing time.
pub fn play_out(
    session: &mut DisputeSession,
    spec: &ModelSpec,
    defendant: &dyn TraceReporter,
    claimant: &dyn TraceReporter,
    mut now: f64,
    round_time: f64,
) -> Result<(DisputeOutcome, f64), DisputeError> {
    while let Some(p) = session.probe() {
        now += round_time;
        bisect_round(session, defendant.at(p), claimant.at(p), now)?;
    }
    now += round_time;
    let (layer, op) = session.disputed_op().expect("isolated step");
    let claim = defendant.op_position(layer, op + 1);
    let input = session.agreed_state();
    let outcome = adjudicate(session, spec, input, claim)?;
    Ok((outcome, now))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attest::digest;
    use crate::model_exec::{run_faulty_inference, run_inference, Fault};

    fn open(spec: &ModelSpec, query: &[u8], committed: &ExecutionTrace, claimant: &ExecutionTrace) -> DisputeSession {
        open_dispute(
            OpenRequest {
                session_id: 1,
                batch_id: 0,
                tuple_index: 0,
                claimant: "fisher".into(),
                defendant: "seq".into(),
                query_hash: digest(query),
                committed_root: committed.response_hash(),
                claimant_root: claimant.response_hash(),
                bond: 10.0,
                layer_count: spec.layer_count,
                ops_per_layer: spec.ops_per_layer,
            },
            WindowCheck { now: 0.0, deadline: Some(100.0), claimant_free_stake: 10.0, round_timeout: 30.0 },
        )
        .unwrap()
    }

    #[test]
    fn eight_layers_diverging_at_five_take_three_rounds() {
        let spec = ModelSpec::new("m", 8, 4, 5);
        let honest = run_inference(&spec, b"q");
        let bad = run_faulty_inference(&spec, b"q", Fault::new(5, 0, 1));
        let mut s = open(&spec, b"q", &bad, &honest);
        let (d, c) = (TrueTrace { spec: &spec, trace: &bad }, TrueTrace { spec: &spec, trace: &honest });
        let mut layer_rounds = 0;
        while s.phase == Phase::LayerBisect {
            let p = s.probe().unwrap();
            bisect_round(&mut s, d.at(p), c.at(p), 1.0).unwrap();
            layer_rounds += 1;
        }
        assert_eq!(layer_rounds, 3);
        assert_eq!(s.layer, Some(5));
        // Positions probed: 4 (agree), 6 (disagree), 5 (agree).
        let probed: Vec<u32> = s.transcript.iter().map(|r| r.position.index).collect();
        assert_eq!(probed, vec![4, 6, 5]);
    }

    #[test]
    fn divergence_at_first_op_collapses_left() {
        let spec = ModelSpec::new("m", 8, 8, 5);
        let honest = run_inference(&spec, b"q");
        let bad = run_faulty_inference(&spec, b"q", Fault::new(0, 0, 1));
        let mut s = open(&spec, b"q", &bad, &honest);
        let (d, c) = (TrueTrace { spec: &spec, trace: &bad }, TrueTrace { spec: &spec, trace: &honest });
        let p = s.probe().unwrap();
        bisect_round(&mut s, d.at(p), c.at(p), 1.0).unwrap();
        assert_eq!((s.lo, s.hi), (0, 4));
        let (outcome, _) = play_out(&mut s, &spec, &d, &c, 1.0, 1.0).unwrap();
        assert_eq!(outcome, DisputeOutcome::ClaimantWins);
        assert_eq!(s.disputed_op(), Some((0, 0)));
    }

    #[test]
    fn agreement_moves_lo_up() {
        let spec = ModelSpec::new("m", 16, 1, 5);
        let honest = run_inference(&spec, b"q");
        let bad = run_faulty_inference(&spec, b"q", Fault::new(15, 0, 1));
        let mut s = open(&spec, b"q", &bad, &honest);
        let before = s.lo;
        let x = digest(b"same");
        bisect_round(&mut s, x, x, 1.0).unwrap();
        assert!(s.lo > before);
    }

    #[test]
    fn griefing_claimant_loses() {
        let spec = ModelSpec::new("m", 5, 3, 5);
        let honest = run_inference(&spec, b"q");
        let liar = run_faulty_inference(&spec, b"q", Fault::new(2, 1, 77));
        let mut s = open(&spec, b"q", &honest, &liar);
        let (d, c) = (TrueTrace { spec: &spec, trace: &honest }, TrueTrace { spec: &spec, trace: &liar });
        let (outcome, _) = play_out(&mut s, &spec, &d, &c, 0.0, 1.0).unwrap();
        assert_eq!(outcome, DisputeOutcome::DefendantWins);
        assert_eq!(s.phase, Phase::Closed);
    }

    #[test]
    fn single_step_model_goes_straight_to_adjudication() {
        let spec = ModelSpec::new("m", 1, 1, 5);
        let honest = run_inference(&spec, b"q");
        let bad = run_faulty_inference(&spec, b"q", Fault::new(0, 0, 1));
        let s = open(&spec, b"q", &bad, &honest);
        assert_eq!(s.phase, Phase::Adjudicate);
        assert_eq!(s.disputed_op(), Some((0, 0)));
    }

    #[test]
    fn opening_errors() {
        let spec = ModelSpec::new("m", 2, 2, 5);
        let t = run_inference(&spec, b"q");
        let req = OpenRequest {
            session_id: 1,
            batch_id: 0,
            tuple_index: 0,
            claimant: "f".into(),
            defendant: "s".into(),
            query_hash: digest(b"q"),
            committed_root: t.response_hash(),
            claimant_root: t.response_hash(),
            bond: 5.0,
            layer_count: 2,
            ops_per_layer: 2,
        };
        let ok = WindowCheck { now: 1.0, deadline: Some(10.0), claimant_free_stake: 5.0, round_timeout: 30.0 };
        assert_eq!(open_dispute(req.clone(), ok).unwrap_err(), DisputeError::NoDivergence);
        let diverging = OpenRequest { claimant_root: digest(b"other"), ..req };
        assert!(matches!(
            open_dispute(diverging.clone(), WindowCheck { now: 11.0, ..ok }),
            Err(DisputeError::WindowClosed { .. })
        ));
        assert_eq!(
            open_dispute(diverging.clone(), WindowCheck { deadline: None, ..ok }).unwrap_err(),
            DisputeError::HardFinal
        );
        assert!(matches!(
            open_dispute(diverging.clone(), WindowCheck { claimant_free_stake: 4.0, ..ok }),
            Err(DisputeError::InsufficientBond { .. })
        ));
        assert!(open_dispute(diverging, ok).is_ok());
    }

    #[test]
    fn turn_order_and_phase_guards() {
        let spec = ModelSpec::new("m", 4, 4, 5);
        let honest = run_inference(&spec, b"q");
        let bad = run_faulty_inference(&spec, b"q", Fault::new(1, 1, 1));
        let mut s = open(&spec, b"q", &bad, &honest);
        assert_eq!(s.post_claimant(Digest::ZERO, 1.0), Err(DisputeError::NotYourTurn(Party::Defendant)));
        s.post_defendant(Digest::ZERO, 1.0).unwrap();
        assert_eq!(s.post_defendant(Digest::ZERO, 1.0), Err(DisputeError::NotYourTurn(Party::Claimant)));
        let input = s.agreed_state();
        assert_eq!(adjudicate(&mut s, &spec, input, Digest::ZERO), Err(DisputeError::WrongPhase(Phase::LayerBisect)));
    }

    #[test]
    fn silent_party_forfeits() {
        let spec = ModelSpec::new("m", 4, 4, 5);
        let honest = run_inference(&spec, b"q");
        let bad = run_faulty_inference(&spec, b"q", Fault::new(1, 1, 1));
        let mut s = open(&spec, b"q", &bad, &honest);
        assert_eq!(s.claim_timeout(30.0), None);
        assert_eq!(s.claim_timeout(30.5), Some(DisputeOutcome::ClaimantWins));
        assert_eq!(s.outcome, Some(DisputeOutcome::ClaimantWins));

        let mut s = open(&spec, b"q", &bad, &honest);
        s.post_defendant(Digest::ZERO, 10.0).unwrap();
        assert!(matches!(s.post_claimant(Digest::ZERO, 41.0), Err(DisputeError::RoundExpired { .. })));
        assert_eq!(s.claim_timeout(41.0), Some(DisputeOutcome::DefendantWins));
    }

    #[test]
    fn defendant_copying_the_honest_trace_still_loses_at_the_end() {
        let spec = ModelSpec::new("m", 3, 3, 5);
        let honest = run_inference(&spec, b"q");
        let bad = run_faulty_inference(&spec, b"q", Fault::new(2, 2, 1));
        // Committed the faulty response, but answers every probe honestly.
        let mut s = open(&spec, b"q", &bad, &honest);
        let c = TrueTrace { spec: &spec, trace: &honest };
        let (outcome, _) = play_out(&mut s, &spec, &c, &c, 0.0, 1.0).unwrap();
        assert_eq!(outcome, DisputeOutcome::ClaimantWins);
        assert_eq!(s.disputed_op(), Some((2, 2)));
    }

    #[test]
    fn adjudication_rejects_a_wrong_input() {
        let spec = ModelSpec::new("m", 1, 1, 5);
        let honest = run_inference(&spec, b"q");
        let bad = run_faulty_inference(&spec, b"q", Fault::new(0, 0, 1));
        let mut s = open(&spec, b"q", &bad, &honest);
        assert_eq!(
            adjudicate(&mut s, &spec, Digest::ZERO, bad.final_state),
            Err(DisputeError::InputMismatch)
        );
    }
}
