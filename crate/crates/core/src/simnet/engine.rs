use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{Detection, QueryRecord, QueryStatus, RunCounters, RunMetrics};
use super::{EventKind, EventQueue, LatencyParams, Protocol, SimError, SimEvent};
use crate::attest::{digest_parts, generate_quote, Digest, EnclaveIdentity, Vendor};
use crate::config::{ScenarioConfig, SequencerConfig};
use crate::contract::{
    Batch, Contract, ContractError, DisputeSettlement, Mode, PoeaVerdict, TupleStatus, VrfKey,
};
use crate::dispute::{play_out, DisputeOutcome, DisputeSession, TraceReporter, TrueTrace};
use crate::econ::{otr_settlement, poq_baseline_settlement, serving_cost, Strategy};
use crate::model_exec::{execute, render_response, ExecutionTrace, ModelSpec};

/// Runs one protocol over the configured scenario.
pub fn run_scenario(config: &ScenarioConfig, protocol: Protocol) -> Result<RunMetrics, SimError> {
    let cfg = config.clone().resolve();
    cfg.validate()?;
    let rng = ChaCha8Rng::from_seed(
        digest_parts("otr/sim-rng", &[&cfg.seed.to_le_bytes(), protocol.as_str().as_bytes()]).0,
    );
    match protocol {
        Protocol::Otr | Protocol::Opml => Engine::new(&cfg, protocol, rng)?.run(),
        Protocol::Zkml | Protocol::Poq => run_offchain_baseline(&cfg, protocol, rng),
    }
}

struct Seq {
    cfg: SequencerConfig,
    enclave: EnclaveIdentity,
    serves: usize,
    lat: LatencyParams,
}

#[derive(Clone, Copy, Debug)]
enum Payload {
    Batch(u64),
    OpenDispute { batch_id: u64, tuple: u32, fisher: usize },
    Settle { session_id: u64 },
}

struct BatchState {
    seq: usize,
    submit: f64,
    rho: f64,
    queries: Vec<(u64, Digest)>,
    /// Query id of each tuple accepted into the contract batch.
    tuple_query: Vec<u64>,
    /// State the defendant's committed response renders from.
    final_states: Vec<Digest>,
    open_disputes: u32,
    expired: bool,
}

/// Defendant answers for a response that did not come from the claimed model.
struct Fabricated {
    query_hash: Digest,
    final_state: Digest,
    layers: u32,
    ops: u32,
}

impl TraceReporter for Fabricated {
    fn layer_position(&self, pos: u32) -> Digest {
        match pos {
            0 => self.query_hash,
            p if p >= self.layers => self.final_state,
            p => digest_parts("otr/fabricated-layer", &[&self.query_hash.0, &p.to_be_bytes()]),
        }
    }

    fn op_position(&self, layer: u32, pos: u32) -> Digest {
        match pos {
            0 => self.layer_position(layer),
            p if p >= self.ops => self.layer_position(layer + 1),
            p => digest_parts("otr/fabricated-op", &[&self.query_hash.0, &layer.to_be_bytes(), &p.to_be_bytes()]),
        }
    }
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    protocol: Protocol,
    rng: ChaCha8Rng,
    contract: Contract,
    queue: EventQueue<Payload>,
    seqs: Vec<Seq>,
    fishers: Vec<String>,
    models: Vec<ModelSpec>,
    claimed: usize,
    claimed_measurement: Option<Digest>,
    cache: HashMap<(usize, Digest), Rc<ExecutionTrace>>,
    records: Vec<QueryRecord>,
    batches: HashMap<u64, BatchState>,
    sessions: HashMap<u64, DisputeSession>,
    counters: RunCounters,
    audit: Vec<String>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig, protocol: Protocol, rng: ChaCha8Rng) -> Result<Self, SimError> {
        let seed = cfg.seed.to_le_bytes();
        let vendor = Vendor::from_seed(&[b"vendor/".as_slice(), &seed].concat());
        let registry = cfg.build_registry()?;
        let models = cfg.models.clone();
        let index = |id: &str| models.iter().position(|m| m.model_id == id).expect("validated model id");
        let claimed = index(&cfg.claimed_model);
        let claimed_measurement = registry.omega(&cfg.claimed_model).and_then(|s| s.iter().next().copied());
        let mut contract = Contract::new(
            registry,
            vendor.root_of_trust(),
            VrfKey::from_seed(&[b"vrf/".as_slice(), &seed].concat()),
            cfg.contract_params(),
            models.iter().cloned(),
            &seed,
        );
        let seqs: Vec<Seq> = cfg
            .sequencers
            .iter()
            .map(|s| {
                let serves = index(&s.serves);
                let mut enclave = vendor.provision(
                    &format!("enclave-{}", s.id),
                    &s.serves,
                    cfg.binary_version(&s.serves),
                    s.id.as_bytes(),
                );
                if s.strategy.needs_compromised_key() {
                    enclave = enclave.compromise();
                }
                contract.ledger.deposit(&s.id, s.stake);
                Seq { cfg: s.clone(), enclave, serves, lat: cfg.latency.with_native(models[serves].native_latency) }
            })
            .collect();
        let fishers: Vec<String> = (0..cfg.fishermen.count).map(|i| format!("fisher-{i}")).collect();
        for f in &fishers {
            contract.ledger.deposit(f, cfg.fishermen.stake);
        }
        Ok(Engine {
            cfg,
            protocol,
            rng,
            contract,
            queue: EventQueue::new(),
            seqs,
            fishers,
            models,
            claimed,
            claimed_measurement,
            cache: HashMap::new(),
            records: Vec::new(),
            batches: HashMap::new(),
            sessions: HashMap::new(),
            counters: RunCounters::default(),
            audit: Vec::new(),
        })
    }

    fn log(&mut self, time: f64, line: String) {
        self.audit.push(format!("{time:.6} {} {line}", self.protocol));
    }

    fn flush_contract_events(&mut self) {
        for (t, e) in self.contract.drain_events() {
            self.log(t, format!("contract {e}"));
        }
    }

    fn trace(&mut self, model: usize, query_hash: Digest) -> Rc<ExecutionTrace> {
        let spec = &self.models[model];
        self.cache.entry((model, query_hash)).or_insert_with(|| Rc::new(execute(spec, query_hash, None))).clone()
    }

    fn schedule(&mut self, time: f64, kind: EventKind, payload: Payload) -> Result<(), SimError> {
        self.queue.schedule(SimEvent { time, kind, payload })
    }

    /// Seconds the sequencer spends producing a response.
    fn exec_time(&self, seq: usize) -> f64 {
        let lat = &self.seqs[seq].lat;
        match self.protocol {
            Protocol::Otr => lat.t_tee(),
            _ => lat.t_native,
        }
    }

    fn run(mut self) -> Result<RunMetrics, SimError> {
        let bs = self.cfg.batch_size as u64;
        let n_batches = self.cfg.queries.div_ceil(bs);
        for b in 0..n_batches {
            self.schedule(b as f64 * self.cfg.batch_interval, EventKind::QuerySubmitted, Payload::Batch(b))?;
        }
        while let Some(ev) = self.queue.pop() {
            match (ev.kind, ev.payload) {
                (EventKind::QuerySubmitted, Payload::Batch(b)) => self.on_submitted(ev.time, b)?,
                (EventKind::InferenceDone, Payload::Batch(b)) => self.on_inference(ev.time, b)?,
                (EventKind::SpotCheckDone, Payload::Batch(b)) => self.on_spot_check(ev.time, b)?,
                (EventKind::WindowExpired, Payload::Batch(b)) => self.on_window(ev.time, b)?,
                (EventKind::DisputeRound, Payload::OpenDispute { batch_id, tuple, fisher }) => {
                    self.on_open_dispute(ev.time, batch_id, tuple, fisher)?
                }
                (EventKind::SlashExecuted, Payload::Settle { session_id }) => self.on_settle(ev.time, session_id)?,
                (k, p) => return Err(SimError::Invariant(format!("unexpected event {k:?} with {p:?}"))),
            }
            self.flush_contract_events();
        }
        self.check_end_state()?;
        Ok(RunMetrics::from_records(self.protocol, self.records, self.counters, self.audit))
    }

    fn on_submitted(&mut self, now: f64, b: u64) -> Result<(), SimError> {
        let bs = self.cfg.batch_size as u64;
        let n = bs.min(self.cfg.queries - b * bs);
        let seq = (b % self.seqs.len() as u64) as usize;
        let value = self.cfg.query_values[(b % self.cfg.query_values.len() as u64) as usize];
        let rho = match self.protocol {
            Protocol::Opml => 0.0,
            _ => self.cfg.rho_for(value),
        };
        let mut queries = Vec::with_capacity(n as usize);
        for k in 0..n {
            let qid = b * bs + k;
            let prompt = self.rng.random_range(0..self.cfg.prompt_pool);
            let qh = self.contract.da.publish(format!("prompt-{prompt}").as_bytes());
            queries.push((qid, qh));
            self.records.push(QueryRecord {
                query_id: qid,
                batch_id: b,
                sequencer: self.seqs[seq].cfg.id.clone(),
                strategy: self.seqs[seq].cfg.strategy,
                rho,
                mode: None,
                status: QueryStatus::Pending,
                submit_time: now,
                latency: None,
                hard_latency: None,
                cost: 0.0,
                profit: 0.0,
                detection: Detection::None,
            });
        }
        let exec = self.exec_time(seq);
        self.counters.inference_time += exec * n as f64;
        self.log(
            now,
            format!("query-submitted batch={b} sequencer={} n={n} value={value} rho={rho}", self.seqs[seq].cfg.id),
        );
        self.batches.insert(
            b,
            BatchState {
                seq,
                submit: now,
                rho,
                queries,
                tuple_query: Vec::new(),
                final_states: Vec::new(),
                open_disputes: 0,
                expired: false,
            },
        );
        self.schedule(now + exec, EventKind::InferenceDone, Payload::Batch(b))
    }

    fn settle(&mut self, qid: u64, status: QueryStatus, detection: Detection, now: f64) {
        let params = self.cfg.econ;
        let r = &mut self.records[qid as usize];
        r.status = status;
        r.detection = detection;
        if status != QueryStatus::Rejected {
            r.hard_latency = Some(now - r.submit_time);
            if r.latency.is_none() {
                r.latency = r.hard_latency;
            }
        }
        r.profit = otr_settlement(r.strategy, status.settlement().expect("terminal"), &params);
    }

    fn on_inference(&mut self, now: f64, b: u64) -> Result<(), SimError> {
        let costs = self.cfg.costs;
        let lat = self.cfg.latency;
        let state = self.batches.get(&b).expect("submitted");
        let (seq, rho, queries) = (state.seq, state.rho, state.queries.clone());
        let strategy = self.seqs[seq].cfg.strategy;
        let claimed_id = self.models[self.claimed].model_id.clone();
        let seq_id = self.seqs[seq].cfg.id.clone();

        let mut tuples = Vec::new();
        let mut tuple_query = Vec::new();
        let mut final_states = Vec::new();
        for (qid, qh) in queries {
            let final_state = match strategy {
                Strategy::Honest => self.trace(self.claimed, qh).final_state,
                Strategy::Downgrade | Strategy::ForgedAttestation => self.trace(self.seqs[seq].serves, qh).final_state,
                Strategy::Lazy => Digest(self.rng.random()),
            };
            let enclave = &self.seqs[seq].enclave;
            let own_attributed =
                self.contract.registry.omega(&claimed_id).is_some_and(|o| o.contains(&enclave.mrenclave));
            let forged = match (strategy.needs_compromised_key(), own_attributed) {
                (true, false) => self.claimed_measurement,
                _ => None,
            };
            let tuple = generate_quote(enclave, &seq_id, qh, render_response(&final_state), qid as u128, forged)?;
            let rec = &mut self.records[qid as usize];
            match self.protocol {
                Protocol::Otr => {
                    rec.cost += costs.cost_tee_compute + costs.cost_blob + costs.cost_sig_verify;
                    self.counters.verify_time += lat.t_sig;
                    if self.contract.intake(&tuple, &claimed_id, now) != PoeaVerdict::Accept {
                        self.settle(qid, QueryStatus::Rejected, Detection::Attribution, now);
                        continue;
                    }
                }
                _ => rec.cost += costs.cost_blob + costs.cost_optimistic_commit,
            }
            tuples.push(tuple);
            tuple_query.push(qid);
            final_states.push(final_state);
        }
        if tuples.is_empty() {
            self.batches.remove(&b);
            return Ok(());
        }
        let batch = Batch {
            batch_id: b,
            tuples,
            claimed_model: claimed_id,
            block_height: b,
            sequencer_id: seq_id,
        };
        let committed = batch.tuples.clone();
        let outcome = match self.contract.process_batch(batch, rho, now) {
            Err(ContractError::InsufficientStake { .. }) => {
                for qid in tuple_query {
                    self.settle(qid, QueryStatus::Rejected, Detection::InsufficientStake, now);
                }
                self.batches.remove(&b);
                return Ok(());
            }
            other => other?,
        };
        self.counters.batches += 1;
        let state = self.batches.get_mut(&b).expect("submitted");
        state.tuple_query = tuple_query.clone();
        state.final_states = final_states;
        let submit = state.submit;
        for &qid in &tuple_query {
            self.records[qid as usize].mode = Some(outcome.mode);
        }
        match outcome.mode {
            Mode::SpotCheck => {
                self.counters.spot_checks += 1;
                self.counters.verify_time += lat.t_zk_prove;
                for &qid in &tuple_query {
                    self.records[qid as usize].cost += costs.cost_zk_prove;
                }
                self.schedule(outcome.finality_time, EventKind::SpotCheckDone, Payload::Batch(b))?;
            }
            Mode::Optimistic => {
                if self.protocol == Protocol::Otr {
                    let provisional = now + lat.t_sig;
                    for &qid in &tuple_query {
                        self.records[qid as usize].latency = Some(provisional - submit);
                    }
                }
                let deadline = self.contract.window_deadline(b).expect("optimistic batch has a window");
                self.schedule(deadline, EventKind::WindowExpired, Payload::Batch(b))?;
                self.dispatch_fishermen(now, b, &committed, deadline)?;
            }
        }
        Ok(())
    }

    /// Each committed tuple is re-executed by a fisherman with probability `p_fish`.
    fn dispatch_fishermen(
        &mut self,
        now: f64,
        b: u64,
        tuples: &[crate::attest::CommitmentTuple],
        deadline: f64,
    ) -> Result<(), SimError> {
        if self.fishers.is_empty() {
            return Ok(());
        }
        let p_fish = self.cfg.econ.p_fish;
        let recheck = self.cfg.latency.with_native(self.models[self.claimed].native_latency).t_native;
        for (i, t) in tuples.iter().enumerate() {
            if self.rng.random::<f64>() >= p_fish {
                continue;
            }
            let honest = self.trace(self.claimed, t.query_hash);
            if honest.response_hash() == t.response_hash {
                continue;
            }
            let fisher = (t.nonce % self.fishers.len() as u128) as usize;
            let at = (now + recheck).min(deadline);
            self.schedule(at, EventKind::DisputeRound, Payload::OpenDispute { batch_id: b, tuple: i as u32, fisher })?;
        }
        Ok(())
    }

    fn on_spot_check(&mut self, now: f64, b: u64) -> Result<(), SimError> {
        let state = self.batches.remove(&b).expect("committed");
        for (i, &qid) in state.tuple_query.iter().enumerate() {
            match self.contract.tuple_status(b, i as u32) {
                Some(TupleStatus::HardFinal) => self.settle(qid, QueryStatus::HardFinal, Detection::None, now),
                Some(TupleStatus::Slashed) => self.settle(qid, QueryStatus::Slashed, Detection::SpotCheck, now),
                s => return Err(SimError::Invariant(format!("spot-checked tuple {b}/{i} is {s:?}"))),
            }
        }
        self.contract.retire(b)?;
        Ok(())
    }

    fn on_open_dispute(&mut self, now: f64, b: u64, tuple: u32, fisher: usize) -> Result<(), SimError> {
        let state = self.batches.get(&b).expect("committed");
        let qid = state.tuple_query[tuple as usize];
        let final_state = state.final_states[tuple as usize];
        let (_, qh) = state.queries.iter().find(|(q, _)| *q == qid).copied().expect("query in batch");
        let honest = self.trace(self.claimed, qh);
        let fisher_id = self.fishers[fisher].clone();
        let mut session = self.contract.open_dispute(b, tuple, &fisher_id, honest.response_hash(), now)?;
        self.flush_contract_events();
        let spec = self.models[self.claimed].clone();
        let defendant = Fabricated { query_hash: qh, final_state, layers: spec.layer_count, ops: spec.ops_per_layer };
        let claimant = TrueTrace { spec: &spec, trace: &honest };
        let (_, close) = play_out(&mut session, &spec, &defendant, &claimant, now, self.cfg.latency.t_round)?;
        for r in session.transcript.clone() {
            self.log(r.time, format!("dispute-round {r}"));
        }
        self.counters.disputes += 1;
        self.counters.dispute_rounds += session.rounds as u64;
        self.counters.verify_time += session.rounds as f64 * self.cfg.latency.t_round;
        self.records[qid as usize].cost += self.cfg.costs.cost_dispute;
        self.batches.get_mut(&b).expect("committed").open_disputes += 1;
        let session_id = session.session_id;
        self.sessions.insert(session_id, session);
        self.schedule(close, EventKind::SlashExecuted, Payload::Settle { session_id })
    }

    fn on_settle(&mut self, now: f64, session_id: u64) -> Result<(), SimError> {
        let session = self.sessions.remove(&session_id).expect("opened");
        let DisputeSettlement { outcome, .. } = self.contract.settle_dispute(&session, now)?;
        let b = session.batch_id;
        let state = self.batches.get_mut(&b).expect("committed");
        let qid = state.tuple_query[session.tuple_index as usize];
        state.open_disputes -= 1;
        let retire = state.expired && state.open_disputes == 0;
        match outcome {
            DisputeOutcome::ClaimantWins => self.settle(qid, QueryStatus::Slashed, Detection::FraudProof, now),
            DisputeOutcome::DefendantWins => {
                if self.contract.tuple_status(b, session.tuple_index) == Some(TupleStatus::HardFinal) {
                    self.settle(qid, QueryStatus::HardFinal, Detection::None, now);
                }
            }
        }
        if retire {
            self.batches.remove(&b);
            self.contract.retire(b)?;
        }
        Ok(())
    }

    fn on_window(&mut self, now: f64, b: u64) -> Result<(), SimError> {
        let finalized = self.contract.expire_window(b, now)?;
        let state = self.batches.get_mut(&b).expect("committed");
        state.expired = true;
        let qids: Vec<u64> = finalized.iter().map(|&i| state.tuple_query[i as usize]).collect();
        let retire = state.open_disputes == 0;
        for qid in qids {
            self.settle(qid, QueryStatus::HardFinal, Detection::None, now);
        }
        if retire {
            self.batches.remove(&b);
            self.contract.retire(b)?;
        }
        Ok(())
    }

    fn check_end_state(&self) -> Result<(), SimError> {
        if let Some(r) = self.records.iter().find(|r| r.status == QueryStatus::Pending) {
            return Err(SimError::Invariant(format!("query {} never reached a terminal state", r.query_id)));
        }
        if !self.batches.is_empty() || self.contract.batch_ids().next().is_some() {
            return Err(SimError::Invariant("batches left open after the event queue drained".into()));
        }
        let (supply, minted) = (self.contract.ledger.total_supply(), self.contract.ledger.minted());
        if (supply - minted).abs() > 1e-9 * minted.max(1.0) {
            return Err(SimError::Invariant(format!("stake not conserved: supply {supply} vs minted {minted}")));
        }
        Ok(())
    }
}

/// ZKML and PoQ need no contract state: every query is settled on arrival.
fn run_offchain_baseline(cfg: &ScenarioConfig, protocol: Protocol, mut rng: ChaCha8Rng) -> Result<RunMetrics, SimError> {
    let bs = cfg.batch_size as u64;
    let n_batches = cfg.queries.div_ceil(bs);
    let mut records = Vec::with_capacity(cfg.queries as usize);
    let mut counters = RunCounters::default();
    let mut audit = Vec::new();
    let econ = cfg.econ;
    let costs = cfg.costs;
    for b in 0..n_batches {
        let now = b as f64 * cfg.batch_interval;
        let seq = &cfg.sequencers[(b % cfg.sequencers.len() as u64) as usize];
        let lat = cfg.latency.with_native(cfg.model(&seq.serves).and_then(|m| m.native_latency));
        let n = bs.min(cfg.queries - b * bs);
        let mut accepted = 0;
        for k in 0..n {
            let mut r = QueryRecord {
                query_id: b * bs + k,
                batch_id: b,
                sequencer: seq.id.clone(),
                strategy: seq.strategy,
                rho: 0.0,
                mode: None,
                status: QueryStatus::HardFinal,
                submit_time: now,
                latency: None,
                hard_latency: None,
                cost: 0.0,
                profit: 0.0,
                detection: Detection::None,
            };
            counters.batches += (k == 0) as u64;
            counters.inference_time += lat.t_native;
            let ok = match protocol {
                Protocol::Zkml => {
                    counters.verify_time += lat.t_zkml_full;
                    r.cost = costs.cost_blob + costs.cost_zk_verify_onchain;
                    let ok = !seq.strategy.is_adversarial();
                    if ok {
                        r.latency = Some(lat.t_zkml_full);
                        r.profit = otr_settlement(seq.strategy, crate::econ::Settlement::HardFinal, &econ);
                    } else {
                        r.detection = Detection::ValidityProof;
                        r.profit = otr_settlement(seq.strategy, crate::econ::Settlement::Rejected, &econ);
                    }
                    ok
                }
                _ => {
                    r.cost = costs.cost_blob;
                    let s = poq_baseline_settlement(
                        &cfg.quality,
                        &seq.quality_profile,
                        serving_cost(seq.strategy, &econ),
                        &econ,
                        &mut rng,
                    )?;
                    r.profit = s.profit;
                    if s.accepted {
                        r.latency = Some(lat.t_native);
                    } else {
                        r.detection = Detection::Judge;
                    }
                    s.accepted
                }
            };
            if ok {
                r.hard_latency = r.latency;
                accepted += 1;
            } else {
                r.status = QueryStatus::Rejected;
            }
            records.push(r);
        }
        audit.push(format!("{now:.6} {protocol} batch batch={b} sequencer={} n={n} accepted={accepted}", seq.id));
    }
    Ok(RunMetrics::from_records(protocol, records, counters, audit))
}
