//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero on any failure.
//!
//! Run with `cargo test --release -p otr-cli --test acceptance`.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use otr_cli::{build_report, parse_config, ReportBundle, PRESETS};
use otr_core::attest::{digest, generate_quote, measure_enclave, Digest, EnclaveIdentity, Vendor};
use otr_core::contract::{
    select_index, verify_poea, Batch, BatchStatus, Contract, ContractParams, Mode, ModelRegistry, VrfKey,
};
use otr_core::dispute::{open_dispute, play_out, DisputeOutcome, OpenRequest, TrueTrace, WindowCheck};
use otr_core::econ::{expected_cheat_profit, EconParams, Strategy as Behaviour};
use otr_core::model_exec::{execute, op_states, run_inference, ExecutionTrace, Fault, ModelSpec};
use otr_core::simnet::{amortized_cost, baseline_cost, Detection, Protocol, QueryStatus, RunMetrics};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

fn cents(x: f64) -> i64 {
    (x * 100.0).round() as i64
}

fn preset_report(name: &str) -> ReportBundle {
    let cfg = parse_config(&format!("preset:{name}")).expect("preset parses");
    build_report(&cfg).expect("preset runs")
}

fn otr(b: &ReportBundle) -> &RunMetrics {
    b.run(Protocol::Otr).expect("otr run")
}

fn a1(defaults: &ReportBundle) -> Verdict {
    let m = otr(defaults);
    let t_tee = defaults.config.latency.t_tee();
    let n = m.records.iter().filter(|r| r.latency.is_some()).count();
    let rel = (m.l_avg - 0.8).abs() / 0.8;
    let setup = (t_tee - 0.5).abs() < 1e-9
        && defaults.config.econ.rho == 0.01
        && defaults.config.latency.t_zk_prove == 30.0
        && n >= 100_000;
    verdict(
        setup && rel <= 0.05,
        format!("L_avg = {:.4} s over {n} queries (t_tee {t_tee:.3}, rel. error {:.2}%, limit 5%)", m.l_avg, rel * 100.0),
    )
}

fn a2(defaults: &ReportBundle) -> Verdict {
    let t_full = defaults.config.latency.t_zkml_full;
    let ratio = t_full / otr(defaults).l_avg;
    verdict(t_full == 1200.0 && ratio >= 1400.0, format!("t_zkml_full / L_avg = {t_full} / {:.4} = {ratio:.1} (need >= 1400)", otr(defaults).l_avg))
}

fn a3(defaults: &ReportBundle) -> Verdict {
    let c = &defaults.config.costs;
    let rho = defaults.config.econ.rho;
    let want = [(Protocol::Otr, 7), (Protocol::Opml, 6), (Protocol::Zkml, 4505)];
    let mut ok = cents(amortized_cost(rho, c)) == 7;
    let mut parts = Vec::new();
    for (p, w) in want {
        let closed = baseline_cost(p, rho, c);
        let run = defaults.run(p).map_or(f64::NAN, |r| r.mean_cost);
        ok &= cents(closed) == w && cents(run) == w;
        parts.push(format!("{p} {closed:.4}/{run:.4}"));
    }
    verdict(ok, format!("closed/per-run $ per query: {} (targets 0.07, 0.06, 45.05)", parts.join(", ")))
}

fn profits(m: &RunMetrics, s: Behaviour) -> Vec<f64> {
    m.records.iter().filter(|r| r.strategy == s).map(|r| r.profit).collect()
}

fn a4(attack: &ReportBundle) -> Verdict {
    let cfg = &attack.config;
    let q = &cfg.quality;
    let calibrated = q.acceptance_threshold == 0.80;
    let poq = attack.run(Protocol::Poq).expect("poq run");
    let o = otr(attack);
    let adv: Vec<f64> = poq.records.iter().filter(|r| r.strategy.is_adversarial()).map(|r| r.profit).collect();
    let (poq_m, poq_se) = mean_se(&adv);
    let down = profits(o, Behaviour::Downgrade);
    let (down_m, down_se) = mean_se(&down);
    let down_rejected = o
        .records
        .iter()
        .filter(|r| r.strategy == Behaviour::Downgrade)
        .all(|r| r.status == QueryStatus::Rejected && r.detection == Detection::Attribution);
    let forged = profits(o, Behaviour::ForgedAttestation);
    let (forged_m, forged_se) = mean_se(&forged);
    let sizes = down.len() >= 10_000 && forged.len() >= 10_000 && adv.len() >= 10_000;
    let ok = calibrated
        && sizes
        && cfg.econ.p_fish >= 0.5
        && poq_m - 3.0 * poq_se > 0.0
        && down_m + 3.0 * down_se < 0.0
        && down_rejected
        && forged_m + 3.0 * forged_se < 0.0;
    verdict(
        ok,
        format!(
            "PoQ adversary {poq_m:.4}±{poq_se:.4} (n={}), OTR downgrade {down_m:.4}±{down_se:.4} (n={}, all rejected: {down_rejected}), OTR forged {forged_m:.3}±{forged_se:.3} (n={}, p_fish {})",
            adv.len(),
            down.len(),
            forged.len(),
            cfg.econ.p_fish
        ),
    )
}

fn a5() -> Verdict {
    let mut exact = true;
    for l_slash in [0.0, 1.0, 90.0, 1234.5] {
        for rho in [0.0, 0.01, 0.5, 1.0] {
            let e = EconParams { p_fish: 1.0, l_slash, rho, ..EconParams::default() };
            exact &= expected_cheat_profit(&e) == -l_slash;
        }
    }
    let mut cfg = parse_config("preset:broken-tee").expect("preset");
    cfg.econ.p_fish = 1.0;
    cfg.baselines = vec![Protocol::Otr];
    let b = build_report(&cfg).expect("run");
    let o = otr(&b);
    let cheats: Vec<_> = o.records.iter().filter(|r| r.strategy.is_adversarial()).collect();
    let slashed = cheats.iter().filter(|r| r.status == QueryStatus::Slashed && r.profit == -cfg.econ.l_slash).count();
    verdict(
        exact && !cheats.is_empty() && slashed == cheats.len(),
        format!("E[cheat] at p_fish=1 equals -l_slash: {exact}; slashed {slashed}/{} cheat attempts", cheats.len()),
    )
}

fn ceil_log2(n: u32) -> u32 {
    if n <= 1 {
        0
    } else {
        32 - (n - 1).leading_zeros()
    }
}

fn first_divergence(spec: &ModelSpec, a: &ExecutionTrace, b: &ExecutionTrace) -> Option<(u32, u32)> {
    (0..spec.layer_count).find_map(|layer| {
        let xs = op_states(a, spec, layer).unwrap();
        let ys = op_states(b, spec, layer).unwrap();
        xs.iter().zip(&ys).position(|(x, y)| x != y).map(|op| (layer, op as u32))
    })
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn a6() -> Verdict {
    let case = (1u32..=64, 1u32..=64).prop_flat_map(|(l, m)| {
        (Just(l), Just(m), 0..l, 0..m, any::<u64>(), any::<u64>(), any::<[u8; 8]>(), any::<bool>())
    });
    let max_rounds = Cell::new(0);
    let res = runner(1000).run(&case, |(l, m, fl, fo, salt, theta, query, faulty_defends)| {
        let spec = ModelSpec::new("m", l, m, theta);
        let qh = digest(&query);
        let honest = execute(&spec, qh, None);
        let faulty = execute(&spec, qh, Some(Fault::new(fl, fo, salt)));
        let oracle = first_divergence(&spec, &honest, &faulty).expect("fault diverges");
        let (def, cla) = if faulty_defends { (&faulty, &honest) } else { (&honest, &faulty) };
        let mut s = open_dispute(
            OpenRequest {
                session_id: 1,
                batch_id: 0,
                tuple_index: 0,
                claimant: "c".into(),
                defendant: "d".into(),
                query_hash: qh,
                committed_root: def.response_hash(),
                claimant_root: cla.response_hash(),
                bond: 1.0,
                layer_count: l,
                ops_per_layer: m,
            },
            WindowCheck { now: 0.0, deadline: Some(1e9), claimant_free_stake: 1.0, round_timeout: 10.0 },
        )
        .unwrap();
        let (outcome, _) = play_out(
            &mut s,
            &spec,
            &TrueTrace { spec: &spec, trace: def },
            &TrueTrace { spec: &spec, trace: cla },
            0.0,
            1.0,
        )
        .unwrap();
        let honest_wins = if faulty_defends { DisputeOutcome::ClaimantWins } else { DisputeOutcome::DefendantWins };
        prop_assert_eq!(s.disputed_op(), Some(oracle));
        prop_assert!(s.rounds <= ceil_log2(l) + ceil_log2(m) + 1, "rounds {} for L={} M={}", s.rounds, l, m);
        prop_assert_eq!(outcome, honest_wins);
        max_rounds.set(max_rounds.get().max(s.rounds));
        Ok(())
    });
    match res {
        Ok(()) => verdict(true, format!("1000 corrupted traces, L,M <= 64: op matches oracle, honest side always wins, max rounds {} (bound 13)", max_rounds.get())),
        Err(e) => verdict(false, format!("{e}")),
    }
}

fn a7() -> Verdict {
    const BATCHES: u64 = 100_000;
    const N: usize = 16;
    const RHO: f64 = 0.01;
    let vendor = Vendor::from_seed(b"a7-vendor");
    let spec = ModelSpec::new("m", 4, 2, 1);
    let enclave = vendor.provision("e", "m", "v1", b"e");
    let mut registry = ModelRegistry::new();
    registry.register_model("m", enclave.mrenclave).unwrap();
    let params = ContractParams {
        t_chal: 10.0,
        t_zk_prove: 30.0,
        l_slash: 1.0,
        bond_fraction: 0.1,
        fisher_reward_fraction: 0.5,
        round_timeout: 30.0,
    };
    let mut c = Contract::new(registry, vendor.root_of_trust(), VrfKey::from_seed(b"a7-vrf"), params, [spec.clone()], b"a7");
    c.ledger.deposit("seq", N as f64);
    let tuples: Vec<_> = (0..N)
        .map(|i| {
            let q = format!("q{i}");
            let qh = c.da.publish(q.as_bytes());
            let r = run_inference(&spec, q.as_bytes()).response;
            generate_quote(&enclave, "seq", qh, r, i as u128, None).unwrap()
        })
        .collect();
    let mut hits = 0u64;
    let mut per_index = [0u64; N];
    let mut all_pass = true;
    for b in 0..BATCHES {
        let now = b as f64;
        let batch =
            Batch { batch_id: b, tuples: tuples.clone(), claimed_model: "m".into(), block_height: b, sequencer_id: "seq".into() };
        let out = c.process_batch(batch, RHO, now).unwrap();
        match out.mode {
            Mode::SpotCheck => {
                hits += 1;
                per_index[out.checked_index.unwrap()] += 1;
                all_pass &= out.status == BatchStatus::HardFinal;
            }
            Mode::Optimistic => {
                let deadline = c.window_deadline(b).unwrap();
                c.expire_window(b, deadline).unwrap();
            }
        }
        c.retire(b).unwrap();
        c.drain_events();
    }
    let nf = BATCHES as f64;
    let freq = hits as f64 / nf;
    let sigma = (RHO * (1.0 - RHO) / nf).sqrt();
    let freq_ok = (freq - RHO).abs() <= 3.0 * sigma;
    let p = 1.0 / N as f64;
    let k = hits as f64;
    let idx_sigma = (k * p * (1.0 - p)).sqrt();
    let worst = per_index.iter().map(|&x| (x as f64 - k * p).abs() / idx_sigma).fold(0.0, f64::max);
    let idx_ok = worst <= 3.0;
    // Selection rule itself over every batch's VRF output, a 100x larger sample.
    let key = VrfKey::from_seed(b"a7-vrf-wide");
    let mut wide = [0u64; N];
    for h in 0..BATCHES {
        wide[select_index(&otr_core::contract::vrf_eval(&key, b"xi", h).proof, N)] += 1;
    }
    let wide_sigma = (nf * p * (1.0 - p)).sqrt();
    let wide_worst = wide.iter().map(|&x| (x as f64 - nf * p).abs() / wide_sigma).fold(0.0, f64::max);
    verdict(
        freq_ok && idx_ok && all_pass && wide_worst <= 3.0,
        format!(
            "{hits} spot-checks in {BATCHES} batches: freq {freq:.5} (0.01 ± {:.5}); worst index deviation {worst:.2}σ over {hits} selections, {wide_worst:.2}σ over {BATCHES} draws",
            3.0 * sigma
        ),
    )
}

#[derive(Clone, Debug)]
struct EnclavePlan {
    model: usize,
    version: usize,
    vendor_issued: bool,
    compromised: bool,
    revoked: bool,
}

fn a8() -> Verdict {
    let world = proptest::collection::vec(1usize..4, 1..5).prop_flat_map(|versions| {
        let k = versions.len();
        let vs = versions.clone();
        let plan = (0..k).prop_flat_map(move |m| {
            (Just(m), 0..=vs[m], proptest::bool::weighted(0.85), any::<bool>(), proptest::bool::weighted(0.15)).prop_map(
                |(model, version, vendor_issued, compromised, revoked)| EnclavePlan {
                    model,
                    version,
                    vendor_issued,
                    compromised,
                    revoked,
                },
            )
        });
        let plans = proptest::collection::vec(plan, 1..6);
        // (enclave, claimed model, forgery target: None = own measurement, Some(None) = random digest, tamper)
        let tuples = proptest::collection::vec(
            (any::<prop::sample::Index>(), 0..k, proptest::option::of(proptest::option::of(any::<prop::sample::Index>())), 0u8..4),
            1..24,
        );
        (Just(versions), plans, tuples)
    });
    let accepted_total = Cell::new(0u64);
    let rejected_total = Cell::new(0u64);
    let res = runner(1000).run(&world, |(versions, plans, tuples)| {
        let vendor = Vendor::from_seed(b"a8-vendor");
        let mut root = vendor.root_of_trust();
        let mut registry = ModelRegistry::new();
        let mut omega: Vec<BTreeSet<Digest>> = vec![BTreeSet::new(); versions.len()];
        let mut known = Vec::new();
        for (m, &nv) in versions.iter().enumerate() {
            for v in 0..=nv {
                let mr = measure_enclave(&format!("model-{m}"), &format!("v{v}"));
                if v < nv {
                    registry.register_model(&format!("model-{m}"), mr).unwrap();
                    omega[m].insert(mr);
                }
                known.push(mr);
            }
        }
        let enclaves: Vec<EnclaveIdentity> = plans
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let id = format!("e{i}");
                let (model, version) = (format!("model-{}", p.model), format!("v{}", p.version));
                let mut e = if p.vendor_issued {
                    vendor.provision(&id, &model, &version, id.as_bytes())
                } else {
                    EnclaveIdentity::self_signed(&id, &model, &version, id.as_bytes())
                };
                if p.compromised {
                    e = e.compromise();
                }
                if p.revoked {
                    root.revoke(&id);
                }
                e
            })
            .collect();
        for (qi, &(ei, claimed, forge, tamper)) in tuples.iter().enumerate() {
            let ei = ei.index(enclaves.len());
            let (plan, enc) = (&plans[ei], &enclaves[ei]);
            let qh = digest(&(qi as u64).to_le_bytes());
            let target = forge.map(|t| match t {
                Some(ix) => known[ix.index(known.len())],
                None => digest(&[qh.0.as_slice(), b"junk"].concat()),
            });
            let Ok(mut t) = generate_quote(enc, "seq", qh, vec![qi as u8; 8], qi as u128, target) else {
                prop_assert!(!enc.compromised);
                continue;
            };
            match tamper {
                1 => t.nonce ^= 1,
                2 => {
                    t.response.push(0);
                    t.response_hash = digest(&t.response);
                }
                _ => {}
            }
            let accepted = verify_poea(&registry, &t, &format!("model-{claimed}"), &root).is_accept();
            let in_omega = omega[claimed].contains(&t.mrenclave);
            prop_assert!(!accepted || in_omega, "accepted a measurement outside the claimed model's set");
            let honest = forge.is_none() && !matches!(tamper, 1 | 2);
            if honest && plan.vendor_issued && !plan.revoked && in_omega {
                prop_assert!(accepted, "honest tuple rejected");
            }
            if accepted {
                accepted_total.set(accepted_total.get() + 1);
            } else {
                rejected_total.set(rejected_total.get() + 1);
            }
        }
        Ok(())
    });
    match res {
        Ok(()) => verdict(
            true,
            format!(
                "1000 fuzzed worlds: {} accepted, {} rejected, none outside the claimed set; every honest tuple accepted",
                accepted_total.get(),
                rejected_total.get()
            ),
        ),
        Err(e) => verdict(false, format!("{e}")),
    }
}

fn a9(first_defaults: ReportBundle) -> Verdict {
    let mut mismatched = Vec::new();
    let dirs = tempfile::tempdir().expect("tempdir");
    for p in PRESETS {
        let first = if p.name == "paper-defaults" { None } else { Some(preset_report(p.name)) };
        let first = first.as_ref().unwrap_or(&first_defaults);
        let second = preset_report(p.name);
        let (da, db) = (dirs.path().join(format!("{}-a", p.name)), dirs.path().join(format!("{}-b", p.name)));
        first.write_to(&da).expect("write");
        second.write_to(&db).expect("write");
        for f in ["metrics.csv", "audit.log"] {
            let (x, y) = (std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap());
            if x != y || x.is_empty() {
                mismatched.push(format!("{}/{f}", p.name));
            }
        }
    }
    verdict(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{} presets run twice: metrics.csv and audit.log byte-identical", PRESETS.len())
        } else {
            format!("differ: {}", mismatched.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let defaults = preset_report("paper-defaults");
    let attack = preset_report("downgrade-attack");
    let results = [
        ("A1", "amortized latency", a1(&defaults)),
        ("A2", "speedup over full ZKML", a2(&defaults)),
        ("A3", "cost per query", a3(&defaults)),
        ("A4", "paradigm separation", a4(&attack)),
        ("A5", "limit law", a5()),
        ("A6", "bisection correctness", a6()),
        ("A7", "spot-check statistics", a7()),
        ("A8", "PoEA soundness", a8()),
        ("A9", "determinism", a9(defaults)),
    ];
    let mut failed = 0;
    for (id, name, v) in &results {
        println!("{id} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {}/{} passed in {:.1}s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
