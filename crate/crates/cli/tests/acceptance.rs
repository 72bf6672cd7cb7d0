//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use adaptrial_core::bandit::thompson_round;
use adaptrial_core::policy::Prior;
use adaptrial_core::sim::{run_replication_traced, Nonstationarity, RewardDelay, SimulationScenario};
use adaptrial_core::stats::{analyze, prob_best_exact, wald_two_proportion};
use adaptrial_core::store::{self, export_table};
use adaptrial_core::{BetaPosterior, Event, EventStore, ExperimentState, FileStore};
use adaptrial_server::{router, App};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("posterior expected values", posterior_expected_values),
        ("wald reproduction", wald_reproduction),
        ("selection-law oracle equivalence", selection_law),
        ("case-study replication", case_study),
        ("inference sanity (type-I rate)", inference_sanity),
        ("replay determinism", replay_determinism),
        ("service contract", service_contract),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ev3(s: u64, f: u64) -> String {
    format!("{:.3}", BetaPosterior::with_counts(1.0, 1.0, s, f).unwrap().expected_value())
}

fn posterior_expected_values() -> Outcome {
    let got = [ev3(4, 6), ev3(6, 4), ev3(2, 8), ev3(8, 2)];
    ensure!(got == ["0.417", "0.583", "0.250", "0.750"], "got {got:?}");
    Ok(format!("example 1 {}/{}, example 2 {}/{}", got[0], got[1], got[2], got[3]))
}

fn wald_reproduction() -> Outcome {
    let w = wald_two_proportion(126, 246, 144, 237).map_err(|e| e.to_string())?;
    let (m1, m2) = (format!("{:.3}", w.group1.mean), format!("{:.3}", w.group2.mean));
    let (s1, s2) = (format!("{:.3}", w.group1.sem), format!("{:.3}", w.group2.sem));
    ensure!(m1 == "0.512" && m2 == "0.608", "means {m1}/{m2}");
    ensure!(s1 == "0.032" && s2 == "0.032", "sems {s1}/{s2}");
    ensure!((w.z - 2.122).abs() <= 0.005, "z = {}", w.z);
    Ok(format!("means {m1}/{m2}, sems {s1}/{s2}, z = {:.4}, p = {:.4}", w.z, w.two_sided_p))
}

fn second_wins(a: (u64, u64), b: (u64, u64), rounds: usize, seed: u64) -> f64 {
    let posts = [
        BetaPosterior::with_counts(1.0, 1.0, a.0, a.1).unwrap(),
        BetaPosterior::with_counts(1.0, 1.0, b.0, b.1).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rounds)
        .filter(|_| thompson_round(&posts, &mut rng).unwrap().1 == 1)
        .count() as f64
        / rounds as f64
}

fn selection_law() -> Outcome {
    let exact1 = prob_best_exact(5.0, 7.0, 7.0, 5.0).map_err(|e| e.to_string())?;
    let exact2 = prob_best_exact(3.0, 9.0, 9.0, 3.0).map_err(|e| e.to_string())?;
    let f1 = second_wins((4, 6), (6, 4), 1_000_000, 101);
    let f2 = second_wins((2, 8), (8, 2), 1_000_000, 202);
    ensure!((f1 - exact1).abs() <= 0.002, "example 1: empirical {f1} vs exact {exact1}");
    ensure!((f2 - exact2).abs() <= 0.002, "example 2: empirical {f2} vs exact {exact2}");
    ensure!(f2 > f1 && exact2 > exact1, "example 2 not stronger: {f2} vs {f1}");
    Ok(format!(
        "example 1 {f1:.4} vs {exact1:.4}, example 2 {f2:.4} vs {exact2:.4} over 10^6 rounds"
    ))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_adaptrial"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("adaptrial {args:?}: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn out_dir(name: &str) -> std::path::PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn policy<'a>(agg: &'a Value, name: &str) -> &'a Value {
    agg["policies"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["policy"] == name)
        .unwrap()
}

fn case_study() -> Outcome {
    let dir = out_dir("case_study");
    cli(&["simulate", "paper_case_study", "--out", dir.to_str().unwrap()])?;
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let sc = &summary["scenario"];
    ensure!(
        sc["arm_true_means"] == json!([0.512, 0.608])
            && sc["split_to_uniform"] == 0.5
            && sc["burn_in"] == 100
            && sc["batch_size"] == 10
            && sc["horizon"] == 921
            && sc["replications"] == 1000,
        "scenario drifted: {sc}"
    );
    let agg = &summary["aggregate"];
    let (ur, ts) = (policy(agg, "UR"), policy(agg, "TSBB"));
    let ur_alloc: Vec<f64> = ur["allocation"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    ensure!(
        ur_alloc.iter().all(|a| (a - 0.5).abs() <= 0.03),
        "(a) UR split {ur_alloc:?}"
    );
    let share = ts["mean_best_arm_share"].as_f64().unwrap();
    ensure!((0.60..=0.95).contains(&share), "(b) TS better-arm share {share}");
    let (ts_r, ur_r) = (ts["mean_regret"].as_f64().unwrap(), ur["mean_regret"].as_f64().unwrap());
    let (ts_pp, ur_pp) = (
        ts["regret_per_participant"].as_f64().unwrap(),
        ur["regret_per_participant"].as_f64().unwrap(),
    );
    ensure!(ts_r < ur_r && ts_pp < ur_pp, "(c) TS regret {ts_r} / {ts_pp} vs UR {ur_r} / {ur_pp}");
    Ok(format!(
        "(a) UR {:.3}/{:.3} (b) TS better-arm {share:.3} (c) regret TS {ts_r:.2} < UR {ur_r:.2} per replication, {ts_pp:.4} < {ur_pp:.4} per participant",
        ur_alloc[0], ur_alloc[1]
    ))
}

fn inference_sanity() -> Outcome {
    let scenario = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/equal_means_fpr.toml");
    let sc = SimulationScenario::from_toml_str(&fs::read_to_string(scenario).unwrap()).map_err(|e| e.to_string())?;
    ensure!(
        sc.replications == 2000 && sc.horizon == 500 && sc.arm_true_means[0] == sc.arm_true_means[1],
        "scenario drifted"
    );
    let dir = out_dir("fpr");
    cli(&["simulate", scenario, "--fpr", "0.05", "--out", dir.to_str().unwrap()])?;
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("fpr.json")).unwrap()).unwrap();
    let (ur, ts) = (policy(&report, "UR"), policy(&report, "TSBB"));
    let rate = ur["rate"].as_f64().unwrap();
    ensure!((0.035..=0.065).contains(&rate), "UR rate {rate}");
    Ok(format!(
        "UR rate {rate:.4} in [0.035, 0.065]; TS rate {:.4} (observation, stored in {})",
        ts["rate"].as_f64().unwrap(),
        dir.join("fpr.json").display()
    ))
}

fn random_scenario(rng: &mut ChaCha8Rng) -> SimulationScenario {
    let arms = rng.random_range(2..=4usize);
    let means: Vec<f64> = (0..arms).map(|_| rng.random_range(0.05..0.95)).collect();
    let horizon = rng.random_range(50..400u64);
    SimulationScenario {
        name: "random".into(),
        split_to_uniform: rng.random_range(0.0..=1.0),
        burn_in: rng.random_range(0..60),
        batch_size: rng.random_range(1..15),
        priors: if rng.random_bool(0.5) {
            (0..arms)
                .map(|_| Prior {
                    success: rng.random_range(0.5..4.0),
                    failure: rng.random_range(0.5..4.0),
                })
                .collect()
        } else {
            Vec::new()
        },
        seed: rng.random(),
        nonstationarity: rng.random_bool(0.3).then(|| Nonstationarity {
            switch_at: rng.random_range(0..horizon),
            post_switch_means: (0..arms).map(|_| rng.random_range(0.05..0.95)).collect(),
        }),
        reward_missing_prob: rng.random_range(0.0..0.3),
        reward_delay: if rng.random_bool(0.5) {
            RewardDelay::Immediate
        } else {
            RewardDelay::Shuffled {
                max_delay: rng.random_range(0..25),
            }
        },
        ..SimulationScenario::new(&means, horizon)
    }
}

fn replay_determinism() -> Outcome {
    let dir = out_dir("replay");
    let store = FileStore::open(&dir).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut events_total = 0;
    for run in 0..100 {
        let sc = random_scenario(&mut rng);
        let trace = run_replication_traced(&sc, rng.random()).map_err(|e| e.to_string())?;
        let id = &trace.state.experiment_id;
        for e in &trace.events {
            store.append_event(id, e).map_err(|e| e.to_string())?;
        }
        let loaded = FileStore::open(&dir).unwrap().load(id).map_err(|e| e.to_string())?;
        events_total += loaded.len();
        let rebuilt = store::replay(&loaded).map_err(|e| format!("run {run}: {e}"))?;
        ensure!(rebuilt == trace.state, "run {run}: replayed state differs");

        let in_memory = trace.record.analysis().render();
        ensure!(
            analyze(&export_table(&loaded)).render() == in_memory,
            "run {run}: library analysis differs"
        );
        let printed = cli(&["analyze", store.log_path(id).to_str().unwrap()])?;
        ensure!(printed == in_memory, "run {run}: CLI analyze differs:\n{printed}\nvs\n{in_memory}");
    }
    Ok(format!("100 randomized runs, {events_total} events, state and rendered analysis identical"))
}

async fn call(r: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let b = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => b
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => b.body(Body::empty()).unwrap(),
    };
    let resp = r.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn committed(state: &Value) -> Vec<(u64, u64)> {
    state["arms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["successes"].as_u64().unwrap(), a["failures"].as_u64().unwrap()))
        .collect()
}

fn service_contract() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(8)
        .enable_all()
        .build()
        .unwrap();
    rt.block_on(async {
        let dir = out_dir("service");
        let app = App::with_file_store(FileStore::open(&dir).unwrap(), None, Some(17)).map_err(|e| e.to_string())?;
        let r = router(app);
        let body = json!({"arms": ["a", "b"], "split_to_uniform": 0.3, "thompson": {"burn_in": 0, "batch_size": 7}});
        let (_, created) = call(&r, "POST", "/v1/experiments", Some(body)).await;
        let id = created["experiment_id"].as_str().unwrap().to_string();
        let base = format!("/v1/experiments/{id}");

        // Sticky under 100 concurrent duplicates per participant.
        let participants = 20;
        let mut tasks = Vec::new();
        for p in 0..participants {
            for _ in 0..100 {
                let (r, uri) = (r.clone(), format!("{base}/assignments"));
                tasks.push(tokio::spawn(async move {
                    let (s, v) = call(&r, "POST", &uri, Some(json!({"participant_id": format!("s{p}")}))).await;
                    (p, s, v)
                }));
            }
        }
        let mut bodies: Vec<Vec<Value>> = vec![Vec::new(); participants];
        for t in tasks {
            let (p, s, v) = t.await.unwrap();
            ensure!(s == StatusCode::OK, "assign failed: {v}");
            bodies[p].push(v);
        }
        ensure!(
            bodies.iter().all(|b| b.iter().all(|v| v == &b[0])),
            "non-identical responses for a participant"
        );
        let (_, st) = call(&r, "GET", &format!("{base}/state"), None).await;
        ensure!(st["assignments"] == participants, "records: {}", st["assignments"]);

        // One reward each, then 10 concurrent duplicates each: all conflict.
        let mut tasks = Vec::new();
        for b in &bodies {
            let aid = b[0]["assignment_id"].as_u64().unwrap();
            let (s, v) = call(&r, "POST", &format!("{base}/rewards"), Some(json!({"assignment_id": aid, "value": 1}))).await;
            ensure!(s == StatusCode::OK, "first reward rejected: {v}");
            for _ in 0..10 {
                let (r, uri) = (r.clone(), format!("{base}/rewards"));
                tasks.push(tokio::spawn(async move {
                    call(&r, "POST", &uri, Some(json!({"assignment_id": aid, "value": 0}))).await
                }));
            }
        }
        for t in tasks {
            let (s, v) = t.await.unwrap();
            ensure!(s == StatusCode::CONFLICT && v["code"] == "conflict", "duplicate accepted: {s} {v}");
        }
        let (_, st) = call(&r, "GET", &format!("{base}/state"), None).await;
        ensure!(st["rewards_recorded"] == participants, "rewards: {}", st["rewards_recorded"]);

        // Batch stasis: committed posteriors move only on a flush.
        let mut before = committed(&st);
        let mut flushes_seen = 0;
        let mut env = ChaCha8Rng::seed_from_u64(3);
        for i in 0..300 {
            let (_, a) = call(&r, "POST", &format!("{base}/assignments"), Some(json!({"participant_id": format!("t{i}")}))).await;
            let (_, st) = call(&r, "GET", &format!("{base}/state"), None).await;
            ensure!(committed(&st) == before, "posterior moved on assignment {i}");
            let value = u8::from(env.random_bool(if a["arm"] == 1 { 0.7 } else { 0.4 }));
            let aid = a["assignment_id"].as_u64().unwrap();
            let (_, rw) = call(&r, "POST", &format!("{base}/rewards"), Some(json!({"assignment_id": aid, "value": value}))).await;
            let (_, st) = call(&r, "GET", &format!("{base}/state"), None).await;
            let after = committed(&st);
            let flushed = rw["flushed"] == true;
            ensure!((after != before) == flushed, "reward {i}: flushed={flushed} but posterior change={}", after != before);
            flushes_seen += usize::from(flushed);
            before = after;
        }

        // Same property on the persisted log, event by event.
        let events = FileStore::open(&dir).unwrap().load(&id).map_err(|e| e.to_string())?;
        let mut state: Option<ExperimentState> = None;
        for e in &events {
            let prev = state.as_ref().map(|s| s.committed.clone());
            match state.as_mut() {
                None => state = Some(ExperimentState::replay(std::slice::from_ref(e)).map_err(|e| e.to_string())?),
                Some(s) => s.apply(e).map_err(|e| e.to_string())?,
            }
            if let Some(prev) = prev {
                let changed = prev != state.as_ref().unwrap().committed;
                ensure!(
                    changed == matches!(e.event, Event::BatchFlushed { .. }),
                    "sequence {}: committed posterior change={changed} on {}",
                    e.sequence,
                    e.event.kind_name()
                );
            }
        }
        Ok(format!(
            "{participants} participants x 100 concurrent assigns -> 1 record each; {} duplicate rewards all 409; {flushes_seen} flushes, posteriors static between them",
            participants * 10
        ))
    })
}
