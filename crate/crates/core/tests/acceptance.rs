//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use common::{job_archive, untar, Harness, SECRET};
use pubcluster_core::allocator::{allocate_exhaustive, allocate_ga, AllocationRequest, GaParams};
use pubcluster_core::domain::{
    hours, transition_application, validate_registration, ActionKind, Applicant, AuditEvent, Block,
    Clock, Event, NodeId, NodeRecord, NodeSpecClass, Period, Policy, PowerState, RegistrationForm,
};
use pubcluster_core::fleet::{build_job_archive, Caller, SimJobScript};
use pubcluster_core::store::{CrashPoint, RecordKind, Store, StoreError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
}

fn audit_trail(h: &Harness, app_id: &str) -> Vec<String> {
    h.service
        .audit_log(Some(SECRET))
        .unwrap()
        .into_iter()
        .filter(|e| e.app_id().map(|a| a.as_str()) == Some(app_id))
        .map(|e| match e {
            AuditEvent::Application { from, to, .. } => {
                format!("app {}->{to}", from.map_or("-".into(), |f| f.to_string()))
            }
            AuditEvent::Job { from, to, .. } => format!(
                "job {}->{to:?}",
                from.map_or("-".into(), |f| format!("{f:?}"))
            ),
            AuditEvent::Sentinel { action, .. } => match action.kind {
                ActionKind::ThresholdShutdown { node } => format!("sentinel shutdown {node}"),
                ActionKind::BlockExpired { .. } => "sentinel expire".into(),
            },
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let rt = runtime();
    rt.block_on(async {
        let h = Harness::new(10);
        let app = h.submit("ada", 3).await;
        let (s, review) = h.approve(&app, 3, 48).await;
        ensure!(s == StatusCode::OK, "approve: {s} {review}");
        let token = review["access_token"]
            .as_str()
            .unwrap_or_default()
            .to_owned();
        let (s, conf) = h
            .call(
                "POST",
                &format!("/applications/{app}/confirm"),
                Some(("bearer", &token)),
                None,
            )
            .await;
        ensure!(
            s == StatusCode::OK && conf["state"] == "active",
            "confirm: {s} {conf}"
        );
        let nodes: Vec<NodeId> = conf["node_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|n| n.as_str().unwrap().into())
            .collect();
        ensure!(nodes.len() == 3, "block has {} nodes", nodes.len());
        let power = |want: PowerState| {
            nodes
                .iter()
                .all(|n| h.service.fleet().view(n).unwrap().power == want)
        };
        ensure!(power(PowerState::On), "block nodes not on after confirm");

        let (s, job) = h
            .upload(&app, &token, "mpich2", &job_archive(20, "rank {rank} ok"))
            .await;
        ensure!(s == StatusCode::CREATED, "upload: {s} {job}");
        let job_id = job["job_id"].as_str().unwrap().to_owned();
        let (s, run) = h
            .call(
                "POST",
                &format!("/jobs/{job_id}/execute"),
                Some(("bearer", &token)),
                None,
            )
            .await;
        ensure!(
            s == StatusCode::OK && run["state"] == "running",
            "execute: {s} {run}"
        );
        h.advance(Duration::from_secs(20));
        let (_, st) = h
            .call(
                "GET",
                &format!("/jobs/{job_id}"),
                Some(("bearer", &token)),
                None,
            )
            .await;
        ensure!(st["state"] == "finished", "job state {st}");
        let req = axum::http::Request::get(format!("/jobs/{job_id}/result"))
            .header("authorization", format!("Bearer {token}"))
            .body(axum::body::Body::empty())
            .unwrap();
        let (s, bytes) = h.send(req).await;
        ensure!(s == StatusCode::OK, "download: {s}");
        let files = untar(&bytes);
        for r in 0..3 {
            ensure!(
                files.get(&format!("rank-{r}.out")) == Some(&format!("rank {r} ok\n")),
                "rank {r} output missing"
            );
        }

        h.advance(hours(48));
        h.service
            .sentinel()
            .tick(h.clock.now())
            .map_err(|e| e.to_string())?;
        ensure!(power(PowerState::Off), "block nodes still on after expiry");
        let (_, view) = h
            .call(
                "GET",
                &format!("/applications/{app}"),
                Some(("bearer", &token)),
                None,
            )
            .await;
        ensure!(view["state"] == "expired", "application {}", view["state"]);

        let trail = audit_trail(&h, &app);
        let expected = [
            "app -->Submitted",
            "app Submitted->Approved",
            "app Approved->Confirmed",
            "app Confirmed->Active",
            "job -->Uploaded",
            "job Uploaded->Running",
            "job Running->Finished",
            "sentinel expire",
            "app Active->Expired",
        ];
        ensure!(trail == expected, "audit trail {trail:?}");
        let secs = started.elapsed().as_secs_f64();
        ensure!(secs < 30.0, "took {secs:.1}s");
        Ok(format!(
            "{} audit entries in order, {secs:.2}s",
            trail.len()
        ))
    })
}

fn policy_conformance() -> Outcome {
    let rt = runtime();
    rt.block_on(async {
        let h = Harness::new(10);
        let mut seen = Vec::new();
        for (nodes, hrs, want) in [
            (4, 72, StatusCode::OK),
            (5, 72, StatusCode::CONFLICT),
            (4, 73, StatusCode::CONFLICT),
            (5, 73, StatusCode::CONFLICT),
            (2, 1, StatusCode::OK),
            (1, 24, StatusCode::CONFLICT),
        ] {
            let app = h.submit("pat", nodes).await;
            let (s, v) = h.approve(&app, nodes as u32, hrs).await;
            ensure!(s == want, "{nodes} nodes / {hrs} h gave {s} {v}");
            seen.push(format!("{nodes}/{hrs}h={}", s.as_u16()));
        }
        // The same limits hold at the state-machine level.
        let policy = Policy::default();
        let form = RegistrationForm {
            applicant: Applicant {
                name: "p".into(),
                contact: "p@x".into(),
                job_description: "d".into(),
            },
            nodes_requested: 4,
        };
        let app = validate_registration(&form, h.clock.now()).unwrap();
        let approve = |n: usize, hrs: u64| Event::Approve {
            assignment: (0..n).map(|i| NodeId::from(format!("n{i:02}"))).collect(),
            period: Period::starting_at(h.clock.now(), hours(hrs)).unwrap(),
        };
        ensure!(
            transition_application(&app, approve(4, 72), &policy).is_ok(),
            "4/72 refused by domain"
        );
        ensure!(
            transition_application(&app, approve(5, 72), &policy).is_err(),
            "5 nodes accepted by domain"
        );
        ensure!(
            transition_application(&app, approve(4, 73), &policy).is_err(),
            "73 h accepted by domain"
        );
        Ok(seen.join(" "))
    })
}

fn allocator_oracle() -> Outcome {
    let tiers = [
        ("i486", 3, 64),
        ("pentium3", 12, 256),
        ("athlon-xp", 25, 512),
        ("athlon64", 40, 1024),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_a110c);
    let started = Instant::now();
    let mut equal = 0;
    let mut worst = String::new();
    for case in 0..100 {
        let n_tiers = rng.random_range(2..=4);
        let mut pick: Vec<usize> = (0..4).collect();
        for i in (1..4).rev() {
            pick.swap(i, rng.random_range(0..=i));
        }
        let pick = &pick[..n_tiers];
        let size = rng.random_range(1..=12);
        let mut inventory: Vec<NodeRecord> = (0..size)
            .map(|i| {
                let (label, perf, mem) = tiers[pick[rng.random_range(0..n_tiers)]];
                NodeRecord {
                    node_id: format!("n{i:02}").into(),
                    spec: NodeSpecClass {
                        label: label.into(),
                        perf_score: perf,
                        mem_mb: mem,
                    },
                    power: PowerState::Off,
                    owner: None,
                    temperature_c: 25.0,
                    load: 0.0,
                }
            })
            .collect();
        // Some nodes are already taken by other blocks.
        for n in inventory.iter_mut() {
            if rng.random_bool(0.2) {
                n.owner = Some("blk-other".into());
            }
        }
        let free = inventory.iter().filter(|n| n.is_free()).count();
        if free == 0 {
            inventory[0].owner = None;
        }
        let free = inventory.iter().filter(|n| n.is_free()).count();
        let request = AllocationRequest {
            node_count: rng.random_range(1..=4usize.min(free)),
            min_perf_score: if rng.random_bool(0.3) {
                [0, 12, 25][rng.random_range(0..3)]
            } else {
                0
            },
        };
        let ga =
            allocate_ga(&request, &inventory, &GaParams::default()).map_err(|e| e.to_string())?;
        let oracle = allocate_exhaustive(&request, &inventory).map_err(|e| e.to_string())?;
        if ga.fitness == oracle.fitness {
            equal += 1;
        } else if worst.is_empty() {
            worst = format!(
                "case {case}: ga {} vs oracle {}",
                ga.fitness, oracle.fitness
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(equal == 100, "{equal}/100 equal; first miss {worst}");
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("100/100 exact, {secs:.2}s"))
}

/// Pulls `job-<32 hex>` and `blk-<32 hex>` tokens out of a response body.
fn ids_in(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for prefix in ["job-", "blk-"] {
        let mut rest = text;
        while let Some(i) = rest.find(prefix) {
            let cand = &rest[i..];
            let hex = cand[4..].bytes().take_while(u8::is_ascii_hexdigit).count();
            if hex == 32 {
                out.push(&cand[..36]);
            }
            rest = &cand[4..];
        }
    }
    out
}

fn isolation_fuzz() -> Outcome {
    const TENANTS: usize = 20;
    const CALLS: usize = 10_000;
    let rt = runtime();
    rt.block_on(async {
        let h = Arc::new(Harness::new(64));
        struct Tenant {
            app: String,
            token: String,
            block: String,
            nodes: BTreeSet<String>,
        }
        let mut tenants = Vec::new();
        for t in 0..TENANTS {
            let size = 2 + (t % 2) as u32;
            let (app, token, conf) = h.active_tenant(&format!("t{t}"), size, 72).await;
            let nodes = conf["node_ids"]
                .as_array()
                .unwrap()
                .iter()
                .map(|n| n.as_str().unwrap().to_owned())
                .collect();
            tenants.push(Tenant {
                app,
                token,
                block: conf["block_id"].as_str().unwrap().to_owned(),
                nodes,
            });
        }
        let tenants = Arc::new(tenants);
        // job id -> owning tenant index
        let jobs: Arc<Mutex<HashMap<String, usize>>> = Arc::default();
        for (i, t) in tenants.iter().enumerate() {
            let (s, v) = h
                .upload(&t.app, &t.token, "mpich1", &job_archive(3, "r{rank}"))
                .await;
            ensure!(s == StatusCode::CREATED, "seed upload {s} {v}");
            jobs.lock()
                .unwrap()
                .insert(v["job_id"].as_str().unwrap().to_owned(), i);
        }
        let envelopes_before = h.service.fleet().envelope_count();

        let mut tasks = Vec::new();
        for me in 0..TENANTS {
            let (h, tenants, jobs) = (Arc::clone(&h), Arc::clone(&tenants), Arc::clone(&jobs));
            tasks.push(tokio::spawn(async move {
                let mut rng = ChaCha8Rng::seed_from_u64(me as u64);
                // (whose credentials were presented, body); `None` is anonymous.
                let mut ok_bodies: Vec<(Option<usize>, String)> = Vec::new();
                let mut statuses: BTreeMap<u16, usize> = BTreeMap::new();
                let t = &tenants[me];
                for _ in 0..CALLS / TENANTS {
                    let other_ix = (me + rng.random_range(1..TENANTS)) % TENANTS;
                    let other = &tenants[other_ix];
                    let (own_job, foreign_job) = {
                        let j = jobs.lock().unwrap();
                        let mine: Vec<&String> = j
                            .iter()
                            .filter(|(_, o)| **o == me)
                            .map(|(k, _)| k)
                            .collect();
                        let theirs: Vec<&String> = j
                            .iter()
                            .filter(|(_, o)| **o != me)
                            .map(|(k, _)| k)
                            .collect();
                        (
                            mine[rng.random_range(0..mine.len())].clone(),
                            theirs[rng.random_range(0..theirs.len())].clone(),
                        )
                    };
                    let job = if rng.random_bool(0.5) {
                        &own_job
                    } else {
                        &foreign_job
                    };
                    let app = if rng.random_bool(0.5) {
                        &t.app
                    } else {
                        &other.app
                    };
                    let (holder, token) = match rng.random_range(0..10) {
                        0 => (None, "deadbeef".to_owned()),
                        1 => (Some(other_ix), other.token.clone()),
                        _ => (Some(me), t.token.clone()),
                    };
                    let auth = Some(("bearer", token.as_str()));
                    let (status, body) = match rng.random_range(0..10) {
                        0 => {
                            h.call("GET", &format!("/applications/{app}"), auth, None)
                                .await
                        }
                        1 => h.call("GET", &format!("/jobs/{job}"), auth, None).await,
                        2 => {
                            h.call("POST", &format!("/jobs/{job}/execute"), auth, None)
                                .await
                        }
                        3 => {
                            h.call("GET", &format!("/jobs/{job}/result"), auth, None)
                                .await
                        }
                        4 => {
                            h.call("GET", &format!("/applications/{app}/usage"), auth, None)
                                .await
                        }
                        5 => {
                            h.call("POST", &format!("/applications/{app}/confirm"), auth, None)
                                .await
                        }
                        6 => {
                            let (s, v) = h.call("GET", "/cluster", None, None).await;
                            if s == StatusCode::OK {
                                ok_bodies.push((None, v.to_string()));
                            }
                            *statuses.entry(s.as_u16()).or_default() += 1;
                            continue;
                        }
                        7 => {
                            let script = match rng.random_range(0..4) {
                                0 => SimJobScript::new(2, "x").runaway(),
                                1 => SimJobScript::new(2, "x").failing(Some(1)),
                                _ => SimJobScript::new(rng.random_range(1..5), "r{rank}"),
                            };
                            let (s, v) = h
                                .upload(app, &token, "pvm", &build_job_archive(&script, &[]))
                                .await;
                            if s == StatusCode::CREATED {
                                let owner = holder.expect("upload succeeded without a valid token");
                                jobs.lock()
                                    .unwrap()
                                    .insert(v["job_id"].as_str().unwrap().to_owned(), owner);
                            }
                            (s, v)
                        }
                        8 => {
                            h.advance(Duration::from_millis(700));
                            h.call("GET", &format!("/jobs/{job}"), auth, None).await
                        }
                        _ => {
                            let sel = if rng.random_bool(0.5) {
                                "all".to_owned()
                            } else {
                                format!("block:{}", other.block)
                            };
                            h.call(
                                "POST",
                                "/admin/fanout",
                                auth,
                                Some(json!({"selector": sel, "command": "ps"})),
                            )
                            .await
                        }
                    };
                    *statuses.entry(status.as_u16()).or_default() += 1;
                    if status == StatusCode::OK || status == StatusCode::CREATED {
                        ok_bodies.push((holder, body.to_string()));
                    }
                }
                (ok_bodies, statuses)
            }));
        }
        let mut leaks = Vec::new();
        let mut total: BTreeMap<u16, usize> = BTreeMap::new();
        let owner_of: HashMap<String, usize> = {
            let mut m: HashMap<String, usize> = jobs.lock().unwrap().clone();
            for (i, t) in tenants.iter().enumerate() {
                m.insert(t.block.clone(), i);
            }
            m
        };
        let mut calls = 0;
        for task in tasks {
            let (bodies, statuses) = task.await.map_err(|e| e.to_string())?;
            for (k, v) in statuses {
                *total.entry(k).or_default() += v;
                calls += v;
            }
            for (holder, b) in bodies {
                for id in ids_in(&b) {
                    if owner_of.get(id).is_some_and(|o| Some(*o) != holder) {
                        leaks.push(format!("caller {holder:?} saw {id}"));
                    }
                }
            }
        }
        let by_app: HashMap<&str, &Tenant> = tenants.iter().map(|t| (t.app.as_str(), t)).collect();
        let envelopes = h.service.fleet().envelopes();
        let mut crossings = 0;
        let mut untagged = 0;
        for env in &envelopes[envelopes_before..] {
            match env
                .on_behalf_of
                .as_ref()
                .and_then(|a| by_app.get(a.as_str()))
            {
                Some(t) if t.nodes.contains(env.target.as_str()) => {}
                Some(_) => crossings += 1,
                None => untagged += 1,
            }
        }
        ensure!(calls == CALLS, "{calls} calls made");
        ensure!(
            leaks.is_empty(),
            "{} foreign ids in 2xx bodies, e.g. {}",
            leaks.len(),
            leaks[0]
        );
        ensure!(
            crossings == 0 && untagged == 0,
            "{crossings} cross-block and {untagged} untagged envelopes"
        );
        Ok(format!(
            "{calls} calls, {} envelopes checked, 0 crossings, 0 leaks, statuses {total:?}",
            envelopes.len() - envelopes_before
        ))
    })
}

fn threshold_automation() -> Outcome {
    let rt = runtime();
    rt.block_on(async {
        let h = Harness::new(10);
        let (a, _, ca) = h.active_tenant("hot", 3, 24).await;
        let (b, _, cb) = h.active_tenant("cool", 2, 24).await;
        let fleet = h.service.fleet();
        let store = h.service.store();
        let node_ids = |c: &Value| -> Vec<NodeId> {
            c["node_ids"]
                .as_array()
                .unwrap()
                .iter()
                .map(|n| n.as_str().unwrap().into())
                .collect()
        };
        let (na, nb) = (node_ids(&ca), node_ids(&cb));
        let victim = na[1].clone();
        let policy = h.service.policy();
        ensure!(
            policy.temp_threshold_c == 60.0,
            "threshold is {}",
            policy.temp_threshold_c
        );

        let snapshot = |ids: &[NodeId]| -> Vec<(NodeId, PowerState)> {
            ids.iter()
                .map(|n| (n.clone(), fleet.view(n).unwrap().power))
                .collect()
        };
        let records = |app: &str, block: &str| -> (Value, Value, u64, u64) {
            (
                store
                    .get::<Value>(RecordKind::Application, app)
                    .unwrap()
                    .unwrap(),
                store
                    .get::<Value>(RecordKind::Block, block)
                    .unwrap()
                    .unwrap(),
                store.version(RecordKind::Application, app),
                store.version(RecordKind::Block, block),
            )
        };
        let siblings: Vec<NodeId> = na.iter().filter(|n| **n != victim).cloned().collect();
        let before_siblings = snapshot(&siblings);
        let before_b = (snapshot(&nb), records(&b, cb["block_id"].as_str().unwrap()));

        fleet
            .inject_temperature_offset(&victim, 50.0)
            .map_err(|e| e.to_string())?;
        h.advance(Duration::from_secs(5));
        let actions = h
            .service
            .sentinel()
            .tick(h.clock.now())
            .map_err(|e| e.to_string())?;

        ensure!(
            fleet.view(&victim).unwrap().power == PowerState::Off,
            "{victim} still on"
        );
        ensure!(
            actions.iter().any(|x| x.kind
                == ActionKind::ThresholdShutdown {
                    node: victim.clone()
                }),
            "no shutdown action returned"
        );
        let audited = audit_trail(&h, &a).contains(&format!("sentinel shutdown {victim}"));
        ensure!(audited, "no ThresholdShutdown audit record for {victim}");
        let log = std::fs::read_to_string(h.dir.path().join("actions.ndjson")).unwrap_or_default();
        ensure!(
            log.contains("ThresholdShutdown") && log.contains(victim.as_str()),
            "action log lacks shutdown"
        );
        ensure!(
            snapshot(&siblings) == before_siblings,
            "sibling nodes changed"
        );
        let after_b = (snapshot(&nb), records(&b, cb["block_id"].as_str().unwrap()));
        ensure!(after_b == before_b, "other block changed");
        Ok(format!(
            "{victim} off after 1 tick, 2 siblings and other block unchanged"
        ))
    })
}

fn runaway_defense() -> Outcome {
    let rt = runtime();
    rt.block_on(async {
        let h = Harness::new(10);
        let (app, token, conf) = h.active_tenant("greedy", 3, 2).await;
        let (_, other_token, _) = h.active_tenant("bystander", 2, 24).await;
        let archive = build_job_archive(&SimJobScript::new(1, "forever").runaway(), &[]);
        let (s, job) = h.upload(&app, &token, "lam-mpi", &archive).await;
        ensure!(s == StatusCode::CREATED, "upload {s}");
        let job_id = job["job_id"].as_str().unwrap().to_owned();
        h.call(
            "POST",
            &format!("/jobs/{job_id}/execute"),
            Some(("bearer", &token)),
            None,
        )
        .await;

        h.advance(hours(1));
        h.service
            .sentinel()
            .tick(h.clock.now())
            .map_err(|e| e.to_string())?;
        let (_, st) = h
            .call(
                "GET",
                &format!("/jobs/{job_id}"),
                Some(("bearer", &token)),
                None,
            )
            .await;
        ensure!(
            st["state"] == "running",
            "runaway not running mid-period: {st}"
        );

        let end = conf["period"]["end"].as_i64().unwrap();
        h.clock.set(pubcluster_core::Timestamp(end));
        h.service
            .sentinel()
            .tick(h.clock.now())
            .map_err(|e| e.to_string())?;
        let (_, st) = h
            .call(
                "GET",
                &format!("/jobs/{job_id}"),
                Some(("bearer", &token)),
                None,
            )
            .await;
        ensure!(st["state"] == "failed", "job after period end: {st}");

        let store = h.service.store();
        let mut on_under_expired = Vec::new();
        for block in store.list::<Block>(RecordKind::Block).unwrap() {
            if block.is_active() {
                continue;
            }
            for n in &block.node_ids {
                if h.service.fleet().view(n).unwrap().power == PowerState::On {
                    on_under_expired.push(n.to_string());
                }
            }
        }
        ensure!(
            on_under_expired.is_empty(),
            "nodes on under expired blocks: {on_under_expired:?}"
        );
        let (_, other) = h
            .call("GET", "/cluster", Some(("admin", SECRET)), None)
            .await;
        ensure!(
            other["blocks"].as_array().map(Vec::len) == Some(1),
            "bystander block disturbed"
        );
        let _ = other_token;
        Ok(format!(
            "job failed with exit {} at period end, block powered off",
            st["exit_code"]
        ))
    })
}

fn module_switching() -> Outcome {
    let rt = runtime();
    rt.block_on(async {
        let h = Harness::new(10);
        let (_, _, conf) = h.active_tenant("mods", 4, 24).await;
        let block: Block = h
            .service
            .store()
            .get(RecordKind::Block, conf["block_id"].as_str().unwrap())
            .unwrap()
            .unwrap();
        let fleet = h.service.fleet();
        let gw = Caller::new("gateway").on_behalf_of(&block.app_id);
        let env_of = |n: &NodeId| {
            fleet
                .exec_command(&gw, n, "env")
                .unwrap()
                .result
                .unwrap()
                .stdout
        };
        let var = |text: &str, key: &str| -> Option<String> {
            text.lines()
                .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_owned))
        };
        let base = env_of(&block.master_node);
        let base_path = var(&base, "PATH").unwrap();
        let names: Vec<String> = fleet.manifest().names().map(str::to_owned).collect();
        ensure!(names.len() == 4, "manifest has {} entries", names.len());

        for m in &names {
            fleet
                .switch_module(&gw, &block, m)
                .map_err(|e| e.to_string())?;
            let entry = fleet.manifest().get(m).unwrap();
            for n in &block.node_ids {
                let env = env_of(n);
                for (key, dir) in &entry.env_prepends {
                    let got = var(&env, key).unwrap_or_default();
                    let want = match key.as_str() {
                        "PATH" => format!("{dir}:{base_path}"),
                        _ => dir.clone(),
                    };
                    ensure!(got == want, "{m} on {n}: {key}={got:?}, want {want:?}");
                }
            }
        }
        let mut pairs = 0;
        for a in &names {
            for b in names.iter().filter(|b| *b != a) {
                fleet
                    .switch_module(&gw, &block, a)
                    .map_err(|e| e.to_string())?;
                let first: Vec<String> = block.node_ids.iter().map(env_of).collect();
                fleet
                    .switch_module(&gw, &block, b)
                    .map_err(|e| e.to_string())?;
                let mid: Vec<String> = block.node_ids.iter().map(env_of).collect();
                ensure!(mid != first, "{a}->{b} left the environment unchanged");
                fleet
                    .switch_module(&gw, &block, a)
                    .map_err(|e| e.to_string())?;
                let back: Vec<String> = block.node_ids.iter().map(env_of).collect();
                ensure!(back == first, "{a}->{b}->{a} differs");
                pairs += 1;
            }
        }
        Ok(format!(
            "4 entries prepend correctly on 4 nodes, {pairs} A->B->A round trips byte-identical"
        ))
    })
}

fn parse_all_records(root: &Path) -> Result<usize, String> {
    let mut n = 0;
    for kind in std::fs::read_dir(root.join("records")).map_err(|e| e.to_string())? {
        for f in
            std::fs::read_dir(kind.map_err(|e| e.to_string())?.path()).map_err(|e| e.to_string())?
        {
            let p = f.map_err(|e| e.to_string())?.path();
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            serde_json::from_slice::<Value>(&bytes).map_err(|e| format!("{}: {e}", p.display()))?;
            n += 1;
        }
    }
    Ok(n)
}

fn store_crash_consistency() -> Outcome {
    const TXNS: usize = 1000;
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let points = [
        CrashPoint::BeforeWal,
        CrashPoint::TornWal,
        CrashPoint::AfterWal,
        CrashPoint::MidApply,
    ];
    // Independent model of what must be on disk: id -> (version, value).
    let mut model: BTreeMap<String, (u64, i64)> = BTreeMap::new();
    let mut store = Store::open_with(dir.path(), false).map_err(|e| e.to_string())?;
    let (mut crashes, mut restarts_ok) = (0, 0);
    for i in 0..TXNS {
        let writes: Vec<(String, i64)> = (0..rng.random_range(1..=5))
            .map(|_| {
                (
                    format!("r{}", rng.random_range(0..40)),
                    rng.random_range(-1000..1000),
                )
            })
            .collect::<BTreeMap<_, _>>()
            .into_iter()
            .collect();
        let crash = rng
            .random_bool(0.1)
            .then(|| points[rng.random_range(0..points.len())]);
        if let Some(p) = crash {
            store.inject_crash(p);
        }
        let mut txn = store.begin();
        for (id, v) in &writes {
            txn.put(RecordKind::Job, id, &json!({ "v": v, "txn": i }))
                .map_err(|e| e.to_string())?;
        }
        let landed = match store.commit(txn) {
            Ok(_) => true,
            Err(StoreError::Crashed) => {
                crashes += 1;
                matches!(crash, Some(CrashPoint::AfterWal | CrashPoint::MidApply))
            }
            Err(e) => return Err(format!("txn {i}: {e}")),
        };
        if landed {
            for (id, v) in &writes {
                let e = model.entry(id.clone()).or_insert((0, 0));
                *e = (e.0 + 1, *v);
            }
        }
        if crash.is_some() {
            drop(store);
            store = Store::open_with(dir.path(), false)
                .map_err(|e| format!("reopen after txn {i}: {e}"))?;
            Store::verify(dir.path()).map_err(|e| format!("verify after txn {i}: {e}"))?;
            parse_all_records(dir.path())?;
            for (id, (ver, v)) in &model {
                let got = store
                    .get::<Value>(RecordKind::Job, id)
                    .map_err(|e| e.to_string())?;
                ensure!(
                    store.version(RecordKind::Job, id) == *ver,
                    "txn {i}: {id} at v{} want v{ver}",
                    store.version(RecordKind::Job, id)
                );
                ensure!(
                    got.as_ref().map(|g| g["v"].clone()) == Some(json!(v)),
                    "txn {i}: {id} = {got:?}, want {v}"
                );
            }
            restarts_ok += 1;
        }
    }
    drop(store);
    let report = Store::verify(dir.path()).map_err(|e| e.to_string())?;
    let files = parse_all_records(dir.path())?;
    ensure!(
        restarts_ok == crashes,
        "{restarts_ok}/{crashes} restarts consistent"
    );
    Ok(format!(
        "{TXNS} txns, {crashes} kill-points, {restarts_ok}/{crashes} restarts consistent, {} committed, {files} record files parse",
        report.transactions
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("end_to_end_workflow", end_to_end),
        ("policy_conformance", policy_conformance),
        ("allocator_oracle_equivalence", allocator_oracle),
        ("tenant_isolation_fuzz", isolation_fuzz),
        ("threshold_automation", threshold_automation),
        ("runaway_defense", runaway_defense),
        ("module_switching", module_switching),
        ("store_crash_consistency", store_crash_consistency),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
