use std::time::{Duration, Instant};

use dzlab::episode::{Decision, Episode};
use dzlab::scenario::{generate_scenario, Phase, ScenarioConfig};
use dzlab::session::client::Client;
use dzlab::session::{replay, serve, ClientMsg, Control, EpisodeStore, ServerConfig, ServerHandle, ServerMsg};

fn start_server(fast: bool, dir: &std::path::Path) -> ServerHandle {
    serve(
        "127.0.0.1:0",
        ServerConfig {
            scenario: ScenarioConfig::default(),
            store_dir: dir.to_path_buf(),
            fast,
            base_seed: 100,
        },
    )
    .unwrap()
}

fn start(c: &mut Client, driver: &str, seed: u64) -> ServerMsg {
    c.request(&ClientMsg::Start {
        driver_id: driver.into(),
        seed: Some(seed),
        session_id: None,
    })
    .unwrap()
}

fn phase_of(m: &ServerMsg) -> Phase {
    match m {
        ServerMsg::State { phase, .. } => *phase,
        other => panic!("expected state, got {other:?}"),
    }
}

/// Cruises, decides `choice` two ticks into yellow, then brakes or holds
/// throttle until the summary arrives. Returns controls, decision tick and
/// the summary.
fn scripted(c: &mut Client, choice: Decision) -> (Vec<Control>, u64, ServerMsg) {
    let mut controls = Vec::new();
    let mut yellow_ticks = 0;
    let mut decided_at = None;
    let mut last = None;
    loop {
        if let Some(m) = &last {
            if phase_of(m) != Phase::Green {
                yellow_ticks += 1;
            }
        }
        if decided_at.is_none() && yellow_ticks == 2 {
            let ack = c.request(&ClientMsg::Decision { choice }).unwrap();
            assert_eq!(ack, ServerMsg::ack());
            decided_at = Some(controls.len() as u64);
        }
        let ctl = match (decided_at, choice) {
            (None, _) => Control { throttle: 0.05, brake: 0.0 },
            (Some(_), Decision::Stop) => Control { throttle: 0.0, brake: 0.7 },
            (Some(_), Decision::Go) => Control { throttle: 0.6, brake: 0.0 },
        };
        controls.push(ctl);
        let m = c
            .request(&ClientMsg::Control {
                throttle: ctl.throttle,
                brake: ctl.brake,
            })
            .unwrap();
        // The session ends on the tick that produced this state.
        if let ServerMsg::State { .. } = m {
            last = Some(m);
            continue;
        }
        return (controls, decided_at.unwrap(), m);
    }
}

fn next_summary(c: &mut Client, first: ServerMsg) -> ServerMsg {
    let mut m = first;
    while matches!(m, ServerMsg::State { .. }) {
        m = c.recv().unwrap();
    }
    m
}

#[test]
fn fast_session_matches_offline_replay() {
    let dir = tempfile::tempdir().unwrap();
    let server = start_server(true, dir.path());
    let mut c = Client::connect(server.addr()).unwrap();
    let first = start(&mut c, "p1", 5);
    assert_eq!(phase_of(&first), Phase::Green);
    let (controls, decided_at, end) = scripted(&mut c, Decision::Stop);
    let end = next_summary(&mut c, end);
    let ServerMsg::Summary(summary) = end else { panic!("{end:?}") };
    assert!(summary.stored);
    assert_eq!(summary.decision, Some(Decision::Stop));

    let stored = EpisodeStore::open(dir.path()).unwrap().load("p1").unwrap();
    assert_eq!(stored.len(), 1);
    let scenario = generate_scenario(5, &ScenarioConfig::default()).unwrap();
    let offline = replay(scenario, "p1", &controls, (decided_at, Decision::Stop)).unwrap();
    assert_eq!(stored[0], offline);
    server.shutdown();
}

#[test]
fn thirty_sequential_sessions_persist() {
    let dir = tempfile::tempdir().unwrap();
    let server = start_server(true, dir.path());
    let mut c = Client::connect(server.addr()).unwrap();
    for k in 0..30 {
        start(&mut c, "p2", 1000 + k);
        let choice = if k % 2 == 0 { Decision::Go } else { Decision::Stop };
        let (_, _, end) = scripted(&mut c, choice);
        let end = next_summary(&mut c, end);
        assert!(matches!(end, ServerMsg::Summary(ref s) if s.stored), "{end:?}");
    }
    let stored: Vec<Episode> = EpisodeStore::open(dir.path()).unwrap().load("p2").unwrap();
    assert_eq!(stored.len(), 30);
    server.shutdown();
}

#[test]
fn latch_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let server = start_server(true, dir.path());
    let mut c = Client::connect(server.addr()).unwrap();
    // No session yet.
    let m = c.request(&ClientMsg::Control { throttle: 0.0, brake: 0.0 }).unwrap();
    assert_eq!(m, ServerMsg::reject("no running session"));
    // Invalid driver id creates nothing.
    let m = start(&mut c, "bad id!", 1);
    assert!(matches!(m, ServerMsg::Error { ref code, .. } if code == "config"), "{m:?}");
    // Malformed line.
    c.send_raw("{not json").unwrap();
    assert!(matches!(c.recv().unwrap(), ServerMsg::Error { ref code, .. } if code == "parse"));

    start(&mut c, "p3", 2);
    let m = c.request(&ClientMsg::Decision { choice: Decision::Go }).unwrap();
    assert!(matches!(m, ServerMsg::Ack { accepted: false, .. }), "{m:?}");
    loop {
        let s = c.request(&ClientMsg::Control { throttle: 0.0, brake: 0.0 }).unwrap();
        if phase_of(&s) == Phase::Yellow {
            break;
        }
    }
    assert_eq!(c.request(&ClientMsg::Decision { choice: Decision::Stop }).unwrap(), ServerMsg::ack());
    assert_eq!(
        c.request(&ClientMsg::Decision { choice: Decision::Go }).unwrap(),
        ServerMsg::reject("decision already recorded")
    );
    let m = c.request(&ClientMsg::Control { throttle: 2.0, brake: 0.0 }).unwrap();
    assert!(matches!(m, ServerMsg::Ack { accepted: false, .. }));
    let m = c.request(&ClientMsg::Abort).unwrap();
    let ServerMsg::Summary(s) = m else { panic!("{m:?}") };
    assert!(!s.stored);
    assert!(!EpisodeStore::open(dir.path()).unwrap().path_for("p3").exists());
    server.shutdown();
}

#[test]
fn duplicate_session_id_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let server = start_server(true, dir.path());
    let mut a = Client::connect(server.addr()).unwrap();
    let mut b = Client::connect(server.addr()).unwrap();
    let msg = ClientMsg::Start {
        driver_id: "p4".into(),
        seed: Some(1),
        session_id: Some("shared".into()),
    };
    assert!(matches!(a.request(&msg).unwrap(), ServerMsg::State { .. }));
    let m = b.request(&msg).unwrap();
    assert!(matches!(m, ServerMsg::Error { ref code, .. } if code == "conflict"), "{m:?}");
    server.shutdown();
}

#[test]
fn disconnect_discards_without_corrupting_store() {
    let dir = tempfile::tempdir().unwrap();
    let server = start_server(true, dir.path());
    {
        let mut c = Client::connect(server.addr()).unwrap();
        start(&mut c, "p5", 3);
        let (_, _, end) = scripted(&mut c, Decision::Go);
        next_summary(&mut c, end);
    }
    {
        let mut c = Client::connect(server.addr()).unwrap();
        start(&mut c, "p5", 4);
        for _ in 0..10 {
            c.request(&ClientMsg::Control { throttle: 0.2, brake: 0.0 }).unwrap();
        }
    }
    // The next session on a fresh connection still works.
    let mut c = Client::connect(server.addr()).unwrap();
    start(&mut c, "p5", 6);
    let (_, _, end) = scripted(&mut c, Decision::Stop);
    next_summary(&mut c, end);
    let stored = EpisodeStore::open(dir.path()).unwrap().load("p5").unwrap();
    assert_eq!(stored.len(), 2);
    server.shutdown();
}

#[test]
fn real_time_mode_ticks_at_fixed_rate() {
    let dir = tempfile::tempdir().unwrap();
    let server = start_server(false, dir.path());
    let mut c = Client::connect(server.addr()).unwrap();
    let t0 = Instant::now();
    let first = start(&mut c, "p6", 7);
    let ServerMsg::State { t: mut prev, .. } = first else { panic!() };
    c.send(&ClientMsg::Control { throttle: 0.3, brake: 0.0 }).unwrap();
    for _ in 0..25 {
        match c.recv().unwrap() {
            ServerMsg::State { t, .. } => {
                assert!((t - prev - 0.02).abs() < 1e-9);
                prev = t;
            }
            other => panic!("{other:?}"),
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed >= Duration::from_millis(480), "{elapsed:?}");
    c.send(&ClientMsg::Abort).unwrap();
    let m = c.recv().unwrap();
    let end = next_summary(&mut c, m);
    assert!(matches!(end, ServerMsg::Summary(ref s) if !s.stored));
    server.shutdown();
}
