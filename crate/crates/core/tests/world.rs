use privatefind::crypto::ratchet_at;
use privatefind::geo::GeoLocation;
use privatefind::scenario::{run, Scenario, BUNDLED};
use privatefind::sim::{FinderKind, World, WorldConfig};
use privatefind::transport::{Address, Channel, DEFAULT_EPOCH_MS};
use proptest::prelude::*;

const EPOCH: u64 = DEFAULT_EPOCH_MS;

fn geo(lat: i32, lon: i32) -> GeoLocation {
    GeoLocation::new(lat, lon).unwrap()
}

fn bound(cfg: WorldConfig) -> World {
    let mut w = World::new(cfg);
    w.add_finder("tag", FinderKind::Provisioned).unwrap();
    w.add_phone("alice", geo(10, 10)).unwrap();
    w.add_phone("bob", geo(20, 20)).unwrap();
    w.press_button("tag").unwrap();
    w.set_in_range("alice", "tag", true).unwrap();
    w.setup_local("alice", "tag", false).unwrap();
    w
}

fn steps_after(delta: u64) -> u32 {
    let mut w = bound(WorldConfig::default());
    w.advance_time(delta);
    w.finder("tag").unwrap().state.epoch_counter()
}

#[test]
fn advance_steps_floor_of_epochs() {
    assert_eq!(steps_after(0), 0);
    assert_eq!(steps_after(EPOCH - 1), 0);
    assert_eq!(steps_after(EPOCH), 1);
    assert_eq!(steps_after(EPOCH * 5 / 2), 2);
}

#[test]
fn owner_and_finder_step_together() {
    let mut w = bound(WorldConfig::default());
    w.advance_time(EPOCH);
    let rec = w.phone("alice").unwrap().records["tag"].clone();
    assert_eq!(rec.epoch_at(w.now()), 1);
    assert_eq!(
        w.finder("tag").unwrap().state.id_rand(),
        Some(ratchet_at(&rec.e2e_key, &rec.id_init, 1))
    );
}

#[derive(Debug, Clone)]
enum Action {
    Advance(u64),
    Near(&'static str),
    Away(&'static str),
    Patrol,
}

fn action() -> impl Strategy<Value = Action> {
    let who = prop::sample::select(vec!["alice", "bob"]);
    prop_oneof![
        (0u64..2 * EPOCH).prop_map(Action::Advance),
        who.clone().prop_map(Action::Near),
        who.prop_map(Action::Away),
        Just(Action::Patrol),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn connected_finders_never_scanned(actions in proptest::collection::vec(action(), 1..30), mac in any::<bool>()) {
        let mut w = bound(WorldConfig { mac_randomization: mac, ..WorldConfig::default() });
        for a in actions {
            match a {
                Action::Advance(ms) => w.advance_time(ms),
                Action::Near(p) => w.set_in_range(p, "tag", true).unwrap(),
                Action::Away(p) => w.set_in_range(p, "tag", false).unwrap(),
                Action::Patrol => { w.patrol("bob").unwrap(); }
            }
            let node = w.finder("tag").unwrap();
            let addr = node.state.link_address();
            for p in ["alice", "bob"] {
                let seen = w.scan(p).unwrap().contains(&addr);
                prop_assert!(!(node.state.connected() && seen));
            }
        }
    }

    #[test]
    fn address_changes_exactly_when_id_steps(advances in proptest::collection::vec(0u64..3 * EPOCH, 1..12), skew in -(EPOCH as i64)..(EPOCH as i64)) {
        let mut w = bound(WorldConfig { mac_randomization: true, ..WorldConfig::default() });
        w.skew_finder("tag", skew).unwrap();
        for a in advances {
            w.advance_time(a);
        }
        let mut steps: Vec<u64> = w.epoch_events().iter().map(|e| e.sim_time).collect();
        let mut moves: Vec<u64> = w.address_changes().iter().map(|e| e.sim_time).collect();
        steps.dedup();
        moves.dedup();
        prop_assert_eq!(steps, moves);
    }

    #[test]
    fn owner_tracks_finder_identity(advances in proptest::collection::vec(0u64..2 * EPOCH, 1..10)) {
        let mut w = bound(WorldConfig::default());
        w.set_in_range("alice", "tag", false).unwrap();
        for a in advances {
            w.advance_time(a);
            let rec = &w.phone("alice").unwrap().records["tag"];
            let expected = ratchet_at(&rec.e2e_key, &rec.id_init, rec.epoch_at(w.now()));
            prop_assert_eq!(w.finder("tag").unwrap().state.id_rand(), Some(expected));
        }
    }
}

#[test]
fn refusal_sends_nothing_back() {
    let mut w = bound(WorldConfig::default());
    w.set_in_range("alice", "tag", false).unwrap();
    w.set_in_range("bob", "tag", true).unwrap();
    w.advance_time(60_000);
    let before = w.transcript().len();
    assert!(w.patrol("bob").unwrap().is_empty());
    let tag = Address::Radio(w.finder("tag").unwrap().state.link_address().bytes);
    let new = &w.transcript().entries()[before..];
    assert_eq!(new.len(), 1);
    assert!(new
        .iter()
        .all(|e| e.src != tag && e.channel == Channel::Radio));
}

#[test]
fn bundled_scenarios_are_deterministic() {
    for (name, text) in BUNDLED {
        let sc = Scenario::parse(text).unwrap();
        let a = run(&sc, None);
        let b = run(&sc, None);
        assert_eq!(a.transcript.to_jsonl(), b.transcript.to_jsonl(), "{name}");
        assert_eq!(a.summary.to_string(), b.summary.to_string(), "{name}");
    }
}

#[test]
fn different_seeds_differ() {
    let mut sc =
        Scenario::parse(privatefind::scenario::bundled("lost-and-found").unwrap()).unwrap();
    let a = run(&sc, None).transcript.to_jsonl();
    sc.seed += 1;
    assert_ne!(a, run(&sc, None).transcript.to_jsonl());
}

#[test]
fn transcript_file_round_trips() {
    let sc = Scenario::parse(privatefind::scenario::bundled("lost-and-found").unwrap()).unwrap();
    let out = run(&sc, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    out.transcript.write_to(&path).unwrap();
    let back = privatefind::transport::Transcript::read_from(&path).unwrap();
    assert_eq!(back.to_jsonl(), out.transcript.to_jsonl());
}

#[test]
fn server_log_survives_process_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("server.jsonl");
    let sc = Scenario::parse(privatefind::scenario::bundled("restart").unwrap()).unwrap();
    let first = privatefind::scenario::run_with_log(&sc, None, &log).unwrap();
    assert_eq!(first.summary.exit_code(), 0, "{}", first.summary);
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().count() >= 2);
}

#[test]
fn drop_probability_one_loses_everything() {
    let mut w = World::new(WorldConfig {
        drop_prob: 1.0,
        ..WorldConfig::default()
    });
    w.add_finder("tag", FinderKind::Provisioned).unwrap();
    w.add_phone("alice", geo(0, 0)).unwrap();
    w.press_button("tag").unwrap();
    w.set_in_range("alice", "tag", true).unwrap();
    assert!(w.setup_local("alice", "tag", false).is_err());
    assert_eq!(w.transcript().len(), 1);
}
