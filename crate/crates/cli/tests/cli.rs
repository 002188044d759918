use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use privatefind::geo::GeoLocation;
use privatefind::server::ManufacturerRegistry;

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privatefind"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Rewrites the payload of the first FoundResponse line.
fn patch_upload(transcript: &str, edit: impl Fn(&str) -> String) -> String {
    let mut done = false;
    transcript
        .lines()
        .map(|line| {
            let marker = "\"payload\":\"12";
            match line.find(marker) {
                Some(i) if !done => {
                    done = true;
                    let start = i + "\"payload\":\"".len();
                    let end = start + line[start..].find('"').unwrap();
                    format!(
                        "{}{}{}",
                        &line[..start],
                        edit(&line[start..end]),
                        &line[end..]
                    )
                }
                _ => line.to_string(),
            }
        })
        .map(|l| l + "\n")
        .collect()
}

#[test]
fn manufacture_writes_registry_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        &[
            "manufacture",
            "--count",
            "3",
            "--seed",
            "5",
            "--registry",
            "r1.jsonl",
            "--out",
            "f1",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let reg = ManufacturerRegistry::load(&dir.path().join("r1.jsonl")).unwrap();
    assert_eq!(reg.len(), 3);
    assert_eq!(fs::read_dir(dir.path().join("f1")).unwrap().count(), 3);

    cli(
        &[
            "manufacture",
            "--count",
            "3",
            "--seed",
            "5",
            "--registry",
            "r2.jsonl",
            "--out",
            "f2",
        ],
        dir.path(),
    );
    assert_eq!(
        fs::read(dir.path().join("r1.jsonl")).unwrap(),
        fs::read(dir.path().join("r2.jsonl")).unwrap()
    );

    let o = cli(
        &[
            "manufacture",
            "--count",
            "0",
            "--registry",
            "empty.jsonl",
            "--out",
            "f0",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(ManufacturerRegistry::load(&dir.path().join("empty.jsonl"))
        .unwrap()
        .is_empty());
}

#[test]
fn run_with_manufactured_registry() {
    let dir = tempfile::tempdir().unwrap();
    cli(
        &[
            "manufacture",
            "--count",
            "2",
            "--seed",
            "9",
            "--registry",
            "reg.jsonl",
            "--out",
            "finders",
        ],
        dir.path(),
    );
    let o = cli(
        &[
            "run",
            "lost-and-found",
            "--registry",
            "reg.jsonl",
            "--out",
            "out",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let reg = ManufacturerRegistry::load(&dir.path().join("reg.jsonl")).unwrap();
    let transcript =
        fs::read_to_string(dir.path().join("out/lost-and-found.transcript.jsonl")).unwrap();
    // RegisterInit names a registry identity.
    assert!(reg.iter().any(|(id, _)| transcript.contains(&id.to_hex())));
}

#[test]
fn audit_catches_planted_location() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&cli(&["run", "lost-and-found", "--out", "out"], dir.path())),
        0
    );
    let path = dir.path().join("out/lost-and-found.transcript.jsonl");
    let clean = fs::read_to_string(&path).unwrap();

    let reporter = GeoLocation::from_degrees("52.5200066", "13.4049540").unwrap();
    let leak = hex(&reporter.to_bytes());
    let planted = patch_upload(&clean, |p| {
        // header(5) + id_rand(32), then overwrite the start of e2e_message
        let at = 2 * (5 + 32 + 16);
        format!("{}{}{}", &p[..at], leak, &p[at + leak.len()..])
    });
    assert_ne!(planted, clean);
    fs::write(dir.path().join("planted.jsonl"), planted).unwrap();
    let o = cli(&["audit", "planted.jsonl", "lost-and-found"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("location-ciphertext-only FAIL"));
}

#[test]
fn audit_catches_extra_identity_field() {
    let dir = tempfile::tempdir().unwrap();
    cli(&["run", "lost-and-found", "--out", "out"], dir.path());
    let clean = fs::read_to_string(dir.path().join("out/lost-and-found.transcript.jsonl")).unwrap();
    let patched = patch_upload(&clean, |p| {
        let extra = hex(b"reporter=bob");
        let len = (p.len() - 10 + extra.len()) / 2;
        format!("12{len:08x}{}{extra}", &p[10..])
    });
    fs::write(dir.path().join("named.jsonl"), patched).unwrap();
    let o = cli(&["audit", "named.jsonl", "lost-and-found"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("reporter-anonymity FAIL"));
}

#[test]
fn every_bundled_scenario_audits_clean() {
    let dir = tempfile::tempdir().unwrap();
    let list = cli(&["scenarios"], dir.path());
    let names = String::from_utf8(list.stdout).unwrap();
    assert!(names.lines().count() >= 4);
    for name in names.lines() {
        cli(&["run", name, "--out", "out"], dir.path());
        let t = format!("out/{name}.transcript.jsonl");
        let o = cli(&["audit", &t, name], dir.path());
        assert_eq!(
            code(&o),
            0,
            "{name}: {}",
            String::from_utf8_lossy(&o.stdout)
        );
    }
}

#[test]
fn parse_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.pf"), "phone a\nteleport a\n").unwrap();
    let o = cli(&["run", "bad.pf"], dir.path());
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert_eq!(code(&cli(&["run", "no-such-scenario"], dir.path())), 4);
    assert_eq!(
        code(&cli(
            &["run", "optout", "--token-policy", "sometimes"],
            dir.path()
        )),
        4
    );
    assert_eq!(
        code(&cli(&["run", "optout", "--epoch-ms", "0"], dir.path())),
        4
    );
    assert_eq!(code(&cli(&["frobnicate"], dir.path())), 4);
    fs::write(dir.path().join("junk.jsonl"), "not json\n").unwrap();
    assert_eq!(
        code(&cli(&["audit", "junk.jsonl", "optout"], dir.path())),
        4
    );
}

#[test]
fn flags_override_the_script() {
    let dir = tempfile::tempdir().unwrap();
    cli(&["run", "lost-and-found", "--out", "a"], dir.path());
    cli(
        &[
            "run",
            "lost-and-found",
            "--out",
            "b",
            "--mac-randomization",
            "on",
        ],
        dir.path(),
    );
    cli(
        &["run", "lost-and-found", "--out", "c", "--seed", "99"],
        dir.path(),
    );
    let read =
        |d: &str| fs::read(dir.path().join(d).join("lost-and-found.transcript.jsonl")).unwrap();
    assert_ne!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));

    let o = cli(
        &["run", "lost-and-found", "--out", "d", "--drop-prob", "1"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let o = cli(
        &[
            "run",
            "lost-and-found",
            "--out",
            "e",
            "--token-policy",
            "ingest",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2, "reporter without a token is refused");
    let summary = fs::read_to_string(dir.path().join("e/lost-and-found.summary.txt")).unwrap();
    assert!(summary.contains("ServerError"));
}
