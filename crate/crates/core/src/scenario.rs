//! Line-oriented scenario scripts.
//!
//! A script is a header of `key value` settings and actor declarations
//! followed by steps, one per line. `#` starts a comment. Step keywords
//! accept `-` or `_` interchangeably.
//!
//! ```text
//! name lost-and-found
//! seed 7
//! finder tag provisioned
//! phone alice at 48.1351253 11.5819806
//! phone bob at 52.5200066 13.4049540
//!
//! press tag
//! move alice near tag
//! setup-local alice tag
//! move alice away tag
//! advance 20m
//! move bob near tag
//! patrol bob
//! submit bob
//! fetch alice tag
//! expect reports alice tag 1
//! ```
//!
//! Durations take a unit: `ms`, `s`, `m`, `h`, `d` or `epoch`/`epochs`
//! (the latter may be fractional, e.g. `2.5epochs`).

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::audit::{audit, AuditInput, AuditReport};
use crate::geo::GeoLocation;
use crate::owner::VerifiedReport;
use crate::server::{ManufacturerRegistry, TokenPolicy};
use crate::sim::{FinderKind, World, WorldConfig, WorldError};
use crate::transport::{Transcript, DEFAULT_EPOCH_MS};
use crate::wire::NetMessage;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Duration {
    Ms(u64),
    /// `num / den` epochs.
    Epochs {
        num: u64,
        den: u64,
    },
}

impl Duration {
    pub fn to_ms(self, epoch_ms: u64) -> u64 {
        match self {
            Duration::Ms(ms) => ms,
            Duration::Epochs { num, den } => num * epoch_ms / den,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Advance(Duration),
    Press(String),
    MoveTo(String, GeoLocation),
    Near(String, String),
    Away(String, String),
    Skew(String, bool, Duration),
    SetupLocal {
        phone: String,
        finder: String,
        reset_id: bool,
    },
    SetupVerified {
        phone: String,
        finder: String,
        token: bool,
    },
    Patrol(String),
    Submit(String),
    Resubmit(String),
    Fetch(String, String),
    MarkLost(String, String),
    ClearLost(String, String),
    OptOut(String, String, bool),
    Export(String, String),
    Import {
        phone: String,
        finder: String,
        from: String,
    },
    RestartServer,
    ExpectReports(String, String, usize),
    ExpectLocation(String, String, GeoLocation),
    ExpectPatrol(String, usize),
    ExpectStored(usize),
    ExpectLostIds(String, usize),
    ExpectFail(Box<Step>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptLine {
    pub line: usize,
    pub text: String,
    pub step: Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub epoch_ms: u64,
    pub token_policy: TokenPolicy,
    pub mac_randomization: bool,
    pub drop_prob: f64,
    pub lost_prefilter: bool,
    pub finders: Vec<(String, FinderKind)>,
    pub phones: Vec<(String, GeoLocation)>,
    pub steps: Vec<ScriptLine>,
}

/// Settings that take precedence over the script header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epoch_ms: Option<u64>,
    pub token_policy: Option<TokenPolicy>,
    pub mac_randomization: Option<bool>,
    pub drop_prob: Option<f64>,
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        other => Err(format!("expected on/off, got {other:?}")),
    }
}

pub fn parse_duration(s: &str) -> Result<Duration, String> {
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .ok_or_else(|| format!("duration {s:?} needs a unit"))?;
    let (num, unit) = s.split_at(split);
    if unit == "epoch" || unit == "epochs" {
        let (int, frac) = num.split_once('.').unwrap_or((num, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 6 {
            return Err(format!("bad duration {s:?}"));
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| format!("bad duration {s:?}"))?
        };
        let frac: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| format!("bad duration {s:?}"))?
        };
        return Ok(Duration::Epochs {
            num: int * den + frac,
            den,
        });
    }
    let n: u64 = num.parse().map_err(|_| format!("bad duration {s:?}"))?;
    let mult = match unit {
        "ms" => 1,
        "s" => 1_000,
        "m" => 60_000,
        "h" => 3_600_000,
        "d" => 86_400_000,
        other => return Err(format!("unknown duration unit {other:?}")),
    };
    Ok(Duration::Ms(n * mult))
}

fn parse_geo(lat: &str, lon: &str) -> Result<GeoLocation, String> {
    GeoLocation::from_degrees(lat, lon).map_err(|e| e.to_string())
}

fn parse_step(words: &[&str]) -> Result<Step, String> {
    let keyword = words[0].replace('_', "-");
    let args = &words[1..];
    let s = |i: usize| args[i].to_string();
    let want = |n: usize| -> Result<(), String> {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!(
                "{keyword} takes {n} argument(s), got {}",
                args.len()
            ))
        }
    };
    let step = match keyword.as_str() {
        "advance" | "advance-time" => {
            want(1)?;
            Step::Advance(parse_duration(args[0])?)
        }
        "press" | "press-button" => {
            want(1)?;
            Step::Press(s(0))
        }
        "move" => match args {
            [p, "to", lat, lon] => Step::MoveTo(p.to_string(), parse_geo(lat, lon)?),
            [p, "near", f] => Step::Near(p.to_string(), f.to_string()),
            [p, "away", f] => Step::Away(p.to_string(), f.to_string()),
            _ => return Err("move <phone> to <lat> <lon> | near <finder> | away <finder>".into()),
        },
        "skew" => {
            want(2)?;
            let (ahead, d) = match args[1].strip_prefix('-') {
                Some(rest) => (false, rest),
                None => (true, args[1].strip_prefix('+').unwrap_or(args[1])),
            };
            Step::Skew(s(0), ahead, parse_duration(d)?)
        }
        "setup-local" => match args {
            [p, f] => Step::SetupLocal {
                phone: p.to_string(),
                finder: f.to_string(),
                reset_id: false,
            },
            [p, f, "reset-id"] => Step::SetupLocal {
                phone: p.to_string(),
                finder: f.to_string(),
                reset_id: true,
            },
            _ => return Err("setup-local <phone> <finder> [reset-id]".into()),
        },
        "setup-verified" => match args {
            [p, f] => Step::SetupVerified {
                phone: p.to_string(),
                finder: f.to_string(),
                token: false,
            },
            [p, f, "token"] => Step::SetupVerified {
                phone: p.to_string(),
                finder: f.to_string(),
                token: true,
            },
            _ => return Err("setup-verified <phone> <finder> [token]".into()),
        },
        "patrol" => {
            want(1)?;
            Step::Patrol(s(0))
        }
        "submit" => {
            want(1)?;
            Step::Submit(s(0))
        }
        "resubmit" => {
            want(1)?;
            Step::Resubmit(s(0))
        }
        "fetch" => {
            want(2)?;
            Step::Fetch(s(0), s(1))
        }
        "mark-lost" => {
            want(2)?;
            Step::MarkLost(s(0), s(1))
        }
        "clear-lost" => {
            want(2)?;
            Step::ClearLost(s(0), s(1))
        }
        "opt-out" | "set-opt-out" => {
            want(3)?;
            Step::OptOut(s(0), s(1), parse_on_off(args[2])?)
        }
        "export" => {
            want(2)?;
            Step::Export(s(0), s(1))
        }
        "import" => match args {
            [p, f, "from", other] => Step::Import {
                phone: p.to_string(),
                finder: f.to_string(),
                from: other.to_string(),
            },
            _ => return Err("import <phone> <finder> from <phone>".into()),
        },
        "restart-server" => {
            want(0)?;
            Step::RestartServer
        }
        "expect" => {
            let count = |v: &str| v.parse::<usize>().map_err(|_| format!("bad count {v:?}"));
            match args {
                ["reports", p, f, n] => {
                    Step::ExpectReports(p.to_string(), f.to_string(), count(n)?)
                }
                ["location", p, f, lat, lon] => {
                    Step::ExpectLocation(p.to_string(), f.to_string(), parse_geo(lat, lon)?)
                }
                ["patrol", p, n] => Step::ExpectPatrol(p.to_string(), count(n)?),
                ["stored", n] => Step::ExpectStored(count(n)?),
                ["lost-ids", p, n] => Step::ExpectLostIds(p.to_string(), count(n)?),
                _ => return Err(format!("unknown expectation {:?}", args.join(" "))),
            }
        }
        "expect-fail" => {
            if args.is_empty() {
                return Err("expect-fail needs a step".into());
            }
            match parse_step(args)? {
                Step::ExpectFail(_) => return Err("expect-fail cannot nest".into()),
                inner => Step::ExpectFail(Box::new(inner)),
            }
        }
        other => return Err(format!("unknown step {other:?}")),
    };
    Ok(step)
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut sc = Scenario {
            name: "unnamed".into(),
            seed: 0,
            epoch_ms: DEFAULT_EPOCH_MS,
            token_policy: TokenPolicy::Off,
            mac_randomization: false,
            drop_prob: 0.0,
            lost_prefilter: false,
            finders: Vec::new(),
            phones: Vec::new(),
            steps: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ParseError { line, msg };
            let text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let words: Vec<&str> = text.split_whitespace().collect();
            let header = !sc.steps.is_empty();
            let setting = |v: &[&str]| -> Result<String, ParseError> {
                if header {
                    return Err(err(format!("{} must come before the first step", words[0])));
                }
                match v {
                    [x] => Ok(x.to_string()),
                    _ => Err(err(format!("{} takes one value", words[0]))),
                }
            };
            match words[0] {
                "name" => sc.name = setting(&words[1..])?,
                "seed" => {
                    sc.seed = setting(&words[1..])?
                        .parse()
                        .map_err(|_| err("bad seed".into()))?
                }
                "epoch-ms" => {
                    sc.epoch_ms = setting(&words[1..])?
                        .parse()
                        .ok()
                        .filter(|&v| v > 0)
                        .ok_or_else(|| err("bad epoch-ms".into()))?
                }
                "token-policy" => sc.token_policy = setting(&words[1..])?.parse().map_err(err)?,
                "mac-randomization" => {
                    sc.mac_randomization = parse_on_off(&setting(&words[1..])?).map_err(err)?
                }
                "lost-prefilter" => {
                    sc.lost_prefilter = parse_on_off(&setting(&words[1..])?).map_err(err)?
                }
                "drop-prob" => {
                    sc.drop_prob = setting(&words[1..])?
                        .parse()
                        .ok()
                        .filter(|p: &f64| (0.0..=1.0).contains(p))
                        .ok_or_else(|| err("drop-prob must be within [0, 1]".into()))?
                }
                "finder" => {
                    if header {
                        return Err(err("actors must be declared before the first step".into()));
                    }
                    let kind = match &words[1..] {
                        [_] | [_, "provisioned"] => FinderKind::Provisioned,
                        [_, "counterfeit"] => FinderKind::Counterfeit,
                        [_, "unprovisioned"] => FinderKind::Unprovisioned,
                        _ => {
                            return Err(err(
                                "finder <name> [provisioned|counterfeit|unprovisioned]".into(),
                            ))
                        }
                    };
                    sc.declare(words[1], line)?;
                    sc.finders.push((words[1].to_string(), kind));
                }
                "phone" => {
                    if header {
                        return Err(err("actors must be declared before the first step".into()));
                    }
                    let pos = match &words[1..] {
                        [_] => GeoLocation::new(0, 0).expect("origin is valid"),
                        [_, "at", lat, lon] => parse_geo(lat, lon).map_err(err)?,
                        _ => return Err(err("phone <name> [at <lat> <lon>]".into())),
                    };
                    sc.declare(words[1], line)?;
                    sc.phones.push((words[1].to_string(), pos));
                }
                _ => {
                    let step = parse_step(&words).map_err(err)?;
                    sc.check_actors(&step).map_err(err)?;
                    sc.steps.push(ScriptLine {
                        line,
                        text: words.join(" "),
                        step,
                    });
                }
            }
        }
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioLoadError> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text)?)
    }

    fn declare(&self, name: &str, line: usize) -> Result<(), ParseError> {
        let taken = name == crate::sim::SERVER_NAME
            || self.finders.iter().any(|(n, _)| n == name)
            || self.phones.iter().any(|(n, _)| n == name);
        if taken {
            return Err(ParseError {
                line,
                msg: format!("actor {name:?} declared twice"),
            });
        }
        Ok(())
    }

    fn check_actors(&self, step: &Step) -> Result<(), String> {
        let phone = |p: &String| {
            if self.phones.iter().any(|(n, _)| n == p) {
                Ok(())
            } else {
                Err(format!("undeclared phone {p:?}"))
            }
        };
        let finder = |f: &String| {
            if self.finders.iter().any(|(n, _)| n == f) {
                Ok(())
            } else {
                Err(format!("undeclared finder {f:?}"))
            }
        };
        match step {
            Step::Advance(_) | Step::RestartServer | Step::ExpectStored(_) => Ok(()),
            Step::Press(f) | Step::Skew(f, _, _) => finder(f),
            Step::MoveTo(p, _) | Step::Patrol(p) | Step::Submit(p) | Step::Resubmit(p) => phone(p),
            Step::ExpectPatrol(p, _) | Step::ExpectLostIds(p, _) => phone(p),
            Step::Near(p, f)
            | Step::Away(p, f)
            | Step::Fetch(p, f)
            | Step::MarkLost(p, f)
            | Step::ClearLost(p, f)
            | Step::OptOut(p, f, _)
            | Step::Export(p, f)
            | Step::ExpectReports(p, f, _)
            | Step::ExpectLocation(p, f, _)
            | Step::SetupLocal {
                phone: p,
                finder: f,
                ..
            }
            | Step::SetupVerified {
                phone: p,
                finder: f,
                ..
            } => phone(p).and(finder(f)),
            Step::Import {
                phone: p,
                finder: f,
                from,
            } => phone(p).and(finder(f)).and(phone(from)),
            Step::ExpectFail(inner) => self.check_actors(inner),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.epoch_ms {
            self.epoch_ms = v;
        }
        if let Some(v) = o.token_policy {
            self.token_policy = v;
        }
        if let Some(v) = o.mac_randomization {
            self.mac_randomization = v;
        }
        if let Some(v) = o.drop_prob {
            self.drop_prob = v;
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            epoch_ms: self.epoch_ms,
            mac_randomization: self.mac_randomization,
            token_policy: self.token_policy,
            drop_prob: self.drop_prob,
            lost_prefilter: self.lost_prefilter,
            ..WorldConfig::default()
        }
    }

    /// Every position the script puts a phone at.
    pub fn locations(&self) -> Vec<GeoLocation> {
        let mut out: Vec<GeoLocation> = self.phones.iter().map(|(_, g)| *g).collect();
        let mut visit = |s: &Step| {
            if let Step::MoveTo(_, g) = s {
                out.push(*g);
            }
        };
        for l in &self.steps {
            match &l.step {
                Step::ExpectFail(inner) => visit(inner),
                s => visit(s),
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// The audit an outside observer can run with just the transcript and
    /// this script.
    pub fn audit_input(&self) -> AuditInput {
        AuditInput {
            locations: self.locations(),
            allow_token: self.token_policy.on_ingest(),
            ..AuditInput::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioLoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFailure {
    pub line: usize,
    pub text: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerSummary {
    pub phone: String,
    pub finder: String,
    pub reports: Vec<VerifiedReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub epoch_ms: u64,
    pub steps_run: usize,
    pub steps_total: usize,
    pub sim_time: u64,
    pub owners: Vec<OwnerSummary>,
    pub stored_reports: usize,
    pub audit: AuditReport,
    pub failure: Option<StepFailure>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCENARIO: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;
pub const EXIT_PARSE: i32 = 4;

impl Summary {
    pub fn exit_code(&self) -> i32 {
        if self.failure.is_some() {
            EXIT_SCENARIO
        } else if !self.audit.passed() {
            EXIT_AUDIT
        } else {
            EXIT_OK
        }
    }

    pub fn owner(&self, phone: &str, finder: &str) -> Option<&OwnerSummary> {
        self.owners
            .iter()
            .find(|o| o.phone == phone && o.finder == finder)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}", self.scenario)?;
        writeln!(f, "seed {}", self.seed)?;
        writeln!(f, "epoch-ms {}", self.epoch_ms)?;
        writeln!(f, "sim-time {}", self.sim_time)?;
        writeln!(f, "steps {}/{}", self.steps_run, self.steps_total)?;
        for o in &self.owners {
            writeln!(
                f,
                "owner {} finder {} verified-reports {}",
                o.phone,
                o.finder,
                o.reports.len()
            )?;
            for r in &o.reports {
                writeln!(
                    f,
                    "  counter {} lat_e7 {} lon_e7 {} location {} received-at {}{}",
                    r.counter,
                    r.geo.lat_e7(),
                    r.geo.lon_e7(),
                    r.geo,
                    r.received_at,
                    if r.anonymous { " anonymous" } else { "" }
                )?;
            }
        }
        writeln!(f, "server stored-reports {}", self.stored_reports)?;
        writeln!(f, "{}", self.audit)?;
        match &self.failure {
            None => write!(f, "result OK"),
            Some(x) => write!(
                f,
                "result FAILED line {} ({}): {} ({})",
                x.line, x.text, x.kind, x.message
            ),
        }
    }
}

pub struct RunOutcome {
    pub summary: Summary,
    pub transcript: Transcript,
}

fn failure(kind: &str, message: String) -> (String, String) {
    (kind.to_string(), message)
}

fn exec(world: &mut World, step: &Step) -> Result<(), (String, String)> {
    let w = |e: WorldError| (e.kind().to_string(), e.to_string());
    let epoch_ms = world.config().epoch_ms;
    match step {
        Step::Advance(d) => world.advance_time(d.to_ms(epoch_ms)),
        Step::Press(f) => world.press_button(f).map_err(w)?,
        Step::MoveTo(p, g) => world.move_phone(p, *g).map_err(w)?,
        Step::Near(p, f) => world.set_in_range(p, f, true).map_err(w)?,
        Step::Away(p, f) => world.set_in_range(p, f, false).map_err(w)?,
        Step::Skew(f, ahead, d) => {
            let ms = d.to_ms(epoch_ms) as i64;
            world
                .skew_finder(f, if *ahead { ms } else { -ms })
                .map_err(w)?
        }
        Step::SetupLocal {
            phone,
            finder,
            reset_id,
        } => {
            world.setup_local(phone, finder, *reset_id).map_err(w)?;
        }
        Step::SetupVerified {
            phone,
            finder,
            token,
        } => {
            world.setup_verified(phone, finder, *token).map_err(w)?;
        }
        Step::Patrol(p) => {
            world.patrol(p).map_err(w)?;
        }
        Step::Submit(p) | Step::Resubmit(p) => {
            let acks = if matches!(step, Step::Submit(_)) {
                world.submit(p).map_err(w)?
            } else {
                world.resubmit(p).map_err(w)?
            };
            if let Some(bad) = acks.iter().find(|a| **a != NetMessage::GenericAck) {
                return Err(failure("ServerError", format!("upload refused: {bad:?}")));
            }
        }
        Step::Fetch(p, f) => {
            world.fetch(p, f).map_err(w)?;
        }
        Step::MarkLost(p, f) => world.mark_lost(p, f).map_err(w)?,
        Step::ClearLost(p, f) => world.clear_lost(p, f).map_err(w)?,
        Step::OptOut(p, f, on) => world.set_opt_out(p, f, *on).map_err(w)?,
        Step::Export(p, f) => {
            world.export_identity(p, f).map_err(w)?;
        }
        Step::Import {
            phone,
            finder,
            from,
        } => {
            let blob = world
                .phone(from)
                .map_err(w)?
                .exported
                .get(finder)
                .cloned()
                .ok_or_else(|| w(WorldError::NothingExported(from.clone())))?;
            world.import_identity(phone, finder, &blob).map_err(w)?;
        }
        Step::RestartServer => world.restart_server().map_err(w)?,
        Step::ExpectReports(p, f, n) => {
            let got = world
                .phone(p)
                .map_err(w)?
                .verified
                .get(f)
                .map_or(0, Vec::len);
            if got != *n {
                return Err(failure(
                    "Expectation",
                    format!("{p} has {got} verified report(s) for {f}, expected {n}"),
                ));
            }
        }
        Step::ExpectLocation(p, f, g) => {
            let last = world
                .phone(p)
                .map_err(w)?
                .verified
                .get(f)
                .and_then(|v| v.last())
                .map(|r| r.geo);
            if last != Some(*g) {
                let got = last.map_or("nothing".to_string(), |x| x.to_string());
                return Err(failure(
                    "Expectation",
                    format!("latest report for {f} is {got}, expected {g}"),
                ));
            }
        }
        Step::ExpectPatrol(p, n) => {
            let got = world.phone(p).map_err(w)?.last_patrol;
            if got != *n {
                return Err(failure(
                    "Expectation",
                    format!("last patrol by {p} found {got}, expected {n}"),
                ));
            }
        }
        Step::ExpectStored(n) => {
            let got = world.server().store().report_count();
            if got != *n {
                return Err(failure(
                    "Expectation",
                    format!("server stores {got} report(s), expected {n}"),
                ));
            }
        }
        Step::ExpectLostIds(p, n) => {
            let got = world.get_lost_ids(p).map_err(w)?.len();
            if got != *n {
                return Err(failure(
                    "Expectation",
                    format!("lost set has {got} id(s), expected {n}"),
                ));
            }
        }
        Step::ExpectFail(inner) => {
            if exec(world, inner).is_ok() {
                return Err(failure("Expectation", "step was expected to fail".into()));
            }
        }
    }
    Ok(())
}

/// Everything the world knows that must stay off the network.
fn full_audit_input(world: &World, scenario: &Scenario) -> AuditInput {
    let mut input = scenario.audit_input();
    input.locations.extend(world.locations().iter().copied());
    input.locations.sort();
    input.locations.dedup();
    for (name, node) in world.finders() {
        input.identities.push(node.state.id_init());
        if let Some(k) = node.state.mf_key() {
            input
                .secrets
                .push((format!("mf-key of {name}"), k.as_bytes().to_vec()));
        }
        if let Some(k) = node.state.e2e_key() {
            input
                .secrets
                .push((format!("e2e-key of {name}"), k.as_bytes().to_vec()));
        }
    }
    for (pname, phone) in world.phones() {
        for (fname, rec) in &phone.records {
            input.secrets.push((
                format!("e2e-key held by {pname} for {fname}"),
                rec.e2e_key.as_bytes().to_vec(),
            ));
        }
    }
    input
}

/// Runs a scenario to completion or to its first failing step.
pub fn run(scenario: &Scenario, registry: Option<ManufacturerRegistry>) -> RunOutcome {
    let world = World::with_registry(scenario.world_config(), registry.unwrap_or_default());
    run_in(world, scenario)
}

/// Like [`run`], with the server persisting to `server_log`.
pub fn run_with_log(
    scenario: &Scenario,
    registry: Option<ManufacturerRegistry>,
    server_log: &Path,
) -> Result<RunOutcome, WorldError> {
    let world = World::with_server_log(
        scenario.world_config(),
        registry.unwrap_or_default(),
        server_log,
    )?;
    Ok(run_in(world, scenario))
}

fn run_in(mut world: World, scenario: &Scenario) -> RunOutcome {
    let mut fail = None;
    for (name, kind) in &scenario.finders {
        if let Err(e) = world.add_finder(name, *kind) {
            fail = Some(StepFailure {
                line: 0,
                text: format!("finder {name}"),
                kind: e.kind().into(),
                message: e.to_string(),
            });
        }
    }
    for (name, pos) in &scenario.phones {
        if let Err(e) = world.add_phone(name, *pos) {
            fail = Some(StepFailure {
                line: 0,
                text: format!("phone {name}"),
                kind: e.kind().into(),
                message: e.to_string(),
            });
        }
    }
    let mut steps_run = 0;
    if fail.is_none() {
        for l in &scenario.steps {
            if let Err((kind, message)) = exec(&mut world, &l.step) {
                fail = Some(StepFailure {
                    line: l.line,
                    text: l.text.clone(),
                    kind,
                    message,
                });
                break;
            }
            steps_run += 1;
        }
    }

    let owners = world
        .phones()
        .flat_map(|(pname, p)| {
            p.verified.iter().map(move |(fname, reports)| OwnerSummary {
                phone: pname.clone(),
                finder: fname.clone(),
                reports: reports.clone(),
            })
        })
        .collect();
    let audit_report = audit(world.transcript(), &full_audit_input(&world, scenario));
    RunOutcome {
        summary: Summary {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            epoch_ms: scenario.epoch_ms,
            steps_run,
            steps_total: scenario.steps.len(),
            sim_time: world.now(),
            owners,
            stored_reports: world.server().store().report_count(),
            audit: audit_report,
            failure: fail,
        },
        transcript: world.transcript().clone(),
    }
}

/// Audits a transcript file against the locations named in a scenario.
pub fn audit_transcript(transcript: &Transcript, scenario: &Scenario) -> AuditReport {
    audit(transcript, &scenario.audit_input())
}

/// Scenario scripts shipped with the library, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    (
        "lost-and-found",
        include_str!("../scenarios/lost-and-found.pf"),
    ),
    ("optout", include_str!("../scenarios/optout.pf")),
    ("counterfeit", include_str!("../scenarios/counterfeit.pf")),
    ("no-button", include_str!("../scenarios/no-button.pf")),
    (
        "recent-contact",
        include_str!("../scenarios/recent-contact.pf"),
    ),
    ("replay", include_str!("../scenarios/replay.pf")),
    (
        "export-import",
        include_str!("../scenarios/export-import.pf"),
    ),
    ("lost-list", include_str!("../scenarios/lost-list.pf")),
    ("mac-rotation", include_str!("../scenarios/mac-rotation.pf")),
    ("clock-skew", include_str!("../scenarios/clock-skew.pf")),
    ("tokens", include_str!("../scenarios/tokens.pf")),
    ("restart", include_str!("../scenarios/restart.pf")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations() {
        assert_eq!(parse_duration("15m").unwrap().to_ms(1), 900_000);
        assert_eq!(parse_duration("250ms").unwrap().to_ms(1), 250);
        assert_eq!(
            parse_duration("2.5epochs").unwrap().to_ms(900_000),
            2_250_000
        );
        assert_eq!(parse_duration("1epoch").unwrap().to_ms(10), 10);
        assert!(parse_duration("15").is_err());
        assert!(parse_duration("1x").is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = Scenario::parse("phone a\n\nfrobnicate a\n").unwrap_err();
        assert_eq!(e.line, 3);
        let e = Scenario::parse("phone a\npatrol b\n").unwrap_err();
        assert!(e.msg.contains("undeclared"));
        let e = Scenario::parse("phone a\npatrol a\nseed 3\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(Scenario::parse("phone a\nphone a\n").is_err());
    }

    #[test]
    fn underscores_and_comments() {
        let sc = Scenario::parse(
            "finder f # a tag\nphone p\nsetup_local p f\nexpect-fail press_button f\n",
        )
        .unwrap();
        assert_eq!(sc.steps.len(), 2);
        assert!(matches!(sc.steps[0].step, Step::SetupLocal { .. }));
        assert!(matches!(sc.steps[1].step, Step::ExpectFail(_)));
    }

    #[test]
    fn bundled_scenarios_parse() {
        for (name, text) in BUNDLED {
            let sc = Scenario::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&sc.name, name);
        }
    }

    #[test]
    fn bundled_outcomes() {
        for (name, text) in BUNDLED {
            let out = run(&Scenario::parse(text).unwrap(), None);
            let expected = match *name {
                "counterfeit" | "no-button" => EXIT_SCENARIO,
                _ => EXIT_OK,
            };
            assert_eq!(out.summary.exit_code(), expected, "{name}\n{}", out.summary);
            assert!(out.summary.audit.passed(), "{name}\n{}", out.summary);
        }
    }
}
