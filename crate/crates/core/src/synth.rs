//! Small probabilistic grammars producing stand-in corpora for demos and tests.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const TEAMS: &[&str] = &[
    "Toronto_Raptors", "Detroit_Pistons", "Philadelphia_76ers", "Boston_Celtics", "Miami_Heat",
    "Chicago_Bulls", "Utah_Jazz", "Denver_Nuggets", "Orlando_Magic", "Phoenix_Suns",
];
const PLAYERS: &[&str] = &[
    "Kyle_Lowry", "Andre_Drummond", "Joel_Embiid", "Isaiah_Thomas", "Goran_Dragic", "Jimmy_Butler",
    "Gordon_Hayward", "Nikola_Jokic",
];
const DAYS: &[&str] = &["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];
const CITIES: &[&str] = &["Toronto", "Detroit", "Boston", "Miami", "Chicago", "Denver"];
const WIN_VERBS: &[&str] = &["defeated", "beat", "edged", "routed"];
const SCORES: std::ops::RangeInclusive<u32> = 80..=130;
const POINTS: std::ops::RangeInclusive<u32> = 20..=39;

const COMPANIES: &[&str] = &["Acme_Corp", "Globex_Inc", "Initech_Ltd", "Umbrella_Co", "Stark_Industries", "Wayne_Enterprises"];
const ITEMS: &[&str] = &["widgets", "gears", "valves", "sensors", "cables", "panels"];
const ORDER_IDS: std::ops::RangeInclusive<u32> = 1000..=1049;
const QUANTITIES: std::ops::RangeInclusive<u32> = 2..=30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Game reports: entity, verb, entity, score, day.
    Nba,
    /// Order reports with the same entity/number/date structure.
    Orders,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nba" => Ok(Preset::Nba),
            "orders" => Ok(Preset::Orders),
            other => Err(Error::Config(format!("synth.preset '{other}' (expected nba|orders)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Nba => "nba",
            Preset::Orders => "orders",
        }
    }
}

fn pick<'a, R: Rng>(xs: &[&'a str], rng: &mut R) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn pair<'a, R: Rng>(xs: &[&'a str], rng: &mut R) -> (&'a str, &'a str) {
    let a = pick(xs, rng);
    loop {
        let b = pick(xs, rng);
        if b != a {
            return (a, b);
        }
    }
}

fn nba_sentence<R: Rng>(rng: &mut R) -> String {
    let (t1, t2) = pair(TEAMS, rng);
    let hi = rng.random_range(SCORES);
    let lo = rng.random_range(*SCORES.start()..hi.max(*SCORES.start() + 1));
    let day = pick(DAYS, rng);
    match rng.random_range(0..3) {
        0 => format!("The {t1} {} the {t2} {hi} - {lo} on {day} .", pick(WIN_VERBS, rng)),
        1 => format!(
            "{} scored {} points as the {t1} {} the {t2} {hi} - {lo} on {day} .",
            pick(PLAYERS, rng),
            rng.random_range(POINTS),
            pick(WIN_VERBS, rng)
        ),
        _ => format!("The {t2} lost to the {t1} {hi} - {lo} in {} on {day} .", pick(CITIES, rng)),
    }
}

fn orders_sentence<R: Rng>(rng: &mut R) -> String {
    let (c1, c2) = pair(COMPANIES, rng);
    let id = rng.random_range(ORDER_IDS);
    let qty = rng.random_range(QUANTITIES);
    let item = pick(ITEMS, rng);
    let day = pick(DAYS, rng);
    match rng.random_range(0..3) {
        0 => format!("Order {id} for {c1} shipped {qty} units of {item} to {} on {day} .", pick(CITIES, rng)),
        1 => format!("{c1} received {qty} units of {item} from {c2} on {day} ."),
        _ => format!("Order {id} was cancelled by {c1} on {day} after {qty} days ."),
    }
}

/// `n` sentences, one per line, fully determined by `seed`.
pub fn gen_synth(preset: Preset, n: usize, seed: u64) -> Result<String> {
    if n == 0 {
        return Err(Error::Config("synth.n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n {
        let s = match preset {
            Preset::Nba => nba_sentence(&mut rng),
            Preset::Orders => orders_sentence(&mut rng),
        };
        out.push_str(&s);
        out.push('\n');
    }
    Ok(out)
}

/// Every token the grammar can emit.
pub fn lexicon(preset: Preset) -> BTreeSet<String> {
    let words = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let nums = |r: std::ops::RangeInclusive<u32>| r.map(|x| x.to_string()).collect::<Vec<_>>();
    let mut lex: BTreeSet<String> = BTreeSet::new();
    match preset {
        Preset::Nba => {
            for w in [TEAMS, PLAYERS, DAYS, CITIES, WIN_VERBS] {
                lex.extend(words(w));
            }
            lex.extend(nums(SCORES));
            lex.extend(nums(POINTS));
            lex.extend(words(&["The", "the", "-", "on", ".", "scored", "points", "as", "lost", "to", "in"]));
        }
        Preset::Orders => {
            for w in [COMPANIES, ITEMS, DAYS, CITIES] {
                lex.extend(words(w));
            }
            lex.extend(nums(ORDER_IDS));
            lex.extend(nums(QUANTITIES));
            lex.extend(words(&[
                "Order", "for", "shipped", "units", "of", "to", "on", ".", "received", "from", "was", "cancelled",
                "by", "after", "days",
            ]));
        }
    }
    lex
}
