//! Synthetic stand-in corpus: a seeded toy KG, template utterances with one
//! corrupted entity each, split tags and mined hard negatives.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::kgstore::{Direction, IndexEntry, KnowledgeGraph};
use crate::pipeline::NluHypothesis;
use crate::rerankspan::TrainSampleL2;
use crate::retrieval::{EntityIndex, L1Model, TrainSampleL1};

const ADJECTIVES: &[&str] = &[
    "bad", "blue", "broken", "burning", "cold", "crazy", "dark", "dirty", "electric", "empty", "endless", "fallen",
    "golden", "green", "happy", "hidden", "hollow", "honest", "lonely", "lost", "lucky", "mad", "midnight", "modern",
    "neon", "paper", "perfect", "pretty", "purple", "quiet", "red", "restless", "rising", "sacred", "secret", "silent",
    "silver", "simple", "sleepy", "slow", "sweet", "tender", "velvet", "wild", "wicked", "young", "bitter", "brave",
    "distant", "frozen",
];

const NOUNS: &[&str] = &[
    "angel", "autumn", "bird", "bridge", "butterfly", "candle", "cloud", "crown", "dance", "desert", "diamond", "dream",
    "echo", "fire", "flower", "garden", "ghost", "glory", "harbor", "heart", "heaven", "highway", "horizon", "island",
    "jungle", "kingdom", "light", "lion", "machine", "memory", "mirror", "moon", "morning", "mountain", "ocean",
    "paradise", "party", "rain", "river", "romance", "rose", "shadow", "sky", "smile", "soldier", "star", "storm",
    "summer", "sun", "thunder", "tiger", "train", "valley", "wave", "window", "wind", "winter", "wolf", "world", "boy",
    "girl", "love", "night", "road", "stone", "story", "queen", "dancer", "romans", "lover",
];

const FIRST_NAMES: &[&str] = &[
    "adam", "alice", "amber", "andre", "anna", "bella", "ben", "blake", "carla", "chris", "clara", "dana", "david",
    "dean", "diana", "elena", "eli", "emma", "ethan", "felix", "gina", "grace", "hank", "ivy", "jack", "jade", "jenna",
    "joel", "kara", "kevin", "kyle", "lana", "leo", "lily", "lucas", "maria", "mason", "maya", "mia", "nate", "nina",
    "noah", "olivia", "oscar", "paul", "rosa", "ruby", "ryan", "sara", "sean", "tina", "toby", "vera", "victor",
    "willa", "zack", "zoe", "marta", "jonas", "lena",
];

const LAST_NAMES: &[&str] = &[
    "adams", "baker", "banks", "barnes", "bell", "brooks", "carson", "carter", "cole", "cruz", "dalton", "diaz",
    "ellis", "evans", "fisher", "ford", "foster", "gray", "hayes", "hill", "holt", "hughes", "james", "jordan",
    "keller", "king", "lane", "lewis", "lowe", "marsh", "mills", "moore", "morgan", "nash", "nolan", "owens", "parker",
    "perry", "pierce", "price", "reed", "reyes", "rhodes", "rivers", "ross", "ryder", "shaw", "stone", "sutton",
    "tate", "torres", "turner", "vance", "wade", "walsh", "ward", "west", "wolfe", "wood", "young",
];

const CITY_STEMS: &[&str] = &[
    "abbot", "ash", "bear", "beck", "bel", "brent", "cal", "camden", "carter", "cedar", "clay", "dover", "eden", "elk",
    "fair", "fern", "frank", "glen", "gold", "hamp", "hart", "haven", "hollis", "iron", "kings", "lake", "lan",
    "laurel", "lynn", "maple", "marl", "mill", "mont", "north", "oak", "ore", "pine", "port", "red", "ridge", "river",
    "rock", "rose", "sal", "sand", "shel", "silver", "spring", "stan", "stone", "sum", "sun", "tam", "west", "wheat",
    "willow", "wind", "york", "dal", "carlin",
];

const CITY_SUFFIXES: &[&str] = &[
    "city", "falls", "springs", "heights", "park", "beach", "valley", "junction", "ridge", "harbor",
];

const CITY_TAILS: &[&str] = &["ton", "ville", "field", "burg", "wood", "ford"];

const STATES: &[&str] = &[
    "alabama", "alaska", "arizona", "arkansas", "california", "colorado", "connecticut", "delaware", "florida",
    "georgia", "hawaii", "idaho", "illinois", "indiana", "iowa", "kansas", "kentucky", "louisiana", "maine",
    "maryland", "massachusetts", "michigan", "minnesota", "mississippi", "missouri", "montana", "nebraska", "nevada",
    "new hampshire", "new jersey", "new mexico", "new york", "north carolina", "north dakota", "ohio", "oklahoma",
    "oregon", "pennsylvania", "rhode island", "south carolina", "south dakota", "tennessee", "texas", "utah",
    "vermont", "virginia", "washington", "west virginia", "wisconsin", "wyoming",
];

const MUSIC_GENRES: &[&str] = &["pop", "rock", "jazz", "hip hop", "country", "soul"];
const FILM_GENRES: &[&str] = &["comedy", "drama", "thriller", "horror", "western", "documentary"];
const ODD_WORDS: &[&str] = &["café", "niño", "über", "señor"];

/// Sizes of the generated toy graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgSynthConfig {
    pub artists: usize,
    pub songs: usize,
    pub actors: usize,
    pub films: usize,
    pub authors: usize,
    pub books: usize,
    pub cities: usize,
    /// Share of titles carrying digits, punctuation or non-ASCII letters.
    pub odd_fraction: f64,
    /// Share of film and book titles that reuse a song title.
    pub polysemy_fraction: f64,
}

impl Default for KgSynthConfig {
    fn default() -> Self {
        KgSynthConfig {
            artists: 300,
            songs: 1500,
            actors: 300,
            films: 1200,
            authors: 250,
            books: 1000,
            cities: 600,
            odd_fraction: 0.04,
            polysemy_fraction: 0.03,
        }
    }
}

/// The toy graph as ingestable entity and triple records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthKg {
    pub entities: String,
    pub triples: String,
}

impl SynthKg {
    pub fn graph(&self) -> Result<KnowledgeGraph> {
        Ok(crate::kgstore::ingest(self.entities.as_bytes(), self.triples.as_bytes())?.0)
    }

    /// Writes `entities.tsv` and `triples.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (e, t) = (dir.join("entities.tsv"), dir.join("triples.tsv"));
        write_atomic(&e, self.entities.as_bytes())?;
        write_atomic(&t, self.triples.as_bytes())?;
        Ok((e, t))
    }
}

struct KgBuilder<'r> {
    rng: &'r mut ChaCha8Rng,
    entities: String,
    triples: String,
    next: usize,
    used: HashSet<String>,
}

impl KgBuilder<'_> {
    fn add(&mut self, surface: &str, descs: &[String]) -> String {
        let ext = format!("Q{}", self.next);
        self.next += 1;
        self.used.insert(surface.to_string());
        if descs.is_empty() {
            writeln!(self.entities, "{ext}\t{surface}").unwrap();
        }
        for d in descs {
            writeln!(self.entities, "{ext}\t{surface}\t{d}").unwrap();
        }
        ext
    }

    fn triple(&mut self, h: &str, r: &str, t: &str) {
        writeln!(self.triples, "{h}\t{r}\t{t}").unwrap();
    }

    fn pick<'a>(&mut self, pool: &[&'a str]) -> &'a str {
        pool[self.rng.gen_range(0..pool.len())]
    }

    fn fresh(&mut self, mut make: impl FnMut(&mut Self) -> String) -> Result<String> {
        for _ in 0..10_000 {
            let s = make(self);
            if !self.used.contains(&s) {
                return Ok(s);
            }
        }
        Err(Error::Invalid("synthetic name pool exhausted".into()))
    }

    fn person(&mut self) -> Result<String> {
        self.fresh(|b| format!("{} {}", b.pick(FIRST_NAMES), b.pick(LAST_NAMES)))
    }

    fn title(&mut self, odd_fraction: f64) -> Result<String> {
        self.fresh(|b| {
            if b.rng.gen_bool(odd_fraction) {
                return match b.rng.gen_range(0..3) {
                    0 => format!("{} {}", b.rng.gen_range(2..100), b.pick(NOUNS)),
                    1 => format!("{}'s {}", b.pick(NOUNS), b.pick(NOUNS)),
                    _ => format!("{} {}", b.pick(ADJECTIVES), b.pick(ODD_WORDS)),
                };
            }
            match b.rng.gen_range(0..20) {
                0..=9 => format!("{} {}", b.pick(ADJECTIVES), b.pick(NOUNS)),
                10..=11 => b.pick(NOUNS).to_string(),
                12..=14 => format!("the {} {}", b.pick(ADJECTIVES), b.pick(NOUNS)),
                15..=16 => format!("{} of {}", b.pick(NOUNS), b.pick(NOUNS)),
                _ => format!("{} {} {}", b.pick(ADJECTIVES), b.pick(NOUNS), b.pick(NOUNS)),
            }
        })
    }

    fn city(&mut self) -> Result<String> {
        self.fresh(|b| {
            if b.rng.gen_bool(0.7) {
                format!("{} {}", b.pick(CITY_STEMS), b.pick(CITY_SUFFIXES))
            } else {
                format!("{}{}", b.pick(CITY_STEMS), b.pick(CITY_TAILS))
            }
        })
    }
}

/// Generates the toy graph. Songs, films and books link to their performer,
/// cast and author; cities sit in states. Only some descriptions mention the
/// linked entity, so part of the relational signal lives in the graph alone.
/// The graph always contains "bad romance" by "lady gaga", "carson city"
/// (nevada) and "corbin city" (new jersey).
pub fn synth_kg(cfg: &KgSynthConfig, seed: u64) -> Result<SynthKg> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = KgBuilder {
        rng: &mut rng,
        entities: String::new(),
        triples: String::new(),
        next: 1,
        used: HashSet::new(),
    };
    let desc = |s: &str| vec![s.to_string()];

    let states: Vec<(String, String)> = STATES
        .iter()
        .map(|s| (b.add(s, &desc("state of the united states")), s.to_string()))
        .collect();
    let state_of = |name: &str| states.iter().find(|(_, s)| s == name).unwrap().0.clone();
    let music: Vec<String> = MUSIC_GENRES.iter().map(|g| b.add(g, &desc("music genre"))).collect();
    let film_genres: Vec<String> = FILM_GENRES.iter().map(|g| b.add(g, &desc("film genre"))).collect();

    let mut cities = Vec::new();
    for (name, state) in [("carson city", "nevada"), ("corbin city", "new jersey")] {
        let id = b.add(name, &desc(&format!("city in {state}")));
        b.triple(&id, "located_in", &state_of(state));
        cities.push(id);
    }
    while cities.len() < cfg.cities.max(2) {
        let name = b.city()?;
        let (sid, sname) = states.choose(b.rng).unwrap().clone();
        let d = if b.rng.gen_bool(0.5) { format!("city in {sname}") } else { "city".to_string() };
        let id = b.add(&name, &desc(&d));
        b.triple(&id, "located_in", &sid);
        cities.push(id);
    }

    let people = |b: &mut KgBuilder, n: usize, first: Option<(&str, &str)>, kinds: &[&str]| -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some((name, d)) = first {
            out.push((b.add(name, &desc(d)), name.to_string()));
        }
        while out.len() < n {
            let name = b.person()?;
            let d = b.pick(kinds);
            let id = b.add(&name, &desc(d));
            if b.rng.gen_bool(0.5) {
                let c = cities.choose(b.rng).unwrap().clone();
                b.triple(&id, "born_in", &c);
            }
            out.push((id, name));
        }
        Ok(out)
    };
    let artists = people(
        &mut b,
        cfg.artists.max(1),
        Some(("lady gaga", "american singer")),
        &["american singer", "british singer", "rapper", "singer songwriter", "band"],
    )?;
    let actors = people(&mut b, cfg.actors.max(1), None, &["american actor", "actress", "british actor"])?;
    let authors = people(&mut b, cfg.authors.max(1), None, &["novelist", "writer", "poet"])?;

    let mut song_titles = Vec::new();
    let id = b.add("bad romance", &desc("song"));
    b.triple(&id, "performer", &artists[0].0);
    b.triple(&id, "genre", &music[0]);
    song_titles.push("bad romance".to_string());
    while song_titles.len() < cfg.songs.max(1) {
        let title = b.title(cfg.odd_fraction)?;
        let (aid, aname) = artists.choose(b.rng).unwrap().clone();
        let d = if b.rng.gen_bool(0.6) { format!("song by {aname}") } else { "song".to_string() };
        let id = b.add(&title, &desc(&d));
        b.triple(&id, "performer", &aid);
        let g = music.choose(b.rng).unwrap().clone();
        b.triple(&id, "genre", &g);
        song_titles.push(title);
    }
    // Reused song titles create polysemic surfaces.
    let mut reuse = |b: &mut KgBuilder| -> Result<String> {
        if b.rng.gen_bool(cfg.polysemy_fraction) {
            let t = song_titles.choose(b.rng).unwrap().clone();
            song_titles.retain(|s| *s != t);
            Ok(t)
        } else {
            b.title(cfg.odd_fraction)
        }
    };
    for _ in 0..cfg.films {
        let title = reuse(&mut b)?;
        let year = b.rng.gen_range(1950..2024);
        let d = if b.rng.gen_bool(0.5) { format!("{year} film") } else { "film".to_string() };
        let id = b.add(&title, &desc(&d));
        let n_cast = b.rng.gen_range(1..=3);
        let mut cast: Vec<&(String, String)> = actors.choose_multiple(b.rng, n_cast).collect();
        cast.sort();
        for (aid, _) in cast {
            b.triple(&id, "cast_member", aid);
        }
        let g = film_genres.choose(b.rng).unwrap().clone();
        b.triple(&id, "genre", &g);
    }
    for _ in 0..cfg.books {
        let title = reuse(&mut b)?;
        let (aid, aname) = authors.choose(b.rng).unwrap().clone();
        let d = match b.rng.gen_range(0..4) {
            0 | 1 => format!("novel by {aname}"),
            2 => "novel".to_string(),
            _ => "book".to_string(),
        };
        let id = b.add(&title, &desc(&d));
        b.triple(&id, "author", &aid);
    }
    Ok(SynthKg {
        entities: b.entities,
        triples: b.triples,
    })
}

/// Entity slot types used by templates, each tied to one side of a relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Song,
    Artist,
    Film,
    Actor,
    Book,
    Author,
    City,
    State,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Song,
        Kind::Artist,
        Kind::Film,
        Kind::Actor,
        Kind::Book,
        Kind::Author,
        Kind::City,
        Kind::State,
    ];

    fn placeholder(self) -> &'static str {
        match self {
            Kind::Song => "song",
            Kind::Artist => "artist",
            Kind::Film => "film",
            Kind::Actor => "actor",
            Kind::Book => "book",
            Kind::Author => "author",
            Kind::City => "city",
            Kind::State => "state",
        }
    }

    pub fn slot_name(self) -> &'static str {
        match self {
            Kind::Song => "SongName",
            Kind::Artist => "ArtistName",
            Kind::Film => "MovieName",
            Kind::Actor => "ActorName",
            Kind::Book => "BookName",
            Kind::Author => "AuthorName",
            Kind::City => "CityName",
            Kind::State => "StateName",
        }
    }

    /// The defining relation and which end of it this kind occupies.
    pub fn relation(self) -> (&'static str, Direction) {
        match self {
            Kind::Song => ("performer", Direction::Outgoing),
            Kind::Artist => ("performer", Direction::Incoming),
            Kind::Film => ("cast_member", Direction::Outgoing),
            Kind::Actor => ("cast_member", Direction::Incoming),
            Kind::Book => ("author", Direction::Outgoing),
            Kind::Author => ("author", Direction::Incoming),
            Kind::City => ("located_in", Direction::Outgoing),
            Kind::State => ("located_in", Direction::Incoming),
        }
    }

    fn linked(self, other: Kind) -> bool {
        let (r1, d1) = self.relation();
        let (r2, d2) = other.relation();
        r1 == r2 && d1 != d2
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL
            .into_iter()
            .find(|k| k.placeholder() == s)
            .ok_or_else(|| Error::format("template", format!("unknown placeholder `{{{s}}}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Slot(Kind),
}

/// An utterance pattern such as `play {song} by {artist}` with its domain
/// and intent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub domain: String,
    pub intent: String,
    pub pieces: Vec<Piece>,
}

/// Parses `domain \t intent \t pattern` lines; `#` starts a comment line.
pub fn parse_templates(text: &str) -> Result<Vec<Template>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let [domain, intent, pattern] = line.split('\t').collect::<Vec<_>>()[..] else {
            return Err(Error::format("template", format!("line {}: expected 3 tab-separated fields", n + 1)));
        };
        let pieces = pattern
            .split_whitespace()
            .map(|w| match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                Some(k) => k.parse().map(Piece::Slot),
                None => Ok(Piece::Word(w.to_lowercase())),
            })
            .collect::<Result<Vec<_>>>()?;
        if !pieces.iter().any(|p| matches!(p, Piece::Slot(_))) {
            return Err(Error::format("template", format!("line {}: no entity slot", n + 1)));
        }
        out.push(Template {
            domain: domain.trim().to_string(),
            intent: intent.trim().to_string(),
            pieces,
        });
    }
    if out.is_empty() {
        return Err(Error::format("template", "no templates"));
    }
    Ok(out)
}

/// The shipped template set.
pub fn default_templates() -> Vec<Template> {
    parse_templates(include_str!("../../../fixtures/templates.tsv")).expect("shipped templates parse")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptOp {
    CharEdit,
    WordSubstitution,
    SplitMerge,
}

/// Simulated recognition noise over entity surfaces.
#[derive(Clone, Debug)]
pub struct Corruptor {
    words: Vec<String>,
    max_distance: usize,
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

impl Corruptor {
    /// Word substitutions draw from the words of `index_surfaces`.
    pub fn new<'a>(index_surfaces: impl IntoIterator<Item = &'a str>) -> Self {
        let words: std::collections::BTreeSet<String> =
            index_surfaces.into_iter().flat_map(|s| s.split_whitespace().map(str::to_string)).collect();
        Corruptor {
            words: words.into_iter().collect(),
            max_distance: 4,
        }
    }

    /// Applies one sampled operator; the result always differs from `surface`.
    pub fn corrupt(&self, surface: &str, rng: &mut impl Rng) -> Result<String> {
        if surface.split_whitespace().next().is_none() {
            return Err(Error::Invalid("cannot corrupt an empty surface".into()));
        }
        for _ in 0..16 {
            let op = match rng.gen_range(0..10) {
                0..=4 => CorruptOp::CharEdit,
                5..=7 => CorruptOp::WordSubstitution,
                _ => CorruptOp::SplitMerge,
            };
            if let Some(s) = self.apply(op, surface, rng).filter(|s| s != surface) {
                return Ok(s);
            }
        }
        Ok(self.apply(CorruptOp::CharEdit, surface, rng).expect("char edits always apply"))
    }

    /// `None` when the operator does not apply to `surface`.
    pub fn apply(&self, op: CorruptOp, surface: &str, rng: &mut impl Rng) -> Option<String> {
        let mut words: Vec<String> = surface.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return None;
        }
        let w = rng.gen_range(0..words.len());
        match op {
            CorruptOp::CharEdit => {
                let mut chars: Vec<char> = words[w].chars().collect();
                let letter = |rng: &mut dyn rand::RngCore| LETTERS[rng.gen_range(0..LETTERS.len())] as char;
                match rng.gen_range(0..3) {
                    0 => {
                        let i = rng.gen_range(0..chars.len());
                        let c = std::iter::repeat_with(|| letter(rng)).find(|&c| c != chars[i]).unwrap();
                        chars[i] = c;
                    }
                    1 if chars.len() > 1 => {
                        chars.remove(rng.gen_range(0..chars.len()));
                    }
                    _ => {
                        let i = rng.gen_range(0..=chars.len());
                        chars.insert(i, letter(rng));
                    }
                }
                words[w] = chars.into_iter().collect();
            }
            CorruptOp::WordSubstitution => {
                let dist = |c: &String| strsim::levenshtein(c, &words[w]);
                let best = self
                    .words
                    .iter()
                    .filter(|c| **c != words[w])
                    .map(dist)
                    .filter(|&d| d <= self.max_distance)
                    .min()?;
                let ties: Vec<&String> = self.words.iter().filter(|c| **c != words[w] && dist(c) == best).collect();
                words[w] = ties.choose(rng)?.to_string();
            }
            CorruptOp::SplitMerge => {
                let splittable: Vec<usize> = (0..words.len()).filter(|&i| words[i].chars().count() > 1).collect();
                if words.len() > 1 && (splittable.is_empty() || rng.gen_bool(0.5)) {
                    let i = rng.gen_range(0..words.len() - 1);
                    let next = words.remove(i + 1);
                    words[i].push_str(&next);
                } else {
                    let &i = splittable.choose(rng)?;
                    let chars: Vec<char> = words[i].chars().collect();
                    let at = rng.gen_range(1..chars.len());
                    let tail: String = chars[at..].iter().collect();
                    words[i] = chars[..at].iter().collect();
                    words.insert(i + 1, tail);
                }
            }
        }
        Some(words.join(" "))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SplitTags {
    pub zero_shot: bool,
    pub few_shot: bool,
    pub kg_relation: bool,
    pub clean: bool,
}

impl fmt::Display for SplitTags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.zero_shot, "zero_shot"),
            (self.few_shot, "few_shot"),
            (self.kg_relation, "kg_relation"),
            (self.clean, "clean"),
        ];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        f.write_str(&on.join(","))
    }
}

impl FromStr for SplitTags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = SplitTags::default();
        for name in s.split(',').filter(|n| !n.is_empty()) {
            match name {
                "zero_shot" => t.zero_shot = true,
                "few_shot" => t.few_shot = true,
                "kg_relation" => t.kg_relation = true,
                "clean" => t.clean = true,
                other => return Err(Error::format("split tags", format!("unknown tag `{other}`"))),
            }
        }
        Ok(t)
    }
}

/// A (source, target) rephrase pair. Friction samples carry the corrupted
/// span; clean samples have `source == target` and no entity fields.
#[derive(Clone, Debug, PartialEq)]
pub struct RephraseSample {
    pub source: String,
    pub target: String,
    /// Inclusive word range in `source`.
    pub corrupt_span: Option<(usize, usize)>,
    pub corrupt_text: Option<String>,
    pub target_entity: Option<String>,
    /// Upstream interpretation of `source`.
    pub hypothesis: NluHypothesis,
    /// Interpretation of `target`.
    pub gold_hypothesis: NluHypothesis,
    pub tags: SplitTags,
    pub hard_negatives: Vec<String>,
    /// Set when mining came up short and negatives were padded randomly.
    pub padded: bool,
}

impl RephraseSample {
    pub fn is_friction(&self) -> bool {
        self.corrupt_span.is_some()
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::format("sample", format!("{d}: `{}`", self.source)));
        match (&self.corrupt_span, &self.corrupt_text, &self.target_entity) {
            (Some((i, j)), Some(text), Some(_)) => {
                let words: Vec<&str> = self.source.split_whitespace().collect();
                if i > j || *j >= words.len() {
                    return bad("span out of range");
                }
                if words[*i..=*j].join(" ") != *text {
                    return bad("span text differs from corrupt text");
                }
                if self.tags.clean {
                    return bad("friction sample tagged clean");
                }
            }
            (None, None, None) => {
                if self.source != self.target {
                    return bad("clean sample with differing target");
                }
            }
            _ => return bad("partial entity fields"),
        }
        if self.tags.zero_shot && self.tags.few_shot {
            return bad("zero_shot and few_shot both set");
        }
        Ok(())
    }
}

/// Sample counts and sampling knobs for [`generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub l2_train: usize,
    pub clean_fraction: f64,
    pub l1_train: usize,
    pub friction_test: usize,
    pub clean_test: usize,
    /// Exponent of the Zipf-like entity popularity.
    pub popularity_skew: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            l2_train: 20_000,
            clean_fraction: 0.25,
            l1_train: 4_000,
            friction_test: 2_000,
            clean_test: 500,
            popularity_skew: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub l1_train: Vec<RephraseSample>,
    pub l2_train: Vec<RephraseSample>,
    pub friction_test: Vec<RephraseSample>,
    pub clean_test: Vec<RephraseSample>,
}

impl Dataset {
    const FILES: [&'static str; 4] = ["l1_train.tsv", "l2_train.tsv", "friction_test.tsv", "clean_test.tsv"];

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, set) in Self::FILES.iter().zip(self.sets()) {
            write_samples(&dir.join(name), set)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let [a, b, c, d] = Self::FILES.map(|n| read_samples(&dir.join(n)));
        Ok(Dataset {
            l1_train: a?,
            l2_train: b?,
            friction_test: c?,
            clean_test: d?,
        })
    }

    fn sets(&self) -> [&[RephraseSample]; 4] {
        [&self.l1_train, &self.l2_train, &self.friction_test, &self.clean_test]
    }
}

struct KindPool {
    surfaces: Vec<String>,
    all: WeightedIndex<f64>,
    /// Positions of index surfaces, with their weights.
    targets: Option<(Vec<usize>, WeightedIndex<f64>)>,
}

struct Sampler<'a> {
    templates: &'a [Template],
    pools: BTreeMap<Kind, KindPool>,
    partners: HashMap<(Kind, String), Vec<String>>,
    corruptor: Corruptor,
}

impl<'a> Sampler<'a> {
    fn new(kg: &KnowledgeGraph, index: &[IndexEntry], templates: &'a [Template], skew: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let in_index: HashSet<&str> = index.iter().map(|e| e.surface.as_str()).collect();
        let mut members: BTreeMap<Kind, std::collections::BTreeSet<String>> = BTreeMap::new();
        let mut partners: HashMap<(Kind, String), Vec<String>> = HashMap::new();
        for t in kg.triples() {
            let rel = kg.relation_name(t.rel)?;
            let head = &kg.entity(t.head)?.surface;
            let tail = &kg.entity(t.tail)?.surface;
            for k in Kind::ALL {
                let (r, dir) = k.relation();
                if r != rel {
                    continue;
                }
                let (me, other) = if dir == Direction::Outgoing { (head, tail) } else { (tail, head) };
                members.entry(k).or_default().insert(me.clone());
                let list = partners.entry((k, me.clone())).or_default();
                if !list.contains(other) {
                    list.push(other.clone());
                }
            }
        }
        for list in partners.values_mut() {
            list.sort();
        }
        let mut pools = BTreeMap::new();
        for (k, set) in members {
            let surfaces: Vec<String> = set.into_iter().collect();
            let mut rank: Vec<usize> = (0..surfaces.len()).collect();
            rank.shuffle(rng);
            let weights: Vec<f64> = rank.iter().map(|&r| ((r + 1) as f64).powf(-skew)).collect();
            let idx: Vec<usize> = (0..surfaces.len()).filter(|&i| in_index.contains(surfaces[i].as_str())).collect();
            let targets = (!idx.is_empty()).then(|| {
                let w = WeightedIndex::new(idx.iter().map(|&i| weights[i])).expect("positive weights");
                (idx, w)
            });
            let all = WeightedIndex::new(&weights).expect("positive weights");
            pools.insert(k, KindPool { surfaces, all, targets });
        }
        Ok(Sampler {
            templates,
            pools,
            partners,
            corruptor: Corruptor::new(index.iter().map(|e| e.surface.as_str())),
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng, friction: bool) -> Result<Option<RephraseSample>> {
        let t = self.templates.choose(rng).expect("templates non-empty");
        let slots: Vec<(usize, Kind)> = t
            .pieces
            .iter()
            .enumerate()
            .filter_map(|(i, p)| match p {
                Piece::Slot(k) => Some((i, *k)),
                Piece::Word(_) => None,
            })
            .collect();
        let &(anchor, anchor_kind) = slots.choose(rng).expect("templates have slots");
        let Some(pool) = self.pools.get(&anchor_kind) else {
            return Ok(None);
        };
        let anchor_surface = if friction {
            let Some((idx, w)) = &pool.targets else {
                return Ok(None);
            };
            pool.surfaces[idx[w.sample(rng)]].clone()
        } else {
            pool.surfaces[pool.all.sample(rng)].clone()
        };
        let mut fill: BTreeMap<usize, String> = BTreeMap::new();
        fill.insert(anchor, anchor_surface.clone());
        for &(i, k) in &slots {
            if i == anchor {
                continue;
            }
            let s = if k.linked(anchor_kind) {
                match self.partners.get(&(anchor_kind, anchor_surface.clone())).and_then(|p| p.choose(rng)) {
                    Some(s) => s.clone(),
                    None => return Ok(None),
                }
            } else {
                match self.pools.get(&k) {
                    Some(p) => p.surfaces[p.all.sample(rng)].clone(),
                    None => return Ok(None),
                }
            };
            fill.insert(i, s);
        }
        let corrupted = if friction {
            Some(self.corruptor.corrupt(&anchor_surface, rng)?)
        } else {
            None
        };

        let mut src: Vec<String> = Vec::new();
        let mut tgt: Vec<String> = Vec::new();
        let mut span = None;
        let mut slots_src = Vec::new();
        let mut slots_tgt = Vec::new();
        for (i, p) in t.pieces.iter().enumerate() {
            match p {
                Piece::Word(w) => {
                    src.push(w.clone());
                    tgt.push(w.clone());
                }
                Piece::Slot(k) => {
                    let clean = &fill[&i];
                    let shown = match (&corrupted, i == anchor) {
                        (Some(c), true) => {
                            let start = src.len();
                            span = Some((start, start + c.split_whitespace().count() - 1));
                            c
                        }
                        _ => clean,
                    };
                    src.extend(shown.split_whitespace().map(str::to_string));
                    tgt.extend(clean.split_whitespace().map(str::to_string));
                    slots_src.push((k.slot_name().to_string(), shown.clone()));
                    slots_tgt.push((k.slot_name().to_string(), clean.clone()));
                }
            }
        }
        let hyp = |slots| NluHypothesis {
            domain: t.domain.clone(),
            intent: t.intent.clone(),
            slots,
        };
        let sample = RephraseSample {
            source: src.join(" "),
            target: tgt.join(" "),
            corrupt_span: span,
            corrupt_text: corrupted,
            target_entity: friction.then_some(anchor_surface),
            hypothesis: hyp(slots_src),
            gold_hypothesis: hyp(slots_tgt),
            tags: SplitTags {
                clean: !friction,
                ..SplitTags::default()
            },
            hard_negatives: Vec::new(),
            padded: false,
        };
        sample.validate()?;
        Ok(Some(sample))
    }

    /// Draws up to `n` samples whose source and target avoid `taken`.
    fn draw(&self, rng: &mut ChaCha8Rng, n: usize, friction: bool, taken: &mut HashSet<String>, what: &str) -> Result<Vec<RephraseSample>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n && attempts < 20 * n + 100 {
            attempts += 1;
            let Some(s) = self.sample(rng, friction)? else { continue };
            if taken.contains(&s.source) || taken.contains(&s.target) {
                continue;
            }
            taken.insert(s.source.clone());
            taken.insert(s.target.clone());
            out.push(s);
        }
        if out.len() < n {
            log::warn!("generated {} of {n} {what} samples", out.len());
        }
        Ok(out)
    }
}

/// Builds the training and test sets. L2 training mixes friction and clean
/// samples; L1 training is a prefix of the L2 friction samples; test sets
/// share no utterance with training. Test sets come back tagged.
pub fn generate(kg: &KnowledgeGraph, index: &[IndexEntry], templates: &[Template], cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    if templates.is_empty() {
        return Err(Error::Invalid("no templates".into()));
    }
    if !(0.0..=1.0).contains(&cfg.clean_fraction) {
        return Err(Error::Config(format!("clean_fraction {} outside [0, 1]", cfg.clean_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = Sampler::new(kg, index, templates, cfg.popularity_skew, &mut rng)?;
    let n_clean = (cfg.l2_train as f64 * cfg.clean_fraction).round() as usize;
    let mut taken = HashSet::new();
    let friction = sampler.draw(&mut rng, cfg.l2_train - n_clean, true, &mut taken, "l2 friction")?;
    let clean = sampler.draw(&mut rng, n_clean, false, &mut taken, "l2 clean")?;
    if cfg.l1_train > friction.len() {
        log::warn!("only {} friction samples available for {} l1 samples", friction.len(), cfg.l1_train);
    }
    let l1_train: Vec<RephraseSample> = friction.iter().take(cfg.l1_train).cloned().collect();
    let mut l2_train: Vec<RephraseSample> = friction.into_iter().chain(clean).collect();
    l2_train.shuffle(&mut rng);

    let mut test_taken = taken.clone();
    let friction_test = sampler.draw(&mut rng, cfg.friction_test, true, &mut test_taken, "friction test")?;
    let clean_test = sampler.draw(&mut rng, cfg.clean_test, false, &mut test_taken, "clean test")?;
    Ok(Dataset {
        friction_test: tag_splits(&friction_test, &l2_train, kg),
        clean_test: tag_splits(&clean_test, &l2_train, kg),
        l1_train,
        l2_train,
    })
}

/// Occurrences of each target entity among training friction samples.
pub fn target_counts(train: &[RephraseSample]) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for s in train {
        if let Some(e) = &s.target_entity {
            *counts.entry(e.as_str()).or_default() += 1;
        }
    }
    counts
}

/// True if some KG surface in `source` outside the corrupt span shares a
/// triple with `target`.
pub fn has_kg_relation(kg: &KnowledgeGraph, source: &str, span: (usize, usize), target: &str) -> bool {
    let words: Vec<&str> = source.split_whitespace().collect();
    let segments = [(0, span.0), (span.1 + 1, words.len())];
    for (lo, hi) in segments {
        for i in lo..hi {
            for j in i + 1..=hi.min(i + 6) {
                let cand = words[i..j].join(" ");
                if cand != target && !kg.lookup(&cand).is_empty() && kg.surfaces_related(target, &cand) {
                    return true;
                }
            }
        }
    }
    false
}

/// Tags test samples against training target counts and the graph.
pub fn tag_splits(test: &[RephraseSample], train: &[RephraseSample], kg: &KnowledgeGraph) -> Vec<RephraseSample> {
    let counts = target_counts(train);
    test.iter()
        .map(|s| {
            let mut s = s.clone();
            s.tags = match (&s.target_entity, s.corrupt_span) {
                (Some(t), Some(span)) => {
                    let c = counts.get(t.as_str()).copied().unwrap_or(0);
                    SplitTags {
                        zero_shot: c == 0,
                        few_shot: (1..=10).contains(&c),
                        kg_relation: has_kg_relation(kg, &s.source, span, t),
                        clean: false,
                    }
                }
                _ => SplitTags {
                    clean: true,
                    ..SplitTags::default()
                },
            };
            s
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mined {
    pub negatives: Vec<String>,
    pub padded: bool,
}

/// Top retrieved surfaces other than the positive, `count` per sample,
/// padded from random index rows when retrieval runs short.
pub fn mine_hard_negatives(model: &L1Model, index: &EntityIndex, samples: &[RephraseSample], count: usize, seed: u64) -> Result<Vec<Mined>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let positive = s.target_entity.as_deref();
        let hits = index.top_k(&model.encode_utterance(&s.source), count + 1)?;
        let mut negatives: Vec<String> = hits
            .into_iter()
            .map(|h| h.surface)
            .filter(|h| Some(h.as_str()) != positive)
            .take(count)
            .collect();
        let padded = negatives.len() < count;
        if padded {
            let mut pool: Vec<&str> = index
                .rows
                .iter()
                .map(|r| r.surface.as_str())
                .filter(|r| Some(*r) != positive && !negatives.iter().any(|n| n == r))
                .collect();
            pool.shuffle(&mut rng);
            let need = count - negatives.len();
            negatives.extend(pool.into_iter().take(need).map(str::to_string));
            log::debug!("padded negatives for `{}`", s.source);
        }
        out.push(Mined { negatives, padded });
    }
    Ok(out)
}

pub fn attach_negatives(samples: &mut [RephraseSample], mined: Vec<Mined>) -> Result<()> {
    if samples.len() != mined.len() {
        return Err(Error::Invalid(format!("{} samples but {} negative lists", samples.len(), mined.len())));
    }
    for (s, m) in samples.iter_mut().zip(mined) {
        s.hard_negatives = m.negatives;
        s.padded = m.padded;
    }
    Ok(())
}

/// Friction samples as L1 training pairs with at most `negatives` hard negatives.
pub fn l1_samples(samples: &[RephraseSample], negatives: usize) -> Vec<TrainSampleL1> {
    samples
        .iter()
        .filter_map(|s| {
            Some(TrainSampleL1 {
                source: s.source.clone(),
                positive: s.target_entity.clone()?,
                hard_negatives: s.hard_negatives.iter().take(negatives).cloned().collect(),
            })
        })
        .collect()
}

pub fn l2_samples(samples: &[RephraseSample], negatives: usize) -> Vec<TrainSampleL2> {
    samples
        .iter()
        .map(|s| TrainSampleL2 {
            source: s.source.clone(),
            positive: s.target_entity.clone(),
            hard_negatives: s.hard_negatives.iter().take(negatives).cloned().collect(),
            span: s.corrupt_span,
        })
        .collect()
}

const HEADER: &str = "source\ttarget\tspan\tcorrupt_text\ttarget_entity\thypothesis\tgold_hypothesis\ttags\thard_negatives\tpadded";

pub fn write_samples(path: &Path, samples: &[RephraseSample]) -> Result<()> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for s in samples {
        let span = s.corrupt_span.map(|(i, j)| format!("{i}-{j}")).unwrap_or_default();
        writeln!(
            out,
            "{}\t{}\t{span}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.source,
            s.target,
            s.corrupt_text.as_deref().unwrap_or(""),
            s.target_entity.as_deref().unwrap_or(""),
            s.hypothesis,
            s.gold_hypothesis,
            s.tags,
            s.hard_negatives.join("|"),
            u8::from(s.padded),
        )
        .unwrap();
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_samples(path: &Path) -> Result<Vec<RephraseSample>> {
    parse_samples(&read_to_string(path)?)
}

pub fn parse_samples(text: &str) -> Result<Vec<RephraseSample>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format("sample file", "missing or unexpected header"));
    }
    let opt = |f: &str| (!f.is_empty()).then(|| f.to_string());
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let bad = |d: String| Error::format("sample file", format!("line {}: {d}", n + 2));
            let f: Vec<&str> = line.split('\t').collect();
            let [source, target, span, corrupt, entity, hyp, gold, tags, negs, padded] = f[..] else {
                return Err(bad(format!("expected 10 fields, got {}", f.len())));
            };
            let corrupt_span = match span {
                "" => None,
                s => {
                    let (i, j) = s.split_once('-').ok_or_else(|| bad(format!("span `{s}`")))?;
                    let p = |x: &str| x.parse::<usize>().map_err(|_| bad(format!("span `{s}`")));
                    Some((p(i)?, p(j)?))
                }
            };
            let s = RephraseSample {
                source: source.to_string(),
                target: target.to_string(),
                corrupt_span,
                corrupt_text: opt(corrupt),
                target_entity: opt(entity),
                hypothesis: hyp.parse()?,
                gold_hypothesis: gold.parse()?,
                tags: tags.parse()?,
                hard_negatives: negs.split('|').filter(|n| !n.is_empty()).map(str::to_string).collect(),
                padded: match padded {
                    "0" => false,
                    "1" => true,
                    p => return Err(bad(format!("padded flag `{p}`"))),
                },
            };
            s.validate().map_err(|e| bad(e.to_string()))?;
            Ok(s)
        })
        .collect()
}
