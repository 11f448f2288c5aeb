//! Seeded generator of English-like prose, used as a self-contained stand-in
//! for a natural-text corpus in tests and demos.
//!
//! Sentences come from a small phrase grammar over a few hundred words, with
//! punctuation, capitalisation, dialogue, numbers and paragraph breaks, so a
//! byte-level model has spelling, word order and layout to learn.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::calib::Corpus;
use crate::rng;

const NAMES: &[&str] = &[
    "Alice", "Bruno", "Clara", "Daniel", "Elena", "Farid", "Greta", "Hugo", "Ingrid", "Jonas",
    "Katya", "Leon", "Mira", "Nadia", "Oscar", "Priya", "Quentin", "Rosa", "Samuel", "Tomas",
];

const NOUNS: &[&str] = &[
    "river",
    "garden",
    "window",
    "letter",
    "mountain",
    "village",
    "teacher",
    "market",
    "bridge",
    "forest",
    "station",
    "kitchen",
    "doctor",
    "harbour",
    "library",
    "morning",
    "evening",
    "road",
    "house",
    "child",
    "friend",
    "city",
    "country",
    "storm",
    "season",
    "story",
    "question",
    "answer",
    "machine",
    "engine",
    "table",
    "field",
    "horse",
    "boat",
    "island",
    "lamp",
    "door",
    "voice",
    "hand",
    "music",
    "paper",
    "winter",
    "summer",
    "office",
    "school",
    "ship",
    "wall",
    "tower",
    "valley",
    "farmer",
    "painter",
    "student",
    "soldier",
    "captain",
    "stranger",
    "king",
    "queen",
    "mother",
    "father",
    "brother",
    "sister",
    "neighbour",
    "clock",
    "candle",
    "bread",
    "coffee",
    "window",
    "garden",
    "desk",
    "chair",
    "street",
    "corner",
    "square",
    "church",
];

const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "small", "heavy", "narrow", "green", "cold", "warm", "strange",
    "careful", "patient", "tired", "early", "late", "long", "short", "empty", "crowded", "distant",
    "gentle", "sudden", "simple", "broken", "golden", "dark", "pale", "young", "ancient", "busy",
    "silent", "open", "hidden", "familiar", "curious", "honest",
];

const VERBS_PAST: &[&str] = &[
    "opened",
    "closed",
    "found",
    "watched",
    "followed",
    "crossed",
    "carried",
    "remembered",
    "painted",
    "visited",
    "repaired",
    "noticed",
    "reached",
    "left",
    "built",
    "wrote",
    "read",
    "heard",
    "saw",
    "kept",
    "lost",
    "answered",
    "called",
    "described",
    "passed",
    "cleaned",
    "measured",
    "counted",
    "brought",
    "sold",
    "bought",
    "touched",
    "studied",
    "explained",
];

const VERBS_INTRANS: &[&str] = &[
    "waited",
    "laughed",
    "slept",
    "arrived",
    "returned",
    "listened",
    "smiled",
    "worked",
    "walked",
    "hesitated",
    "whispered",
    "sang",
    "rested",
    "agreed",
    "continued",
    "stopped",
];

const ADVERBS: &[&str] = &[
    "slowly",
    "quickly",
    "carefully",
    "quietly",
    "again",
    "suddenly",
    "finally",
    "often",
    "rarely",
    "almost",
    "gladly",
    "patiently",
    "softly",
    "early",
    "later",
];

const PREPOSITIONS: &[&str] = &[
    "near", "behind", "across", "under", "beside", "beyond", "inside", "toward", "along",
    "through", "above", "outside",
];

const CONNECTIVES: &[&str] = &[
    "but", "and", "because", "although", "while", "so", "until", "before", "after", "when",
];

const OPENERS: &[&str] = &[
    "In the morning",
    "That evening",
    "Years later",
    "Meanwhile",
    "After a while",
    "For a moment",
    "On the third day",
    "Before dawn",
    "At last",
    "Some time later",
];

const SAYING: &[&str] = &[
    "said",
    "asked",
    "replied",
    "answered",
    "whispered",
    "called",
];

struct Writer<'a, R: Rng> {
    rng: &'a mut R,
    out: String,
}

impl<'a, R: Rng> Writer<'a, R> {
    fn pick(&mut self, list: &[&'static str]) -> &'static str {
        list.choose(self.rng).copied().unwrap_or("")
    }

    fn noun_phrase(&mut self) -> String {
        let det = if self.rng.gen_bool(0.6) { "the" } else { "a" };
        let noun = self.pick(NOUNS);
        let mut s = if self.rng.gen_bool(0.45) {
            let adj = self.pick(ADJECTIVES);
            format!("{det} {adj} {noun}")
        } else {
            format!("{det} {noun}")
        };
        if s.starts_with("a ") && s[2..].starts_with(['a', 'e', 'i', 'o', 'u']) {
            s.insert(1, 'n');
        }
        s
    }

    fn subject(&mut self) -> String {
        if self.rng.gen_bool(0.4) {
            self.pick(NAMES).to_string()
        } else {
            self.noun_phrase()
        }
    }

    fn clause(&mut self) -> String {
        let subj = self.subject();
        let mut s = if self.rng.gen_bool(0.65) {
            let verb = self.pick(VERBS_PAST);
            let obj = self.noun_phrase();
            format!("{subj} {verb} {obj}")
        } else {
            let verb = self.pick(VERBS_INTRANS);
            format!("{subj} {verb}")
        };
        if self.rng.gen_bool(0.35) {
            let adv = self.pick(ADVERBS);
            s.push(' ');
            s.push_str(adv);
        }
        if self.rng.gen_bool(0.4) {
            let prep = self.pick(PREPOSITIONS);
            let np = self.noun_phrase();
            s.push_str(&format!(" {prep} {np}"));
        }
        s
    }

    fn sentence(&mut self) -> String {
        let mut s = match self.rng.gen_range(0..10) {
            0 | 1 => {
                let opener = self.pick(OPENERS);
                let clause = self.clause();
                format!("{opener}, {clause}")
            }
            2 => {
                let n = self.rng.gen_range(2..60);
                let noun = self.pick(NOUNS);
                let clause = self.clause();
                format!("{clause} with {n} {noun}s")
            }
            3 => {
                let name = self.pick(NAMES);
                let say = self.pick(SAYING);
                let inner = capitalize(&self.clause());
                let end = if self.rng.gen_bool(0.3) { "?" } else { "." };
                return format!("\"{inner}{end}\" {say} {name}.");
            }
            _ => self.clause(),
        };
        if self.rng.gen_bool(0.3) {
            let conj = self.pick(CONNECTIVES);
            let clause = self.clause();
            s.push_str(&format!(", {conj} {clause}"));
        }
        s = capitalize(&s);
        s.push('.');
        s
    }

    fn paragraph(&mut self) {
        let n = self.rng.gen_range(3..8);
        for i in 0..n {
            if i > 0 {
                self.out.push(' ');
            }
            let s = self.sentence();
            self.out.push_str(&s);
        }
        self.out.push_str("\n\n");
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// At least `min_bytes` of generated prose, truncated to exactly that length.
pub fn synthetic_text(seed: u64, min_bytes: usize) -> Vec<u8> {
    let mut r = rng::stream(seed, "textgen");
    let mut w = Writer {
        rng: &mut r,
        out: String::with_capacity(min_bytes + 1024),
    };
    while w.out.len() < min_bytes {
        w.paragraph();
    }
    let mut bytes = w.out.into_bytes();
    bytes.truncate(min_bytes);
    bytes
}

pub fn synthetic_corpus(seed: u64, min_bytes: usize) -> Corpus {
    Corpus {
        name: format!("synthetic-{seed}-{min_bytes}"),
        bytes: synthetic_text(seed, min_bytes.max(1)),
    }
}
