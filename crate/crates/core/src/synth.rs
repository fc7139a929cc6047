//! Synthetic product-review corpora with a known phrase pool and planted
//! synonym pairs, used by the acceptance suite, the CLI tests and the demo.
//!
//! Each sentence names a product, one pool phrase and a cue word. The cue
//! usually identifies the phrase, two-word phrases share their halves with
//! one other phrase, and three-word phrases share cues in pairs.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Three products per phrase category.
const NOUNS: [[&str; 3]; 10] = [
    ["laptop", "notebook", "chromebook"],
    ["phone", "smartphone", "handset"],
    ["camera", "camcorder", "webcam"],
    ["headphones", "earbuds", "headset"],
    ["blender", "mixer", "juicer"],
    ["kettle", "toaster", "microwave"],
    ["router", "modem", "repeater"],
    ["monitor", "projector", "television"],
    ["keyboard", "mouse", "trackpad"],
    ["speaker", "soundbar", "subwoofer"],
];
const MODS: [&str; 10] = [
    "battery", "screen", "sound", "build", "signal", "noise", "heat", "color", "power", "touch",
];
const HEADS: [&str; 10] = [
    "life", "quality", "range", "size", "speed", "control", "level", "mode", "output", "design",
];
const LONG_FIRST: [&str; 5] = ["fast", "wireless", "long", "low", "high"];
const LONG_MID: [&str; 2] = ["charging", "lasting"];
const LONG_LAST: [&str; 5] = ["support", "time", "cable", "port", "pad"];
const SHORT_CUES: [[&str; 2]; 20] = [
    ["charger", "recharge"],
    ["display", "panel"],
    ["bass", "woofer"],
    ["aluminum", "chassis"],
    ["antenna", "reception"],
    ["cancelling", "isolation"],
    ["fan", "cooling"],
    ["palette", "saturation"],
    ["adapter", "wattage"],
    ["stylus", "gestures"],
    ["cell", "capacity"],
    ["pixels", "resolution"],
    ["treble", "mids"],
    ["plastic", "hinge"],
    ["wifi", "bandwidth"],
    ["muffling", "hiss"],
    ["vents", "thermals"],
    ["tint", "hue"],
    ["socket", "voltage"],
    ["glass", "haptics"],
];
const LONG_CUES: [[&str; 2]; 5] = [
    ["usb", "wired"],
    ["bluetooth", "pairing"],
    ["endurance", "stamina"],
    ["budget", "affordable"],
    ["premium", "flagship"],
];
const ADJECTIVES: [&str; 32] = [
    "excellent",
    "decent",
    "poor",
    "amazing",
    "okay",
    "terrible",
    "solid",
    "average",
    "superb",
    "mediocre",
    "fantastic",
    "awful",
    "fine",
    "outstanding",
    "disappointing",
    "impressive",
    "acceptable",
    "lousy",
    "great",
    "bad",
    "reliable",
    "flawless",
    "subpar",
    "stellar",
    "adequate",
    "dreadful",
    "nice",
    "remarkable",
    "unusable",
    "passable",
    "wonderful",
    "inconsistent",
];
const TEMPLATES: [&str; 10] = [
    "the {noun} has {cue} and {phrase} , it is {adj} .",
    "i bought this {noun} for its {cue} and the {phrase} is {adj} .",
    "{phrase} on my {noun} is {adj} , great {cue} too .",
    "my {adj} {noun} with {cue} offers {phrase} .",
    "we tested the {cue} of a {noun} and found the {phrase} {adj} .",
    "overall the {phrase} feels {adj} thanks to the {cue} in this {noun} .",
    "honestly , the {phrase} of this {noun} seems {adj} because of its {cue} .",
    "after a week with the {noun} , {cue} works and {phrase} remains {adj} .",
    "my friend says the {noun} {phrase} is {adj} , mostly due to {cue} .",
    "if you need {cue} , this {noun} delivers {phrase} that is {adj} .",
];
/// `(attribute, word, synonym)`: both synonyms describe the same attribute.
const SYNONYMS: [(&str, &str, &str); 20] = [
    ("price", "cheap", "inexpensive"),
    ("response", "quick", "rapid"),
    ("dimensions", "big", "large"),
    ("footprint", "small", "tiny"),
    ("frame", "sturdy", "robust"),
    ("operation", "quiet", "silent"),
    ("lighting", "bright", "vivid"),
    ("weight", "light", "lightweight"),
    ("cost", "pricey", "expensive"),
    ("look", "sleek", "stylish"),
    ("hum", "loud", "noisy"),
    ("assistant", "smart", "clever"),
    ("picture", "clear", "crisp"),
    ("grip", "weak", "feeble"),
    ("box", "huge", "enormous"),
    ("setup", "easy", "simple"),
    ("lid", "fragile", "flimsy"),
    ("surface", "warm", "hot"),
    ("remote", "handy", "convenient"),
    ("smell", "odd", "strange"),
];
const PAIR_TEMPLATES: [&str; 3] = [
    "the {noun} {attr} is {syn} and the {phrase} is {adj} .",
    "a {noun} with {syn} {attr} whose {phrase} feels {adj} .",
    "this {noun} has a {syn} {attr} but {phrase} is {adj} .",
];
/// Probability that the cue belongs to the sentence's phrase.
pub const CUE_RELIABILITY: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPhrase {
    pub text: String,
    pub score: f64,
    pub category: usize,
    /// Either of these cue words points at the phrase.
    pub cues: [&'static str; 2],
}

/// The 30 pool phrases: 20 of two words, 10 of three words.
pub fn phrases() -> Vec<SynthPhrase> {
    let mut out = Vec::with_capacity(30);
    for j in 0..20 {
        let m = j % 10;
        let h = if j < 10 { m } else { (m + 5) % 10 };
        out.push(SynthPhrase {
            text: format!("{} {}", MODS[m], HEADS[h]),
            score: 0.55 + 0.02 * j as f64,
            category: m,
            cues: SHORT_CUES[j],
        });
    }
    for i in 0..10 {
        let (x, y) = (i % 5, i / 5);
        out.push(SynthPhrase {
            text: format!(
                "{} {} {}",
                LONG_FIRST[x],
                LONG_MID[y],
                LONG_LAST[(x + y) % 5]
            ),
            score: 0.6 + 0.03 * i as f64,
            category: i,
            cues: LONG_CUES[x],
        });
    }
    out
}

/// Pool file entries, including a few low-quality candidates that a 0.5
/// threshold filters out.
pub fn pool_entries() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = phrases().into_iter().map(|p| (p.text, p.score)).collect();
    for (text, score) in [("it is", 0.2), ("great cue", 0.1), ("and the", 0.35)] {
        out.push((text.to_string(), score));
    }
    out
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

fn pick_cue<R: Rng>(phrase: &SynthPhrase, all: &[SynthPhrase], rng: &mut R) -> &'static str {
    let owner = if rng.random::<f64>() < CUE_RELIABILITY {
        phrase
    } else {
        all.choose(rng).expect("phrases exist")
    };
    owner.cues[rng.random_range(0..2)]
}

/// `n` review sentences, one pool phrase each.
pub fn product_corpus(n: usize, seed: u64) -> Vec<String> {
    let all = phrases();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = all.choose(&mut rng).expect("phrases exist");
            let cue = pick_cue(p, &all, &mut rng);
            let template = TEMPLATES.choose(&mut rng).expect("templates exist");
            fill(
                template,
                &[
                    (
                        "noun",
                        NOUNS[p.category].choose(&mut rng).expect("nouns exist"),
                    ),
                    ("cue", cue),
                    ("phrase", &p.text),
                    (
                        "adj",
                        ADJECTIVES.choose(&mut rng).expect("adjectives exist"),
                    ),
                ],
            )
        })
        .collect()
}

/// The 20 planted `(word, synonym)` pairs.
pub fn synonym_pairs() -> Vec<(&'static str, &'static str)> {
    SYNONYMS.iter().map(|&(_, a, b)| (a, b)).collect()
}

/// Associated entity pairs: both sides describe the same product, phrase and
/// rating with different templates, and each carries one half of a planted
/// synonym pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedCorpus {
    /// `(entity id, text)`.
    pub content: Vec<(String, String)>,
    pub pairs: Vec<(String, String)>,
    /// For each pair, the synonym used on the left and on the right.
    pub planted: Vec<(String, String)>,
}

impl PairedCorpus {
    pub fn content_tsv(&self) -> String {
        self.content
            .iter()
            .fold(String::new(), |mut s, (id, text)| {
                let _ = writeln!(s, "{id}\t{text}");
                s
            })
    }

    pub fn pairs_tsv(&self) -> String {
        self.pairs.iter().fold(String::new(), |mut s, (a, b)| {
            let _ = writeln!(s, "{a}\t{b}");
            s
        })
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.content.iter().map(|(_, t)| t.as_str())
    }
}

/// `n_pairs` pairs cycling through the planted synonyms.
pub fn paired_corpus(n_pairs: usize, seed: u64) -> PairedCorpus {
    let all = phrases();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PairedCorpus {
        content: Vec::with_capacity(2 * n_pairs),
        pairs: Vec::with_capacity(n_pairs),
        planted: Vec::with_capacity(n_pairs),
    };
    for k in 0..n_pairs {
        let (attr, mut left, mut right) = SYNONYMS[k % SYNONYMS.len()];
        if rng.random::<bool>() {
            std::mem::swap(&mut left, &mut right);
        }
        let p = all.choose(&mut rng).expect("phrases exist");
        let first = rng.random_range(0..PAIR_TEMPLATES.len());
        let second = (first + rng.random_range(1..PAIR_TEMPLATES.len())) % PAIR_TEMPLATES.len();
        let adj = ADJECTIVES.choose(&mut rng).expect("adjectives exist");
        let noun = NOUNS[p.category].choose(&mut rng).expect("nouns exist");
        let text = |template: &str, syn: &str| {
            fill(
                template,
                &[
                    ("noun", noun),
                    ("attr", attr),
                    ("syn", syn),
                    ("phrase", &p.text),
                    ("adj", adj),
                ],
            )
        };
        let (a, b) = (format!("e{:05}a", k), format!("e{:05}b", k));
        out.content
            .push((a.clone(), text(PAIR_TEMPLATES[first], left)));
        out.content
            .push((b.clone(), text(PAIR_TEMPLATES[second], right)));
        out.pairs.push((a, b));
        out.planted.push((left.to_string(), right.to_string()));
    }
    out
}
