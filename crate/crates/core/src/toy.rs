//! Procedural cause-effect corpus used for offline tests and demos.
//!
//! Each context describes a chain of influences (`A increases B. B reduces C.`)
//! and each question perturbs one quantity and asks about another. Answers
//! follow the sign of the path between them; questions about quantities from
//! another process have no effect. Out-of-paragraph
//! questions perturb an outside cause whose effect on the first link is never
//! stated in the context and must be learned across examples.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{QType, QaExample, Span};
use crate::rng::SeedPath;

pub const OPTIONS: [&str; 3] = ["more", "less", "no effect"];

struct Process {
    place: &'static str,
    chain: &'static [&'static str],
    /// Outside causes and their sign on `chain[0]`.
    causes: &'static [(&'static str, bool)],
}

const PROCESSES: &[Process] = &[
    Process {
        place: "Green Valley",
        chain: &[
            "rain",
            "water in the soil",
            "plant growth",
            "food for animals",
            "animal numbers",
        ],
        causes: &[("a drought", false), ("a long storm", true)],
    },
    Process {
        place: "Lake Erie",
        chain: &["sunlight", "heat on the ground", "water evaporating", "clouds forming"],
        causes: &[("a cloudy week", false), ("a clear summer", true)],
    },
    Process {
        place: "Cape Cod",
        chain: &["wind", "waves on the shore", "erosion of rocks", "sand on the beach"],
        causes: &[("a calm season", false), ("a hurricane", true)],
    },
    Process {
        place: "Apple Hill",
        chain: &[
            "bees",
            "pollen on flowers",
            "fruit on trees",
            "seeds in the ground",
            "new trees",
        ],
        causes: &[("pesticide spraying", false), ("a warm spring", true)],
    },
    Process {
        place: "Mount Hood",
        chain: &[
            "snow on the mountain",
            "ice in the glacier",
            "melt water in the river",
            "sediment in the valley",
        ],
        causes: &[("a warm winter", false), ("a cold decade", true)],
    },
    Process {
        place: "Mount Etna",
        chain: &[
            "pressure under the volcano",
            "magma rising",
            "lava flowing",
            "new rock forming",
        ],
        causes: &[("a quiet century", false), ("an earthquake", true)],
    },
    Process {
        place: "Black Forest",
        chain: &[
            "trees in the forest",
            "roots in the soil",
            "soil holding together",
            "mud in the river",
        ],
        causes: &[("logging", false), ("tree planting", true)],
    },
    Process {
        place: "Iowa",
        chain: &[
            "fertilizer",
            "nutrients in the soil",
            "crop size",
            "harvest for farmers",
            "money for farmers",
        ],
        causes: &[("a poor budget", false), ("a government grant", true)],
    },
    Process {
        place: "Gulf Coast",
        chain: &[
            "ocean heat",
            "storms forming",
            "rain on the coast",
            "floods in the town",
        ],
        causes: &[("a cold current", false), ("a heat wave", true)],
    },
    Process {
        place: "Oak Park",
        chain: &[
            "nests built by birds",
            "eggs laid",
            "chicks hatching",
            "birds in the flock",
        ],
        causes: &[("a cat in the park", false), ("plenty of insects", true)],
    },
];

const POSITIVE: &[&str] = &["increases", "raises", "helps", "boosts"];
const NEGATIVE: &[&str] = &["reduces", "lowers", "hinders", "weakens"];
const FILLERS: &[&str] = &[
    "People in PLACE have watched this for years.",
    "It happens every spring in PLACE.",
    "Scientists near PLACE measure it closely.",
    "Farmers around PLACE notice the effects.",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Builds `n` examples deterministically from `seed`; ids are `{prefix}-{i}`.
pub fn generate(n: usize, seed: u64, prefix: &str) -> Vec<QaExample> {
    (0..n).map(|i| example(seed, prefix, i)).collect()
}

fn example(seed: u64, prefix: &str, i: usize) -> QaExample {
    let id = format!("{prefix}-{i:04}");
    let mut rng = SeedPath::new(seed).with_str("toy").with_str(&id).rng();
    let pi = rng.gen_range(0..PROCESSES.len());
    let p = &PROCESSES[pi];
    let n = p.chain.len();
    // positive links dominate so the chain reads naturally
    let signs: Vec<bool> = (0..n - 1).map(|_| rng.gen_bool(0.85)).collect();

    let mut sentences = Vec::with_capacity(n);
    for (k, &pos) in signs.iter().enumerate() {
        let verb = if pos { POSITIVE } else { NEGATIVE }.choose(&mut rng).unwrap();
        sentences.push(format!("{} {} {}.", capitalize(p.chain[k]), verb, p.chain[k + 1]));
    }
    if rng.gen_bool(0.3) {
        let at = rng.gen_range(0..=sentences.len());
        sentences.insert(at, FILLERS.choose(&mut rng).unwrap().replace("PLACE", p.place));
    }
    let context = sentences.join(" ");

    let path_sign = |from: usize, to: usize| signs[from..to].iter().filter(|&&s| !s).count() % 2 == 0;
    let roll: f64 = rng.gen();
    let change = |up: bool| if up { "a rise" } else { "a drop" };
    let (question, gold, qtype) = if roll < 0.4 {
        let from = rng.gen_range(0..n - 1);
        let to = if rng.gen_bool(0.6) {
            from + 1
        } else {
            rng.gen_range(from + 1..n)
        };
        let up = rng.gen_bool(0.5);
        let answer = up == path_sign(from, to);
        (
            format!(
                "Suppose there is {} in {}, how will it affect {}?",
                change(up),
                p.chain[from],
                p.chain[to]
            ),
            if answer { 0 } else { 1 },
            QType::InParagraph,
        )
    } else if roll < 0.7 {
        let &(cause, up) = p.causes.choose(&mut rng).unwrap();
        let to = rng.gen_range(1..n);
        let answer = up == path_sign(0, to);
        (
            format!("Suppose {cause} happens, how will it affect {}?", p.chain[to]),
            if answer { 0 } else { 1 },
            QType::OutOfParagraph,
        )
    } else {
        let other = &PROCESSES[(pi + rng.gen_range(1..PROCESSES.len())) % PROCESSES.len()];
        let from = p.chain[rng.gen_range(0..n)];
        let target = *other.chain.choose(&mut rng).unwrap();
        (
            format!(
                "Suppose there is {} in {from}, how will it affect {target}?",
                change(rng.gen_bool(0.5))
            ),
            2,
            QType::NoEffect,
        )
    };

    QaExample {
        id,
        entities: Some(entity_spans(&context, p)),
        context,
        question,
        options: OPTIONS.iter().map(|s| s.to_string()).collect(),
        gold,
        qtype,
    }
}

/// Character spans of every chain phrase and the place name, matched
/// case-insensitively, sorted and non-overlapping.
fn entity_spans(context: &str, p: &Process) -> Vec<Span> {
    let lower = context.to_lowercase();
    let mut spans: Vec<Span> = Vec::new();
    let mut phrases: Vec<String> = p.chain.iter().map(|s| s.to_lowercase()).collect();
    phrases.push(p.place.to_lowercase());
    for phrase in &phrases {
        let mut from = 0;
        while let Some(off) = lower[from..].find(phrase.as_str()) {
            let start = from + off;
            let end = start + phrase.len();
            from = end;
            let bounded = lower[..start].chars().last().is_none_or(|c| !c.is_alphanumeric())
                && lower[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            if bounded && !spans.iter().any(|s| start < s.end && s.start < end) {
                spans.push(Span::new(start, end));
            }
        }
    }
    spans.sort_by_key(|s| s.start);
    // Span offsets are byte offsets; the toy text is ASCII so they coincide
    // with character offsets.
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = generate(50, 3, "t");
        assert_eq!(a, generate(50, 3, "t"));
        for ex in &a {
            let n = crate::corpus::split_sentences(&ex.context).len();
            assert!((3..=5).contains(&n), "{} has {n} sentences", ex.id);
            let spans = ex.entities.as_ref().unwrap();
            assert!(!spans.is_empty());
            assert!(spans.windows(2).all(|w| w[0].end <= w[1].start));
        }
    }
}
