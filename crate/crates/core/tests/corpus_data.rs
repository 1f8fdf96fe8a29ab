use std::path::PathBuf;

use elberto::corpus::{build_vocab, heuristic_entities, load_dataset, split_sentences, tokenize, Vocabulary};

fn toy() -> Vec<elberto::corpus::QaExample> {
    load_dataset(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy.jsonl")).unwrap()
}

#[test]
fn vocab_dump_is_reproducible() {
    let a = build_vocab(&toy(), 2).unwrap().dump();
    let b = build_vocab(&toy(), 2).unwrap().dump();
    assert_eq!(a, b);
    let reparsed = Vocabulary::parse_dump(&a).unwrap();
    assert_eq!(reparsed.dump(), a);
}

#[test]
fn seven_sentence_process_paragraph() {
    let context = "Water evaporates from the ocean. The water vapor rises into the air. \
                   The vapor cools and condenses into droplets. The droplets form clouds. \
                   The clouds grow heavy. Rain falls from the clouds. The rain collects in rivers.";
    let sents = split_sentences(context);
    assert_eq!(sents.len(), 7);
    assert!(sents.iter().all(|s| !s.trim().is_empty()));
    assert_eq!(
        sents.join(" "),
        context.split_whitespace().collect::<Vec<_>>().join(" ")
    );
}

#[test]
fn tokenizer_splits_slash() {
    assert_eq!(tokenize("more/less"), ["more", "/", "less"]);
}

#[test]
fn heuristic_tagger_tracks_annotations() {
    let ex = toy();
    let sample = &ex[..100];
    let annotated: usize = sample.iter().map(|e| e.entities.as_ref().unwrap().len()).sum();
    let heuristic: usize = sample.iter().map(|e| heuristic_entities(&e.context).len()).sum();
    let (a, h) = (annotated as f64 / 100.0, heuristic as f64 / 100.0);
    assert!(
        (h - a).abs() <= 0.5 * a,
        "heuristic mean {h:.2} vs annotated mean {a:.2}"
    );
    for e in sample {
        let spans = heuristic_entities(&e.context);
        assert!(spans.windows(2).all(|w| w[0].end <= w[1].start));
        assert!(spans.iter().all(|s| s.end <= e.context.chars().count()));
    }
}
