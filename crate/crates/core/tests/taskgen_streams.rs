use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use elberto::corpus::{
    build_vocab, load_dataset, spans_to_token_ranges, tag_entities, tokenize_with_offsets, QaExample, SegmentedContext,
};
use elberto::taskgen::{
    builtin_lexicon, generate_stream, parse_task_set, read_streams, write_streams, GenConfig, MaskKind, PairOrder, Task,
};

fn toy() -> Vec<QaExample> {
    load_dataset(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy.jsonl")).unwrap()
}

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn streams_are_reproducible_and_order_independent() {
    let ex = toy();
    let vocab = build_vocab(&ex, 2).unwrap();
    let lex = builtin_lexicon();
    let gen = GenConfig::default();
    let tmp = tempfile::tempdir().unwrap();
    let mut reversed = ex.clone();
    reversed.reverse();
    for (name, data) in [("a", &ex), ("b", &ex), ("c", &reversed)] {
        let (streams, stats) = generate_stream(data, &vocab, &lex, &gen, 11).unwrap();
        write_streams(tmp.path().join(name), &streams, &stats, &gen.tasks).unwrap();
    }
    let a = files(&tmp.path().join("a"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, files(&tmp.path().join("b")));
    assert_eq!(a, files(&tmp.path().join("c")));

    let (streams, _) = generate_stream(&ex, &vocab, &lex, &gen, 11).unwrap();
    assert_eq!(read_streams(tmp.path().join("a")).unwrap(), streams);
    let (other, _) = generate_stream(&ex, &vocab, &lex, &gen, 12).unwrap();
    assert_ne!(other, streams);
}

#[test]
fn disabled_task_has_no_file() {
    let ex = toy();
    let vocab = build_vocab(&ex, 2).unwrap();
    let gen = GenConfig {
        tasks: parse_task_set("jp,bsop,mem,mlm").unwrap(),
        ..GenConfig::default()
    };
    let (streams, stats) = generate_stream(&ex, &vocab, &builtin_lexicon(), &gen, 1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_streams(tmp.path(), &streams, &stats, &gen.tasks).unwrap();
    assert!(!tmp.path().join("crl.jsonl").exists());
    assert!(tmp.path().join("jp.jsonl").exists());
    assert!(streams.values().all(|t| t.crl.is_none()));
    assert!(!stats.tasks.contains_key("crl"));
    for s in stats.tasks.values() {
        assert!(s.emitted <= ex.len() as u64);
        assert_eq!(s.emitted + s.absent.values().sum::<u64>(), ex.len() as u64);
    }
}

/// Every generated instance reconstructs its source and its label can be
/// recovered by comparing against the source.
#[test]
fn labels_are_sound_on_the_toy_corpus() {
    let ex = toy();
    let vocab = build_vocab(&ex, 2).unwrap();
    let all: BTreeSet<Task> = Task::ALL.into_iter().collect();
    let gen = GenConfig {
        tasks: all,
        ..GenConfig::default()
    };
    let (streams, _) = generate_stream(&ex, &vocab, &builtin_lexicon(), &gen, 5).unwrap();
    for e in &ex {
        let t = &streams[&e.id];
        let seg = SegmentedContext::new(&e.id, &e.context, &vocab);
        let source = seg.tokens();
        if let Some(c) = &t.crl {
            let derived: Vec<usize> = (0..2).filter(|&i| c.candidates[i] == source).collect();
            assert_eq!(derived, vec![c.label], "{}", e.id);
        }
        let j = t.jp.as_ref().expect("toy contexts support jigsaw");
        assert_eq!(j.candidates[j.label].concat(), source);
        assert_eq!(j.candidates.len(), 5);
        let b = t.bsop.as_ref().expect("toy contexts have several sentences");
        let (s0, s1) = (&seg.sentences[b.position], &seg.sentences[b.position + 1]);
        let derived = if (&b.pair[0], &b.pair[1]) == (s0, s1) {
            PairOrder::Original
        } else {
            PairOrder::Reversed
        };
        if s0 != s1 {
            assert_eq!(derived, b.label);
        }
        if let Some(m) = &t.mem {
            assert_eq!(m.kind, MaskKind::Mem);
            let tokens = tokenize_with_offsets(&e.context);
            let ranges = spans_to_token_ranges(&tokens, &tag_entities(e));
            for &pos in m.targets.keys() {
                // sequence position p is context token p - 1
                assert!(
                    ranges.iter().any(|&(s, end)| s < pos && pos <= end),
                    "{} pos {pos}",
                    e.id
                );
            }
        }
        if let Some(m) = &t.mlm {
            let restored = m.restored();
            assert_eq!(&restored[1..restored.len() - 1], source.as_slice());
        }
    }
}
