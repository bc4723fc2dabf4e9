use gazeattn_core::corpus::{
    parse_compression, parse_gaze, parse_pairs, parse_tagged, pos_tag, write_compression, write_gaze, write_pairs,
    write_tagged, PosTag, TaggedSentence,
};
use gazeattn_core::embeddings::{load_embeddings, parse_embeddings, write_embeddings, Vocabulary};
use gazeattn_core::gaze_synth::{GazeRecord, Lexicon};
use gazeattn_core::numeric::{ParamStore, Tensor};
use gazeattn_core::{AttentionTrace, Checkpoint, Error, FlatConfig, Stage, Task};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn words(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 1..max)
}

fn line_of(err: Error) -> usize {
    match err {
        Error::Format { line, .. } => line,
        other => panic!("expected a format error, got {other}"),
    }
}

fn text<F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>>(f: F) -> String {
    let mut buf = Vec::new();
    f(&mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

proptest! {
    #[test]
    fn pairs_round_trip(rows in prop::collection::vec((words(8), words(8)), 0..6)) {
        let pairs: Vec<_> = rows.into_iter().map(|(s, t)| gazeattn_core::SentencePair::new(s, t).unwrap()).collect();
        let t = text(|b| write_pairs(b, &pairs));
        prop_assert_eq!(parse_pairs(&t, "mem").unwrap(), pairs);
    }

    #[test]
    fn compression_round_trip(rows in prop::collection::vec(words(8).prop_flat_map(|w| {
        let n = w.len();
        (Just(w), prop::collection::vec(any::<bool>(), n))
    }), 0..5)) {
        let examples: Vec<_> = rows.into_iter().map(|(t, k)| gazeattn_core::DeletionExample::new(t, k).unwrap()).collect();
        let t = text(|b| write_compression(b, &examples));
        prop_assert_eq!(parse_compression(&t, "mem").unwrap(), examples);
    }

    #[test]
    fn gaze_round_trip(rows in prop::collection::vec(words(6).prop_flat_map(|w| {
        let n = w.len();
        (Just(w), prop::collection::vec(0.0f64..1.0, n))
    }), 1..5)) {
        let records: Vec<GazeRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (tokens, durations))| {
                GazeRecord { sentence_id: format!("s{i}"), reader_id: "r1".into(), tokens, durations, normalized: false }.normalize()
            })
            .collect();
        let t = text(|b| write_gaze(b, &records));
        let back = parse_gaze(&t, "mem").unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(&a.tokens, &b.tokens);
            prop_assert_eq!(&a.sentence_id, &b.sentence_id);
            b.check_normalized().unwrap();
            a.check_normalized().unwrap();
            for (x, y) in a.durations.iter().zip(&b.durations) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tagged_round_trip(sentences in prop::collection::vec(words(7).prop_flat_map(|w| {
        let n = w.len();
        (Just(w), prop::collection::vec(prop::sample::select(PosTag::ALL.to_vec()), n))
    }), 0..4)) {
        let tagged: Vec<TaggedSentence> = sentences.into_iter().map(|(tokens, tags)| TaggedSentence { tokens, tags }).collect();
        let t = text(|b| write_tagged(b, &tagged));
        prop_assert_eq!(parse_tagged(&t, "mem").unwrap(), tagged);
    }

    #[test]
    fn pos_tag_is_total_and_deterministic(tokens in prop::collection::vec("\\PC{0,8}", 0..10)) {
        let a = pos_tag(&tokens);
        prop_assert_eq!(a.tags.len(), tokens.len());
        prop_assert_eq!(a, pos_tag(&tokens));
    }

    #[test]
    fn vocabulary_round_trips(tokens in prop::collection::vec(word(), 0..30)) {
        let vocab = Vocabulary::from_tokens(tokens.iter());
        for i in 0..vocab.len() {
            prop_assert_eq!(vocab.encode(vocab.decode(i).unwrap()), i);
        }
    }

    #[test]
    fn embeddings_round_trip_and_reload(entries in prop::collection::btree_map(word(), prop::collection::vec(-1.0f64..1.0, 3), 1..8), seed in any::<u64>()) {
        let vocab = Vocabulary::from_tokens(entries.keys());
        let rows: Vec<(String, Vec<f64>)> = entries.clone().into_iter().collect();
        let t = text(|b| write_embeddings(b, &rows));
        let a = parse_embeddings(t.as_bytes(), "mem", &vocab, 3, seed).unwrap();
        let b = parse_embeddings(t.as_bytes(), "mem", &vocab, 3, seed).unwrap();
        prop_assert_eq!(&a.matrix, &b.matrix);
        for (tok, values) in &entries {
            prop_assert_eq!(a.row(vocab.get(tok).unwrap()).unwrap(), values.as_slice());
        }
    }
}

#[test]
fn lexicon_file_round_trip() {
    let lex = Lexicon::from_counts([("the", 900u64), ("cat", 12), ("zebra", 1)]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lex.tsv");
    let mut f = std::fs::File::create(&path).unwrap();
    lex.write(&mut f).unwrap();
    drop(f);
    assert_eq!(Lexicon::read(&path).unwrap().sorted(), lex.sorted());
    std::fs::write(&path, "the\t900\ncat twelve\n").unwrap();
    assert_eq!(line_of(Lexicon::read(&path).unwrap_err()), 2);
}

#[test]
fn embedding_file_reload_is_identical() {
    let vocab = Vocabulary::from_tokens(["cat", "dog", "emu"]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vec.txt");
    std::fs::write(&path, "cat 1.0 0.0\nyak 0.5 0.5\n").unwrap();
    let a = load_embeddings(&path, &vocab, 2, 4).unwrap();
    let b = load_embeddings(&path, &vocab, 2, 4).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.row(vocab.get("cat").unwrap()).unwrap(), &[1.0, 0.0]);
    std::fs::write(&path, "cat 1.0 0.0\ndog 1.0\n").unwrap();
    assert_eq!(line_of(load_embeddings(&path, &vocab, 2, 4).unwrap_err()), 2);
}

#[test]
fn malformed_lines_are_reported_by_number() {
    assert_eq!(line_of(parse_pairs("a b\tc d\n\nno tab here\n", "p").unwrap_err()), 3);
    assert_eq!(line_of(parse_pairs("a\tb\nc\t \n", "p").unwrap_err()), 2);
    assert_eq!(line_of(parse_compression("a\t1\nb\t2\n", "c").unwrap_err()), 2);
    assert_eq!(line_of(parse_compression("a\t1\n\nb 1\n", "c").unwrap_err()), 3);
    assert_eq!(
        line_of(parse_gaze("s\tr\t0\ta\t1\ns\tr\tx\tb\t2\n", "g").unwrap_err()),
        2
    );
    assert_eq!(line_of(parse_gaze("s\tr\t0\ta\n", "g").unwrap_err()), 1);
    assert_eq!(
        line_of(parse_gaze("s\tr\t0\ta\t1\ns\tr\t2\tb\t2\n", "g").unwrap_err()),
        2
    );
    assert_eq!(line_of(parse_tagged("a\tNOUN\nb\tWIDGET\n", "t").unwrap_err()), 2);
}

#[test]
fn checkpoint_and_trace_files_round_trip() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::matrix(2, 2, vec![0.1, -2.5, 1e-300, f64::MAX]).unwrap());
    params.insert("b", Tensor::vector(vec![3.0]).with_requires_grad(false));
    let mut config = FlatConfig::default();
    config.set("tsm.hidden_size", "8");
    let mut prov = gazeattn_core::checkpoint::Provenance::new(Stage::Joint, &config, 9);
    prov.task = Some(Task::Sentcomp);
    let ckpt = Checkpoint::new(params, Vocabulary::from_tokens(["a", "b"]), config, prov);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());

    let trace = AttentionTrace {
        task: Some(Task::Paragen),
        probe_tokens: vec!["a".into(), "b".into()],
        epoch_saliency: vec![vec![0.25, 0.75]],
        attention: vec![vec![0.1, 0.9]],
        output_tokens: vec!["x".into()],
        truncated: false,
    };
    let tpath = dir.path().join("t.json");
    trace.save(&tpath).unwrap();
    assert_eq!(AttentionTrace::load(&tpath).unwrap(), trace);
}
