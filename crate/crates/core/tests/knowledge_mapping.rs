mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use fsied::knowledge::{
    fallback_frame, ingest_frames, map_event_type, parse_frames, resolve_all, word_tokens, Frame, FrameStore,
    Provenance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame_line(id: &str, lus: &[&str]) -> String {
    let lus: Vec<String> = lus.iter().map(|l| format!("\"{l}\"")).collect();
    format!(
        r#"{{"frame_id":"{id}","definition":"Something about {id}.","frame_elements":["Agent"],"lexical_units":[{}]}}"#,
        lus.join(",")
    )
}

#[test]
fn store_size_equals_unique_ids_in_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut file = tempfile::NamedTempFile::new().unwrap();
    let mut lines = 0;
    for i in 0..500 {
        if rng.gen_bool(0.1) {
            writeln!(file).unwrap();
            continue;
        }
        writeln!(file, "{}", frame_line(&format!("frame_{i}"), &["go.v"])).unwrap();
        lines += 1;
    }
    file.flush().unwrap();
    let store = ingest_frames(file.path()).unwrap();
    assert_eq!(store.len(), lines);
}

/// Label tokens shared with the frame id and lexical-unit lemmas.
fn overlap_oracle(label: &str, frame: &Frame) -> usize {
    let label: BTreeSet<String> = word_tokens(label).into_iter().collect();
    let mut vocab: BTreeSet<String> = word_tokens(&frame.frame_id).into_iter().collect();
    for lu in &frame.lexical_units {
        let lemma = lu.rsplit_once('.').map_or(lu.as_str(), |(l, _)| l);
        vocab.extend(word_tokens(lemma));
    }
    label.intersection(&vocab).count()
}

#[test]
fn chat_maps_to_chatting_by_brute_force_overlap() {
    let text = [
        frame_line("chatting", &["badinage.n", "banter.n", "chat.v", "chit-chat.n", "colloquy.n"]),
        frame_line("Attack", &["attack.v", "assault.n"]),
        frame_line("Being_born", &["born.a"]),
        frame_line("Commerce_buy", &["buy.v", "purchase.v"]),
    ]
    .join("\n");
    let store = parse_frames(text.as_bytes()).unwrap();
    let (frame, provenance) = map_event_type("Chat", &store, &BTreeMap::new());
    let scores: Vec<(usize, &str)> = store.iter().map(|f| (overlap_oracle("Chat", f), f.frame_id.as_str())).collect();
    let best = scores.iter().filter(|(s, _)| *s > 0).max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(a.1))).unwrap();
    assert_eq!(frame.frame_id, best.1);
    assert_eq!(frame.frame_id, "chatting");
    assert_eq!(provenance, Provenance::Heuristic);

    let curated = BTreeMap::from([("Conflict.Attack".to_string(), "Attack".to_string())]);
    assert_eq!(map_event_type("Conflict.Attack", &store, &curated).1, Provenance::Curated);
    let (fallback, p) = map_event_type("Zorble.Event", &store, &curated);
    assert_eq!(p, Provenance::Fallback);
    assert_eq!(fallback, fallback_frame("Zorble.Event"));
}

#[test]
fn mapping_is_total_and_deterministic() {
    let desk = common::five_way(2);
    for r in &desk.manifest.rounds {
        for c in &r.classes {
            assert!(desk.frames.contains_key(c));
        }
    }
    let labels: Vec<String> = (0..50).map(|i| format!("Type{i}.Thing")).collect();
    let store = FrameStore::from_frames(desk.frames.values().cloned()).unwrap();
    let a = resolve_all(&labels, &store, &BTreeMap::new());
    let b = resolve_all(&labels, &store, &BTreeMap::new());
    assert_eq!(a, b);
    assert_eq!(a.len(), labels.len());
}

#[test]
fn fallback_examples() {
    let f = fallback_frame("Life.Marry");
    assert_eq!(f.definition, vec!["life", "marry"]);
    assert_eq!(f.lexical_units, vec!["life.v", "marry.v"]);
    assert_eq!(fallback_frame("").definition, vec!["unknown"]);
    assert_eq!(fallback_frame("Life.Marry"), f);
}
