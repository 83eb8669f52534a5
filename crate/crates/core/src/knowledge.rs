//! Frame-semantic external knowledge: frame ingestion and the mapping from
//! event types to frames.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// A frame: definition tokens, frame-element names and lexical units
/// (`word.pos` strings).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: String,
    #[serde(deserialize_with = "tokens_or_text")]
    pub definition: Vec<String>,
    #[serde(default, deserialize_with = "element_list")]
    pub frame_elements: Vec<Vec<String>>,
    pub lexical_units: Vec<String>,
}

impl Frame {
    pub fn validate(&self) -> Result<()> {
        if self.frame_id.is_empty() {
            return Err(Error::Data("frame with empty id".into()));
        }
        if self.definition.is_empty() {
            return Err(Error::Data(format!("frame `{}` has an empty definition", self.frame_id)));
        }
        if self.lexical_units.is_empty() {
            return Err(Error::Data(format!("frame `{}` has no lexical units", self.frame_id)));
        }
        Ok(())
    }

    /// Lexical units with their part-of-speech suffix removed, tokenized.
    pub fn lexical_unit_tokens(&self) -> Vec<Vec<String>> {
        self.lexical_units
            .iter()
            .map(|lu| {
                let lemma = lu.rsplit_once('.').map_or(lu.as_str(), |(w, _)| w);
                let toks = word_tokens(lemma);
                if toks.is_empty() {
                    vec![lemma.to_lowercase()]
                } else {
                    toks
                }
            })
            .collect()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextOrTokens {
    Text(String),
    Tokens(Vec<String>),
}

impl TextOrTokens {
    fn into_tokens(self) -> Vec<String> {
        match self {
            TextOrTokens::Text(s) => word_tokens(&s),
            TextOrTokens::Tokens(t) => t,
        }
    }
}

fn tokens_or_text<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    Ok(TextOrTokens::deserialize(d)?.into_tokens())
}

fn element_list<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<String>>, D::Error> {
    let items = Vec::<TextOrTokens>::deserialize(d)?;
    Ok(items.into_iter().map(TextOrTokens::into_tokens).collect())
}

/// Lowercase word tokens, split on anything that is not alphanumeric and on
/// lower-to-upper camel-case boundaries.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut prev_lower = false;
    for c in text.chars() {
        if !c.is_alphanumeric() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            prev_lower = false;
            continue;
        }
        if c.is_uppercase() && prev_lower && !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
        prev_lower = c.is_lowercase() || c.is_numeric();
        current.extend(c.to_lowercase());
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct FrameStore {
    frames: HashMap<String, Frame>,
    ids: Vec<String>,
}

impl FrameStore {
    pub fn from_frames(frames: impl IntoIterator<Item = Frame>) -> Result<Self> {
        let mut store = Self::default();
        for f in frames {
            store.insert(f)?;
        }
        Ok(store)
    }

    fn insert(&mut self, frame: Frame) -> Result<()> {
        frame.validate()?;
        if self.frames.contains_key(&frame.frame_id) {
            return Err(Error::DuplicateFrameId(frame.frame_id));
        }
        let pos = self.ids.binary_search(&frame.frame_id).unwrap_err();
        self.ids.insert(pos, frame.frame_id.clone());
        self.frames.insert(frame.frame_id.clone(), frame);
        Ok(())
    }

    pub fn get(&self, frame_id: &str) -> Option<&Frame> {
        self.frames.get(frame_id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Frames in frame-id order.
    pub fn iter(&self) -> impl Iterator<Item = &Frame> {
        self.ids.iter().map(move |id| &self.frames[id])
    }
}

pub fn ingest_frames(path: &Path) -> Result<FrameStore> {
    parse_frames(BufReader::new(fs::File::open(path)?))
}

/// One JSON frame per line. `definition` and each frame element may be given
/// as a token array or as plain text.
pub fn parse_frames(reader: impl BufRead) -> Result<FrameStore> {
    let mut store = FrameStore::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: Frame = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match store.insert(frame) {
            Err(Error::Data(message)) => return Err(Error::Parse { line: i + 1, message }),
            other => other?,
        }
    }
    Ok(store)
}

/// `event_type<TAB>frame_id` lines; `#` starts a comment.
pub fn parse_curated_map(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (event_type, frame_id) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `event_type<TAB>frame_id`".into(),
        })?;
        out.insert(event_type.trim().to_string(), frame_id.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Curated,
    Heuristic,
    Fallback,
}

/// Resolves an event type to a frame. A curated entry wins when its frame is
/// present in the store; otherwise the frame whose id and lexical units share
/// the most tokens with the label is used (ties by frame id); otherwise a
/// frame is synthesized from the label.
pub fn map_event_type(
    label: &str,
    store: &FrameStore,
    curated: &BTreeMap<String, String>,
) -> (Frame, Provenance) {
    if let Some(frame) = curated.get(label).and_then(|id| store.get(id)) {
        return (frame.clone(), Provenance::Curated);
    }
    let label_tokens: BTreeSet<String> = word_tokens(label).into_iter().collect();
    let mut best: Option<(usize, &Frame)> = None;
    for frame in store.iter() {
        let score = overlap(&label_tokens, frame);
        // Frames are visited in id order, so strict `>` keeps the
        // lexicographically smallest id among ties.
        if score > 0 && best.is_none_or(|(s, _)| score > s) {
            best = Some((score, frame));
        }
    }
    match best {
        Some((_, frame)) => (frame.clone(), Provenance::Heuristic),
        None => (fallback_frame(label), Provenance::Fallback),
    }
}

/// Number of label tokens found among the frame id and lexical-unit tokens.
pub fn overlap(label_tokens: &BTreeSet<String>, frame: &Frame) -> usize {
    let mut frame_tokens: BTreeSet<String> = word_tokens(&frame.frame_id).into_iter().collect();
    for lu in frame.lexical_unit_tokens() {
        frame_tokens.extend(lu);
    }
    label_tokens.intersection(&frame_tokens).count()
}

/// A frame synthesized from the label alone.
pub fn fallback_frame(label: &str) -> Frame {
    let mut tokens = word_tokens(label);
    if tokens.is_empty() {
        tokens.push("unknown".to_string());
    }
    Frame {
        frame_id: format!("fallback:{label}"),
        lexical_units: tokens.iter().map(|t| format!("{t}.v")).collect(),
        definition: tokens,
        frame_elements: Vec::new(),
    }
}

/// Event type to resolved frame, total over the given labels.
pub type FrameMapping = BTreeMap<String, (Frame, Provenance)>;

pub fn resolve_all<'a>(
    labels: impl IntoIterator<Item = &'a String>,
    store: &FrameStore,
    curated: &BTreeMap<String, String>,
) -> FrameMapping {
    labels
        .into_iter()
        .map(|l| (l.clone(), map_event_type(l, store, curated)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn chatting_line() -> &'static str {
        r#"{"frame_id":"chatting","definition":"A group of people (the Interlocutors or Interlocutor_1 and Interlocutor_2 together) have a conversation. No person is construed as only a speaker or only an addressee.","frame_elements":["Interlocutors","Interlocutor_1","Interlocutor_2"],"lexical_units":["badinage.n","banter.n","chat.v","chit-chat.n","colloquy.n"]}"#
    }

    #[test]
    fn chatting_frame_parses() {
        let store = parse_frames(chatting_line().as_bytes()).unwrap();
        assert_eq!(store.len(), 1);
        let f = store.get("chatting").unwrap();
        assert_eq!(f.lexical_units.len(), 5);
        assert_eq!(
            f.frame_elements,
            vec![
                vec!["interlocutors".to_string()],
                vec!["interlocutor".to_string(), "1".to_string()],
                vec!["interlocutor".to_string(), "2".to_string()],
            ]
        );
        assert_eq!(&f.definition[..4], &["a", "group", "of", "people"]);
        assert_eq!(f.lexical_unit_tokens()[3], vec!["chit", "chat"]);
    }

    #[test]
    fn empty_file_gives_empty_store() {
        assert!(parse_frames("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{}\n{}\n", chatting_line(), chatting_line());
        assert!(matches!(parse_frames(text.as_bytes()), Err(Error::DuplicateFrameId(id)) if id == "chatting"));
    }

    #[test]
    fn malformed_line_reports_line() {
        let text = format!("{}\n{{\"frame_id\":\"x\"}}\n", chatting_line());
        assert!(matches!(parse_frames(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let no_lu = r#"{"frame_id":"x","definition":"d","lexical_units":[]}"#;
        assert!(matches!(parse_frames(no_lu.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn word_tokens_split_punctuation_and_camel_case() {
        assert_eq!(word_tokens("Life.Marry"), vec!["life", "marry"]);
        assert_eq!(word_tokens("Transaction.TransferMoney"), vec!["transaction", "transfer", "money"]);
        assert_eq!(word_tokens("Interlocutor_1"), vec!["interlocutor", "1"]);
        assert!(word_tokens("...").is_empty());
    }

    #[test]
    fn fallback_construction() {
        let f = fallback_frame("Life.Marry");
        assert_eq!(f.definition, vec!["life", "marry"]);
        assert_eq!(f.lexical_units, vec!["life.v", "marry.v"]);
        assert!(f.frame_elements.is_empty());
        assert_eq!(f, fallback_frame("Life.Marry"));
        let empty = fallback_frame("");
        assert_eq!(empty.definition, vec!["unknown"]);
        assert_eq!(empty.lexical_units, vec!["unknown.v"]);
    }

    fn store() -> FrameStore {
        let attack = r#"{"frame_id":"Attack","definition":"An assailant attacks a victim","lexical_units":["attack.v","assault.n"]}"#;
        let text = format!("{}\n{}\n", chatting_line(), attack);
        parse_frames(text.as_bytes()).unwrap()
    }

    #[test]
    fn curated_mapping_wins() {
        let curated = parse_curated_map("# comment\nConflict.Attack\tAttack\n").unwrap();
        let (f, p) = map_event_type("Conflict.Attack", &store(), &curated);
        assert_eq!((f.frame_id.as_str(), p), ("Attack", Provenance::Curated));
    }

    #[test]
    fn heuristic_matches_by_overlap() {
        let curated = BTreeMap::new();
        let store = store();
        let (f, p) = map_event_type("Chat", &store, &curated);
        assert_eq!((f.frame_id.as_str(), p), ("chatting", Provenance::Heuristic));
        // Brute-force the overlap scores: only `chatting` scores above zero.
        let label: BTreeSet<String> = word_tokens("Chat").into_iter().collect();
        let scores: Vec<(String, usize)> = store.iter().map(|f| (f.frame_id.clone(), overlap(&label, f))).collect();
        assert_eq!(scores, vec![("Attack".into(), 0), ("chatting".into(), 1)]);
    }

    #[test]
    fn heuristic_tie_breaks_by_frame_id() {
        let a = r#"{"frame_id":"b_frame","definition":"x","lexical_units":["meet.v"]}"#;
        let b = r#"{"frame_id":"a_frame","definition":"x","lexical_units":["meet.v"]}"#;
        let store = parse_frames(format!("{a}\n{b}\n").as_bytes()).unwrap();
        let (f, _) = map_event_type("Contact.Meet", &store, &BTreeMap::new());
        assert_eq!(f.frame_id, "a_frame");
    }

    #[test]
    fn unmatched_label_falls_back() {
        let (f, p) = map_event_type("Zorble.Event", &store(), &BTreeMap::new());
        assert_eq!(p, Provenance::Fallback);
        assert_eq!(f, fallback_frame("Zorble.Event"));
    }

    #[test]
    fn curated_entry_to_missing_frame_falls_through() {
        let curated = parse_curated_map("Chat\tNoSuchFrame\n").unwrap();
        let (_, p) = map_event_type("Chat", &store(), &curated);
        assert_eq!(p, Provenance::Heuristic);
    }
}
