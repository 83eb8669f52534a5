//! Prototype-based exemplar selection and the replay set.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::EventMention;
use crate::error::{Error, Result};
use crate::tensor::squared_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: String,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Arithmetic mean of the embeddings.
pub fn prototype(class: &str, embeddings: &[Vec<f64>]) -> Result<Prototype> {
    let first = embeddings.first().ok_or(Error::EmptyClass)?;
    let mut mean = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: e.len() });
        }
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(Prototype { class: class.to_string(), mean, count: embeddings.len() })
}

/// The `j` samples closest (Euclidean) to `center`, nearest first. Ties keep
/// the order of `samples`.
pub fn select_exemplars(samples: &[(String, Vec<f64>)], center: &[f64], j: usize) -> Vec<String> {
    let mut ranked: Vec<(f64, usize)> = samples
        .iter()
        .enumerate()
        .map(|(i, (_, e))| (squared_distance(e, center), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(j).map(|(_, i)| samples[i].0.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub mention_id: String,
    /// Embedding at selection time; kept for diagnostics only.
    pub embedding: Vec<f64>,
}

/// Retained exemplars per class, in the order classes were learned.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub capacity: usize,
    classes: Vec<(String, Vec<Exemplar>)>,
}

impl ExemplarStore {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, classes: Vec::new() }
    }

    pub fn insert(&mut self, class: &str, exemplars: Vec<Exemplar>) -> Result<()> {
        if self.classes.iter().any(|(c, _)| c == class) {
            return Err(Error::DuplicateClass(class.to_string()));
        }
        let mut exemplars = exemplars;
        exemplars.truncate(self.capacity);
        if exemplars.iter().any(|e| e.embedding.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient("exemplar embedding"));
        }
        self.classes.push((class.to_string(), exemplars));
        Ok(())
    }

    pub fn get(&self, class: &str) -> Option<&[Exemplar]> {
        self.classes.iter().find(|(c, _)| c == class).map(|(_, e)| e.as_slice())
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(c, _)| c.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Exemplar])> {
        self.classes.iter().map(|(c, e)| (c.as_str(), e.as_slice()))
    }

    /// Total number of retained mentions.
    pub fn len(&self) -> usize {
        self.classes.iter().map(|(_, e)| e.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mention_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().flat_map(|(_, e)| e.iter().map(|x| x.mention_id.as_str()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Retained mentions (looked up in `corpus`) followed by the new samples,
/// without repeating a mention id.
pub fn replay_union(
    store: &ExemplarStore,
    corpus: &HashMap<String, EventMention>,
    new_samples: &[EventMention],
) -> Result<Vec<EventMention>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(store.len() + new_samples.len());
    for id in store.mention_ids() {
        let m = corpus.get(id).ok_or_else(|| Error::MissingMention(id.to_string()))?;
        if seen.insert(m.id.clone()) {
            out.push(m.clone());
        }
    }
    for m in new_samples {
        if seen.insert(m.id.clone()) {
            out.push(m.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(id: &str, label: &str) -> EventMention {
        EventMention { id: id.into(), tokens: vec!["x".into()], trigger: (0, 1), label: label.into() }
    }

    #[test]
    fn prototype_cases() {
        assert_eq!(prototype("a", &[vec![1.0, 2.0]]).unwrap().mean, vec![1.0, 2.0]);
        let p = prototype("a", &[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!((p.mean, p.count), (vec![1.0, 1.0], 2));
        assert!(matches!(prototype("a", &[]), Err(Error::EmptyClass)));
    }

    #[test]
    fn selection_edge_cases() {
        let samples = vec![
            ("far".to_string(), vec![5.0]),
            ("near".to_string(), vec![1.0]),
            ("mid".to_string(), vec![-2.0]),
        ];
        assert!(select_exemplars(&samples, &[0.0], 0).is_empty());
        assert_eq!(select_exemplars(&samples, &[0.0], 3), vec!["near", "mid", "far"]);
        assert_eq!(select_exemplars(&samples, &[0.0], 10).len(), 3);
        // Equal distances keep file order.
        let tied = vec![("b".to_string(), vec![1.0]), ("a".to_string(), vec![-1.0])];
        assert_eq!(select_exemplars(&tied, &[0.0], 1), vec!["b"]);
    }

    #[test]
    fn store_rejects_duplicates_and_truncates() {
        let mut store = ExemplarStore::new(1);
        let ex = |id: &str| Exemplar { mention_id: id.into(), embedding: vec![0.0] };
        store.insert("A", vec![ex("1"), ex("2")]).unwrap();
        assert_eq!(store.len(), 1);
        assert!(matches!(store.insert("A", vec![]), Err(Error::DuplicateClass(_))));
    }

    #[test]
    fn replay_union_counts() {
        let corpus: HashMap<String, EventMention> =
            (0..4).map(|i| (format!("old{i}"), m(&format!("old{i}"), &format!("C{i}")))).collect();
        let new: Vec<EventMention> = (0..25).map(|i| m(&format!("new{i}"), "N")).collect();
        assert_eq!(replay_union(&ExemplarStore::new(1), &corpus, &new).unwrap().len(), 25);
        let mut store = ExemplarStore::new(1);
        for i in 0..4 {
            store
                .insert(&format!("C{i}"), vec![Exemplar { mention_id: format!("old{i}"), embedding: vec![0.0] }])
                .unwrap();
        }
        let n = replay_union(&store, &corpus, &new).unwrap();
        assert_eq!(n.len(), 29);
        assert_eq!(n[0].id, "old0");
        let mut missing = store.clone();
        missing.insert("C9", vec![Exemplar { mention_id: "gone".into(), embedding: vec![0.0] }]).unwrap();
        assert!(matches!(replay_union(&missing, &corpus, &new), Err(Error::MissingMention(id)) if id == "gone"));
    }
}
