//! Documents, mentions, candidate sets and the embedding store, with their
//! on-disk formats.
//!
//! A dataset directory holds:
//!
//! | file                 | format                                             |
//! |----------------------|----------------------------------------------------|
//! | `corpus.jsonl`       | one [`Document`] per line (JSON)                   |
//! | `words.vec`          | `word v1 v2 … vd` per line                         |
//! | `entities.vec`       | `entity v1 v2 … vd` per line                       |
//! | `surfaces.tsv`       | `entity<TAB>word word …` per line                  |
//! | `kg.tsv`             | `source<TAB>target` per line (directed edge)       |
//! | `mention_types.vec`  | optional, `mention v1 … vk` per line               |
//! | `entity_types.vec`   | optional, `entity v1 … vk` per line                |
//!
//! Mention context windows are not stored; they are rebuilt from the
//! document words with a configurable radius when the corpus is loaded.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CONTEXT_RADIUS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntity {
    pub entity: String,
    pub prior: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mention {
    pub id: String,
    /// Token span `[start, end)` into the document words.
    pub start: usize,
    pub end: usize,
    /// Index of the mention in the document's mention list.
    pub position: usize,
    /// Up to `radius` words before the mention followed by up to `radius` after it.
    pub context_window: Vec<String>,
    /// Number of leading `context_window` entries that precede the mention.
    pub context_split: usize,
    pub candidates: Vec<CandidateEntity>,
    pub gold: String,
}

impl Mention {
    pub fn gold_index(&self) -> Option<usize> {
        self.candidates.iter().position(|c| c.entity == self.gold)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub words: Vec<String>,
    pub mentions: Vec<Mention>,
}

impl Document {
    pub fn surface(&self, m: &Mention) -> &[String] {
        &self.words[m.start..m.end]
    }
}

#[derive(Serialize, Deserialize)]
struct MentionRecord {
    id: String,
    start: usize,
    end: usize,
    candidates: Vec<CandidateEntity>,
    gold: String,
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    id: String,
    words: Vec<String>,
    mentions: Vec<MentionRecord>,
}

/// Builds a validated document; `mentions` are `(id, start, end, candidates, gold)`.
pub fn build_document(
    id: String,
    words: Vec<String>,
    mentions: Vec<(String, usize, usize, Vec<CandidateEntity>, String)>,
    radius: usize,
) -> Result<Document> {
    if mentions.is_empty() {
        return Err(Error::invalid(format!("document `{id}` has no mentions")));
    }
    let mut out = Vec::with_capacity(mentions.len());
    let mut last_start: Option<usize> = None;
    for (position, (mid, start, end, candidates, gold)) in mentions.into_iter().enumerate() {
        if start >= end || end > words.len() {
            return Err(Error::invalid(format!(
                "mention `{mid}` span [{start}, {end}) is outside the {} document words",
                words.len()
            )));
        }
        if last_start.is_some_and(|s| start <= s) {
            return Err(Error::invalid(format!("mention `{mid}` is out of text order")));
        }
        last_start = Some(start);
        if candidates.is_empty() {
            return Err(Error::invalid(format!("mention `{mid}` has no candidates")));
        }
        if let Some(c) = candidates.iter().find(|c| !(0.0..=1.0).contains(&c.prior)) {
            return Err(Error::invalid(format!(
                "mention `{mid}` candidate `{}` has prior {} outside [0, 1]",
                c.entity, c.prior
            )));
        }
        let left_start = start.saturating_sub(radius);
        let right_end = (end + radius).min(words.len());
        let mut context_window: Vec<String> = words[left_start..start].to_vec();
        let context_split = context_window.len();
        context_window.extend_from_slice(&words[end..right_end]);
        out.push(Mention {
            id: mid,
            start,
            end,
            position,
            context_window,
            context_split,
            candidates,
            gold,
        });
    }
    Ok(Document {
        id,
        words,
        mentions: out,
    })
}

/// Reads `corpus.jsonl`-style documents. Errors name the offending line.
pub fn load_documents(path: &Path, radius: usize) -> Result<Vec<Document>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: lineno,
            msg: e.to_string(),
        })?;
        let mentions = rec
            .mentions
            .into_iter()
            .map(|m| (m.id, m.start, m.end, m.candidates, m.gold))
            .collect();
        let doc = build_document(rec.id, rec.words, mentions, radius).map_err(|e| Error::Malformed {
            line: lineno,
            msg: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        let rec = DocumentRecord {
            id: d.id.clone(),
            words: d.words.clone(),
            mentions: d
                .mentions
                .iter()
                .map(|m| MentionRecord {
                    id: m.id.clone(),
                    start: m.start,
                    end: m.end,
                    candidates: m.candidates.clone(),
                    gold: m.gold.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of mentions whose candidate set contains the gold entity.
pub fn gold_recall(docs: &[Document]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for m in docs.iter().flat_map(|d| &d.mentions) {
        total += 1;
        if m.gold_index().is_some() {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Fixed-width vectors addressed by string id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VectorTable {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Inserts or replaces a vector.
    pub fn insert(&mut self, id: impl Into<String>, v: &[f64]) -> Result<usize> {
        if v.len() != self.dim {
            return Err(Error::Shape {
                op: "vector table insert",
                left: (1, self.dim),
                right: (1, v.len()),
            });
        }
        let id = id.into();
        if let Some(&i) = self.index.get(&id) {
            self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(v);
            return Ok(i);
        }
        let i = self.ids.len();
        self.index.insert(id.clone(), i);
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(i)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.row(i))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut table: Option<VectorTable> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(id) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| Error::Malformed {
                        line: i + 1,
                        msg: format!("{}: {e}", path.display()),
                    })
                })
                .collect::<Result<_>>()?;
            let t = table.get_or_insert_with(|| VectorTable::new(values.len()));
            t.insert(id, &values).map_err(|e| Error::Malformed {
                line: i + 1,
                msg: format!("{}: {e}", path.display()),
            })?;
        }
        Ok(table.unwrap_or_default())
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (i, id) in self.ids.iter().enumerate() {
            write!(w, "{id}")?;
            for v in self.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Word and entity vectors, entity surface forms, knowledge-graph edges and
/// optional type vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    pub words: VectorTable,
    pub entities: VectorTable,
    pub entity_surface: BTreeMap<String, Vec<String>>,
    pub kg: BTreeMap<String, BTreeSet<String>>,
    pub mention_types: BTreeMap<String, Vec<f64>>,
    pub entity_types: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            words: VectorTable::new(dim),
            entities: VectorTable::new(dim),
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.entities.dim()
    }

    pub fn add_edge(&mut self, from: &str, to: &str) {
        self.kg.entry(from.to_string()).or_default().insert(to.to_string());
    }

    /// Mention/entity type compatibility; 0 when either vector is absent.
    pub fn type_score(&self, mention: &str, entity: &str) -> f64 {
        match (self.mention_types.get(mention), self.entity_types.get(entity)) {
            (Some(a), Some(b)) if a.len() == b.len() => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            _ => 0.0,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let words = VectorTable::load(&dir.join("words.vec"))?;
        let entities = VectorTable::load(&dir.join("entities.vec"))?;
        if !words.is_empty() && !entities.is_empty() && words.dim() != entities.dim() {
            return Err(Error::invalid(format!(
                "word dimension {} differs from entity dimension {}",
                words.dim(),
                entities.dim()
            )));
        }
        let mut store = EmbeddingStore {
            words,
            entities,
            ..Default::default()
        };
        for_each_line(&dir.join("surfaces.tsv"), |line, _| {
            let (e, ws) = line.split_once('\t').unwrap_or((line, ""));
            store
                .entity_surface
                .insert(e.to_string(), ws.split_whitespace().map(str::to_string).collect());
            Ok(())
        })?;
        for_each_line(&dir.join("kg.tsv"), |line, lineno| {
            let (a, b) = line.split_once('\t').ok_or_else(|| Error::Malformed {
                line: lineno,
                msg: "kg.tsv: expected `source<TAB>target`".into(),
            })?;
            store.add_edge(a, b);
            Ok(())
        })?;
        for (file, map) in [
            ("mention_types.vec", &mut store.mention_types),
            ("entity_types.vec", &mut store.entity_types),
        ] {
            let path = dir.join(file);
            if path.exists() {
                let t = VectorTable::load(&path)?;
                for (i, id) in t.ids().iter().enumerate() {
                    map.insert(id.clone(), t.row(i).to_vec());
                }
            }
        }
        Ok(store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.words.save(&dir.join("words.vec"))?;
        self.entities.save(&dir.join("entities.vec"))?;
        let mut w = BufWriter::new(File::create(dir.join("surfaces.tsv"))?);
        for (e, ws) in &self.entity_surface {
            writeln!(w, "{e}\t{}", ws.join(" "))?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("kg.tsv"))?);
        for (a, targets) in &self.kg {
            for b in targets {
                writeln!(w, "{a}\t{b}")?;
            }
        }
        w.flush()?;
        for (file, map) in [
            ("mention_types.vec", &self.mention_types),
            ("entity_types.vec", &self.entity_types),
        ] {
            if map.is_empty() {
                continue;
            }
            let dim = map.values().next().map(Vec::len).unwrap_or(0);
            let mut t = VectorTable::new(dim);
            for (id, v) in map {
                t.insert(id.clone(), v)?;
            }
            t.save(&dir.join(file))?;
        }
        Ok(())
    }
}

fn for_each_line(path: &Path, mut f: impl FnMut(&str, usize) -> Result<()>) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        f(&line, i + 1)?;
    }
    Ok(())
}

/// Documents plus the store they reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub documents: Vec<Document>,
    pub store: EmbeddingStore,
}

impl Dataset {
    pub fn new(documents: Vec<Document>, store: EmbeddingStore) -> Result<Self> {
        let ds = Self { documents, store };
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(dir: &Path, radius: usize) -> Result<Self> {
        let documents = load_documents(&dir.join("corpus.jsonl"), radius)?;
        let store = EmbeddingStore::load(dir)?;
        Self::new(documents, store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        save_documents(&dir.join("corpus.jsonl"), &self.documents)
    }

    /// Every referenced word and entity must have a vector.
    pub fn validate(&self) -> Result<()> {
        let s = &self.store;
        for d in &self.documents {
            if let Some(w) = d.words.iter().find(|w| s.words.index_of(w).is_none()) {
                return Err(Error::UnknownId {
                    kind: "word",
                    id: w.clone(),
                });
            }
            for m in &d.mentions {
                let missing = m
                    .candidates
                    .iter()
                    .map(|c| &c.entity)
                    .chain(std::iter::once(&m.gold))
                    .find(|e| s.entities.index_of(e).is_none());
                if let Some(e) = missing {
                    return Err(Error::UnknownId {
                        kind: "entity",
                        id: e.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn prepare(&self) -> Result<Vec<PreparedDoc>> {
        self.documents
            .iter()
            .map(|d| PreparedDoc::new(d, &self.store))
            .collect()
    }
}

/// A mention resolved to table indices.
#[derive(Clone, Debug)]
pub struct PreparedMention {
    pub id: String,
    pub context: Vec<usize>,
    pub context_split: usize,
    pub surface: Vec<usize>,
    pub candidates: Vec<usize>,
    pub priors: Vec<f64>,
    pub type_scores: Vec<f64>,
    pub gold_entity: usize,
    pub gold_index: Option<usize>,
}

impl PreparedMention {
    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }
}

#[derive(Clone, Debug)]
pub struct PreparedDoc {
    pub id: String,
    pub mentions: Vec<PreparedMention>,
}

impl PreparedDoc {
    pub fn new(doc: &Document, store: &EmbeddingStore) -> Result<Self> {
        let word = |w: &String| {
            store.words.index_of(w).ok_or_else(|| Error::UnknownId {
                kind: "word",
                id: w.clone(),
            })
        };
        let entity = |e: &String| {
            store.entities.index_of(e).ok_or_else(|| Error::UnknownId {
                kind: "entity",
                id: e.clone(),
            })
        };
        let mentions = doc
            .mentions
            .iter()
            .map(|m| {
                Ok(PreparedMention {
                    id: m.id.clone(),
                    context: m.context_window.iter().map(word).collect::<Result<_>>()?,
                    context_split: m.context_split,
                    surface: doc.surface(m).iter().map(word).collect::<Result<_>>()?,
                    candidates: m.candidates.iter().map(|c| entity(&c.entity)).collect::<Result<_>>()?,
                    priors: m.candidates.iter().map(|c| c.prior).collect(),
                    type_scores: m
                        .candidates
                        .iter()
                        .map(|c| store.type_score(&m.id, &c.entity))
                        .collect(),
                    gold_entity: entity(&m.gold)?,
                    gold_index: m.gold_index(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            id: doc.id.clone(),
            mentions,
        })
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(e: &str, p: f64) -> CandidateEntity {
        CandidateEntity {
            entity: e.into(),
            prior: p,
        }
    }

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn context_window_excludes_surface() {
        let doc = build_document(
            "d".into(),
            words(10),
            vec![("m".into(), 4, 6, vec![cand("A", 1.0)], "A".into())],
            2,
        )
        .unwrap();
        let m = &doc.mentions[0];
        assert_eq!(m.context_window, vec!["w2", "w3", "w6", "w7"]);
        assert_eq!(m.context_split, 2);
        assert_eq!(doc.surface(m), &["w4".to_string(), "w5".to_string()]);
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(build_document("d".into(), words(3), vec![], 2).is_err());
        let bad_prior = vec![("m".into(), 0, 1, vec![cand("A", 1.5)], "A".into())];
        assert!(build_document("d".into(), words(3), bad_prior, 2).is_err());
        let unordered = vec![
            ("a".into(), 2, 3, vec![cand("A", 1.0)], "A".into()),
            ("b".into(), 1, 2, vec![cand("A", 1.0)], "A".into()),
        ];
        assert!(build_document("d".into(), words(3), unordered, 2).is_err());
        let no_cands = vec![("m".into(), 0, 1, vec![], "A".into())];
        assert!(build_document("d".into(), words(3), no_cands, 2).is_err());
    }

    #[test]
    fn gold_recall_hand_count() {
        let mentions = vec![
            ("a".into(), 0, 1, vec![cand("A", 0.5), cand("B", 0.5)], "A".into()),
            ("b".into(), 1, 2, vec![cand("B", 1.0)], "B".into()),
            ("c".into(), 2, 3, vec![cand("C", 1.0)], "X".into()),
            ("d".into(), 3, 4, vec![cand("D", 1.0)], "D".into()),
        ];
        let doc = build_document("d".into(), words(4), mentions, 1).unwrap();
        assert_eq!(gold_recall(&[doc]), 0.75);
    }

    #[test]
    fn empty_mention_record_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"words\":[\"x\"],\"mentions\":[{\"id\":\"m\",\"start\":0,\"end\":1,\"candidates\":[{\"entity\":\"E\",\"prior\":1.0}],\"gold\":\"E\"}]}\n{\"id\":\"b\",\"words\":[\"x\"],\"mentions\":[]}\n",
        )
        .unwrap();
        match load_documents(&path, 2) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a line error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_entity_is_rejected() {
        let mut store = EmbeddingStore::new(2);
        store.words.insert("w0", &[1.0, 0.0]).unwrap();
        let doc = build_document(
            "d".into(),
            words(1),
            vec![("m".into(), 0, 1, vec![cand("A", 1.0)], "A".into())],
            1,
        )
        .unwrap();
        assert!(matches!(
            Dataset::new(vec![doc], store),
            Err(Error::UnknownId { kind: "entity", .. })
        ));
    }

    #[test]
    fn type_score_defaults_to_zero() {
        let mut store = EmbeddingStore::new(2);
        assert_eq!(store.type_score("m", "e"), 0.0);
        store.mention_types.insert("m".into(), vec![1.0, 2.0]);
        store.entity_types.insert("e".into(), vec![3.0, 0.5]);
        assert_eq!(store.type_score("m", "e"), 4.0);
    }
}
