//! Triple store: parsing, indexing, hop expansion and multi-clue retrieval.
//!
//! Facts are stored once in forward form. Retrieval emits every matched
//! fact in both orientations; the answer to an oriented fact is always its
//! first term, so choosing between `(cat, RelatedTo, tiger)` and its
//! reversal `(tiger, RelatedTo, cat)` is choosing between the answers `cat`
//! and `tiger`.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Forward,
    Reversed,
}

impl Orientation {
    pub fn flipped(self) -> Self {
        match self {
            Orientation::Forward => Orientation::Reversed,
            Orientation::Reversed => Orientation::Forward,
        }
    }
}

/// One directed fact together with the orientation it is currently read in.
///
/// `subject` is always the first term as read, so for a reversed fact it
/// holds the stored object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub orientation: Orientation,
}

impl FactTriplet {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        FactTriplet {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            orientation: Orientation::Forward,
        }
    }

    pub fn reversed(&self) -> Self {
        FactTriplet {
            subject: self.object.clone(),
            relation: self.relation.clone(),
            object: self.subject.clone(),
            orientation: self.orientation.flipped(),
        }
    }

    /// The same fact read in forward orientation.
    pub fn to_forward(&self) -> Self {
        match self.orientation {
            Orientation::Forward => self.clone(),
            Orientation::Reversed => self.reversed(),
        }
    }

    /// The answer an oriented fact stands for: its first term.
    pub fn answer(&self) -> &str {
        &self.subject
    }

    /// Words of "subject relation object" in reading order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.subject
            .split(' ')
            .chain(self.relation.split(' '))
            .chain(self.object.split(' '))
            .filter(|w| !w.is_empty())
    }
}

impl fmt::Display for FactTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)?;
        if self.orientation == Orientation::Reversed {
            write!(f, " [rev]")?;
        }
        Ok(())
    }
}

/// Free-function form of [`FactTriplet::answer`].
pub fn answer_of(fact: &FactTriplet) -> &str {
    fact.answer()
}

/// Term normalization: trim, collapse whitespace runs, optionally lowercase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizer {
    pub case_fold: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer { case_fold: true }
    }
}

impl Normalizer {
    pub fn apply(&self, term: &str) -> String {
        let joined = term.split_whitespace().collect::<Vec<_>>().join(" ");
        if self.case_fold {
            joined.to_lowercase()
        } else {
            joined
        }
    }
}

/// Parses `subject<TAB>relation<TAB>object`. `line_no` is 1-based and only
/// used in error messages.
pub fn parse_fact_line(line: &str, line_no: usize, norm: &Normalizer) -> Result<FactTriplet> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
        });
    }
    let terms: Vec<String> = fields.iter().map(|f| norm.apply(f)).collect();
    if let Some(pos) = terms.iter().position(String::is_empty) {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("field {} is empty", pos + 1),
        });
    }
    let [s, r, o]: [String; 3] = terms.try_into().expect("three fields");
    Ok(FactTriplet::new(s, r, o))
}

/// Parses a whole KB file body, skipping blank lines and `#` comments.
pub fn parse_facts(text: &str, norm: &Normalizer) -> Result<Vec<FactTriplet>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| parse_fact_line(l, i + 1, norm))
        .collect()
}

pub type EntityId = usize;
pub type RelationId = usize;
pub type FactId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fact {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

/// A stored fact read in one orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OrientedFact {
    pub fact: FactId,
    pub orientation: Orientation,
}

impl OrientedFact {
    pub fn forward(fact: FactId) -> Self {
        OrientedFact {
            fact,
            orientation: Orientation::Forward,
        }
    }

    pub fn reversed(self) -> Self {
        OrientedFact {
            fact: self.fact,
            orientation: self.orientation.flipped(),
        }
    }

    /// Dense index in `0..2 * kb.len()`.
    pub fn code(self) -> usize {
        2 * self.fact + usize::from(self.orientation == Orientation::Reversed)
    }

    pub fn from_code(code: usize) -> Self {
        OrientedFact {
            fact: code / 2,
            orientation: if code.is_multiple_of(2) {
                Orientation::Forward
            } else {
                Orientation::Reversed
            },
        }
    }
}

/// How clue entities are expanded over the fact graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HopMode {
    /// Follow edges in both directions.
    #[default]
    Undirected,
    /// Follow only subject-to-object edges.
    Directed,
}

/// Indexed, deduplicated fact store. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    normalizer: Normalizer,
    entities: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
    facts: Vec<Fact>,
    entity_index: Vec<Vec<FactId>>,
    relation_index: Vec<Vec<FactId>>,
    neighbors: Vec<Vec<EntityId>>,
    successors: Vec<Vec<EntityId>>,
    duplicates: usize,
}

impl KnowledgeBase {
    /// Deduplicates and indexes `facts`. Terms are assumed normalized.
    /// Entity and relation ids follow lexicographic order of their names;
    /// facts keep the order of first occurrence.
    pub fn build(facts: &[FactTriplet], normalizer: Normalizer) -> Self {
        let entities: Vec<String> = facts
            .iter()
            .flat_map(|f| [f.subject.clone(), f.object.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let relations: Vec<String> = facts
            .iter()
            .map(|f| f.relation.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let entity_ids: HashMap<_, _> = entities.iter().cloned().enumerate().map(|(i, e)| (e, i)).collect();
        let relation_ids: HashMap<_, _> = relations.iter().cloned().enumerate().map(|(i, r)| (r, i)).collect();

        let mut seen = std::collections::HashSet::new();
        let mut stored = Vec::with_capacity(facts.len());
        let mut duplicates = 0;
        for f in facts {
            let f = f.to_forward();
            let fact = Fact {
                subject: entity_ids[&f.subject],
                relation: relation_ids[&f.relation],
                object: entity_ids[&f.object],
            };
            if seen.insert(fact) {
                stored.push(fact);
            } else {
                duplicates += 1;
            }
        }

        let mut kb = KnowledgeBase {
            normalizer,
            entity_index: Vec::new(),
            relation_index: Vec::new(),
            neighbors: Vec::new(),
            successors: Vec::new(),
            entities,
            entity_ids,
            relations,
            relation_ids,
            facts: stored,
            duplicates,
        };
        kb.rebuild_indexes();
        kb
    }

    fn rebuild_indexes(&mut self) {
        let (entity_index, relation_index, neighbors, successors) =
            Self::compute_indexes(&self.facts, self.entities.len(), self.relations.len());
        self.entity_index = entity_index;
        self.relation_index = relation_index;
        self.neighbors = neighbors;
        self.successors = successors;
    }

    #[allow(clippy::type_complexity)]
    fn compute_indexes(
        facts: &[Fact],
        n_entities: usize,
        n_relations: usize,
    ) -> (Vec<Vec<FactId>>, Vec<Vec<FactId>>, Vec<Vec<EntityId>>, Vec<Vec<EntityId>>) {
        let mut entity_index = vec![Vec::new(); n_entities];
        let mut relation_index = vec![Vec::new(); n_relations];
        let mut neighbors = vec![BTreeSet::new(); n_entities];
        let mut successors = vec![BTreeSet::new(); n_entities];
        for (id, f) in facts.iter().enumerate() {
            entity_index[f.subject].push(id);
            if f.object != f.subject {
                entity_index[f.object].push(id);
            }
            relation_index[f.relation].push(id);
            neighbors[f.subject].insert(f.object);
            neighbors[f.object].insert(f.subject);
            successors[f.subject].insert(f.object);
        }
        let flat = |v: Vec<BTreeSet<EntityId>>| v.into_iter().map(|s| s.into_iter().collect()).collect();
        (entity_index, relation_index, flat(neighbors), flat(successors))
    }

    /// Recomputes every index from the fact list and compares.
    pub fn indexes_consistent(&self) -> bool {
        let (e, r, n, s) = Self::compute_indexes(&self.facts, self.entities.len(), self.relations.len());
        e == self.entity_index && r == self.relation_index && n == self.neighbors && s == self.successors
    }

    pub fn from_tsv(text: &str, normalizer: Normalizer) -> Result<Self> {
        Ok(Self::build(&parse_facts(text, &normalizer)?, normalizer))
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id]
    }

    /// Facts incident to an entity (as subject or object).
    pub fn facts_of_entity(&self, id: EntityId) -> &[FactId] {
        &self.entity_index[id]
    }

    pub fn facts_of_relation(&self, id: RelationId) -> &[FactId] {
        &self.relation_index[id]
    }

    pub fn neighbors(&self, id: EntityId) -> &[EntityId] {
        &self.neighbors[id]
    }

    pub fn triplet(&self, id: FactId) -> FactTriplet {
        let f = self.facts[id];
        FactTriplet::new(
            self.entities[f.subject].clone(),
            self.relations[f.relation].clone(),
            self.entities[f.object].clone(),
        )
    }

    pub fn oriented_triplet(&self, of: OrientedFact) -> FactTriplet {
        let t = self.triplet(of.fact);
        match of.orientation {
            Orientation::Forward => t,
            Orientation::Reversed => t.reversed(),
        }
    }

    /// First term of an oriented fact.
    pub fn answer_entity(&self, of: OrientedFact) -> EntityId {
        let f = self.facts[of.fact];
        match of.orientation {
            Orientation::Forward => f.subject,
            Orientation::Reversed => f.object,
        }
    }

    /// Looks up a triplet in its stored (forward) form.
    pub fn find(&self, t: &FactTriplet) -> Option<OrientedFact> {
        let fwd = t.to_forward();
        let s = self.entity_id(&fwd.subject)?;
        let r = self.relation_id(&fwd.relation)?;
        let o = self.entity_id(&fwd.object)?;
        let id = self.entity_index[s]
            .iter()
            .copied()
            .find(|&id| self.facts[id] == Fact { subject: s, relation: r, object: o })?;
        Some(OrientedFact {
            fact: id,
            orientation: t.orientation,
        })
    }

    /// Entities reachable from `seeds` within `hops` steps, seeds included.
    /// Unknown seed names are ignored.
    pub fn expand_entities(&self, seeds: &[EntityId], hops: usize, mode: HopMode) -> BTreeSet<EntityId> {
        let adjacency = match mode {
            HopMode::Undirected => &self.neighbors,
            HopMode::Directed => &self.successors,
        };
        let mut seen: BTreeSet<EntityId> = seeds.iter().copied().collect();
        let mut queue: VecDeque<(EntityId, usize)> = seen.iter().map(|&e| (e, 0)).collect();
        while let Some((e, d)) = queue.pop_front() {
            if d == hops {
                continue;
            }
            for &n in &adjacency[e] {
                if seen.insert(n) {
                    queue.push_back((n, d + 1));
                }
            }
        }
        seen
    }

    /// String-level hop expansion. Unknown seeds are kept in the result but
    /// contribute no neighbors.
    pub fn expand_entity_names(&self, seeds: &[String], hops: usize, mode: HopMode) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = BTreeSet::new();
        let mut ids = Vec::new();
        for s in seeds {
            let s = self.normalizer.apply(s);
            match self.entity_id(&s) {
                Some(id) => ids.push(id),
                None => {
                    out.insert(s);
                }
            }
        }
        out.extend(
            self.expand_entities(&ids, hops, mode)
                .into_iter()
                .map(|e| self.entities[e].clone()),
        );
        out
    }

    fn resolve_entities(&self, names: &[String]) -> Vec<EntityId> {
        names
            .iter()
            .filter_map(|n| self.entity_id(&self.normalizer.apply(n)))
            .collect()
    }

    /// Multi-clue candidate retrieval.
    ///
    /// Every fact on a path of at most `hops` edges from a subject or object
    /// clue is a candidate, in both orientations. `hops = 0` retrieves nothing.
    /// With a relation filter only candidates whose relation is listed are
    /// kept. Output is sorted by `(subject, relation, object, orientation)`.
    pub fn retrieve(&self, query: &RetrievalQuery) -> Result<CandidateFactSet> {
        if query.subjects.is_empty() && query.objects.is_empty() {
            return Err(Error::NoClues);
        }
        if query.hops == 0 {
            return Ok(CandidateFactSet::default());
        }
        // A fact is within h hops of a clue when one of its endpoints is
        // within h - 1 hops; h = 1 gives the facts touching a clue.
        let reach = query.hops - 1;
        let by_subject = self.expand_entities(&self.resolve_entities(&query.subjects), reach, query.mode);
        let by_object = self.expand_entities(&self.resolve_entities(&query.objects), reach, query.mode);
        let allowed: Option<Vec<bool>> = query.relations.as_ref().map(|rels| {
            let mut mask = vec![false; self.relations.len()];
            for r in rels {
                if let Some(id) = self.relation_id(&self.normalizer.apply(r)) {
                    mask[id] = true;
                }
            }
            mask
        });

        let mut provenance: HashMap<FactId, Provenance> = HashMap::new();
        for (set, is_subject) in [(&by_subject, true), (&by_object, false)] {
            for &e in set {
                for &fid in &self.entity_index[e] {
                    if let Some(mask) = &allowed {
                        if !mask[self.facts[fid].relation] {
                            continue;
                        }
                    }
                    let p = provenance.entry(fid).or_default();
                    if is_subject {
                        p.subject_clue = true;
                    } else {
                        p.object_clue = true;
                    }
                }
            }
        }

        let mut candidates: Vec<Candidate> = provenance
            .into_iter()
            .flat_map(|(fid, p)| {
                let f = OrientedFact::forward(fid);
                [f, f.reversed()].map(|fact| Candidate { fact, provenance: p })
            })
            .collect();
        candidates.sort_by_cached_key(|c| self.oriented_triplet(c.fact));
        Ok(CandidateFactSet {
            candidates,
            gt_index: None,
        })
    }
}

/// Clue sets and options for [`KnowledgeBase::retrieve`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalQuery {
    pub subjects: Vec<String>,
    pub objects: Vec<String>,
    pub relations: Option<Vec<String>>,
    pub hops: usize,
    pub mode: HopMode,
}

/// Which clue sources reached a candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject_clue: bool,
    pub object_clue: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub fact: OrientedFact,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateFactSet {
    pub candidates: Vec<Candidate>,
    pub gt_index: Option<usize>,
}

impl CandidateFactSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Marks the candidate equal to `gt`, if retrieved.
    pub fn with_ground_truth(mut self, gt: OrientedFact) -> Self {
        self.gt_index = self.candidates.iter().position(|c| c.fact == gt);
        self
    }

    pub fn oriented(&self) -> impl Iterator<Item = OrientedFact> + '_ {
        self.candidates.iter().map(|c| c.fact)
    }

    /// Set of answer entities (first terms) over all candidates.
    pub fn answers(&self, kb: &KnowledgeBase) -> BTreeSet<EntityId> {
        self.oriented().map(|f| kb.answer_entity(f)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct KbFile {
    format: String,
    version: u32,
    case_fold: bool,
    duplicates: usize,
    facts: Vec<[String; 3]>,
}

const KB_FORMAT: &str = "kbvqa-kb";
const KB_VERSION: u32 = 1;

impl KnowledgeBase {
    /// Writes the deduplicated fact list; indexes are rebuilt on load.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = KbFile {
            format: KB_FORMAT.into(),
            version: KB_VERSION,
            case_fold: self.normalizer.case_fold,
            duplicates: self.duplicates,
            facts: (0..self.len())
                .map(|i| {
                    let t = self.triplet(i);
                    [t.subject, t.relation, t.object]
                })
                .collect(),
        };
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: KbFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.format != KB_FORMAT || file.version != KB_VERSION {
            return Err(Error::data(format!(
                "unsupported KB file {} v{}",
                file.format, file.version
            )));
        }
        let facts: Vec<FactTriplet> = file
            .facts
            .into_iter()
            .map(|[s, r, o]| FactTriplet::new(s, r, o))
            .collect();
        let mut kb = Self::build(&facts, Normalizer {
            case_fold: file.case_fold,
        });
        kb.duplicates = file.duplicates;
        Ok(kb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb(rows: &[(&str, &str, &str)]) -> KnowledgeBase {
        let facts: Vec<_> = rows.iter().map(|&(s, r, o)| FactTriplet::new(s, r, o)).collect();
        KnowledgeBase::build(&facts, Normalizer::default())
    }

    #[test]
    fn parses_tab_separated_fact() {
        let n = Normalizer { case_fold: false };
        let f = parse_fact_line("cat\tRelatedTo\ttiger", 1, &n).unwrap();
        assert_eq!(f, FactTriplet::new("cat", "RelatedTo", "tiger"));
    }

    #[test]
    fn normalizes_whitespace_and_case() {
        let f = parse_fact_line("  Cat \tRelatedTo\t tiger ", 1, &Normalizer::default()).unwrap();
        assert_eq!(f, FactTriplet::new("cat", "relatedto", "tiger"));
        let f = parse_fact_line("polar   bear\tIsA\tanimal", 1, &Normalizer::default()).unwrap();
        assert_eq!(f.subject, "polar bear");
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = parse_fact_line("cat\tRelatedTo", 7, &Normalizer::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }));
        let err = parse_fact_line("cat\t \ttiger", 3, &Normalizer::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = parse_facts("# header\na\tb\tc\nbad line\n", &Normalizer::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn index_covers_endpoint_mentions() {
        let kb = kb(&[("a", "r", "b"), ("c", "r", "d"), ("e", "s", "f")]);
        let mentions: usize = (0..kb.entities().len()).map(|e| kb.facts_of_entity(e).len()).sum();
        assert_eq!(mentions, 6);
        assert!(kb.indexes_consistent());
    }

    #[test]
    fn duplicates_are_dropped_and_counted() {
        let kb = kb(&[("a", "r", "b"), ("a", "r", "b")]);
        assert_eq!(kb.len(), 1);
        assert_eq!(kb.duplicates(), 1);
    }

    #[test]
    fn empty_kb_answers_nothing() {
        let kb = kb(&[]);
        assert!(kb.is_empty());
        let q = RetrievalQuery {
            subjects: vec!["cat".into()],
            hops: 1,
            ..Default::default()
        };
        assert!(kb.retrieve(&q).unwrap().is_empty());
        assert_eq!(
            kb.expand_entity_names(&["x".into()], 3, HopMode::Undirected),
            BTreeSet::from(["x".to_string()])
        );
    }

    #[test]
    fn hop_expansion() {
        let kb = kb(&[("a", "r", "b"), ("b", "r", "c")]);
        let names = |h| kb.expand_entity_names(&["a".into()], h, HopMode::Undirected);
        assert_eq!(names(0), BTreeSet::from(["a".to_string()]));
        assert_eq!(names(1), BTreeSet::from(["a".to_string(), "b".to_string()]));
        assert_eq!(
            names(2),
            BTreeSet::from(["a".to_string(), "b".to_string(), "c".to_string()])
        );
        // directed expansion from c cannot walk back against the edges
        let from_c = kb.expand_entity_names(&["c".into()], 2, HopMode::Directed);
        assert_eq!(from_c, BTreeSet::from(["c".to_string()]));
    }

    fn figure_kb() -> KnowledgeBase {
        let facts = parse_facts(
            "cat\tRelatedTo\ttiger\ncat\tIsA\tanimal\ntiger\tHasProperty\tstriped\n",
            &Normalizer { case_fold: false },
        )
        .unwrap();
        KnowledgeBase::build(&facts, Normalizer { case_fold: false })
    }

    #[test]
    fn retrieval_with_relation_filter() {
        let kb = figure_kb();
        let q = RetrievalQuery {
            subjects: vec!["cat".into()],
            objects: vec![],
            relations: Some(vec!["RelatedTo".into()]),
            hops: 1,
            mode: HopMode::Undirected,
        };
        let got: Vec<_> = kb.retrieve(&q).unwrap().oriented().map(|f| kb.oriented_triplet(f)).collect();
        let fwd = FactTriplet::new("cat", "RelatedTo", "tiger");
        assert_eq!(got, vec![fwd.clone(), fwd.reversed()]);

        let unfiltered = RetrievalQuery { relations: None, ..q.clone() };
        let set = kb.retrieve(&unfiltered).unwrap();
        assert_eq!(set.len(), 4);
        assert!(set.candidates.iter().all(|c| c.provenance.subject_clue && !c.provenance.object_clue));

        let miss = RetrievalQuery {
            subjects: vec!["zebra".into()],
            ..unfiltered
        };
        assert!(kb.retrieve(&miss).unwrap().is_empty());
    }

    #[test]
    fn retrieval_requires_a_clue() {
        let kb = figure_kb();
        assert!(matches!(kb.retrieve(&RetrievalQuery::default()), Err(Error::NoClues)));
    }

    #[test]
    fn answer_convention() {
        let f = FactTriplet::new("cat", "RelatedTo", "tiger");
        assert_eq!(answer_of(&f), "cat");
        let r = f.reversed();
        assert_eq!(r.orientation, Orientation::Reversed);
        assert_eq!(answer_of(&r), "tiger");
        assert_eq!(r.reversed(), f);
        assert_eq!(answer_of(&r.reversed()), answer_of(&f));
    }

    #[test]
    fn oriented_codes_round_trip() {
        for code in 0..10 {
            assert_eq!(OrientedFact::from_code(code).code(), code);
        }
    }

    #[test]
    fn save_and_load() {
        let kb = figure_kb();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kb.idx");
        kb.save(&p).unwrap();
        let back = KnowledgeBase::load(&p).unwrap();
        assert_eq!(back, kb);
        assert!(back.indexes_consistent());
    }
}
