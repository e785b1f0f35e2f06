//! Sample records (JSON lines) and the binary image-feature container.
//!
//! Feature container layout, little endian:
//! `b"KBVQFEAT"`, `u32` version, `u64` count, `u32` objects, `u32` dim, then
//! per record a `u32` id length, the UTF-8 id, and `objects × dim` `f32`
//! values, object-major.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::detector::PhraseLabels;
use crate::error::{Error, Result};
use crate::kb::{answer_of, FactTriplet, KnowledgeBase, OrientedFact};
use crate::vocab::{tokenize, Vocab};

const FEAT_MAGIC: &[u8; 8] = b"KBVQFEAT";
const FEAT_VERSION: u32 = 1;

/// One question with its supporting fact and phrase labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub question: String,
    pub tokens: Vec<usize>,
    /// Ground-truth fact as read; its first term is the answer.
    pub fact: FactTriplet,
    pub answer: String,
    /// Forward-form terms of `fact`.
    pub labels: [String; 3],
}

impl QASample {
    pub fn new(id: String, question: String, vocab: &Vocab, fact: FactTriplet) -> Self {
        let tokens = vocab.encode(tokenize(&question).iter().map(String::as_str));
        let fwd = fact.to_forward();
        QASample {
            id,
            question,
            tokens,
            answer: answer_of(&fact).to_string(),
            labels: [fwd.subject, fwd.relation, fwd.object],
            fact,
        }
    }

    /// Answer and labels agree with the fact.
    pub fn is_consistent(&self) -> bool {
        let fwd = self.fact.to_forward();
        self.answer == answer_of(&self.fact)
            && self.labels == [fwd.subject, fwd.relation, fwd.object]
    }

    pub fn gt_fact(&self, kb: &KnowledgeBase) -> Result<OrientedFact> {
        kb.find(&self.fact)
            .ok_or_else(|| Error::data(format!("sample {}: fact {} is not in the KB", self.id, self.fact)))
    }

    pub fn phrase_labels(&self, kb: &KnowledgeBase) -> Result<PhraseLabels> {
        let ent = |name: &str| {
            kb.entity_id(name)
                .ok_or_else(|| Error::data(format!("sample {}: unknown entity `{name}`", self.id)))
        };
        Ok(PhraseLabels {
            subject: ent(&self.labels[0])?,
            relation: kb
                .relation_id(&self.labels[1])
                .ok_or_else(|| Error::data(format!("sample {}: unknown relation `{}`", self.id, self.labels[1])))?,
            object: ent(&self.labels[2])?,
        })
    }
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[QASample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<QASample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: QASample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Per-sample `objects × dim` feature matrices, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub objects: usize,
    pub dim: usize,
    pub records: Vec<(String, Vec<f32>)>,
}

impl FeatureFile {
    pub fn new(objects: usize, dim: usize) -> Self {
        FeatureFile {
            objects,
            dim,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: String, values: Vec<f32>) -> Result<()> {
        if values.len() != self.objects * self.dim {
            return Err(Error::data(format!(
                "feature record {id} has {} values, expected {}",
                values.len(),
                self.objects * self.dim
            )));
        }
        self.records.push((id, values));
        Ok(())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FEAT_MAGIC)?;
        w.write_all(&FEAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&(self.objects as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (id, values) in &self.records {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FEAT_MAGIC {
            return Err(Error::data("not a feature file"));
        }
        let version = read_u32(r)?;
        if version != FEAT_VERSION {
            return Err(Error::data(format!("unsupported feature file version {version}")));
        }
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let objects = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut file = FeatureFile::new(objects, dim);
        let mut buf = vec![0u8; objects * dim * 4];
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::data("feature id is not UTF-8"))?;
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            file.records.push((id, values));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    /// Record `i` as a `dim × objects` tensor (one column per object).
    pub fn tensor(&self, i: usize) -> Result<Tensor> {
        let (k, d) = (self.objects, self.dim);
        let values = &self.records[i].1;
        let mut data = vec![0.0; k * d];
        for obj in 0..k {
            for j in 0..d {
                data[j * k + obj] = f64::from(values[obj * d + j]);
            }
        }
        Ok(Tensor::new(d, k, data)?)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// A loaded split: samples paired with their feature tensors.
#[derive(Debug, Clone)]
pub struct Split {
    pub name: String,
    pub samples: Vec<QASample>,
    pub features: Vec<Tensor>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads `{name}.jsonl` and `{name}.feat` from `dir`, matching features
    /// to samples by id. Questions longer than `max_len` are truncated.
    pub fn load(dir: &Path, name: &str, max_len: usize) -> Result<Self> {
        let mut samples = read_samples(dir.join(format!("{name}.jsonl")))?;
        let feats = FeatureFile::load(dir.join(format!("{name}.feat")))?;
        let by_id: HashMap<&str, usize> = feats
            .records
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.as_str(), i))
            .collect();
        let mut features = Vec::with_capacity(samples.len());
        for s in &mut samples {
            let i = *by_id
                .get(s.id.as_str())
                .ok_or_else(|| Error::data(format!("no features for sample {}", s.id)))?;
            features.push(feats.tensor(i)?);
            s.tokens.truncate(max_len);
            if s.tokens.is_empty() {
                return Err(Error::data(format!("sample {} has an empty question", s.id)));
            }
        }
        Ok(Split {
            name: name.to_string(),
            samples,
            features,
        })
    }
}

/// Files of a generated corpus directory.
pub struct CorpusPaths;

impl CorpusPaths {
    pub const FACTS: &'static str = "facts.tsv";
    pub const KB: &'static str = "kb.idx";
    pub const VOCAB: &'static str = "vocab.txt";
}

/// KB, vocabulary and the named splits of a corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub kb: KnowledgeBase,
    pub vocab: Vocab,
    pub splits: HashMap<String, Split>,
}

impl Corpus {
    pub fn load(dir: &Path, splits: &[&str], max_len: usize) -> Result<Self> {
        let kb_path = dir.join(CorpusPaths::KB);
        let kb = if kb_path.exists() {
            KnowledgeBase::load(kb_path)?
        } else {
            KnowledgeBase::from_tsv(&fs::read_to_string(dir.join(CorpusPaths::FACTS))?, Default::default())?
        };
        let vocab = Vocab::load(dir.join(CorpusPaths::VOCAB))?;
        let mut map = HashMap::new();
        for name in splits {
            if !map.contains_key(*name) {
                map.insert(name.to_string(), Split::load(dir, name, max_len)?);
            }
        }
        Ok(Corpus { kb, vocab, splits: map })
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::data(format!("split `{name}` is not loaded")))
    }
}
