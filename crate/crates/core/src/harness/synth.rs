//! Synthetic KB-VQA corpus.
//!
//! Every entity has a feature prototype. A sample shows one entity X among
//! background objects and asks for the other end of the single fact that
//! links X through relation r. The question names r through a synonym and
//! the direction through its template, and sometimes names X outright. The
//! answer is therefore a function of (prototype, template, KB).

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::thread;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::data::{write_samples, Corpus, CorpusPaths, FeatureFile, QASample, Split};
use crate::kb::{answer_of, FactId, FactTriplet, KnowledgeBase, Normalizer};
use crate::vocab::{tokenize, Vocab};

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "vo", "zi", "na", "pe", "su", "do", "fa", "gu", "ho", "je", "bi",
];

const RELATIONS: [(&str, [&str; 3]); 8] = [
    ("is a", ["kind of", "type of", "sort of"]),
    ("used for", ["used for", "useful for", "good for"]),
    ("at location", ["found at", "located at", "seen at"]),
    ("has property", ["has property", "described as", "known as"]),
    ("part of", ["part of", "piece of", "member of"]),
    ("capable of", ["capable of", "able to", "can do"]),
    ("made of", ["made of", "built from", "formed from"]),
    ("related to", ["related to", "linked to", "connected to"]),
];

/// `{r}` is the relation synonym; `this` is where a hint may go.
const ASK_OBJECT: [&str; 3] = ["what is this {r}", "this thing is {r} what", "tell me what this is {r}"];
const ASK_SUBJECT: [&str; 3] = ["what is {r} this", "which thing is {r} this one", "name something {r} this"];
const FILLERS: [&str; 3] = ["please", "quickly", "now"];

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub seed: u64,
    pub entities: usize,
    pub relations: usize,
    pub facts_per_entity: usize,
    pub objects: usize,
    pub feat_dim: usize,
    /// Standard deviation of the per-sample feature noise.
    pub noise: f64,
    /// Probability that the question names the visible entity.
    pub hint_prob: f64,
    pub filler_prob: f64,
    pub backgrounds: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            entities: 50,
            relations: 5,
            facts_per_entity: 3,
            objects: 4,
            feat_dim: 32,
            noise: 0.1,
            hint_prob: 0.3,
            filler_prob: 0.3,
            backgrounds: 6,
            train: 2000,
            val: 200,
            test: 500,
        }
    }
}

impl GenSpec {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut spec = GenSpec::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || err(format!("invalid value `{v}` for `{k}`"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let real = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "entities" => spec.entities = int()?,
                "relations" => spec.relations = int()?,
                "facts_per_entity" => spec.facts_per_entity = int()?,
                "objects" => spec.objects = int()?,
                "feat_dim" => spec.feat_dim = int()?,
                "noise" => spec.noise = real()?,
                "hint_prob" => spec.hint_prob = real()?,
                "filler_prob" => spec.filler_prob = real()?,
                "backgrounds" => spec.backgrounds = int()?,
                "train" => spec.train = int()?,
                "val" => spec.val = int()?,
                "test" => spec.test = int()?,
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("entities", self.entities),
            ("relations", self.relations),
            ("facts_per_entity", self.facts_per_entity),
            ("objects", self.objects),
            ("feat_dim", self.feat_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("generator `{k}` must be positive")));
            }
        }
        if self.objects > 1 && self.backgrounds == 0 {
            return Err(Error::config("background objects need at least one prototype"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be a non-negative number"));
        }
        for (k, p) in [("hint_prob", self.hint_prob), ("filler_prob", self.filler_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("`{k}` must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    fn split_size(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

pub fn entity_name(i: usize, total: usize) -> String {
    let mut width = 2;
    while SYLLABLES.len().pow(width as u32) < total {
        width += 1;
    }
    let mut n = i;
    let mut s = String::new();
    for _ in 0..width {
        s.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    s
}

pub fn relation_lexicon(count: usize) -> Vec<(String, Vec<String>)> {
    (0..count)
        .map(|i| match RELATIONS.get(i) {
            Some((name, syns)) => (name.to_string(), syns.iter().map(|s| s.to_string()).collect()),
            None => (format!("relation {i}"), vec![format!("relation {i}")]),
        })
        .collect()
}

/// (fact, visible entity is the forward subject) pairs whose answer is
/// unique given the visible entity and relation.
fn eligible_pairs(kb: &KnowledgeBase) -> Vec<(FactId, bool)> {
    let mut incident: HashMap<(usize, usize), usize> = HashMap::new();
    for f in kb.facts() {
        *incident.entry((f.subject, f.relation)).or_default() += 1;
        if f.object != f.subject {
            *incident.entry((f.object, f.relation)).or_default() += 1;
        }
    }
    let mut out = Vec::new();
    for (id, f) in kb.facts().iter().enumerate() {
        if f.subject == f.object {
            if incident[&(f.subject, f.relation)] == 1 {
                out.push((id, false));
            }
            continue;
        }
        if incident[&(f.subject, f.relation)] == 1 {
            out.push((id, true));
        }
        if incident[&(f.object, f.relation)] == 1 {
            out.push((id, false));
        }
    }
    out
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: GenSpec,
    pub kb: KnowledgeBase,
    pub vocab: Vocab,
    pub prototypes: Vec<Vec<f64>>,
    pub splits: Vec<(String, Vec<QASample>, FeatureFile)>,
}

impl SyntheticCorpus {
    pub fn split(&self, name: &str) -> Option<(&[QASample], &FeatureFile)> {
        self.splits
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, f)| (s.as_slice(), f))
    }

    /// Writes facts, KB index, vocabulary and every split to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tsv = String::new();
        for i in 0..self.kb.len() {
            let t = self.kb.triplet(i);
            tsv.push_str(&format!("{}\t{}\t{}\n", t.subject, t.relation, t.object));
        }
        fs::write(dir.join(CorpusPaths::FACTS), tsv)?;
        self.kb.save(dir.join(CorpusPaths::KB))?;
        self.vocab.save(dir.join(CorpusPaths::VOCAB))?;
        for (name, samples, feats) in &self.splits {
            write_samples(dir.join(format!("{name}.jsonl")), samples)?;
            feats.save(dir.join(format!("{name}.feat")))?;
        }
        Ok(())
    }

    /// The corpus as loaded from disk, without the round trip.
    pub fn to_corpus(&self, max_len: usize) -> Result<Corpus> {
        let mut splits = HashMap::new();
        for (name, samples, feats) in &self.splits {
            let mut samples = samples.clone();
            for s in &mut samples {
                s.tokens.truncate(max_len);
            }
            let features = (0..feats.records.len()).map(|i| feats.tensor(i)).collect::<Result<_>>()?;
            splits.insert(
                name.clone(),
                Split {
                    name: name.clone(),
                    samples,
                    features,
                },
            );
        }
        Ok(Corpus {
            kb: self.kb.clone(),
            vocab: self.vocab.clone(),
            splits,
        })
    }

    /// Every sample's answer is the first term of its fact, the fact is in
    /// the KB, and the labels are its forward form.
    pub fn self_check(&self) -> Result<()> {
        for (name, samples, feats) in &self.splits {
            if feats.records.len() != samples.len() {
                return Err(Error::data(format!("split {name}: feature count mismatch")));
            }
            for (s, (id, _)) in samples.iter().zip(&feats.records) {
                if s.id != *id || !s.is_consistent() || s.answer != answer_of(&s.fact) {
                    return Err(Error::data(format!("sample {} is inconsistent", s.id)));
                }
                s.gt_fact(&self.kb)?;
            }
        }
        Ok(())
    }
}

pub fn generate(spec: &GenSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let names: Vec<String> = (0..spec.entities).map(|i| entity_name(i, spec.entities)).collect();
    let lexicon = relation_lexicon(spec.relations);

    let mut rng = stream(spec.seed, 0);
    let mut facts = Vec::with_capacity(spec.entities * spec.facts_per_entity);
    for (e, name) in names.iter().enumerate() {
        for _ in 0..spec.facts_per_entity {
            let r = rng.random_range(0..spec.relations);
            let o = if spec.entities == 1 {
                e
            } else {
                let o = rng.random_range(0..spec.entities - 1);
                if o >= e {
                    o + 1
                } else {
                    o
                }
            };
            facts.push(FactTriplet::new(name.clone(), lexicon[r].0.clone(), names[o].clone()));
        }
    }
    let kb = KnowledgeBase::build(&facts, Normalizer::default());
    let pairs = eligible_pairs(&kb);
    if pairs.is_empty() {
        return Err(Error::config("no fact has a unique answer; add relations or reduce facts per entity"));
    }

    let mut words: Vec<String> = Vec::new();
    for i in 0..kb.len() {
        words.extend(kb.triplet(i).words().map(String::from));
    }
    for (_, syns) in &lexicon {
        words.extend(syns.iter().flat_map(|s| tokenize(s)));
    }
    for t in ASK_OBJECT.iter().chain(&ASK_SUBJECT).chain(&FILLERS) {
        words.extend(tokenize(&t.replace("{r}", "")));
    }
    let vocab = Vocab::from_tokens(words);

    let mut proto_rng = stream(spec.seed, 1);
    let prototypes: Vec<Vec<f64>> = (0..kb.entities().len())
        .map(|_| gaussian(&mut proto_rng, spec.feat_dim, 1.0))
        .collect();
    let backgrounds: Vec<Vec<f64>> = (0..spec.backgrounds)
        .map(|_| gaussian(&mut proto_rng, spec.feat_dim, 1.0))
        .collect();
    let synonyms: HashMap<&str, &[String]> = lexicon.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();

    let ctx = SampleContext {
        spec,
        kb: &kb,
        vocab: &vocab,
        pairs: &pairs,
        prototypes: &prototypes,
        backgrounds: &backgrounds,
        synonyms: &synonyms,
    };
    let mut splits = Vec::new();
    for (si, name) in SPLITS.iter().enumerate() {
        let n = spec.split_size(name);
        let stream_base = ((si as u64) + 2) << 40;
        let made = generate_parallel(n, |i| ctx.sample(name, i, stream(spec.seed, stream_base + i as u64)));
        let mut samples = Vec::with_capacity(n);
        let mut feats = FeatureFile::new(spec.objects, spec.feat_dim);
        for (s, f) in made {
            feats.push(s.id.clone(), f)?;
            samples.push(s);
        }
        splits.push((name.to_string(), samples, feats));
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        kb,
        vocab,
        prototypes,
        splits,
    })
}

fn generate_parallel<T: Send>(n: usize, make: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = thread::available_parallelism().map_or(1, |n| n.get()).min(n.max(1));
    if threads <= 1 {
        return (0..n).map(make).collect();
    }
    let chunk = n.div_ceil(threads);
    let make = &make;
    thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| scope.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(make).collect::<Vec<T>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generator thread panicked"))
            .collect()
    })
}

struct SampleContext<'a> {
    spec: &'a GenSpec,
    kb: &'a KnowledgeBase,
    vocab: &'a Vocab,
    pairs: &'a [(FactId, bool)],
    prototypes: &'a [Vec<f64>],
    backgrounds: &'a [Vec<f64>],
    synonyms: &'a HashMap<&'a str, &'a [String]>,
}

impl SampleContext<'_> {
    fn sample(&self, split: &str, i: usize, mut rng: ChaCha8Rng) -> (QASample, Vec<f32>) {
        let spec = self.spec;
        let (fact, visible_is_subject) = self.pairs[rng.random_range(0..self.pairs.len())];
        let fwd = self.kb.triplet(fact);
        // the visible entity is read last, so the answer is the other end
        let (gt, visible) = if visible_is_subject {
            (fwd.reversed(), fwd.subject.clone())
        } else {
            (fwd.clone(), fwd.object.clone())
        };
        let syn = self.synonyms[fwd.relation.as_str()]
            .choose(&mut rng)
            .expect("every relation has a synonym");
        let templates = if visible_is_subject { &ASK_OBJECT } else { &ASK_SUBJECT };
        let mut question = templates[rng.random_range(0..templates.len())].replace("{r}", syn);
        if rng.random_bool(spec.hint_prob) {
            question = question.replacen("this", &visible, 1);
        }
        if rng.random_bool(spec.filler_prob) {
            question = format!("{} {question}", FILLERS[rng.random_range(0..FILLERS.len())]);
        }

        let x = self.kb.entity_id(&visible).expect("visible entity is in the KB");
        let slot = rng.random_range(0..spec.objects);
        let mut values = Vec::with_capacity(spec.objects * spec.feat_dim);
        for k in 0..spec.objects {
            let base = if k == slot {
                &self.prototypes[x]
            } else {
                &self.backgrounds[rng.random_range(0..self.backgrounds.len())]
            };
            let noise = gaussian(&mut rng, spec.feat_dim, spec.noise);
            values.extend(base.iter().zip(noise).map(|(b, n)| (b + n) as f32));
        }
        let id = format!("{split}-{i:06}");
        (QASample::new(id, question, self.vocab, gt), values)
    }
}
