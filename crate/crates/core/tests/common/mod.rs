//! Shared test oracles.
#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeSet;

use kbvqa::kb::{FactTriplet, HopMode, KnowledgeBase, Normalizer, RetrievalQuery};

/// Retrieval by direct scan over the fact list: hop distances come from
/// repeated edge relaxation, with no use of the KB's indexes. Only
/// distances below `hops` matter, and those are exact after `hops - 1`
/// passes.
pub fn brute_force_retrieve(kb: &KnowledgeBase, q: &RetrievalQuery) -> BTreeSet<FactTriplet> {
    let norm = kb.normalizer();
    let facts: Vec<FactTriplet> = (0..kb.len()).map(|i| kb.triplet(i)).collect();
    let mut out = BTreeSet::new();
    if q.hops == 0 {
        return out;
    }
    let distances = |clues: &[String]| {
        let mut dist: std::collections::HashMap<String, usize> = clues
            .iter()
            .map(|c| (norm.apply(c), 0))
            .collect();
        for _ in 1..q.hops {
            let mut changed = false;
            for f in &facts {
                let mut relax = |from: &str, to: &str, dist: &mut std::collections::HashMap<String, usize>| {
                    if let Some(&d) = dist.get(from) {
                        let e = dist.entry(to.to_string()).or_insert(usize::MAX);
                        if d + 1 < *e {
                            *e = d + 1;
                            changed = true;
                        }
                    }
                };
                relax(&f.subject, &f.object, &mut dist);
                if q.mode == HopMode::Undirected {
                    relax(&f.object, &f.subject, &mut dist);
                }
            }
            if !changed {
                break;
            }
        }
        dist
    };
    let ds = distances(&q.subjects);
    let dobj = distances(&q.objects);
    let allowed: Option<BTreeSet<String>> = q
        .relations
        .as_ref()
        .map(|rs| rs.iter().map(|r| norm.apply(r)).collect());
    let near = |e: &str| {
        [&ds, &dobj]
            .iter()
            .any(|d| d.get(e).is_some_and(|&x| x < q.hops))
    };
    for f in facts {
        if allowed.as_ref().is_some_and(|a| !a.contains(&f.relation)) {
            continue;
        }
        if near(&f.subject) || near(&f.object) {
            out.insert(f.reversed());
            out.insert(f);
        }
    }
    out
}

pub fn retrieved(kb: &KnowledgeBase, q: &RetrievalQuery) -> BTreeSet<FactTriplet> {
    kb.retrieve(q)
        .unwrap()
        .oriented()
        .map(|f| kb.oriented_triplet(f))
        .collect()
}

/// Random KB over `entities` names `e0..` and `relations` names `r0..`.
pub fn random_kb(rng: &mut impl rand::Rng, entities: usize, relations: usize, facts: usize) -> KnowledgeBase {
    let triplets: Vec<FactTriplet> = (0..facts)
        .map(|_| {
            FactTriplet::new(
                format!("e{}", rng.random_range(0..entities)),
                format!("r{}", rng.random_range(0..relations)),
                format!("e{}", rng.random_range(0..entities)),
            )
        })
        .collect();
    KnowledgeBase::build(&triplets, Normalizer::default())
}

pub fn random_query(rng: &mut impl rand::Rng, entities: usize, relations: usize, max_hops: usize) -> RetrievalQuery {
    let pick = |rng: &mut dyn rand::RngCore, n: usize, prefix: &str, max: usize| -> Vec<String> {
        let k = rand::Rng::random_range(rng, 0..=max);
        (0..k)
            .map(|_| format!("{prefix}{}", rand::Rng::random_range(rng, 0..n + 2)))
            .collect()
    };
    let mut subjects = pick(rng, entities, "e", 4);
    let objects = pick(rng, entities, "e", 4);
    if subjects.is_empty() && objects.is_empty() {
        subjects.push("e0".into());
    }
    let relations = rng.random_bool(0.5).then(|| pick(rng, relations, "r", 3));
    RetrievalQuery {
        subjects,
        objects,
        relations,
        hops: rng.random_range(0..=max_hops),
        mode: if rng.random_bool(0.7) { HopMode::Undirected } else { HopMode::Directed },
    }
}
