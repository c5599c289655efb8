//! Partial (tiered) and full orderings over a candidate pool, and the
//! preference pairs they induce.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{parse_response, CandidateSet, Label};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Disjoint, non-empty groups of candidate indices, most preferred first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TierOrdering {
    tiers: Vec<Vec<usize>>,
}

impl TierOrdering {
    /// Drops empty tiers; rejects overlapping tiers or an ordering with no
    /// members at all. Indices inside a tier are sorted.
    pub fn new(tiers: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for mut t in tiers {
            if t.is_empty() {
                continue;
            }
            t.sort_unstable();
            for &i in &t {
                if !seen.insert(i) {
                    return Err(Error::Domain(format!("index {i} appears in more than one tier")));
                }
            }
            out.push(t);
        }
        if out.is_empty() {
            return Err(Error::Domain("ordering has no tiers".into()));
        }
        Ok(TierOrdering { tiers: out })
    }

    pub fn tiers(&self) -> &[Vec<usize>] {
        &self.tiers
    }

    pub fn tier_of(&self, index: usize) -> Option<usize> {
        self.tiers.iter().position(|t| t.contains(&index))
    }
}

/// A strict best-first permutation of candidate indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FullOrdering {
    perm: Vec<usize>,
}

impl FullOrdering {
    pub fn new(perm: Vec<usize>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        if perm.len() != n {
            return Err(Error::Protocol(format!("permutation has {} entries, expected {n}", perm.len())));
        }
        for &i in &perm {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Protocol(format!("{perm:?} is not a permutation of 0..{n}")));
            }
        }
        Ok(FullOrdering { perm })
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Ordering {
    Tiers(TierOrdering),
    Full(FullOrdering),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreferencePair {
    pub hi: usize,
    pub lo: usize,
}

/// Human response first, everything else second.
pub fn build_po_human(set: &CandidateSet) -> Result<TierOrdering> {
    let h = set.human_index()?;
    TierOrdering::new(vec![vec![h], (0..set.candidates.len()).filter(|&i| i != h).collect()])
}

/// Candidates whose label matches `gold` above the rest. Unparseable
/// responses count as wrong.
pub fn build_po_label(set: &CandidateSet, gold: Label) -> TierOrdering {
    let (right, wrong): (Vec<usize>, Vec<usize>) =
        (0..set.candidates.len()).partition(|&i| set.candidates[i].label == gold);
    TierOrdering::new(vec![right, wrong]).expect("a candidate set is never empty")
}

/// Human first, then model responses with the gold label, then the rest.
/// The human response's own label is not consulted.
pub fn build_po_hybrid(set: &CandidateSet, gold: Label) -> Result<TierOrdering> {
    let h = set.human_index()?;
    let (right, wrong): (Vec<usize>, Vec<usize>) = (0..set.candidates.len())
        .filter(|&i| i != h)
        .partition(|&i| set.candidates[i].label == gold);
    TierOrdering::new(vec![vec![h], right, wrong])
}

/// Maps response text to a vector; compared by cosine similarity.
pub trait Embedder: Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// L2-normalized bag of token counts over a vocabulary.
#[derive(Clone, Debug)]
pub struct BagOfTokens {
    vocab: Vocab,
}

impl BagOfTokens {
    pub fn new(vocab: Vocab) -> Self {
        BagOfTokens { vocab }
    }
}

impl Embedder for BagOfTokens {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab.len()];
        for &id in self.vocab.encode(text).ids() {
            v[id as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Stable best-first sort: descending key, ties by ascending index.
fn sort_desc_by_key(indices: &mut [usize], key: impl Fn(usize) -> (bool, f64)) {
    indices.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        kb.0.cmp(&ka.0).then(kb.1.total_cmp(&ka.1)).then(a.cmp(&b))
    });
}

/// Human response first, then the rest by decreasing cosine similarity to it.
pub fn build_fo_similarity(set: &CandidateSet, embedder: &dyn Embedder) -> Result<FullOrdering> {
    let h = set.human_index()?;
    let anchor = embedder.embed(&set.candidates[h].text);
    let sims: Vec<f64> = set.candidates.iter().map(|c| cosine(&anchor, &embedder.embed(&c.text))).collect();
    let mut rest: Vec<usize> = (0..set.candidates.len()).filter(|&i| i != h).collect();
    sort_desc_by_key(&mut rest, |i| (true, sims[i]));
    let mut perm = vec![h];
    perm.extend(rest);
    FullOrdering::new(perm, set.candidates.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCandidate {
    pub idx: usize,
    pub text: String,
}

/// Request sent to an external ranker: all candidate texts plus the label
/// the ranking should favour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRequest {
    pub instance_id: String,
    pub human_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_idx: Option<usize>,
    pub candidates: Vec<RankCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    pub permutation: Vec<usize>,
}

pub trait ExternalRanker: Sync {
    fn rank(&self, request: &RankRequest) -> Result<RankResponse>;
}

/// In-process ranker: candidates carrying the requested label first, then
/// by similarity to the human response, then by index.
pub struct StubRanker<E: Embedder> {
    embedder: E,
}

impl<E: Embedder> StubRanker<E> {
    pub fn new(embedder: E) -> Self {
        StubRanker { embedder }
    }
}

impl<E: Embedder> ExternalRanker for StubRanker<E> {
    fn rank(&self, req: &RankRequest) -> Result<RankResponse> {
        let anchor = req
            .human_idx
            .and_then(|h| req.candidates.iter().find(|c| c.idx == h))
            .map(|c| self.embedder.embed(&c.text));
        let keys: Vec<(usize, bool, f64)> = req
            .candidates
            .iter()
            .map(|c| {
                let same = parse_response(&c.text).1 == req.human_label;
                let sim = anchor.as_ref().map_or(0.0, |a| cosine(a, &self.embedder.embed(&c.text)));
                (c.idx, same, sim)
            })
            .collect();
        let mut perm: Vec<usize> = keys.iter().map(|k| k.0).collect();
        let key = |i: usize| {
            let k = keys.iter().find(|k| k.0 == i).expect("index from request");
            (k.1, k.2)
        };
        sort_desc_by_key(&mut perm, key);
        Ok(RankResponse { permutation: perm })
    }
}

const RANKER_ATTEMPTS: usize = 3;

/// Asks `client` for a strict order. Transport failures are retried a few
/// times; a response that is not a permutation is a protocol error.
pub fn rank_with_external(client: &dyn ExternalRanker, set: &CandidateSet, gold: Label) -> Result<FullOrdering> {
    let req = RankRequest {
        instance_id: set.instance_id.clone(),
        human_label: gold,
        human_idx: set.human_index().ok(),
        candidates: set
            .candidates
            .iter()
            .enumerate()
            .map(|(idx, c)| RankCandidate { idx, text: c.text.clone() })
            .collect(),
    };
    let mut attempt = 0;
    let resp = loop {
        attempt += 1;
        match client.rank(&req) {
            Err(e) if e.is_retryable() && attempt < RANKER_ATTEMPTS => continue,
            r => break r?,
        }
    };
    FullOrdering::new(resp.permutation, set.candidates.len())
}

/// Tiered orderings yield every cross-tier pair; full orderings yield every
/// ordered pair. Output is sorted by `(hi, lo)`.
pub fn extract_pairs(ordering: &Ordering) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    match ordering {
        Ordering::Tiers(t) => {
            for (a, upper) in t.tiers.iter().enumerate() {
                for lower in &t.tiers[a + 1..] {
                    for &hi in upper {
                        out.extend(lower.iter().map(|&lo| PreferencePair { hi, lo }));
                    }
                }
            }
        }
        Ordering::Full(f) => {
            for (a, &hi) in f.perm.iter().enumerate() {
                out.extend(f.perm[a + 1..].iter().map(|&lo| PreferencePair { hi, lo }));
            }
        }
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PoHuman,
    PoLabel,
    PoHybrid,
    FoSimilarity,
    FoExternal,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::PoHuman,
        Strategy::PoLabel,
        Strategy::PoHybrid,
        Strategy::FoSimilarity,
        Strategy::FoExternal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PoHuman => "po_human",
            Strategy::PoLabel => "po_label",
            Strategy::PoHybrid => "po_hybrid",
            Strategy::FoSimilarity => "fo_similarity",
            Strategy::FoExternal => "fo_external",
        }
    }

    /// Strategies that anchor on a human-written response.
    pub fn needs_human(self) -> bool {
        matches!(self, Strategy::PoHuman | Strategy::PoHybrid | Strategy::FoSimilarity)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ordering strategy {s:?}")))
    }
}

/// A strategy together with the pluggable pieces some strategies need.
pub struct Orderer {
    pub strategy: Strategy,
    pub embedder: Box<dyn Embedder>,
    pub ranker: Box<dyn ExternalRanker>,
}

impl Orderer {
    /// Bag-of-tokens embedder and the in-process stub ranker.
    pub fn with_defaults(strategy: Strategy, vocab: &Vocab) -> Self {
        Orderer {
            strategy,
            embedder: Box::new(BagOfTokens::new(vocab.clone())),
            ranker: Box::new(StubRanker::new(BagOfTokens::new(vocab.clone()))),
        }
    }

    pub fn order(&self, set: &CandidateSet) -> Result<Ordering> {
        Ok(match self.strategy {
            Strategy::PoHuman => Ordering::Tiers(build_po_human(set)?),
            Strategy::PoLabel => Ordering::Tiers(build_po_label(set, set.gold_label()?)),
            Strategy::PoHybrid => Ordering::Tiers(build_po_hybrid(set, set.gold_label()?)?),
            Strategy::FoSimilarity => Ordering::Full(build_fo_similarity(set, self.embedder.as_ref())?),
            Strategy::FoExternal => Ordering::Full(rank_with_external(self.ranker.as_ref(), set, set.gold_label()?)?),
        })
    }

    pub fn pairs(&self, set: &CandidateSet) -> Result<Vec<PreferencePair>> {
        Ok(extract_pairs(&self.order(set)?))
    }
}

/// Ensures human-anchored strategies are only used where humans exist.
pub fn check_applicable(strategy: Strategy, set: &CandidateSet) -> Result<()> {
    if strategy.needs_human() {
        set.human_index()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{standard_vocab, Response, Task};
    use crate::scoring::SourceTag;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as _;
    use serde_json::Map;

    fn set(items: &[(SourceTag, &str)]) -> CandidateSet {
        let v = standard_vocab();
        CandidateSet {
            instance_id: "t".into(),
            task: Task::Nli,
            prompt_text: String::new(),
            prompt_tokens: v.encode_prompt(""),
            candidates: items.iter().map(|&(s, t)| Response::from_text(t, s, &v)).collect(),
            gold_label: Some(Label::Entailment),
            gold_response_index: None,
            multidoc: None,
            extra: Map::new(),
        }
    }

    use SourceTag::{Human as H, LocalModel as M};

    #[test]
    fn po_human_examples() {
        let s = set(&[(H, "a"), (M, "b"), (M, "c"), (M, "d"), (M, "e")]);
        assert_eq!(build_po_human(&s).unwrap().tiers(), &[vec![0], vec![1, 2, 3, 4]]);
        assert!(build_po_human(&set(&[(M, "a"), (M, "b")])).is_err());
        assert_eq!(build_po_human(&set(&[(M, "a"), (H, "b")])).unwrap().tiers(), &[vec![1], vec![0]]);
    }

    #[test]
    fn po_label_examples() {
        let s = set(&[
            (M, "x #### entailment"),
            (M, "x #### neutral"),
            (M, "x #### entailment"),
            (M, "x #### contradiction"),
            (M, "x #### entailment"),
        ]);
        let t = build_po_label(&s, Label::Entailment);
        assert_eq!(t.tiers(), &[vec![0, 2, 4], vec![1, 3]]);
        let all = set(&[(M, "x #### entailment"), (M, "y #### entailment")]);
        let t = build_po_label(&all, Label::Entailment);
        assert_eq!(t.tiers().len(), 1);
        assert!(extract_pairs(&Ordering::Tiers(t)).is_empty());
        let t = build_po_label(&set(&[(M, "garbage"), (M, "x #### entailment")]), Label::Entailment);
        assert_eq!(t.tiers(), &[vec![1], vec![0]]);
    }

    #[test]
    fn po_hybrid_examples() {
        let s = set(&[
            (H, "x #### entailment"),
            (M, "x #### entailment"),
            (M, "x #### neutral"),
            (M, "x #### entailment"),
            (M, "x #### contradiction"),
        ]);
        assert_eq!(build_po_hybrid(&s, Label::Entailment).unwrap().tiers(), &[vec![0], vec![1, 3], vec![2, 4]]);
        let s = set(&[(H, "x #### neutral"), (M, "x #### neutral"), (M, "x #### contradiction")]);
        assert_eq!(build_po_hybrid(&s, Label::Entailment).unwrap().tiers(), &[vec![0], vec![1, 2]]);
    }

    #[test]
    fn fo_similarity_orders_by_cosine() {
        let v = standard_vocab();
        let e = BagOfTokens::new(v);
        let s = set(&[
            (M, "the box holds red balls"),
            (H, "the box holds 5 balls"),
            (M, "adding 2 and 3"),
            (M, "the box holds 5 balls"),
        ]);
        let f = build_fo_similarity(&s, &e).unwrap();
        assert_eq!(f.perm(), &[1, 3, 0, 2]);
    }

    struct FixedEmbedder(Vec<(String, Vec<f64>)>);
    impl Embedder for FixedEmbedder {
        fn embed(&self, text: &str) -> Vec<f64> {
            self.0.iter().find(|(t, _)| t == text).unwrap().1.clone()
        }
    }

    #[test]
    fn fo_similarity_breaks_ties_by_index() {
        let e = FixedEmbedder(vec![
            ("h".into(), vec![1.0, 0.0]),
            ("a".into(), vec![0.5, 0.75f64.sqrt()]),
            ("b".into(), vec![0.0, 1.0]),
        ]);
        let s = set(&[(H, "h"), (M, "a"), (M, "b"), (M, "a")]);
        assert_eq!(build_fo_similarity(&s, &e).unwrap().perm(), &[0, 1, 3, 2]);
    }

    struct Canned(Vec<usize>);
    impl ExternalRanker for Canned {
        fn rank(&self, _: &RankRequest) -> Result<RankResponse> {
            Ok(RankResponse { permutation: self.0.clone() })
        }
    }

    struct Flaky(std::sync::atomic::AtomicUsize);
    impl ExternalRanker for Flaky {
        fn rank(&self, _: &RankRequest) -> Result<RankResponse> {
            if self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) < 2 {
                Err(Error::Transport("timeout".into()))
            } else {
                Ok(RankResponse { permutation: vec![1, 0] })
            }
        }
    }

    #[test]
    fn external_ranker_contract() {
        let s = set(&[(H, "a"), (M, "b"), (M, "c"), (M, "d")]);
        assert!(matches!(
            rank_with_external(&Canned(vec![0, 0, 1, 2]), &s, Label::Entailment),
            Err(Error::Protocol(_))
        ));
        let f = rank_with_external(&Canned(vec![3, 2, 1, 0]), &s, Label::Entailment).unwrap();
        assert_eq!(f.perm(), &[3, 2, 1, 0]);
        let two = set(&[(H, "a"), (M, "b")]);
        let f = rank_with_external(&Flaky(0.into()), &two, Label::Entailment).unwrap();
        assert_eq!(f.perm(), &[1, 0]);
    }

    #[test]
    fn stub_ranker_matches_enumerated_order() {
        let v = standard_vocab();
        let s = set(&[
            (M, "the box holds 5 balls #### contradiction"),
            (H, "the box holds 5 balls #### entailment"),
            (M, "adding 2 and 3 #### entailment"),
            (M, "the box holds 5 red balls #### entailment"),
            (M, "the box holds 5 balls #### entailment"),
        ]);
        let e = BagOfTokens::new(v.clone());
        // oracle: enumerate (label match, similarity) by hand
        let anchor = e.embed(&s.candidates[1].text);
        let mut keyed: Vec<(bool, f64, usize)> = (0..5)
            .map(|i| (s.candidates[i].label == Label::Entailment, cosine(&anchor, &e.embed(&s.candidates[i].text)), i))
            .collect();
        keyed.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.partial_cmp(&a.1).unwrap()).then(a.2.cmp(&b.2)));
        let expected: Vec<usize> = keyed.iter().map(|k| k.2).collect();
        let got = rank_with_external(&StubRanker::new(e), &s, Label::Entailment).unwrap();
        assert_eq!(got.perm(), expected.as_slice());
        assert_eq!(got.perm(), &[1, 4, 3, 2, 0]);
    }

    #[test]
    fn extract_pairs_examples() {
        let t = TierOrdering::new(vec![vec![0], vec![1, 2], vec![3, 4]]).unwrap();
        let pairs = extract_pairs(&Ordering::Tiers(t));
        let expect: Vec<PreferencePair> = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 3), (1, 4), (2, 3), (2, 4)]
            .iter()
            .map(|&(hi, lo)| PreferencePair { hi, lo })
            .collect();
        assert_eq!(pairs, expect);
        let f = FullOrdering::new(vec![2, 0, 4, 1, 3], 5).unwrap();
        assert_eq!(extract_pairs(&Ordering::Full(f)).len(), 10);
        assert!(extract_pairs(&Ordering::Tiers(TierOrdering::new(vec![vec![0, 1, 2]]).unwrap())).is_empty());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("po_magic".parse::<Strategy>().is_err());
    }

    fn shuffle(n: usize, seed: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = seed;
        for i in (1..n).rev() {
            r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (r >> 33) as usize % (i + 1));
        }
        perm
    }

    fn tier_structure() -> impl proptest::strategy::Strategy<Value = Vec<Vec<usize>>> {
        (prop::collection::vec(1usize..5, 1..6), any::<u64>()).prop_map(|(sizes, seed)| {
            let idx = shuffle(sizes.iter().sum(), seed);
            let mut out = Vec::new();
            let mut at = 0;
            for s in sizes {
                out.push(idx[at..at + s].to_vec());
                at += s;
            }
            out
        })
    }

    proptest! {
        #[test]
        fn pairs_cross_tiers_only(tiers in tier_structure()) {
            let t = TierOrdering::new(tiers.clone()).unwrap();
            let pairs = extract_pairs(&Ordering::Tiers(t.clone()));
            let sizes: Vec<usize> = tiers.iter().map(Vec::len).collect();
            let mut expect = 0;
            for i in 0..sizes.len() {
                for j in i + 1..sizes.len() {
                    expect += sizes[i] * sizes[j];
                }
            }
            prop_assert_eq!(pairs.len(), expect);
            for p in &pairs {
                prop_assert!(t.tier_of(p.hi).unwrap() < t.tier_of(p.lo).unwrap());
            }
            let uniq: BTreeSet<_> = pairs.iter().collect();
            prop_assert_eq!(uniq.len(), pairs.len());
        }

        #[test]
        fn label_tiers_follow_relabeling(labels in prop::collection::vec(0usize..4, 2..8), seed in any::<u64>()) {
            let text = ["x #### entailment", "x #### neutral", "x #### contradiction", "x"];
            let items: Vec<(SourceTag, &str)> = labels.iter().map(|&l| (M, text[l])).collect();
            let perm = shuffle(items.len(), seed);
            let shuffled: Vec<(SourceTag, &str)> = perm.iter().map(|&i| items[i]).collect();
            let a = build_po_label(&set(&items), Label::Entailment);
            let b = build_po_label(&set(&shuffled), Label::Entailment);
            let mapped: Vec<Vec<usize>> = b.tiers().iter().map(|t| {
                let mut v: Vec<usize> = t.iter().map(|&j| perm[j]).collect();
                v.sort_unstable();
                v
            }).collect();
            prop_assert_eq!(a.tiers(), mapped.as_slice());
        }

        #[test]
        fn cosine_ordering_is_scale_invariant(
            vecs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 3..6),
            scale in 0.01f64..100.0,
        ) {
            let names: Vec<String> = (0..vecs.len()).map(|i| format!("t{i}")).collect();
            let e1 = FixedEmbedder(names.iter().cloned().zip(vecs.iter().cloned()).collect());
            let e2 = FixedEmbedder(names.iter().cloned().zip(vecs.iter().map(|v| v.iter().map(|x| x * scale).collect())).collect());
            let mut items: Vec<(SourceTag, &str)> = names.iter().map(|n| (M, n.as_str())).collect();
            items[0].0 = H;
            let s = set(&items);
            let a = build_fo_similarity(&s, &e1).unwrap();
            let b = build_fo_similarity(&s, &e2).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
