//! Near-duplicate removal: character-shingle MinHash signatures, LSH
//! banding for candidate pairs, and an exact-Jaccard oracle used to verify
//! the estimator.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::doc::Document;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupParams {
    /// Character n-gram size for shingling.
    pub shingle_size: usize,
    /// Signature length (number of hash permutations).
    pub num_perms: usize,
    pub bands: usize,
    pub rows_per_band: usize,
    /// Signature match fraction at or above which a candidate pair is a
    /// duplicate.
    pub similarity_threshold: f64,
    pub seed: u64,
}

impl Default for DedupParams {
    fn default() -> Self {
        DedupParams {
            shingle_size: 5,
            num_perms: 128,
            bands: 16,
            rows_per_band: 8,
            similarity_threshold: 0.8,
            seed: 0x5eed_d0c5,
        }
    }
}

/// FNV-1a, 64-bit. Deterministic across platforms, unlike the std hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct ShingleSet {
    pub doc_id: String,
    pub shingles: HashSet<u64>,
}

/// Hashes every contiguous character n-gram; text shorter than n yields a
/// single whole-text shingle.
pub fn shingle(doc_id: &str, text: &str, n: usize) -> ShingleSet {
    assert!(n >= 1, "shingle size must be positive");
    let chars: Vec<char> = text.chars().collect();
    let mut shingles = HashSet::new();
    if chars.len() < n {
        shingles.insert(fnv1a(text.as_bytes()));
    } else {
        let mut buf = String::new();
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window.iter());
            shingles.insert(fnv1a(buf.as_bytes()));
        }
    }
    ShingleSet {
        doc_id: doc_id.to_string(),
        shingles,
    }
}

/// |a ∩ b| / |a ∪ b|; both empty is defined as 1.0.
pub fn jaccard_exact(a: &ShingleSet, b: &ShingleSet) -> f64 {
    if a.shingles.is_empty() && b.shingles.is_empty() {
        return 1.0;
    }
    let inter = a.shingles.intersection(&b.shingles).count();
    let union = a.shingles.len() + b.shingles.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSignature {
    pub doc_id: String,
    pub values: Vec<u64>,
    pub seed: u64,
}

/// The P permutations realized as seeded multiply-shift hash functions.
#[derive(Debug, Clone)]
pub struct HashFamily {
    coeffs: Vec<(u64, u64)>,
    seed: u64,
}

impl HashFamily {
    pub fn new(num_perms: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..num_perms)
            .map(|_| (rng.gen::<u64>() | 1, rng.gen::<u64>()))
            .collect();
        HashFamily { coeffs, seed }
    }

    fn apply(&self, i: usize, x: u64) -> u64 {
        let (a, b) = self.coeffs[i];
        a.wrapping_mul(x).wrapping_add(b)
    }
}

pub fn minhash(s: &ShingleSet, family: &HashFamily) -> Result<MinHashSignature> {
    if s.shingles.is_empty() {
        return Err(Error::EmptyShingles(s.doc_id.clone()));
    }
    let values = (0..family.coeffs.len())
        .map(|i| s.shingles.iter().map(|&x| family.apply(i, x)).min().unwrap())
        .collect();
    Ok(MinHashSignature {
        doc_id: s.doc_id.clone(),
        values,
        seed: family.seed,
    })
}

/// Fraction of positions on which two signatures agree; the unbiased
/// estimator of Jaccard similarity.
pub fn match_fraction(a: &MinHashSignature, b: &MinHashSignature) -> f64 {
    assert_eq!(a.values.len(), b.values.len());
    let matches = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    matches as f64 / a.values.len() as f64
}

/// Band-bucket index: a doc appears in exactly `bands` buckets.
#[derive(Debug, Default)]
pub struct LshIndex {
    buckets: HashMap<(usize, u64), Vec<usize>>,
    bands: usize,
    rows: usize,
}

impl LshIndex {
    pub fn new(bands: usize, rows_per_band: usize) -> Self {
        LshIndex {
            buckets: HashMap::new(),
            bands,
            rows: rows_per_band,
        }
    }

    fn band_key(&self, sig: &MinHashSignature, band: usize) -> (usize, u64) {
        let slice = &sig.values[band * self.rows..(band + 1) * self.rows];
        let mut bytes = Vec::with_capacity(self.rows * 8);
        for v in slice {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        (band, fnv1a(&bytes))
    }

    /// Returns indices of previously inserted docs sharing at least one band.
    pub fn candidates(&self, sig: &MinHashSignature) -> Vec<usize> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for band in 0..self.bands {
            if let Some(ids) = self.buckets.get(&self.band_key(sig, band)) {
                for &id in ids {
                    if seen.insert(id) {
                        out.push(id);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn insert(&mut self, sig: &MinHashSignature, idx: usize) {
        for band in 0..self.bands {
            self.buckets.entry(self.band_key(sig, band)).or_default().push(idx);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupCluster {
    pub kept_id: String,
    pub removed_ids: Vec<String>,
    pub estimated_similarity: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DedupReport {
    pub clusters: Vec<DedupCluster>,
}

/// Keep-first near-duplicate removal. A pair is a duplicate iff LSH makes
/// it a candidate and the signature match fraction reaches the threshold.
pub fn dedup_corpus(docs: Vec<Document>, params: &DedupParams) -> Result<(Vec<Document>, DedupReport)> {
    assert_eq!(
        params.bands * params.rows_per_band,
        params.num_perms,
        "bands x rows must equal the signature length"
    );
    let family = HashFamily::new(params.num_perms, params.seed);
    let mut index = LshIndex::new(params.bands, params.rows_per_band);
    let mut kept: Vec<Document> = Vec::new();
    let mut kept_sigs: Vec<MinHashSignature> = Vec::new();
    let mut clusters: HashMap<usize, DedupCluster> = HashMap::new();

    for doc in docs {
        let shingles = shingle(&doc.id, &doc.text, params.shingle_size);
        let sig = minhash(&shingles, &family)?;
        let mut duplicate_of = None;
        for cand in index.candidates(&sig) {
            let frac = match_fraction(&sig, &kept_sigs[cand]);
            if frac >= params.similarity_threshold {
                duplicate_of = Some((cand, frac));
                break;
            }
        }
        match duplicate_of {
            Some((cand, frac)) => {
                let cluster = clusters.entry(cand).or_insert_with(|| DedupCluster {
                    kept_id: kept[cand].id.clone(),
                    removed_ids: Vec::new(),
                    estimated_similarity: frac,
                });
                cluster.removed_ids.push(doc.id.clone());
                cluster.estimated_similarity = cluster.estimated_similarity.max(frac);
            }
            None => {
                index.insert(&sig, kept.len());
                kept.push(doc);
                kept_sigs.push(sig);
            }
        }
    }

    let mut cluster_list: Vec<(usize, DedupCluster)> = clusters.into_iter().collect();
    cluster_list.sort_by_key(|(i, _)| *i);
    Ok((
        kept,
        DedupReport {
            clusters: cluster_list.into_iter().map(|(_, c)| c).collect(),
        },
    ))
}

/// Probability that a pair at Jaccard `s` becomes an LSH candidate under a
/// b-band, r-row layout: 1 - (1 - s^r)^b.
pub fn candidate_probability(s: f64, bands: usize, rows: usize) -> f64 {
    1.0 - (1.0 - s.powi(rows as i32)).powi(bands as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn set_of(vals: &[u64]) -> ShingleSet {
        ShingleSet {
            doc_id: "t".to_string(),
            shingles: vals.iter().copied().collect(),
        }
    }

    #[test]
    fn shingle_enumeration() {
        let s = shingle("d", "abcd", 2);
        assert_eq!(s.shingles.len(), 3);
        let expected: HashSet<u64> = ["ab", "bc", "cd"].iter().map(|g| fnv1a(g.as_bytes())).collect();
        assert_eq!(s.shingles, expected);
    }

    #[test]
    fn shingle_set_semantics() {
        assert_eq!(shingle("d", "aaaa", 2).shingles.len(), 1);
    }

    #[test]
    fn short_text_single_whole_shingle() {
        // "हिंदी" is 5 code points, so n=5 gives exactly one window
        assert_eq!("हिंदी".chars().count(), 5);
        assert_eq!(shingle("d", "हिंदी", 5).shingles.len(), 1);
        // shorter than n: whole-text shingle
        assert_eq!(shingle("d", "हि", 5).shingles.len(), 1);
    }

    #[test]
    fn jaccard_cases() {
        let a = set_of(&[1, 2, 3]);
        let b = set_of(&[2, 3, 4]);
        assert_eq!(jaccard_exact(&a, &a), 1.0);
        assert_eq!(jaccard_exact(&a, &set_of(&[7, 8])), 0.0);
        assert_eq!(jaccard_exact(&a, &b), 0.5);
        assert_eq!(jaccard_exact(&set_of(&[]), &set_of(&[])), 1.0);
    }

    #[test]
    fn minhash_deterministic_and_exact_on_identical() {
        let family = HashFamily::new(128, 42);
        let s = shingle("d", "यह एक लंबा परीक्षण वाक्य है।", 5);
        let a = minhash(&s, &family).unwrap();
        let b = minhash(&s, &family).unwrap();
        assert_eq!(a, b);
        assert_eq!(match_fraction(&a, &b), 1.0);
    }

    #[test]
    fn minhash_empty_set_errors() {
        let family = HashFamily::new(8, 0);
        let empty = ShingleSet {
            doc_id: "e".to_string(),
            shingles: HashSet::new(),
        };
        assert!(minhash(&empty, &family).is_err());
    }

    #[test]
    fn single_equal_shingle_matches_everywhere() {
        let family = HashFamily::new(128, 7);
        let a = minhash(&set_of(&[99]), &family).unwrap();
        let b = minhash(&set_of(&[99]), &family).unwrap();
        assert_eq!(
            a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count(),
            128
        );
    }

    #[test]
    fn estimator_tracks_exact_jaccard() {
        let family = HashFamily::new(128, 123);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total_err = 0.0;
        let n_pairs = 100;
        for _ in 0..n_pairs {
            let shared: Vec<u64> = (0..rng.gen_range(20..200)).map(|_| rng.gen()).collect();
            let only_a: Vec<u64> = (0..rng.gen_range(0..100)).map(|_| rng.gen()).collect();
            let only_b: Vec<u64> = (0..rng.gen_range(0..100)).map(|_| rng.gen()).collect();
            let a = set_of(&[shared.clone(), only_a].concat());
            let b = set_of(&[shared, only_b].concat());
            let sa = minhash(&a, &family).unwrap();
            let sb = minhash(&b, &family).unwrap();
            total_err += (match_fraction(&sa, &sb) - jaccard_exact(&a, &b)).abs();
        }
        assert!(total_err / n_pairs as f64 <= 0.05);
    }

    #[test]
    fn exact_duplicates_removed_keep_first() {
        let text = "यह वही दस्तावेज़ है जो दो बार आता है और काफी लंबा है।";
        let docs = vec![
            Document::new("first", text, "t"),
            Document::new("second", text, "t"),
        ];
        let (kept, report) = dedup_corpus(docs, &DedupParams::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "first");
        assert_eq!(report.clusters[0].removed_ids, vec!["second"]);
        assert_eq!(report.clusters[0].estimated_similarity, 1.0);
    }

    #[test]
    fn distinct_corpus_untouched() {
        let texts = [
            "पहला दस्तावेज़ पूरी तरह अलग विषय पर लिखा गया है और इसकी सामग्री अनोखी है।",
            "the second document is english and shares nothing with the others at all",
            "तीसरे में गणित की चर्चा है: समीकरण, ज्यामिति और बीजगणित के सूत्र।",
        ];
        let docs: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("d{i}"), *t, "t"))
            .collect();
        // verify the fixture is genuinely distinct with the exact oracle
        for i in 0..docs.len() {
            for j in i + 1..docs.len() {
                let a = shingle(&docs[i].id, &docs[i].text, 5);
                let b = shingle(&docs[j].id, &docs[j].text, 5);
                assert!(jaccard_exact(&a, &b) < 0.2);
            }
        }
        let (kept, report) = dedup_corpus(docs, &DedupParams::default()).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(report.clusters.is_empty());
    }

    #[test]
    fn near_duplicate_pair_removed() {
        let base = "यह एक लंबा दस्तावेज़ है जिसमें बहुत सारे वाक्य हैं और हर वाक्य कुछ नया जोड़ता है। \
                    दूसरा वाक्य भी यहां है। तीसरा वाक्य भी मौजूद है। चौथा वाक्य समापन करता है।";
        let edited = base.replace("चौथा", "पांचवां");
        let a = shingle("a", base, 5);
        let b = shingle("b", &edited, 5);
        assert!(jaccard_exact(&a, &b) > 0.85, "fixture should be a near duplicate");
        let docs = vec![Document::new("a", base, "t"), Document::new("b", edited, "t")];
        let (kept, _) = dedup_corpus(docs, &DedupParams::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "a");
    }

    #[test]
    fn band_math_monte_carlo() {
        // P(candidate) = 1 - (1 - s^r)^b; simulate signature agreement at
        // s = 0.8 by independent per-position matches
        let (bands, rows) = (16usize, 8usize);
        let s = 0.8;
        let analytic = candidate_probability(s, bands, rows);
        assert!(analytic > 0.93);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 20_000;
        let mut hits = 0;
        for _ in 0..trials {
            let candidate = (0..bands).any(|_| (0..rows).all(|_| rng.gen::<f64>() < s));
            if candidate {
                hits += 1;
            }
        }
        let simulated = hits as f64 / trials as f64;
        assert!((simulated - analytic).abs() < 0.02);
    }

    #[test]
    fn dedup_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let words = ["एक", "दो", "तीन", "चार", "पांच", "छह"];
        let docs: Vec<Document> = (0..12)
            .map(|i| {
                let text: Vec<&str> = (0..30).map(|_| *words.choose(&mut rng).unwrap()).collect();
                Document::new(format!("d{i}"), text.join(" "), "t")
            })
            .collect();
        let params = DedupParams::default();
        let (a, _) = dedup_corpus(docs.clone(), &params).unwrap();
        let (b, _) = dedup_corpus(docs, &params).unwrap();
        assert_eq!(a, b);
    }
}
