//! Exhaustive cosine-similarity index over weighted embeddings and the
//! clinical post-processing that turns expanded candidates into references.
//!
//! # Index file layout
//!
//! All integers little-endian.
//!
//! | offset        | size          | content                                   |
//! |---------------|---------------|-------------------------------------------|
//! | 0             | 4             | magic `DCFX`                              |
//! | 4             | 2             | format version (`1`)                      |
//! | 6             | 2             | reserved, zero                            |
//! | 8             | 4             | dimension `D` (u32)                       |
//! | 12            | 8             | entry count `N` (u64)                     |
//! | 20            | 4·N·D         | vectors, row-major f32                    |
//! | 20 + 4·N·D    | 8             | payload length `P` (u64)                  |
//! | 28 + 4·N·D    | P             | UTF-8 JSON array of the N cases           |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pca::WeightedEmbedding;
use crate::schema::SurgicalCase;
use crate::stats::IqrBounds;
use crate::strata::StratumLadder;

pub const INDEX_MAGIC: [u8; 4] = *b"DCFX";
pub const INDEX_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

/// Post-processing skips outlier removal at or below this many survivors.
pub const MIN_IQR_SURVIVORS: usize = 4;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot build an index from no entries")]
    EmptyInput,
    #[error("the index is empty")]
    EmptyIndex,
    #[error("M must be at least 1")]
    BadM,
    #[error("indexed case '{0}' has no duration")]
    MissingDuration(String),
    #[error("no candidates to post-process")]
    NoCandidates,
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub case: SurgicalCase,
    pub similarity: f64,
}

/// Flat (exhaustive) index. Vectors are held as f32, the on-disk precision,
/// so a reloaded index answers queries identically.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    dim: usize,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    cases: Vec<SurgicalCase>,
}

fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl FlatIndex {
    pub fn build(entries: Vec<(WeightedEmbedding, SurgicalCase)>) -> Result<Self, RetrievalError> {
        let dim = entries.first().ok_or(RetrievalError::EmptyInput)?.0.vector.len();
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        let mut cases = Vec::with_capacity(entries.len());
        for (emb, case) in entries {
            if emb.vector.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: emb.vector.len(),
                });
            }
            if case.duration_min.is_none() {
                return Err(RetrievalError::MissingDuration(case.id));
            }
            vectors.extend(emb.vector.iter().map(|&x| x as f32));
            cases.push(case);
        }
        Ok(Self::from_parts(dim, vectors, cases))
    }

    fn from_parts(dim: usize, vectors: Vec<f32>, cases: Vec<SurgicalCase>) -> Self {
        let norms = vectors.chunks_exact(dim.max(1)).map(norm_f32).collect();
        FlatIndex {
            dim,
            vectors,
            norms,
            cases,
        }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cases(&self) -> &[SurgicalCase] {
        &self.cases
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Similarity of every entry to `query`, in entry order. Zero-norm
    /// entries score 0.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>, RetrievalError> {
        if query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let q: Vec<f32> = query.iter().map(|&x| x as f32).collect();
        let nq = norm_f32(&q);
        if nq == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        Ok((0..self.len())
            .map(|i| {
                let nv = self.norms[i];
                if nv == 0.0 {
                    return 0.0;
                }
                let dot: f64 = self.vector(i).iter().zip(&q).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot / (nq * nv)).clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// Top-`m` entries by cosine similarity, descending; equal similarities
    /// are ordered by case id, then insertion order.
    pub fn retrieve(&self, query: &WeightedEmbedding, m: usize) -> Result<Vec<RetrievalCandidate>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if m == 0 {
            return Err(RetrievalError::BadM);
        }
        let sims = self.similarities(&query.vector)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            sims[b]
                .total_cmp(&sims[a])
                .then_with(|| self.cases[a].id.cmp(&self.cases[b].id))
                .then(a.cmp(&b))
        };
        let m = m.min(order.len());
        if m < order.len() {
            order.select_nth_unstable_by(m - 1, cmp);
            order.truncate(m);
        }
        order.sort_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| RetrievalCandidate {
                case: self.cases[i].clone(),
                similarity: sims[i],
            })
            .collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RetrievalError> {
        w.write_all(&INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&0u16.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for x in &self.vectors {
            w.write_all(&x.to_le_bytes())?;
        }
        let payload = serde_json::to_vec(&self.cases).map_err(|e| RetrievalError::Format(e.to_string()))?;
        w.write_all(&(payload.len() as u64).to_le_bytes())?;
        w.write_all(&payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RetrievalError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let fmt = |m: &str| RetrievalError::Format(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(fmt("truncated header"));
        }
        if bytes[0..4] != INDEX_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let vec_bytes = count
            .checked_mul(dim)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| fmt("size overflow"))?;
        let vec_end = HEADER_LEN + vec_bytes;
        if bytes.len() < vec_end + 8 {
            return Err(fmt("truncated vector section"));
        }
        let vectors: Vec<f32> = bytes[HEADER_LEN..vec_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let plen = u64::from_le_bytes(bytes[vec_end..vec_end + 8].try_into().unwrap()) as usize;
        let payload = bytes
            .get(vec_end + 8..vec_end + 8 + plen)
            .ok_or_else(|| fmt("truncated payload"))?;
        if vec_end + 8 + plen != bytes.len() {
            return Err(fmt("trailing bytes after payload"));
        }
        let cases: Vec<SurgicalCase> =
            serde_json::from_slice(payload).map_err(|e| RetrievalError::Format(e.to_string()))?;
        if cases.len() != count {
            return Err(fmt("payload case count disagrees with header"));
        }
        Ok(Self::from_parts(dim, vectors, cases))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub case: SurgicalCase,
    pub similarity: f64,
}

impl Reference {
    pub fn duration(&self) -> f64 {
        self.case.duration_min.unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    /// Descending similarity.
    pub references: Vec<Reference>,
    /// Ladder level that produced the set; the unfiltered level when no
    /// candidate shared the query's department or filtering was disabled.
    pub fallback_level: usize,
    /// Outlier fences applied, if the IQR stage ran.
    pub iqr: Option<(f64, f64)>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.references.iter().map(Reference::duration).collect()
    }

    /// Top-`k` of the candidates with no filtering.
    pub fn unfiltered(cands: &[RetrievalCandidate], k: usize, ladder: &StratumLadder) -> Self {
        ReferenceSet {
            references: cands
                .iter()
                .take(k)
                .map(|c| Reference {
                    case: c.case.clone(),
                    similarity: c.similarity,
                })
                .collect(),
            fallback_level: ladder.unfiltered_level(),
            iqr: None,
        }
    }
}

/// Department restriction, hierarchical key-attribute matching and IQR
/// outlier removal, then the top-`k` survivors by similarity.
///
/// Tier choice: the most specific ladder tier with at least `k` survivors,
/// otherwise the most specific non-empty one. When no candidate shares the
/// query's department, the unfiltered candidate list is used.
pub fn postprocess(
    cands: &[RetrievalCandidate],
    query: &SurgicalCase,
    k: usize,
    ladder: &StratumLadder,
) -> Result<ReferenceSet, RetrievalError> {
    if cands.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let same_dept: Vec<&RetrievalCandidate> =
        cands.iter().filter(|c| ladder.same_department(query, &c.case)).collect();

    let (level, pool) = if same_dept.is_empty() {
        (ladder.unfiltered_level(), cands.iter().collect::<Vec<_>>())
    } else {
        let tiers: Vec<(usize, Vec<&RetrievalCandidate>)> = (0..ladder.tiers().len())
            .map(|t| {
                let members = same_dept.iter().copied().filter(|c| ladder.matches(query, &c.case, t)).collect();
                (t, members)
            })
            .collect();
        tiers
            .iter()
            .find(|(_, m)| m.len() >= k)
            .or_else(|| tiers.iter().find(|(_, m)| !m.is_empty()))
            .cloned()
            .expect("department tier is non-empty")
    };

    let (survivors, iqr) = if pool.len() > MIN_IQR_SURVIVORS {
        let durations: Vec<f64> = pool.iter().filter_map(|c| c.case.duration_min).collect();
        let bounds = IqrBounds::of(&durations);
        let kept = pool
            .into_iter()
            .filter(|c| c.case.duration_min.is_some_and(|d| bounds.contains(d)))
            .collect();
        (kept, Some((bounds.low, bounds.high)))
    } else {
        (pool, None)
    };

    Ok(ReferenceSet {
        references: survivors
            .into_iter()
            .take(k)
            .map(|c| Reference {
                case: c.case.clone(),
                similarity: c.similarity,
            })
            .collect(),
        fallback_level: level,
        iqr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Value;

    fn emb(id: &str, v: &[f64]) -> WeightedEmbedding {
        WeightedEmbedding {
            vector: v.to_vec(),
            source_case_id: id.into(),
        }
    }

    fn case(id: &str, dept: &str, name: &str, level: &str, d: f64) -> SurgicalCase {
        SurgicalCase::new(id)
            .with("department", Value::Text(dept.into()))
            .with("surgery_name", Value::Text(name.into()))
            .with("surgery_level", Value::Text(level.into()))
            .with_duration(d)
    }

    fn ladder() -> StratumLadder {
        StratumLadder::from_attributes(vec!["department".into(), "surgery_name".into(), "surgery_level".into()])
    }

    fn cand(c: SurgicalCase, s: f64) -> RetrievalCandidate {
        RetrievalCandidate { case: c, similarity: s }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(RetrievalError::ZeroVector)));
    }

    #[test]
    fn build_checks() {
        let c = |i: &str| case(i, "A", "x", "I", 10.0);
        let idx = FlatIndex::build(vec![
            (emb("a", &[1.0, 0.0, 0.0, 0.0]), c("a")),
            (emb("b", &[0.0, 1.0, 0.0, 0.0]), c("b")),
            (emb("c", &[0.0, 0.0, 1.0, 0.0]), c("c")),
        ])
        .unwrap();
        assert_eq!(idx.len(), 3);
        assert!(matches!(
            FlatIndex::build(vec![(emb("a", &[1.0; 4]), c("a")), (emb("b", &[1.0; 5]), c("b"))]),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert!(matches!(FlatIndex::build(vec![]), Err(RetrievalError::EmptyInput)));
    }

    #[test]
    fn retrieve_full_and_self_match() {
        let c = |i: &str| case(i, "A", "x", "I", 10.0);
        let idx = FlatIndex::build(vec![
            (emb("a", &[1.0, 0.2]), c("a")),
            (emb("b", &[0.0, 1.0]), c("b")),
            (emb("c", &[0.5, 0.5]), c("c")),
        ])
        .unwrap();
        let out = idx.retrieve(&emb("q", &[0.0, 1.0]), 10).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].case.id, "b");
        assert_eq!(out[0].similarity, 1.0);
        assert!(out.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert!(matches!(idx.retrieve(&emb("q", &[0.0, 1.0]), 0), Err(RetrievalError::BadM)));
    }

    #[test]
    fn ties_break_by_id() {
        let c = |i: &str| case(i, "A", "x", "I", 10.0);
        let idx = FlatIndex::build(vec![
            (emb("z", &[1.0, 1.0]), c("z")),
            (emb("m", &[2.0, 2.0]), c("m")),
            (emb("a", &[3.0, 3.0]), c("a")),
        ])
        .unwrap();
        let ids: Vec<_> = idx.retrieve(&emb("q", &[1.0, 1.0]), 2).unwrap().into_iter().map(|c| c.case.id).collect();
        assert_eq!(ids, vec!["a", "m"]);
    }

    #[test]
    fn persistence_round_trip() {
        let c = |i: &str| case(i, "A", "x", "I", 10.0);
        let idx = FlatIndex::build(vec![(emb("a", &[0.1, -0.3]), c("a")), (emb("b", &[0.7, 0.2]), c("b"))]).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"DCFX");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[20..24].try_into().unwrap()), 0.1f32);
        let back = FlatIndex::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.vectors, idx.vectors);
        assert_eq!(back.cases, idx.cases);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(FlatIndex::read_from(bad.as_slice()), Err(RetrievalError::Format(_))));
        assert!(FlatIndex::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn iqr_removes_long_outlier() {
        let q = case("q", "A", "x", "II", 0.0);
        let cands: Vec<_> = [100.0, 110.0, 120.0, 130.0, 500.0]
            .iter()
            .enumerate()
            .map(|(i, &d)| cand(case(&format!("c{i}"), "A", "x", "II", d), 0.9 - i as f64 * 0.01))
            .collect();
        let r = postprocess(&cands, &q, 8, &ladder()).unwrap();
        assert_eq!(r.durations(), vec![100.0, 110.0, 120.0, 130.0]);
        assert_eq!(r.iqr, Some((80.0, 160.0)));
        assert_eq!(r.fallback_level, 0);
    }

    #[test]
    fn vacuous_filters_keep_top_k() {
        let q = case("q", "A", "x", "II", 0.0);
        let cands: Vec<_> = (0..12)
            .map(|i| cand(case(&format!("c{i:02}"), "A", "x", "II", 100.0 + i as f64), 0.99 - i as f64 * 0.01))
            .collect();
        let r = postprocess(&cands, &q, 8, &ladder()).unwrap();
        let ids: Vec<_> = r.references.iter().map(|r| r.case.id.clone()).collect();
        let expected: Vec<_> = cands.iter().take(8).map(|c| c.case.id.clone()).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn no_department_match_falls_through() {
        let q = case("q", "Z", "x", "II", 0.0);
        let cands: Vec<_> =
            (0..3).map(|i| cand(case(&format!("c{i}"), "A", "x", "II", 100.0), 0.9 - i as f64 * 0.1)).collect();
        let r = postprocess(&cands, &q, 8, &ladder()).unwrap();
        assert_eq!(r.fallback_level, 4);
        assert_eq!(r.len(), 3);
        assert!(r.iqr.is_none());
        assert!(matches!(postprocess(&[], &q, 8, &ladder()), Err(RetrievalError::NoCandidates)));
    }

    #[test]
    fn tier_selection_prefers_specific_with_enough() {
        let q = case("q", "A", "x", "II", 0.0);
        let mut cands = Vec::new();
        // 2 exact, 3 same name other level, 4 same level other name
        for i in 0..2 {
            cands.push(cand(case(&format!("e{i}"), "A", "x", "II", 100.0), 0.5));
        }
        for i in 0..3 {
            cands.push(cand(case(&format!("n{i}"), "A", "x", "III", 100.0), 0.6));
        }
        for i in 0..4 {
            cands.push(cand(case(&format!("l{i}"), "A", "y", "II", 100.0), 0.7));
        }
        cands.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        assert_eq!(postprocess(&cands, &q, 2, &ladder()).unwrap().fallback_level, 0);
        assert_eq!(postprocess(&cands, &q, 5, &ladder()).unwrap().fallback_level, 1);
        assert_eq!(postprocess(&cands, &q, 6, &ladder()).unwrap().fallback_level, 2);
        assert_eq!(postprocess(&cands, &q, 9, &ladder()).unwrap().fallback_level, 3);
        // nothing reaches k: most specific non-empty tier
        assert_eq!(postprocess(&cands, &q, 50, &ladder()).unwrap().fallback_level, 0);
    }
}
