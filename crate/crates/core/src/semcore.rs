//! Semantic triples, embeddings and the graph-to-nearest-triple metric.
//!
//! A [`SemanticGraph`] is the ordered list of `(subject, relation, object)`
//! triples extracted from one image. Every triple owns a unit-norm vector in
//! an [`EmbeddingTable`]. The GNT score of a received subset averages, over
//! all original triples, the cosine to the *nearest* received triple; a
//! triple with no received counterpart contributes zero.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::rng_from;

/// Norm tolerance for stored embedding vectors.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Separation targets used by [`synth_embeddings`].
pub const KEY_MAX_COSINE: f64 = 0.2;
pub const COMMON_MIN_COSINE: f64 = 0.7;

/// Angle between the common-cone axis and each common triple.
const COMMON_CONE_ANGLE: f64 = 0.4;
const MAX_DRAWS_PER_VECTOR: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum SemError {
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("unknown triple id {0}")]
    UnknownId(usize),
    #[error("retired mask has length {got}, expected {expected}")]
    MaskLength { got: usize, expected: usize },
    #[error("semantic graph must contain at least one triple")]
    EmptyGraph,
    #[error("triple ids must be unique and contiguous from 0 (position {position} has id {id})")]
    NonContiguousIds { position: usize, id: usize },
    #[error("triple {0} has a zero payload")]
    ZeroPayload(usize),
    #[error("embedding for triple {id} has dimension {got}, expected {expected}")]
    DimensionMismatch { id: usize, got: usize, expected: usize },
    #[error("embedding generation infeasible: {0}")]
    Generation(String),
    #[error("embedding file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTriple {
    pub id: usize,
    pub subject: String,
    pub relation: String,
    pub object: String,
    /// Bits required to send this triple over the air.
    pub payload_bits: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    triples: Vec<SemanticTriple>,
}

impl SemanticGraph {
    pub fn new(triples: Vec<SemanticTriple>) -> Result<Self, SemError> {
        if triples.is_empty() {
            return Err(SemError::EmptyGraph);
        }
        for (position, t) in triples.iter().enumerate() {
            if t.id != position {
                return Err(SemError::NonContiguousIds { position, id: t.id });
            }
            if t.payload_bits == 0 {
                return Err(SemError::ZeroPayload(t.id));
            }
        }
        Ok(Self { triples })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[SemanticTriple] {
        &self.triples
    }

    pub fn payload_bits(&self, id: usize) -> u32 {
        self.triples[id].payload_bits
    }

    pub fn ids(&self) -> Vec<usize> {
        (0..self.triples.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// Builds a table, normalizing every vector to unit length.
    pub fn from_vectors(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self, SemError> {
        let mut out = Vec::with_capacity(vectors.len());
        for (id, v) in vectors.into_iter().enumerate() {
            if v.len() != dim {
                return Err(SemError::DimensionMismatch { id, got: v.len(), expected: dim });
            }
            out.push(normalized(&v)?);
        }
        Ok(Self { dim, vectors: out })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: usize) -> Result<&[f64], SemError> {
        self.vectors.get(id).map(Vec::as_slice).ok_or(SemError::UnknownId(id))
    }

    /// Pairwise cosine matrix over every stored vector.
    pub fn similarity(&self) -> SimilarityMatrix {
        let k = self.vectors.len();
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let c = if i == j { 1.0 } else { dot(&self.vectors[i], &self.vectors[j]).clamp(-1.0, 1.0) };
                values[i * k + j] = c;
                values[j * k + i] = c;
            }
        }
        SimilarityMatrix { k, values }
    }
}

/// Precomputed `K x K` cosine table; lets the environment evaluate GNT every
/// slot without touching the raw vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    k: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    /// GNT of the received subset (given as a membership mask) against all
    /// `K` original triples.
    pub fn gnt_mask(&self, received: &[bool]) -> f64 {
        debug_assert_eq!(received.len(), self.k);
        if !received.iter().any(|&r| r) {
            return 0.0;
        }
        let mut total = 0.0;
        for k in 0..self.k {
            let row = &self.values[k * self.k..(k + 1) * self.k];
            let best = row.iter().zip(received).filter(|(_, &r)| r).map(|(&c, _)| c).fold(f64::NEG_INFINITY, f64::max);
            total += best;
        }
        total / self.k as f64
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn normalized(v: &[f64]) -> Result<Vec<f64>, SemError> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(SemError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, SemError> {
    if u.len() != v.len() {
        return Err(SemError::LengthMismatch { left: u.len(), right: v.len() });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(SemError::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Graph-to-nearest-triple similarity.
///
/// `(1/K) * sum_k max_{j in received} cos(C(k), C(j))`, where a term with no
/// received triple counts as zero. `received_ids` is treated as a set.
pub fn gnt(original_ids: &[usize], received_ids: &[usize], table: &EmbeddingTable) -> Result<f64, SemError> {
    for &id in original_ids.iter().chain(received_ids) {
        table.vector(id)?;
    }
    if original_ids.is_empty() || received_ids.is_empty() {
        return Ok(0.0);
    }
    let received: BTreeSet<usize> = received_ids.iter().copied().collect();
    let mut total = 0.0;
    for &k in original_ids {
        let vk = table.vector(k)?;
        let mut best = f64::NEG_INFINITY;
        for &j in &received {
            let c = if j == k { 1.0 } else { cosine(vk, table.vector(j)?)? };
            best = best.max(c);
        }
        total += best;
    }
    Ok(total / original_ids.len() as f64)
}

/// Mutual-importance matrix (row-major, `K x K`). Rows and columns of
/// retired triples are zeroed.
pub fn state_matrix(graph: &SemanticGraph, table: &EmbeddingTable, retired: &[bool]) -> Result<Vec<f64>, SemError> {
    let k = graph.len();
    if retired.len() != k {
        return Err(SemError::MaskLength { got: retired.len(), expected: k });
    }
    if table.len() < k {
        return Err(SemError::UnknownId(table.len()));
    }
    let sim = table.similarity();
    let mut out = vec![0.0; k * k];
    fill_state_matrix(&sim, retired, &mut out);
    Ok(out)
}

/// Writes the masked importance matrix into `out` (length `K*K`).
pub fn fill_state_matrix(sim: &SimilarityMatrix, retired: &[bool], out: &mut [f64]) {
    let k = sim.len();
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = if retired[i] || retired[j] { 0.0 } else { sim.get(i, j) };
        }
    }
}

fn random_unit(dim: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = normalized(&v) {
            return u;
        }
    }
}

/// Removes the components along each (unit) vector in `basis`.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
}

/// Deterministic synthetic embeddings.
///
/// The first `key_count` ids are "key" triples, mutually orthogonal and
/// orthogonal to the cone axis, with cosine below [`KEY_MAX_COSINE`] to every
/// other triple. The remaining ids are "common" triples placed on a narrow
/// cone around a shared axis, pairwise cosine above [`COMMON_MIN_COSINE`].
pub fn synth_embeddings(k: usize, dim: usize, seed: u64, key_count: usize) -> Result<EmbeddingTable, SemError> {
    if k == 0 {
        return Err(SemError::EmptyGraph);
    }
    if dim < 2 {
        return Err(SemError::Generation(format!("dimension {dim} < 2")));
    }
    if key_count > k {
        return Err(SemError::Generation(format!("key_count {key_count} exceeds K = {k}")));
    }
    let common = k - key_count;
    let needed = key_count + usize::from(common > 0);
    if needed > dim {
        return Err(SemError::Generation(format!(
            "{key_count} key triples plus a common axis need {needed} dimensions, have {dim}"
        )));
    }

    let mut rng = rng_from(seed);
    let axis = random_unit(dim, &mut rng);

    let mut keys: Vec<Vec<f64>> = Vec::with_capacity(key_count);
    for _ in 0..key_count {
        let mut basis = vec![axis.clone()];
        basis.extend(keys.iter().cloned());
        let mut v = random_unit(dim, &mut rng);
        orthogonalize(&mut v, &basis);
        keys.push(normalized(&v).map_err(|_| SemError::Generation("degenerate key direction".into()))?);
    }

    let (cos_a, sin_a) = (COMMON_CONE_ANGLE.cos(), COMMON_CONE_ANGLE.sin());
    let mut commons: Vec<Vec<f64>> = Vec::with_capacity(common);
    for _ in 0..common {
        let mut accepted = None;
        for _ in 0..MAX_DRAWS_PER_VECTOR {
            let mut n = random_unit(dim, &mut rng);
            orthogonalize(&mut n, std::slice::from_ref(&axis));
            let Ok(n) = normalized(&n) else { continue };
            let v: Vec<f64> = axis.iter().zip(&n).map(|(a, b)| cos_a * a + sin_a * b).collect();
            let ok_common = commons.iter().all(|c| dot(c, &v) > COMMON_MIN_COSINE);
            let ok_keys = keys.iter().all(|kv| dot(kv, &v) < KEY_MAX_COSINE);
            if ok_common && ok_keys {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => commons.push(v),
            None => {
                return Err(SemError::Generation(format!(
                    "could not place common triple {} within {MAX_DRAWS_PER_VECTOR} draws",
                    key_count + commons.len()
                )))
            }
        }
    }

    keys.extend(commons);
    EmbeddingTable::from_vectors(dim, keys)
}

const SUBJECTS: [&str; 10] = ["man", "woman", "dog", "car", "horse", "child", "bike", "cat", "bus", "bird"];
const RELATIONS: [&str; 8] = ["on", "near", "holding", "riding", "behind", "wearing", "under", "next to"];
const OBJECTS: [&str; 10] = ["street", "table", "grass", "shirt", "tree", "bench", "hat", "road", "wall", "sign"];

/// Payload sizes of synthesized triples are uniform on this inclusive range.
pub const SYNTH_PAYLOAD_BITS: (u32, u32) = (384, 416);

/// Deterministic labelled graph of `k` triples with seeded payload sizes.
pub fn synth_graph(k: usize, seed: u64) -> Result<SemanticGraph, SemError> {
    let mut rng = rng_from(seed);
    let triples = (0..k)
        .map(|id| SemanticTriple {
            id,
            subject: SUBJECTS[rng.random_range(0..SUBJECTS.len())].to_string(),
            relation: RELATIONS[rng.random_range(0..RELATIONS.len())].to_string(),
            object: OBJECTS[rng.random_range(0..OBJECTS.len())].to_string(),
            payload_bits: rng.random_range(SYNTH_PAYLOAD_BITS.0..=SYNTH_PAYLOAD_BITS.1),
        })
        .collect();
    SemanticGraph::new(triples)
}

/// A graph together with its embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScene {
    pub graph: SemanticGraph,
    pub table: EmbeddingTable,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    dim: usize,
    triples: Vec<SceneFileTriple>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFileTriple {
    id: usize,
    subject: String,
    relation: String,
    object: String,
    payload_bits: u32,
    embedding: Vec<f64>,
}

impl SemanticScene {
    pub fn synthetic(k: usize, dim: usize, seed: u64, key_count: usize) -> Result<Self, SemError> {
        use crate::seeding::{derive_seed, stream};
        let graph = synth_graph(k, derive_seed(seed, &[stream::EMBEDDINGS, 0]))?;
        let table = synth_embeddings(k, dim, derive_seed(seed, &[stream::EMBEDDINGS, 1]), key_count)?;
        Ok(Self { graph, table })
    }

    pub fn from_json_str(text: &str) -> Result<Self, SemError> {
        let mut file: SceneFile = serde_json::from_str(text).map_err(|e| SemError::Io(e.to_string()))?;
        file.triples.sort_by_key(|t| t.id);
        let mut triples = Vec::with_capacity(file.triples.len());
        let mut vectors = Vec::with_capacity(file.triples.len());
        for t in file.triples {
            if t.embedding.len() != file.dim {
                return Err(SemError::DimensionMismatch { id: t.id, got: t.embedding.len(), expected: file.dim });
            }
            vectors.push(t.embedding);
            triples.push(SemanticTriple {
                id: t.id,
                subject: t.subject,
                relation: t.relation,
                object: t.object,
                payload_bits: t.payload_bits,
            });
        }
        let graph = SemanticGraph::new(triples)?;
        let table = EmbeddingTable::from_vectors(file.dim, vectors)?;
        Ok(Self { graph, table })
    }

    pub fn load(path: &Path) -> Result<Self, SemError> {
        let text = fs::read_to_string(path).map_err(|e| SemError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let file = SceneFile {
            dim: self.table.dim(),
            triples: self
                .graph
                .triples()
                .iter()
                .map(|t| SceneFileTriple {
                    id: t.id,
                    subject: t.subject.clone(),
                    relation: t.relation.clone(),
                    object: t.object.clone(),
                    payload_bits: t.payload_bits,
                    embedding: self.table.vectors[t.id].clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("scene serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), SemError> {
        fs::write(path, self.to_json_string()).map_err(|e| SemError::Io(format!("{}: {e}", path.display())))
    }
}
