//! Random feature reorganization.
//!
//! `m` vectors of length `d` are stacked into an `m×d` matrix, each row is
//! cut into `s` segments of `d/s`, the (row, segment) axes are swapped and the
//! result is flattened. The whole operator is one index permutation of the
//! concatenated input, so it is applied with
//! [`Graph::permute_entries`](crate::tape::Graph::permute_entries).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Graph, NodeId};

/// Candidate segment counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSet(Vec<usize>);

impl SegmentSet {
    pub fn new(values: Vec<usize>) -> Result<Self> {
        if values.is_empty() || values.contains(&0) {
            return Err(Error::config("segment values must be non-empty and >= 1"));
        }
        let mut sorted = values.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != values.len() {
            return Err(Error::config("segment values must be distinct"));
        }
        Ok(SegmentSet(values))
    }

    /// `{1, 2, 4, 8, 16, 32, 64, 128}`
    pub fn paper_default() -> Self {
        SegmentSet((0..8).map(|p| 1usize << p).collect())
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn divisors_of(&self, d: usize) -> Vec<usize> {
        self.0.iter().copied().filter(|&s| d % s == 0).collect()
    }
}

/// How the segment count is chosen for a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegmentChoice {
    /// Uniform over the set members dividing `d`.
    #[default]
    Random,
    /// Always this value.
    Pinned(usize),
}

/// Uniform draw from `{s ∈ S : s | d}`.
pub fn sample_segment(set: &SegmentSet, d: usize, rng: &mut Rng) -> Result<usize> {
    let valid = set.divisors_of(d);
    if valid.is_empty() {
        return Err(Error::config(format!(
            "no segment value in {:?} divides {d}",
            set.values()
        )));
    }
    Ok(valid[rng.random_range(0..valid.len())])
}

/// `out[(k·m + r)·(d/s) + j] = in[r·d + k·(d/s) + j]`.
pub fn build_permutation(m: usize, d: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || d % s != 0 {
        return Err(Error::config(format!("segment value {s} does not divide {d}")));
    }
    let seg = d / s;
    let mut perm = Vec::with_capacity(m * d);
    for k in 0..s {
        for r in 0..m {
            for j in 0..seg {
                perm.push(r * d + k * seg + j);
            }
        }
    }
    Ok(perm)
}

/// A realized reorganization, kept for logging and reproduction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfrDraw {
    pub segment: usize,
    pub vectors: usize,
    pub len: usize,
    pub permutation: Arc<[usize]>,
}

/// Precomputed permutations keyed by `(m, d, s)`. Immutable once built, so it
/// can be shared by concurrent passes.
#[derive(Debug, Clone, Default)]
pub struct PermutationCache {
    map: BTreeMap<(usize, usize, usize), Arc<[usize]>>,
}

impl PermutationCache {
    /// Permutations for every `(m, d)` shape and every member of `set` dividing `d`.
    pub fn for_shapes(shapes: &[(usize, usize)], set: &SegmentSet) -> Self {
        let mut map = BTreeMap::new();
        for &(m, d) in shapes {
            for s in set.divisors_of(d) {
                let p = build_permutation(m, d, s).expect("divisor");
                map.insert((m, d, s), Arc::from(p));
            }
        }
        PermutationCache { map }
    }

    pub fn get(&self, m: usize, d: usize, s: usize) -> Result<Arc<[usize]>> {
        match self.map.get(&(m, d, s)) {
            Some(p) => Ok(p.clone()),
            None => Ok(Arc::from(build_permutation(m, d, s)?)),
        }
    }
}

/// Concatenate `vectors` (all `1×d`) and reorganize them with one segment draw.
pub fn rfr_forward(
    g: &mut Graph,
    vectors: &[NodeId],
    set: &SegmentSet,
    choice: SegmentChoice,
    rng: &mut Rng,
    cache: &PermutationCache,
) -> Result<(NodeId, RfrDraw)> {
    let Some(&first) = vectors.first() else {
        return Err(Error::config("rfr_forward needs at least one vector"));
    };
    let shape = g.shape(first);
    if shape.0 != 1 {
        return Err(Error::Shape {
            op: "rfr_forward",
            left: shape,
            right: (1, shape.1),
        });
    }
    for &v in vectors {
        if g.shape(v) != shape {
            return Err(Error::Shape {
                op: "rfr_forward",
                left: shape,
                right: g.shape(v),
            });
        }
    }
    let (m, d) = (vectors.len(), shape.1);
    let segment = match choice {
        SegmentChoice::Random => sample_segment(set, d, rng)?,
        SegmentChoice::Pinned(s) => s,
    };
    let permutation = cache.get(m, d, segment)?;
    let cat = g.concat_cols(vectors)?;
    let out = g.permute_entries(cat, permutation.clone())?;
    Ok((
        out,
        RfrDraw {
            segment,
            vectors: m,
            len: d,
            permutation,
        },
    ))
}
