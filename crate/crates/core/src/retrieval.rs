//! Similarity search over the past-game memory: find the stored games whose
//! opening turns look most like the game being played right now.

use crate::error::{Error, Result};
use crate::game::GameRecord;
use crate::memory::{CurrentHistory, PastMemory};

/// Position-wise joint-action match rate over the compared prefix, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub value: f64,
    /// Index of the scored record in the memory it came from.
    pub record_ref: usize,
}

/// Fraction of the first `m` turns where both players' moves match, with `m`
/// the current history's length.
pub fn prefix_similarity(c: &CurrentHistory, rec: &GameRecord, record_ref: usize) -> Result<SimilarityScore> {
    let m = c.len();
    if m == 0 {
        return Err(Error::Domain(
            "similarity needs at least one completed turn".into(),
        ));
    }
    if rec.len() < m {
        return Err(Error::Domain(format!(
            "record of length {} is shorter than the {m}-turn prefix",
            rec.len()
        )));
    }
    let matches = c
        .pairs()
        .iter()
        .zip(rec.pairs())
        .filter(|(a, b)| **a == *b)
        .count();
    Ok(SimilarityScore {
        value: matches as f64 / m as f64,
        record_ref,
    })
}

/// The `k` most similar stored games, best first.
///
/// Only records strictly longer than the current prefix are eligible (they
/// must still have a future to learn from). Ties prefer the higher stored
/// score difference, then the older record. Returns fewer than `k` items
/// only when the memory has fewer eligible records; an empty memory yields
/// an empty list for the caller to fall back on.
pub fn top_k_similar(c: &CurrentHistory, p: &PastMemory, k: usize) -> Result<Vec<usize>> {
    top_k_similar_excluding(c, p, k, None)
}

/// Same search with one record index held out, for leave-one-out training.
pub fn top_k_similar_excluding(
    c: &CurrentHistory,
    p: &PastMemory,
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<usize>> {
    let m = c.len();
    if m == 0 {
        return Err(Error::Domain(
            "retrieval needs at least one completed turn".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Domain("k must be positive".into()));
    }
    let mut scored: Vec<(f64, f64, usize)> = Vec::new();
    for (idx, rec) in p.items().iter().enumerate() {
        if Some(idx) == exclude {
            continue;
        }
        if rec.len() > m {
            let sim = prefix_similarity(c, rec, idx)?;
            scored.push((sim.value, rec.delta_r, idx));
        }
    }
    // Sort key: similarity desc, delta_r desc, insertion order asc. The sort
    // is stable, so equal keys already stand in insertion order.
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(b.1.partial_cmp(&a.1).unwrap())
    });
    Ok(scored.into_iter().take(k).map(|(_, _, idx)| idx).collect())
}
