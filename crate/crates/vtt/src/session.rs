use std::path::PathBuf;

use chrono::{DateTime, Utc};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{VttError, VttResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Real,
    Synthetic,
}

impl Truth {
    pub fn as_str(self) -> &'static str {
        match self {
            Truth::Real => "real",
            Truth::Synthetic => "synthetic",
        }
    }
}

/// One image a session may draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub image_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VttItem {
    pub item_id: String,
    pub image_id: String,
    pub path: PathBuf,
    pub truth: Truth,
}

/// Server-side session record; never sent to raters as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VttSession {
    pub session_id: String,
    pub rater_id: String,
    pub created_at: DateTime<Utc>,
    pub seed: u64,
    pub items: Vec<VttItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub session_id: String,
    pub item_id: String,
    pub judgment: Truth,
    pub elapsed_ms: u64,
    pub submitted_at: DateTime<Utc>,
}

fn draw(pool: &[PoolEntry], n: usize, truth: Truth, rng: &mut ChaCha8Rng) -> VttResult<Vec<(PoolEntry, Truth)>> {
    if pool.len() < n {
        return Err(VttError::InsufficientPool {
            truth: truth.as_str(),
            available: pool.len(),
            requested: n,
            shortfall: n - pool.len(),
        });
    }
    Ok(index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| (pool[i].clone(), truth))
        .collect())
}

/// Draw `n_per_class` images uniformly without replacement from each pool
/// and shuffle the merged list with a seeded uniform permutation.
pub fn create_session(
    real: &[PoolEntry],
    synthetic: &[PoolEntry],
    n_per_class: usize,
    rater_id: &str,
    seed: u64,
    session_id: &str,
) -> VttResult<VttSession> {
    if n_per_class == 0 {
        return Err(VttError::InvalidRequest("n_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = draw(real, n_per_class, Truth::Real, &mut rng)?;
    drawn.extend(draw(synthetic, n_per_class, Truth::Synthetic, &mut rng)?);
    drawn.shuffle(&mut rng);
    let items = drawn
        .into_iter()
        .enumerate()
        .map(|(k, (e, truth))| VttItem {
            item_id: format!("{session_id}-{k:04}"),
            image_id: e.image_id,
            path: e.path,
            truth,
        })
        .collect();
    Ok(VttSession {
        session_id: session_id.to_string(),
        rater_id: rater_id.to_string(),
        created_at: Utc::now(),
        seed,
        items,
    })
}

/// Counts indexed by truth, then judgment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub real: JudgmentCounts,
    pub synthetic: JudgmentCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentCounts {
    pub real: usize,
    pub synthetic: usize,
}

impl JudgmentCounts {
    fn total(&self) -> usize {
        self.real + self.synthetic
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub real: f64,
    pub synthetic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VttReport {
    pub session_id: String,
    pub rater_id: String,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub per_class_accuracy: PerClass,
    pub n_items: usize,
    pub n_ratings: usize,
    pub complete: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Tally `ratings` against the session's truths. Accuracies are 0 while
/// nothing is rated.
pub fn session_report(session: &VttSession, ratings: &[Rating]) -> VttReport {
    let mut c = Confusion::default();
    for r in ratings {
        let Some(item) = session.items.iter().find(|i| i.item_id == r.item_id) else {
            continue;
        };
        let row = match item.truth {
            Truth::Real => &mut c.real,
            Truth::Synthetic => &mut c.synthetic,
        };
        match r.judgment {
            Truth::Real => row.real += 1,
            Truth::Synthetic => row.synthetic += 1,
        }
    }
    let n_ratings = c.real.total() + c.synthetic.total();
    VttReport {
        session_id: session.session_id.clone(),
        rater_id: session.rater_id.clone(),
        accuracy: ratio(c.real.real + c.synthetic.synthetic, n_ratings),
        confusion: c,
        per_class_accuracy: PerClass {
            real: ratio(c.real.real, c.real.total()),
            synthetic: ratio(c.synthetic.synthetic, c.synthetic.total()),
        },
        n_items: session.items.len(),
        n_ratings,
        complete: n_ratings == session.items.len(),
    }
}
