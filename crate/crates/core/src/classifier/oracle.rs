use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::session::{Phase, QueryBatch, Session};
use crate::error::Result;
use crate::imaging::Point;
use crate::synth::match_points;

/// Answers queries from ground truth: a cluster is a true occurrence when it
/// is matched one-to-one to a target centre within the tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    positives: BTreeSet<usize>,
}

impl Oracle {
    pub fn from_truth(centers: &[Point], targets: &[Point], tol: f64) -> Oracle {
        let positives = match_points(centers, targets, tol).into_iter().flatten().collect();
        Oracle { positives }
    }

    pub fn from_positives(positives: impl IntoIterator<Item = usize>) -> Oracle {
        Oracle { positives: positives.into_iter().collect() }
    }

    pub fn label(&self, cluster: usize) -> bool {
        self.positives.contains(&cluster)
    }

    pub fn answer(&self, batch: &QueryBatch) -> BTreeMap<usize, bool> {
        batch.entries.iter().map(|e| (e.cluster, self.label(e.cluster))).collect()
    }

    /// The bias that best agrees with the oracle on the slider batch, taken
    /// from the gaps between consecutive slider scores and the range ends.
    /// Ties go to the bias farthest from both ends, which leaves the widest
    /// margin to query.
    pub fn choose_bias(&self, batch: &QueryBatch, b_min: f64, b_max: f64) -> f64 {
        let mut entries: Vec<(f64, bool)> = batch.entries.iter().map(|e| (e.score, self.label(e.cluster))).collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut candidates: Vec<f64> =
            entries.windows(2).filter(|w| w[1].0 > w[0].0).map(|w| 0.5 * (w[0].0 + w[1].0)).collect();
        candidates.extend([b_min, b_max]);
        let disagreement = |b: f64| entries.iter().filter(|(s, l)| (*s > b) != *l).count();
        // Ties go to the threshold farthest from both range ends.
        let room = |b: f64| (b - b_min).min(b_max - b);
        let mut best = (usize::MAX, f64::NEG_INFINITY, b_min);
        for b in candidates {
            let (d, r) = (disagreement(b), room(b));
            if d < best.0 || (d == best.0 && r > best.1) {
                best = (d, r, b);
            }
        }
        best.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub rounds: usize,
    /// Labels flipped relative to the predictions shown.
    pub clicks: usize,
    pub converged: bool,
}

/// Drive a session to completion with oracle answers.
pub fn run_oracle_session(session: &mut Session, oracle: &Oracle) -> Result<OracleSummary> {
    let mut clicks = 0;
    if session.phase() == Phase::Slider {
        let batch = session.pending().expect("slider batch is pending").clone();
        let st = session.state();
        let b = oracle.choose_bias(&batch, st.b_min, st.b_max);
        session.set_bias(b)?;
    }
    while session.phase() == Phase::Querying {
        let batch = session.pending().expect("query batch is pending").clone();
        let outcome = session.apply_corrections(&oracle.answer(&batch))?;
        clicks += outcome.corrections;
    }
    Ok(OracleSummary { rounds: session.state().round, clicks, converged: session.phase() == Phase::Converged })
}
