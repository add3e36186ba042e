use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::svm::{train_soft_svm, Separator, SvmConfig};
use crate::error::{Error, Result};

/// Margin added around the extreme scores so the bias range reaches
/// all-positive and all-negative decisions.
const BIAS_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Slider,
    Querying,
    Converged,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Slider => "slider",
            Phase::Querying => "querying",
            Phase::Converged => "converged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    NearPlus,
    FarPlus,
    NearMinus,
    FarMinus,
    Slider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub cluster: usize,
    pub score: f64,
    pub predicted: bool,
    pub zone: Zone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub round: usize,
    pub entries: Vec<QueryEntry>,
}

impl QueryBatch {
    pub fn cluster_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.cluster).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub svm: SvmConfig,
    /// Samples per side from the inner half of the margin.
    pub near_samples: usize,
    /// Samples per side from the outer half of the margin.
    pub far_samples: usize,
    pub slider_size: usize,
    /// A query round needs at least this many candidates.
    pub min_batch: usize,
    pub max_rounds: usize,
    pub rng_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            svm: SvmConfig::default(),
            near_samples: 7,
            far_samples: 3,
            slider_size: 20,
            min_batch: 4,
            max_rounds: 25,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub separator: Separator,
    pub b_min: f64,
    pub b_max: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub user_labels: BTreeMap<usize, bool>,
    /// Completed correction rounds.
    pub round: usize,
    pub phase: Phase,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Init {
        clusters: usize,
        w: Vec<f64>,
        b_min: f64,
        b_max: f64,
        slider: Vec<usize>,
    },
    Bias {
        b: f64,
        delta_plus: f64,
        delta_minus: f64,
        phase: Phase,
    },
    Batch {
        round: usize,
        clusters: Vec<usize>,
    },
    Round {
        round: usize,
        corrections: Vec<usize>,
        training_size: usize,
        w: Vec<f64>,
        b: f64,
        b_min: f64,
        b_max: f64,
        delta_plus: f64,
        delta_minus: f64,
        phase: Phase,
    },
    Exhausted {
        round: usize,
        candidates: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub corrections: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
    pub count: usize,
    pub converged: bool,
}

/// The active-learning state machine over a fixed set of cluster
/// descriptors. Drivers (a person behind the service or a ground-truth
/// oracle) alternate between reading the pending batch and answering it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    config: SessionConfig,
    features: Vec<Vec<f64>>,
    state: SessionState,
    pending: Option<QueryBatch>,
    log: Vec<LogRecord>,
}

impl Session {
    /// Seeds `w` with the first basis vector and opens the slider phase.
    pub fn new(features: Vec<Vec<f64>>, config: SessionConfig) -> Result<Session> {
        if features.len() < 2 {
            return Err(Error::TooFewClusters { needed: 2, got: features.len() });
        }
        let dim = features[0].len();
        let mut w = vec![0.0; dim];
        w[0] = 1.0;
        let separator = Separator { w, b: 0.0 };
        let (lo, hi) = score_range(&separator, &features);
        let state = SessionState {
            separator: Separator { b: lo, ..separator },
            b_min: lo,
            b_max: hi,
            delta_plus: 0.0,
            delta_minus: 0.0,
            user_labels: BTreeMap::new(),
            round: 0,
            phase: Phase::Slider,
        };
        let mut session = Session { config, features, state, pending: None, log: Vec::new() };
        let slider = session.slider_batch();
        session.log.push(LogRecord::Init {
            clusters: session.features.len(),
            w: session.state.separator.w.clone(),
            b_min: lo,
            b_max: hi,
            slider: slider.cluster_ids(),
        });
        session.pending = Some(slider);
        Ok(session)
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("log records serialize") + "\n").collect()
    }

    /// The batch awaiting an answer: slider clusters before the bias is set,
    /// query clusters afterwards, nothing once converged.
    pub fn pending(&self) -> Option<&QueryBatch> {
        self.pending.as_ref()
    }

    pub fn score(&self, k: usize) -> f64 {
        self.state.separator.score(&self.features[k])
    }

    pub fn scores(&self) -> Vec<f64> {
        self.features.iter().map(|f| self.state.separator.score(f)).collect()
    }

    fn entry(&self, k: usize, zone: Zone) -> QueryEntry {
        QueryEntry { cluster: k, score: self.score(k), predicted: self.state.separator.decide(&self.features[k]), zone }
    }

    /// Clusters at evenly spaced score ranks, lowest score first.
    pub fn slider_batch(&self) -> QueryBatch {
        let scores = self.scores();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let n = order.len();
        let m = self.config.slider_size.min(n);
        let mut picks: Vec<usize> = (0..m)
            .map(|k| if m == 1 { 0 } else { (k as f64 * (n - 1) as f64 / (m - 1) as f64).round() as usize })
            .collect();
        picks.dedup();
        QueryBatch { round: 0, entries: picks.into_iter().map(|r| self.entry(order[r], Zone::Slider)).collect() }
    }

    /// Fix the bias chosen with the slider and open the first query round.
    pub fn set_bias(&mut self, b: f64) -> Result<()> {
        if self.state.phase != Phase::Slider {
            return Err(Error::WrongPhase(self.state.phase.name().into()));
        }
        if !b.is_finite() {
            return Err(Error::InvalidConfig("bias must be finite".into()));
        }
        let s = &mut self.state;
        s.separator.b = b.clamp(s.b_min, s.b_max);
        let delta = (s.separator.b - s.b_min).abs().min((s.separator.b - s.b_max).abs());
        s.delta_plus = delta;
        s.delta_minus = delta;
        s.phase = Phase::Querying;
        self.log.push(LogRecord::Bias { b: s.separator.b, delta_plus: delta, delta_minus: delta, phase: s.phase });
        self.pending = None;
        self.open_round();
        Ok(())
    }

    fn zone_of(&self, score: f64) -> Option<Zone> {
        let s = &self.state;
        let b = s.separator.b;
        let (dp, dm) = (s.delta_plus, s.delta_minus);
        if score > b {
            if score <= b + dp / 2.0 {
                Some(Zone::NearPlus)
            } else if score <= b + dp {
                Some(Zone::FarPlus)
            } else {
                None
            }
        } else if score >= b - dm / 2.0 {
            Some(Zone::NearMinus)
        } else if score >= b - dm {
            Some(Zone::FarMinus)
        } else {
            None
        }
    }

    /// Sample the next batch from the four margin zones, skipping clusters
    /// the user has already labelled.
    pub fn next_query_batch(&self) -> Result<QueryBatch> {
        if self.state.phase != Phase::Querying {
            return Err(Error::WrongPhase(self.state.phase.name().into()));
        }
        let mut zones: BTreeMap<Zone, Vec<usize>> = BTreeMap::new();
        for k in 0..self.features.len() {
            if self.state.user_labels.contains_key(&k) {
                continue;
            }
            if let Some(z) = self.zone_of(self.score(k)) {
                zones.entry(z).or_default().push(k);
            }
        }
        let total: usize = zones.values().map(Vec::len).sum();
        if total < self.config.min_batch {
            return Err(Error::InsufficientClusters(total));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        rng.set_stream(self.state.round as u64 + 1);
        let mut entries = Vec::new();
        for zone in [Zone::NearPlus, Zone::FarPlus, Zone::NearMinus, Zone::FarMinus] {
            let pool = zones.get(&zone).map(Vec::as_slice).unwrap_or(&[]);
            let want = match zone {
                Zone::NearPlus | Zone::NearMinus => self.config.near_samples,
                _ => self.config.far_samples,
            };
            let mut picked: Vec<usize> =
                index::sample(&mut rng, pool.len(), want.min(pool.len())).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            entries.extend(picked.into_iter().map(|k| self.entry(k, zone)));
        }
        Ok(QueryBatch { round: self.state.round + 1, entries })
    }

    fn open_round(&mut self) {
        if self.state.phase != Phase::Querying {
            return;
        }
        match self.next_query_batch() {
            Ok(batch) => {
                self.log.push(LogRecord::Batch { round: batch.round, clusters: batch.cluster_ids() });
                self.pending = Some(batch);
            }
            Err(Error::InsufficientClusters(n)) => {
                self.state.phase = Phase::Converged;
                self.log.push(LogRecord::Exhausted { round: self.state.round, candidates: n });
            }
            Err(e) => unreachable!("query batch in querying phase: {e}"),
        }
    }

    /// Take the labels for the whole pending batch, retrain and adapt the
    /// margins, then open the next round unless the session has converged.
    pub fn apply_corrections(&mut self, responses: &BTreeMap<usize, bool>) -> Result<RoundOutcome> {
        if self.state.phase != Phase::Querying {
            return Err(Error::WrongPhase(self.state.phase.name().into()));
        }
        let batch = self.pending.clone().ok_or_else(|| Error::WrongPhase(self.state.phase.name().into()))?;
        if let Some(missing) = batch.entries.iter().find(|e| !responses.contains_key(&e.cluster)) {
            return Err(Error::IncompleteResponse(missing.cluster));
        }
        let corrected: Vec<&QueryEntry> =
            batch.entries.iter().filter(|e| responses[&e.cluster] != e.predicted).collect();
        for e in &batch.entries {
            self.state.user_labels.insert(e.cluster, responses[&e.cluster]);
        }

        let s = &self.state;
        let b = s.separator.b;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (k, f) in self.features.iter().enumerate() {
            let label = match s.user_labels.get(&k) {
                Some(&l) => Some(l),
                None => {
                    let score = s.separator.score(f);
                    if score > b + s.delta_plus {
                        Some(true)
                    } else if score < b - s.delta_minus {
                        Some(false)
                    } else {
                        None
                    }
                }
            };
            if let Some(l) = label {
                points.push(f.clone());
                labels.push(l);
            }
        }
        let far_update = |zone: Zone, delta: f64| {
            let far: Vec<&QueryEntry> = batch.entries.iter().filter(|e| e.zone == zone).collect();
            let changed = corrected.iter().any(|e| e.zone == zone);
            if far.len() >= self.config.far_samples && changed {
                delta * 2.0
            } else {
                delta / 2.0
            }
        };
        let delta_plus = far_update(Zone::FarPlus, self.state.delta_plus);
        let delta_minus = far_update(Zone::FarMinus, self.state.delta_minus);

        match train_soft_svm(&points, &labels, &self.config.svm) {
            // Unit-norm separator keeps the margins in the units they were
            // set in; decisions are unaffected.
            Ok(sep) => self.state.separator = sep.normalized(),
            Err(Error::SingleClass | Error::DegenerateSeparator) => {}
            Err(e) => return Err(e),
        }
        let (lo, hi) = score_range(&self.state.separator, &self.features);
        let s = &mut self.state;
        s.b_min = lo.min(s.separator.b);
        s.b_max = hi.max(s.separator.b);
        s.delta_plus = delta_plus.clamp(0.0, s.b_max - s.separator.b);
        s.delta_minus = delta_minus.clamp(0.0, s.separator.b - s.b_min);
        s.round += 1;
        if corrected.is_empty() || s.round >= self.config.max_rounds {
            s.phase = Phase::Converged;
        }
        self.log.push(LogRecord::Round {
            round: s.round,
            corrections: corrected.iter().map(|e| e.cluster).collect(),
            training_size: points.len(),
            w: s.separator.w.clone(),
            b: s.separator.b,
            b_min: s.b_min,
            b_max: s.b_max,
            delta_plus: s.delta_plus,
            delta_minus: s.delta_minus,
            phase: s.phase,
        });
        let outcome =
            RoundOutcome { round: s.round, corrections: corrected.len(), converged: s.phase == Phase::Converged };
        self.pending = None;
        self.open_round();
        Ok(RoundOutcome { converged: self.state.phase == Phase::Converged, ..outcome })
    }

    /// Final decisions; explicit user labels take precedence.
    pub fn classify_all(&self) -> Classification {
        let scores = self.scores();
        let labels: Vec<bool> = (0..self.features.len())
            .map(|k| {
                self.state.user_labels.get(&k).copied().unwrap_or_else(|| scores[k] - self.state.separator.b > 0.0)
            })
            .collect();
        Classification {
            count: labels.iter().filter(|l| **l).count(),
            labels,
            scores,
            converged: self.state.phase == Phase::Converged,
        }
    }

    /// End the session without further queries.
    pub fn finish(&mut self) {
        self.state.phase = Phase::Converged;
        self.pending = None;
    }
}

fn score_range(sep: &Separator, features: &[Vec<f64>]) -> (f64, f64) {
    let (lo, hi) = features
        .iter()
        .map(|f| sep.score(f))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    (lo - BIAS_MARGIN, hi + BIAS_MARGIN)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(scores: &[f64]) -> Vec<Vec<f64>> {
        scores.iter().map(|&s| vec![s, 0.0, 0.0]).collect()
    }

    #[test]
    fn init_ranges_and_phase() {
        let s = Session::new(one_d(&[1.0, 5.0, 9.0]), SessionConfig::default()).unwrap();
        let st = s.state();
        assert!(st.b_min < 1.0 && st.b_max > 9.0);
        assert_eq!(st.separator.w, vec![1.0, 0.0, 0.0]);
        assert_eq!(s.phase(), Phase::Slider);
        assert_eq!(s.classify_all().count, 3);
        assert!(matches!(Session::new(one_d(&[1.0]), SessionConfig::default()), Err(Error::TooFewClusters { .. })));
    }

    #[test]
    fn slider_samples_score_ranks_evenly() {
        let scores: Vec<f64> = (0..39).map(|k| ((k * 17) % 39) as f64).collect();
        let s = Session::new(one_d(&scores), SessionConfig::default()).unwrap();
        let batch = s.pending().unwrap();
        assert_eq!(batch.entries.len(), 20);
        let got: Vec<f64> = batch.entries.iter().map(|e| e.score).collect();
        let want: Vec<f64> = (0..20).map(|k| (2 * k) as f64).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn bias_sets_margins() {
        let mut s =
            Session::new(one_d(&(0..=10).map(f64::from).collect::<Vec<_>>()), SessionConfig::default()).unwrap();
        let hi = s.state().b_max;
        s.set_bias(hi - 0.5).unwrap();
        assert!((s.state().delta_plus - 0.5).abs() < 1e-12);
        assert_eq!(s.state().delta_plus, s.state().delta_minus);
        assert!(matches!(s.set_bias(1.0), Err(Error::WrongPhase(_))));

        let mut mid =
            Session::new(one_d(&(0..=10).map(f64::from).collect::<Vec<_>>()), SessionConfig::default()).unwrap();
        mid.set_bias(4.5).unwrap();
        assert_eq!(mid.classify_all().count, 6);

        let mut top = Session::new(one_d(&[0.0, 1.0, 2.0]), SessionConfig::default()).unwrap();
        let b_max = top.state().b_max;
        top.set_bias(b_max).unwrap();
        assert_eq!(top.classify_all().count, 0);
    }

    #[test]
    fn full_batch_when_zones_are_populated() {
        let scores: Vec<f64> = (0..100).map(|k| k as f64 / 10.0).collect();
        let mut s = Session::new(one_d(&scores), SessionConfig::default()).unwrap();
        s.set_bias(5.0).unwrap();
        let b = s.pending().unwrap();
        let count = |z| b.entries.iter().filter(|e| e.zone == z).count();
        assert_eq!(count(Zone::NearPlus), 7);
        assert_eq!(count(Zone::FarPlus), 3);
        assert_eq!(count(Zone::NearMinus), 7);
        assert_eq!(count(Zone::FarMinus), 3);
        assert_eq!(s.next_query_batch().unwrap(), *b);
    }

    #[test]
    fn empty_far_zone_shrinks_batch() {
        // Nothing scores above b + delta/2.
        let mut scores: Vec<f64> = (0..50).map(|k| k as f64 / 10.0).collect();
        scores.extend((0..10).map(|k| 5.05 + k as f64 * 0.01));
        scores.push(20.0);
        let mut s = Session::new(one_d(&scores), SessionConfig::default()).unwrap();
        s.set_bias(5.0).unwrap();
        let b = s.pending().unwrap();
        assert!(b.entries.iter().all(|e| e.zone != Zone::FarPlus));
        assert_eq!(b.entries.len(), 17);
    }

    fn answer(s: &Session, truth: impl Fn(usize) -> bool) -> BTreeMap<usize, bool> {
        s.pending().unwrap().entries.iter().map(|e| (e.cluster, truth(e.cluster))).collect()
    }

    #[test]
    fn no_corrections_converges_and_halves() {
        let scores: Vec<f64> = (0..100).map(|k| k as f64 / 10.0).collect();
        let mut s = Session::new(one_d(&scores), SessionConfig::default()).unwrap();
        s.set_bias(5.0).unwrap();
        let (dp, dm) = (s.state().delta_plus, s.state().delta_minus);
        let agree = answer(&s, |k| scores[k] > 5.0);
        let out = s.apply_corrections(&agree).unwrap();
        assert_eq!(out.corrections, 0);
        assert!(out.converged);
        let st = s.state();
        assert!(st.delta_plus <= dp / 2.0 + 1e-12 && st.delta_minus <= dm / 2.0 + 1e-12);
        assert_eq!(st.round, 1);
        assert!(matches!(s.log().last(), Some(LogRecord::Round { .. })));
    }

    #[test]
    fn far_plus_correction_doubles_delta_plus() {
        let scores: Vec<f64> = (0..100).map(|k| k as f64 / 10.0).collect();
        let mut s = Session::new(one_d(&scores), SessionConfig::default()).unwrap();
        s.set_bias(5.0).unwrap();
        let d = s.state().delta_plus;
        let batch = s.pending().unwrap().clone();
        let flip = batch.entries.iter().find(|e| e.zone == Zone::FarPlus).unwrap().cluster;
        let mut resp = answer(&s, |k| scores[k] > 5.0);
        resp.insert(flip, false);
        let out = s.apply_corrections(&resp).unwrap();
        assert_eq!(out.corrections, 1);
        assert!(!out.converged || s.state().round >= 25);
        let st = s.state();
        let want_plus = (2.0 * d).min(st.b_max - st.separator.b);
        let want_minus = (d / 2.0).min(st.separator.b - st.b_min);
        assert!((st.delta_plus - want_plus).abs() < 1e-12, "{} vs {}", st.delta_plus, want_plus);
        assert!((st.delta_minus - want_minus).abs() < 1e-12);
        assert!(!s.classify_all().labels[flip]);
    }

    #[test]
    fn incomplete_and_wrong_phase() {
        let scores: Vec<f64> = (0..100).map(|k| k as f64 / 10.0).collect();
        let mut s = Session::new(one_d(&scores), SessionConfig::default()).unwrap();
        assert!(matches!(s.apply_corrections(&BTreeMap::new()), Err(Error::WrongPhase(_))));
        s.set_bias(5.0).unwrap();
        let mut resp = answer(&s, |_| true);
        let first = *resp.keys().next().unwrap();
        resp.remove(&first);
        assert!(matches!(s.apply_corrections(&resp), Err(Error::IncompleteResponse(k)) if k == first));
    }

    #[test]
    fn user_labels_override_separator() {
        let scores: Vec<f64> = (0..100).map(|k| k as f64 / 10.0).collect();
        let mut s = Session::new(one_d(&scores), SessionConfig::default()).unwrap();
        s.set_bias(5.0).unwrap();
        let target = s.pending().unwrap().entries.iter().find(|e| e.predicted).unwrap().cluster;
        let mut resp = answer(&s, |k| scores[k] > 5.0);
        resp.insert(target, false);
        s.apply_corrections(&resp).unwrap();
        let c = s.classify_all();
        assert!(!c.labels[target]);
    }

    #[test]
    fn positive_rescaling_keeps_decisions() {
        let sep = Separator { w: vec![0.3, -1.2], b: 0.4 };
        let scaled = Separator { w: sep.w.iter().map(|v| v * 7.5).collect(), b: sep.b * 7.5 };
        for f in [[1.0, 0.1], [0.0, -1.0], [2.0, 0.5], [-1.0, -1.0]] {
            assert_eq!(sep.decide(&f), scaled.decide(&f));
        }
    }
}
