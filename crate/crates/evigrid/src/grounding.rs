//! Evidence-token mechanics: the 2-layer projection, per-frame similarity,
//! salient-frame selection, event-level semantic aggregation, and interval
//! extraction from the salient set.
//!
//! Similarity is logistic(dot / sqrt(C)) so the same quantity serves as a
//! BCE prediction and as an independent per-frame Bernoulli probability.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::autograd::{Result as AgResult, Tape, Var};
use crate::domain::Interval;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("ground-truth interval {0:?} out of range for T={1}")]
    IntervalOutOfRange(Interval, usize),
    #[error("salient set is empty")]
    EmptySalient,
}

/// Per-frame similarities of one evidence token, each strictly in (0,1).
#[derive(Debug, Clone)]
pub struct SimilarityProfile {
    pub sims: Var,
    /// Concrete values, cached at construction for non-differentiable uses.
    pub values: Vec<f64>,
    pub source_slot: usize,
}

impl SimilarityProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalMode {
    /// Maximal contiguous salient run containing the argmax frame.
    RunOfArgmax,
    /// [min(salient), max(salient)]; diagnostic only.
    FullSpan,
}

#[derive(Debug, Clone, Copy)]
pub struct GroundingConfig {
    /// Fraction of the max similarity a frame must reach to count as salient.
    pub salient_ratio: f64,
    pub interval_mode: IntervalMode,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig { salient_ratio: 0.6, interval_mode: IntervalMode::RunOfArgmax }
    }
}

/// Salient-selection mode: ground-truth frames while training, thresholded
/// similarities at inference.
#[derive(Debug, Clone, Copy)]
pub enum SalientMode {
    Train(Interval),
    Infer(GroundingConfig),
}

/// 2-layer perceptron over the evidence hidden state: C->C tanh, then C->C.
/// Parameter names are `{prefix}.w1|b1|w2|b2`.
pub fn project_evidence(tape: &Tape, evi: Var, params: &ProjectionParams) -> AgResult<Var> {
    let h = tape.matmul(evi, params.w1)?;
    let h = tape.add(h, params.b1)?;
    let h = tape.tanh(h);
    let out = tape.matmul(h, params.w2)?;
    tape.add(out, params.b2)
}

/// Handles to the projection parameters on the current tape.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectionParams {
    pub fn from_store(
        tape: &Tape,
        store: &crate::autograd::ParamStore,
        prefix: &str,
    ) -> AgResult<Self> {
        Ok(ProjectionParams {
            w1: tape.param(store, &format!("{prefix}.w1"))?,
            b1: tape.param(store, &format!("{prefix}.b1"))?,
            w2: tape.param(store, &format!("{prefix}.w2"))?,
            b2: tape.param(store, &format!("{prefix}.b2"))?,
        })
    }
}

/// sims[t] = logistic(<query, frames[t]> / sqrt(C)), differentiable through
/// both the query and the frames. `query` is 1xC, `frames` is TxC.
pub fn frame_similarities(
    tape: &Tape,
    query: Var,
    frames: Var,
    source_slot: usize,
) -> AgResult<SimilarityProfile> {
    let (_, c) = tape.shape(query);
    let qt = tape.transpose(query);
    let dots = tape.matmul(frames, qt)?; // Tx1
    let scaled = tape.scale(dots, 1.0 / (c as f64).sqrt());
    let sims = tape.logistic(scaled);
    let values = tape.value(sims).data;
    Ok(SimilarityProfile { sims, values, source_slot })
}

/// Train mode: exactly the ground-truth frames. Infer mode: frames whose
/// similarity reaches `salient_ratio` of the maximum (never empty).
pub fn select_salient(
    profile: &SimilarityProfile,
    mode: SalientMode,
) -> std::result::Result<BTreeSet<usize>, GroundingError> {
    let t = profile.len();
    match mode {
        SalientMode::Train(gt) => {
            if gt.end() >= t {
                return Err(GroundingError::IntervalOutOfRange(gt, t));
            }
            Ok((gt.start()..=gt.end()).collect())
        }
        SalientMode::Infer(cfg) => {
            let max = profile.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let thresh = cfg.salient_ratio * max;
            Ok(profile
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v >= thresh)
                .map(|(i, _)| i)
                .collect())
        }
    }
}

/// `evi + mean(frames[salient])`, differentiable through both arguments.
pub fn aggregate_semantics(
    tape: &Tape,
    evi: Var,
    frames: Var,
    salient: &BTreeSet<usize>,
) -> std::result::Result<Var, GroundingError> {
    if salient.is_empty() {
        return Err(GroundingError::EmptySalient);
    }
    let agg = (|| -> AgResult<Var> {
        let rows: Vec<Var> = salient
            .iter()
            .map(|&t| tape.slice_rows(frames, t, 1))
            .collect::<AgResult<Vec<_>>>()?;
        let stacked = tape.concat_rows(&rows)?;
        let sum = if rows.len() == 1 {
            stacked
        } else {
            // column-wise mean via ones-row matmul
            let ones = tape.constant(crate::autograd::Tensor::row(vec![1.0; rows.len()]));
            tape.matmul(ones, stacked)?
        };
        let mean = tape.scale(sum, 1.0 / rows.len() as f64);
        tape.add(evi, mean)
    })();
    Ok(agg.expect("aggregation over validated shapes"))
}

/// One interval from a nonempty salient set.
pub fn intervals_from_salient(
    salient: &BTreeSet<usize>,
    profile: &SimilarityProfile,
    mode: IntervalMode,
) -> Interval {
    assert!(!salient.is_empty(), "salient set must be nonempty");
    match mode {
        IntervalMode::FullSpan => {
            let lo = *salient.iter().next().unwrap();
            let hi = *salient.iter().next_back().unwrap();
            Interval::new(lo, hi).unwrap()
        }
        IntervalMode::RunOfArgmax => {
            let anchor = profile.argmax();
            debug_assert!(salient.contains(&anchor));
            let mut lo = anchor;
            while lo > 0 && salient.contains(&(lo - 1)) {
                lo -= 1;
            }
            let mut hi = anchor;
            while salient.contains(&(hi + 1)) {
                hi += 1;
            }
            Interval::new(lo, hi).unwrap()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, logistic, ParamStore, Tensor};

    fn profile_from(values: Vec<f64>) -> SimilarityProfile {
        let tape = Tape::new();
        let sims = tape.constant(Tensor::col(values.clone()));
        SimilarityProfile { sims, values, source_slot: 0 }
    }

    fn proj_store(c: usize, w1: f64, w2_identity: bool, b2: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("proj.w1", {
            let mut t = Tensor::zeros(c, c);
            t.fill(w1);
            t
        });
        store.insert("proj.b1", Tensor::row(vec![0.0; c]));
        store.insert("proj.w2", {
            let mut t = Tensor::zeros(c, c);
            if w2_identity {
                for i in 0..c {
                    t.set(i, i, 1.0);
                }
            }
            t
        });
        store.insert("proj.b2", Tensor::row(vec![b2; c]));
        store
    }

    #[test]
    fn zero_projection_gives_zero() {
        let store = proj_store(3, 0.0, false, 0.0);
        let tape = Tape::new();
        let params = ProjectionParams::from_store(&tape, &store, "proj").unwrap();
        let x = tape.constant(Tensor::row(vec![1.0, -2.0, 0.5]));
        let y = project_evidence(&tape, x, &params).unwrap();
        assert!(tape.value(y).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_second_layer_passes_bias() {
        let store = proj_store(3, 0.0, true, 0.75);
        let tape = Tape::new();
        let params = ProjectionParams::from_store(&tape, &store, "proj").unwrap();
        let x = tape.constant(Tensor::row(vec![1.0, 1.0, 1.0]));
        let y = project_evidence(&tape, x, &params).unwrap();
        assert!(tape.value(y).data.iter().all(|v| (*v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let mut store = ParamStore::new();
        for (name, rows, cols) in
            [("proj.w1", c, c), ("proj.b1", 1, c), ("proj.w2", c, c), ("proj.b2", 1, c)]
        {
            store.insert(
                name,
                Tensor::from_vec(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                ),
            );
        }
        let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            &store,
            |tape, s| {
                let params = ProjectionParams::from_store(tape, s, "proj")?;
                let xv = tape.constant(Tensor::row(x.clone()));
                let y = project_evidence(tape, xv, &params)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            1e-5,
            9,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn zero_query_gives_half_everywhere() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let frames = tape.constant(Tensor::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 4.0, 4.0]));
        let p = frame_similarities(&tape, q, frames, 0).unwrap();
        assert!(p.values.iter().all(|v| (*v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn scalar_similarity_hand_values() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::row(vec![2.0]));
        let frames = tape.constant(Tensor::from_vec(3, 1, vec![2.0, 0.0, -2.0]));
        let p = frame_similarities(&tape, q, frames, 0).unwrap();
        let expect = [logistic(4.0), 0.5, logistic(-4.0)];
        for (got, want) in p.values.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((p.values[0] - 0.9820).abs() < 1e-4);
        assert!((p.values[2] - 0.0180).abs() < 1e-4);
    }

    #[test]
    fn positive_query_scaling_preserves_argsort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let c = 3;
            let t = 6;
            let q: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f: Vec<f64> = (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = rng.gen_range(0.1..5.0);
            let rank = |query: Vec<f64>| {
                let tape = Tape::new();
                let qv = tape.constant(Tensor::row(query));
                let fv = tape.constant(Tensor::from_vec(t, c, f.clone()));
                let p = frame_similarities(&tape, qv, fv, 0).unwrap();
                let mut idx: Vec<usize> = (0..t).collect();
                idx.sort_by(|a, b| p.values[*a].partial_cmp(&p.values[*b]).unwrap());
                idx
            };
            let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
            assert_eq!(rank(q), rank(scaled));
        }
    }

    #[test]
    fn infer_salient_hand_case() {
        let p = profile_from(vec![0.9, 0.2, 0.6]);
        let got = select_salient(&p, SalientMode::Infer(GroundingConfig::default())).unwrap();
        assert_eq!(got, BTreeSet::from([0, 2]));
    }

    #[test]
    fn constant_sims_select_everything() {
        let p = profile_from(vec![0.4; 5]);
        let got = select_salient(&p, SalientMode::Infer(GroundingConfig::default())).unwrap();
        assert_eq!(got.len(), 5);
    }

    #[test]
    fn train_mode_is_exactly_the_interval() {
        let p = profile_from(vec![0.5; 8]);
        let got = select_salient(&p, SalientMode::Train(Interval::new(2, 5).unwrap())).unwrap();
        assert_eq!(got, BTreeSet::from([2, 3, 4, 5]));
    }

    #[test]
    fn train_mode_out_of_range() {
        let p = profile_from(vec![0.5; 4]);
        let r = select_salient(&p, SalientMode::Train(Interval::new(2, 5).unwrap()));
        assert!(matches!(r, Err(GroundingError::IntervalOutOfRange(..))));
    }

    #[test]
    fn aggregate_hand_mean() {
        let tape = Tape::new();
        let evi = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let frames = tape.constant(Tensor::from_vec(3, 2, vec![1.0, 1.0, 9.0, 9.0, 3.0, 3.0]));
        let salient = BTreeSet::from([0, 2]);
        let out = aggregate_semantics(&tape, evi, frames, &salient).unwrap();
        assert_eq!(tape.value(out).data, vec![2.0, 2.0]);
    }

    #[test]
    fn aggregate_single_frame() {
        let tape = Tape::new();
        let evi = tape.constant(Tensor::row(vec![1.0, -1.0]));
        let frames = tape.constant(Tensor::from_vec(2, 2, vec![3.0, 4.0, 7.0, 8.0]));
        let out = aggregate_semantics(&tape, evi, frames, &BTreeSet::from([1])).unwrap();
        assert_eq!(tape.value(out).data, vec![8.0, 7.0]);
    }

    #[test]
    fn aggregate_empty_salient_errors() {
        let tape = Tape::new();
        let evi = tape.constant(Tensor::row(vec![0.0]));
        let frames = tape.constant(Tensor::zeros(2, 1));
        assert!(matches!(
            aggregate_semantics(&tape, evi, frames, &BTreeSet::new()),
            Err(GroundingError::EmptySalient)
        ));
    }

    #[test]
    fn interval_extraction_modes() {
        let p = profile_from(vec![0.3, 0.3, 0.1, 0.1, 0.9, 0.8]);
        let salient = BTreeSet::from([0, 1, 4, 5]);
        assert_eq!(
            intervals_from_salient(&salient, &p, IntervalMode::RunOfArgmax),
            Interval::new(4, 5).unwrap()
        );
        assert_eq!(
            intervals_from_salient(&salient, &p, IntervalMode::FullSpan),
            Interval::new(0, 5).unwrap()
        );
    }

    #[test]
    fn single_run_and_singleton() {
        let p = profile_from(vec![0.5, 0.9, 0.6]);
        let salient = BTreeSet::from([0, 1, 2]);
        assert_eq!(
            intervals_from_salient(&salient, &p, IntervalMode::RunOfArgmax),
            Interval::new(0, 2).unwrap()
        );
        let p2 = profile_from(vec![0.1, 0.1, 0.1, 0.9]);
        assert_eq!(
            intervals_from_salient(&BTreeSet::from([3]), &p2, IntervalMode::RunOfArgmax),
            Interval::new(3, 3).unwrap()
        );
    }

    #[test]
    fn run_of_argmax_contains_argmax() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let t = rng.gen_range(1..12);
            let values: Vec<f64> = (0..t).map(|_| rng.gen_range(0.01..0.99)).collect();
            let p = profile_from(values);
            let salient =
                select_salient(&p, SalientMode::Infer(GroundingConfig::default())).unwrap();
            let iv = intervals_from_salient(&salient, &p, IntervalMode::RunOfArgmax);
            assert!(iv.contains(p.argmax()));
        }
    }
}
