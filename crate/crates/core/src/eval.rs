//! Volumetric IoU, retrieval baselines and best-of-N curves.

use crate::geometry::Vec3;
use crate::occfield::ShapeSpec;
use crate::optimizer::ReconstructionResult;
use crate::shadow::ShadowImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half side of the IoU sampling box.
pub const IOU_BOUND: f64 = 1.2;
pub const DEFAULT_IOU_SAMPLES: usize = 100_000;
pub const MIN_IOU_SAMPLES: usize = 1000;
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("the training set is empty")]
    EmptyTrainingSet,
    #[error("at least {MIN_IOU_SAMPLES} IoU samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("shadow resolutions differ")]
    SizeMismatch,
    #[error("no finished restarts to evaluate")]
    NoRestarts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoUEstimate {
    pub value: f64,
    pub samples: usize,
    pub standard_error: f64,
    /// Neither shape occupies any sample; `value` is 1 by convention.
    pub both_empty: bool,
}

/// Offsets in `[−1.2, 1.2]³`, shared by every comparison made with the
/// sampler. The largest cubic grid that fits the budget gets one jittered
/// point per cell; the remainder is drawn uniformly. Every point is
/// marginally uniform over the box.
#[derive(Debug, Clone)]
pub struct IouSampler {
    offsets: Vec<Vec3>,
}

impl IouSampler {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, samples: usize) -> Result<Self, EvalError> {
        if samples < MIN_IOU_SAMPLES {
            return Err(EvalError::TooFewSamples(samples));
        }
        let mut m = (samples as f64).cbrt().round() as usize;
        while m * m * m > samples {
            m -= 1;
        }
        let cell = 2.0 * IOU_BOUND / m as f64;
        let mut offsets = Vec::with_capacity(samples);
        for k in 0..m {
            for j in 0..m {
                for i in 0..m {
                    let jitter: [f64; 3] = [rng.random(), rng.random(), rng.random()];
                    offsets.push(Vec3::new(
                        -IOU_BOUND + (i as f64 + jitter[0]) * cell,
                        -IOU_BOUND + (j as f64 + jitter[1]) * cell,
                        -IOU_BOUND + (k as f64 + jitter[2]) * cell,
                    ));
                }
            }
        }
        while offsets.len() < samples {
            offsets.push(Vec3::new(
                rng.random_range(-IOU_BOUND..IOU_BOUND),
                rng.random_range(-IOU_BOUND..IOU_BOUND),
                rng.random_range(-IOU_BOUND..IOU_BOUND),
            ));
        }
        Ok(Self { offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// The box is centered midway between the two shapes' translations so
    /// that posed shapes are covered and the estimate is symmetric.
    pub fn iou(&self, a: &ShapeSpec, b: &ShapeSpec) -> IoUEstimate {
        let center = (a.pose.translation() + b.pose.translation()) * 0.5;
        let (pa, pb) = (a.prepare(), b.prepare());
        let mut both = 0usize;
        let mut either = 0usize;
        for off in &self.offsets {
            let x = center + off;
            let ia = pa.eval(&pa.to_object(&x), None) > OCCUPANCY_THRESHOLD;
            let ib = pb.eval(&pb.to_object(&x), None) > OCCUPANCY_THRESHOLD;
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
        if either == 0 {
            return IoUEstimate {
                value: 1.0,
                samples: self.offsets.len(),
                standard_error: 0.0,
                both_empty: true,
            };
        }
        let v = both as f64 / either as f64;
        IoUEstimate {
            value: v,
            samples: self.offsets.len(),
            // Binomial bound; stratification only makes the estimate tighter.
            standard_error: (v * (1.0 - v) / either as f64).sqrt(),
            both_empty: false,
        }
    }
}

/// IoU from a fresh set of `samples` points.
pub fn volumetric_iou<R: Rng + ?Sized>(
    a: &ShapeSpec,
    b: &ShapeSpec,
    samples: usize,
    rng: &mut R,
) -> Result<IoUEstimate, EvalError> {
    Ok(IouSampler::new(rng, samples)?.iou(a, b))
}

/// Squared L2 distance over pixels valid in both images.
pub fn masked_sq_distance(a: &ShadowImage, b: &ShadowImage) -> Result<f64, EvalError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(EvalError::SizeMismatch);
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .zip(a.valid().iter().zip(b.valid()))
        .filter(|(_, (&va, &vb))| va && vb)
        .map(|((x, y), _)| (x - y) * (x - y))
        .sum())
}

/// Training indices ordered by masked shadow distance to `observed`, nearest
/// first; ties keep the lower index first.
pub fn rank_by_shadow<'a>(
    observed: &ShadowImage,
    shadows: impl IntoIterator<Item = &'a ShadowImage>,
) -> Result<Vec<usize>, EvalError> {
    let mut scored = shadows
        .into_iter()
        .enumerate()
        .map(|(i, s)| masked_sq_distance(observed, s).map(|d| (d, i)))
        .collect::<Result<Vec<_>, _>>()?;
    if scored.is_empty() {
        return Err(EvalError::EmptyTrainingSet);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// The training shape whose shadow is nearest to `observed`.
pub fn nearest_neighbor_baseline<'a>(
    observed: &ShadowImage,
    train: &'a [(ShadowImage, ShapeSpec)],
) -> Result<&'a ShapeSpec, EvalError> {
    let order = rank_by_shadow(observed, train.iter().map(|(s, _)| s))?;
    Ok(&train[order[0]].1)
}

/// A uniformly drawn training shape.
pub fn random_baseline<'a, T, R: Rng + ?Sized>(train: &'a [T], rng: &mut R) -> Result<&'a T, EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptyTrainingSet);
    }
    Ok(&train[rng.random_range(0..train.len())])
}

/// Running maximum of `ious`: entry `n − 1` is the best of the first `n`.
pub fn prefix_max(ious: &[f64]) -> Vec<f64> {
    ious.iter()
        .scan(f64::NEG_INFINITY, |best, &v| {
            *best = best.max(v);
            Some(*best)
        })
        .collect()
}

/// `(n, best IoU over the first n restarts)` in restart-index order.
pub fn best_of_n_curve(
    results: &ReconstructionResult,
    truth: &ShapeSpec,
    sampler: &IouSampler,
) -> Result<Vec<(usize, f64)>, EvalError> {
    let ordered = results.by_index();
    if ordered.is_empty() {
        return Err(EvalError::NoRestarts);
    }
    let ious: Vec<f64> = ordered.iter().map(|r| sampler.iou(&r.shape, truth).value).collect();
    Ok(prefix_max(&ious).into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;
    use crate::occfield::Primitive;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(center: [f64; 3], r: f64) -> ShapeSpec {
        ShapeSpec::new(vec![Primitive::ellipsoid(center, [r; 3])], 20.0, PoseSE3::identity()).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = sphere([0.1, 0.0, 0.2], 0.3);
        assert_eq!(volumetric_iou(&a, &a, 20_000, &mut rng).unwrap().value, 1.0);
        let l = sphere([-0.5, 0.0, 0.3], 0.1);
        let r = sphere([0.5, 0.0, 0.3], 0.1);
        assert_eq!(volumetric_iou(&l, &r, 20_000, &mut rng).unwrap().value, 0.0);
        assert!(volumetric_iou(&l, &r, 10, &mut rng).is_err());
    }

    #[test]
    fn concentric_spheres_match_the_volume_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = volumetric_iou(&sphere([0.0; 3], 0.4), &sphere([0.0; 3], 0.32), 100_000, &mut rng).unwrap();
        assert!((est.value - 0.512).abs() < 0.01, "{est:?}");
        assert!(est.standard_error > 0.0);
        assert_eq!(est.samples, 100_000);
    }

    #[test]
    fn both_empty_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tiny = sphere([50.0, 0.0, 0.0], 0.05);
        let tiny2 = sphere([-50.0, 0.0, 0.0], 0.05);
        let est = volumetric_iou(&tiny, &tiny2, 1000, &mut rng).unwrap();
        assert!(est.both_empty);
        assert_eq!(est.value, 1.0);
    }

    #[test]
    fn iou_is_symmetric_with_shared_samples() {
        let sampler = IouSampler::new(&mut ChaCha8Rng::seed_from_u64(4), 5000).unwrap();
        let a = sphere([0.1, 0.0, 0.2], 0.3).with_pose(PoseSE3::from_yaw(0.3, Vec3::new(0.2, 0.0, 0.4)));
        let b = sphere([0.0, 0.1, 0.0], 0.35).with_pose(PoseSE3::from_yaw(1.0, Vec3::new(-0.1, 0.1, 0.35)));
        assert_eq!(sampler.iou(&a, &b).value, sampler.iou(&b, &a).value);
        assert_eq!(sampler.iou(&a, &a).value, 1.0);
    }

    fn img(values: &[f64], valid: &[bool]) -> ShadowImage {
        ShadowImage::from_parts(values.len() as u32, 1, values.to_vec(), valid.to_vec()).unwrap()
    }

    #[test]
    fn nearest_neighbor_examples() {
        let s = |i: usize| sphere([0.0; 3], 0.1 + 0.05 * i as f64);
        let train = vec![
            (img(&[0.0, 1.0, 1.0], &[true; 3]), s(0)),
            (img(&[1.0, 1.0, 0.0], &[true; 3]), s(1)),
            (img(&[1.0, 0.0, 0.0], &[true; 3]), s(2)),
        ];
        let obs = img(&[1.0, 1.0, 0.0], &[true; 3]);
        assert_eq!(nearest_neighbor_baseline(&obs, &train).unwrap(), &s(1));
        assert_eq!(nearest_neighbor_baseline(&obs, &train[2..]).unwrap(), &s(2));
        assert_eq!(nearest_neighbor_baseline(&obs, &[]), Err(EvalError::EmptyTrainingSet));

        // Flipping an invalid pixel does not move the distance.
        let masked = img(&[1.0, 1.0, 0.0], &[true, true, false]);
        let mut flipped = masked.clone();
        flipped.values_mut()[2] = 1.0;
        for (t, _) in &train {
            assert_eq!(masked_sq_distance(&masked, t), masked_sq_distance(&flipped, t));
        }
        // Ties go to the lower index.
        let tie = vec![(img(&[0.0, 0.0, 0.0], &[true; 3]), s(3)), (img(&[0.0, 0.0, 0.0], &[true; 3]), s(4))];
        assert_eq!(nearest_neighbor_baseline(&obs, &tie).unwrap(), &s(3));
    }

    #[test]
    fn random_baseline_is_uniform_and_seeded() {
        let items: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[*random_baseline(&items, &mut rng).unwrap()] += 1;
        }
        // Binomial(10 000, 0.1): σ = 30.
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 90.0, "{counts:?}");
        }
        assert_eq!(random_baseline(&items[3..4], &mut rng).unwrap(), &3);
        let draw = |seed| *random_baseline(&items, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(9), draw(9));
        assert!(random_baseline::<usize, _>(&[], &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn prefix_max_is_monotone(v in prop::collection::vec(0.0f64..1.0, 1..20)) {
            let c = prefix_max(&v);
            prop_assert_eq!(c.len(), v.len());
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(c[c.len() - 1], v.iter().cloned().fold(0.0, f64::max));
        }
    }
}
