//! Self-supervised body-part regressor: a 2D slice-score network trained
//! with slice-ordering and equal-spacing losses, whose normalised scores are
//! broadcast into a per-voxel coordinate map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{log_sigmoid, sigmoid, ConvGeometry};
use crate::nn::{self, Adam, AdamConfig, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::volumes::{Volume, VolumeKind};

/// Order and distance terms for scores of equidistant slices in head-to-tail order.
pub fn bpr_loss_terms<T: Scalar>(scores: &[T]) -> (T, T) {
    let order = scores.windows(2).map(|w| -log_sigmoid(w[1] - w[0])).sum();
    let dist = scores.windows(3).map(|w| smooth_l1((w[2] - w[1]) - (w[1] - w[0]))).sum();
    (order, dist)
}

fn smooth_l1<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// Gradient of `order + dist` with respect to each score.
pub fn bpr_loss_grad<T: Scalar>(s: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); s.len()];
    for j in 0..s.len().saturating_sub(1) {
        // d/dd of −log σ(d) = σ(d) − 1
        let d = sigmoid(s[j + 1] - s[j]) - T::one();
        g[j + 1] += d;
        g[j] -= d;
    }
    for j in 0..s.len().saturating_sub(2) {
        let d = smooth_l1_grad((s[j + 2] - s[j + 1]) - (s[j + 1] - s[j]));
        g[j + 2] += d;
        g[j + 1] -= T::from_f64(2.0) * d;
        g[j] += d;
    }
    g
}

/// `(order_loss, dist_loss)` for `m ≥ 3` slice scores sampled `slice_gap`
/// indices apart. The gap is constant within a sample, so the distance term
/// only compares consecutive score differences.
pub fn bpr_losses(scores: &[f64], slice_gap: usize) -> Result<(f64, f64)> {
    if slice_gap == 0 {
        return Err(Error::Invalid("slice gap must be positive".into()));
    }
    if scores.len() < 3 {
        return Err(Error::Invalid(format!("need at least 3 slice scores, got {}", scores.len())));
    }
    Ok(bpr_loss_terms(scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BprConfig {
    /// Output channels of the four strided conv layers.
    pub channels: [usize; 4],
    pub slices_per_sample: usize,
    pub min_gap: usize,
    pub max_gap: usize,
    /// Each training stack is rolled in-plane by up to this many voxels per axis.
    pub max_shift: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self { channels: [8, 16, 16, 16], slices_per_sample: 8, min_gap: 2, max_gap: 4, max_shift: 2, steps: 1500, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprModel {
    pub config: BprConfig,
    pub params: ParamSet<f32>,
    pub score_min: f32,
    pub score_max: f32,
}

const SLICE_CONV: ConvGeometry = ConvGeometry { kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] };

impl BprModel {
    pub fn new(config: BprConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert(format!("conv.{i}.w"), nn::truncated_normal(&[c, cin, 1, 3, 3], std, rng));
            params.insert(format!("conv.{i}.b"), Tensor::zeros(&[c]));
            cin = c;
        }
        params.insert("head.w", nn::truncated_normal(&[1, cin, 1, 1, 1], (1.0 / cin as f64).sqrt(), rng));
        params.insert("head.b", Tensor::zeros(&[1]));
        Self { config, params, score_min: -1.0, score_max: 1.0 }
    }

    /// Records scores for the slices of a `[1, m, Y, X]` stack; returns an `[m]` var.
    fn scores_on_tape(&self, tape: &mut Tape<f32>, p: &nn::Bound, slices: Var) -> Var {
        let m = tape.shape(slices)[1];
        let mut h = slices;
        for i in 0..self.config.channels.len() {
            h = nn::conv(tape, p, &format!("conv.{i}"), h, SLICE_CONV);
            h = tape.relu(h);
        }
        let pooled = tape.mean_yx(h);
        let s = nn::conv(tape, p, "head", pooled, ConvGeometry::cube(1));
        tape.reshape(s, &[m])
    }

    /// Raw (unnormalised) score of every axial slice of `v`.
    pub fn slice_scores(&self, v: &Volume) -> Vec<f32> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(v.to_tensor());
        let s = self.scores_on_tape(&mut tape, &p, x);
        tape.value(s).data().to_vec()
    }

    pub fn normalize_score(&self, s: f32) -> f32 {
        let span = (self.score_max - self.score_min).max(f32::EPSILON);
        (2.0 * (s - self.score_min) / span - 1.0).clamp(-1.0, 1.0)
    }
}

fn check_image(v: &Volume) -> Result<()> {
    if v.kind() != VolumeKind::Image {
        return Err(Error::Invalid(format!("expected an image volume, got {:?}", v.kind())));
    }
    if !v.is_normalized() {
        return Err(Error::Invalid("unnormalized input: image values must lie in [-1, 1]".into()));
    }
    Ok(())
}

/// Per-voxel coordinate map: each axial slice's normalised score broadcast over the slice.
pub fn coordinate_map(model: &BprModel, v: &Volume) -> Result<Volume> {
    check_image(v)?;
    let scores = model.slice_scores(v);
    let [_, ny, nx] = v.shape();
    let mut data = Vec::with_capacity(v.len());
    for s in scores {
        data.extend(std::iter::repeat_n(model.normalize_score(s), ny * nx));
    }
    Volume::new(v.shape(), v.spacing(), data, VolumeKind::Coord)
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = (pos - lo as f64) as f32;
    v[lo] * (1.0 - f) + v[hi] * f
}

pub struct BprTraining {
    pub model: BprModel,
    pub losses: Vec<f32>,
}

/// Appends `slice` rolled by `(dy, dx)` with wrap-around, which keeps the
/// background noise statistics intact.
fn push_rolled(out: &mut Vec<f32>, slice: &[f32], ny: usize, nx: usize, dy: usize, dx: usize) {
    for y in 0..ny {
        let row = &slice[(y + ny - dy) % ny * nx..][..nx];
        out.extend((0..nx).map(|x| row[(x + nx - dx) % nx]));
    }
}

pub fn train_bpr(volumes: &[Volume], config: &BprConfig) -> Result<BprTraining> {
    if volumes.len() < 2 {
        return Err(Error::Invalid(format!("body-part regressor needs at least 2 volumes, got {}", volumes.len())));
    }
    let m = config.slices_per_sample;
    if m < 3 || config.min_gap == 0 || config.min_gap > config.max_gap {
        return Err(Error::Config("need slices_per_sample >= 3 and 0 < min_gap <= max_gap".into()));
    }
    for v in volumes {
        check_image(v)?;
        if v.shape()[0] < m * config.min_gap {
            return Err(Error::Invalid(format!(
                "too few slices: volume has {} axial slices, need at least {}",
                v.shape()[0],
                m * config.min_gap
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = BprModel::new(config.clone(), &mut rng);
    let mut opt = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..Default::default() }, &model.params);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let v = &volumes[rng.gen_range(0..volumes.len())];
        let [nz, ny, nx] = v.shape();
        let max_gap = config.max_gap.min((nz - 1) / (m - 1)).max(config.min_gap);
        let gap = rng.gen_range(config.min_gap..=max_gap);
        let span = (m - 1) * gap;
        let start = rng.gen_range(0..nz - span);
        let r = config.max_shift as isize;
        let (dy, dx) = (rng.gen_range(-r..=r).rem_euclid(ny as isize) as usize, rng.gen_range(-r..=r).rem_euclid(nx as isize) as usize);
        let mut data = Vec::with_capacity(m * ny * nx);
        for j in 0..m {
            let z = start + j * gap;
            push_rolled(&mut data, &v.data()[z * ny * nx..(z + 1) * ny * nx], ny, nx, dy, dx);
        }
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, m, ny, nx], data));
        let s = model.scores_on_tape(&mut tape, &p, x);
        let loss = tape.bpr_loss(s);
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("body-part regressor loss at step {}", losses.len())));
        }
        losses.push(lv);
        let mut g = tape.backward(loss);
        let grads = model.params.gradients(&p, &mut g);
        opt.update(&mut model.params, &grads);
    }
    let all: Vec<f32> = volumes.iter().flat_map(|v| model.slice_scores(v)).collect();
    model.score_min = percentile(&all, 1.0);
    model.score_max = percentile(&all, 99.0);
    if !(model.score_max > model.score_min) {
        model.score_max = model.score_min + 1.0;
    }
    Ok(BprTraining { model, losses })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scores_have_zero_distance_loss() {
        let g = 0.7;
        let m = 8;
        let s: Vec<f64> = (0..m).map(|j| 1.3 + g * j as f64).collect();
        let (order, dist) = bpr_losses(&s, 2).unwrap();
        assert!(dist.abs() < 1e-12);
        let want = -(m as f64 - 1.0) * (1.0 / (1.0 + (-g).exp())).ln();
        assert!((order - want).abs() < 1e-12);
        assert_eq!(bpr_losses(&[0.0, 1.0, 2.0], 3).unwrap().1, 0.0);
    }

    #[test]
    fn decreasing_scores_pay_more_than_log2_per_pair() {
        let s = [3.0, 2.0, 1.5, 0.1];
        let (order, _) = bpr_losses(&s, 2).unwrap();
        assert!(order > 3.0 * 2f64.ln());
        assert!(bpr_losses(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = vec![0.1, -0.4, 0.9, 2.5, 1.0, 1.2];
        let g = bpr_loss_grad(&s);
        let f = |v: &[f64]| {
            let (a, b) = bpr_loss_terms(v);
            a + b
        };
        for i in 0..s.len() {
            let mut up = s.clone();
            up[i] += 1e-6;
            let mut dn = s.clone();
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn spearman_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&a, &[1.0; 4]), 0.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f32> = (0..101).map(|i| i as f32).collect();
        assert_eq!(percentile(&v, 1.0), 1.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[0.0, 10.0], 50.0), 5.0);
    }

    #[test]
    fn coordinate_map_broadcasts_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = BprModel::new(BprConfig::default(), &mut rng);
        let data: Vec<f32> = (0..16 * 8 * 8).map(|i| ((i as f32) * 0.37).sin()).collect();
        let v = Volume::new([16, 8, 8], [1.0; 3], data, VolumeKind::Image).unwrap();
        let c = coordinate_map(&model, &v).unwrap();
        assert_eq!(c.shape(), v.shape());
        assert_eq!(c.kind(), VolumeKind::Coord);
        for z in 0..16 {
            let slice = &c.data()[z * 64..(z + 1) * 64];
            assert!(slice.iter().all(|&x| x == slice[0]));
        }
        assert!(c.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        let raw = Volume::filled([16, 8, 8], [1.0; 3], 40.0, VolumeKind::Image).unwrap();
        assert!(coordinate_map(&model, &raw).unwrap_err().to_string().contains("unnormalized"));
    }

    #[test]
    fn training_rejects_short_volumes() {
        let v = Volume::filled([10, 8, 8], [1.0; 3], 0.0, VolumeKind::Image).unwrap();
        let err = train_bpr(&[v.clone(), v], &BprConfig::default()).err().unwrap();
        assert!(err.to_string().contains("too few slices"));
    }
}
