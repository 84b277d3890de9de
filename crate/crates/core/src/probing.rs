//! Non-linear probing on frozen features: a small conv head, argmax
//! segmentation, Dice, size-grouped reports and timestep ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind, PARAM_PREFIX};
use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::kernels::ConvGeometry;
use crate::nn::{self, Adam, AdamConfig, ParamSet};
use crate::synth::{PhantomConfig, SizeGroup};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::volumes::{copy_region, Volume, VolumeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Training crop `(z, y, x)`, clipped to the volume.
    pub crop: [usize; 3],
    /// Share of crops centred on a random foreground voxel.
    pub foreground_fraction: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 500,
            learning_rate: 1e-3,
            crop: [16, 16, 16],
            foreground_fraction: 0.5,
            ce_weight: 0.5,
            dice_weight: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub in_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub params: ParamSet<f32>,
    /// Per-channel standardisation fitted on the training features.
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl ProbeHead {
    pub fn new(in_channels: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        params.insert("conv1.w", nn::truncated_normal(&[hidden, in_channels, 1, 1, 1], he(in_channels), rng));
        params.insert("conv1.b", Tensor::zeros(&[hidden]));
        params.insert("conv2.w", nn::truncated_normal(&[hidden, hidden, 3, 3, 3], he(27 * hidden), rng));
        params.insert("conv2.b", Tensor::zeros(&[hidden]));
        params.insert("conv3.w", nn::truncated_normal(&[classes, hidden, 1, 1, 1], (1.0 / hidden as f64).sqrt(), rng));
        params.insert("conv3.b", Tensor::zeros(&[classes]));
        Self {
            in_channels,
            hidden,
            classes,
            params,
            mean: vec![0.0; in_channels],
            inv_std: vec![1.0; in_channels],
        }
    }

    fn record(&self, tape: &mut Tape<f32>, p: &nn::Bound, x: Var) -> Var {
        let h = nn::conv(tape, p, "conv1", x, ConvGeometry::cube(1));
        let h = tape.relu(h);
        let h = nn::conv(tape, p, "conv2", h, ConvGeometry::cube(3));
        let h = tape.relu(h);
        nn::conv(tape, p, "conv3", h, ConvGeometry::cube(1))
    }

    fn standardize(&self, data: &[f32], plane: usize) -> Vec<f32> {
        let mut out = data.to_vec();
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.inv_std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        out
    }

    /// Class logits `[K, Z, Y, X]` for a whole feature volume.
    pub fn logits(&self, f: &FeatureVolume) -> Result<Tensor<f32>> {
        if f.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "channel mismatch: probe expects {} feature channels, got {}",
                self.in_channels,
                f.channels()
            )));
        }
        let plane: usize = f.shape().iter().product();
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(Tensor::new(f.data.shape().to_vec(), self.standardize(f.data.data(), plane)));
        let out = self.record(&mut tape, &p, x);
        Ok(tape.value(out).clone())
    }

    pub fn checkpoint(&self, config: &ProbeConfig) -> Checkpoint {
        let mut ck = Checkpoint {
            kind: ModelKind::Probe,
            config: serde_json::json!({
                "in_channels": self.in_channels,
                "hidden": self.hidden,
                "classes": self.classes,
                "training": config,
            }),
            schedule: None,
            state: serde_json::Value::Null,
            tensors: ParamSet::new(),
        };
        ck.insert_section(PARAM_PREFIX, &self.params);
        ck.tensors.insert("norm.mean", Tensor::new(vec![self.in_channels], self.mean.clone()));
        ck.tensors.insert("norm.inv_std", Tensor::new(vec![self.in_channels], self.inv_std.clone()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Probe {
            return Err(Error::Checkpoint(format!("expected a probe checkpoint, found {:?}", ck.kind)));
        }
        let field = |k: &str| {
            ck.config
                .get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("probe checkpoint lacks {k}")))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Self::new(field("in_channels")?, field("hidden")?, field("classes")?, &mut rng);
        head.params.load_from(ck.section(PARAM_PREFIX))?;
        let vec_of = |k: &str| {
            ck.tensors
                .get(k)
                .filter(|t| t.len() == head.in_channels)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("probe checkpoint lacks {k}")))
        };
        head.mean = vec_of("norm.mean")?;
        head.inv_std = vec_of("norm.inv_std")?;
        Ok(head)
    }
}

pub struct ProbeTraining {
    pub head: ProbeHead,
    pub losses: Vec<f32>,
    pub final_loss: f32,
}

fn check_pairs(features: &[FeatureVolume], labels: &[Volume], classes: usize) -> Result<usize> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "need paired features and labels, got {} and {}",
            features.len(),
            labels.len()
        )));
    }
    let c = features[0].channels();
    if c == 0 {
        return Err(Error::Invalid("features have zero channels".into()));
    }
    for (i, (f, l)) in features.iter().zip(labels).enumerate() {
        if f.channels() != c {
            return Err(Error::Shape(format!("feature volume {i} has {} channels, expected {c}", f.channels())));
        }
        if f.shape() != l.shape() {
            return Err(Error::Shape(format!("feature volume {i} shape {:?} differs from labels {:?}", f.shape(), l.shape())));
        }
        if l.kind() != VolumeKind::Label {
            return Err(Error::Invalid(format!("volume {i} is not a label volume")));
        }
        if let Some(bad) = l.labels().into_iter().find(|&v| v as usize >= classes) {
            return Err(Error::Invalid(format!("label {bad} in volume {i} exceeds class count {classes}")));
        }
    }
    Ok(c)
}

fn channel_stats(features: &[FeatureVolume], c: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    let mut n = 0f64;
    for f in features {
        let plane: usize = f.shape().iter().product();
        for (ch, chunk) in f.data.data().chunks(plane).enumerate() {
            for &v in chunk {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        n += plane as f64;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let inv_std = sq.iter().zip(&mean).map(|(s, m)| (1.0 / ((s / n - m * m).max(0.0).sqrt() + 1e-6)) as f32).collect();
    (mean.into_iter().map(|m| m as f32).collect(), inv_std)
}

fn crop_origin(
    shape: [usize; 3],
    crop: [usize; 3],
    labels: &Volume,
    foreground: bool,
    rng: &mut impl Rng,
) -> [usize; 3] {
    if foreground {
        // pick a present class uniformly, then one of its voxels, so small organs get seen
        let mut present: Vec<f32> = labels.data().iter().copied().filter(|&v| v > 0.0).collect();
        present.sort_by(f32::total_cmp);
        present.dedup();
        if !present.is_empty() {
            let class = present[rng.gen_range(0..present.len())];
            let fg: Vec<usize> = labels.data().iter().enumerate().filter(|(_, &v)| v == class).map(|(i, _)| i).collect();
            let i = fg[rng.gen_range(0..fg.len())];
            let [_, ny, nx] = shape;
            let centre = [i / (ny * nx), (i / nx) % ny, i % nx];
            return std::array::from_fn(|a| centre[a].saturating_sub(crop[a] / 2).min(shape[a] - crop[a]));
        }
    }
    std::array::from_fn(|a| rng.gen_range(0..=shape[a] - crop[a]))
}

pub fn train_probe(features: &[FeatureVolume], labels: &[Volume], classes: usize, config: &ProbeConfig) -> Result<ProbeTraining> {
    if classes < 2 {
        return Err(Error::Invalid("probe needs at least 2 classes".into()));
    }
    let c = check_pairs(features, labels, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = ProbeHead::new(c, config.hidden, classes, &mut rng);
    (head.mean, head.inv_std) = channel_stats(features, c);
    let mut opt = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..Default::default() }, &head.params);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let i = rng.gen_range(0..features.len());
        let (f, l) = (&features[i], &labels[i]);
        let shape = f.shape();
        let crop: [usize; 3] = std::array::from_fn(|a| config.crop[a].min(shape[a]));
        let fg = rng.gen_bool(config.foreground_fraction.clamp(0.0, 1.0));
        let o = crop_origin(shape, crop, l, fg, &mut rng);
        let raw = copy_region(f.data.data(), c, shape, o, crop);
        let plane: usize = crop.iter().product();
        let x = Tensor::new(vec![c, crop[0], crop[1], crop[2]], head.standardize(&raw, plane));
        let y: Vec<u8> = copy_region(l.data(), 1, shape, o, crop).into_iter().map(|v| v as u8).collect();
        let mut tape = Tape::new();
        let p = head.params.bind(&mut tape);
        let xv = tape.constant(x);
        let logits = head.record(&mut tape, &p, xv);
        let loss = tape.segmentation_loss(logits, &y, config.ce_weight as f32, config.dice_weight as f32);
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("probe loss at step {step}")));
        }
        losses.push(lv);
        let mut g = tape.backward(loss);
        let grads = head.params.gradients(&p, &mut g);
        opt.update(&mut head.params, &grads);
    }
    let tail = &losses[losses.len().saturating_sub(20)..];
    let final_loss = if tail.is_empty() { f32::NAN } else { tail.iter().sum::<f32>() / tail.len() as f32 };
    Ok(ProbeTraining { head, losses, final_loss })
}

/// Per-voxel argmax over `[K, Z, Y, X]` logits; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor<f32>, spacing: [f64; 3]) -> Result<Volume> {
    let k = logits.channels();
    let shape = logits.spatial();
    let n: usize = shape.iter().product();
    let d = logits.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as f32
        })
        .collect();
    Volume::new(shape, spacing, labels, VolumeKind::Label)
}

pub fn segment(head: &ProbeHead, features: &FeatureVolume) -> Result<Volume> {
    argmax_labels(&head.logits(features)?, [1.0; 3])
}

/// Dice of the masks `label ∈ ids`; 1.0 when both are empty.
pub fn dice_of(pred: &Volume, gt: &Volume, ids: &[u8]) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("shape mismatch: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (ids.contains(&(a as u8)), ids.contains(&(b as u8)));
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

pub fn dice(pred: &Volume, gt: &Volume, class_id: u8) -> Result<f64> {
    dice_of(pred, gt, &[class_id])
}

/// Reported classes: paired organs share one report column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportClass {
    pub name: String,
    pub group: SizeGroup,
    pub ids: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub classes: usize,
    pub columns: Vec<ReportClass>,
}

impl ClassCatalog {
    pub fn from_phantom(config: &PhantomConfig) -> Self {
        let mut columns: Vec<ReportClass> = Vec::new();
        for (i, o) in config.organs.iter().enumerate() {
            let id = config.class_of(i);
            match columns.iter_mut().find(|c| c.name == o.report_name) {
                Some(c) if !c.ids.contains(&id) => c.ids.push(id),
                Some(_) => {}
                None => columns.push(ReportClass { name: o.report_name.clone(), group: o.group, ids: vec![id] }),
            }
        }
        Self { classes: config.num_classes(), columns }
    }

    pub fn grouping(&self) -> BTreeMap<String, SizeGroup> {
        self.columns.iter().map(|c| (c.name.clone(), c.group)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: BTreeMap<String, f64>,
    pub groups: BTreeMap<SizeGroup, f64>,
    pub avg: f64,
}

impl DiceReport {
    pub fn group(&self, g: SizeGroup) -> f64 {
        self.groups.get(&g).copied().unwrap_or(f64::NAN)
    }
}

pub fn group_report(per_class: &BTreeMap<String, f64>, grouping: &BTreeMap<String, SizeGroup>) -> Result<DiceReport> {
    if per_class.is_empty() {
        return Err(Error::Invalid("no classes to report".into()));
    }
    let mut members: BTreeMap<SizeGroup, Vec<f64>> = BTreeMap::new();
    for (name, &d) in per_class {
        let g = grouping.get(name).ok_or_else(|| Error::Invalid(format!("class {name} has no size group")))?;
        members.entry(*g).or_default().push(d);
    }
    let groups = members.into_iter().map(|(g, v)| (g, v.iter().sum::<f64>() / v.len() as f64)).collect();
    let avg = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(DiceReport { per_class: per_class.clone(), groups, avg })
}

/// Mean per-volume Dice of every report column over a test set.
pub fn evaluate(preds: &[Volume], gts: &[Volume], catalog: &ClassCatalog) -> Result<DiceReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Invalid("evaluation needs paired, non-empty prediction and label sets".into()));
    }
    let mut per_class = BTreeMap::new();
    for col in &catalog.columns {
        let mut total = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            total += dice_of(p, g, &col.ids)?;
        }
        per_class.insert(col.name.clone(), total / preds.len() as f64);
    }
    group_report(&per_class, &catalog.grouping())
}

pub fn evaluate_probe(head: &ProbeHead, features: &[FeatureVolume], labels: &[Volume], catalog: &ClassCatalog) -> Result<DiceReport> {
    let preds = features.iter().map(|f| segment(head, f)).collect::<Result<Vec<_>>>()?;
    evaluate(&preds, labels, catalog)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Markdown table: one row per model, classes as columns, `Avg` last.
pub fn markdown_table(catalog: &ClassCatalog, rows: &[(String, DiceReport)]) -> String {
    let mut s = String::from("| Model |");
    for c in &catalog.columns {
        let _ = write!(s, " {} |", c.name);
    }
    s.push_str(" Avg |\n|---|");
    for _ in 0..=catalog.columns.len() {
        s.push_str("---|");
    }
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "| {name} |");
        for c in &catalog.columns {
            let _ = write!(s, " {} |", r.per_class.get(&c.name).map_or("-".into(), |&d| pct(d)));
        }
        let _ = writeln!(s, " {} |", pct(r.avg));
    }
    s
}

/// `model,class,group,dice` rows.
pub fn report_csv(catalog: &ClassCatalog, rows: &[(String, DiceReport)]) -> String {
    let mut s = String::from("model,class,group,dice\n");
    for (name, r) in rows {
        for c in &catalog.columns {
            let _ = writeln!(s, "{name},{},{},{:.6}", c.name, c.group.name(), r.per_class[&c.name]);
        }
        let _ = writeln!(s, "{name},Avg,,{:.6}", r.avg);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub t: usize,
    pub report: DiceReport,
}

/// Extracts features at each single timestep, trains a fresh probe and
/// evaluates it. `extract(t, train)` returns the feature volumes for the
/// training (`true`) or held-out (`false`) set.
pub fn ablate_timesteps(
    t_candidates: &[usize],
    mut extract: impl FnMut(usize, bool) -> Result<Vec<FeatureVolume>>,
    train_labels: &[Volume],
    test_labels: &[Volume],
    catalog: &ClassCatalog,
    config: &ProbeConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(t_candidates.len());
    for &t in t_candidates {
        let train = extract(t, true)?;
        let head = train_probe(&train, train_labels, catalog.classes, config)?.head;
        drop(train);
        let test = extract(t, false)?;
        rows.push(AblationRow { t, report: evaluate_probe(&head, &test, test_labels, catalog)? });
    }
    Ok(rows)
}

/// `t,Small,Medium,Big,Avg` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("t,Small,Medium,Big,Avg\n");
    for r in rows {
        let g = |grp| r.report.group(grp);
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.t,
            g(SizeGroup::Small),
            g(SizeGroup::Medium),
            g(SizeGroup::Big),
            r.report.avg
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ExtractionPlan;
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(shape: [usize; 3], data: Vec<f32>) -> Volume {
        Volume::new(shape, [1.0; 3], data, VolumeKind::Label).unwrap()
    }

    fn feature(data: Tensor<f32>) -> FeatureVolume {
        FeatureVolume { data, plan: ExtractionPlan::new(&crate::DenoiserConfig::default(), [8, 8, 8], vec![1], 0) }
    }

    #[test]
    fn dice_examples() {
        let a = labels([1, 1, 8], vec![1., 1., 1., 1., 0., 0., 0., 0.]);
        let b = labels([1, 1, 8], vec![0., 0., 1., 1., 1., 1., 0., 0.]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        let c = labels([1, 1, 8], vec![0., 0., 0., 0., 1., 1., 1., 1.]);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, 2).unwrap(), 1.0);
        assert!(dice(&a, &labels([1, 2, 4], vec![0.; 8]), 1).is_err());
    }

    #[test]
    fn group_report_examples() {
        let per: BTreeMap<String, f64> = [("A".into(), 0.8), ("B".into(), 0.6), ("C".into(), 0.4)].into();
        let grouping: BTreeMap<String, SizeGroup> =
            [("A".into(), SizeGroup::Big), ("B".into(), SizeGroup::Small), ("C".into(), SizeGroup::Small)].into();
        let r = group_report(&per, &grouping).unwrap();
        assert!((r.group(SizeGroup::Big) - 0.8).abs() < 1e-12);
        assert!((r.group(SizeGroup::Small) - 0.5).abs() < 1e-12);
        assert!((r.avg - 0.6).abs() < 1e-12);
        let ones: BTreeMap<String, f64> = per.keys().map(|k| (k.clone(), 1.0)).collect();
        let r = group_report(&ones, &grouping).unwrap();
        assert!(r.groups.values().all(|&v| v == 1.0) && r.avg == 1.0);
        let mut partial = grouping.clone();
        partial.remove("C");
        assert!(group_report(&per, &partial).unwrap_err().to_string().contains("C"));
    }

    #[test]
    fn unequal_groups_average_over_classes() {
        let per: BTreeMap<String, f64> = [("A".into(), 1.0), ("B".into(), 0.0), ("C".into(), 0.0)].into();
        let grouping: BTreeMap<String, SizeGroup> =
            [("A".into(), SizeGroup::Big), ("B".into(), SizeGroup::Small), ("C".into(), SizeGroup::Small)].into();
        let r = group_report(&per, &grouping).unwrap();
        assert!((r.avg - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_rules() {
        let mut d = vec![0f32; 3 * 4];
        d[8..12].fill(5.0);
        let l = argmax_labels(&Tensor::new(vec![3, 1, 2, 2], d), [1.0; 3]).unwrap();
        assert!(l.data().iter().all(|&v| v == 2.0));
        assert_eq!(l.shape(), [1, 2, 2]);
        let tie = argmax_labels(&Tensor::new(vec![2, 1, 1, 1], vec![1.0, 1.0]), [1.0; 3]).unwrap();
        assert_eq!(tie.data(), &[0.0]);
    }

    #[test]
    fn separable_toy_is_learned() {
        let shape = [6, 6, 6];
        let n = 216;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut feats = Vec::new();
        let mut labs = Vec::new();
        for _ in 0..3 {
            let ch0: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ch1: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            labs.push(labels(shape, ch0.iter().map(|&v| (v > 0.2) as u8 as f32).collect()));
            feats.push(feature(Tensor::new(vec![2, 6, 6, 6], [ch0, ch1].concat())));
        }
        let cfg = ProbeConfig { hidden: 8, steps: 300, learning_rate: 1e-2, crop: [6, 6, 6], ..Default::default() };
        let a = train_probe(&feats, &labs, 2, &cfg).unwrap();
        let b = train_probe(&feats, &labs, 2, &cfg).unwrap();
        assert_eq!(a.head, b.head);
        for (f, l) in feats.iter().zip(&labs) {
            let d = dice(&segment(&a.head, f).unwrap(), l, 1).unwrap();
            assert!(d > 0.99, "{d}");
        }
        let empty = feature(Tensor::zeros(&[0, 6, 6, 6]));
        assert!(train_probe(&[empty], &labs[..1], 2, &cfg).is_err());
        assert!(segment(&a.head, &feature(Tensor::zeros(&[3, 6, 6, 6]))).unwrap_err().to_string().contains("channel mismatch"));
    }

    #[test]
    fn probe_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut h = ProbeHead::new(5, 4, 3, &mut rng);
        h.mean = vec![0.5; 5];
        let ck = h.checkpoint(&ProbeConfig::default());
        let back = Checkpoint::decode(&ck.encode(), std::path::Path::new("p")).unwrap();
        assert_eq!(ProbeHead::from_checkpoint(&back).unwrap(), h);
    }

    #[test]
    fn catalog_merges_pairs_and_reports_render() {
        let cat = ClassCatalog::from_phantom(&PhantomConfig::distribution_a());
        let names: Vec<&str> = cat.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["liver", "stomach", "aorta", "kidney", "node_upper", "node_lower"]);
        assert_eq!(cat.columns[3].ids, vec![4]);
        assert_eq!(cat.classes, 7);
        let per = cat.columns.iter().map(|c| (c.name.clone(), 0.5)).collect();
        let r = group_report(&per, &cat.grouping()).unwrap();
        let md = markdown_table(&cat, &[("m".into(), r.clone())]);
        assert!(md.lines().next().unwrap().ends_with("| Avg |"));
        assert!(md.contains("| m | 50.0 |"));
        let csv = report_csv(&cat, &[("m".into(), r.clone())]);
        assert_eq!(csv.lines().count(), 1 + 6 + 1);
        let rows = vec![AblationRow { t: 10, report: r }];
        assert_eq!(ablation_csv(&rows).lines().nth(1), Some("10,0.500000,0.500000,0.500000,0.500000"));
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded(a in proptest::collection::vec(0u8..3, 27), b in proptest::collection::vec(0u8..3, 27), c in 0u8..3) {
            let va = labels([3, 3, 3], a.iter().map(|&v| v as f32).collect());
            let vb = labels([3, 3, 3], b.iter().map(|&v| v as f32).collect());
            let d1 = dice(&va, &vb, c).unwrap();
            prop_assert_eq!(d1, dice(&vb, &va, c).unwrap());
            prop_assert!((0.0..=1.0).contains(&d1));
        }

        #[test]
        fn argmax_ignores_constant_shift(vals in proptest::collection::vec(-5.0f32..5.0, 24), shift in -100.0f32..100.0) {
            let t = Tensor::new(vec![3, 2, 2, 2], vals.clone());
            let s = Tensor::new(vec![3, 2, 2, 2], vals.iter().map(|v| v + shift).collect());
            let a = argmax_labels(&t, [1.0; 3]).unwrap();
            let b = argmax_labels(&s, [1.0; 3]).unwrap();
            // float rounding can merge near-ties; only compare voxels with a clear winner
            for i in 0..8 {
                let col: Vec<f32> = (0..3).map(|c| vals[c * 8 + i]).collect();
                let mut sorted = col.clone();
                sorted.sort_by(|x, y| y.total_cmp(x));
                if sorted[0] - sorted[1] > 1e-3 {
                    prop_assert_eq!(a.data()[i], b.data()[i]);
                }
            }
        }
    }
}
