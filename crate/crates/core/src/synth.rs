//! Seeded synthetic "phantom bodies": ellipsoidal organs placed along a
//! latent body axis, with exact labels and the ground-truth body coordinate.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{save_volume, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeGroup {
    Small,
    Medium,
    Big,
}

impl SizeGroup {
    pub const ALL: [SizeGroup; 3] = [SizeGroup::Small, SizeGroup::Medium, SizeGroup::Big];

    pub fn name(self) -> &'static str {
        match self {
            SizeGroup::Small => "Small",
            SizeGroup::Medium => "Medium",
            SizeGroup::Big => "Big",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistributionTag {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub name: String,
    pub group: SizeGroup,
    /// Mean position on the body axis, in body-coordinate units.
    pub body_position: f64,
    /// In-plane centre offset from the volume centre, voxels `(y, x)`.
    pub offset: [f64; 2],
    /// Semi-axes in voxels `(z, y, x)`.
    pub radii: [f64; 3],
    pub intensity: f64,
    pub texture_std: f64,
    /// Organs sharing a report label are merged in reports (paired organs).
    pub report_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub organs: Vec<OrganSpec>,
    /// Half-width of the uniform jitter on each organ's body position.
    pub position_jitter: f64,
    /// In-plane centre jitter half-width, voxels.
    pub offset_jitter: f64,
    /// Organ radii are scaled by `size_scale · U(1 − size_jitter, 1 + size_jitter)`.
    pub size_scale: f64,
    pub size_jitter: f64,
    /// Extra intensity added to every organ.
    pub intensity_shift: f64,
    pub texture_scale: f64,
    pub background_std: f64,
    pub body_intensity: f64,
    pub body_radius: f64,
    /// Relative change of body radius per body-coordinate unit.
    pub body_taper: f64,
    /// Body coordinate of the first and last slice is drawn from these ranges.
    pub top_range: [f64; 2],
    pub bottom_range: [f64; 2],
    pub tag: DistributionTag,
}

fn organ(
    name: &str,
    report: &str,
    group: SizeGroup,
    pos: f64,
    offset: [f64; 2],
    radii: [f64; 3],
    intensity: f64,
    texture: f64,
) -> OrganSpec {
    OrganSpec {
        name: name.into(),
        group,
        body_position: pos,
        offset,
        radii,
        intensity,
        texture_std: texture,
        report_name: report.into(),
    }
}

impl PhantomConfig {
    /// Default catalog on a `(32, 24, 24)` grid.
    pub fn distribution_a() -> Self {
        use SizeGroup::*;
        let organs = vec![
            organ("liver", "liver", Big, -0.3, [-1.0, -4.0], [7.0, 5.0, 5.0], 0.45, 0.10),
            organ("stomach", "stomach", Big, -0.35, [-2.0, 5.0], [5.0, 4.0, 3.5], 0.05, 0.10),
            organ("aorta", "aorta", Medium, 0.0, [5.0, 0.0], [11.0, 1.8, 1.8], 0.75, 0.08),
            organ("kidney_left", "kidney", Medium, 0.3, [3.0, -5.0], [3.5, 2.5, 2.5], 0.3, 0.10),
            organ("kidney_right", "kidney", Medium, 0.3, [3.0, 5.0], [3.5, 2.5, 2.5], 0.3, 0.10),
            organ("node_upper", "node_upper", Small, -0.65, [-4.0, 1.0], [2.0, 2.0, 2.0], 0.6, 0.08),
            organ("node_lower", "node_lower", Small, 0.65, [-4.0, 1.0], [2.0, 2.0, 2.0], 0.6, 0.08),
        ];
        Self {
            shape: [32, 24, 24],
            spacing: [2.0, 1.0, 1.0],
            organs,
            position_jitter: 0.06,
            offset_jitter: 1.0,
            size_scale: 1.0,
            size_jitter: 0.1,
            intensity_shift: 0.0,
            texture_scale: 1.0,
            background_std: 0.3,
            body_intensity: -0.25,
            body_radius: 10.0,
            body_taper: 0.08,
            top_range: [-1.0, -0.85],
            bottom_range: [0.85, 1.0],
            tag: DistributionTag::A,
        }
    }

    /// Shifted distribution: noisier, with larger and more variable organs.
    pub fn distribution_b() -> Self {
        Self {
            size_scale: 1.1,
            size_jitter: 0.18,
            intensity_shift: -0.05,
            texture_scale: 1.5,
            background_std: 0.4,
            tag: DistributionTag::B,
            ..Self::distribution_a()
        }
    }

    pub fn for_tag(tag: DistributionTag) -> Self {
        match tag {
            DistributionTag::A => Self::distribution_a(),
            DistributionTag::B => Self::distribution_b(),
        }
    }

    /// Distinct report names in first-appearance order; class id is index + 1.
    pub fn class_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for o in &self.organs {
            if !names.contains(&o.report_name.as_str()) {
                names.push(&o.report_name);
            }
        }
        names
    }

    /// Label id of organ `i`. Organs sharing a report name share a label.
    pub fn class_of(&self, i: usize) -> u8 {
        let name = &self.organs[i].report_name;
        self.class_names().iter().position(|n| n == name).expect("organ has a class") as u8 + 1
    }

    pub fn num_classes(&self) -> usize {
        self.class_names().len() + 1
    }

    /// Size group of each foreground class id.
    pub fn groups(&self) -> Vec<(u8, SizeGroup)> {
        let names = self.class_names();
        names
            .iter()
            .enumerate()
            .map(|(i, n)| (i as u8 + 1, self.organs.iter().find(|o| &o.report_name == n).expect("named").group))
            .collect()
    }

    /// Checks that every organ fits inside the grid for all jitter draws.
    pub fn validate(&self) -> Result<()> {
        if self.organs.is_empty() || self.organs.len() > 254 {
            return Err(Error::Config("phantom needs between 1 and 254 organs".into()));
        }
        if self.shape.iter().any(|&d| d < 2) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("phantom shape and spacing must be positive".into()));
        }
        for (i, o) in self.organs.iter().enumerate() {
            if self.organs[..i].iter().any(|p| p.report_name == o.report_name && p.group != o.group) {
                return Err(Error::Config(format!("organs named {} disagree on size group", o.report_name)));
            }
        }
        let [nz, ny, nx] = self.shape.map(|d| d as f64);
        let max_scale = self.size_scale * (1.0 + self.size_jitter);
        for o in &self.organs {
            // the z centre moves with both the organ jitter and the field of view
            let worst_z = [
                self.z_of(o.body_position - self.position_jitter, self.top_range[1], self.bottom_range[0]),
                self.z_of(o.body_position + self.position_jitter, self.top_range[0], self.bottom_range[1]),
                self.z_of(o.body_position - self.position_jitter, self.top_range[0], self.bottom_range[1]),
                self.z_of(o.body_position + self.position_jitter, self.top_range[1], self.bottom_range[0]),
            ];
            let zmin = worst_z.iter().cloned().fold(f64::INFINITY, f64::min);
            let zmax = worst_z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let cy = (ny - 1.0) / 2.0 + o.offset[0];
            let cx = (nx - 1.0) / 2.0 + o.offset[1];
            let j = self.offset_jitter;
            let inside = zmin >= 0.0
                && zmax <= nz - 1.0
                && cy - j - o.radii[1] * max_scale >= -0.5
                && cy + j + o.radii[1] * max_scale <= ny - 0.5
                && cx - j - o.radii[2] * max_scale >= -0.5
                && cx + j + o.radii[2] * max_scale <= nx - 0.5;
            if !inside {
                return Err(Error::Config(format!("organ {} cannot fit inside a {:?} phantom", o.name, self.shape)));
            }
        }
        Ok(())
    }

    /// Slice index of body coordinate `u` when the first/last slice centres sit at `top`/`bottom`.
    fn z_of(&self, u: f64, top: f64, bottom: f64) -> f64 {
        let nz = self.shape[0] as f64;
        (u - top) / (bottom - top) * (nz - 1.0)
    }
}

/// Placed organ ellipsoid, in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub labels: Volume,
    pub body_coord: Volume,
    pub organs: Vec<Ellipsoid>,
}

pub fn generate_phantom(seed: u64, config: &PhantomConfig) -> Result<Phantom> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nz, ny, nx] = config.shape;
    let top = rng.gen_range(config.top_range[0]..=config.top_range[1]);
    let bottom = rng.gen_range(config.bottom_range[0]..=config.bottom_range[1]);
    let coord_at = |z: usize| top + (bottom - top) * z as f64 / (nz - 1) as f64;

    let mut organs = Vec::with_capacity(config.organs.len());
    for o in &config.organs {
        let u = o.body_position + rng.gen_range(-config.position_jitter..=config.position_jitter);
        let cz = config.z_of(u, top, bottom);
        let j = config.offset_jitter;
        let cy = (ny as f64 - 1.0) / 2.0 + o.offset[0] + rng.gen_range(-j..=j);
        let cx = (nx as f64 - 1.0) / 2.0 + o.offset[1] + rng.gen_range(-j..=j);
        let s = config.size_scale * rng.gen_range(1.0 - config.size_jitter..=1.0 + config.size_jitter);
        organs.push(Ellipsoid { center: [cz, cy, cx], radii: o.radii.map(|r| r * s) });
    }

    let n = nz * ny * nx;
    let mut labels = vec![0f32; n];
    let mut raw = vec![-1.0f64; n];
    let (cy, cx) = ((ny as f64 - 1.0) / 2.0, (nx as f64 - 1.0) / 2.0);
    for z in 0..nz {
        let u = coord_at(z);
        let r = config.body_radius * (1.0 + config.body_taper * u);
        for y in 0..ny {
            for x in 0..nx {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if (dy * dy + dx * dx).sqrt() <= r {
                    raw[(z * ny + y) * nx + x] = config.body_intensity;
                }
            }
        }
    }
    // later organs overwrite earlier ones where ellipsoids overlap
    for (k, (e, spec)) in organs.iter().zip(&config.organs).enumerate() {
        let class = config.class_of(k) as f32;
        let lo = |a: usize| (e.center[a] - e.radii[a]).floor().max(0.0) as usize;
        let hi = |a: usize, d: usize| ((e.center[a] + e.radii[a]).ceil() as usize).min(d - 1);
        for z in lo(0)..=hi(0, nz) {
            for y in lo(1)..=hi(1, ny) {
                for x in lo(2)..=hi(2, nx) {
                    if e.contains(z, y, x) {
                        let i = (z * ny + y) * nx + x;
                        labels[i] = class;
                        raw[i] = spec.intensity + config.intensity_shift;
                    }
                }
            }
        }
    }
    let background = Normal::new(0.0, config.background_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let texture: Vec<Normal<f64>> = config
        .class_names()
        .iter()
        .map(|n| config.organs.iter().find(|o| &o.report_name == n).expect("named"))
        .map(|o| Normal::new(0.0, (o.texture_std * config.texture_scale).max(0.0)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(e.to_string()))?;
    let image: Vec<f32> = raw
        .iter()
        .zip(&labels)
        .map(|(&v, &l)| {
            let mut v = v + background.sample(&mut rng);
            if l > 0.0 {
                v += texture[l as usize - 1].sample(&mut rng);
            }
            v.clamp(-1.0, 1.0) as f32
        })
        .collect();
    let mut coord = Vec::with_capacity(n);
    for z in 0..nz {
        coord.extend(std::iter::repeat_n(coord_at(z).clamp(-1.0, 1.0) as f32, ny * nx));
    }
    Ok(Phantom {
        image: Volume::new(config.shape, config.spacing, image, VolumeKind::Image)?,
        labels: Volume::new(config.shape, config.spacing, labels, VolumeKind::Label)?,
        body_coord: Volume::new(config.shape, config.spacing, coord, VolumeKind::Coord)?,
        organs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub index: usize,
    pub seed: u64,
    pub image: String,
    pub labels: String,
    pub coord: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: PhantomConfig,
    pub items: Vec<CorpusItem>,
}

/// Deterministic list of `n` phantoms with per-item seeds drawn from `seed`.
pub fn generate_corpus(n: usize, seed: u64, config: &PhantomConfig) -> Result<CorpusManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|index| CorpusItem {
            index,
            seed: rng.next_u64(),
            image: format!("image_{index:04}.v3d"),
            labels: format!("labels_{index:04}.v3d"),
            coord: format!("coord_{index:04}.v3d"),
        })
        .collect();
    Ok(CorpusManifest { seed, config: config.clone(), items })
}

impl CorpusManifest {
    pub fn phantoms(&self) -> impl Iterator<Item = Result<Phantom>> + '_ {
        self.items.iter().map(|it| generate_phantom(it.seed, &self.config))
    }

    /// Writes every phantom plus `manifest.json` into `dir` (which must exist).
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (item, p) in self.items.iter().zip(self.phantoms()) {
            let p = p?;
            save_volume(&p.image, dir.join(&item.image))?;
            save_volume(&p.labels, dir.join(&item.labels))?;
            save_volume(&p.body_coord, dir.join(&item.coord))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_bit_identical() {
        let c = PhantomConfig::distribution_a();
        assert_eq!(generate_phantom(11, &c).unwrap(), generate_phantom(11, &c).unwrap());
        assert_ne!(generate_phantom(11, &c).unwrap().image, generate_phantom(12, &c).unwrap().image);
    }

    #[test]
    fn labels_lie_inside_their_ellipsoids() {
        let c = PhantomConfig::distribution_a();
        for seed in 0..5 {
            let p = generate_phantom(seed, &c).unwrap();
            let [nz, ny, nx] = c.shape;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let l = p.labels.get(z, y, x) as usize;
                        let inside_any = p.organs.iter().any(|e| e.contains(z, y, x));
                        if l > 0 {
                            let owners = (0..c.organs.len()).filter(|&k| c.class_of(k) as usize == l);
                            assert!(owners.into_iter().any(|k| p.organs[k].contains(z, y, x)));
                        } else {
                            assert!(!inside_any);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn organ_sizes_follow_groups() {
        let c = PhantomConfig::distribution_a();
        let mut totals = [0f64; 3];
        let mut members = [0f64; 3];
        for (_, g) in c.groups() {
            members[g as usize] += 1.0;
        }
        for seed in 0..20 {
            let p = generate_phantom(seed, &c).unwrap();
            for l in p.labels.labels() {
                if l > 0 {
                    totals[c.groups()[l as usize - 1].1 as usize] += 1.0;
                }
            }
        }
        let mean: Vec<f64> = (0..3).map(|g| totals[g] / members[g]).collect();
        assert!(mean[2] > mean[1] && mean[1] > mean[0], "{mean:?}");
    }

    #[test]
    fn every_class_appears_and_images_are_normalised() {
        let c = PhantomConfig::distribution_a();
        let mut seen = vec![0; c.num_classes()];
        for seed in 0..30 {
            let p = generate_phantom(seed, &c).unwrap();
            assert!(p.image.is_normalized());
            let mut present = vec![false; c.num_classes()];
            for l in p.labels.labels() {
                present[l as usize] = true;
            }
            for (k, &pr) in present.iter().enumerate() {
                seen[k] += pr as usize;
            }
        }
        assert!(seen[1..].iter().all(|&s| s as f64 >= 0.9 * 30.0), "{seen:?}");
    }

    #[test]
    fn position_law_is_recovered() {
        // fit the body coordinate at each placed centre against the configured mean
        let c = PhantomConfig::distribution_a();
        let plane = c.shape[1] * c.shape[2];
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for seed in 0..50 {
            let p = generate_phantom(seed, &c).unwrap();
            for (o, e) in c.organs.iter().zip(&p.organs) {
                let z = e.center[0];
                let (z0, f) = (z.floor() as usize, z - z.floor());
                let z1 = (z0 + 1).min(c.shape[0] - 1);
                let at = |z: usize| p.body_coord.data()[z * plane] as f64;
                xs.push(o.body_position);
                ys.push(at(z0) * (1.0 - f) + at(z1) * f);
            }
        }
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope - 1.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn merged_report_names_share_a_label() {
        let c = PhantomConfig::distribution_a();
        assert_eq!(c.class_names(), ["liver", "stomach", "aorta", "kidney", "node_upper", "node_lower"]);
        assert_eq!(c.num_classes(), 7);
        assert_eq!(c.class_of(3), c.class_of(4));
        let mut bad = c.clone();
        bad.organs[4].group = SizeGroup::Small;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn body_coordinate_is_linear_in_z() {
        let c = PhantomConfig::distribution_a();
        let p = generate_phantom(4, &c).unwrap();
        let plane = 24 * 24;
        let vals: Vec<f32> = (0..32).map(|z| p.body_coord.data()[z * plane]).collect();
        let step = vals[1] - vals[0];
        assert!(step > 0.0);
        for w in vals.windows(2) {
            assert!(((w[1] - w[0]) - step).abs() < 1e-5);
        }
        assert!(vals[0] >= -1.0 && vals[31] <= 1.0);
    }

    #[test]
    fn organs_that_cannot_fit_are_rejected() {
        let mut c = PhantomConfig::distribution_a();
        c.organs[0].radii = [7.0, 30.0, 5.0];
        assert!(generate_phantom(0, &c).unwrap_err().to_string().contains("cannot fit"));
    }

    #[test]
    fn corpus_manifests() {
        let a = PhantomConfig::distribution_a();
        assert!(generate_corpus(0, 1, &a).unwrap().items.is_empty());
        assert_eq!(generate_corpus(4, 9, &a).unwrap(), generate_corpus(4, 9, &a).unwrap());
        let ma = generate_corpus(4, 9, &a).unwrap();
        let mb = generate_corpus(4, 9, &PhantomConfig::distribution_b()).unwrap();
        assert_eq!(ma.items, mb.items);
        assert_ne!(ma.config, mb.config);
    }

    #[test]
    fn corpus_writes_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(2, 5, &PhantomConfig::distribution_a()).unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(CorpusManifest::read(dir.path()).unwrap(), m);
        let img = crate::volumes::load_volume(dir.path().join(&m.items[1].image)).unwrap();
        assert_eq!(img, generate_phantom(m.items[1].seed, &m.config).unwrap().image);
    }
}
