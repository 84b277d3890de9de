//! Scalar volumes, the `.v3d` container, resampling, intensity windowing,
//! patch-grid planning and overlap-mean fusion of patchwise outputs.
//!
//! Axis order is always `(z, y, x)`, row-major with `x` fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
    Coord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
    kind: VolumeKind,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume shape {shape:?} has a zero axis")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "volume data has {} values, shape {shape:?} needs {}",
                data.len(),
                shape.iter().product::<usize>()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("spacing {spacing:?} must be positive")));
        }
        if kind == VolumeKind::Label && data.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v > 255.0) {
            return Err(Error::Invalid("label volumes hold non-negative integer class ids".into()));
        }
        Ok(Self { shape, spacing, data, kind })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: f32, kind: VolumeKind) -> Result<Self> {
        Self::new(shape, spacing, vec![value; shape.iter().product()], kind)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Class ids of a label volume.
    pub fn labels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v as u8).collect()
    }

    /// Single-channel `[1, Z, Y, X]` tensor view of the data.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [z, y, x] = self.shape;
        Tensor::new(vec![1, z, y, x], self.data.clone())
    }

    /// True when every value already lies in the normalised range `[-1, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

#[derive(Serialize, Deserialize)]
struct V3dHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    kind: VolumeKind,
}

/// Serialises a volume as one JSON header line followed by the raw
/// little-endian payload (`u8` for labels, `f32` otherwise).
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let dtype = if v.kind == VolumeKind::Label { "u8" } else { "f32" };
    let header = V3dHeader { shape: v.shape, spacing: v.spacing, dtype: dtype.into(), kind: v.kind };
    let mut out = serde_json::to_vec(&header).expect("header serialises");
    out.push(b'\n');
    match v.kind {
        VolumeKind::Label => out.extend(v.data.iter().map(|&x| x as u8)),
        _ => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: V3dHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let payload = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    let data = match header.dtype.as_str() {
        "u8" => {
            if payload.len() != n {
                return Err(Error::format(
                    path,
                    format!("payload size mismatch: header declares {n} voxels, payload has {}", payload.len()),
                ));
            }
            payload.iter().map(|&b| b as f32).collect()
        }
        "f32" => {
            if payload.len() != 4 * n {
                return Err(Error::format(
                    path,
                    format!(
                        "payload size mismatch: header declares {n} voxels, payload has {} bytes",
                        payload.len()
                    ),
                ));
            }
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
        }
        other => return Err(Error::format(path, format!("unknown dtype {other:?}"))),
    };
    Volume::new(header.shape, header.spacing, data, header.kind).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_volume(v)).map_err(|e| Error::io(path, e))
}

/// Source coordinate of output index `j` under a centre-aligned mapping with
/// `scale = input step / output step`, clamped into `[0, n - 1]`.
fn source_coord(j: usize, scale: f64, n: usize) -> f64 {
    ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64)
}

fn lerp_taps(j: usize, scale: f64, n: usize) -> (usize, usize, f64) {
    let s = source_coord(j, scale, n);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, s - lo as f64)
}

/// Trilinear resampling of a `[C, Z, Y, X]` buffer to `out` extent; `scale`
/// is the input/output step ratio per axis.
pub fn trilinear(data: &[f32], channels: usize, dims: [usize; 3], out: [usize; 3], scale: [f64; 3]) -> Vec<f32> {
    let tz: Vec<_> = (0..out[0]).map(|j| lerp_taps(j, scale[0], dims[0])).collect();
    let ty: Vec<_> = (0..out[1]).map(|j| lerp_taps(j, scale[1], dims[1])).collect();
    let tx: Vec<_> = (0..out[2]).map(|j| lerp_taps(j, scale[2], dims[2])).collect();
    let plane = dims[0] * dims[1] * dims[2];
    let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    let mut result = Vec::with_capacity(channels * out.iter().product::<usize>());
    for c in 0..channels {
        let src = &data[c * plane..(c + 1) * plane];
        for &(z0, z1, fz) in &tz {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let v = |z, y, x| src[idx(z, y, x)] as f64;
                    let c00 = v(z0, y0, x0) * (1.0 - fx) + v(z0, y0, x1) * fx;
                    let c01 = v(z0, y1, x0) * (1.0 - fx) + v(z0, y1, x1) * fx;
                    let c10 = v(z1, y0, x0) * (1.0 - fx) + v(z1, y0, x1) * fx;
                    let c11 = v(z1, y1, x0) * (1.0 - fx) + v(z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    result.push((c0 * (1.0 - fz) + c1 * fz) as f32);
                }
            }
        }
    }
    result
}

/// Upsamples a `[C, z, y, x]` tensor to `out` by trilinear interpolation.
pub fn upsample_trilinear(t: &Tensor<f32>, out: [usize; 3]) -> Tensor<f32> {
    let dims = t.spatial();
    if dims == out {
        return t.clone();
    }
    let scale = [0, 1, 2].map(|a| dims[a] as f64 / out[a] as f64);
    let data = trilinear(t.data(), t.channels(), dims, out, scale);
    Tensor::new(vec![t.channels(), out[0], out[1], out[2]], data)
}

pub fn resample(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Invalid(format!("target spacing {target_spacing:?} must be positive")));
    }
    let mut out = [0usize; 3];
    let mut scale = [0f64; 3];
    for a in 0..3 {
        out[a] = (v.shape[a] as f64 * v.spacing[a] / target_spacing[a]).round() as usize;
        scale[a] = target_spacing[a] / v.spacing[a];
    }
    if out.contains(&0) {
        return Err(Error::Shape(format!("resampling {:?} to spacing {target_spacing:?} gives shape {out:?}", v.shape)));
    }
    if out == v.shape && target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let data = match v.kind {
        VolumeKind::Label => {
            let near = |j: usize, a: usize| source_coord(j, scale[a], v.shape[a]).round() as usize;
            let mut d = Vec::with_capacity(out.iter().product());
            for z in 0..out[0] {
                for y in 0..out[1] {
                    for x in 0..out[2] {
                        d.push(v.get(near(z, 0), near(y, 1), near(x, 2)));
                    }
                }
            }
            d
        }
        _ => {
            let mut d = trilinear(&v.data, 1, v.shape, out, scale);
            // interpolation of a constant field must return it exactly
            if let Some(&first) = v.data.first() {
                if v.data.iter().all(|&x| x == first) {
                    d.iter_mut().for_each(|x| *x = first);
                }
            }
            d
        }
    };
    Volume::new(out, target_spacing, data, v.kind)
}

/// Clips to `[lo, hi]` and maps affinely onto `[-1, 1]`.
pub fn normalize_intensity(v: &Volume, window: (f32, f32)) -> Result<Volume> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::Invalid(format!("intensity window ({lo}, {hi}) needs lo < hi")));
    }
    let data = v
        .data
        .iter()
        .map(|&x| {
            let c = x.clamp(lo, hi);
            ((2.0 * (c as f64 - lo as f64) / (hi as f64 - lo as f64)) - 1.0).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Volume::new(v.shape, v.spacing, data, VolumeKind::Image)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub volume_shape: [usize; 3],
    pub patch_shape: [usize; 3],
    pub stride: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(vol: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = vol - patch;
    let mut o: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p < last).collect();
    o.push(last);
    o
}

pub fn plan_patch_grid(volume_shape: [usize; 3], patch_shape: [usize; 3], overlap_fraction: f64) -> Result<PatchGrid> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Invalid(format!("overlap fraction {overlap_fraction} outside [0, 1)")));
    }
    if patch_shape.contains(&0) {
        return Err(Error::Shape(format!("patch shape {patch_shape:?} has a zero axis")));
    }
    if (0..3).any(|a| patch_shape[a] > volume_shape[a]) {
        return Err(Error::Shape(format!("patch {patch_shape:?} larger than volume {volume_shape:?}")));
    }
    let stride = patch_shape.map(|p| ((p as f64 * (1.0 - overlap_fraction)).floor() as usize).max(1));
    let per_axis: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(volume_shape[a], patch_shape[a], stride[a])).collect();
    let mut origins = Vec::new();
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(PatchGrid { volume_shape, patch_shape, stride, origins })
}

impl PatchGrid {
    /// Number of patches covering each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let [vz, vy, vx] = self.volume_shape;
        let [pz, py, px] = self.patch_shape;
        let mut count = vec![0u32; vz * vy * vx];
        for o in &self.origins {
            for z in o[0]..o[0] + pz {
                for y in o[1]..o[1] + py {
                    let row = (z * vy + y) * vx;
                    for c in &mut count[row + o[2]..row + o[2] + px] {
                        *c += 1;
                    }
                }
            }
        }
        count
    }
}

pub fn extract_patch(v: &Volume, origin: [usize; 3], patch_shape: [usize; 3]) -> Result<Volume> {
    if (0..3).any(|a| origin[a] + patch_shape[a] > v.shape[a]) || patch_shape.contains(&0) {
        return Err(Error::Shape(format!(
            "patch at {origin:?} of shape {patch_shape:?} exceeds volume {:?}",
            v.shape
        )));
    }
    let data = copy_region(&v.data, 1, v.shape, origin, patch_shape);
    Volume::new(patch_shape, v.spacing, data, v.kind)
}

/// Copies a sub-box out of a `[C, Z, Y, X]` buffer.
pub fn copy_region(data: &[f32], channels: usize, dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * size.iter().product::<usize>());
    let plane = dims.iter().product::<usize>();
    for c in 0..channels {
        for z in origin[0]..origin[0] + size[0] {
            for y in origin[1]..origin[1] + size[1] {
                let row = c * plane + (z * dims[1] + y) * dims[2] + origin[2];
                out.extend_from_slice(&data[row..row + size[2]]);
            }
        }
    }
    out
}

/// Averages per-patch `[C, pz, py, px]` outputs back onto the volume grid.
pub fn fuse_patches(grid: &PatchGrid, outputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    if outputs.len() != grid.origins.len() {
        return Err(Error::Shape(format!(
            "missing patch output: grid has {} patches, got {} outputs",
            grid.origins.len(),
            outputs.len()
        )));
    }
    let Some(first) = outputs.first() else {
        return Err(Error::Shape("patch grid is empty".into()));
    };
    let channels = first.channels();
    let [pz, py, px] = grid.patch_shape;
    let [vz, vy, vx] = grid.volume_shape;
    let plane = vz * vy * vx;
    let mut sum = vec![0f64; channels * plane];
    for (o, t) in grid.origins.iter().zip(outputs) {
        if t.shape() != [channels, pz, py, px] {
            return Err(Error::Shape(format!(
                "channel mismatch: patch output {:?}, expected {:?}",
                t.shape(),
                [channels, pz, py, px]
            )));
        }
        for c in 0..channels {
            for z in 0..pz {
                for y in 0..py {
                    let src = ((c * pz + z) * py + y) * px;
                    let dst = c * plane + ((o[0] + z) * vy + o[1] + y) * vx + o[2];
                    for (acc, &v) in sum[dst..dst + px].iter_mut().zip(&t.data()[src..src + px]) {
                        *acc += v as f64;
                    }
                }
            }
        }
    }
    let count = grid.coverage();
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i % plane] as f64) as f32)
        .collect();
    Ok(Tensor::new(vec![channels, vz, vy, vx], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: [usize; 3]) -> Volume {
        let n = shape.iter().product();
        Volume::new(shape, [1.0; 3], (0..n).map(|i| i as f32).collect(), VolumeKind::Image).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.v3d");
        let v = Volume::new([4, 4, 4], [2.0, 1.0, 1.0], (0..64).map(|i| (i as f32).sin()).collect(), VolumeKind::Image)
            .unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.shape(), [4, 4, 4]);
        assert_eq!(back.spacing(), [2.0, 1.0, 1.0]);
        assert_eq!(back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn labels_are_stored_as_bytes_and_overwrite_works() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.v3d");
        save_volume(&ramp([2, 2, 2]), &p).unwrap();
        let l = Volume::new([2, 2, 2], [1.0; 3], vec![0., 1., 2., 0., 1., 2., 0., 1.], VolumeKind::Label).unwrap();
        save_volume(&l, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 8);
        assert!(std::str::from_utf8(&bytes[..nl]).unwrap().contains("\"u8\""));
        assert_eq!(load_volume(&p).unwrap(), l);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let v = ramp([4, 4, 4]);
        let mut bytes = encode_volume(&v);
        bytes.truncate(bytes.len() - 4);
        let err = decode_volume(&bytes, Path::new("x.v3d")).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");
    }

    #[test]
    fn unknown_dtype_and_missing_file() {
        let bytes = b"{\"shape\":[1,1,1],\"spacing\":[1,1,1],\"dtype\":\"f16\",\"kind\":\"image\"}\n\0\0".to_vec();
        assert!(decode_volume(&bytes, Path::new("x")).unwrap_err().to_string().contains("unknown dtype"));
        assert!(matches!(load_volume("/nonexistent/a.v3d"), Err(Error::Io { .. })));
    }

    #[test]
    fn resample_identity_and_constant() {
        let v = ramp([3, 4, 5]);
        assert_eq!(resample(&v, [1.0; 3]).unwrap(), v);
        let c = Volume::filled([5, 6, 7], [1.0, 0.7, 1.3], 0.5, VolumeKind::Image).unwrap();
        let r = resample(&c, [2.0, 1.0, 0.5]).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn resample_ramp_matches_closed_form() {
        // f(z) = z on 8 slices, spacing 1 -> 2: output j samples z = 2j + 0.5
        let v = Volume::new([8, 1, 1], [1.0; 3], (0..8).map(|z| z as f32).collect(), VolumeKind::Image).unwrap();
        let r = resample(&v, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.shape(), [4, 1, 1]);
        for (j, &x) in r.data().iter().enumerate() {
            assert!((x as f64 - (2.0 * j as f64 + 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_labels_use_nearest_neighbour() {
        let l = Volume::new([4, 1, 1], [1.0; 3], vec![0., 1., 2., 3.], VolumeKind::Label).unwrap();
        let r = resample(&l, [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(r.shape(), [8, 1, 1]);
        assert!(r.data().iter().all(|v| v.fract() == 0.0));
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[7], 3.0);
        assert!(resample(&l, [100.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn normalization_endpoints_midpoint_and_clipping() {
        let v = Volume::new([1, 1, 4], [1.0; 3], vec![-1000.0, 0.0, 1000.0, -5000.0], VolumeKind::Image).unwrap();
        let n = normalize_intensity(&v, (-1000.0, 1000.0)).unwrap();
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0, -1.0]);
        assert!(normalize_intensity(&v, (1.0, 1.0)).is_err());
    }

    #[test]
    fn grid_examples() {
        let g = plan_patch_grid([32, 32, 32], [32, 32, 32], 0.0).unwrap();
        assert_eq!(g.origins, vec![[0, 0, 0]]);
        let g = plan_patch_grid([48, 32, 32], [32, 32, 32], 0.5).unwrap();
        assert_eq!(g.stride, [16, 16, 16]);
        assert_eq!(g.origins.iter().map(|o| o[0]).collect::<Vec<_>>(), vec![0, 16]);
        let g = plan_patch_grid([33, 32, 32], [32, 32, 32], 0.0).unwrap();
        assert_eq!(g.origins.iter().map(|o| o[0]).collect::<Vec<_>>(), vec![0, 1]);
        assert!(plan_patch_grid([16, 32, 32], [32, 32, 32], 0.0).is_err());
    }

    #[test]
    fn extract_patch_indexes_directly() {
        let v = ramp([6, 7, 8]);
        let whole = extract_patch(&v, [0, 0, 0], [6, 7, 8]).unwrap();
        assert_eq!(whole, v);
        let p = extract_patch(&v, [1, 2, 3], [3, 4, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (z, y, x) = (rng.gen_range(0..3), rng.gen_range(0..4), rng.gen_range(0..5));
            assert_eq!(p.get(z, y, x), v.get(z + 1, y + 2, x + 3));
        }
        assert!(extract_patch(&v, [4, 0, 0], [3, 4, 5]).is_err());
    }

    #[test]
    fn non_overlapping_patches_partition_the_volume() {
        let g = plan_patch_grid([8, 8, 8], [4, 4, 4], 0.0).unwrap();
        assert_eq!(g.origins.len(), 8);
        assert!(g.coverage().iter().all(|&c| c == 1));
    }

    #[test]
    fn fusion_averages_overlapping_values() {
        let g = PatchGrid { volume_shape: [1, 1, 3], patch_shape: [1, 1, 2], stride: [1, 1, 1], origins: vec![[0, 0, 0], [0, 0, 1]] };
        let a = Tensor::new(vec![1, 1, 1, 2], vec![5.0, 1.0]);
        let b = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 7.0]);
        let f = fuse_patches(&g, &[a.clone(), b]).unwrap();
        assert_eq!(f.data(), &[5.0, 2.0, 7.0]);
        assert!(fuse_patches(&g, std::slice::from_ref(&a)).is_err());
        let wrong = Tensor::new(vec![2, 1, 1, 2], vec![0.0; 4]);
        assert!(fuse_patches(&g, &[a, wrong]).is_err());
    }

    #[test]
    fn fusion_matches_brute_force_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let vol = [rng.gen_range(4..12), rng.gen_range(4..12), rng.gen_range(4..12)];
            let patch = [rng.gen_range(2..=vol[0]), rng.gen_range(2..=vol[1]), rng.gen_range(2..=vol[2])];
            let grid = plan_patch_grid(vol, patch, [0.0, 0.25, 0.5][rng.gen_range(0..3)]).unwrap();
            let outs: Vec<Tensor<f32>> = grid
                .origins
                .iter()
                .map(|_| {
                    let n = 2 * patch.iter().product::<usize>();
                    Tensor::new(vec![2, patch[0], patch[1], patch[2]], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                })
                .collect();
            let fused = fuse_patches(&grid, &outs).unwrap();
            let plane = vol.iter().product::<usize>();
            let mut sum = vec![0f64; 2 * plane];
            let mut cnt = vec![0f64; plane];
            for (o, t) in grid.origins.iter().zip(&outs) {
                for c in 0..2 {
                    for z in 0..patch[0] {
                        for y in 0..patch[1] {
                            for x in 0..patch[2] {
                                let vi = ((o[0] + z) * vol[1] + o[1] + y) * vol[2] + o[2] + x;
                                sum[c * plane + vi] += t.data()[((c * patch[0] + z) * patch[1] + y) * patch[2] + x] as f64;
                                if c == 0 {
                                    cnt[vi] += 1.0;
                                }
                            }
                        }
                    }
                }
            }
            for (i, &f) in fused.data().iter().enumerate() {
                assert_eq!(f, (sum[i] / cnt[i % plane]) as f32);
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_any_volume(z in 1usize..5, y in 1usize..5, x in 1usize..5, sz in 0.1f64..4.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = z * y * x;
            let v = Volume::new([z, y, x], [sz, 1.0 / sz, 1.25], (0..n).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect(), VolumeKind::Coord).unwrap();
            let back = decode_volume(&encode_volume(&v), Path::new("mem")).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn identity_fusion_reproduces_input(
            vz in 4usize..14, vy in 4usize..14, vx in 4usize..14,
            pz in 2usize..8, py in 2usize..8, px in 2usize..8,
            ov in 0usize..3,
        ) {
            let vol = [vz, vy, vx];
            let patch = [pz.min(vz), py.min(vy), px.min(vx)];
            let grid = plan_patch_grid(vol, patch, [0.0, 0.25, 0.5][ov]).unwrap();
            prop_assert!(grid.coverage().iter().all(|&c| c >= 1));
            let v = ramp(vol);
            let outs: Vec<_> = grid.origins.iter().map(|&o| extract_patch(&v, o, patch).unwrap().to_tensor()).collect();
            let fused = fuse_patches(&grid, &outs).unwrap();
            for (a, b) in fused.data().iter().zip(v.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
