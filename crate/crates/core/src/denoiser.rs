//! U-shaped noise-prediction network with a multi-level feature pyramid.
//!
//! Layout per level `l` (channels `base_width · channel_mult[l]`):
//!
//! ```text
//! encoder:  [pool] → res → res → [attn]           (skip saved)
//! decoder:  up ⊕ skip → res → res → [attn]        (pyramid level l)
//! ```
//!
//! The deepest level has no separate decoder stage; its encoder output is the
//! deepest pyramid entry. Residual blocks are modulated by a sinusoidal time
//! embedding through a per-block scale/shift. An optional coordinate-map
//! channel is concatenated with the noisy input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::nn::{self, init_conv, init_norm, norm_groups, Bound, ParamSet};
use crate::tape::{AttentionKind, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    Linear,
    Quadratic,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub channel_mult: Vec<usize>,
    pub attn: Vec<AttnKind>,
    pub time_embed_dim: usize,
    pub head_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::new(16, 3, false)
    }
}

impl DenoiserConfig {
    /// Linear attention on every level but the deepest, which gets quadratic
    /// attention; channel multipliers double per level.
    pub fn new(base_width: usize, levels: usize, conditioned: bool) -> Self {
        let mut attn = vec![AttnKind::Linear; levels];
        if let Some(last) = attn.last_mut() {
            *last = AttnKind::Quadratic;
        }
        Self {
            in_channels: if conditioned { 2 } else { 1 },
            base_width,
            levels,
            channel_mult: (0..levels).map(|l| 1 << l).collect(),
            attn,
            time_embed_dim: 4 * base_width,
            head_dim: 8,
        }
    }

    pub fn conditioned(&self) -> bool {
        self.in_channels == 2
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.width(l)).collect()
    }

    pub fn heads(&self, level: usize) -> usize {
        let c = self.width(level);
        if c <= self.head_dim {
            1
        } else {
            c / self.head_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("levels must be >= 2, got {}", self.levels));
        }
        if !(1..=2).contains(&self.in_channels) {
            return bad(format!("in_channels must be 1 or 2, got {}", self.in_channels));
        }
        if self.base_width == 0 || self.channel_mult.len() != self.levels || self.attn.len() != self.levels {
            return bad("channel_mult and attn need one entry per level and base_width > 0".into());
        }
        if self.channel_mult.contains(&0) {
            return bad("channel multipliers must be positive".into());
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim must be even and positive, got {}", self.time_embed_dim));
        }
        let enabled = self.attn.iter().any(|a| *a != AttnKind::None);
        let deepest = self.attn[self.levels - 1];
        if enabled && deepest != AttnKind::Quadratic {
            return bad("the deepest level must use quadratic attention when attention is enabled".into());
        }
        if self.attn[..self.levels - 1].contains(&AttnKind::Quadratic) {
            return bad("only the deepest level may use quadratic attention".into());
        }
        for l in 0..self.levels {
            let c = self.width(l);
            if self.attn[l] != AttnKind::None && !c.is_multiple_of(self.heads(l)) {
                return bad(format!("level {l}: width {c} not divisible into heads of {}", self.head_dim));
            }
            if norm_groups(c) == 0 {
                return bad(format!("level {l}: no group count for width {c}"));
            }
        }
        Ok(())
    }

    /// Smallest patch extent multiple the pyramid accepts.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_patch(&self, patch: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if patch.iter().any(|&p| p == 0 || p % d != 0) {
            return Err(Error::Shape(format!("patch shape {patch:?} not divisible by 2^(levels-1) = {d}")));
        }
        Ok(())
    }
}

/// Interleaved `[sin(tω₀), cos(tω₀), sin(tω₁), …]` with `ω_i` geometric from 1 down to 10⁻⁴.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!("time embedding dimension must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut e = Vec::with_capacity(dim);
    for i in 0..half {
        let frac = if half == 1 { 0.0 } else { i as f64 / (half - 1) as f64 };
        let w = 10_000f64.powf(-frac);
        e.push((t * w).sin());
        e.push((t * w).cos());
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    params: ParamSet<T>,
}

fn res_params<T: Scalar>(p: &mut ParamSet<T>, prefix: &str, cin: usize, cout: usize, temb: usize, rng: &mut impl Rng) {
    init_norm(p, &format!("{prefix}.norm1"), cin);
    init_conv(p, &format!("{prefix}.conv1"), cin, cout, [3; 3], false, rng);
    init_conv(p, &format!("{prefix}.film"), temb, 2 * cout, [1; 3], false, rng);
    init_norm(p, &format!("{prefix}.norm2"), cout);
    init_conv(p, &format!("{prefix}.conv2"), cout, cout, [3; 3], false, rng);
    if cin != cout {
        init_conv(p, &format!("{prefix}.skip"), cin, cout, [1; 3], false, rng);
    }
}

fn attn_params<T: Scalar>(p: &mut ParamSet<T>, prefix: &str, c: usize, rng: &mut impl Rng) {
    init_norm(p, &format!("{prefix}.norm"), c);
    init_conv(p, &format!("{prefix}.qkv"), c, 3 * c, [1; 3], false, rng);
    init_conv(p, &format!("{prefix}.proj"), c, c, [1; 3], false, rng);
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let temb = config.time_embed_dim;
        init_conv(&mut p, "temb.fc1", temb, temb, [1; 3], false, rng);
        init_conv(&mut p, "temb.fc2", temb, temb, [1; 3], false, rng);
        init_conv(&mut p, "in_conv", config.in_channels, config.width(0), [3; 3], false, rng);
        let mut prev = config.width(0);
        for l in 0..config.levels {
            let c = config.width(l);
            res_params(&mut p, &format!("enc.{l}.res.0"), prev, c, temb, rng);
            res_params(&mut p, &format!("enc.{l}.res.1"), c, c, temb, rng);
            if config.attn[l] != AttnKind::None {
                attn_params(&mut p, &format!("enc.{l}.attn"), c, rng);
            }
            prev = c;
        }
        for l in (0..config.levels - 1).rev() {
            let c = config.width(l);
            res_params(&mut p, &format!("dec.{l}.res.0"), config.width(l + 1) + c, c, temb, rng);
            res_params(&mut p, &format!("dec.{l}.res.1"), c, c, temb, rng);
            if config.attn[l] != AttnKind::None {
                attn_params(&mut p, &format!("dec.{l}.attn"), c, rng);
            }
        }
        init_norm(&mut p, "out.norm", config.width(0));
        init_conv(&mut p, "out.conv", config.width(0), 1, [3; 3], true, rng);
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Named tensors with stable names.
    pub fn named_tensors(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Replaces all parameters; names and shapes must match this configuration exactly.
    pub fn load_named_tensors(&mut self, tensors: ParamSet<T>) -> Result<()> {
        if let (Some(want), Some(got)) = (self.params.get("in_conv.w"), tensors.get("in_conv.w")) {
            if want.shape().get(1) != got.shape().get(1) {
                return Err(Error::Checkpoint(format!(
                    "in_channels mismatch: model has {}, checkpoint has {}",
                    want.shape()[1],
                    got.shape()[1]
                )));
            }
        }
        self.params.load_from(tensors)
    }

    /// Builds the architecture for `config` and loads `tensors` into it.
    pub fn from_params(config: DenoiserConfig, tensors: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.load_named_tensors(tensors)?;
        Ok(model)
    }

    pub fn with_config(self, config: DenoiserConfig) -> Self {
        Self { config, params: self.params }
    }

    fn validate_input(&self, tape: &Tape<T>, x: Var, cond: Option<Var>) -> Result<[usize; 3]> {
        let s = tape.shape(x);
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::Shape(format!("expected a [1, Z, Y, X] input, got {s:?}")));
        }
        let spatial = [s[1], s[2], s[3]];
        self.config.check_patch(spatial)?;
        match (cond, self.config.conditioned()) {
            (Some(c), true) => {
                if tape.shape(c) != s {
                    return Err(Error::Shape(format!(
                        "conditioning shape {:?} does not match input {s:?}",
                        tape.shape(c)
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Invalid("conditioning mismatch: model is unconditioned but a coordinate map was given".into()))
            }
            (None, true) => {
                return Err(Error::Invalid("conditioning mismatch: model expects a coordinate map channel".into()))
            }
        }
        Ok(spatial)
    }

    fn time_vector(&self, tape: &mut Tape<T>, p: &Bound, t: usize) -> Result<Var> {
        let d = self.config.time_embed_dim;
        let e = time_embedding(t as f64, d)?;
        let e = tape.constant(Tensor::new(vec![d, 1, 1, 1], e.into_iter().map(T::from_f64).collect()));
        let h = nn::conv(tape, p, "temb.fc1", e, ConvGeometry::cube(1));
        let h = tape.silu(h);
        let h = nn::conv(tape, p, "temb.fc2", h, ConvGeometry::cube(1));
        Ok(tape.silu(h))
    }

    fn res_block(&self, tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, temb: Var) -> Var {
        let cin = tape.shape(x)[0];
        let h = nn::norm(tape, p, &format!("{prefix}.norm1"), x, norm_groups(cin));
        let h = tape.silu(h);
        let h = nn::conv(tape, p, &format!("{prefix}.conv1"), h, ConvGeometry::cube(3));
        let cout = tape.shape(h)[0];
        let h = nn::norm(tape, p, &format!("{prefix}.norm2"), h, norm_groups(cout));
        let ss = nn::conv(tape, p, &format!("{prefix}.film"), temb, ConvGeometry::cube(1));
        let h = tape.scale_shift(h, ss);
        let h = tape.silu(h);
        let h = nn::conv(tape, p, &format!("{prefix}.conv2"), h, ConvGeometry::cube(3));
        let skip = if cin != cout { nn::conv(tape, p, &format!("{prefix}.skip"), x, ConvGeometry::cube(1)) } else { x };
        tape.add(skip, h)
    }

    fn attn_block(&self, tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, level: usize) -> Var {
        let kind = match self.config.attn[level] {
            AttnKind::None => return x,
            AttnKind::Linear => AttentionKind::Linear,
            AttnKind::Quadratic => AttentionKind::Quadratic,
        };
        let c = tape.shape(x)[0];
        let h = nn::norm(tape, p, &format!("{prefix}.norm"), x, norm_groups(c));
        let qkv = nn::conv(tape, p, &format!("{prefix}.qkv"), h, ConvGeometry::cube(1));
        let a = tape.attention(qkv, self.config.heads(level), kind);
        let o = nn::conv(tape, p, &format!("{prefix}.proj"), a, ConvGeometry::cube(1));
        tape.add(x, o)
    }

    /// Records the network on `tape`. Returns the predicted noise `[1, Z, Y, X]`
    /// and the decoder pyramid, level 0 (full resolution) first.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x_t: Var,
        t: usize,
        cond: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        self.validate_input(tape, x_t, cond)?;
        let levels = self.config.levels;
        let temb = self.time_vector(tape, p, t)?;
        let input = match cond {
            Some(c) => tape.concat(x_t, c),
            None => x_t,
        };
        let mut h = nn::conv(tape, p, "in_conv", input, ConvGeometry::cube(3));
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                h = tape.avg_pool2(h);
            }
            h = self.res_block(tape, p, &format!("enc.{l}.res.0"), h, temb);
            h = self.res_block(tape, p, &format!("enc.{l}.res.1"), h, temb);
            h = self.attn_block(tape, p, &format!("enc.{l}.attn"), h, l);
            skips.push(h);
        }
        let mut pyramid = vec![h; levels];
        for l in (0..levels - 1).rev() {
            let up = tape.upsample2(h);
            h = tape.concat(up, skips[l]);
            h = self.res_block(tape, p, &format!("dec.{l}.res.0"), h, temb);
            h = self.res_block(tape, p, &format!("dec.{l}.res.1"), h, temb);
            h = self.attn_block(tape, p, &format!("dec.{l}.attn"), h, l);
            pyramid[l] = h;
        }
        let c0 = self.config.width(0);
        let o = nn::norm(tape, p, "out.norm", h, norm_groups(c0));
        let o = tape.silu(o);
        let eps = nn::conv(tape, p, "out.conv", o, ConvGeometry::cube(3));
        Ok((eps, pyramid))
    }

    /// Inference pass returning the noise prediction and the pyramid tensors.
    pub fn infer(&self, x_t: &Tensor<T>, t: usize, cond: Option<&Tensor<T>>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::inference();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(x_t.clone());
        let c = cond.map(|c| tape.constant(c.clone()));
        let (eps, pyr) = self.forward(&mut tape, &bound, x, t, c)?;
        Ok((tape.value(eps).clone(), pyr.into_iter().map(|v| tape.value(v).clone()).collect()))
    }
}

impl<T: Scalar> EpsModel<T> for Denoiser<T> {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn parameters(&self) -> &ParamSet<T> {
        &self.params
    }

    fn predict(&self, tape: &mut Tape<T>, params: &Bound, x_t: Var, t: usize, cond: Option<Var>) -> Result<Var> {
        Ok(self.forward(tape, params, x_t, t, cond)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn time_embedding_properties() {
        let e0 = time_embedding(0.0, 16).unwrap();
        for i in 0..8 {
            assert_eq!(e0[2 * i], 0.0);
            assert_eq!(e0[2 * i + 1], 1.0);
        }
        let a = time_embedding(10.0, 16).unwrap();
        let b = time_embedding(11.0, 16).unwrap();
        assert_ne!(a, b);
        assert!(a.iter().chain(&b).all(|v| (-1.0..=1.0).contains(v)));
        assert!(time_embedding(3.0, 7).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::new(8, 3, false).validate().is_ok());
        assert!(DenoiserConfig::new(8, 1, false).validate().is_err());
        let mut c = DenoiserConfig::new(8, 3, false);
        c.attn[2] = AttnKind::Linear;
        assert!(c.validate().is_err());
        c.attn = vec![AttnKind::None; 3];
        assert!(c.validate().is_ok());
        let mut c = DenoiserConfig::new(8, 3, false);
        c.attn[0] = AttnKind::Quadratic;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_init_output_and_pyramid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DenoiserConfig::new(4, 3, false);
        let net = Denoiser::<f32>::new(cfg, &mut rng).unwrap();
        let x: Tensor<f32> = gaussian_like(&[1, 32, 32, 16], &mut rng);
        let (eps, pyr) = net.infer(&x, 17, None).unwrap();
        assert_eq!(eps.shape(), &[1, 32, 32, 16]);
        assert!(eps.data().iter().all(|&v| v == 0.0));
        let shapes: Vec<Vec<usize>> = pyr.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 32, 32, 16], vec![8, 16, 16, 8], vec![16, 8, 8, 4]]);
    }

    #[test]
    fn input_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Denoiser::<f32>::new(DenoiserConfig::new(4, 3, true), &mut rng).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 8, 8, 8]);
        assert!(net.infer(&x, 1, None).unwrap_err().to_string().contains("conditioning mismatch"));
        assert!(net.infer(&x, 1, Some(&Tensor::zeros(&[1, 8, 8, 4]))).is_err());
        assert!(net.infer(&Tensor::zeros(&[1, 6, 8, 8]), 1, Some(&Tensor::zeros(&[1, 6, 8, 8]))).is_err());
        assert!(net.infer(&x, 1, Some(&x)).is_ok());
    }

    #[test]
    fn conditioning_changes_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Denoiser::<f32>::new(DenoiserConfig::new(4, 2, true), &mut rng).unwrap();
        // give the zero-initialised head weights so the output depends on the input
        let w = crate::nn::truncated_normal(&[1, 4, 3, 3, 3], 0.02, &mut rng);
        *net.params_mut().get_mut("out.conv.w").unwrap() = w;
        let x: Tensor<f32> = gaussian_like(&[1, 4, 4, 4], &mut rng);
        let a = net.infer(&x, 5, Some(&Tensor::full(&[1, 4, 4, 4], -0.5))).unwrap();
        let b = net.infer(&x, 5, Some(&Tensor::full(&[1, 4, 4, 4], 0.5))).unwrap();
        assert_ne!(a.0, b.0);
        assert_ne!(a.1[0], b.1[0]);
    }

    #[test]
    fn named_tensor_io() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Denoiser::<f32>::new(DenoiserConfig::new(4, 2, false), &mut rng).unwrap();
        let mut other = Denoiser::<f32>::new(DenoiserConfig::new(4, 2, false), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        other.load_named_tensors(net.named_tensors().clone()).unwrap();
        assert_eq!(other, net);
        let mut cond = Denoiser::<f32>::new(DenoiserConfig::new(4, 2, true), &mut rng).unwrap();
        let err = cond.load_named_tensors(net.named_tensors().clone()).unwrap_err();
        assert!(err.to_string().contains("in_channels mismatch"), "{err}");
    }
}
