use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EncoderConfig, FfnType, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(in, out)`; outputs are `x · weight + bias`.
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ffn<T> {
    Mlp {
        fc1: Linear<T>,
        fc2: Linear<T>,
    },
    SwiGlu {
        gate: Linear<T>,
        up: Linear<T>,
        down: Linear<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

/// Projection head: `Linear → GELU → Linear → ℓ2-normalize → prototypes`,
/// with prototype columns weight-normalized to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub prototypes: Array2<T>,
}

/// Every learnable tensor of backbone and heads. The same type doubles as
/// a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: EncoderConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: Array1<T>,
    pub pos_embed: Array2<T>,
    pub mask_token: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub instance_head: Head<T>,
    pub patch_head: Head<T>,
}

type Views<'a, T> = Vec<(String, ArrayViewD<'a, T>)>;
type ViewsMut<'a, T> = Vec<(String, ArrayViewMutD<'a, T>)>;

trait Tensors<T> {
    fn views<'a>(&'a self, prefix: &str, out: &mut Views<'a, T>);
    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut ViewsMut<'a, T>);
}

impl<T: Scalar> Tensors<T> for Linear<T> {
    fn views<'a>(&'a self, prefix: &str, out: &mut Views<'a, T>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.view().into_dyn()));
        }
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut ViewsMut<'a, T>) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b.view_mut().into_dyn()));
        }
    }
}

impl<T: Scalar> Tensors<T> for LayerNorm<T> {
    fn views<'a>(&'a self, prefix: &str, out: &mut Views<'a, T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut ViewsMut<'a, T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }
}

impl<T: Scalar> Tensors<T> for Ffn<T> {
    fn views<'a>(&'a self, prefix: &str, out: &mut Views<'a, T>) {
        match self {
            Ffn::Mlp { fc1, fc2 } => {
                fc1.views(&format!("{prefix}.fc1"), out);
                fc2.views(&format!("{prefix}.fc2"), out);
            }
            Ffn::SwiGlu { gate, up, down } => {
                gate.views(&format!("{prefix}.gate"), out);
                up.views(&format!("{prefix}.up"), out);
                down.views(&format!("{prefix}.down"), out);
            }
        }
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut ViewsMut<'a, T>) {
        match self {
            Ffn::Mlp { fc1, fc2 } => {
                fc1.views_mut(&format!("{prefix}.fc1"), out);
                fc2.views_mut(&format!("{prefix}.fc2"), out);
            }
            Ffn::SwiGlu { gate, up, down } => {
                gate.views_mut(&format!("{prefix}.gate"), out);
                up.views_mut(&format!("{prefix}.up"), out);
                down.views_mut(&format!("{prefix}.down"), out);
            }
        }
    }
}

impl<T: Scalar> Tensors<T> for Block<T> {
    fn views<'a>(&'a self, prefix: &str, out: &mut Views<'a, T>) {
        self.norm1.views(&format!("{prefix}.norm1"), out);
        self.qkv.views(&format!("{prefix}.attn.qkv"), out);
        self.proj.views(&format!("{prefix}.attn.proj"), out);
        self.norm2.views(&format!("{prefix}.norm2"), out);
        self.ffn.views(&format!("{prefix}.ffn"), out);
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut ViewsMut<'a, T>) {
        self.norm1.views_mut(&format!("{prefix}.norm1"), out);
        self.qkv.views_mut(&format!("{prefix}.attn.qkv"), out);
        self.proj.views_mut(&format!("{prefix}.attn.proj"), out);
        self.norm2.views_mut(&format!("{prefix}.norm2"), out);
        self.ffn.views_mut(&format!("{prefix}.ffn"), out);
    }
}

impl<T: Scalar> Tensors<T> for Head<T> {
    fn views<'a>(&'a self, prefix: &str, out: &mut Views<'a, T>) {
        self.fc1.views(&format!("{prefix}.fc1"), out);
        self.fc2.views(&format!("{prefix}.fc2"), out);
        out.push((format!("{prefix}.prototypes"), self.prototypes.view().into_dyn()));
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut ViewsMut<'a, T>) {
        self.fc1.views_mut(&format!("{prefix}.fc1"), out);
        self.fc2.views_mut(&format!("{prefix}.fc2"), out);
        out.push((format!("{prefix}.prototypes"), self.prototypes.view_mut().into_dyn()));
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All tensors with stable dotted names, in a fixed order.
    pub fn tensors(&self) -> Views<'_, T> {
        let mut out = Vec::new();
        self.patch_embed.views("patch_embed", &mut out);
        out.push(("cls_token".into(), self.cls_token.view().into_dyn()));
        out.push(("pos_embed".into(), self.pos_embed.view().into_dyn()));
        out.push(("mask_token".into(), self.mask_token.view().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.views(&format!("blocks.{i}"), &mut out);
        }
        self.norm.views("norm", &mut out);
        self.instance_head.views("instance_head", &mut out);
        self.patch_head.views("patch_head", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> ViewsMut<'_, T> {
        let mut out = Vec::new();
        self.patch_embed.views_mut("patch_embed", &mut out);
        out.push(("cls_token".into(), self.cls_token.view_mut().into_dyn()));
        out.push(("pos_embed".into(), self.pos_embed.view_mut().into_dyn()));
        out.push(("mask_token".into(), self.mask_token.view_mut().into_dyn()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.views_mut(&format!("blocks.{i}"), &mut out);
        }
        self.norm.views_mut("norm", &mut out);
        self.instance_head.views_mut("instance_head", &mut out);
        self.patch_head.views_mut("patch_head", &mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(T::zero());
        z
    }

    pub fn fill(&mut self, v: T) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(v);
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn sq_norm(&self) -> T {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|&v| v * v).sum::<T>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Euclidean distance over all tensors.
    pub fn distance(&self, other: &Self) -> Result<T> {
        check_compatible(self, other)?;
        let s: T = self
            .tensors()
            .iter()
            .zip(other.tensors().iter())
            .map(|((_, a), (_, b))| Zip::from(a).and(b).fold(T::zero(), |acc, &x, &y| acc + (x - y) * (x - y)))
            .sum();
        Ok(s.sqrt())
    }

    pub fn scale(&mut self, f: T) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * f);
        }
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(alpha, &b);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = init_params::<U>(&self.config, 0).expect("config already validated");
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = U::of(s.f64()));
        }
        out
    }
}

pub(crate) fn check_compatible<T: Scalar>(a: &ModelParams<T>, b: &ModelParams<T>) -> Result<()> {
    let ta = a.tensors();
    let tb = b.tensors();
    if ta.len() != tb.len() {
        return Err(Error::Shape(format!("{} vs {} tensors", ta.len(), tb.len())));
    }
    for ((na, va), (nb, vb)) in ta.iter().zip(&tb) {
        if na != nb || va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "{na} {:?} vs {nb} {:?}",
                va.shape(),
                vb.shape()
            )));
        }
    }
    Ok(())
}

/// Teacher update `θ_t ← m·θ_t + (1 − m)·θ_s` on every tensor.
pub fn ema_update<T: Scalar>(
    teacher: &mut ModelParams<T>,
    student: &ModelParams<T>,
    momentum: T,
) -> Result<()> {
    check_compatible(teacher, student)?;
    // incremental form keeps the teacher bit-exact when it equals the student
    let one_minus = T::one() - momentum;
    for ((_, mut t), (_, s)) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        Zip::from(&mut t).and(&s).for_each(|t, &s| *t += one_minus * (s - *t));
    }
    Ok(())
}

const INIT_STD: f64 = 0.02;

fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return T::of(z * INIT_STD);
        }
    }
}

struct Init<'r, R: Rng + ?Sized> {
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn mat<T: Scalar>(&mut self, r: usize, c: usize) -> Array2<T> {
        Array2::from_shape_simple_fn((r, c), || trunc_normal(self.rng))
    }

    fn vec<T: Scalar>(&mut self, n: usize) -> Array1<T> {
        Array1::from_shape_simple_fn(n, || trunc_normal(self.rng))
    }

    fn linear<T: Scalar>(&mut self, i: usize, o: usize, bias: bool) -> Linear<T> {
        Linear {
            weight: self.mat(i, o),
            bias: bias.then(|| Array1::zeros(o)),
        }
    }

    fn head<T: Scalar>(&mut self, cfg: &EncoderConfig) -> Head<T> {
        Head {
            fc1: self.linear(cfg.embed_dim, cfg.head_hidden_dim, true),
            fc2: self.linear(cfg.head_hidden_dim, cfg.head_bottleneck_dim, true),
            prototypes: self.mat(cfg.head_bottleneck_dim, cfg.n_prototypes),
        }
    }
}

fn layer_norm<T: Scalar>(d: usize) -> LayerNorm<T> {
    LayerNorm {
        gamma: Array1::ones(d),
        beta: Array1::zeros(d),
    }
}

/// Truncated-normal (σ = 0.02, cut at ±2σ) weights and tokens, zero biases,
/// unit LayerNorm gains. Deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = crate::rng::stream(seed, &[crate::rng::hash_str("init_params")]);
    let mut init = Init { rng: &mut rng };
    let d = cfg.embed_dim;
    let patch_embed = init.linear(cfg.patch_dim(), d, true);
    let cls_token = init.vec(d);
    let pos_embed = init.mat(cfg.n_tokens(), d);
    let mask_token = init.vec(d);
    let blocks = (0..cfg.depth)
        .map(|_| Block {
            norm1: layer_norm(d),
            qkv: init.linear(d, 3 * d, true),
            proj: init.linear(d, d, true),
            norm2: layer_norm(d),
            ffn: match cfg.ffn_type {
                FfnType::Mlp => Ffn::Mlp {
                    fc1: init.linear(d, cfg.ffn_hidden_dim, true),
                    fc2: init.linear(cfg.ffn_hidden_dim, d, true),
                },
                FfnType::Swiglu => Ffn::SwiGlu {
                    gate: init.linear(d, cfg.ffn_hidden_dim, true),
                    up: init.linear(d, cfg.ffn_hidden_dim, true),
                    down: init.linear(cfg.ffn_hidden_dim, d, true),
                },
            },
        })
        .collect();
    let instance_head = init.head(cfg);
    let patch_head = init.head(cfg);
    Ok(ModelParams {
        config: cfg.clone(),
        patch_embed,
        cls_token,
        pos_embed,
        mask_token,
        blocks,
        norm: layer_norm(d),
        instance_head,
        patch_head,
    })
}
