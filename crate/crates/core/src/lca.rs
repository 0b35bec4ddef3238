//! Local-concept accumulation head.
//!
//! A `C×H×W` feature map is average-pooled (stride 1, no padding) with every
//! rectangular kernel that fits in the map except 1×1. Each spatial position
//! of each pooled map is one `C`-vector, a "local concept". All concepts pass
//! through one shared fully connected layer plus ReLU, and the resulting
//! `D`-vectors are averaged with equal weight into the image representation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub kh: usize,
    pub kw: usize,
}

impl KernelSpec {
    /// Number of stride-1 window positions on an `h×w` map.
    pub fn positions(&self, h: usize, w: usize) -> usize {
        (h - self.kh + 1) * (w - self.kw + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LcaConfig {
    /// Number of feature maps entering the head.
    pub in_channels: usize,
    /// Output width of the shared fully connected layer.
    pub embed_dim: usize,
    /// Whether 1×k and k×1 kernels count as larger than 1×1.
    pub include_one_by_k: bool,
}

impl LcaConfig {
    /// Defaults to `embed_dim == in_channels` with 1×k kernels included.
    pub fn new(in_channels: usize) -> Self {
        LcaConfig {
            in_channels,
            embed_dim: in_channels,
            include_one_by_k: true,
        }
    }

    pub fn with_embed_dim(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Contract(format!(
                "LCA needs in_channels >= 1 and embed_dim >= 1, got {} and {}",
                self.in_channels, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// All pooling kernels for an `h×w` map, ordered by `kh` then `kw`.
pub fn enumerate_kernels(h: usize, w: usize, cfg: &LcaConfig) -> Result<Vec<KernelSpec>> {
    if h == 0 || w == 0 {
        return Err(Error::dim("enumerate_kernels", format!("empty map {h}x{w}")));
    }
    let min = if cfg.include_one_by_k { 1 } else { 2 };
    let kernels: Vec<KernelSpec> = (min..=h)
        .flat_map(|kh| (min..=w).map(move |kw| KernelSpec { kh, kw }))
        .filter(|k| (k.kh, k.kw) != (1, 1))
        .collect();
    if kernels.is_empty() {
        return Err(Error::EmptyKernelSet {
            height: h,
            width: w,
        });
    }
    Ok(kernels)
}

/// Number of local concepts produced for an `h×w` map.
pub fn concept_count(h: usize, w: usize, cfg: &LcaConfig) -> Result<usize> {
    let kernels = enumerate_kernels(h, w, cfg)?;
    if cfg.include_one_by_k {
        // Every stride-1 window of every size, minus the h·w 1×1 windows.
        Ok(h * (h + 1) / 2 * (w * (w + 1) / 2) - h * w)
    } else {
        Ok(kernels.iter().map(|k| k.positions(h, w)).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcaParams<T> {
    /// `D × C`
    pub fc_weight: Tensor<T>,
    /// `D`
    pub fc_bias: Tensor<T>,
}

/// Glorot-uniform weight with bound `sqrt(6 / (C + D))`, zero bias.
pub fn lca_param_init<T: Scalar>(cfg: &LcaConfig, rng: &mut Rng) -> LcaParams<T> {
    let bound = glorot_bound(cfg.in_channels, cfg.embed_dim);
    LcaParams {
        fc_weight: uniform_tensor(&[cfg.embed_dim, cfg.in_channels], bound, rng),
        fc_bias: Tensor::zeros(&[cfg.embed_dim]),
    }
}

pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn check_featmap<T: Scalar>(x: &Tensor<T>, cfg: &LcaConfig) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::dim(
            "lca_forward",
            format!("expected B×C×H×W, got {:?}", x.shape()),
        ));
    }
    let s = x.shape();
    if s[1] != cfg.in_channels {
        return Err(Error::dim(
            "lca_forward",
            format!("feature map has {} channels, head expects {}", s[1], cfg.in_channels),
        ));
    }
    Ok((s[0], s[2], s[3]))
}

/// Records the head on `tape`: `featmap` is `B×C×H×W`, output is `B×D`.
pub fn lca_forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    featmap: Var,
    fc_weight: Var,
    fc_bias: Var,
    cfg: &LcaConfig,
) -> Result<Var> {
    let (batch, h, w) = check_featmap(tape.value(featmap), cfg)?;
    let kernels = enumerate_kernels(h, w, cfg)?;
    let total = concept_count(h, w, cfg)?;
    // Concepts are materialized one kernel at a time and folded into a running
    // per-image sum in kernel order.
    let mut acc: Option<Var> = None;
    for k in &kernels {
        let pooled = tape.avgpool2d(featmap, k.kh, k.kw, 1)?;
        let rows = tape.spatial_rows(pooled)?;
        let embedded = tape.linear(rows, fc_weight, fc_bias)?;
        let activated = tape.relu(embedded)?;
        let per_image = tape.segment_sum(activated, batch)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, per_image)?,
            None => per_image,
        });
    }
    let sum = acc.expect("at least one kernel");
    tape.scale(sum, T::one() / T::from_usize(total))
}

/// Untaped evaluation of the head.
pub fn lca_forward<T: Scalar>(
    featmap: &Tensor<T>,
    params: &LcaParams<T>,
    cfg: &LcaConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.input(featmap.clone());
    let w = tape.input(params.fc_weight.clone());
    let b = tape.input(params.fc_bias.clone());
    let out = lca_forward_on(&mut tape, x, w, b, cfg)?;
    Ok(tape.value(out).clone())
}

/// Every embedded concept vector, `B × N × D`, in kernel order then
/// row-major position order.
pub fn concept_embeddings<T: Scalar>(
    featmap: &Tensor<T>,
    params: &LcaParams<T>,
    cfg: &LcaConfig,
) -> Result<Tensor<T>> {
    let (batch, h, w) = check_featmap(featmap, cfg)?;
    let d = cfg.embed_dim;
    let mut per_image: Vec<Vec<T>> = vec![Vec::new(); batch];
    for k in enumerate_kernels(h, w, cfg)? {
        let pooled = crate::ops::avgpool2d(featmap, k.kh, k.kw, 1)?;
        let rows = crate::ops::spatial_rows(&pooled)?;
        let emb = crate::ops::relu(&crate::ops::linear(&rows, &params.fc_weight, &params.fc_bias)?);
        let per = k.positions(h, w);
        for (b, chunk) in emb.data().chunks_exact(per * d).enumerate() {
            per_image[b].extend_from_slice(chunk);
        }
    }
    let n = per_image[0].len() / d;
    Tensor::new(&[batch, n, d], per_image.concat())
}

/// Parameter handles for an LCA head registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct LcaHead {
    pub cfg: LcaConfig,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl LcaHead {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: LcaConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let init = lca_param_init::<T>(&cfg, rng);
        let fc_weight = store.register(&format!("{prefix}.fc_weight"), init.fc_weight)?;
        let fc_bias = store.register(&format!("{prefix}.fc_bias"), init.fc_bias)?;
        Ok(LcaHead {
            cfg,
            fc_weight,
            fc_bias,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.fc_weight);
        let b = tape.param(store, self.fc_bias);
        lca_forward_on(tape, x, w, b, &self.cfg)
    }

    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> LcaParams<T> {
        LcaParams {
            fc_weight: store.get(self.fc_weight).value.clone(),
            fc_bias: store.get(self.fc_bias).value.clone(),
        }
    }
}
