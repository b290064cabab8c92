//! Learnable instance features and instance reweighting.
//!
//! The support embeddings of an episode become a trainable matrix. Object
//! prototypes are a residual blend of a learned-attention path and a plain
//! average path:
//!
//! ```text
//! w_c       = softmax_k(mlp(x_ck))
//! att_c     = sum_k w_ck x_ck
//! avg_c     = mean_k x_ck
//! proto_c   = alpha * fuse(att_c) + (1 - alpha) * avg_c
//! ```
//!
//! Background rows stay per-instance and only get renormalized.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::episode::Episode;
use crate::error::{Error, Result, Shape};
use crate::params::{uniform, InstanceLayout};

/// Default residual mixing weight of the attention path.
pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct LearnableInstances {
    /// `(N*K + N_bg) x D`: object rows grouped by class, then background rows.
    pub matrix: Tensor,
    pub layout: InstanceLayout,
}

pub fn init_learnable_instances(episode: &Episode) -> Result<LearnableInstances> {
    let rows: Vec<&[f64]> = episode
        .support
        .iter()
        .flatten()
        .chain(episode.background.iter())
        .map(|i| i.embedding.as_slice())
        .collect();
    let matrix = Tensor::from_rows(&rows)?;
    let layout = InstanceLayout {
        n_way: episode.n_way(),
        k_shot: episode.k_shot(),
        n_bg: episode.n_bg(),
        dim: episode.dim,
    };
    debug_assert_eq!(matrix.rows(), layout.total_rows());
    Ok(LearnableInstances { matrix, layout })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReweightParams {
    /// `D x 1` scoring layer.
    pub mlp_w: Tensor,
    /// `1 x 1` scoring bias.
    pub mlp_b: Tensor,
    /// `D x D` fusion layer applied to the attention path.
    pub fuse_w: Tensor,
    /// `1 x D` fusion bias.
    pub fuse_b: Tensor,
    pub alpha: f64,
}

impl ReweightParams {
    /// Scoring weights uniform in `±1/sqrt(D)`; fusion starts at identity plus
    /// uniform noise in `±0.05/sqrt(D)`.
    pub fn init(dim: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mlp_w = uniform(rng, dim, 1, bound);
        let mut fuse_w = uniform(rng, dim, dim, 0.05 * bound);
        for i in 0..dim {
            let v = fuse_w.get(i, i);
            fuse_w.set(i, i, v + 1.0);
        }
        Ok(Self {
            mlp_w,
            mlp_b: Tensor::zeros(1, 1),
            fuse_w,
            fuse_b: Tensor::zeros(1, dim),
            alpha,
        })
    }

    /// Parameters whose attention path is a plain average and whose fusion is the identity.
    pub fn neutral(dim: usize, alpha: f64) -> Self {
        Self {
            mlp_w: Tensor::zeros(dim, 1),
            mlp_b: Tensor::zeros(1, 1),
            fuse_w: Tensor::identity(dim),
            fuse_b: Tensor::zeros(1, dim),
            alpha,
        }
    }
}

/// Tape handles for the reweighting parameters.
#[derive(Debug, Clone, Copy)]
pub struct ReweightVars {
    pub mlp_w: Var,
    pub mlp_b: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

/// Differentiable prototypes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeVars {
    /// `N x D`, unit rows.
    pub object: Var,
    /// `N_bg x D`, unit rows; `None` when the episode has no background.
    pub background: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub object_prototypes: Tensor,
    pub background_prototypes: Tensor,
    pub class_names: Vec<String>,
}

impl PrototypeSet {
    pub fn n_way(&self) -> usize {
        self.object_prototypes.rows()
    }

    pub fn n_bg(&self) -> usize {
        self.background_prototypes.rows()
    }
}

fn object_rows(tape: &Tape, instances: Var, layout: &InstanceLayout) -> Result<Var> {
    if instances.rows() != layout.total_rows() || instances.cols() != layout.dim {
        return Err(Error::Shape {
            op: "object_rows",
            left: instances.shape(),
            right: Shape(layout.total_rows(), layout.dim),
        });
    }
    let idx: Vec<usize> = (0..layout.object_rows()).collect();
    tape.select_rows(instances, &idx)
}

/// Per-class means of the object rows (`N x D`).
pub fn class_means(tape: &Tape, instances: Var, layout: &InstanceLayout) -> Result<Var> {
    let obj = object_rows(tape, instances, layout)?;
    let (n, k) = (layout.n_way, layout.k_shot);
    let mut avg = Tensor::zeros(n, n * k);
    for c in 0..n {
        for j in 0..k {
            avg.set(c, c * k + j, 1.0 / k as f64);
        }
    }
    let avg = tape.constant(avg)?;
    tape.matmul(avg, obj)
}

/// Softmax-over-K instance weights (`N x K`).
pub fn instance_weights(tape: &Tape, instances: Var, layout: &InstanceLayout, vars: &ReweightVars) -> Result<Var> {
    let obj = object_rows(tape, instances, layout)?;
    let scores = tape.matmul(obj, vars.mlp_w)?;
    let scores = tape.add(scores, vars.mlp_b)?;
    let scores = tape.reshape(scores, layout.n_way, layout.k_shot)?;
    tape.row_softmax(scores)
}

/// Residual blend of the attention and average paths (`N x D`, not normalized).
pub fn reweight_prototypes(
    tape: &Tape,
    instances: Var,
    layout: &InstanceLayout,
    vars: &ReweightVars,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if layout.k_shot == 0 {
        return Err(Error::contract("reweighting needs K >= 1"));
    }
    let obj = object_rows(tape, instances, layout)?;
    let weights = instance_weights(tape, instances, layout, vars)?;
    let k = layout.k_shot;
    let mut attended = Vec::with_capacity(layout.n_way);
    for c in 0..layout.n_way {
        let rows: Vec<usize> = (c * k..(c + 1) * k).collect();
        let rows = tape.select_rows(obj, &rows)?;
        let w = tape.select_rows(weights, &[c])?;
        attended.push(tape.matmul(w, rows)?);
    }
    let attended = tape.concat_rows(&attended)?;
    let fused = tape.matmul(attended, vars.fuse_w)?;
    let fused = tape.add(fused, vars.fuse_b)?;
    let avg = class_means(tape, instances, layout)?;
    let a = tape.scale(fused, alpha)?;
    let b = tape.scale(avg, 1.0 - alpha)?;
    tape.add(a, b)
}

/// Normalizes object prototypes and passes background rows through one by one.
pub fn assemble_prototypes(
    tape: &Tape,
    object: Var,
    instances: Var,
    layout: &InstanceLayout,
) -> Result<PrototypeVars> {
    let object = tape.l2_normalize_rows(object)?;
    let background = if layout.n_bg > 0 {
        let idx: Vec<usize> = (layout.object_rows()..layout.total_rows()).collect();
        let bg = tape.select_rows(instances, &idx)?;
        Some(tape.l2_normalize_rows(bg)?)
    } else {
        None
    };
    Ok(PrototypeVars { object, background })
}

/// Builds prototypes on a tape: reweighted when `ir_enabled`, class means otherwise.
pub fn build_prototypes(
    tape: &Tape,
    instances: Var,
    layout: &InstanceLayout,
    reweight: &ReweightVars,
    alpha: f64,
    ir_enabled: bool,
) -> Result<PrototypeVars> {
    let object = if ir_enabled {
        reweight_prototypes(tape, instances, layout, reweight, alpha)?
    } else {
        class_means(tape, instances, layout)?
    };
    assemble_prototypes(tape, object, instances, layout)
}

impl PrototypeVars {
    pub fn to_set(&self, tape: &Tape, class_names: &[String], dim: usize) -> PrototypeSet {
        PrototypeSet {
            object_prototypes: tape.value(self.object),
            background_prototypes: self
                .background
                .map(|b| tape.value(b))
                .unwrap_or_else(|| Tensor::zeros(0, dim)),
            class_names: class_names.to_vec(),
        }
    }
}
