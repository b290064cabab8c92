//! Full-batch SGD finetuning of the enabled modules on an episode's support set.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{build_prototypes, init_learnable_instances, PrototypeVars, ReweightParams, ReweightVars, DEFAULT_ALPHA};
use crate::autodiff::{Tape, Tensor, Var};
use crate::boxes::Rect;
use crate::episode::{Episode, Instance};
use crate::error::{Error, Result, Shape};
use crate::head::{
    classification_loss_on_tape, localization_loss_on_tape, total_loss, HeadParams, HeadVars,
    QueryRegion, RegionLabel, DEFAULT_CLS_TEMPERATURE,
};
use crate::params::{AdaptationParams, InstanceLayout, Module, ParamVars};
use crate::prompter::{dp_loss, init_domains, sample_pairs, DpConfig, DEFAULT_TAU_DOMAIN, DEFAULT_TAU_PROTO};
use crate::rng;

pub const DEFAULT_LR: f64 = 0.002;
pub const DEFAULT_N_BG: usize = 530;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr: f64,
    /// `None` selects 80 epochs for one-shot episodes and 40 otherwise.
    pub epochs: Option<usize>,
    pub alpha: f64,
    pub tau_proto: f64,
    pub tau_domain: f64,
    pub n_bg: usize,
    pub cls_temperature: f64,
    pub enabled_modules: BTreeSet<Module>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            epochs: None,
            alpha: DEFAULT_ALPHA,
            tau_proto: DEFAULT_TAU_PROTO,
            tau_domain: DEFAULT_TAU_DOMAIN,
            n_bg: DEFAULT_N_BG,
            cls_temperature: DEFAULT_CLS_TEMPERATURE,
            enabled_modules: Module::ALL.into_iter().collect(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn epochs_for(&self, k_shot: usize) -> usize {
        self.epochs.unwrap_or(if k_shot == 1 { 80 } else { 40 })
    }

    pub fn dp_config(&self) -> DpConfig {
        DpConfig {
            tau_domain: self.tau_domain,
            tau_proto: self.tau_proto,
            domains_per_class: 2,
        }
    }

    pub fn with_modules(mut self, modules: impl IntoIterator<Item = Module>) -> Self {
        self.enabled_modules = modules.into_iter().collect();
        self
    }

    /// Drops the domain prompter for single-class episodes.
    pub fn resolved_for(mut self, n_way: usize) -> Self {
        if n_way < 2 {
            self.enabled_modules.remove(&Module::Dp);
        }
        self
    }

    pub fn validate(&self, n_way: usize) -> Result<()> {
        if self.enabled_modules.is_empty() {
            return Err(Error::Config("no modules enabled".into()));
        }
        if self.enabled_modules.contains(&Module::Dp) && n_way < 2 {
            return Err(Error::Config("domain prompter requires at least two classes".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.cls_temperature > 0.0) {
            return Err(Error::Config("cls_temperature must be positive".into()));
        }
        self.dp_config().validate()
    }

    pub fn enabled(&self, m: Module) -> bool {
        self.enabled_modules.contains(&m)
    }
}

/// Loss values of one epoch, measured before that epoch's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub loc: f64,
    pub cls: f64,
    pub domain: f64,
    pub proto: f64,
    pub proto_cls: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLosses>,
    pub wall_time_secs: f64,
}

impl TrainLog {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }

    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct") + "\n")
            .collect()
    }
}

/// Fresh parameters for an episode. Object and background instance rows start
/// as the support embeddings; the head starts from the identity projection.
pub fn init_params(episode: &Episode, config: &FinetuneConfig) -> Result<AdaptationParams> {
    let instances = init_learnable_instances(episode)?;
    let dim = episode.dim;
    let mut init_rng = rng::stream(config.seed, rng::STREAM_PARAM_INIT);
    let reweight = ReweightParams::init(dim, config.alpha, &mut init_rng)?;
    let head = HeadParams::init(dim, episode.n_way(), config.cls_temperature, &mut init_rng)?;
    let domains = init_domains(episode.n_way(), dim, &config.dp_config(), config.seed)?;
    Ok(AdaptationParams {
        class_names: episode.class_names.clone(),
        instances,
        reweight,
        ir_enabled: config.enabled(Module::Ir),
        domains,
        head,
    })
}

/// Parameters for evaluation without any finetuning: class-mean prototypes,
/// identity projection and a single retained class candidate.
pub fn frozen_params(episode: &Episode, config: &FinetuneConfig) -> Result<AdaptationParams> {
    let mut params = init_params(episode, config)?;
    params.ir_enabled = false;
    params.head.top_k = 1;
    Ok(params)
}

fn jitter(rng: &mut ChaCha8Rng, gt: &Rect) -> Rect {
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let cx = cx + rng.gen_range(-0.1..0.1) * w;
    let cy = cy + rng.gen_range(-0.1..0.1) * h;
    let w = w * rng.gen_range(-0.1f64..0.1).exp();
    let h = h * rng.gen_range(-0.1f64..0.1).exp();
    Rect::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Proposal boxes: ground-truth boxes with seeded ±10% center and log-size jitter.
pub(crate) fn regions_from(instances: &[&Instance], seed: u64, stream: u64) -> Vec<QueryRegion> {
    let mut rng = rng::stream(seed, stream);
    instances
        .iter()
        .map(|inst| QueryRegion {
            roi_feature: inst.embedding.clone(),
            proposal_box: inst.bbox.map(|b| jitter(&mut rng, &b)),
            gt_class: Some(inst.label.map_or(RegionLabel::Background, RegionLabel::Class)),
            gt_box: inst.bbox,
            background_row: None,
        })
        .collect()
}

/// Support and background instances as labelled training regions. Each
/// background region is scored without its own background prototype.
pub fn build_training_batch(episode: &Episode) -> Vec<QueryRegion> {
    let instances: Vec<&Instance> = episode.support.iter().flatten().chain(episode.background.iter()).collect();
    let mut regions = regions_from(&instances, episode.spec.seed, rng::STREAM_PROPOSALS);
    let first_bg = regions.len() - episode.background.len();
    for (j, r) in regions[first_bg..].iter_mut().enumerate() {
        r.background_row = Some(j);
    }
    regions
}

/// Query instances as evaluation regions.
pub fn build_query_regions(episode: &Episode) -> Vec<QueryRegion> {
    let instances: Vec<&Instance> = episode.query_instances().collect();
    regions_from(&instances, episode.spec.seed, rng::STREAM_QUERY_PROPOSALS)
}

/// Static settings that shape the objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec {
    pub layout: InstanceLayout,
    pub alpha: f64,
    pub ir_enabled: bool,
    pub cls_temperature: f64,
    pub top_k: usize,
    pub dp: Option<DpConfig>,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub prototypes: PrototypeVars,
    pub loc: Var,
    pub cls: Var,
    pub domain: Option<Var>,
    pub proto: Option<Var>,
    pub proto_cls: Option<Var>,
    pub total: Var,
}

/// `L_loc + L_cls (+ L_dp)` for the given parameter handles.
pub fn objective(
    tape: &Tape,
    vars: &ParamVars,
    spec: &ObjectiveSpec,
    batch: &[QueryRegion],
    pairs: Option<&[(usize, usize)]>,
) -> Result<ObjectiveVars> {
    let reweight = ReweightVars {
        mlp_w: vars.mlp_w,
        mlp_b: vars.mlp_b,
        fuse_w: vars.fuse_w,
        fuse_b: vars.fuse_b,
    };
    let head = HeadVars {
        projection: vars.projection,
        box_w: vars.box_w,
        box_b: vars.box_b,
    };
    let prototypes = build_prototypes(tape, vars.instances, &spec.layout, &reweight, spec.alpha, spec.ir_enabled)?;
    let loc = localization_loss_on_tape(tape, batch, &prototypes, &head)?;
    let cls = classification_loss_on_tape(tape, batch, &prototypes, &head, spec.cls_temperature, spec.top_k)?;
    let (dp, parts) = match (spec.dp, pairs) {
        (Some(cfg), Some(pairs)) => {
            let l = dp_loss(tape, vars.domains, &prototypes, pairs, &cfg, &head, spec.cls_temperature, spec.top_k)?;
            (Some(l.total), Some((l.domain, l.proto, l.proto_cls)))
        }
        (Some(_), None) => return Err(Error::contract("prompter enabled without domain pairs")),
        _ => (None, None),
    };
    let total = total_loss(tape, loc, cls, dp)?;
    Ok(ObjectiveVars {
        prototypes,
        loc,
        cls,
        domain: parts.map(|p| p.0),
        proto: parts.map(|p| p.1),
        proto_cls: parts.map(|p| p.2),
        total,
    })
}

/// `p <- p - lr * g`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape {
            op: "sgd_step",
            left: param.shape(),
            right: grad.shape(),
        });
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

pub(crate) fn layout_check(params: &AdaptationParams, episode: &Episode) -> Result<()> {
    let l = params.layout();
    if l.n_way != episode.n_way() || l.k_shot != episode.k_shot() || l.n_bg != episode.n_bg() || l.dim != episode.dim {
        return Err(Error::Shape {
            op: "parameter layout vs episode",
            left: Shape(l.total_rows(), l.dim),
            right: Shape(episode.n_way() * episode.k_shot() + episode.n_bg(), episode.dim),
        });
    }
    Ok(())
}

pub fn objective_spec(params: &AdaptationParams, config: &FinetuneConfig) -> ObjectiveSpec {
    ObjectiveSpec {
        layout: params.layout(),
        alpha: params.reweight.alpha,
        ir_enabled: params.ir_enabled,
        cls_temperature: params.head.cls_temperature,
        top_k: params.head.top_k,
        dp: config.enabled(Module::Dp).then(|| config.dp_config()),
    }
}

/// Finetunes freshly initialized parameters on the episode's support set.
pub fn finetune(episode: &Episode, config: &FinetuneConfig) -> Result<(AdaptationParams, TrainLog)> {
    config.validate(episode.n_way())?;
    let params = init_params(episode, config)?;
    finetune_from(params, episode, config)
}

/// Finetunes `params` in place of a fresh initialization.
pub fn finetune_from(
    mut params: AdaptationParams,
    episode: &Episode,
    config: &FinetuneConfig,
) -> Result<(AdaptationParams, TrainLog)> {
    config.validate(episode.n_way())?;
    layout_check(&params, episode)?;
    let started = Instant::now();
    let batch = build_training_batch(episode);
    let spec = objective_spec(&params, config);
    let n_dom = params.domains.len();
    // One draw per run keeps the objective fixed, so lr = 0 yields constant losses.
    let pairs = match spec.dp {
        Some(_) => Some(sample_pairs(
            &mut rng::stream(config.seed, rng::STREAM_DP_PAIRS),
            episode.n_way(),
            n_dom,
        )?),
        None => None,
    };
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs_for(episode.k_shot()) {
        let tape = Tape::new();
        let vars = params.register(&tape, &config.enabled_modules)?;
        let out = match objective(&tape, &vars, &spec, &batch, pairs.as_deref()) {
            Ok(out) => out,
            Err(Error::Numeric { .. }) => {
                log.wall_time_secs = started.elapsed().as_secs_f64();
                return Err(Error::Training {
                    epoch,
                    last_log: Box::new(log),
                });
            }
            Err(e) => return Err(e),
        };
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
        log.epochs.push(EpochLosses {
            epoch,
            total: tape.scalar_value(out.total),
            loc: tape.scalar_value(out.loc),
            cls: tape.scalar_value(out.cls),
            domain: value(out.domain),
            proto: value(out.proto),
            proto_cls: value(out.proto_cls),
        });

        let grads = tape.backward(out.total)?;
        let handles = vars.as_array();
        for ((tensor, (_, module)), var) in params
            .tensors_mut()
            .into_iter()
            .zip(crate::params::PARAM_NAMES)
            .zip(handles)
        {
            if config.enabled(module) {
                sgd_step(tensor, &grads.get(var), config.lr)?;
            }
        }
        if params.tensors().iter().any(|t| !t.is_finite()) {
            log.wall_time_secs = started.elapsed().as_secs_f64();
            return Err(Error::Training {
                epoch,
                last_log: Box::new(log),
            });
        }
    }
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((params, log))
}

/// Prototypes produced by `params` (no gradients).
pub fn prototypes_of(params: &AdaptationParams) -> Result<crate::adapt::PrototypeSet> {
    let tape = Tape::new();
    let vars = params.register(&tape, &BTreeSet::new())?;
    let reweight = ReweightVars {
        mlp_w: vars.mlp_w,
        mlp_b: vars.mlp_b,
        fuse_w: vars.fuse_w,
        fuse_b: vars.fuse_b,
    };
    let layout = params.layout();
    let pv = build_prototypes(&tape, vars.instances, &layout, &reweight, params.reweight.alpha, params.ir_enabled)?;
    Ok(pv.to_set(&tape, &params.class_names, layout.dim))
}

/// Per-class instance weights `N x K` of the reweighting module.
pub fn instance_weights_of(params: &AdaptationParams) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.register(&tape, &BTreeSet::new())?;
    let reweight = ReweightVars {
        mlp_w: vars.mlp_w,
        mlp_b: vars.mlp_b,
        fuse_w: vars.fuse_w,
        fuse_b: vars.fuse_b,
    };
    let w = crate::adapt::instance_weights(&tape, vars.instances, &params.layout(), &reweight)?;
    Ok(tape.value(w))
}
