//! Finite-difference verification of every training loss on small random fixtures.

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::adapt::{build_prototypes, PrototypeVars, ReweightVars};
use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::episode::{sample_episode, EpisodeSpec};
use crate::error::Result;
use crate::finetune::{build_training_batch, init_params, objective, FinetuneConfig, ObjectiveSpec};
use crate::head::{classification_loss_on_tape, localization_loss_on_tape, HeadVars, QueryRegion};
use crate::params::{AdaptationParams, Module, ParamVars};
use crate::prompter::{domain_diversity_loss, perturbed_classification_loss, prototype_consistency_loss, sample_pairs};
use crate::rng;
use crate::synth::{synth_pack, SynthConfig};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_FIXTURES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    Cls,
    Loc,
    Domain,
    Proto,
    ProtoCls,
    Total,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 6] = [
        CheckedLoss::Cls,
        CheckedLoss::Loc,
        CheckedLoss::Domain,
        CheckedLoss::Proto,
        CheckedLoss::ProtoCls,
        CheckedLoss::Total,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CheckedLoss::Cls => "cls",
            CheckedLoss::Loc => "loc",
            CheckedLoss::Domain => "domain",
            CheckedLoss::Proto => "proto",
            CheckedLoss::ProtoCls => "proto_cls",
            CheckedLoss::Total => "total",
        }
    }
}

impl std::str::FromStr for CheckedLoss {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckedLoss::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub loss: CheckedLoss,
    pub fixtures: usize,
    pub max_error: f64,
    pub passed: bool,
}

/// A tiny episode with every parameter group moved away from its initialization.
pub struct GradFixture {
    pub params: AdaptationParams,
    pub spec: ObjectiveSpec,
    pub batch: Vec<QueryRegion>,
    pub pairs: Vec<(usize, usize)>,
}

pub fn gradcheck_fixture(seed: u64) -> Result<GradFixture> {
    let (n, k, n_bg, dim) = (3, 2, 4, 6);
    let pack = synth_pack(&SynthConfig {
        n_classes: n,
        instances_per_class: k + 2,
        n_background: n_bg + 2,
        dim,
        seed,
        style_dim: 2,
        ..SynthConfig::default()
    })?;
    let episode = sample_episode(&pack, &EpisodeSpec::new(n, k, n_bg, seed))?;
    let config = FinetuneConfig {
        n_bg,
        seed,
        ..FinetuneConfig::default()
    };
    let mut params = init_params(&episode, &config)?;
    params.head.top_k = 2;

    let mut rng = rng::stream(seed, rng::STREAM_PARAM_INIT ^ 0xff);
    let mut jitter = |t: &mut Tensor, std: f64| {
        let d = Normal::new(0.0, std).expect("positive std");
        t.data_mut().iter_mut().for_each(|v| *v += d.sample(&mut rng));
    };
    jitter(&mut params.instances.matrix, 0.05);
    jitter(&mut params.reweight.mlp_w, 0.5);
    jitter(&mut params.reweight.mlp_b, 0.1);
    jitter(&mut params.reweight.fuse_w, 0.1);
    jitter(&mut params.reweight.fuse_b, 0.1);
    jitter(&mut params.domains.matrix, 0.3);
    jitter(&mut params.head.projection, 0.2);
    jitter(&mut params.head.box_w, 0.2);
    jitter(&mut params.head.box_b, 0.1);

    let mut pair_rng = rng::stream(seed, rng::STREAM_DP_PAIRS);
    let pairs = sample_pairs(&mut pair_rng, n, params.domains.len())?;
    let mut spec = crate::finetune::objective_spec(&params, &config.with_modules(Module::ALL));
    spec.top_k = params.head.top_k;
    Ok(GradFixture {
        batch: build_training_batch(&episode),
        params,
        spec,
        pairs,
    })
}

fn pieces(tape: &Tape, vars: &ParamVars, spec: &ObjectiveSpec) -> Result<(PrototypeVars, HeadVars)> {
    let reweight = ReweightVars {
        mlp_w: vars.mlp_w,
        mlp_b: vars.mlp_b,
        fuse_w: vars.fuse_w,
        fuse_b: vars.fuse_b,
    };
    let protos = build_prototypes(tape, vars.instances, &spec.layout, &reweight, spec.alpha, spec.ir_enabled)?;
    let head = HeadVars {
        projection: vars.projection,
        box_w: vars.box_w,
        box_b: vars.box_b,
    };
    Ok((protos, head))
}

/// The scalar `loss` of `fixture` as a function of all nine parameter tensors.
pub fn loss_on_tape(tape: &Tape, vars: &[Var], loss: CheckedLoss, fixture: &GradFixture) -> Result<Var> {
    let vars = ParamVars::from_slice(vars);
    let spec = &fixture.spec;
    let dp = spec.dp.expect("fixture enables the prompter");
    match loss {
        CheckedLoss::Domain => domain_diversity_loss(tape, vars.domains, dp.tau_domain),
        CheckedLoss::Total => Ok(objective(tape, &vars, spec, &fixture.batch, Some(&fixture.pairs))?.total),
        _ => {
            let (protos, head) = pieces(tape, &vars, spec)?;
            match loss {
                CheckedLoss::Cls => {
                    classification_loss_on_tape(tape, &fixture.batch, &protos, &head, spec.cls_temperature, spec.top_k)
                }
                CheckedLoss::Loc => localization_loss_on_tape(tape, &fixture.batch, &protos, &head),
                CheckedLoss::Proto => {
                    Ok(prototype_consistency_loss(tape, protos.object, vars.domains, &fixture.pairs, dp.tau_proto)?.loss)
                }
                CheckedLoss::ProtoCls => perturbed_classification_loss(
                    tape,
                    &protos,
                    vars.domains,
                    &fixture.pairs,
                    &head,
                    spec.cls_temperature,
                    spec.top_k,
                ),
                CheckedLoss::Domain | CheckedLoss::Total => unreachable!(),
            }
        }
    }
}

/// Worst relative error of `loss` over `fixtures` seeded fixtures.
pub fn check_loss(loss: CheckedLoss, fixtures: usize, eps: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..fixtures as u64 {
        let fixture = gradcheck_fixture(seed)?;
        let point: Vec<Tensor> = fixture.params.tensors().into_iter().cloned().collect();
        let err = grad_check(|tape: &Tape, vars: &[Var]| loss_on_tape(tape, vars, loss, &fixture), &point, eps)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn gradcheck_suite(losses: &[CheckedLoss], fixtures: usize, eps: f64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    losses
        .iter()
        .map(|&loss| {
            let max_error = check_loss(loss, fixtures, eps)?;
            Ok(GradCheckReport {
                loss,
                fixtures,
                max_error,
                passed: max_error <= tolerance,
            })
        })
        .collect()
}
