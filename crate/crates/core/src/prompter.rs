//! Domain prompter: learnable virtual-domain vectors that perturb prototypes.
//!
//! Three losses supervise the domains:
//!
//! * diversity: InfoNCE over raw domain dot products, pushing domains apart;
//! * consistency: the same prototype perturbed by two domains must stay closer
//!   to itself than to other perturbed prototypes;
//! * perturbed classification: perturbed prototypes must still be classified
//!   as their own class by the head.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapt::PrototypeVars;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::{scored_cross_entropy, HeadVars};
use crate::rng;

pub const DEFAULT_TAU_PROTO: f64 = 2.0;
pub const DEFAULT_TAU_DOMAIN: f64 = 0.1;
/// Standard deviation of the Gaussian domain initialization.
pub const DOMAIN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainVectors {
    /// `N_dom x D`.
    pub matrix: Tensor,
}

impl DomainVectors {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub tau_domain: f64,
    pub tau_proto: f64,
    /// `N_dom = domains_per_class * N`.
    pub domains_per_class: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            tau_domain: DEFAULT_TAU_DOMAIN,
            tau_proto: DEFAULT_TAU_PROTO,
            domains_per_class: 2,
        }
    }
}

impl DpConfig {
    pub fn n_dom(&self, n_way: usize) -> usize {
        self.domains_per_class * n_way
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_domain > 0.0 && self.tau_proto > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.domains_per_class == 0 {
            return Err(Error::Config("need at least one domain per class".into()));
        }
        Ok(())
    }
}

/// `N_dom x D` Gaussian vectors (std 0.02) from the domain-init stream of `seed`.
pub fn init_domains(n_way: usize, dim: usize, config: &DpConfig, seed: u64) -> Result<DomainVectors> {
    if n_way == 0 {
        return Err(Error::Config("domain prompter needs N >= 1".into()));
    }
    config.validate()?;
    let mut rng = rng::stream(seed, rng::STREAM_DOMAIN_INIT);
    let normal = Normal::new(0.0, DOMAIN_INIT_STD).expect("valid std");
    let rows = config.n_dom(n_way);
    let data = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
    Ok(DomainVectors {
        matrix: Tensor::new(rows, dim, data)?,
    })
}

/// Elementwise sum of a prototype and a domain vector.
pub fn perturb(prototype: &[f64], domain: &[f64]) -> Result<Vec<f64>> {
    if prototype.len() != domain.len() {
        return Err(Error::Shape {
            op: "perturb",
            left: crate::error::Shape(1, prototype.len()),
            right: crate::error::Shape(1, domain.len()),
        });
    }
    Ok(prototype.iter().zip(domain).map(|(p, d)| p + d).collect())
}

/// Draws a pair of distinct domain indices `(k_i, m_i)` for every class.
pub fn sample_pairs(rng: &mut ChaCha8Rng, n_way: usize, n_dom: usize) -> Result<Vec<(usize, usize)>> {
    if n_dom < 2 {
        return Err(Error::Config(format!("need two distinct domains, have {n_dom}")));
    }
    Ok((0..n_way)
        .map(|_| {
            let k = rng::index_below(rng, n_dom);
            let mut m = rng::index_below(rng, n_dom - 1);
            if m >= k {
                m += 1;
            }
            (k, m)
        })
        .collect())
}

/// Diversity InfoNCE: `mean_i -log softmax_j(d_i . d_j / tau)[i]`.
pub fn domain_diversity_loss(tape: &Tape, domains: Var, tau: f64) -> Result<Var> {
    if domains.rows() == 0 {
        return Err(Error::contract("no domain vectors"));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let gram = tape.matmul_nt(domains, domains)?;
    let logits = tape.scale(gram, 1.0 / tau)?;
    let targets: Vec<usize> = (0..domains.rows()).collect();
    tape.cross_entropy_with_logits(logits, &targets)
}

/// Consistency loss value and whether it was degenerate (single class).
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyLoss {
    pub loss: Var,
    pub degenerate: bool,
}

fn check_pairs(pairs: &[(usize, usize)], n_way: usize, n_dom: usize) -> Result<()> {
    if pairs.len() != n_way {
        return Err(Error::contract(format!("{} domain pairs for {n_way} classes", pairs.len())));
    }
    for &(k, m) in pairs {
        if k == m || k >= n_dom || m >= n_dom {
            return Err(Error::contract(format!("invalid domain pair ({k}, {m}) for {n_dom} domains")));
        }
    }
    Ok(())
}

/// Consistency InfoNCE over perturbed prototypes.
///
/// Anchor `i` is `p_i + d_{k_i}`; its candidates are `p_j + d_{m_i}` for every
/// class `j`, with `j = i` the positive. Expanding the dot product,
/// `logit_ij = a_i . p_j + a_i . d_{m_i}`, which is one matrix product plus a
/// per-row offset.
pub fn prototype_consistency_loss(
    tape: &Tape,
    prototypes: Var,
    domains: Var,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<ConsistencyLoss> {
    let n = prototypes.rows();
    check_pairs(pairs, n, domains.rows())?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if n == 1 {
        return Ok(ConsistencyLoss {
            loss: tape.constant(Tensor::scalar(0.0))?,
            degenerate: true,
        });
    }
    let ks: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ms: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let dk = tape.select_rows(domains, &ks)?;
    let dm = tape.select_rows(domains, &ms)?;
    let anchors = tape.add(prototypes, dk)?;
    let cross = tape.matmul_nt(anchors, prototypes)?;
    let offset = tape.row_dot(anchors, dm)?;
    let logits = tape.add(cross, offset)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let targets: Vec<usize> = (0..n).collect();
    Ok(ConsistencyLoss {
        loss: tape.cross_entropy_with_logits(logits, &targets)?,
        degenerate: false,
    })
}

/// Cross-entropy of both perturbed copies `p_i + d_{k_i}` and `p_i + d_{m_i}`
/// against the unperturbed prototype set, label `i`.
pub fn perturbed_classification_loss(
    tape: &Tape,
    prototypes: &PrototypeVars,
    domains: Var,
    pairs: &[(usize, usize)],
    head: &HeadVars,
    cls_temperature: f64,
    top_k: usize,
) -> Result<Var> {
    let n = prototypes.object.rows();
    check_pairs(pairs, n, domains.rows())?;
    let ks: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ms: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let dk = tape.select_rows(domains, &ks)?;
    let dm = tape.select_rows(domains, &ms)?;
    let a = tape.add(prototypes.object, dk)?;
    let b = tape.add(prototypes.object, dm)?;
    let perturbed = tape.concat_rows(&[a, b])?;
    let labels: Vec<usize> = (0..n).chain(0..n).collect();
    scored_cross_entropy(tape, perturbed, &labels, prototypes, head, cls_temperature, top_k, None)
}

/// The three prompter terms and their unweighted sum.
#[derive(Debug, Clone, Copy)]
pub struct DpLosses {
    pub domain: Var,
    pub proto: Var,
    pub proto_cls: Var,
    pub total: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn dp_loss(
    tape: &Tape,
    domains: Var,
    prototypes: &PrototypeVars,
    pairs: &[(usize, usize)],
    config: &DpConfig,
    head: &HeadVars,
    cls_temperature: f64,
    top_k: usize,
) -> Result<DpLosses> {
    let domain = domain_diversity_loss(tape, domains, config.tau_domain)?;
    let proto = prototype_consistency_loss(tape, prototypes.object, domains, pairs, config.tau_proto)?.loss;
    let proto_cls = perturbed_classification_loss(tape, prototypes, domains, pairs, head, cls_temperature, top_k)?;
    let total = tape.add(domain, proto)?;
    let total = tape.add(total, proto_cls)?;
    Ok(DpLosses {
        domain,
        proto,
        proto_cls,
        total,
    })
}
