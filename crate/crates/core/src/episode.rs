//! Balanced N-way K-shot episode sampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::Rect;
use crate::error::{Error, Result};
use crate::pack::{FeaturePack, FeatureRecord};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_bg: usize,
    pub seed: u64,
    /// Explicit pack class indices; defaults to the first `n_way` classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_bg: usize, seed: u64) -> Self {
        Self {
            n_way,
            k_shot,
            n_bg,
            seed,
            classes: None,
        }
    }
}

/// One embedded instance as seen by an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Record index in the source pack.
    pub id: usize,
    /// Episode-local class index, `None` for background.
    pub label: Option<usize>,
    pub image_id: String,
    pub bbox: Option<Rect>,
    pub embedding: Vec<f64>,
}

impl Instance {
    fn from_record(id: usize, label: Option<usize>, rec: &FeatureRecord) -> Self {
        Self {
            id,
            label,
            image_id: rec.image_id.clone(),
            bbox: rec.bbox,
            embedding: rec.embedding().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryImage {
    pub image_id: String,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub dataset_id: String,
    pub dim: usize,
    /// Pack class index for each episode-local class.
    pub classes: Vec<usize>,
    pub class_names: Vec<String>,
    /// `support[c]` holds exactly K instances of class `c`.
    pub support: Vec<Vec<Instance>>,
    pub background: Vec<Instance>,
    pub query: Vec<QueryImage>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.spec.k_shot
    }

    pub fn n_bg(&self) -> usize {
        self.background.len()
    }

    pub fn support_ids(&self) -> Vec<usize> {
        self.support.iter().flatten().map(|i| i.id).collect()
    }

    pub fn background_ids(&self) -> Vec<usize> {
        self.background.iter().map(|i| i.id).collect()
    }

    pub fn query_ids(&self) -> Vec<usize> {
        self.query_instances().map(|i| i.id).collect()
    }

    pub fn query_instances(&self) -> impl Iterator<Item = &Instance> {
        self.query.iter().flat_map(|q| q.instances.iter())
    }

    /// Stable identifier of the sampled record sets.
    pub fn fingerprint(&self) -> u64 {
        let ids = self
            .support_ids()
            .into_iter()
            .chain([usize::MAX])
            .chain(self.background_ids())
            .chain([usize::MAX])
            .chain(self.query_ids());
        let header = format!("{}|{}|{}", self.dataset_id, self.spec.k_shot, self.spec.seed);
        rng::fnv1a(
            header
                .into_bytes()
                .into_iter()
                .chain(ids.flat_map(|i| (i as u64).to_le_bytes())),
        )
    }
}

/// Uniform sample of `n_bg` background records without replacement.
pub fn select_background(pack: &FeaturePack, n_bg: usize, seed: u64) -> Result<Vec<(usize, FeatureRecord)>> {
    let mut ids = pack.background_ids();
    if n_bg > ids.len() {
        return Err(Error::InsufficientBackground {
            requested: n_bg,
            available: ids.len(),
        });
    }
    let mut rng = rng::stream(seed, rng::STREAM_BACKGROUND);
    rng::partial_shuffle(&mut rng, &mut ids, n_bg);
    Ok(ids[..n_bg]
        .iter()
        .map(|&i| (i, pack.records[i].clone()))
        .collect())
}

pub fn sample_episode(pack: &FeaturePack, spec: &EpisodeSpec) -> Result<Episode> {
    if spec.n_way == 0 || spec.k_shot == 0 {
        return Err(Error::validation(None, "n_way and k_shot must be positive"));
    }
    if spec.n_way > pack.n_classes() {
        return Err(Error::validation(
            None,
            format!("n_way {} exceeds the pack's {} classes", spec.n_way, pack.n_classes()),
        ));
    }
    let classes: Vec<usize> = match &spec.classes {
        Some(list) => {
            if list.len() != spec.n_way {
                return Err(Error::validation(
                    None,
                    format!("{} explicit classes for n_way {}", list.len(), spec.n_way),
                ));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &c in list {
                if c >= pack.n_classes() || !seen.insert(c) {
                    return Err(Error::validation(None, format!("invalid or repeated class {c}")));
                }
            }
            list.clone()
        }
        None => (0..spec.n_way).collect(),
    };

    let mut rng = rng::stream(spec.seed, rng::STREAM_SUPPORT);
    let mut support = Vec::with_capacity(classes.len());
    let mut query: BTreeMap<String, Vec<Instance>> = BTreeMap::new();
    for (label, &class) in classes.iter().enumerate() {
        let mut ids = pack.class_ids(class);
        if ids.len() < spec.k_shot + 1 {
            return Err(Error::InsufficientData {
                class: pack.class_names[class].clone(),
                needed: spec.k_shot + 1,
                found: ids.len(),
            });
        }
        rng::partial_shuffle(&mut rng, &mut ids, spec.k_shot);
        let (chosen, rest) = ids.split_at_mut(spec.k_shot);
        support.push(
            chosen
                .iter()
                .map(|&i| Instance::from_record(i, Some(label), &pack.records[i]))
                .collect::<Vec<_>>(),
        );
        rest.sort_unstable();
        for &i in rest.iter() {
            let rec = &pack.records[i];
            query
                .entry(rec.image_id.clone())
                .or_default()
                .push(Instance::from_record(i, Some(label), rec));
        }
    }

    let background = select_background(pack, spec.n_bg, spec.seed)?
        .into_iter()
        .map(|(i, rec)| Instance::from_record(i, None, &rec))
        .collect();

    let query = query
        .into_iter()
        .map(|(image_id, mut instances)| {
            instances.sort_by_key(|i| i.id);
            QueryImage { image_id, instances }
        })
        .collect();

    Ok(Episode {
        spec: spec.clone(),
        dataset_id: pack.dataset_id.clone(),
        dim: pack.dim,
        class_names: classes.iter().map(|&c| pack.class_names[c].clone()).collect(),
        classes,
        support,
        background,
        query,
    })
}
