//! The frozen two-generator module and its checkpoint.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{AugmentedBackbone, BackboneHandle, Enhancer, TapPoint};
use crate::container::{Container, Endianness};
use crate::dcp::{gram_matrices, upper_triangle, GramNormalization};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nets::{Generator, GeneratorSpec};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};
use crate::train::{Stage1Checkpoint, Stage1Config, Stage2Checkpoint, Stage2Config};

pub const UFEM_ID: &str = "ufem.module";

/// Where a module came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage1: Option<Stage1Config>,
    pub stage2: Option<Stage2Config>,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Manifest label → digest, for whatever data the stages saw.
    pub manifest_digests: BTreeMap<String, String>,
}

/// `G_E2C ∘ G_D2C` at one tap of one backbone.
#[derive(Clone, Debug)]
pub struct UfemCheckpoint<T: Real = f32> {
    pub g_d2c: Generator<T>,
    pub g_e2c: Generator<T>,
    pub tap: TapPoint,
    pub backbone_id: String,
    pub backbone_checksum: String,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct UfemMeta {
    g_d2c: GeneratorSpec,
    g_e2c: GeneratorSpec,
    tap: TapPoint,
    backbone_id: String,
    backbone_checksum: String,
    provenance: Provenance,
}

/// Freezes a trained Stage-1/Stage-2 pair into one module.
pub fn compose_ufem<T: Real>(s1: &Stage1Checkpoint<T>, s2: &Stage2Checkpoint<T>) -> Result<UfemCheckpoint<T>> {
    s2.check_stage1(s1)?;
    if s2.g_d2c_checksum != s1.g_d2c.checksum() {
        return Err(Error::Incompatible(
            "stage-2 checkpoint was trained on a different stage-1 generator".into(),
        ));
    }
    let m = UfemCheckpoint::from_generators(
        s1.g_d2c.clone(),
        s2.g_e2c.clone(),
        s1.tap.clone(),
        s1.backbone_id.clone(),
        s1.backbone_checksum.clone(),
    )?;
    Ok(m.with_provenance(Provenance {
        stage1: Some(s1.config.clone()),
        stage2: Some(s2.config.clone()),
        stage1_steps: s1.step,
        stage2_steps: s2.step,
        manifest_digests: BTreeMap::new(),
    }))
}

impl<T: Real> UfemCheckpoint<T> {
    pub fn from_generators(
        g_d2c: Generator<T>,
        g_e2c: Generator<T>,
        tap: TapPoint,
        backbone_id: String,
        backbone_checksum: String,
    ) -> Result<Self> {
        for (name, g) in [("G_D2C", &g_d2c), ("G_E2C", &g_e2c)] {
            if g.spec.in_channels != tap.channels() || g.spec.feature_hw != tap.spatial() {
                return Err(Error::Incompatible(format!(
                    "{name} is built for {} channels at {:?}, tap `{}` is {:?}",
                    g.spec.in_channels, g.spec.feature_hw, tap.name, tap.output_shape
                )));
            }
        }
        Ok(Self {
            g_d2c,
            g_e2c,
            tap,
            backbone_id,
            backbone_checksum,
            provenance: Provenance::default(),
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn to_container(&self) -> Result<Container<T>> {
        let mut ps = ParamSet::new();
        ps.extend_prefixed("g_d2c", self.g_d2c.params());
        ps.extend_prefixed("g_e2c", self.g_e2c.params());
        let meta = UfemMeta {
            g_d2c: self.g_d2c.spec.clone(),
            g_e2c: self.g_e2c.spec.clone(),
            tap: self.tap.clone(),
            backbone_id: self.backbone_id.clone(),
            backbone_checksum: self.backbone_checksum.clone(),
            provenance: self.provenance.clone(),
        };
        Ok(Container::new(UFEM_ID, serde_json::to_value(meta)?, ps))
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.architecture_id != UFEM_ID {
            return Err(Error::Incompatible(format!("expected a UFEM checkpoint, found '{}'", c.architecture_id)));
        }
        let meta: UfemMeta = serde_json::from_value(c.metadata.clone())?;
        let m = Self::from_generators(
            Generator::from_parts(&meta.g_d2c, &c.tensors.with_prefix("g_d2c"))?,
            Generator::from_parts(&meta.g_e2c, &c.tensors.with_prefix("g_e2c"))?,
            meta.tap,
            meta.backbone_id,
            meta.backbone_checksum,
        )?;
        Ok(m.with_provenance(meta.provenance))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn save_with(&self, path: &Path, endianness: Endianness) -> Result<()> {
        self.to_container()?.save_with(path, endianness)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Errors unless `backbone` is the one this module was trained on.
    pub fn check_backbone(&self, backbone: &BackboneHandle<T>) -> Result<()> {
        if self.backbone_id != backbone.architecture_id || self.backbone_checksum != backbone.checksum() {
            return Err(Error::Incompatible(format!(
                "UFEM was trained on {} and does not match backbone {}",
                self.backbone_id, backbone.architecture_id
            )));
        }
        let t = backbone.tap(&self.tap.name)?;
        if t != &self.tap {
            return Err(Error::Incompatible(format!("tap `{}` differs from the backbone's", self.tap.name)));
        }
        Ok(())
    }

    /// The backbone with this module inserted at its tap.
    pub fn insert(self: &Arc<Self>, backbone: &Arc<BackboneHandle<T>>) -> Result<AugmentedBackbone<T>>
    where
        T: 'static,
    {
        self.check_backbone(backbone)?;
        let tap = self.tap.clone();
        backbone.insert_module(self.clone() as Arc<dyn Enhancer<T>>, &tap)
    }
}

impl<T: Real> Enhancer<T> for UfemCheckpoint<T> {
    fn enhance(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pa = self.g_d2c.bind(&mut g, false);
        let pb = self.g_e2c.bind(&mut g, false);
        let x = g.constant(features.clone());
        let ef = self.g_d2c.forward_graph(&mut g, &pa, x)?;
        let out = self.g_e2c.forward_graph(&mut g, &pb, ef)?;
        Ok(g.value(out).clone())
    }
}

/// Mean over samples of the mean absolute difference between each
/// sample's correlation vector and the mean correlation vector of `clear`.
pub fn mean_correlation_distance<T: Real>(features: &Tensor<T>, clear: &Tensor<T>, normalization: GramNormalization) -> Result<f64> {
    let vecs = |t: &Tensor<T>| -> Result<Vec<Vec<f64>>> {
        Ok(gram_matrices(t, None, normalization)?
            .iter()
            .map(|g| upper_triangle(g, true).data)
            .collect())
    };
    let target = vecs(clear)?;
    let dim = target.first().map_or(0, |v| v.len());
    let mut mean = vec![0.0; dim];
    for v in &target {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / target.len() as f64;
        }
    }
    let own = vecs(features)?;
    if own.is_empty() || dim == 0 || own[0].len() != dim {
        return Err(Error::Shape("correlation vectors of different sizes".into()));
    }
    Ok(own
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(a, b)| (a - b).abs()).sum::<f64>() / dim as f64)
        .sum::<f64>()
        / own.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_backbone, BackboneSpec, WeightsSource};
    use crate::nets::{GeneratorArch, GeneratorSpec};

    fn identity_module(b: &BackboneHandle<f32>) -> UfemCheckpoint<f32> {
        let tap = b.tap("block1").unwrap().clone();
        let spec = GeneratorSpec {
            architecture: GeneratorArch::FlatResidual,
            in_channels: tap.channels(),
            feature_hw: tap.spatial(),
            base_width: 8,
            residual_blocks: 1,
            ..Default::default()
        };
        let mut a = Generator::new(&spec).unwrap();
        let mut e = Generator::new(&GeneratorSpec { seed: 1, ..spec }).unwrap();
        a.zero_residual();
        e.zero_residual();
        UfemCheckpoint::from_generators(a, e, tap, b.architecture_id.clone(), b.checksum()).unwrap()
    }

    #[test]
    fn identity_pair_is_identity() {
        let b = load_backbone::<f32>(&BackboneSpec::tinyvgg(WeightsSource::Bundled { seed: 0 })).unwrap();
        let m = identity_module(&b);
        let x = Tensor::full(&[2, 16, 16, 16], 0.25f32);
        assert_eq!(m.enhance(&x).unwrap(), x);
    }

    #[test]
    fn wrong_backbone_is_rejected() {
        let b = load_backbone::<f32>(&BackboneSpec::tinyvgg(WeightsSource::Bundled { seed: 0 })).unwrap();
        let other = Arc::new(load_backbone::<f32>(&BackboneSpec::tinyvgg(WeightsSource::Bundled { seed: 1 })).unwrap());
        let m = Arc::new(identity_module(&b));
        assert!(matches!(m.insert(&other), Err(Error::Incompatible(_))));
    }

    #[test]
    fn distance_to_own_mean_of_constant_set_is_zero() {
        let x = Tensor::full(&[3, 2, 2, 2], 0.5f32);
        assert_eq!(mean_correlation_distance(&x, &x, GramNormalization::Raw).unwrap(), 0.0);
    }
}
