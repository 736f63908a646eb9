//! Every learned component together with its parameter groups.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecParams, CodecSpec, ContextWindow, LatentTriple};
use crate::critic::Ensemble;
use crate::error::{Error, Result};
use crate::gradnet::{checkpoint, ParamStore};
use crate::policy::Policy;
use crate::sim::{EnvKind, V_MAX};
use crate::world::WorldModel;

/// Architecture hyperparameters; everything needed to rebuild the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: EnvKind,
    pub grid_size: usize,
    pub window: usize,
    pub d_z: usize,
    pub d_m: usize,
    pub encoder_hidden: usize,
    pub hidden: usize,
    pub ensemble: usize,
}

impl ModelSpec {
    pub fn codec_spec(&self) -> CodecSpec {
        CodecSpec {
            kind: self.kind,
            window: self.window,
            obs_scale: match self.kind {
                EnvKind::Gridworld => 1.0 / (self.grid_size.max(2) - 1) as f64,
                EnvKind::Velocity => 1.0 / V_MAX,
            },
            d_z: self.d_z,
            d_m: self.d_m,
            hidden: self.encoder_hidden,
        }
    }
}

/// All parameter groups. Targets are Polyak copies of their online groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Stores {
    pub encoder: ParamStore,
    pub world_proj: ParamStore,
    pub policy_proj: ParamStore,
    pub dynamics: ParamStore,
    pub policy: ParamStore,
    pub reward_critic: ParamStore,
    pub cost_critic: ParamStore,
    pub target_policy: ParamStore,
    pub target_reward_critic: ParamStore,
    pub target_cost_critic: ParamStore,
}

impl Stores {
    pub const GROUPS: [&'static str; 10] = [
        "encoder",
        "world_proj",
        "policy_proj",
        "dynamics",
        "policy",
        "reward_critic",
        "cost_critic",
        "target_policy",
        "target_reward_critic",
        "target_cost_critic",
    ];

    pub fn all(&self) -> [&ParamStore; 10] {
        [
            &self.encoder,
            &self.world_proj,
            &self.policy_proj,
            &self.dynamics,
            &self.policy,
            &self.reward_critic,
            &self.cost_critic,
            &self.target_policy,
            &self.target_reward_critic,
            &self.target_cost_critic,
        ]
    }

    /// Groups updated by the optimizer, in a fixed order.
    pub fn trainable_mut(&mut self) -> [&mut ParamStore; 7] {
        [
            &mut self.encoder,
            &mut self.world_proj,
            &mut self.policy_proj,
            &mut self.dynamics,
            &mut self.policy,
            &mut self.reward_critic,
            &mut self.cost_critic,
        ]
    }

    pub fn trainable(&self) -> [&ParamStore; 7] {
        [
            &self.encoder,
            &self.world_proj,
            &self.policy_proj,
            &self.dynamics,
            &self.policy,
            &self.reward_critic,
            &self.cost_critic,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.all().iter().map(|s| s.num_params()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub codec: Codec,
    pub world: WorldModel,
    pub policy: Policy,
    pub reward_critic: Ensemble,
    pub cost_critic: Ensemble,
    pub stores: Stores,
}

impl Model {
    /// Fresh model; every group is initialized from one stream seeded by
    /// `seed`, in a fixed order.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = ParamStore::new("encoder");
        let mut world_proj = ParamStore::new("world_proj");
        let mut policy_proj = ParamStore::new("policy_proj");
        let codec = Codec::new(spec.codec_spec(), &mut encoder, &mut world_proj, &mut policy_proj, &mut rng)?;
        let mut dynamics = ParamStore::new("dynamics");
        let world = WorldModel::new(&mut dynamics, spec.d_m, spec.kind.action_dim(), spec.hidden, &mut rng)?;
        let mut policy_store = ParamStore::new("policy");
        let policy = Policy::new(&mut policy_store, spec.kind, spec.d_m, spec.hidden, &mut rng)?;
        let mut reward_store = ParamStore::new("reward_critic");
        let reward_critic = Ensemble::new(&mut reward_store, spec.kind, spec.d_z, spec.hidden, spec.ensemble, &mut rng)?;
        let mut cost_store = ParamStore::new("cost_critic");
        let cost_critic = Ensemble::new(&mut cost_store, spec.kind, spec.d_m, spec.hidden, spec.ensemble, &mut rng)?;
        let stores = Stores {
            target_policy: policy_store.clone_as("target_policy"),
            target_reward_critic: reward_store.clone_as("target_reward_critic"),
            target_cost_critic: cost_store.clone_as("target_cost_critic"),
            encoder,
            world_proj,
            policy_proj,
            dynamics,
            policy: policy_store,
            reward_critic: reward_store,
            cost_critic: cost_store,
        };
        Ok(Model {
            spec,
            codec,
            world,
            policy,
            reward_critic,
            cost_critic,
            stores,
        })
    }

    pub fn codec_params(&self) -> CodecParams<'_> {
        CodecParams {
            encoder: &self.stores.encoder,
            world: &self.stores.world_proj,
            policy: &self.stores.policy_proj,
        }
    }

    pub fn encode(&self, window: &ContextWindow) -> Result<LatentTriple> {
        self.codec.encode(self.codec_params(), window)
    }

    /// SHA-256 over every parameter group.
    pub fn digest(&self) -> String {
        checkpoint::params_digest(self.stores.all())
    }

    pub fn num_params(&self) -> usize {
        self.stores.num_params()
    }

    /// Writes all groups; `meta` gains the architecture under `"model"`.
    pub fn save(&self, dir: &Path, mut meta: serde_json::Value) -> Result<()> {
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("model".into(), serde_json::to_value(&self.spec)?);
            m.insert("params_digest".into(), self.digest().into());
        }
        checkpoint::save(dir, &self.stores.all(), meta)
    }

    /// Loads a checkpoint written by [`Model::save`], returning its metadata.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let ck = checkpoint::load(dir)?;
        let spec: ModelSpec = serde_json::from_value(
            ck.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("metadata lacks the model architecture".into()))?,
        )?;
        let mut model = Model::new(spec, 0)?;
        let fill = |slot: &mut ParamStore, name: &str| -> Result<()> {
            let loaded = ck.store(name)?;
            if !loaded.same_layout(slot) {
                return Err(Error::Checkpoint(format!("group {name} does not match the architecture")));
            }
            *slot = loaded.clone();
            Ok(())
        };
        let s = &mut model.stores;
        for (slot, name) in [
            &mut s.encoder,
            &mut s.world_proj,
            &mut s.policy_proj,
            &mut s.dynamics,
            &mut s.policy,
            &mut s.reward_critic,
            &mut s.cost_critic,
            &mut s.target_policy,
            &mut s.target_reward_critic,
            &mut s.target_cost_critic,
        ]
        .into_iter()
        .zip(Stores::GROUPS)
        {
            fill(slot, name)?;
        }
        Ok((model, ck.meta))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_spec(kind: EnvKind) -> ModelSpec {
        ModelSpec {
            kind,
            grid_size: 3,
            window: 2,
            d_z: 4,
            d_m: 3,
            encoder_hidden: 0,
            hidden: 4,
            ensemble: 2,
        }
    }

    #[test]
    fn same_seed_same_digest() {
        let a = Model::new(tiny_spec(EnvKind::Gridworld), 7).unwrap();
        let b = Model::new(tiny_spec(EnvKind::Gridworld), 7).unwrap();
        let c = Model::new(tiny_spec(EnvKind::Gridworld), 8).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn targets_start_equal_to_online() {
        let m = Model::new(tiny_spec(EnvKind::Velocity), 1).unwrap();
        assert_eq!(m.stores.policy.tensors(), m.stores.target_policy.tensors());
        assert_eq!(m.stores.cost_critic.tensors(), m.stores.target_cost_critic.tensors());
    }

    #[test]
    fn save_load_round_trip() {
        let m = Model::new(tiny_spec(EnvKind::Gridworld), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), serde_json::json!({"epoch": 0})).unwrap();
        let (back, meta) = Model::load(dir.path()).unwrap();
        assert_eq!(back.digest(), m.digest());
        assert_eq!(back.stores, m.stores);
        assert_eq!(meta["epoch"], 0);
    }
}
