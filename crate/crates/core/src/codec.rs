//! History encoder and the two projection heads.
//!
//! The encoder is a flat MLP over a fixed window of the most recent
//! transitions of the context plus the current state. Its output `Z` feeds
//! a world projection `Z^w` (dynamics and cost critic) and a policy
//! projection `Z^p` (policy), both `tanh(W z + b)` with a common width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, health, Result};
use crate::gradnet::{Activation, Bind, Mlp, ParamStore, Tape, Var};
use crate::sim::{Action, EnvKind, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub kind: EnvKind,
    /// Number of past transitions in a window.
    pub window: usize,
    /// Multiplies raw observations before they enter the network.
    pub obs_scale: f64,
    pub d_z: usize,
    pub d_m: usize,
    /// Hidden width of the encoder; 0 for a single layer.
    pub hidden: usize,
}

impl CodecSpec {
    /// Width of one embedded transition: validity flag, state, action,
    /// reward, cost, episode-end flag.
    pub fn slot_dim(&self) -> usize {
        1 + self.kind.obs_dim() + self.kind.action_dim() + 3
    }

    /// Flattened encoder input: all slots, then the current state and the
    /// elapsed fraction of the episode.
    pub fn input_dim(&self) -> usize {
        self.window * self.slot_dim() + self.kind.obs_dim() + 1
    }
}

/// The last `W` transitions of a context and the current state.
///
/// Slots run oldest to newest. Short histories are padded at the front;
/// padded slots have `mask == false` and contribute only zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub slots: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub current: Vec<f64>,
}

impl ContextWindow {
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.slots.iter().map(|s| s.len() + 1).sum::<usize>() + self.current.len());
        for (slot, &real) in self.slots.iter().zip(&self.mask) {
            if real {
                out.push(1.0);
                out.extend_from_slice(slot);
            } else {
                out.extend(std::iter::repeat_n(0.0, slot.len() + 1));
            }
        }
        out.extend_from_slice(&self.current);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTriple {
    pub z: Vec<f64>,
    pub zw: Vec<f64>,
    pub zp: Vec<f64>,
}

/// Tape handles of the three latents.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub z: Var,
    pub zw: Var,
    pub zp: Var,
}

/// Parameter groups read by the codec.
#[derive(Debug, Clone, Copy)]
pub struct CodecParams<'a> {
    pub encoder: &'a ParamStore,
    pub world: &'a ParamStore,
    pub policy: &'a ParamStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codec {
    spec: CodecSpec,
    encoder: Mlp,
    world: Mlp,
    policy: Mlp,
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(
        spec: CodecSpec,
        encoder: &mut ParamStore,
        world: &mut ParamStore,
        policy: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.window == 0 || spec.d_z == 0 || spec.d_m == 0 {
            return Err(config("codec window, d_z and d_m must be positive"));
        }
        if !spec.obs_scale.is_finite() {
            return Err(config("codec obs_scale must be finite"));
        }
        let mut widths = vec![spec.input_dim()];
        if spec.hidden > 0 {
            widths.push(spec.hidden);
        }
        widths.push(spec.d_z);
        let enc = Mlp::new(encoder, "enc", &widths, Activation::Tanh, rng)?;
        let w = Mlp::new(world, "world", &[spec.d_z, spec.d_m], Activation::Tanh, rng)?;
        let p = Mlp::new(policy, "policy", &[spec.d_z, spec.d_m], Activation::Tanh, rng)?;
        Ok(Codec {
            spec,
            encoder: enc,
            world: w,
            policy: p,
        })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn encoder_net(&self) -> &Mlp {
        &self.encoder
    }

    pub fn world_net(&self) -> &Mlp {
        &self.world
    }

    pub fn policy_net(&self) -> &Mlp {
        &self.policy
    }

    pub fn embed_action(&self, action: Action) -> Vec<f64> {
        match action {
            Action::Discrete(i) => {
                let mut v = vec![0.0; self.spec.kind.action_dim()];
                v[i] = 1.0;
                v
            }
            Action::Continuous(a) => vec![a],
        }
    }

    fn embed(&self, t: &Transition) -> Vec<f64> {
        let mut v: Vec<f64> = t.state.iter().map(|s| s * self.spec.obs_scale).collect();
        v.extend(self.embed_action(t.action));
        v.extend([t.reward, t.cost, if t.d_ctx { 1.0 } else { 0.0 }]);
        v
    }

    /// Window for deciding at step `t` of an episode of length `horizon`,
    /// given everything that happened earlier in the context.
    pub fn window(&self, history: &[Transition], state: &[f64], t: usize, horizon: usize) -> ContextWindow {
        let w = self.spec.window;
        let take = history.len().min(w);
        let pad = w - take;
        let slot = self.spec.slot_dim() - 1;
        let mut slots = vec![vec![0.0; slot]; pad];
        let mut mask = vec![false; pad];
        for tr in &history[history.len() - take..] {
            slots.push(self.embed(tr));
            mask.push(true);
        }
        let mut current: Vec<f64> = state.iter().map(|s| s * self.spec.obs_scale).collect();
        current.push(t as f64 / horizon.max(1) as f64);
        ContextWindow { slots, mask, current }
    }

    pub fn check_window(&self, w: &ContextWindow) -> Result<()> {
        let slot = self.spec.slot_dim() - 1;
        if w.slots.len() != self.spec.window
            || w.mask.len() != self.spec.window
            || w.slots.iter().any(|s| s.len() != slot)
            || w.current.len() != self.spec.kind.obs_dim() + 1
        {
            return Err(config("context window does not match the codec layout"));
        }
        Ok(())
    }

    pub fn encode(&self, p: CodecParams<'_>, window: &ContextWindow) -> Result<LatentTriple> {
        self.check_window(window)?;
        self.encode_features(p, &window.features())
    }

    pub fn encode_features(&self, p: CodecParams<'_>, features: &[f64]) -> Result<LatentTriple> {
        let z = self.encoder.eval(p.encoder, features);
        let (zw, zp) = self.project(p, &z);
        let out = LatentTriple { z, zw, zp };
        if out.z.iter().chain(&out.zw).chain(&out.zp).any(|v| !v.is_finite()) {
            return Err(health("non-finite latent"));
        }
        Ok(out)
    }

    pub fn project(&self, p: CodecParams<'_>, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.world.eval(p.world, z), self.policy.eval(p.policy, z))
    }

    pub fn project_world(&self, world: &ParamStore, z: &[f64]) -> Vec<f64> {
        self.world.eval(world, z)
    }

    pub fn project_policy(&self, policy: &ParamStore, z: &[f64]) -> Vec<f64> {
        self.policy.eval(policy, z)
    }

    /// Records the encoder and both projections. With `detached`, `Z` is
    /// passed through a stop-gradient before either projection, so nothing
    /// downstream reaches the encoder.
    pub fn encode_on(&self, tape: &mut Tape, p: CodecParams<'_>, features: &[f64], detached: bool) -> LatentVars {
        let x = tape.input(features.to_vec());
        let z = self.encoder.forward(tape, p.encoder, x, Bind::Train);
        let src = if detached { tape.stop_grad(z) } else { z };
        let zw = self.world.forward(tape, p.world, src, Bind::Train);
        let zp = self.policy.forward(tape, p.policy, src, Bind::Train);
        LatentVars { z, zw, zp }
    }

    /// World projection of a latent already on the tape.
    pub fn world_on(&self, tape: &mut Tape, world: &ParamStore, z: Var, bind: Bind) -> Var {
        self.world.forward(tape, world, z, bind)
    }

    /// Policy projection of a latent already on the tape.
    pub fn policy_on(&self, tape: &mut Tape, policy: &ParamStore, z: Var, bind: Bind) -> Var {
        self.policy.forward(tape, policy, z, bind)
    }
}
