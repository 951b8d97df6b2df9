//! The full space-time super-resolution operator: input projection to a
//! 3-level feature pyramid, coarse-to-fine coupled motion estimation and
//! compensation, bidirectional propagation, and continuous spatial decoding.

mod checkpoint;
mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptState};
pub use pipeline::{pad_to_multiple, FeaturePyramid, FlowLevel, ForwardOutput, PairFlows};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::nn::{Binder, BoundConv, BoundLinear, ConvParams, LinearParams};
use crate::tensor::{Scalar, Tape, Tensor, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PYRAMID_LEVELS: usize = 3;

/// Architecture hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Channels per pyramid level, finest first.
    pub channels: [usize; PYRAMID_LEVELS],
    pub residual_blocks: usize,
    /// Iterations of the coupled aggregation per pyramid level.
    pub iter_layers: usize,
    pub decoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [32, 48, 64],
            residual_blocks: 3,
            iter_layers: 2,
            decoder_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// A minimal configuration for 64-bit gradient checking.
    pub fn tiny() -> Self {
        ModelConfig { channels: [4, 4, 4], residual_blocks: 1, iter_layers: 1, decoder_hidden: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iter_layers == 0 {
            return Err(Error::Config("model.iter_layers must be >= 1".into()));
        }
        if self.channels.iter().any(|&c| c < 2) || self.decoder_hidden == 0 {
            return Err(Error::Config("model channel widths must be >= 2".into()));
        }
        Ok(())
    }
}

/// Three-layer coordinate decoder: (C+4) -> hidden -> hidden -> 3.
#[derive(Clone, Debug)]
pub struct DecoderParams<S: Scalar> {
    pub l1: LinearParams<S>,
    pub l2: LinearParams<S>,
    pub l3: LinearParams<S>,
}

impl<S: Scalar> DecoderParams<S> {
    fn new(c: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        DecoderParams {
            l1: LinearParams::new(c + 4, hidden, rng),
            l2: LinearParams::new(hidden, hidden, rng),
            l3: LinearParams::new(hidden, 3, rng),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
        self.l3.visit(&format!("{prefix}.l3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.l1.visit_mut(&format!("{prefix}.l1"), f);
        self.l2.visit_mut(&format!("{prefix}.l2"), f);
        self.l3.visit_mut(&format!("{prefix}.l3"), f);
    }

    fn bind(&self, b: &mut Binder<S>) -> BoundDecoder {
        BoundDecoder { l1: self.l1.bind(b), l2: self.l2.bind(b), l3: self.l3.bind(b) }
    }
}

#[derive(Clone, Copy)]
pub struct BoundDecoder {
    pub l1: BoundLinear,
    pub l2: BoundLinear,
    pub l3: BoundLinear,
}

impl BoundDecoder {
    /// Pointwise decode of [m, C+4] feature+coordinate rows to RGB in [0,1].
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Value) -> Result<Value> {
        let h = self.l1.apply(tape, x)?;
        let h = tape.relu(h);
        let h = self.l2.apply(tape, h)?;
        let h = tape.relu(h);
        let o = self.l3.apply(tape, h)?;
        Ok(tape.sigmoid(o))
    }
}

/// All learned tensors of the model.
#[derive(Clone, Debug)]
pub struct StnoParams<S: Scalar> {
    pub proj_in: ConvParams<S>,
    pub proj_res: Vec<(ConvParams<S>, ConvParams<S>)>,
    pub proj_down: Vec<ConvParams<S>>,
    /// Attention per level (finest first) per iteration.
    pub attn: Vec<Vec<AttentionParams<S>>>,
    /// Pointwise linear carrying the previous iteration state into the next.
    pub state_fuse: Vec<Vec<LinearParams<S>>>,
    /// Channel adapters for upsampled coarser-level features: [C1->C0, C2->C1].
    pub guide_adapt: Vec<LinearParams<S>>,
    /// Propagation fusion conv (2C -> C), shared between the two sweep
    /// directions so the architecture is symmetric under time reversal.
    pub prop_fuse: ConvParams<S>,
    pub fuse_x: ConvParams<S>,
    /// Applied to both hidden states; sharing keeps fusion swap-symmetric.
    pub fuse_h: ConvParams<S>,
    pub decoder: DecoderParams<S>,
}

#[derive(Clone, Debug)]
pub struct StnoModel<S: Scalar> {
    pub config: ModelConfig,
    pub params: StnoParams<S>,
}

impl<S: Scalar> StnoModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let proj_in = ConvParams::new(3, c[0], 3, 1, &mut rng);
        let proj_res = (0..config.residual_blocks)
            .map(|_| {
                (
                    ConvParams::new(c[0], c[0], 3, 1, &mut rng),
                    ConvParams::new(c[0], c[0], 3, 1, &mut rng),
                )
            })
            .collect();
        let proj_down = vec![
            ConvParams::new(c[0], c[1], 3, 2, &mut rng),
            ConvParams::new(c[1], c[2], 3, 2, &mut rng),
        ];
        let attn = (0..PYRAMID_LEVELS)
            .map(|j| (0..config.iter_layers).map(|_| AttentionParams::new(c[j], &mut rng)).collect())
            .collect();
        let state_fuse = (0..PYRAMID_LEVELS)
            .map(|j| (0..config.iter_layers).map(|_| LinearParams::new(c[j], c[j], &mut rng)).collect())
            .collect();
        let guide_adapt = vec![
            LinearParams::new(c[1], c[0], &mut rng),
            LinearParams::new(c[2], c[1], &mut rng),
        ];
        let prop_fuse = ConvParams::new(2 * c[0], c[0], 3, 1, &mut rng);
        let fuse_x = ConvParams::new(c[0], c[0], 3, 1, &mut rng);
        let fuse_h = ConvParams::new(c[0], c[0], 3, 1, &mut rng);
        let decoder = DecoderParams::new(c[0], config.decoder_hidden, &mut rng);
        Ok(StnoModel {
            config,
            params: StnoParams {
                proj_in,
                proj_res,
                proj_down,
                attn,
                state_fuse,
                guide_adapt,
                prop_fuse,
                fuse_x,
                fuse_h,
                decoder,
            },
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        let p = &self.params;
        p.proj_in.visit("proj.in", f);
        for (i, (a, b)) in p.proj_res.iter().enumerate() {
            a.visit(&format!("proj.res{i}.a"), f);
            b.visit(&format!("proj.res{i}.b"), f);
        }
        for (i, d) in p.proj_down.iter().enumerate() {
            d.visit(&format!("proj.down{i}"), f);
        }
        for (j, level) in p.attn.iter().enumerate() {
            for (it, a) in level.iter().enumerate() {
                a.visit(&format!("attn.l{j}.i{it}"), f);
            }
        }
        for (j, level) in p.state_fuse.iter().enumerate() {
            for (it, s) in level.iter().enumerate() {
                s.visit(&format!("state.l{j}.i{it}"), f);
            }
        }
        for (i, g) in p.guide_adapt.iter().enumerate() {
            g.visit(&format!("guide{i}"), f);
        }
        p.prop_fuse.visit("prop.fuse", f);
        p.fuse_x.visit("prop.x", f);
        p.fuse_h.visit("prop.h", f);
        p.decoder.visit("decoder", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        let p = &mut self.params;
        p.proj_in.visit_mut("proj.in", f);
        for (i, (a, b)) in p.proj_res.iter_mut().enumerate() {
            a.visit_mut(&format!("proj.res{i}.a"), f);
            b.visit_mut(&format!("proj.res{i}.b"), f);
        }
        for (i, d) in p.proj_down.iter_mut().enumerate() {
            d.visit_mut(&format!("proj.down{i}"), f);
        }
        for (j, level) in p.attn.iter_mut().enumerate() {
            for (it, a) in level.iter_mut().enumerate() {
                a.visit_mut(&format!("attn.l{j}.i{it}"), f);
            }
        }
        for (j, level) in p.state_fuse.iter_mut().enumerate() {
            for (it, s) in level.iter_mut().enumerate() {
                s.visit_mut(&format!("state.l{j}.i{it}"), f);
            }
        }
        for (i, g) in p.guide_adapt.iter_mut().enumerate() {
            g.visit_mut(&format!("guide{i}"), f);
        }
        p.prop_fuse.visit_mut("prop.fuse", f);
        p.fuse_x.visit_mut("prop.x", f);
        p.fuse_h.visit_mut("prop.h", f);
        p.decoder.visit_mut("decoder", f);
    }

    /// Named snapshot of every parameter, in visitation order.
    pub fn param_map(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Overwrite parameters from a named map; every entry must match an
    /// existing parameter name and shape, and every parameter must be covered.
    pub fn load_param_map(&mut self, map: &[(String, Tensor<S>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor<S>> =
            map.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut missing = Vec::new();
        let mut used = 0usize;
        self.visit_mut(&mut |name, t| match lookup.get(name) {
            Some(src) if src.shape() == t.shape() => {
                *t = (*src).clone();
                used += 1;
            }
            Some(src) => missing.push(format!("{name}: shape {:?} vs {:?}", src.shape(), t.shape())),
            None => missing.push(format!("{name}: absent")),
        });
        if !missing.is_empty() {
            return Err(Error::Config(format!("parameter mismatch: {}", missing.join("; "))));
        }
        if used != map.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {used}",
                map.len()
            )));
        }
        Ok(())
    }

    /// Copy into another element type (f32 training weights -> f64 checking).
    pub fn cast<T: Scalar>(&self) -> StnoModel<T> {
        let mut out = StnoModel::<T>::new(self.config.clone(), 0).expect("validated config");
        let map: Vec<(String, Tensor<T>)> =
            self.param_map().into_iter().map(|(n, t)| (n, t.cast())).collect();
        out.load_param_map(&map).expect("same structure");
        out
    }

    /// Place every parameter on a tape; returns the bound model and the leaf
    /// values in visitation order.
    pub fn bind(&self, tape: &mut Tape<S>, train: bool) -> (BoundModel, Vec<Value>) {
        let mut b = Binder::new(tape, train);
        let p = &self.params;
        let bound = BoundModel {
            config: self.config.clone(),
            proj_in: p.proj_in.bind(&mut b),
            proj_res: p.proj_res.iter().map(|(x, y)| (x.bind(&mut b), y.bind(&mut b))).collect(),
            proj_down: p.proj_down.iter().map(|d| d.bind(&mut b)).collect(),
            attn: p.attn.iter().map(|l| l.iter().map(|a| a.bind(&mut b)).collect()).collect(),
            state_fuse: p
                .state_fuse
                .iter()
                .map(|l| l.iter().map(|s| s.bind(&mut b)).collect())
                .collect(),
            guide_adapt: p.guide_adapt.iter().map(|g| g.bind(&mut b)).collect(),
            prop_fuse: p.prop_fuse.bind(&mut b),
            fuse_x: p.fuse_x.bind(&mut b),
            fuse_h: p.fuse_h.bind(&mut b),
            decoder: p.decoder.bind(&mut b),
        };
        (bound, b.into_values())
    }
}

/// Model parameters bound onto a tape for one forward pass.
pub struct BoundModel {
    pub config: ModelConfig,
    pub proj_in: BoundConv,
    pub proj_res: Vec<(BoundConv, BoundConv)>,
    pub proj_down: Vec<BoundConv>,
    pub attn: Vec<Vec<crate::attention::BoundAttention>>,
    pub state_fuse: Vec<Vec<BoundLinear>>,
    pub guide_adapt: Vec<BoundLinear>,
    pub prop_fuse: BoundConv,
    pub fuse_x: BoundConv,
    pub fuse_h: BoundConv,
    pub decoder: BoundDecoder,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_order_matches_visit_order() {
        let model = StnoModel::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let map = model.param_map();
        let mut tape = Tape::new();
        let (_bound, values) = model.bind(&mut tape, true);
        assert_eq!(values.len(), map.len());
        for (v, (_, t)) in values.iter().zip(&map) {
            assert_eq!(tape.value(*v).shape(), t.shape());
            assert_eq!(tape.value(*v).data(), t.data());
        }
    }

    #[test]
    fn cast_round_trip_preserves_values() {
        let model = StnoModel::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let as64 = model.cast::<f64>();
        let back = as64.cast::<f32>();
        for ((n0, t0), (n1, t1)) in model.param_map().iter().zip(back.param_map().iter()) {
            assert_eq!(n0, n1);
            assert_eq!(t0.data(), t1.data());
        }
    }

    #[test]
    fn load_param_map_rejects_mismatches() {
        let model = StnoModel::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let mut other = StnoModel::<f32>::new(ModelConfig::tiny(), 4).unwrap();
        let mut map = model.param_map();
        map.pop();
        assert!(other.load_param_map(&map).is_err());
    }
}
