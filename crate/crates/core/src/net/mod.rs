//! The fusion network: two relighting branches, feature encoders, alignment
//! (deformable or concatenation) and detail repletion.
//!
//! The same constructor builds the super-network, where every search block is
//! a [`SearchCell`], and discretized networks, where each block holds the one
//! operator named by a [`Genotype`]. Both use identical parameter names, so
//! weights can be copied between them.

mod dasm;
mod drm;
mod srsm;

pub use dasm::Dasm;
pub use drm::{drm_combine, Drm};
pub use srsm::{Srsm, SrsmStage};

use std::cell::Cell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, ExposurePair, ImageTensor};
use crate::error::{Error, Result};
use crate::nas::{block_tag, Genotype};
use crate::ops::{Activation, Block, Conv, Operator, SearchCell, DASM_CANDIDATES, DRM_CANDIDATES, SRSM_CANDIDATES};
use crate::param::{ParamStore, Scope, Var};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrsmConfig {
    /// Number of cascaded stages per branch; 0 bypasses relighting.
    pub cascade_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DasmConfig {
    pub enabled: bool,
    pub pyramid_levels: usize,
    /// Predict offsets from features of the unrelit inputs.
    #[serde(default)]
    pub before_relighting: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrmConfig {
    pub division_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    pub srsm: SrsmConfig,
    pub dasm: DasmConfig,
    pub drm: DrmConfig,
    pub activation: Activation,
}

/// Number of searchable residual slots in detail repletion.
pub const DRM_SLOTS: usize = 4;
/// Searchable slots per relighting stage (two feature slots and the
/// undetermined layer).
pub const SRSM_SLOTS: usize = 3;

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 32,
            srsm: SrsmConfig { cascade_count: 2 },
            dasm: DasmConfig { enabled: false, pyramid_levels: 3, before_relighting: false },
            drm: DrmConfig { division_epsilon: 0.05 },
            activation: Activation::default(),
        }
    }
}

/// Position and candidates of one search block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSlot {
    pub module: String,
    pub slot: usize,
    pub candidates: Vec<&'static str>,
}

impl BlockSlot {
    pub fn tag(&self) -> String {
        block_tag(&self.module, self.slot)
    }
}

impl NetConfig {
    pub fn with_channels(base_channels: usize) -> Self {
        NetConfig { base_channels, ..Default::default() }
    }

    pub fn misaligned(mut self) -> Self {
        self.dasm.enabled = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidParameter("base_channels must be positive".into()));
        }
        if self.srsm.cascade_count > 3 {
            return Err(Error::InvalidParameter(format!("cascade_count {} exceeds 3", self.srsm.cascade_count)));
        }
        if self.dasm.enabled && self.dasm.pyramid_levels < 2 {
            return Err(Error::InvalidParameter("alignment needs at least 2 pyramid levels".into()));
        }
        if !(self.drm.division_epsilon > 0.0) {
            return Err(Error::InvalidParameter("division epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Module tag of the alignment blocks.
    pub fn dasm_module(&self) -> &'static str {
        if self.dasm.before_relighting {
            "dasm_raw"
        } else {
            "dasm"
        }
    }

    /// All search blocks in network order.
    pub fn layout(&self) -> Vec<BlockSlot> {
        let mut out = Vec::new();
        for branch in ["srsm_u", "srsm_o"] {
            for t in 0..self.srsm.cascade_count {
                for slot in 0..SRSM_SLOTS {
                    out.push(BlockSlot { module: format!("{branch}.stage{t}"), slot, candidates: SRSM_CANDIDATES.to_vec() });
                }
            }
        }
        if self.dasm.enabled {
            for level in 0..self.dasm.pyramid_levels {
                out.push(BlockSlot { module: self.dasm_module().into(), slot: level, candidates: DASM_CANDIDATES.to_vec() });
            }
        }
        for slot in 0..DRM_SLOTS {
            out.push(BlockSlot { module: "drm".into(), slot, candidates: DRM_CANDIDATES.to_vec() });
        }
        out
    }

    /// Recovers the structure from a genotype, preferring its recorded config.
    pub fn from_genotype(g: &Genotype) -> NetConfig {
        if let Some(cfg) = &g.network {
            return cfg.clone();
        }
        let stages = g.blocks.iter().filter(|b| b.module.starts_with("srsm_u.stage")).count() / SRSM_SLOTS;
        let levels = g.blocks.iter().filter(|b| b.module.starts_with("dasm")).count();
        NetConfig {
            base_channels: g.base_channels,
            srsm: SrsmConfig { cascade_count: stages },
            dasm: DasmConfig {
                enabled: levels > 0,
                pyramid_levels: if levels > 0 { levels } else { 3 },
                before_relighting: g.blocks.iter().any(|b| b.module == "dasm_raw"),
            },
            ..Default::default()
        }
    }
}

/// Creates search blocks in layout order, either as cells or as the
/// operator a genotype selects.
pub(crate) struct Builder<'a> {
    pub weights: Scope,
    arch: Scope,
    choices: Option<&'a HashMap<String, String>>,
    layout: Vec<BlockSlot>,
    next: Cell<usize>,
    pub activation: Activation,
}

impl Builder<'_> {
    pub fn block(&self, module: &str, slot: usize, make: impl Fn(&str, &Scope) -> Result<Operator>) -> Result<Block> {
        let id = self.next.get();
        self.next.set(id + 1);
        let expect = self.layout.get(id).expect("blocks are built in layout order");
        assert_eq!((expect.module.as_str(), expect.slot), (module, slot), "block built out of layout order");
        let tag = block_tag(module, slot);
        let scope = self.weights.sub(&tag);
        match self.choices {
            None => {
                let ops = expect.candidates.iter().map(|n| make(n, &scope.sub(n))).collect::<Result<Vec<_>>>()?;
                Ok(Block::Mixed(SearchCell::from_candidates(id, &tag, ops, &self.arch)?))
            }
            Some(choices) => {
                let name = choices
                    .get(&tag)
                    .ok_or_else(|| Error::InvalidParameter(format!("genotype has no operator for block `{tag}`")))?;
                if !expect.candidates.contains(&name.as_str()) {
                    return Err(Error::InvalidParameter(format!(
                        "operator `{name}` is not a candidate of block `{tag}` ({:?})",
                        expect.candidates
                    )));
                }
                Ok(Block::Fixed { tag, op: make(name, &scope.sub(name))? })
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Merge {
    Concat(Conv),
    Align(Dasm),
}

/// A fusion super-network or discretized network.
pub struct FusionNet {
    pub config: NetConfig,
    pub weights: ParamStore,
    pub arch: ParamStore,
    srsm_u: Srsm,
    srsm_o: Srsm,
    enc_u: Conv,
    enc_o: Conv,
    merge: Merge,
    drm: Drm,
}

impl FusionNet {
    /// The super-network: every search block mixes all its candidates.
    pub fn supernet(config: &NetConfig, seed: u64) -> Result<Self> {
        FusionNet::build(config, seed, None)
    }

    /// The discretized network a genotype describes.
    pub fn from_genotype(genotype: &Genotype, seed: u64) -> Result<Self> {
        let config = NetConfig::from_genotype(genotype);
        let choices = genotype.choices();
        let expected: Vec<String> = config.layout().iter().map(BlockSlot::tag).collect();
        if choices.len() != expected.len() || expected.iter().any(|t| !choices.contains_key(t)) {
            return Err(Error::InvalidParameter(format!(
                "genotype blocks do not match the network layout ({} blocks, expected {})",
                choices.len(),
                expected.len()
            )));
        }
        FusionNet::build(&config, seed, Some(&choices))
    }

    fn build(config: &NetConfig, seed: u64, choices: Option<&HashMap<String, String>>) -> Result<Self> {
        config.validate()?;
        let weights = ParamStore::new(seed);
        let arch = ParamStore::new(derive_seed(seed, 0xa5c4));
        let b = Builder {
            weights: weights.root(),
            arch: arch.root(),
            choices,
            layout: config.layout(),
            next: Cell::new(0),
            activation: config.activation,
        };
        let c = config.base_channels;
        let srsm_u = Srsm::new(&b, "srsm_u", config.srsm.cascade_count, c)?;
        let srsm_o = Srsm::new(&b, "srsm_o", config.srsm.cascade_count, c)?;
        let enc_u = Conv::same(&b.weights.sub("enc_u"), 3, c, 3);
        let enc_o = Conv::same(&b.weights.sub("enc_o"), 3, c, 3);
        let merge = if config.dasm.enabled {
            Merge::Align(Dasm::new(&b, config.dasm_module(), config.dasm.pyramid_levels, c)?)
        } else {
            Merge::Concat(Conv::same(&b.weights.sub("merge"), 2 * c, c, 3))
        };
        let drm = Drm::new(&b, c, config.drm.division_epsilon)?;
        Ok(FusionNet { config: config.clone(), weights, arch, srsm_u, srsm_o, enc_u, enc_o, merge, drm })
    }

    pub fn is_supernet(&self) -> bool {
        self.blocks().iter().any(|b| b.cell().is_some())
    }

    /// All search blocks in layout order.
    pub fn blocks(&self) -> Vec<&Block> {
        let mut out: Vec<&Block> = self.srsm_u.blocks();
        out.extend(self.srsm_o.blocks());
        if let Merge::Align(d) = &self.merge {
            out.extend(d.blocks());
        }
        out.extend(self.drm.blocks());
        out
    }

    pub fn cells(&self) -> Vec<&SearchCell> {
        self.blocks().into_iter().filter_map(Block::cell).collect()
    }

    pub fn weight_vars(&self) -> Vec<Var> {
        self.weights.vars()
    }

    pub fn arch_vars(&self) -> Vec<Var> {
        self.arch.vars()
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    pub fn srsm_u(&self) -> &Srsm {
        &self.srsm_u
    }

    pub fn srsm_o(&self) -> &Srsm {
        &self.srsm_o
    }

    pub fn dasm(&self) -> Option<&Dasm> {
        match &self.merge {
            Merge::Align(d) => Some(d),
            Merge::Concat(_) => None,
        }
    }

    pub fn drm(&self) -> &Drm {
        &self.drm
    }

    pub fn encode(&self, under: &Tensor, over: &Tensor) -> (Tensor, Tensor) {
        let act = self.config.activation;
        (act.apply(&self.enc_u.forward(under)), act.apply(&self.enc_o.forward(over)))
    }

    /// `A(F_mov, F_ref) + F_ref`; errors when the network has no alignment.
    pub fn dasm_forward(&self, f_mov: &Tensor, f_ref: &Tensor) -> Result<Tensor> {
        self.dasm().ok_or(Error::AlignmentDisabled)?.forward(f_mov, f_ref)
    }

    /// The aligned-pair feature merge `act(conv(concat(F_U, F_O)))`.
    pub fn concat_merge(&self, f_u: &Tensor, f_o: &Tensor) -> Option<Tensor> {
        match &self.merge {
            Merge::Concat(conv) => Some(self.config.activation.apply(&conv.forward(&Tensor::concat(&[f_u, f_o], 1)))),
            Merge::Align(_) => None,
        }
    }

    /// Fused features `F_A`.
    pub fn features(&self, under: &Tensor, over: &Tensor) -> Result<Tensor> {
        if under.shape() != over.shape() {
            return Err(Error::PairShape(format!("under {:?} vs over {:?}", under.shape(), over.shape())));
        }
        let (xu, _) = self.srsm_u.forward(under)?;
        let (xo, _) = self.srsm_o.forward(over)?;
        let (fu, fo) = self.encode(&xu, &xo);
        match &self.merge {
            Merge::Concat(_) => Ok(self.concat_merge(&fu, &fo).expect("concat merge")),
            // The over-exposed input is the one displaced, so it is aligned
            // onto the under-exposed reference frame.
            Merge::Align(d) if self.config.dasm.before_relighting => {
                let (ru, ro) = self.encode(under, over);
                d.forward_cued(&fo, &fu, &ro, &ru)
            }
            Merge::Align(d) => d.forward(&fo, &fu),
        }
    }

    /// The fused image, recorded for differentiation when grad mode is on.
    pub fn forward(&self, under: &Tensor, over: &Tensor) -> Result<Tensor> {
        let fa = self.features(under, over)?;
        self.drm.forward(&fa)
    }

    pub fn forward_pair(&self, pair: &ExposurePair) -> Result<Tensor> {
        self.forward(&pair.under.to_tensor(), &pair.over.to_tensor())
    }

    /// Inference without recording a graph.
    pub fn fuse(&self, pair: &ExposurePair) -> Result<ImageTensor> {
        let y = no_grad(|| self.forward_pair(pair))?;
        ImageTensor::from_tensor(&y)
    }
}

/// Fuses a pair with the given model.
pub fn fuse_forward(pair: &ExposurePair, model: &FusionNet) -> Result<ImageTensor> {
    model.fuse(pair)
}
