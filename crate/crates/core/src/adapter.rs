//! Low-rank adapters attached after the attention output projection and the
//! feed-forward output projection of every layer.
//!
//! In the default parallel form the adapted projection computes
//! `h = W0·x + B·(A·x)` with `W0` frozen, `A ~ N(0, 0.02)` and `B = 0`, so a
//! freshly injected model reproduces its base outputs exactly. No `alpha/r`
//! scaling is applied.
//!
//! The sequential form computes `h = B·(A·(W0·x))`: the adapter consumes the
//! projection output instead of running beside it. Because a zero `B` would
//! null the layer, both factors are drawn from `N(0, 0.02)` in that mode.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Init};
use crate::error::{invalid, Result};
use crate::tensor::{ParamId, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSlot {
    AttentionOutput,
    FfnOutput,
}

impl InjectionSlot {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionSlot::AttentionOutput => "attention_output",
            InjectionSlot::FfnOutput => "ffn_output",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InjectionPoint {
    pub layer: usize,
    pub slot: InjectionSlot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    ParallelLora,
    Sequential,
}

/// One `(B, A)` factor pair; `B` is `[d_out × r]`, `A` is `[r × d_in]`
/// (`[r × d_out]` in sequential mode).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoraPair {
    pub site: InjectionPoint,
    pub rank: usize,
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterSet {
    pairs: Vec<LoraPair>,
    mode: AdapterMode,
    rank: usize,
    frozen_base: bool,
}

impl AdapterSet {
    pub fn pairs(&self) -> &[LoraPair] {
        &self.pairs
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn frozen_base(&self) -> bool {
        self.frozen_base
    }

    pub fn pair_at(&self, layer: usize, slot: InjectionSlot) -> Option<&LoraPair> {
        self.pairs
            .iter()
            .find(|p| p.site.layer == layer && p.site.slot == slot)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.pairs.iter().flat_map(|p| [p.a, p.b]).collect()
    }
}

/// Parallel low-rank update on row-major activations: `x[n×d_in]` gives
/// `x·W0ᵀ + (x·Aᵀ)·Bᵀ`, i.e. `W0·x + B·A·x` per row.
pub fn lora_forward<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, w0: Var, a: Var, b: Var) -> Result<Var> {
    let base = tape.matmul_nt(x, w0)?;
    let down = tape.matmul_nt(x, a)?;
    let up = tape.matmul_nt(down, b)?;
    tape.add(base, up)
}

/// Two-stage form: `y = W0·x`, then `h = B·A·y`.
pub fn sequential_adapter_forward<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, w0: Var, a: Var, b: Var) -> Result<Var> {
    let y = tape.matmul_nt(x, w0)?;
    let down = tape.matmul_nt(y, a)?;
    tape.matmul_nt(down, b)
}

pub fn adapter_param_name(site: InjectionPoint, factor: &str) -> String {
    format!("adapters.layers.{}.{}.lora_{factor}", site.layer, site.slot.as_str())
}

/// Attaches one adapter pair at each of the `2·n_layers` injection points,
/// freezes every base parameter (heads included) and marks only the adapter
/// factors trainable.
pub fn inject_adapters(model: &mut EncoderModel, rank: usize, mode: AdapterMode, seed: u64) -> Result<&AdapterSet> {
    if model.adapters().is_some() {
        return Err(invalid("adapters are already injected into this model"));
    }
    if rank == 0 {
        return Err(invalid("adapter rank must be at least 1"));
    }
    let cfg = *model.config();
    let d = cfg.d_model;
    let mut init = Init::new(seed);
    let mut pairs = Vec::with_capacity(2 * cfg.n_layers);

    model.set_base_trainable(false);
    for layer in 0..cfg.n_layers {
        for (slot, d_in) in [(InjectionSlot::AttentionOutput, d), (InjectionSlot::FfnOutput, cfg.d_ff)] {
            let site = InjectionPoint { layer, slot };
            let a_cols = match mode {
                AdapterMode::ParallelLora => d_in,
                AdapterMode::Sequential => d,
            };
            if rank > d.min(a_cols) {
                return Err(invalid(format!(
                    "rank {rank} exceeds min(d_out, d_in) = {} at {site:?}",
                    d.min(a_cols)
                )));
            }
            let a = init.normal(vec![rank, a_cols]).with_requires_grad(true);
            let b = match mode {
                AdapterMode::ParallelLora => Tensor::zeros(vec![d, rank])?,
                AdapterMode::Sequential => init.normal(vec![d, rank]),
            }
            .with_requires_grad(true);
            let params = model.params_mut();
            let a = params.insert(adapter_param_name(site, "a"), a)?;
            let b = params.insert(adapter_param_name(site, "b"), b)?;
            pairs.push(LoraPair { site, rank, a, b });
        }
    }
    model.set_adapters(AdapterSet {
        pairs,
        mode,
        rank,
        frozen_base: true,
    });
    Ok(model.adapters().expect("just injected"))
}

/// Tensors with `requires_grad` set, and their scalar total.
pub fn trainable_parameters(model: &EncoderModel) -> (Vec<ParamId>, u64) {
    let params = model.params();
    let ids: Vec<ParamId> = params.ids().filter(|&id| params.get(id).requires_grad()).collect();
    let total = ids.iter().map(|&id| params.get(id).len() as u64).sum();
    (ids, total)
}
