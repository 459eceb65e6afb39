//! The permutable anisotropic convolution.
//!
//! For point `i` with neighbors `j = 0..K` (slot 0 is the point itself):
//!
//! 1. local positions `p̃ᵢⱼ = pᵢ − pᵢⱼ` (center minus neighbor),
//! 2. soft-permutation `Mᵢ = f(P̃ᵢ Kᵀ)` with `f` sparsemax over the K
//!    neighbors of each kernel column, and column 0 forced to select the
//!    center,
//! 3. position code `rᵢⱼ = ELU([pᵢ, p̃ᵢⱼ, ‖p̃ᵢⱼ‖]·A + a)`,
//! 4. neighbor features `xᵢⱼ = [rᵢⱼ, f_nbr(i,j)]`,
//! 5. resampling `X̃ᵢ = Xᵢ Mᵢ` (`d_in × L`),
//! 6. output `yᵢ = ELU(vec(X̃ᵢ)ᵀ W + b)` where `vec` stacks the columns of
//!    `X̃ᵢ`, one `d_in` block per kernel slot.

mod layer;
mod permutation;

pub use layer::{
    assemble_features, encode_position, position_inputs, ConvTape, LayerGrads, LayerTape,
    PaiConvLayer, POSITION_INPUT_WIDTH,
};
pub use permutation::{
    build_permutation, fixed_permutation, local_positions, permutation_backward, Normalizer,
    PermutationGrads, PermutationTensor, SlotRule,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lattice::{fibonacci_lattice, random_lattice, KernelLattice};
use crate::numkit::Rng;

/// The full operator and its six ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Fixed one-hot slots taken from the raw neighbor order.
    NoPermutation,
    /// Raw dot-product logits used directly as weights.
    NoSparsemax,
    Softmax,
    /// One `d_in × d_out` filter applied to the slot average.
    Isotropic,
    /// Kernel directions drawn uniformly at random instead of the lattice.
    RandomKernel,
    /// Lattice-initialized kernel directions that receive gradients.
    LearnableKernel,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPermutation,
        Variant::NoSparsemax,
        Variant::Softmax,
        Variant::Isotropic,
        Variant::RandomKernel,
        Variant::LearnableKernel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPermutation => "no_permutation",
            Variant::NoSparsemax => "no_sparsemax",
            Variant::Softmax => "softmax",
            Variant::Isotropic => "isotropic",
            Variant::RandomKernel => "random_kernel",
            Variant::LearnableKernel => "learnable_kernel",
        }
    }

    /// How this variant turns local positions into slot weights.
    pub fn slot_rule(self) -> SlotRule {
        match self {
            Variant::Full | Variant::RandomKernel | Variant::LearnableKernel => {
                SlotRule::Attention(Normalizer::Sparsemax)
            }
            Variant::NoSparsemax => SlotRule::Attention(Normalizer::Raw),
            Variant::Softmax => SlotRule::Attention(Normalizer::Softmax),
            Variant::NoPermutation => SlotRule::RawOrder,
            Variant::Isotropic => SlotRule::Uniform,
        }
    }

    pub fn is_isotropic(self) -> bool {
        self == Variant::Isotropic
    }

    pub fn learns_kernel(self) -> bool {
        self == Variant::LearnableKernel
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Everything a variant fixes about the operator besides the layer weights.
#[derive(Debug, Clone)]
pub struct VariantSetup {
    pub variant: Variant,
    pub rule: SlotRule,
    pub kernel: KernelLattice,
    pub learnable_kernel: bool,
}

/// Resolves a variant into its slot rule and kernel points. `rng` is only
/// drawn from by `random_kernel`.
pub fn make_variant(variant: Variant, kernel_len: usize, rng: &mut Rng) -> Result<VariantSetup> {
    let kernel = match variant {
        Variant::RandomKernel => random_lattice(kernel_len, rng)?,
        _ => fibonacci_lattice(kernel_len)?,
    };
    Ok(VariantSetup {
        variant,
        rule: variant.slot_rule(),
        kernel,
        learnable_kernel: variant.learns_kernel(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!(
            "w/o magic".parse::<Variant>(),
            Err(Error::UnknownVariant(_))
        ));
    }

    #[test]
    fn random_kernel_differs_from_lattice() {
        let mut rng = Rng::new(1);
        let a = make_variant(Variant::RandomKernel, 8, &mut rng).unwrap();
        let b = make_variant(Variant::Full, 8, &mut rng).unwrap();
        assert_ne!(a.kernel, b.kernel);
        assert_eq!(b.kernel, fibonacci_lattice(8).unwrap());
        assert!(
            make_variant(Variant::LearnableKernel, 8, &mut rng)
                .unwrap()
                .learnable_kernel
        );
    }
}
