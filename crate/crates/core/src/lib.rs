//! Generative downscaling core: grid I/O, preprocessing, a small autodiff
//! tensor engine, the conditioned U-Net, diffusion and consistency sampling,
//! tiled inference, verification metrics and synthetic data.

pub mod denoiser;
pub mod diffusion;
pub mod gridio;
pub mod prep;
pub mod scalar;
pub mod synth;
pub mod tensornet;
pub mod tiling;
pub mod verify;

pub use scalar::Scalar;

/// Target variables in channel order.
pub const TARGET_VARIABLES: [&str; 7] = ["APCP", "TMP", "SPFH", "UGRD", "VGRD", "PRES", "DLWRF"];
/// Accumulated variable among the targets.
pub const PRECIP_VARIABLE: &str = "APCP";

pub type TensorF32 = tensornet::Tensor<f32>;
pub type TensorF64 = tensornet::Tensor<f64>;
pub type DenoiserF32 = denoiser::Denoiser<f32>;
pub type DenoiserF64 = denoiser::Denoiser<f64>;
pub type GraphF32 = tensornet::Graph<f32>;
pub type GraphF64 = tensornet::Graph<f64>;

/// Derives an independent stream seed from `seed` and two indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b)
}
