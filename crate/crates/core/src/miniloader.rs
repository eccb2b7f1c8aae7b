//! Parameter registration with compressed placeholders.
//!
//! A layer's parameters are registered either as full-precision storage
//! (optionally filled by a pseudo-initializer) or as a packed 1-bit
//! placeholder bitset. Placeholders are never read: weight application
//! overwrites them with full-precision values from the layer's shard, and the
//! forward pass refuses to run on a block that has not been materialized.

use crate::catalog::{CatalogError, LayerSpec, WeightShard};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Fixed per-block bookkeeping overhead, bytes.
pub const BLOCK_HEADER_BYTES: u64 = 32;

/// Fraction of `allocate_cost` still paid when materialization is skipped.
pub const DEFAULT_SKIP_FACTOR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegistrationMode {
    /// Full-precision storage filled by the initializer.
    FullWithInit,
    /// Full-precision storage left zeroed.
    FullSkipInit,
    /// 1-bit placeholders, no initialization.
    MiniCompressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    PlaceholderCompressed,
    FullPrecision,
}

#[derive(Debug, Clone, PartialEq)]
enum Storage<S> {
    Placeholder(Vec<u8>),
    Full(Vec<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock<S> {
    layer_index: u32,
    logical_len: usize,
    storage: Storage<S>,
}

impl<S: Scalar> ParameterBlock<S> {
    pub fn layer_index(&self) -> u32 {
        self.layer_index
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn state(&self) -> BlockState {
        match self.storage {
            Storage::Placeholder(_) => BlockState::PlaceholderCompressed,
            Storage::Full(_) => BlockState::FullPrecision,
        }
    }

    pub fn placeholder_bits(&self) -> Option<&[u8]> {
        match &self.storage {
            Storage::Placeholder(bits) => Some(bits),
            Storage::Full(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[S]> {
        match &self.storage {
            Storage::Full(v) => Some(v),
            Storage::Placeholder(_) => None,
        }
    }

    /// Bytes of the parameter payload, header excluded.
    pub fn payload_bytes(&self) -> u64 {
        match &self.storage {
            Storage::Placeholder(bits) => bits.len() as u64,
            Storage::Full(v) => (v.len() * S::BYTES) as u64,
        }
    }

    pub fn resident_bytes(&self) -> u64 {
        self.payload_bytes() + BLOCK_HEADER_BYTES
    }
}

/// Simulated time spent inside parameter registration.
///
/// `bookkeeping` is the registration call itself; `materialize` is the
/// provisioning and initialization of full-precision placeholder storage,
/// present only for [`RegistrationMode::FullWithInit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegistrationTiming {
    pub bookkeeping: u64,
    pub materialize: u64,
}

impl RegistrationTiming {
    pub fn total(&self) -> u64 {
        self.bookkeeping + self.materialize
    }

    pub fn for_mode(allocate_cost: u64, mode: RegistrationMode, skip_factor: f64) -> Self {
        let bookkeeping = ((allocate_cost as f64 * skip_factor).round() as u64).min(allocate_cost);
        match mode {
            RegistrationMode::FullWithInit => Self { bookkeeping, materialize: allocate_cost - bookkeeping },
            RegistrationMode::FullSkipInit | RegistrationMode::MiniCompressed => Self { bookkeeping, materialize: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration<S> {
    pub block: ParameterBlock<S>,
    pub timing: RegistrationTiming,
}

#[derive(Debug, thiserror::Error)]
pub enum LoaderError {
    #[error("layer {0} has no parameters")]
    DegenerateLayer(u32),
    #[error("shape mismatch on layer {layer}: expected {expected} elements, got {got}")]
    ShapeMismatch { layer: u32, expected: usize, got: usize },
    #[error("layer {layer}: {source}")]
    CorruptShard {
        layer: u32,
        #[source]
        source: CatalogError,
    },
    #[error("layer {0} still holds placeholders; apply its weights before inference")]
    NotMaterialized(u32),
}

/// Pseudo-initializer fill: SplitMix64 seeded per layer, each draw mapped to
/// [-1, 1) and scaled by 1/sqrt(fan_in) in f32.
pub fn init_values(seed: u64, layer_index: u32, count: usize, fan_in: u32) -> Vec<f32> {
    let mut rng = SplitMix64::for_layer(seed, layer_index);
    let scale = 1.0f32 / (fan_in.max(1) as f32).sqrt();
    (0..count).map(|_| rng.next_signed_f32() * scale).collect()
}

pub fn register_parameters<S: Scalar>(
    spec: &LayerSpec,
    mode: RegistrationMode,
    init_seed: u64,
    skip_factor: f64,
) -> Result<Registration<S>, LoaderError> {
    if spec.param_count == 0 {
        return Err(LoaderError::DegenerateLayer(spec.layer_index));
    }
    let n = spec.param_count as usize;
    let storage = match mode {
        RegistrationMode::MiniCompressed => Storage::Placeholder(vec![0u8; n.div_ceil(8)]),
        RegistrationMode::FullSkipInit => Storage::Full(vec![S::zero(); n]),
        RegistrationMode::FullWithInit => Storage::Full(
            init_values(init_seed, spec.layer_index, n, spec.kernel_cols).into_iter().map(S::from_wire).collect(),
        ),
    };
    Ok(Registration {
        block: ParameterBlock { layer_index: spec.layer_index, logical_len: n, storage },
        timing: RegistrationTiming::for_mode(spec.allocate_cost, mode, skip_factor),
    })
}

/// Overwrites `block` with the shard's values, restoring full precision.
pub fn restore_and_apply<S: Scalar>(
    block: ParameterBlock<S>,
    shard: &WeightShard,
) -> Result<ParameterBlock<S>, LoaderError> {
    let layer = block.layer_index;
    if shard.element_count as usize != block.logical_len || shard.payload.len() != block.logical_len * 4 {
        return Err(LoaderError::ShapeMismatch {
            layer,
            expected: block.logical_len,
            got: shard.element_count as usize,
        });
    }
    shard.verify().map_err(|source| LoaderError::CorruptShard { layer, source })?;
    let values = match block.storage {
        // reuse the allocation when it is already full precision
        Storage::Full(mut v) => {
            v.iter_mut().zip(shard.values()).for_each(|(d, s)| *d = S::from_wire(s));
            v
        }
        Storage::Placeholder(_) => shard.values().map(S::from_wire).collect(),
    };
    Ok(ParameterBlock { layer_index: layer, logical_len: block.logical_len, storage: Storage::Full(values) })
}

/// `out[r] = sum_c W[r, c] * x[c] + b[r]`, with `W` stored row-major
/// followed by the bias, accumulated left to right in `S`.
pub fn forward_affine<S: Scalar>(
    block: &ParameterBlock<S>,
    input: &[S],
    spec: &LayerSpec,
) -> Result<Vec<S>, LoaderError> {
    let values = block.values().ok_or(LoaderError::NotMaterialized(block.layer_index))?;
    let (rows, cols) = (spec.kernel_rows as usize, spec.kernel_cols as usize);
    if input.len() != cols {
        return Err(LoaderError::ShapeMismatch { layer: spec.layer_index, expected: cols, got: input.len() });
    }
    if values.len() != rows * cols + rows {
        return Err(LoaderError::ShapeMismatch {
            layer: spec.layer_index,
            expected: rows * cols + rows,
            got: values.len(),
        });
    }
    let (weights, bias) = values.split_at(rows * cols);
    Ok(weights
        .chunks_exact(cols)
        .zip(bias)
        .map(|(row, &b)| row.iter().zip(input).fold(S::zero(), |acc, (&w, &x)| acc + w * x) + b)
        .collect())
}

pub fn resident_memory<'a, S: Scalar>(blocks: impl IntoIterator<Item = &'a ParameterBlock<S>>) -> u64 {
    blocks.into_iter().map(ParameterBlock::resident_bytes).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rows: u32, cols: u32) -> LayerSpec {
        let param_count = u64::from(rows) * u64::from(cols) + u64::from(rows);
        LayerSpec {
            layer_index: 0,
            name: "t".into(),
            param_count,
            weight_bytes: 4 * param_count,
            instantiate_cost: 100,
            allocate_cost: 100,
            apply_cost: 10,
            compute_cost: 10,
            retrieval_cost: 70,
            kernel_rows: rows,
            kernel_cols: cols,
        }
    }

    fn flat(n: u64) -> LayerSpec {
        LayerSpec { param_count: n, weight_bytes: 4 * n, ..spec(1, 1) }
    }

    #[test]
    fn compressed_is_thirty_two_times_smaller() {
        let mini = register_parameters::<f32>(&flat(1024), RegistrationMode::MiniCompressed, 0, 0.2).unwrap();
        let full = register_parameters::<f32>(&flat(1024), RegistrationMode::FullSkipInit, 0, 0.2).unwrap();
        assert_eq!(mini.block.payload_bytes(), 128);
        assert_eq!(full.block.payload_bytes(), 4096);
        assert_eq!(full.block.payload_bytes() / mini.block.payload_bytes(), 32);
        assert_eq!(mini.block.resident_bytes(), 128 + BLOCK_HEADER_BYTES);
        assert_eq!(mini.block.state(), BlockState::PlaceholderCompressed);
        assert!(mini.block.values().is_none());
    }

    #[test]
    fn single_param_rounds_up_to_a_byte() {
        let r = register_parameters::<f32>(&flat(1), RegistrationMode::MiniCompressed, 0, 0.2).unwrap();
        assert_eq!(r.block.payload_bytes(), 1);
    }

    #[test]
    fn zero_params_rejected() {
        assert!(matches!(
            register_parameters::<f32>(&flat(0), RegistrationMode::FullWithInit, 0, 0.2),
            Err(LoaderError::DegenerateLayer(0))
        ));
    }

    #[test]
    fn registration_timing_per_mode() {
        let s = spec(2, 2);
        let t = |m| register_parameters::<f32>(&s, m, 0, 0.2).unwrap().timing;
        assert_eq!(t(RegistrationMode::FullWithInit).total(), 100);
        assert_eq!(t(RegistrationMode::FullWithInit).materialize, 80);
        assert_eq!(t(RegistrationMode::FullSkipInit).total(), 20);
        assert_eq!(t(RegistrationMode::MiniCompressed).total(), 20);
    }

    #[test]
    fn apply_overwrites_regardless_of_mode() {
        let s = spec(3, 4);
        let values: Vec<f32> = (0..s.param_count).map(|i| i as f32 * 0.37 - 1.0).collect();
        let shard = WeightShard::from_values(0, &values);
        let a = register_parameters::<f32>(&s, RegistrationMode::MiniCompressed, 1, 0.2).unwrap().block;
        let b = register_parameters::<f32>(&s, RegistrationMode::FullWithInit, 1, 0.2).unwrap().block;
        let a = restore_and_apply(a, &shard).unwrap();
        let b = restore_and_apply(b, &shard).unwrap();
        let bits = |blk: &ParameterBlock<f32>| blk.values().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.resident_bytes(), 4 * s.param_count + BLOCK_HEADER_BYTES);
        let x = [0.5f32, -1.0, 2.0, 0.25];
        assert_eq!(forward_affine(&a, &x, &s).unwrap(), forward_affine(&b, &x, &s).unwrap());
    }

    #[test]
    fn apply_length_mismatch() {
        let block = register_parameters::<f32>(&flat(10), RegistrationMode::MiniCompressed, 0, 0.2).unwrap().block;
        let shard = WeightShard::from_values(0, &[0.0; 12]);
        assert!(matches!(
            restore_and_apply(block, &shard),
            Err(LoaderError::ShapeMismatch { expected: 10, got: 12, .. })
        ));
    }

    #[test]
    fn apply_rejects_corrupt_shard() {
        let block = register_parameters::<f32>(&flat(2), RegistrationMode::MiniCompressed, 0, 0.2).unwrap().block;
        let mut shard = WeightShard::from_values(0, &[1.0, 2.0]);
        shard.payload[0] ^= 1;
        assert!(matches!(restore_and_apply(block, &shard), Err(LoaderError::CorruptShard { .. })));
    }

    #[test]
    fn identity_and_bias_only() {
        let s = spec(2, 2);
        let ident = WeightShard::from_values(0, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let blk = register_parameters::<f32>(&s, RegistrationMode::MiniCompressed, 0, 0.2).unwrap().block;
        let blk = restore_and_apply(blk, &ident).unwrap();
        assert_eq!(forward_affine(&blk, &[3.0, 5.0], &s).unwrap(), vec![3.0, 5.0]);

        let bias = WeightShard::from_values(0, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let blk = restore_and_apply(blk, &bias).unwrap();
        assert_eq!(forward_affine(&blk, &[-7.0, 9.5], &s).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn placeholders_never_run() {
        let s = spec(2, 2);
        let blk = register_parameters::<f32>(&s, RegistrationMode::MiniCompressed, 0, 0.2).unwrap().block;
        assert!(matches!(forward_affine(&blk, &[1.0, 1.0], &s), Err(LoaderError::NotMaterialized(0))));
    }

    #[test]
    fn wrong_input_width() {
        let s = spec(2, 2);
        let blk = register_parameters::<f32>(&s, RegistrationMode::FullSkipInit, 0, 0.2).unwrap().block;
        assert!(matches!(forward_affine(&blk, &[1.0], &s), Err(LoaderError::ShapeMismatch { .. })));
    }

    #[test]
    fn widened_storage_is_exact() {
        let s = spec(1, 2);
        let shard = WeightShard::from_values(0, &[0.1, 0.2, 0.3]);
        let blk = register_parameters::<f64>(&s, RegistrationMode::MiniCompressed, 0, 0.2).unwrap().block;
        let blk = restore_and_apply(blk, &shard).unwrap();
        assert_eq!(blk.values().unwrap(), &[0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64]);
        assert_eq!(blk.payload_bytes(), 24);
    }

    #[test]
    fn resident_memory_sums_blocks() {
        assert_eq!(resident_memory::<f32>([]), 0);
        let a = register_parameters::<f32>(&flat(1024), RegistrationMode::MiniCompressed, 0, 0.2).unwrap().block;
        let b = register_parameters::<f32>(&flat(10), RegistrationMode::FullSkipInit, 0, 0.2).unwrap().block;
        assert_eq!(resident_memory([&a]) - BLOCK_HEADER_BYTES, 128);
        assert_eq!(resident_memory([&a, &b]), 128 + 40 + 2 * BLOCK_HEADER_BYTES);
    }
}
