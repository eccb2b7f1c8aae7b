use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CatalogError;
use crate::rng::SplitMix64;

/// Architecture family a synthetic model imitates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelFamily {
    ResNetLike,
    VGGLike,
    LLaMALike,
    OPTLike,
    Custom,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 5] = [
        ModelFamily::ResNetLike,
        ModelFamily::VGGLike,
        ModelFamily::LLaMALike,
        ModelFamily::OPTLike,
        ModelFamily::Custom,
    ];

    pub fn defaults(self) -> FamilyDefaults {
        match self {
            ModelFamily::ResNetLike => FamilyDefaults {
                reference_model: "ResNet50",
                reference_bytes: 98_000_000,
                construction_us: 74_020.0,
                default_layers: 10,
            },
            ModelFamily::VGGLike => FamilyDefaults {
                reference_model: "VGG11",
                reference_bytes: 506_000_000,
                construction_us: 420_000.0,
                default_layers: 5,
            },
            ModelFamily::LLaMALike => FamilyDefaults {
                reference_model: "LLaMA-3.2-1B",
                reference_bytes: 4_710_000_000,
                construction_us: 640_000.0,
                default_layers: 34,
            },
            ModelFamily::OPTLike => FamilyDefaults {
                reference_model: "OPT-6.7B",
                reference_bytes: 25_400_000_000,
                construction_us: 1_150_310.0,
                default_layers: 35,
            },
            ModelFamily::Custom => FamilyDefaults {
                reference_model: "custom",
                reference_bytes: 0,
                construction_us: 0.0,
                default_layers: 1,
            },
        }
    }

    fn slug(self) -> &'static str {
        match self {
            ModelFamily::ResNetLike => "resnet",
            ModelFamily::VGGLike => "vgg",
            ModelFamily::LLaMALike => "llama",
            ModelFamily::OPTLike => "opt",
            ModelFamily::Custom => "custom",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for ModelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" | "resnetlike" => Ok(ModelFamily::ResNetLike),
            "vgg" | "vgglike" => Ok(ModelFamily::VGGLike),
            "llama" | "llamalike" => Ok(ModelFamily::LLaMALike),
            "opt" | "optlike" => Ok(ModelFamily::OPTLike),
            "custom" => Ok(ModelFamily::Custom),
            other => Err(format!("unknown model family `{other}`")),
        }
    }
}

/// Full-scale reference numbers for a family: weight size of the reference
/// checkpoint and its total layer-construction time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyDefaults {
    pub reference_model: &'static str,
    pub reference_bytes: u64,
    /// Total construction time (instantiation + allocation), µs.
    pub construction_us: f64,
    pub default_layers: u32,
}

/// Knobs that turn a family into per-layer stage costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostProfile {
    /// allocate / (instantiate + allocate).
    pub allocation_fraction: f64,
    /// retrieval duration / apply duration.
    pub retrieval_apply_ratio: f64,
    /// Bytes per µs. `None` calibrates it so that total retrieval time is
    /// `retrieval_share` of total construction time.
    pub retrieval_bandwidth: Option<f64>,
    pub retrieval_share: f64,
    /// compute cost / construction cost per layer.
    pub compute_fraction: f64,
    /// Scales both weight bytes and stage costs of the reference model.
    pub size_factor: f64,
    /// Relative per-layer jitter, in [0, 1).
    pub jitter: f64,
    /// (rows, cols) of every Custom layer; later layers are rows × rows.
    pub custom_kernel: (u32, u32),
    /// Construction cost of one Custom layer, µs (not size-scaled).
    pub custom_layer_cost_us: f64,
}

impl Default for CostProfile {
    fn default() -> Self {
        Self {
            allocation_fraction: 0.5,
            retrieval_apply_ratio: 7.0,
            retrieval_bandwidth: None,
            retrieval_share: 0.35,
            compute_fraction: 0.1,
            size_factor: 1.0 / 64.0,
            jitter: 0.2,
            custom_kernel: (1, 1),
            custom_layer_cost_us: 1000.0,
        }
    }
}

impl CostProfile {
    pub fn validate(&self) -> Result<(), CatalogError> {
        let bad = |what: &str| Err(CatalogError::InvalidProfile(what.to_string()));
        let f = self.allocation_fraction;
        if !(f.is_finite() && f > 0.0 && f < 1.0) {
            return bad("allocation_fraction must lie in (0, 1)");
        }
        if !(self.retrieval_apply_ratio.is_finite() && self.retrieval_apply_ratio > 0.0) {
            return bad("retrieval_apply_ratio must be positive");
        }
        if let Some(b) = self.retrieval_bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return bad("retrieval_bandwidth must be positive");
            }
        }
        for (name, v) in [
            ("retrieval_share", self.retrieval_share),
            ("compute_fraction", self.compute_fraction),
            ("size_factor", self.size_factor),
            ("custom_layer_cost_us", self.custom_layer_cost_us),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CatalogError::InvalidProfile(format!("{name} must be positive")));
            }
        }
        if !(self.jitter.is_finite() && (0.0..1.0).contains(&self.jitter)) {
            return bad("jitter must lie in [0, 1)");
        }
        if self.custom_kernel.0 == 0 || self.custom_kernel.1 == 0 {
            return bad("custom_kernel dimensions must be >= 1");
        }
        Ok(())
    }
}

/// One layer: its affine kernel shape and stage costs in µs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_index: u32,
    pub name: String,
    pub param_count: u64,
    pub weight_bytes: u64,
    pub instantiate_cost: u64,
    pub allocate_cost: u64,
    pub apply_cost: u64,
    pub compute_cost: u64,
    /// weight_bytes / bandwidth, rounded; the default expected I/O duration.
    pub retrieval_cost: u64,
    pub kernel_rows: u32,
    pub kernel_cols: u32,
}

impl LayerSpec {
    /// instantiate + allocate.
    pub fn construction_cost(&self) -> u64 {
        self.instantiate_cost + self.allocate_cost
    }

    fn check(&self) -> Result<(), String> {
        let (r, c) = (u64::from(self.kernel_rows), u64::from(self.kernel_cols));
        if r == 0 || c == 0 {
            return Err(format!("layer {}: empty kernel", self.layer_index));
        }
        if self.param_count != r * c + r {
            return Err(format!(
                "layer {}: param_count {} != rows*cols+rows ({})",
                self.layer_index,
                self.param_count,
                r * c + r
            ));
        }
        if self.weight_bytes != 4 * self.param_count {
            return Err(format!("layer {}: weight_bytes must be 4 * param_count", self.layer_index));
        }
        let costs =
            [self.instantiate_cost, self.allocate_cost, self.apply_cost, self.compute_cost, self.retrieval_cost];
        if costs.contains(&0) {
            return Err(format!("layer {}: all costs must be positive", self.layer_index));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub family: ModelFamily,
    pub layers: Vec<LayerSpec>,
    pub total_weight_bytes: u64,
    /// Resolved bandwidth (bytes/µs) the retrieval costs were derived from.
    pub retrieval_bandwidth: f64,
}

impl ModelDescriptor {
    /// Builds a descriptor, deriving `total_weight_bytes` and validating it.
    pub fn new(
        model_id: impl Into<String>,
        family: ModelFamily,
        layers: Vec<LayerSpec>,
        retrieval_bandwidth: f64,
    ) -> Result<Self, CatalogError> {
        let total_weight_bytes = layers.iter().map(|l| l.weight_bytes).sum();
        let model = Self { model_id: model_id.into(), family, layers, total_weight_bytes, retrieval_bandwidth };
        model.validate()?;
        Ok(model)
    }

    /// Checks every invariant, including the dimension chaining rule
    /// `kernel_cols(i + 1) == kernel_rows(i)`.
    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.layers.is_empty() {
            return Err(CatalogError::DegenerateModel);
        }
        let invalid = |m: String| Err(CatalogError::InvalidModel(m));
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.layer_index as usize != i {
                return invalid(format!("layer_index {} at position {i}", layer.layer_index));
            }
            if let Err(m) = layer.check() {
                return invalid(m);
            }
            if i > 0 && layer.kernel_cols != self.layers[i - 1].kernel_rows {
                return invalid(format!(
                    "layer {i}: kernel_cols {} does not chain to previous kernel_rows {}",
                    layer.kernel_cols,
                    self.layers[i - 1].kernel_rows
                ));
            }
        }
        let total: u64 = self.layers.iter().map(|l| l.weight_bytes).sum();
        if total != self.total_weight_bytes {
            return invalid(format!("total_weight_bytes {} != sum {total}", self.total_weight_bytes));
        }
        if !(self.retrieval_bandwidth.is_finite() && self.retrieval_bandwidth > 0.0) {
            return invalid("retrieval_bandwidth must be positive".into());
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].kernel_cols as usize
    }

    pub fn output_len(&self) -> usize {
        self.layers[self.layers.len() - 1].kernel_rows as usize
    }

    pub fn save_json(&self, path: &Path) -> Result<(), CatalogError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|source| CatalogError::Json { path: path.to_path_buf(), source })?;
        std::fs::write(path, text).map_err(|e| CatalogError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|e| CatalogError::io(path, e))?;
        let model: Self =
            serde_json::from_str(&text).map_err(|source| CatalogError::Json { path: path.to_path_buf(), source })?;
        model.validate()?;
        Ok(model)
    }
}

/// Generates a deterministic synthetic model for `family`.
///
/// Weight sizes follow the family's reference checkpoint scaled by
/// `profile.size_factor`; construction time is split per layer between a fixed
/// and a size-proportional share, with seeded jitter, then divided into
/// instantiation and allocation by `allocation_fraction`. Apply cost is the
/// retrieval duration divided by `retrieval_apply_ratio`.
pub fn generate_model(
    family: ModelFamily,
    layer_count: u32,
    seed: u64,
    profile: &CostProfile,
) -> Result<ModelDescriptor, CatalogError> {
    if layer_count == 0 {
        return Err(CatalogError::DegenerateModel);
    }
    profile.validate()?;
    let n = layer_count as usize;
    let mut rng = SplitMix64::new(seed);

    let shapes = match family {
        ModelFamily::Custom => custom_shapes(n, profile.custom_kernel),
        _ => {
            let target = family.defaults().reference_bytes as f64 * profile.size_factor;
            chained_shapes(n, target, profile.jitter, &mut rng)
        }
    };

    let bytes: Vec<u64> = shapes.iter().map(|&(r, c)| 4 * (u64::from(r) * u64::from(c) + u64::from(r))).collect();
    let total_bytes: u64 = bytes.iter().sum();

    let construction_total = match family {
        ModelFamily::Custom => profile.custom_layer_cost_us * n as f64,
        _ => family.defaults().construction_us * profile.size_factor,
    };
    let mut weights: Vec<f64> = bytes
        .iter()
        .map(|&b| {
            let share = 0.5 / n as f64 + 0.5 * b as f64 / total_bytes as f64;
            share * (1.0 + profile.jitter * rng.next_signed())
        })
        .collect();
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= norm);

    let bandwidth =
        profile.retrieval_bandwidth.unwrap_or(total_bytes as f64 / (profile.retrieval_share * construction_total));

    let round = |v: f64| (v.round() as u64).max(1);
    let layers = shapes
        .iter()
        .zip(&bytes)
        .zip(&weights)
        .enumerate()
        .map(|(i, ((&(rows, cols), &weight_bytes), &w))| {
            let construction = construction_total * w;
            let retrieval = weight_bytes as f64 / bandwidth;
            LayerSpec {
                layer_index: i as u32,
                name: format!("{}.{i}", family.slug()),
                param_count: weight_bytes / 4,
                weight_bytes,
                instantiate_cost: round(construction * (1.0 - profile.allocation_fraction)),
                allocate_cost: round(construction * profile.allocation_fraction),
                apply_cost: round(retrieval / profile.retrieval_apply_ratio),
                compute_cost: round(construction * profile.compute_fraction),
                retrieval_cost: round(retrieval),
                kernel_rows: rows,
                kernel_cols: cols,
            }
        })
        .collect();

    let model_id = format!("{}-{}l-s{}", family.slug(), layer_count, seed);
    ModelDescriptor::new(model_id, family, layers, bandwidth)
}

fn custom_shapes(n: usize, (rows, cols): (u32, u32)) -> Vec<(u32, u32)> {
    (0..n).map(|i| if i == 0 { (rows, cols) } else { (rows, rows) }).collect()
}

/// Chained (rows, cols) shapes whose total serialized size approximates
/// `target_bytes`. Dimension k is the input width of layer k.
fn chained_shapes(n: usize, target_bytes: f64, jitter: f64, rng: &mut SplitMix64) -> Vec<(u32, u32)> {
    let per_layer_params = (target_bytes / 4.0 / n as f64).max(2.0);
    // d^2 + d = p
    let base = ((1.0 + 4.0 * per_layer_params).sqrt() - 1.0) / 2.0;
    let mut dims: Vec<f64> = (0..=n).map(|_| base * (1.0 + jitter * rng.next_signed())).collect();
    let total_of = |d: &[f64]| -> f64 { (0..n).map(|i| 4.0 * (d[i + 1] * d[i] + d[i + 1])).sum() };
    for _ in 0..4 {
        let scale = (target_bytes / total_of(&dims)).sqrt();
        dims.iter_mut().for_each(|d| *d = (*d * scale).round().max(1.0));
    }
    (0..n).map(|i| (dims[i + 1] as u32, dims[i] as u32)).collect()
}
