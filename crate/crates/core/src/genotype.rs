//! Layer catalog and the text encoding of a layer module.
//!
//! A module is an ordered list of layers. Each convolution is written as
//! `<k>x<k>conv2d:<filters>`, dropout as the bare token `dropout2d`, and layers
//! are joined with commas:
//!
//! ```text
//! 5x5conv2d:16,3x3conv2d:32,3x3conv2d:32
//! ```
//!
//! The encoded string is the canonical key of a [`Genotype`]. It is what goes
//! over the wire, into cache keys and into CSV reports.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use thiserror::Error;

use crate::rng::Draw;

/// Default upper bound on the number of layers in a module.
pub const DEFAULT_MAX_LAYERS: usize = 10;

/// Upper bound on encoded bytes per layer (longest token is 12 bytes plus a comma).
const MAX_BYTES_PER_LAYER: usize = 16;

/// Kinds of layer a module may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Conv1x1,
    Conv3x3,
    Conv5x5,
    Conv7x7,
    /// Spatial dropout with p = 0.5. Carries no filter count.
    Dropout2d,
}

impl LayerKind {
    pub const ALL: [LayerKind; 5] = [
        LayerKind::Conv1x1,
        LayerKind::Conv3x3,
        LayerKind::Conv5x5,
        LayerKind::Conv7x7,
        LayerKind::Dropout2d,
    ];

    /// Square kernel side, or `None` for dropout.
    pub const fn kernel_size(self) -> Option<usize> {
        match self {
            LayerKind::Conv1x1 => Some(1),
            LayerKind::Conv3x3 => Some(3),
            LayerKind::Conv5x5 => Some(5),
            LayerKind::Conv7x7 => Some(7),
            LayerKind::Dropout2d => None,
        }
    }

    pub const fn is_conv(self) -> bool {
        !matches!(self, LayerKind::Dropout2d)
    }

    pub const fn token(self) -> &'static str {
        match self {
            LayerKind::Conv1x1 => "1x1conv2d",
            LayerKind::Conv3x3 => "3x3conv2d",
            LayerKind::Conv5x5 => "5x5conv2d",
            LayerKind::Conv7x7 => "7x7conv2d",
            LayerKind::Dropout2d => "dropout2d",
        }
    }

    fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.token() == token)
    }
}

/// Dropout probability used by every `dropout2d` layer.
pub const DROPOUT_P: f64 = 0.5;

/// Filter counts a convolution may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterCount {
    F8,
    F16,
    F32,
    F64,
}

impl FilterCount {
    pub const ALL: [FilterCount; 4] = [
        FilterCount::F8,
        FilterCount::F16,
        FilterCount::F32,
        FilterCount::F64,
    ];

    pub const fn get(self) -> usize {
        match self {
            FilterCount::F8 => 8,
            FilterCount::F16 => 16,
            FilterCount::F32 => 32,
            FilterCount::F64 => 64,
        }
    }

    pub fn from_count(count: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.get() == count)
    }
}

/// One layer of a module: a convolution with a filter count, or dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerSpec {
    kind: LayerKind,
    filters: Option<FilterCount>,
}

const fn conv(kind: LayerKind, filters: FilterCount) -> LayerSpec {
    LayerSpec {
        kind,
        filters: Some(filters),
    }
}

/// All 17 layer options: four convolutions times four filter counts, plus dropout.
pub const CATALOG: [LayerSpec; 17] = {
    use FilterCount::*;
    use LayerKind::*;
    [
        conv(Conv1x1, F8),
        conv(Conv1x1, F16),
        conv(Conv1x1, F32),
        conv(Conv1x1, F64),
        conv(Conv3x3, F8),
        conv(Conv3x3, F16),
        conv(Conv3x3, F32),
        conv(Conv3x3, F64),
        conv(Conv5x5, F8),
        conv(Conv5x5, F16),
        conv(Conv5x5, F32),
        conv(Conv5x5, F64),
        conv(Conv7x7, F8),
        conv(Conv7x7, F16),
        conv(Conv7x7, F32),
        conv(Conv7x7, F64),
        LayerSpec::dropout(),
    ]
};

impl LayerSpec {
    /// Convolution layer. Returns `None` when `kind` is dropout.
    pub fn conv(kind: LayerKind, filters: FilterCount) -> Option<Self> {
        kind.is_conv().then_some(conv(kind, filters))
    }

    pub const fn dropout() -> Self {
        LayerSpec {
            kind: LayerKind::Dropout2d,
            filters: None,
        }
    }

    pub const fn kind(&self) -> LayerKind {
        self.kind
    }

    /// Filter count; `None` exactly for dropout.
    pub const fn filters(&self) -> Option<FilterCount> {
        self.filters
    }

    /// Position of this option in [`CATALOG`].
    pub fn catalog_index(&self) -> usize {
        CATALOG
            .iter()
            .position(|s| s == self)
            .expect("every LayerSpec is a catalog entry")
    }

    /// Uniform draw over the 17 catalog options.
    pub fn random(rng: &mut (impl Draw + ?Sized)) -> Self {
        CATALOG[rng.below(CATALOG.len())]
    }

    fn parse_token(token: &str) -> Result<Self, GenotypeError> {
        let mut parts = token.split(':');
        let head = parts.next().unwrap_or_default();
        let tail = parts.next();
        if parts.next().is_some() {
            return Err(GenotypeError::MalformedToken(token.to_string()));
        }
        let kind = LayerKind::from_token(head)
            .ok_or_else(|| GenotypeError::UnknownLayerToken(token.to_string()))?;
        match (kind.is_conv(), tail) {
            (false, None) => Ok(LayerSpec::dropout()),
            (true, Some(count)) => {
                let filters = count
                    .parse::<usize>()
                    .ok()
                    .filter(|_| !count.starts_with('+') && !count.starts_with('0'))
                    .and_then(FilterCount::from_count)
                    .ok_or_else(|| GenotypeError::IllegalFilterCount(token.to_string()))?;
                Ok(conv(kind, filters))
            }
            _ => Err(GenotypeError::MalformedToken(token.to_string())),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.filters {
            Some(filters) => write!(f, "{}:{}", self.kind.token(), filters.get()),
            None => f.write_str(self.kind.token()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenotypeError {
    #[error("unknown layer token `{0}`")]
    UnknownLayerToken(String),
    #[error("illegal filter count in `{0}` (allowed: 8, 16, 32, 64)")]
    IllegalFilterCount(String),
    #[error("module has no layers")]
    EmptyModule,
    #[error("module has {len} layers, limit is {max}")]
    TooManyLayers { len: usize, max: usize },
    #[error("malformed layer token `{0}`")]
    MalformedToken(String),
    #[error("encoded module is {len} bytes, limit is {limit}")]
    EncodingTooLong { len: usize, limit: usize },
}

/// Bounds of the module search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchSpaceConfig {
    max_num_layers: usize,
}

impl SearchSpaceConfig {
    pub fn new(max_num_layers: usize) -> Option<Self> {
        (max_num_layers >= 1).then_some(SearchSpaceConfig { max_num_layers })
    }

    pub fn max_num_layers(&self) -> usize {
        self.max_num_layers
    }
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        SearchSpaceConfig {
            max_num_layers: DEFAULT_MAX_LAYERS,
        }
    }
}

/// An immutable layer module. Equality, ordering and hashing go through the
/// canonical key.
#[derive(Clone)]
pub struct Genotype {
    layers: Vec<LayerSpec>,
    key: String,
}

impl Genotype {
    /// Builds a genotype from layers, checking the length bounds.
    pub fn new(layers: Vec<LayerSpec>, cfg: &SearchSpaceConfig) -> Result<Self, GenotypeError> {
        if layers.is_empty() {
            return Err(GenotypeError::EmptyModule);
        }
        if layers.len() > cfg.max_num_layers {
            return Err(GenotypeError::TooManyLayers {
                len: layers.len(),
                max: cfg.max_num_layers,
            });
        }
        Ok(Self::from_layers_unchecked(layers))
    }

    pub(crate) fn from_layers_unchecked(layers: Vec<LayerSpec>) -> Self {
        debug_assert!(!layers.is_empty());
        let mut key = String::with_capacity(layers.len() * 12);
        for (i, layer) in layers.iter().enumerate() {
            if i > 0 {
                key.push(',');
            }
            key.push_str(&layer.to_string());
        }
        Genotype { layers, key }
    }

    /// Parses the canonical encoding.
    pub fn parse(text: &str, cfg: &SearchSpaceConfig) -> Result<Self, GenotypeError> {
        let limit = cfg.max_num_layers.saturating_mul(MAX_BYTES_PER_LAYER);
        if text.len() > limit {
            return Err(GenotypeError::EncodingTooLong {
                len: text.len(),
                limit,
            });
        }
        if text.is_empty() {
            return Err(GenotypeError::EmptyModule);
        }
        let layers = text
            .split(',')
            .map(LayerSpec::parse_token)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(layers, cfg)
    }

    /// Module length drawn uniformly from `1..=max_num_layers`, each layer from
    /// [`LayerSpec::random`].
    pub fn random(rng: &mut (impl Draw + ?Sized), cfg: &SearchSpaceConfig) -> Self {
        let len = 1 + rng.below(cfg.max_num_layers);
        let layers = (0..len).map(|_| LayerSpec::random(rng)).collect();
        Self::from_layers_unchecked(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    /// Always false; a genotype has at least one layer.
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Canonical encoding.
    pub fn key(&self) -> &str {
        &self.key
    }
}

impl PartialEq for Genotype {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl Eq for Genotype {}

impl PartialOrd for Genotype {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Genotype {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

impl core::hash::Hash for Genotype {
    fn hash<H: core::hash::Hasher>(&self, state: &mut H) {
        self.key.hash(state);
    }
}

impl fmt::Debug for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Genotype({})", self.key)
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key)
    }
}

impl FromStr for Genotype {
    type Err = GenotypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Genotype::parse(s, &SearchSpaceConfig::default())
    }
}

/// Number of distinct modules with 1 to `max_num_layers` layers:
/// the sum of 17^k for k in 1..=max. `None` if it does not fit in a `u128`.
pub fn search_space_size(max_num_layers: usize) -> Option<u128> {
    let options = CATALOG.len() as u128;
    let mut total: u128 = 0;
    let mut term: u128 = 1;
    for _ in 0..max_num_layers {
        term = term.checked_mul(options)?;
        total = total.checked_add(term)?;
    }
    Some(total)
}
