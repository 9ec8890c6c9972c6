//! Which linears get quantized.
//!
//! Only the three MLP projections of a block are ever quantized; attention,
//! embeddings, the output head and norms stay in full precision. The first
//! `ceil(k/2)` and last `floor(k/2)` blocks are kept entirely in full
//! precision.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

/// Names of the quantizable MLP projections, in block order.
pub const MLP_LAYER_NAMES: [&str; 3] = ["gate_proj", "up_proj", "down_proj"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("cannot keep {k} high-precision blocks in a {n_blocks}-block model")]
    TooManyHighPrecision { k: usize, n_blocks: usize },
    #[error("layout references block {block}, but the architecture has {n_blocks} blocks")]
    BlockOutOfRange { block: usize, n_blocks: usize },
    #[error("layout references unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
}

/// Shape summary of a block-stacked model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchSpec {
    pub n_blocks: usize,
    pub hidden: usize,
    pub intermediate: usize,
    /// `(rows, cols)` of gate_proj, up_proj, down_proj.
    pub mlp_linear_shapes: Vec<(usize, usize)>,
    /// Declared total parameter count, used only for the quantized fraction.
    pub total_params: u64,
}

impl ArchSpec {
    pub const REFERENCE_BLOCKS: usize = 26;
    pub const REFERENCE_HIDDEN: usize = 1536;
    pub const REFERENCE_INTERMEDIATE: usize = 6144;
    pub const REFERENCE_TOTAL_PARAMS: u64 = 1_000_000_000;

    /// Gated MLP blocks: gate/up map hidden -> intermediate, down maps back.
    pub fn gated_mlp(
        n_blocks: usize,
        hidden: usize,
        intermediate: usize,
        total_params: u64,
    ) -> Result<Self, LayoutError> {
        if n_blocks == 0 || hidden == 0 || intermediate == 0 {
            return Err(LayoutError::InvalidArch(
                "block count and widths must be positive".into(),
            ));
        }
        Ok(Self {
            n_blocks,
            hidden,
            intermediate,
            mlp_linear_shapes: vec![(intermediate, hidden), (intermediate, hidden), (hidden, intermediate)],
            total_params,
        })
    }

    /// The 26-block, 1536/6144 reference model (~1B parameters).
    pub fn reference() -> Self {
        Self::gated_mlp(
            Self::REFERENCE_BLOCKS,
            Self::REFERENCE_HIDDEN,
            Self::REFERENCE_INTERMEDIATE,
            Self::REFERENCE_TOTAL_PARAMS,
        )
        .expect("reference dims are positive")
    }

    /// Reference widths with a different depth. The per-block share of the
    /// declared total (MLP plus four hidden x hidden attention projections)
    /// scales with depth; the remainder (embeddings, head) stays fixed.
    pub fn reference_with_blocks(n_blocks: usize) -> Result<Self, LayoutError> {
        let h = Self::REFERENCE_HIDDEN as u64;
        let per_block = 3 * h * Self::REFERENCE_INTERMEDIATE as u64 + 4 * h * h;
        let fixed = Self::REFERENCE_TOTAL_PARAMS - per_block * Self::REFERENCE_BLOCKS as u64;
        Self::gated_mlp(
            n_blocks,
            Self::REFERENCE_HIDDEN,
            Self::REFERENCE_INTERMEDIATE,
            fixed + per_block * n_blocks as u64,
        )
    }

    pub fn mlp_params_per_block(&self) -> u64 {
        self.mlp_linear_shapes.iter().map(|&(r, c)| (r * c) as u64).sum()
    }

    fn shape_of(&self, name: &str) -> Option<(usize, usize)> {
        MLP_LAYER_NAMES
            .iter()
            .position(|n| *n == name)
            .and_then(|i| self.mlp_linear_shapes.get(i).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct QuantizedLinear {
    pub block: usize,
    pub name: &'static str,
}

impl QuantizedLinear {
    pub fn layer_id(&self) -> String {
        format!("block{}.{}", self.block, self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayout {
    pub n_blocks: usize,
    pub high_precision_blocks: BTreeSet<usize>,
    pub quantized_linears: Vec<QuantizedLinear>,
}

impl QuantLayout {
    pub fn is_quantized(&self, block: usize, name: &str) -> bool {
        self.quantized_linears
            .iter()
            .any(|q| q.block == block && q.name == name)
    }

    /// Block index -> quantized layer names, for every block.
    pub fn per_block(&self) -> BTreeMap<usize, Vec<&'static str>> {
        let mut map: BTreeMap<usize, Vec<&'static str>> = (0..self.n_blocks).map(|b| (b, Vec::new())).collect();
        for q in &self.quantized_linears {
            map.entry(q.block).or_default().push(q.name);
        }
        map
    }
}

/// `{0..ceil(k/2)} ∪ {n-floor(k/2)..n}`.
pub fn select_high_precision_blocks(n_blocks: usize, k: usize) -> Result<BTreeSet<usize>, LayoutError> {
    if k > n_blocks {
        return Err(LayoutError::TooManyHighPrecision { k, n_blocks });
    }
    let head = k.div_ceil(2);
    let tail = k / 2;
    Ok((0..head).chain(n_blocks - tail..n_blocks).collect())
}

pub fn build_layout(arch: &ArchSpec, k: usize) -> Result<QuantLayout, LayoutError> {
    let high_precision_blocks = select_high_precision_blocks(arch.n_blocks, k)?;
    let quantized_linears = (0..arch.n_blocks)
        .filter(|b| !high_precision_blocks.contains(b))
        .flat_map(|block| MLP_LAYER_NAMES.iter().map(move |&name| QuantizedLinear { block, name }))
        .collect();
    Ok(QuantLayout {
        n_blocks: arch.n_blocks,
        high_precision_blocks,
        quantized_linears,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCount {
    pub layers: usize,
    pub params: u64,
    /// Share of `ArchSpec::total_params`, in [0, 1].
    pub fraction: f64,
}

pub fn count_quantized_params(layout: &QuantLayout, arch: &ArchSpec) -> Result<ParamCount, LayoutError> {
    let mut params = 0u64;
    for q in &layout.quantized_linears {
        if q.block >= arch.n_blocks {
            return Err(LayoutError::BlockOutOfRange {
                block: q.block,
                n_blocks: arch.n_blocks,
            });
        }
        let (r, c) = arch
            .shape_of(q.name)
            .ok_or_else(|| LayoutError::UnknownLayer(q.name.to_string()))?;
        params += (r * c) as u64;
    }
    let fraction = if params == 0 || arch.total_params == 0 {
        0.0
    } else {
        params as f64 / arch.total_params as f64
    };
    Ok(ParamCount {
        layers: layout.quantized_linears.len(),
        params,
        fraction,
    })
}

/// Audit view of a layout, serialized by the layout dump.
#[derive(Debug, Serialize)]
pub struct LayoutDump {
    pub n_blocks: usize,
    pub high_precision_blocks: Vec<usize>,
    pub blocks: BTreeMap<String, Vec<&'static str>>,
    pub quantized_linears: usize,
    pub quantized_params: u64,
    pub total_params: u64,
    pub quantized_fraction: f64,
}

impl LayoutDump {
    pub fn new(layout: &QuantLayout, arch: &ArchSpec) -> Result<Self, LayoutError> {
        let count = count_quantized_params(layout, arch)?;
        Ok(Self {
            n_blocks: layout.n_blocks,
            high_precision_blocks: layout.high_precision_blocks.iter().copied().collect(),
            // Zero-padded keys keep JSON object order numeric.
            blocks: layout
                .per_block()
                .into_iter()
                .map(|(b, names)| (format!("{b:03}"), names))
                .collect(),
            quantized_linears: count.layers,
            quantized_params: count.params,
            total_params: arch.total_params,
            quantized_fraction: count.fraction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_selection() {
        let set = |n, k| {
            select_high_precision_blocks(n, k)
                .unwrap()
                .into_iter()
                .collect::<Vec<_>>()
        };
        assert_eq!(set(26, 5), vec![0, 1, 2, 24, 25]);
        assert!(set(26, 0).is_empty());
        assert_eq!(set(10, 4), vec![0, 1, 8, 9]);
        assert_eq!(set(3, 3), vec![0, 1, 2]);
        assert_eq!(set(1, 1), vec![0]);
        assert!(matches!(
            select_high_precision_blocks(4, 5),
            Err(LayoutError::TooManyHighPrecision { .. })
        ));
    }

    #[test]
    fn reference_layout() {
        let arch = ArchSpec::reference();
        let layout = build_layout(&arch, 5).unwrap();
        assert_eq!(layout.quantized_linears.len(), 63);
        assert_eq!(arch.mlp_params_per_block(), 3 * 1536 * 6144);
        assert!((arch.mlp_params_per_block() as f64 / 1e6 - 28.3).abs() < 0.05);
        let c = count_quantized_params(&layout, &arch).unwrap();
        assert_eq!(c.params, 21 * 3 * 1536 * 6144);
        assert!((c.params as f64 / 594e6 - 1.0).abs() < 0.01);
        assert!((c.fraction - 0.60).abs() < 0.02);
        for q in &layout.quantized_linears {
            assert!(!layout.high_precision_blocks.contains(&q.block));
        }
    }

    #[test]
    fn degenerate_layouts() {
        let arch = ArchSpec::reference();
        let all_hp = build_layout(&arch, 26).unwrap();
        assert!(all_hp.quantized_linears.is_empty());
        assert_eq!(
            count_quantized_params(&all_hp, &arch).unwrap(),
            ParamCount {
                layers: 0,
                params: 0,
                fraction: 0.0
            }
        );
    }

    #[test]
    fn consistency_error() {
        let arch = ArchSpec::reference();
        let mut layout = build_layout(&arch, 5).unwrap();
        layout.quantized_linears.push(QuantizedLinear {
            block: 30,
            name: "up_proj",
        });
        assert!(matches!(
            count_quantized_params(&layout, &arch),
            Err(LayoutError::BlockOutOfRange { block: 30, .. })
        ));
    }

    #[test]
    fn depth_scaled_reference_keeps_total_at_26() {
        assert_eq!(
            ArchSpec::reference_with_blocks(26).unwrap().total_params,
            ArchSpec::REFERENCE_TOTAL_PARAMS
        );
        assert!(ArchSpec::reference_with_blocks(10).unwrap().total_params < ArchSpec::REFERENCE_TOTAL_PARAMS);
    }

    #[test]
    fn dump_lists_every_block() {
        let arch = ArchSpec::gated_mlp(4, 8, 16, 10_000).unwrap();
        let dump = LayoutDump::new(&build_layout(&arch, 2).unwrap(), &arch).unwrap();
        assert_eq!(dump.blocks.len(), 4);
        assert!(dump.blocks["000"].is_empty());
        assert_eq!(dump.blocks["001"], MLP_LAYER_NAMES.to_vec());
        assert_eq!(dump.quantized_params, 2 * 3 * 8 * 16);
    }
}
