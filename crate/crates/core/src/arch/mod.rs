//! Architecture IR: envelope networks and everything construction derives
//! from them.
//!
//! A network is a stem, a list of stages separated by implicit wideners, and
//! a classifier head. Stages hold layers; a layer is a set of parallel
//! blocks whose outputs are depth-concatenated and mapped back to the stage
//! width by a 1x1 merge convolution. Skip connections are non-adjacent
//! layer-to-layer edges carrying a learned scalar weight.

mod document;
mod notation;

pub use document::{deserialize, serialize};
pub use notation::{format_notation, parse_notation, DEFAULT_CLASSES, DEFAULT_DROPOUT_KEEP};

use std::fmt;

use crate::error::{Error, Result};

/// Operator kinds. The first six are the canonical envelope set; the rest
/// name widener/classifier components and the all-zeros filter used by the
/// linear-layer analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Conv1x1,
    Conv3x3,
    Sep3x3,
    Conv5x5,
    Sep5x5,
    Sep7x7,
    MaxPool3x3,
    AvgPoolGlobal,
    FullyConnected,
    Zero,
}

impl BlockKind {
    /// Canonical envelope block set, in notation order.
    pub const ENVELOPE: [BlockKind; 6] = [
        BlockKind::Conv1x1,
        BlockKind::Conv3x3,
        BlockKind::Sep3x3,
        BlockKind::Conv5x5,
        BlockKind::Sep5x5,
        BlockKind::Sep7x7,
    ];

    pub fn is_convolutional(self) -> bool {
        matches!(
            self,
            BlockKind::Conv1x1
                | BlockKind::Conv3x3
                | BlockKind::Sep3x3
                | BlockKind::Conv5x5
                | BlockKind::Sep5x5
                | BlockKind::Sep7x7
        )
    }

    pub fn is_separable(self) -> bool {
        matches!(self, BlockKind::Sep3x3 | BlockKind::Sep5x5 | BlockKind::Sep7x7)
    }

    /// Spatial kernel size of convolutional kinds.
    pub fn kernel_size(self) -> usize {
        match self {
            BlockKind::Conv1x1 => 1,
            BlockKind::Conv3x3 | BlockKind::Sep3x3 | BlockKind::MaxPool3x3 => 3,
            BlockKind::Conv5x5 | BlockKind::Sep5x5 => 5,
            BlockKind::Sep7x7 => 7,
            _ => panic!("{self:?} has no kernel size"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Conv1x1 => "conv1x1",
            BlockKind::Conv3x3 => "conv3x3",
            BlockKind::Sep3x3 => "sep3x3",
            BlockKind::Conv5x5 => "conv5x5",
            BlockKind::Sep5x5 => "sep5x5",
            BlockKind::Sep7x7 => "sep7x7",
            BlockKind::MaxPool3x3 => "maxpool3x3",
            BlockKind::AvgPoolGlobal => "avgpool_global",
            BlockKind::FullyConnected => "fully_connected",
            BlockKind::Zero => "zero",
        }
    }

    pub fn from_name(s: &str) -> Option<BlockKind> {
        Some(match s {
            "conv1x1" => BlockKind::Conv1x1,
            "conv3x3" => BlockKind::Conv3x3,
            "sep3x3" => BlockKind::Sep3x3,
            "conv5x5" => BlockKind::Conv5x5,
            "sep5x5" => BlockKind::Sep5x5,
            "sep7x7" => BlockKind::Sep7x7,
            _ => return None,
        })
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifier unique within a network for the lifetime of a construction
/// run; never reassigned after its block is pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

impl BlockId {
    pub fn parse(s: &str) -> Option<BlockId> {
        s.strip_prefix('b').and_then(|digits| digits.parse().ok()).map(BlockId)
    }
}

/// Allocator that hands out fresh block ids, monotonically.
#[derive(Debug, Clone)]
pub struct BlockIdAlloc {
    next: u64,
}

impl BlockIdAlloc {
    /// Starts above every id already present in the network.
    pub fn for_network(net: &NetworkSpec) -> Self {
        let next = net.blocks().map(|b| b.id.0 + 1).max().unwrap_or(0);
        BlockIdAlloc { next }
    }

    pub fn fresh(&mut self) -> BlockId {
        let id = BlockId(self.next);
        self.next += 1;
        id
    }
}

/// One parallel branch of a layer: convolution, relu, batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub id: BlockId,
    pub kind: BlockKind,
    pub out_channels: usize,
}

/// Parallel blocks whose outputs are depth-concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub blocks: Vec<Block>,
}

/// Weighted edge from `src_layer`'s output into `dst_layer`'s input.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipConnection {
    pub src_layer: usize,
    pub dst_layer: usize,
    pub weight: f64,
}

/// A run of layers between wideners.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub layers: Vec<Layer>,
    pub skips: Vec<SkipConnection>,
}

impl Stage {
    pub fn block_count(&self) -> usize {
        self.layers.iter().map(|l| l.blocks.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemLayer {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemSpec {
    pub layers: Vec<StemLayer>,
}

/// Global-average-pool -> flatten -> dropout -> fully connected.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSpec {
    pub dropout_keep: f64,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub stem_channels: usize,
    pub envelope_cell: Vec<BlockKind>,
    pub stages: Vec<Stage>,
    pub stem: StemSpec,
    pub classifier: ClassifierSpec,
}

/// A structural invariant breach reported by [`NetworkSpec::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

impl NetworkSpec {
    /// Channel width of stage `s`: the stem width doubled by each widener.
    pub fn stage_width(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(Stage::block_count).sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flat_map(|s| s.layers.iter()).flat_map(|l| l.blocks.iter())
    }

    /// Structural equality ignoring block id values (ids are allocation
    /// artifacts; two parses of one notation string differ only in them
    /// when derived from different allocators).
    pub fn equal_modulo_ids(&self, other: &NetworkSpec) -> bool {
        if self.stem_channels != other.stem_channels
            || self.envelope_cell != other.envelope_cell
            || self.stem != other.stem
            || self.classifier != other.classifier
            || self.stages.len() != other.stages.len()
        {
            return false;
        }
        self.stages.iter().zip(&other.stages).all(|(a, b)| {
            a.skips == b.skips
                && a.layers.len() == b.layers.len()
                && a.layers.iter().zip(&b.layers).all(|(la, lb)| {
                    la.blocks.len() == lb.blocks.len()
                        && la.blocks.iter().zip(&lb.blocks).all(|(x, y)| {
                            x.kind == y.kind && x.out_channels == y.out_channels
                        })
                })
        })
    }

    /// All structural invariant violations; empty means the network is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |location: String, message: String| out.push(Violation { location, message });

        if self.stem_channels == 0 {
            push("stem_channels".into(), "must be >= 1".into());
        }
        if self.envelope_cell.is_empty() {
            push("envelope_cell".into(), "must contain at least one block kind".into());
        } else if self.envelope_cell.len() > BlockKind::ENVELOPE.len()
            || self.envelope_cell != BlockKind::ENVELOPE[..self.envelope_cell.len()]
        {
            push(
                "envelope_cell".into(),
                "must be a prefix of the canonical envelope block set".into(),
            );
        }
        if self.stages.is_empty() {
            push("stages".into(), "network must contain at least one stage".into());
        }

        let mut seen_ids = std::collections::HashSet::new();
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.layers.is_empty() {
                push(format!("stages[{si}]"), "stage must contain at least one layer".into());
            }
            for (li, layer) in stage.layers.iter().enumerate() {
                if layer.blocks.is_empty() {
                    push(
                        format!("stages[{si}].layers[{li}]"),
                        "layer must contain >=1 block".into(),
                    );
                }
                for (bi, block) in layer.blocks.iter().enumerate() {
                    let loc = format!("stages[{si}].layers[{li}].blocks[{bi}]");
                    if block.kind == BlockKind::Zero {
                        push(loc.clone(), "zero filter must never appear in a trainable network".into());
                    } else if !block.kind.is_convolutional() {
                        push(loc.clone(), format!("{} is not a layer block kind", block.kind));
                    }
                    if block.out_channels == 0 {
                        push(loc.clone(), "out_channels must be >= 1".into());
                    }
                    if !seen_ids.insert(block.id) {
                        push(loc, format!("duplicate block id {}", block.id));
                    }
                }
            }
            let mut seen_edges = std::collections::HashSet::new();
            for (ki, skip) in stage.skips.iter().enumerate() {
                let loc = format!("stages[{si}].skips[{ki}]");
                if skip.src_layer >= skip.dst_layer {
                    push(loc.clone(), format!("src {} must be < dst {}", skip.src_layer, skip.dst_layer));
                }
                if skip.dst_layer >= stage.layers.len() {
                    push(loc.clone(), format!("dst {} out of range", skip.dst_layer));
                }
                if !seen_edges.insert((skip.src_layer, skip.dst_layer)) {
                    push(loc, format!("duplicate edge ({}, {})", skip.src_layer, skip.dst_layer));
                }
            }
        }

        if self.stem.layers.is_empty() {
            push("stem".into(), "stem must contain at least one layer".into());
        }
        for (i, l) in self.stem.layers.iter().enumerate() {
            let loc = format!("stem[{i}]");
            if l.kernel == 0 || l.kernel % 2 == 0 {
                push(loc.clone(), format!("kernel {} must be odd and >= 1", l.kernel));
            }
            if l.out_channels == 0 {
                push(loc.clone(), "channels must be >= 1".into());
            }
            if l.stride == 0 {
                push(loc, "stride must be >= 1".into());
            }
        }
        if let Some(last) = self.stem.layers.last() {
            if last.out_channels != self.stem_channels {
                push(
                    "stem".into(),
                    format!(
                        "stem output width {} must equal stem_channels {}",
                        last.out_channels, self.stem_channels
                    ),
                );
            }
        }
        if !(self.classifier.dropout_keep > 0.0 && self.classifier.dropout_keep <= 1.0) {
            push("classifier.dropout_keep".into(), "must be in (0, 1]".into());
        }
        if self.classifier.num_classes == 0 {
            push("classifier.classes".into(), "must be >= 1".into());
        }
        out
    }

    /// Exact trainable-parameter count of the realized network, mirroring
    /// the graph builder: stem convs with batchnorm, blocks, per-layer
    /// block-merge 1x1 convs, skip-merge 1x1 convs, skip scalar weights,
    /// wideners and the classifier head.
    pub fn count_parameters(&self, input_shape: (usize, usize, usize)) -> Result<usize> {
        let (in_c, h, w) = input_shape;
        let down = 1usize << (self.stages.len() - 1);
        if h % down != 0 || w % down != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by 2^{} wideners",
                self.stages.len() - 1
            )));
        }
        let mut total = 0usize;
        let mut c = in_c;
        for l in &self.stem.layers {
            // conv kernel + bias + batchnorm scale/shift
            total += l.kernel * l.kernel * c * l.out_channels + l.out_channels + 2 * l.out_channels;
            c = l.out_channels;
        }
        for (si, stage) in self.stages.iter().enumerate() {
            let width = self.stage_width(si);
            for (li, layer) in stage.layers.iter().enumerate() {
                let fan_in = incoming_skips(stage, li);
                if fan_in > 0 {
                    // skip-merge 1x1 conv over (main + skips) concatenation
                    total += (fan_in + 1) * width * width + width;
                }
                let concat: usize = layer.blocks.iter().map(|b| b.out_channels).sum();
                for block in &layer.blocks {
                    total += block_param_count(block.kind, width, block.out_channels);
                }
                // block-merge 1x1 conv back to the stage width
                total += concat * width + width;
            }
            total += stage.skips.len(); // one scalar weight per skip
            if si + 1 < self.stages.len() {
                // widener: stride-2 3x3 conv in parallel with maxpool
                total += 3 * 3 * width * width + width;
            }
        }
        let last_width = self.stage_width(self.stages.len() - 1);
        total += last_width * self.classifier.num_classes + self.classifier.num_classes;
        Ok(total)
    }
}

fn incoming_skips(stage: &Stage, layer: usize) -> usize {
    stage.skips.iter().filter(|s| s.dst_layer == layer).count()
}

/// Trainable parameters of a single block at the given input width:
/// convolution kernel(s), bias and batchnorm scale/shift. Parameter-free
/// kinds report zero.
pub fn block_param_count(kind: BlockKind, in_channels: usize, out_channels: usize) -> usize {
    let k = match kind {
        BlockKind::Zero | BlockKind::MaxPool3x3 | BlockKind::AvgPoolGlobal | BlockKind::FullyConnected => {
            return 0
        }
        other => other.kernel_size(),
    };
    let bn = 2 * out_channels;
    if kind.is_separable() {
        // depthwise k*k per input channel, then pointwise with bias
        k * k * in_channels + in_channels * out_channels + out_channels + bn
    } else {
        k * k * in_channels * out_channels + out_channels + bn
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv3x3_block_parameter_count() {
        // kernel 3*3*4*8 + bias 8 + batchnorm 2*8 = 312
        assert_eq!(block_param_count(BlockKind::Conv3x3, 4, 8), 312);
    }

    #[test]
    fn zero_block_has_no_parameters() {
        assert_eq!(block_param_count(BlockKind::Zero, 4, 8), 0);
    }

    #[test]
    fn validate_flags_empty_layer() {
        let mut net = parse_notation("8/2-2/3").unwrap();
        net.stages[0].layers[1].blocks.clear();
        let violations = net.validate();
        assert!(violations.iter().any(|v| v.message.contains(">=1 block")), "{violations:?}");
    }

    #[test]
    fn validate_flags_degenerate_skip() {
        let mut net = parse_notation("8/3/3").unwrap();
        net.stages[0].skips.push(SkipConnection { src_layer: 1, dst_layer: 1, weight: 1.0 });
        let violations = net.validate();
        assert!(violations.iter().any(|v| v.location.contains("skips")), "{violations:?}");
    }

    #[test]
    fn freshly_parsed_network_is_valid() {
        let net = parse_notation("128/2-2-2/6").unwrap();
        assert!(net.validate().is_empty());
    }

    #[test]
    fn doubling_widths_more_than_doubles_parameters() {
        let net = parse_notation("16/2-2/4").unwrap();
        let base = net.count_parameters((3, 16, 16)).unwrap();
        let mut wide = net.clone();
        wide.stem_channels *= 2;
        for l in &mut wide.stem.layers {
            l.out_channels *= 2;
        }
        for stage in &mut wide.stages {
            for layer in &mut stage.layers {
                for b in &mut layer.blocks {
                    b.out_channels *= 2;
                }
            }
        }
        let doubled = wide.count_parameters((3, 16, 16)).unwrap();
        assert!(doubled > 2 * base, "{doubled} vs {base}");
    }

    #[test]
    fn adding_a_block_strictly_increases_parameters() {
        let net = parse_notation("8/2-2/3").unwrap();
        let base = net.count_parameters((3, 8, 8)).unwrap();
        for kind in BlockKind::ENVELOPE {
            let mut grown = net.clone();
            let mut alloc = BlockIdAlloc::for_network(&grown);
            grown.stages[1].layers[0]
                .blocks
                .push(Block { id: alloc.fresh(), kind, out_channels: 3 });
            assert!(grown.count_parameters((3, 8, 8)).unwrap() > base, "{kind}");
        }
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let net = parse_notation("8/1-1/2").unwrap();
        assert!(matches!(net.count_parameters((3, 9, 8)), Err(Error::Shape(_))));
    }

    #[test]
    fn block_id_formats_and_parses() {
        assert_eq!(BlockId(17).to_string(), "b17");
        assert_eq!(BlockId::parse("b17"), Some(BlockId(17)));
        assert_eq!(BlockId::parse("17"), None);
        assert_eq!(BlockId::parse("bx"), None);
    }

    #[test]
    fn id_alloc_never_reuses_after_prune() {
        let mut net = parse_notation("8/2/3").unwrap();
        let mut alloc = BlockIdAlloc::for_network(&net);
        // prune the highest-numbered block, then allocate
        let removed = net.stages[0].layers[1].blocks.pop().unwrap();
        let fresh = alloc.fresh();
        assert!(fresh.0 > removed.id.0);
    }
}
