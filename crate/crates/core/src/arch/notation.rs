//! The compact `C/n1-n2-.../M` network notation.
//!
//! `C` is the stem output width, `n_i` the layer count of stage `i`, and `M`
//! how many of the canonical envelope blocks each layer carries.

use crate::arch::{
    Block, BlockIdAlloc, BlockKind, ClassifierSpec, Layer, NetworkSpec, SkipConnection, Stage,
    StemLayer, StemSpec,
};
use crate::error::{Error, Result};

pub const DEFAULT_DROPOUT_KEEP: f64 = 0.8;
pub const DEFAULT_CLASSES: usize = 10;

fn parse_int(input: &str, token: &str, what: &str) -> Result<usize> {
    let value: usize = token.parse().map_err(|_| Error::Parse {
        input: input.to_string(),
        token: token.to_string(),
        message: format!("{what} must be a positive integer"),
    })?;
    if value == 0 {
        return Err(Error::Parse {
            input: input.to_string(),
            token: token.to_string(),
            message: format!("{what} must be >= 1"),
        });
    }
    Ok(value)
}

/// Parse `C/n1-n2-.../M` into a uniform envelope network.
///
/// Every layer holds the first `M` canonical blocks, each with
/// `ceil(stage_width / M)` output channels; stages are joined by implicit
/// wideners; skip connections connect all non-adjacent layer pairs with
/// weight 1. The classifier defaults to 10 classes with dropout keep 0.8.
pub fn parse_notation(s: &str) -> Result<NetworkSpec> {
    let parts: Vec<&str> = s.split('/').collect();
    if parts.len() != 3 {
        return Err(Error::Parse {
            input: s.to_string(),
            token: s.to_string(),
            message: "expected three /-separated fields: channels/stage-depths/envelope-size".into(),
        });
    }
    let stem_channels = parse_int(s, parts[0], "channel count")?;
    let depths: Vec<usize> = parts[1]
        .split('-')
        .map(|tok| parse_int(s, tok, "stage depth"))
        .collect::<Result<_>>()?;
    let m = parse_int(s, parts[2], "envelope size")?;
    if m > BlockKind::ENVELOPE.len() {
        return Err(Error::UnsupportedEnvelope { requested: m, max: BlockKind::ENVELOPE.len() });
    }

    let envelope_cell = BlockKind::ENVELOPE[..m].to_vec();
    let mut net = NetworkSpec {
        stem_channels,
        envelope_cell: envelope_cell.clone(),
        stages: Vec::with_capacity(depths.len()),
        stem: StemSpec {
            layers: vec![StemLayer { kernel: 3, out_channels: stem_channels, stride: 1 }],
        },
        classifier: ClassifierSpec { dropout_keep: DEFAULT_DROPOUT_KEEP, num_classes: DEFAULT_CLASSES },
    };
    let mut alloc = BlockIdAlloc { next: 0 };
    for (si, &depth) in depths.iter().enumerate() {
        let width = stem_channels << si;
        let per_block = width.div_ceil(m);
        let layers = (0..depth)
            .map(|_| Layer {
                blocks: envelope_cell
                    .iter()
                    .map(|&kind| Block { id: alloc.fresh(), kind, out_channels: per_block })
                    .collect(),
            })
            .collect();
        net.stages.push(Stage { layers, skips: initial_skips(depth) });
    }
    Ok(net)
}

/// The initial dense skip topology: every non-adjacent pair (i, j), j > i+1.
/// Adjacent edges are the main path and are not represented as skips.
pub fn initial_skips(depth: usize) -> Vec<SkipConnection> {
    let mut skips = Vec::new();
    for dst in 0..depth {
        for src in 0..dst.saturating_sub(1) {
            skips.push(SkipConnection { src_layer: src, dst_layer: dst, weight: 1.0 });
        }
    }
    skips
}

/// Render a network in compact notation, when it is exactly expressible:
/// the string must parse back to a network structurally identical (modulo
/// block ids) to the input. Constructed networks are generally not uniform
/// and fall back to the JSON document format.
pub fn format_notation(net: &NetworkSpec) -> Result<String> {
    if net.stages.is_empty() || net.envelope_cell.is_empty() {
        return Err(Error::NotRepresentable("network has no stages or no envelope cell".into()));
    }
    let depths: Vec<String> = net.stages.iter().map(|s| s.layers.len().to_string()).collect();
    let candidate = format!("{}/{}/{}", net.stem_channels, depths.join("-"), net.envelope_cell.len());
    let reparsed = parse_notation(&candidate)?;
    if reparsed.equal_modulo_ids(net) {
        Ok(candidate)
    } else {
        Err(Error::NotRepresentable(format!(
            "network is not uniform; nearest notation {candidate} does not reproduce it"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_four_stage_envelope() {
        let net = parse_notation("128/10-1-1-1/6").unwrap();
        assert_eq!(net.stem_channels, 128);
        assert_eq!(net.stages.len(), 4);
        let depths: Vec<usize> = net.stages.iter().map(|s| s.layers.len()).collect();
        assert_eq!(depths, [10, 1, 1, 1]);
        for stage in &net.stages {
            for layer in &stage.layers {
                assert_eq!(layer.blocks.len(), 6);
            }
        }
        assert!(net.validate().is_empty());
    }

    #[test]
    fn parses_three_stage_envelope() {
        let net = parse_notation("128/7-6-2/6").unwrap();
        let depths: Vec<usize> = net.stages.iter().map(|s| s.layers.len()).collect();
        assert_eq!(depths, [7, 6, 2]);
    }

    #[test]
    fn minimal_network() {
        let net = parse_notation("1/1/1").unwrap();
        assert_eq!(net.stages.len(), 1);
        assert_eq!(net.stages[0].layers.len(), 1);
        assert_eq!(net.stages[0].layers[0].blocks.len(), 1);
        assert_eq!(net.stages[0].layers[0].blocks[0].kind, BlockKind::Conv1x1);
        assert!(net.stages[0].skips.is_empty());
    }

    #[test]
    fn malformed_strings_name_the_token() {
        match parse_notation("128/2-x-2/6") {
            Err(Error::Parse { token, .. }) => assert_eq!(token, "x"),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_notation("128/2-2").is_err());
        assert!(parse_notation("0/2/3").is_err());
        assert!(parse_notation("8/2-0/3").is_err());
    }

    #[test]
    fn oversized_envelope_is_rejected() {
        assert!(matches!(
            parse_notation("128/2/7"),
            Err(Error::UnsupportedEnvelope { requested: 7, max: 6 })
        ));
    }

    #[test]
    fn round_trips_canonical_strings() {
        for s in ["192/2-2-2/6", "64/7-6-2/6", "128/10-1-1-1/6", "1/1/1"] {
            let net = parse_notation(s).unwrap();
            assert_eq!(format_notation(&net).unwrap(), s);
        }
    }

    #[test]
    fn pruned_network_is_not_representable() {
        let mut net = parse_notation("12/2-2/6").unwrap();
        net.stages[0].layers[1].blocks.pop();
        assert!(matches!(format_notation(&net), Err(Error::NotRepresentable(_))));
    }

    #[test]
    fn per_block_channels_follow_ceil_rule() {
        let net = parse_notation("128/2-2/6").unwrap();
        assert_eq!(net.stages[0].layers[0].blocks[0].out_channels, 22); // ceil(128/6)
        assert_eq!(net.stages[1].layers[0].blocks[0].out_channels, 43); // ceil(256/6)
    }

    #[test]
    fn dense_skip_topology_skips_adjacent_pairs() {
        let net = parse_notation("8/4/2").unwrap();
        let pairs: Vec<(usize, usize)> =
            net.stages[0].skips.iter().map(|s| (s.src_layer, s.dst_layer)).collect();
        assert_eq!(pairs, [(0, 2), (0, 3), (1, 3)]);
        assert!(net.stages[0].skips.iter().all(|s| s.weight == 1.0));
    }
}
