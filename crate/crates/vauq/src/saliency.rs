//! Attention aggregation over a layer band, top-K% patch selection, mask
//! construction for the masking variants, and evidence-region attention
//! diagnostics.
//!
//! Everything here is a pure function over immutable traces and layouts, so
//! callers may parallelize per sample freely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::{Condition, GenerationTrace, MaskKind, MaskSpec, VisualLayout};
use crate::error::{Error, Result};

/// Aggregated generated-to-visual attention per visual token.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// One non-negative weight per visual token.
    pub weights: Vec<f64>,
    /// Inclusive layer range the weights were summed over.
    pub layer_band: (usize, usize),
    /// Number of generated tokens that contributed.
    pub n_generated: usize,
}

/// Sums attention from every generated token to each visual token over all
/// heads and all layers in the inclusive band. No per-head or per-layer
/// averaging is applied.
pub fn aggregate_attention(
    trace: &GenerationTrace,
    layer_band: (usize, usize),
) -> Result<SaliencyMap> {
    if !matches!(trace.condition, Condition::Full) {
        return Err(Error::NonFullTrace(trace.condition.to_string()));
    }
    let (ls, le) = layer_band;
    let att = &trace.attention;
    if ls > le || le >= att.n_layers() {
        return Err(Error::BandOutsideExported(ls, le, att.n_layers()));
    }
    let mut weights = vec![0.0f64; att.n_keys()];
    for layer in ls..=le {
        for head in 0..att.n_heads() {
            for query in 0..att.n_queries() {
                for (w, &a) in weights.iter_mut().zip(att.visual_row(layer, head, query)) {
                    *w += a as f64;
                }
            }
        }
    }
    Ok(SaliencyMap {
        weights,
        layer_band,
        n_generated: att.n_queries(),
    })
}

/// Selects the `floor(k_percent * N / 100)` visual tokens with the largest
/// aggregated weights as a core mask. Ties break toward the lower token
/// index. `k_percent = 0` yields the identity mask and `k_percent = 100`
/// the blank mask.
pub fn top_k_mask(map: &SaliencyMap, k_percent: u32) -> Result<MaskSpec> {
    if k_percent > 100 {
        return Err(Error::InvalidConfig(format!(
            "k_percent {k_percent} outside 0..=100"
        )));
    }
    let n = map.weights.len();
    let count = (k_percent as usize * n) / 100;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        map.weights[b]
            .total_cmp(&map.weights[a])
            .then(a.cmp(&b))
    });
    order.truncate(count);
    MaskSpec::new(MaskKind::Core, order, n)
}

/// Uniform sample of `cardinality` visual tokens without replacement,
/// deterministic per seed. For the masking ablation the cardinality is
/// matched to the core mask's.
pub fn random_mask(n_tokens: usize, cardinality: usize, seed: u64) -> Result<MaskSpec> {
    if cardinality > n_tokens {
        return Err(Error::InvalidMask(format!(
            "cardinality {cardinality} exceeds {n_tokens} visual tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, n_tokens, cardinality).into_vec();
    MaskSpec::new(MaskKind::Random, indices, n_tokens)
}

/// Masks every patch whose center point lies inside any evidence box.
/// Errors when the layout carries no evidence regions; an in-range box that
/// covers no patch centers yields the identity mask with a warning.
pub fn ground_truth_mask(layout: &VisualLayout) -> Result<MaskSpec> {
    let regions = layout
        .evidence_regions
        .as_deref()
        .filter(|r| !r.is_empty())
        .ok_or(Error::NoEvidenceRegions)?;
    let indices = layout.patches_in_boxes(regions);
    if indices.is_empty() {
        log::warn!(
            "evidence regions cover no patch centers on a {}x{} grid; ground-truth mask is empty",
            layout.grid.0,
            layout.grid.1
        );
    }
    MaskSpec::new(MaskKind::GroundTruth, indices, layout.n_tokens)
}

/// Mean aggregated weight per evidence patch and per irrelevant patch,
/// normalized by the patch count of each region.
pub fn evidence_attention_ratio(map: &SaliencyMap, layout: &VisualLayout) -> Result<(f64, f64)> {
    if map.weights.len() != layout.n_tokens {
        return Err(Error::DimensionMismatch {
            expected: layout.n_tokens,
            got: map.weights.len(),
        });
    }
    let regions = layout
        .evidence_regions
        .as_deref()
        .filter(|r| !r.is_empty())
        .ok_or(Error::NoEvidenceRegions)?;
    let inside = layout.patches_in_boxes(regions);
    if inside.is_empty() {
        return Err(Error::EmptyRegion("evidence"));
    }
    if inside.len() == layout.n_tokens {
        return Err(Error::EmptyRegion("irrelevant"));
    }
    let inside_sum: f64 = inside.iter().map(|&i| map.weights[i]).sum();
    let total: f64 = map.weights.iter().sum();
    let inside_mean = inside_sum / inside.len() as f64;
    let outside_mean = (total - inside_sum) / (layout.n_tokens - inside.len()) as f64;
    Ok((inside_mean, outside_mean))
}

/// Per-layer evidence/irrelevant mean weights, for layer-profile diagnostics.
pub fn layer_ratio_curve(
    trace: &GenerationTrace,
    layout: &VisualLayout,
) -> Result<Vec<(usize, f64, f64)>> {
    (0..trace.attention.n_layers())
        .map(|layer| {
            let map = aggregate_attention(trace, (layer, layer))?;
            let (inside, outside) = evidence_attention_ratio(&map, layout)?;
            Ok((layer, inside, outside))
        })
        .collect()
}

/// Per-sample mask export record; `overlay` is the mask as grid rows of 0/1
/// cells for external rendering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskRecord {
    pub sample_id: String,
    pub kind: MaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_percent: Option<u32>,
    pub indices: Vec<usize>,
    pub grid: (usize, usize),
    pub overlay: Vec<Vec<u8>>,
}

impl MaskRecord {
    pub fn new(sample_id: &str, mask: &MaskSpec, layout: &VisualLayout, k_percent: Option<u32>) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            kind: mask.kind,
            k_percent,
            indices: mask.indices.clone(),
            grid: layout.grid,
            overlay: mask_overlay(mask, layout),
        }
    }
}

/// The mask as a `rows x cols` grid of 0/1 cells.
pub fn mask_overlay(mask: &MaskSpec, layout: &VisualLayout) -> Vec<Vec<u8>> {
    let (rows, cols) = layout.grid;
    (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| u8::from(mask.is_masked(r * cols + c)))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        AttentionTensor, BoundingBox, HiddenStates, StepStats,
    };

    /// Hand-built full-condition trace with the given per-(layer, head, query)
    /// visual rows.
    fn trace_with_attention(
        n_layers: usize,
        n_heads: usize,
        rows: &[f32],
        n_queries: usize,
    ) -> GenerationTrace {
        let n_keys = rows.len();
        let mut att = AttentionTensor::zeros(n_layers, n_heads, n_queries, n_keys);
        for l in 0..n_layers {
            for h in 0..n_heads {
                for q in 0..n_queries {
                    att.visual_row_mut(l, h, q).copy_from_slice(rows);
                }
            }
        }
        GenerationTrace {
            tokens: vec![0; n_queries],
            steps: vec![
                StepStats {
                    entropy: 0.0,
                    logprob_realized: 0.0
                };
                n_queries
            ],
            hidden: HiddenStates::default(),
            attention: att,
            condition: Condition::Full,
            wall_time: 0.0,
        }
    }

    #[test]
    fn single_row_aggregation_is_the_row_itself() {
        let trace = trace_with_attention(1, 1, &[0.2, 0.3, 0.5], 1);
        let map = aggregate_attention(&trace, (0, 0)).unwrap();
        assert_eq!(map.weights, vec![0.2f32 as f64, 0.3f32 as f64, 0.5f32 as f64]);
    }

    #[test]
    fn identical_layers_add_up() {
        let trace = trace_with_attention(2, 1, &[0.2, 0.3, 0.5], 1);
        let map = aggregate_attention(&trace, (0, 1)).unwrap();
        let expected = [0.4, 0.6, 1.0];
        for (w, e) in map.weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregation_rejects_bad_bands_and_non_full_traces() {
        let mut trace = trace_with_attention(2, 1, &[0.5, 0.5], 1);
        assert!(aggregate_attention(&trace, (0, 2)).is_err());
        assert!(aggregate_attention(&trace, (1, 0)).is_err());
        trace.condition = Condition::Blank;
        assert!(matches!(
            aggregate_attention(&trace, (0, 1)),
            Err(Error::NonFullTrace(_))
        ));
    }

    fn map_of(weights: Vec<f64>) -> SaliencyMap {
        SaliencyMap {
            weights,
            layer_band: (0, 0),
            n_generated: 1,
        }
    }

    #[test]
    fn top_k_selects_the_largest_weights() {
        let mask = top_k_mask(&map_of(vec![0.5, 0.3, 0.1, 0.1]), 50).unwrap();
        assert_eq!(mask.kind, MaskKind::Core);
        assert_eq!(mask.indices, vec![0, 1]);
    }

    #[test]
    fn top_k_breaks_ties_toward_lower_index() {
        let mask = top_k_mask(&map_of(vec![0.4, 0.4, 0.1, 0.1]), 25).unwrap();
        assert_eq!(mask.indices, vec![0]);
    }

    #[test]
    fn top_k_cardinality_uses_floor() {
        let weights: Vec<f64> = (0..576).map(|i| i as f64).collect();
        let mask = top_k_mask(&map_of(weights), 60).unwrap();
        assert_eq!(mask.cardinality(), 345);
    }

    #[test]
    fn top_k_endpoints_degenerate_to_none_and_blank() {
        let map = map_of(vec![0.5, 0.3, 0.2]);
        assert_eq!(top_k_mask(&map, 0).unwrap().kind, MaskKind::None);
        assert_eq!(top_k_mask(&map, 100).unwrap().kind, MaskKind::Blank);
        assert!(top_k_mask(&map, 101).is_err());
    }

    #[test]
    fn random_mask_endpoints_and_determinism() {
        assert_eq!(random_mask(8, 0, 1).unwrap().kind, MaskKind::None);
        assert_eq!(random_mask(8, 8, 1).unwrap().kind, MaskKind::Blank);
        assert!(random_mask(8, 9, 1).is_err());
        let a = random_mask(64, 16, 42).unwrap();
        let b = random_mask(64, 16, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cardinality(), 16);
    }

    #[test]
    fn ground_truth_mask_full_box_is_blank() {
        let layout = VisualLayout::new(4, 4)
            .unwrap()
            .with_evidence(vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()]);
        let mask = ground_truth_mask(&layout).unwrap();
        assert_eq!(mask.kind, MaskKind::Blank);
    }

    #[test]
    fn ground_truth_mask_left_half_selects_two_columns() {
        let layout = VisualLayout::new(4, 4)
            .unwrap()
            .with_evidence(vec![BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap()]);
        let mask = ground_truth_mask(&layout).unwrap();
        assert_eq!(mask.indices, vec![0, 1, 4, 5, 8, 9, 12, 13]);
    }

    #[test]
    fn ground_truth_mask_without_center_hits_is_empty_not_error() {
        // A sliver between the column centers of a 2x2 grid.
        let layout = VisualLayout::new(2, 2)
            .unwrap()
            .with_evidence(vec![BoundingBox::new(0.3, 0.3, 0.4, 0.4).unwrap()]);
        let mask = ground_truth_mask(&layout).unwrap();
        assert_eq!(mask.kind, MaskKind::None);
    }

    #[test]
    fn ground_truth_mask_requires_regions() {
        let layout = VisualLayout::new(2, 2).unwrap();
        assert!(matches!(
            ground_truth_mask(&layout),
            Err(Error::NoEvidenceRegions)
        ));
        let layout = layout.with_evidence(vec![]);
        assert!(matches!(
            ground_truth_mask(&layout),
            Err(Error::NoEvidenceRegions)
        ));
    }

    #[test]
    fn uniform_weights_give_equal_region_means() {
        let layout = VisualLayout::new(4, 4)
            .unwrap()
            .with_evidence(vec![BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap()]);
        let map = map_of(vec![1.0; 16]);
        let (inside, outside) = evidence_attention_ratio(&map, &layout).unwrap();
        assert!((inside - outside).abs() < 1e-12);
    }

    #[test]
    fn region_ratio_matches_the_construction() {
        // rho = 0.9 over 4 evidence patches of 16: per-patch inside mass is
        // 0.9/4 and outside mass 0.1/12, a 27x ratio.
        let layout = VisualLayout::new(4, 4)
            .unwrap()
            .with_evidence(vec![BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap()]);
        let mut weights = vec![0.1 / 12.0; 16];
        for i in [0, 1, 4, 5] {
            weights[i] = 0.9 / 4.0;
        }
        let (inside, outside) = evidence_attention_ratio(&map_of(weights), &layout).unwrap();
        assert!((inside / outside - 27.0).abs() < 1e-9);
    }

    #[test]
    fn region_ratio_rejects_empty_sides() {
        let layout = VisualLayout::new(2, 2)
            .unwrap()
            .with_evidence(vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()]);
        assert!(matches!(
            evidence_attention_ratio(&map_of(vec![1.0; 4]), &layout),
            Err(Error::EmptyRegion("irrelevant"))
        ));
    }

    #[test]
    fn overlay_marks_masked_cells() {
        let layout = VisualLayout::new(2, 2).unwrap();
        let mask = MaskSpec::new(MaskKind::Core, vec![1, 2], 4).unwrap();
        assert_eq!(mask_overlay(&mask, &layout), vec![vec![0, 1], vec![1, 0]]);
    }
}
