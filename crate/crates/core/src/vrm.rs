//! Variable Response Mechanism: empirical Fisher values per parameter,
//! layer-wise min-max normalization, threshold masks, and the per-element
//! selection between retained local and downloaded global parameters.

use crate::error::{Error, Result};
use crate::params::{LayerMap, ParameterVector};

#[derive(Clone, Debug)]
pub struct VrmConfig {
    /// Mask threshold on normalized Fisher values.
    pub lambda: f64,
    /// Number of mini-batches used for the Fisher estimate.
    pub fisher_batches: usize,
}

impl Default for VrmConfig {
    fn default() -> Self {
        VrmConfig {
            lambda: 0.5,
            fisher_batches: 1,
        }
    }
}

impl VrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fisher_batches < 1 {
            return Err(Error::Config("fisher_batches must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-element Fisher values; non-negative, and in [0, 1] once normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherVector {
    values: Vec<f64>,
    normalized: bool,
}

impl FisherVector {
    pub fn new(values: Vec<f64>, normalized: bool) -> Result<Self> {
        let ok = if normalized {
            values.iter().all(|&v| (0.0..=1.0).contains(&v))
        } else {
            values.iter().all(|&v| v >= 0.0)
        };
        if !ok {
            return Err(Error::Contract(
                "fisher values must be non-negative (and in [0,1] when normalized)".into(),
            ));
        }
        Ok(FisherVector { values, normalized })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Complementary binary masks: p1[m] + p2[m] == 1 for every element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    p1: Vec<u8>,
    p2: Vec<u8>,
}

impl MaskPair {
    pub fn p1(&self) -> &[u8] {
        &self.p1
    }

    pub fn p2(&self) -> &[u8] {
        &self.p2
    }

    pub fn len(&self) -> usize {
        self.p1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p1.is_empty()
    }

    /// Fraction of elements retained locally (p1 == 1).
    pub fn frac_retained(&self) -> f64 {
        if self.p1.is_empty() {
            return 0.0;
        }
        self.p1.iter().map(|&b| b as usize).sum::<usize>() as f64 / self.p1.len() as f64
    }

    /// Per-group retained fraction, in layer-map order.
    pub fn group_retention(&self, layout: &LayerMap) -> Vec<(String, f64)> {
        layout
            .groups()
            .iter()
            .map(|g| {
                let ones: usize = self.p1[g.offset..g.offset + g.len]
                    .iter()
                    .map(|&b| b as usize)
                    .sum();
                (g.name.clone(), ones as f64 / g.len.max(1) as f64)
            })
            .collect()
    }
}

/// Mean over batches of the elementwise squared gradient of each batch's
/// log-likelihood. `grad_fn` returns the d_theta gradient of the batch
/// recommendation loss; squaring makes the likelihood sign irrelevant.
pub fn fisher_values<B>(
    params: &ParameterVector,
    batches: &[B],
    grad_fn: impl Fn(&ParameterVector, &B) -> Result<Vec<f64>>,
) -> Result<FisherVector> {
    if batches.is_empty() {
        return Err(Error::Contract(
            "fisher_values: at least one batch required".into(),
        ));
    }
    let mut acc = vec![0.0; params.len()];
    for batch in batches {
        let g = grad_fn(params, batch)?;
        if g.len() != params.len() {
            return Err(Error::Dimension(format!(
                "fisher_values: gradient has {} values, expected {}",
                g.len(),
                params.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(&g) {
            *a += v * v;
        }
    }
    let n = batches.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    FisherVector::new(acc, false)
}

/// Min-max normalize within each layer group. A degenerate group
/// (max == min) maps to all zeros, handing the whole group to the server.
pub fn layerwise_normalize(fisher: FisherVector, layers: &LayerMap) -> Result<FisherVector> {
    if fisher.is_normalized() {
        return Err(Error::Contract(
            "layerwise_normalize: input already normalized".into(),
        ));
    }
    if fisher.len() != layers.total_len() {
        return Err(Error::Dimension(format!(
            "layerwise_normalize: {} values vs layer map of {}",
            fisher.len(),
            layers.total_len()
        )));
    }
    let mut values = fisher.values;
    for group in layers.groups() {
        let span = &mut values[group.offset..group.offset + group.len];
        let min = span.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = span.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            let range = max - min;
            for v in span.iter_mut() {
                *v = (*v - min) / range;
            }
        } else {
            span.fill(0.0);
        }
    }
    FisherVector::new(values, true)
}

/// Threshold masks: p1[m] = 1 iff the normalized Fisher value is >= lambda,
/// p2 its complement.
pub fn build_masks(fisher: &FisherVector, lambda: f64) -> Result<MaskPair> {
    if !fisher.is_normalized() {
        return Err(Error::Contract(
            "build_masks: fisher values must be normalized".into(),
        ));
    }
    let p1: Vec<u8> = fisher
        .values()
        .iter()
        .map(|&v| u8::from(v >= lambda))
        .collect();
    let p2: Vec<u8> = p1.iter().map(|&b| 1 - b).collect();
    Ok(MaskPair { p1, p2 })
}

/// Per-element selection: keep the retained local value where p1 is set,
/// take the downloaded global value where p2 is set.
pub fn mix_parameters(
    theta_local_prev: &ParameterVector,
    theta_global: &ParameterVector,
    masks: &MaskPair,
) -> Result<ParameterVector> {
    if !theta_local_prev.same_layout(theta_global) {
        return Err(Error::Contract(
            "mix_parameters: layer maps do not match".into(),
        ));
    }
    if masks.len() != theta_local_prev.len() {
        return Err(Error::Contract(format!(
            "mix_parameters: mask length {} vs {} parameters",
            masks.len(),
            theta_local_prev.len()
        )));
    }
    let values = theta_local_prev
        .values()
        .iter()
        .zip(theta_global.values())
        .zip(masks.p1())
        .map(|((&local, &global), &keep)| if keep == 1 { local } else { global })
        .collect();
    ParameterVector::new(std::sync::Arc::clone(theta_local_prev.layout()), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerMap;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn layout(lens: &[usize]) -> Arc<LayerMap> {
        Arc::new(LayerMap::new(
            lens.iter()
                .enumerate()
                .map(|(i, &len)| (format!("g{i}"), len)),
        ))
    }

    fn pv(layout: &Arc<LayerMap>, values: Vec<f64>) -> ParameterVector {
        ParameterVector::new(Arc::clone(layout), values).unwrap()
    }

    #[test]
    fn fisher_squares_single_batch_gradient() {
        let lay = layout(&[2]);
        let params = pv(&lay, vec![0.0, 0.0]);
        let fisher = fisher_values(&params, &[()], |_, _| Ok(vec![2.0, -3.0])).unwrap();
        assert_eq!(fisher.values(), &[4.0, 9.0]);
        assert!(!fisher.is_normalized());
    }

    #[test]
    fn fisher_of_zero_gradient_is_zero() {
        let lay = layout(&[3]);
        let params = pv(&lay, vec![0.0; 3]);
        let fisher = fisher_values(&params, &[(), ()], |_, _| Ok(vec![0.0; 3])).unwrap();
        assert!(fisher.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fisher_averages_squared_gradients_over_batches() {
        let lay = layout(&[2]);
        let params = pv(&lay, vec![0.0, 0.0]);
        let grads = [vec![1.0, 2.0], vec![3.0, -1.0], vec![-2.0, 0.5]];
        let fisher = fisher_values(&params, &[0usize, 1, 2], |_, &b| Ok(grads[b].clone())).unwrap();
        // Oracle: independent per-batch squares, averaged.
        for m in 0..2 {
            let want: f64 = grads.iter().map(|g| g[m] * g[m]).sum::<f64>() / 3.0;
            assert!((fisher.values()[m] - want).abs() < 1e-10);
        }
    }

    /// Three batches on a fixed tiny model: fisher_values must equal the
    /// oracle that takes each batch gradient independently and averages the
    /// squares.
    #[test]
    fn fisher_matches_per_batch_gradient_oracle_on_real_model() {
        use crate::model::{Model, ModelConfig};
        use crate::tensor::Graph;

        let model = Model::new(ModelConfig {
            embed_dim: 4,
            state_size: 2,
            conv_kernel: 2,
            expansion: 2,
            num_blocks: 1,
            dropout: 0.0,
            max_seq_len: 8,
            vocab_size: 9,
        })
        .unwrap();
        let params = model.init_parameters(31);
        let batches: Vec<Vec<(Vec<u32>, u32)>> = vec![
            vec![(vec![1, 4, 2], 7), (vec![3, 3], 1)],
            vec![(vec![8, 2, 5, 6], 4)],
            vec![(vec![2], 9), (vec![7, 1], 2), (vec![5, 5, 5], 5)],
        ];
        let grad_of = |p: &ParameterVector, batch: &Vec<(Vec<u32>, u32)>| {
            let mut grad = vec![0.0; p.len()];
            for (seq, target) in batch {
                let mut graph = Graph::new();
                let leaves = model.leaves(&mut graph, p).unwrap();
                let loss = model
                    .example_loss(&mut graph, &leaves, seq, *target, false, None)
                    .unwrap();
                graph.backward(loss).unwrap();
                model.accumulate_grads(&graph, &leaves, &mut grad).unwrap();
            }
            Ok(grad)
        };
        let fisher = fisher_values(&params, &batches, grad_of).unwrap();

        let mut want = vec![0.0; params.len()];
        for batch in &batches {
            let g: Vec<f64> = grad_of(&params, batch).unwrap();
            for (w, v) in want.iter_mut().zip(&g) {
                *w += v * v;
            }
        }
        for w in want.iter_mut() {
            *w /= batches.len() as f64;
        }
        for (got, w) in fisher.values().iter().zip(&want) {
            assert!((got - w).abs() < 1e-10);
        }
    }

    #[test]
    fn fisher_rejects_empty_batches() {
        let lay = layout(&[1]);
        let params = pv(&lay, vec![0.0]);
        let err = fisher_values(&params, &[] as &[()], |_, _| Ok(vec![0.0])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn normalize_single_group() {
        let lay = layout(&[3]);
        let fisher = FisherVector::new(vec![1.0, 3.0, 5.0], false).unwrap();
        let out = layerwise_normalize(fisher, &lay).unwrap();
        assert_eq!(out.values(), &[0.0, 0.5, 1.0]);
        assert!(out.is_normalized());
    }

    #[test]
    fn normalize_degenerate_group_is_zero() {
        let lay = layout(&[2]);
        let fisher = FisherVector::new(vec![2.0, 2.0], false).unwrap();
        let out = layerwise_normalize(fisher, &lay).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_two_groups_independently() {
        let lay = layout(&[2, 3]);
        let fisher = FisherVector::new(vec![0.0, 10.0, 5.0, 5.0, 15.0], false).unwrap();
        let out = layerwise_normalize(fisher, &lay).unwrap();
        assert_eq!(out.values(), &[0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_already_normalized() {
        let lay = layout(&[1]);
        let fisher = FisherVector::new(vec![0.5], true).unwrap();
        assert!(matches!(
            layerwise_normalize(fisher, &lay).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn mask_boundary_is_greater_or_equal() {
        let fisher = FisherVector::new(vec![0.5], true).unwrap();
        let masks = build_masks(&fisher, 0.5).unwrap();
        assert_eq!(masks.p1(), &[1]);
        assert_eq!(masks.p2(), &[0]);
    }

    #[test]
    fn mask_threshold_split() {
        let fisher = FisherVector::new(vec![0.49, 0.51], true).unwrap();
        let masks = build_masks(&fisher, 0.5).unwrap();
        assert_eq!(masks.p1(), &[0, 1]);
    }

    #[test]
    fn mask_lambda_extremes() {
        let fisher = FisherVector::new(vec![0.0, 0.3, 1.0], true).unwrap();
        assert_eq!(build_masks(&fisher, 0.0).unwrap().p1(), &[1, 1, 1]);
        assert_eq!(build_masks(&fisher, 1.01).unwrap().p2(), &[1, 1, 1]);
    }

    #[test]
    fn mask_rejects_unnormalized() {
        let fisher = FisherVector::new(vec![1.5], false).unwrap();
        assert!(matches!(
            build_masks(&fisher, 0.5).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn mix_pure_local_and_pure_global() {
        let lay = layout(&[2]);
        let local = pv(&lay, vec![1.0, 2.0]);
        let global = pv(&lay, vec![10.0, 20.0]);
        let all_local = MaskPair {
            p1: vec![1, 1],
            p2: vec![0, 0],
        };
        assert_eq!(
            mix_parameters(&local, &global, &all_local)
                .unwrap()
                .values(),
            local.values()
        );
        let all_global = MaskPair {
            p1: vec![0, 0],
            p2: vec![1, 1],
        };
        assert_eq!(
            mix_parameters(&local, &global, &all_global)
                .unwrap()
                .values(),
            global.values()
        );
        let mixed = MaskPair {
            p1: vec![1, 0],
            p2: vec![0, 1],
        };
        assert_eq!(
            mix_parameters(&local, &global, &mixed).unwrap().values(),
            &[1.0, 20.0]
        );
    }

    #[test]
    fn mix_rejects_layout_mismatch() {
        let local = pv(&layout(&[2]), vec![1.0, 2.0]);
        let global = pv(&layout(&[1, 1]), vec![1.0, 2.0]);
        let masks = MaskPair {
            p1: vec![1, 0],
            p2: vec![0, 1],
        };
        assert!(matches!(
            mix_parameters(&local, &global, &masks).unwrap_err(),
            Error::Contract(_)
        ));
    }

    proptest! {
        /// Complementarity, range, attained extremes, threshold monotonicity,
        /// and exact mixing selection on random multi-group vectors.
        #[test]
        fn vrm_invariants(
            lens in proptest::collection::vec(1usize..6, 2..=5),
            seed in 0u64..1000,
            lambda in 0.0f64..1.2,
        ) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let lay = layout(&lens);
            let n = lay.total_len();
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
            let fisher = FisherVector::new(raw, false).unwrap();
            let normalized = layerwise_normalize(fisher, &lay).unwrap();

            for group in lay.groups() {
                let span = &normalized.values()[group.offset..group.offset + group.len];
                prop_assert!(span.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let min = span.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = span.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                // Every group attains 0; non-degenerate groups attain 1 too.
                prop_assert_eq!(min, 0.0);
                if group.len > 1 && span.iter().any(|&v| v != span[0]) {
                    prop_assert_eq!(max, 1.0);
                }
            }

            let masks = build_masks(&normalized, lambda).unwrap();
            for m in 0..n {
                prop_assert_eq!(masks.p1()[m] + masks.p2()[m], 1);
            }

            // Raising lambda never grows the retained set.
            let stricter = build_masks(&normalized, lambda + 0.1).unwrap();
            for m in 0..n {
                prop_assert!(stricter.p1()[m] <= masks.p1()[m]);
            }

            let local = pv(&lay, (0..n).map(|_| rng.random::<f64>()).collect());
            let global = pv(&lay, (0..n).map(|_| rng.random::<f64>()).collect());
            let mixed = mix_parameters(&local, &global, &masks).unwrap();
            for m in 0..n {
                // Branch oracle: take local iff the normalized value clears
                // the threshold.
                let want = if normalized.values()[m] >= lambda {
                    local.values()[m]
                } else {
                    global.values()[m]
                };
                prop_assert_eq!(mixed.values()[m].to_bits(), want.to_bits());
            }
        }
    }
}
