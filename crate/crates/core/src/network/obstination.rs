use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, Layer, Network, NetworkError};
use crate::tensor::{Scalar, Tensor};

/// Rear-unfreezing plan for `k` degrees of freedom out of `n` units: the
/// first `n - k` units stay frozen, the last `k` train, and the classifier is
/// always re-initialized and trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObstinationPlan {
    pub k: usize,
    pub n: usize,
}

impl ObstinationPlan {
    pub fn new(k: usize, n: usize) -> Result<Self, NetworkError> {
        if k > n {
            return Err(NetworkError::DegreesOfFreedom { k, n });
        }
        Ok(ObstinationPlan { k, n })
    }

    pub fn frozen_units(&self) -> std::ops::Range<usize> {
        0..self.n - self.k
    }

    pub fn is_unit_frozen(&self, unit: usize) -> bool {
        unit < self.n - self.k
    }

    pub fn reinitializes_classifier(&self) -> bool {
        true
    }
}

/// Freezes the first `N - k` units of `net` (weights, biases, batch-norm
/// gamma/beta) and replaces the classifier with a fresh draw from
/// `reinit_seed`, sized for `num_classes`.
pub fn apply_obstination<S: Scalar>(
    net: &mut Network<S>,
    k: usize,
    num_classes: usize,
    reinit_seed: u64,
) -> Result<ObstinationPlan, NetworkError> {
    let plan = ObstinationPlan::new(k, net.freezable_count())?;
    if num_classes == 0 {
        return Err(NetworkError::InvalidSpec("num_classes must be positive".into()));
    }
    net.set_frozen_prefix(plan.n - plan.k);
    let ci = net.classifier_index();
    let in_features = match &net.layers()[ci] {
        Layer::Classifier { weights, .. } => weights.shape()[0],
        _ => unreachable!("last layer is the classifier"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(reinit_seed);
    net.layers_mut()[ci] = Layer::Classifier {
        weights: glorot(vec![in_features, num_classes], in_features, num_classes, &mut rng),
        bias: Tensor::zeros(vec![num_classes]),
    };
    net.spec_mut().num_classes = num_classes;
    net.check_freeze_invariants()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchId, NetworkSpec};

    fn base() -> Network<f64> {
        Network::build(NetworkSpec::preset(ArchId::Char3conv, 10, [1, 28, 28]), 1).unwrap()
    }

    fn frozen_convs(net: &Network<f64>) -> Vec<bool> {
        net.layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
            .map(|(i, _)| net.is_frozen(i))
            .collect()
    }

    #[test]
    fn all_frozen_at_zero_freedom() {
        let mut net = base();
        apply_obstination(&mut net, 0, 10, 99).unwrap();
        assert_eq!(frozen_convs(&net), vec![true, true, true]);
        assert!(!net.is_frozen(net.classifier_index()));
    }

    #[test]
    fn nothing_frozen_at_full_freedom_but_classifier_reset() {
        let original = base();
        let mut net = original.clone();
        apply_obstination(&mut net, 3, 10, 99).unwrap();
        assert_eq!(frozen_convs(&net), vec![false, false, false]);
        let ci = net.classifier_index();
        assert_ne!(net.layers()[ci], original.layers()[ci]);
    }

    #[test]
    fn one_degree_unfreezes_last_conv() {
        let mut net = base();
        apply_obstination(&mut net, 1, 10, 99).unwrap();
        assert_eq!(frozen_convs(&net), vec![true, true, false]);
    }

    #[test]
    fn classifier_resized_to_retrain_classes() {
        let mut net = base();
        apply_obstination(&mut net, 2, 7, 99).unwrap();
        assert_eq!(net.num_classes(), 7);
        let ci = net.classifier_index();
        assert_eq!(net.layers()[ci].params()[0].1.shape(), &[450, 7]);
    }

    #[test]
    fn out_of_range_freedom() {
        let mut net = base();
        assert!(matches!(
            apply_obstination(&mut net, 4, 10, 99),
            Err(NetworkError::DegreesOfFreedom { k: 4, n: 3 })
        ));
    }

    #[test]
    fn batchnorm_follows_its_unit() {
        let mut net = Network::<f64>::build(NetworkSpec::preset(ArchId::Img5conv, 10, [3, 32, 32]), 1).unwrap();
        apply_obstination(&mut net, 1, 10, 5).unwrap();
        // the dense unit (conv, bn, relu, ..., dense, bn) is the last one
        let spec = net.spec().clone();
        for (i, layer) in spec.layers.iter().enumerate() {
            if layer.has_params() && i != net.classifier_index() {
                let unit = net.units()[i].unwrap();
                assert_eq!(net.is_frozen(i), unit < 5, "layer {i}");
            }
        }
    }
}
