//! Class-activation saliency maps.
//!
//! The map for class `c` weights each channel of the tapped activation by the
//! spatial mean of `d logit_c / d activation`, sums the weighted channels and
//! clips at zero:
//!
//! ```text
//! alpha_k = mean_ij d f(x)_c / d A_k[i, j]
//! phi     = relu(sum_k alpha_k * A_k)
//! ```
//!
//! `f(x)_c` is the pre-softmax logit; softmax saturation would otherwise
//! flatten the gradients. Because the channel weights come out of `backward`
//! as live graph nodes, the map stays differentiable with respect to both the
//! input and the parameters, which is what the saliency-consistency losses
//! train through. `detach_weights` freezes the weights instead, the cheaper
//! common approximation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io;
use crate::model::{CamGraph, CamModel};
use crate::tensor::{NodeId, Tape, Tensor};

/// Resolution a saliency map lives at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// The tapped activation's spatial extent.
    Activation,
    /// The input image's spatial extent.
    Input,
}

/// A detached per-pixel attribution map for one class. Entries are
/// nonnegative; after [`SaliencyMap::normalized`] they lie in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub class_index: usize,
    pub resolution: Resolution,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// `(m - min) / (max - min + 1e-8)`; a constant map normalizes to zero.
    pub fn normalized(&self) -> SaliencyMap {
        let d = self.values.data();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let den = max - min + NORM_EPS;
        let values = self.values.map(|v| (v - min) / den);
        SaliencyMap { values, ..*self }
    }

    /// Bilinear upsampling with corner alignment; downsampling is an error.
    pub fn upsampled(&self, height: usize, width: usize) -> Result<SaliencyMap> {
        let mut tape = Tape::new();
        let x = tape.constant(self.values.clone());
        let up = tape.upsample_bilinear(x, height, width)?;
        Ok(SaliencyMap {
            values: tape.value(up).clone(),
            class_index: self.class_index,
            resolution: Resolution::Input,
        })
    }

    /// Writes the map as an 8-bit grayscale image (`round(255 * v)` after
    /// normalization), PNG or PNM depending on the extension.
    pub fn write_heatmap(&self, path: &Path) -> Result<()> {
        let norm = self.normalized();
        let bytes: Vec<u8> = norm
            .values
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        image_io::save_gray(path, norm.width(), norm.height(), &bytes)
    }
}

const NORM_EPS: f64 = 1e-8;

/// Builds the saliency map for `class` as a live `(h, w)` node on `tape`,
/// reading the tapped activation of `graph`.
pub fn grad_cam_node(
    tape: &mut Tape,
    graph: &CamGraph,
    class: usize,
    detach_weights: bool,
) -> Result<NodeId> {
    let c = tape.value(graph.logits).len();
    if class >= c {
        return Err(Error::Config(format!("class {class} out of range for {c} classes")));
    }
    let shape = tape.shape(graph.last_conv).to_vec();
    let (h, w) = (shape[1], shape[2]);

    let logit = tape.select(graph.logits, class)?;
    let mut d_act = tape.backward(logit, &[graph.last_conv])?[0];
    if detach_weights {
        let frozen = tape.value(d_act).clone();
        d_act = tape.constant(frozen);
    }
    let alpha = tape.channel_mean(d_act)?;
    let alpha_full = tape.channel_broadcast(alpha, h, w)?;
    let weighted = tape.mul(alpha_full, graph.last_conv)?;
    let pre = tape.channel_sum(weighted)?;
    tape.relu(pre).map_err(Into::into)
}

/// Detached activation-resolution saliency map of `model` at `x` for `class`.
pub fn grad_cam<M: CamModel>(model: &M, x: &Tensor, class: usize) -> Result<SaliencyMap> {
    let mut tape = Tape::new();
    let graph = model.build_cam(&mut tape, x, None)?;
    let phi = grad_cam_node(&mut tape, &graph, class, true)?;
    Ok(SaliencyMap {
        values: tape.value(phi).clone(),
        class_index: class,
        resolution: Resolution::Activation,
    })
}

/// Normalization as a graph node: `(m - min) / (max - min + 1e-8)`.
pub fn normalize_node(tape: &mut Tape, m: NodeId) -> Result<NodeId> {
    let shape = tape.shape(m).to_vec();
    let min = tape.min(m)?;
    let max = tape.max(m)?;
    let min_b = tape.broadcast(min, &shape)?;
    let shifted = tape.sub(m, min_b)?;
    let range = tape.sub(max, min)?;
    let den = tape.add_scalar(range, NORM_EPS)?;
    let den_b = tape.broadcast(den, &shape)?;
    // den already carries the floor; avoid the div guard shifting it twice.
    let inv = {
        let one = tape.constant(Tensor::filled(&shape, 1.0));
        tape.div(one, den_b)?
    };
    tape.mul(shifted, inv).map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, finite_diff_gradient};
    use crate::model::{ProbGraph, ProbModel};

    /// Activation is the input itself; logits are `(s * sum A, -s * sum A)`.
    /// With `s = 1` the channel weight is exactly 1 and phi = relu(A).
    struct ToyHead {
        scale: f64,
    }

    impl ProbModel for ToyHead {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_shape(&self) -> [usize; 3] {
            [1, 2, 2]
        }
        fn build_probs(&self, tape: &mut Tape, x: &Tensor) -> crate::error::Result<ProbGraph> {
            let g = self.build_cam(tape, x, None)?;
            Ok(ProbGraph { x: g.x, logits: g.logits, probs: g.probs })
        }
    }

    impl CamModel for ToyHead {
        fn build_cam_with(
            &self,
            tape: &mut Tape,
            _params: &[NodeId],
            x: &Tensor,
            _dropout: Option<&Tensor>,
        ) -> crate::error::Result<CamGraph> {
            let xid = tape.leaf(x.clone(), true);
            let s = tape.sum(xid)?;
            let pos = tape.mul_scalar(s, self.scale)?;
            let neg = tape.mul_scalar(s, -self.scale)?;
            let pos2 = tape.reshape(pos, &[1])?;
            let neg2 = tape.reshape(neg, &[1])?;
            // Stack the two logits through a tiny linear map.
            let two = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
            let l0 = tape.broadcast(pos2, &[2])?;
            let l1 = tape.broadcast(neg2, &[2])?;
            let m0 = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
            let m1 = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
            let a = tape.mul(l0, m0)?;
            let b = tape.mul(l1, m1)?;
            let logits = tape.add(a, b)?;
            let _ = two;
            let probs = tape.softmax(logits)?;
            Ok(CamGraph { x: xid, last_conv: xid, logits, probs, params: vec![] })
        }
    }

    fn toy_input() -> Tensor {
        Tensor::new(vec![1, 2, 2], vec![0.5, 0.2, 0.8, 0.1]).unwrap()
    }

    #[test]
    fn linear_head_weight_is_one_and_map_is_relu_of_activation() {
        let map = grad_cam(&ToyHead { scale: 1.0 }, &toy_input(), 0).unwrap();
        assert_eq!(map.values.data(), toy_input().data());
    }

    #[test]
    fn negated_head_gives_all_zero_map() {
        // Class 1's logit is -sum(A); relu clips the negative combination.
        let map = grad_cam(&ToyHead { scale: 1.0 }, &toy_input(), 1).unwrap();
        assert_eq!(map.values.data(), &[0.0; 4]);
    }

    #[test]
    fn logit_independent_of_activation_gives_zero_map() {
        struct ConstHead;
        impl ProbModel for ConstHead {
            fn num_classes(&self) -> usize {
                2
            }
            fn input_shape(&self) -> [usize; 3] {
                [1, 2, 2]
            }
            fn build_probs(&self, tape: &mut Tape, x: &Tensor) -> crate::error::Result<ProbGraph> {
                let g = self.build_cam(tape, x, None)?;
                Ok(ProbGraph { x: g.x, logits: g.logits, probs: g.probs })
            }
        }
        impl CamModel for ConstHead {
            fn build_cam_with(
                &self,
                tape: &mut Tape,
                _params: &[NodeId],
                x: &Tensor,
                _dropout: Option<&Tensor>,
            ) -> crate::error::Result<CamGraph> {
                let xid = tape.leaf(x.clone(), true);
                let logits = tape.constant(Tensor::new(vec![2], vec![0.3, -0.2]).unwrap());
                let probs = tape.softmax(logits)?;
                Ok(CamGraph { x: xid, last_conv: xid, logits, probs, params: vec![] })
            }
        }
        let map = grad_cam(&ConstHead, &toy_input(), 0).unwrap();
        assert_eq!(map.values.data(), &[0.0; 4]);
    }

    #[test]
    fn class_out_of_range_is_an_error() {
        assert!(grad_cam(&ToyHead { scale: 1.0 }, &toy_input(), 2).is_err());
    }

    #[test]
    fn maps_are_nonnegative_and_scale_equivariant() {
        for seed in 0..8u64 {
            let mut rng = crate::rng::stream(seed, "cam-prop", &[]);
            use rand::Rng;
            // Ranges well above the normalization floor (1e-8) so the stated
            // 1e-9 invariance tolerance is meaningful.
            let mut data: Vec<f64> = (0..4)
                .map(|_| rng.gen_range(10.0..40.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect();
            data[0] = data[0].abs();
            let x = Tensor::new(vec![1, 2, 2], data).unwrap();
            let base = grad_cam(&ToyHead { scale: 1.0 }, &x, 0).unwrap();
            assert!(base.values.data().iter().all(|&v| v >= 0.0));

            // Scaling the logit branch by s > 0 scales the pre-relu map by s,
            // and the normalized map is invariant.
            let s = 3.7;
            let scaled = grad_cam(&ToyHead { scale: s }, &x, 0).unwrap();
            for (a, b) in base.values.data().iter().zip(scaled.values.data()) {
                assert!((a * s - b).abs() < 1e-9, "channel weight scales with the logit branch");
            }
            let (n1, n2) = (base.normalized(), scaled.normalized());
            for (a, b) in n1.values.data().iter().zip(n2.values.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let m = |v: Vec<f64>| SaliencyMap {
            values: Tensor::new(vec![1, v.len()], v).unwrap(),
            class_index: 0,
            resolution: Resolution::Activation,
        };
        let n = m(vec![0.0, 2.0, 4.0]).normalized();
        for (got, want) in n.values.data().iter().zip(&[0.0, 0.5, 1.0]) {
            assert!((got - want).abs() < 1e-7);
        }
        let c = m(vec![5.0, 5.0, 5.0]).normalized();
        assert_eq!(c.values.data(), &[0.0, 0.0, 0.0]);
        let idem = m(vec![0.0, 0.25, 1.0]).normalized();
        for (got, want) in idem.values.data().iter().zip(&[0.0, 0.25, 1.0]) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_node_matches_value_path() {
        let vals = vec![0.3, 1.7, 0.0, 0.9];
        let map = SaliencyMap {
            values: Tensor::new(vec![2, 2], vals.clone()).unwrap(),
            class_index: 0,
            resolution: Resolution::Activation,
        };
        let mut tape = Tape::new();
        let x = tape.constant(map.values.clone());
        let n = normalize_node(&mut tape, x).unwrap();
        let want = map.normalized();
        for (a, b) in tape.value(n).data().iter().zip(want.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let map = SaliencyMap {
            values: Tensor::filled(&[4, 4], 0.6),
            class_index: 0,
            resolution: Resolution::Activation,
        };
        let up = map.upsampled(32, 32).unwrap();
        assert_eq!(up.resolution, Resolution::Input);
        for v in up.values.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
        assert!(map.upsampled(2, 2).is_err());
    }

    #[test]
    fn cam_distance_gradient_matches_finite_differences() {
        // Two-parameter model: A = w1 * x, logit_0 = w2 * sum(A). The distance
        // ||phi(x) - phi(x')||_2 is differentiated with respect to (w1, w2)
        // through the live (non-detached) channel weights.
        let x1 = Tensor::new(vec![1, 2, 2], vec![0.5, 0.2, 0.8, 0.1]).unwrap();
        let x2 = Tensor::new(vec![1, 2, 2], vec![0.3, 0.6, 0.4, 0.7]).unwrap();

        let build = |tape: &mut Tape, theta: &[f64], x: &Tensor| -> NodeId {
            let w1 = tape.leaf(Tensor::scalar(theta[0]), true);
            let w2 = tape.leaf(Tensor::scalar(theta[1]), true);
            let xid = tape.constant(x.clone());
            let w1b = tape.broadcast(w1, &[1, 2, 2]).unwrap();
            let act = tape.mul(xid, w1b).unwrap();
            let s = tape.sum(act).unwrap();
            let logit = tape.mul(s, w2).unwrap();
            // grad-cam on the single logit
            let d_act = tape.backward(logit, &[act]).unwrap()[0];
            let alpha = tape.channel_mean(d_act).unwrap();
            let ab = tape.channel_broadcast(alpha, 2, 2).unwrap();
            let wsum = tape.mul(ab, act).unwrap();
            let pre = tape.channel_sum(wsum).unwrap();
            tape.relu(pre).unwrap()
        };

        let theta = [0.8, 1.3];
        let value = |t: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let p1 = build(&mut tape, t, &x1);
            let p2 = build(&mut tape, t, &x2);
            let d = tape.sub(p1, p2).unwrap();
            let n = tape.l2_norm(d).unwrap();
            tape.value(n).item()
        };
        let got = {
            let mut tape = Tape::new();
            // Rebuild with shared parameter leaves.
            let w1 = tape.leaf(Tensor::scalar(theta[0]), true);
            let w2 = tape.leaf(Tensor::scalar(theta[1]), true);
            let mut phi = |x: &Tensor| -> NodeId {
                let xid = tape.constant(x.clone());
                let w1b = tape.broadcast(w1, &[1, 2, 2]).unwrap();
                let act = tape.mul(xid, w1b).unwrap();
                let s = tape.sum(act).unwrap();
                let logit = tape.mul(s, w2).unwrap();
                let d_act = tape.backward(logit, &[act]).unwrap()[0];
                let alpha = tape.channel_mean(d_act).unwrap();
                let ab = tape.channel_broadcast(alpha, 2, 2).unwrap();
                let wsum = tape.mul(ab, act).unwrap();
                let pre = tape.channel_sum(wsum).unwrap();
                tape.relu(pre).unwrap()
            };
            let p1 = phi(&x1);
            let p2 = phi(&x2);
            let d = tape.sub(p1, p2).unwrap();
            let n = tape.l2_norm(d).unwrap();
            let g = tape.grad_values(n, &[w1, w2]).unwrap();
            vec![g[0].item(), g[1].item()]
        };
        let fd = finite_diff_gradient(value, &theta, 1e-5);
        assert_close(&got, &fd, 1e-3, "cam distance parameter gradient");
    }
}
