//! The desk-scale convolutional classifier and its checkpoint format.
//!
//! Architecture (valid convolutions, stride 1):
//!
//! ```text
//! (3, 32, 32) -> conv 3x3 (c1) + relu -> maxpool 2x2
//!             -> conv 3x3 (c2) + relu            <- "last_conv" tap
//!             -> avgpool 2x2 -> flatten -> dropout -> dense -> softmax
//! ```
//!
//! The post-relu activation of the second convolution is the tap that
//! class-activation maps read. Default widths are (8, 16); narrower widths are
//! supported so gradient checks can run against a model with only a couple of
//! hundred parameters.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{NodeId, Tape, Tensor};

/// Images are fixed at 3x32x32; loaders resize to this.
pub const INPUT_SHAPE: [usize; 3] = [3, 32, 32];

const MAGIC: &[u8; 8] = b"EGATCKP1";
const VERSION: u32 = 1;

/// A model forward pass recorded on a tape, without an activation tap.
pub struct ProbGraph {
    pub x: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// A forward pass that also exposes the tapped activation map and the
/// parameter leaves (in the model's parameter order).
pub struct CamGraph {
    pub x: NodeId,
    pub last_conv: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    pub params: Vec<NodeId>,
}

/// Anything that maps an image to class probabilities through the tape.
/// Implementations must be pure: the same input yields the same graph values.
pub trait ProbModel {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> [usize; 3];
    fn build_probs(&self, tape: &mut Tape, x: &Tensor) -> Result<ProbGraph>;

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let g = self.build_probs(&mut tape, x)?;
        Ok(tape.value(g.probs).data().to_vec())
    }
}

/// A probability model with a named convolutional tap for saliency maps.
pub trait CamModel: ProbModel {
    /// Binds the trainable parameters as leaves on `tape`, in a stable order.
    /// Several forwards on the same tape can share one binding so a single
    /// backward pass collects the full parameter gradient.
    fn bind_params(&self, _tape: &mut Tape) -> Vec<NodeId> {
        Vec::new()
    }

    /// Builds the tapped graph on top of an existing parameter binding.
    /// `dropout` (a mask of the flattened feature length, already
    /// inverse-scaled) is applied before the dense layer; `None` means
    /// evaluation mode.
    fn build_cam_with(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        x: &Tensor,
        dropout: Option<&Tensor>,
    ) -> Result<CamGraph>;

    fn build_cam(&self, tape: &mut Tape, x: &Tensor, dropout: Option<&Tensor>) -> Result<CamGraph> {
        let params = self.bind_params(tape);
        self.build_cam_with(tape, &params, x, dropout)
    }

    /// Draws a dropout mask for one training forward, if the model uses one.
    fn sample_dropout(&self, _rng: &mut ChaCha8Rng) -> Option<Tensor> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvClassifier {
    num_classes: usize,
    channels: (usize, usize),
    dropout_rate: f64,
    params: Vec<Param>,
}

impl ConvClassifier {
    pub const DEFAULT_CHANNELS: (usize, usize) = (8, 16);
    pub const DEFAULT_DROPOUT: f64 = 0.1;

    /// He-uniform initialized model with the default widths.
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        Self::with_shape(num_classes, Self::DEFAULT_CHANNELS, Self::DEFAULT_DROPOUT, seed)
    }

    pub fn with_shape(
        num_classes: usize,
        channels: (usize, usize),
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if channels.0 == 0 || channels.1 == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let (c1, c2) = channels;
        let feat = Self::feature_len_for(c2);
        let mut rng = rng::stream(seed, "init", &[]);
        let he = |rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize| {
            let limit = (6.0 / fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            Tensor::new(shape, data).expect("init shape")
        };
        let params = vec![
            Param { name: "conv1.weight".into(), value: he(&mut rng, vec![c1, 3, 3, 3], 3 * 9) },
            Param { name: "conv1.bias".into(), value: Tensor::zeros(&[c1]) },
            Param { name: "conv2.weight".into(), value: he(&mut rng, vec![c2, c1, 3, 3], c1 * 9) },
            Param { name: "conv2.bias".into(), value: Tensor::zeros(&[c2]) },
            Param { name: "fc.weight".into(), value: he(&mut rng, vec![num_classes, feat], feat) },
            Param { name: "fc.bias".into(), value: Tensor::zeros(&[num_classes]) },
        ];
        Ok(ConvClassifier { num_classes, channels, dropout_rate, params })
    }

    fn feature_len_for(c2: usize) -> usize {
        // 32 -> conv3 -> 30 -> pool -> 15 -> conv3 -> 13 -> avgpool -> 6
        c2 * 6 * 6
    }

    pub fn feature_len(&self) -> usize {
        Self::feature_len_for(self.channels.1)
    }

    pub fn channels(&self) -> (usize, usize) {
        self.channels
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) {
        self.dropout_rate = rate;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_param_values(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "parameter shape changed");
            p.value = v.clone();
        }
    }

    /// Flat view of all parameters, used by finite-difference harnesses.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value = Tensor::new(p.value.shape().to_vec(), flat[off..off + n].to_vec()).unwrap();
            off += n;
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != INPUT_SHAPE {
            return Err(Error::Config(format!(
                "expected input shape {:?}, got {:?}",
                INPUT_SHAPE,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Parameters become leaves with
    /// gradients enabled, in the same order as [`Self::params`].
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, dropout: Option<&Tensor>) -> Result<CamGraph> {
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), true))
            .collect();
        self.check_input(x)?;
        let xid = tape.leaf(x.clone(), true);
        self.forward_from(tape, &params, xid, dropout)
    }

    /// As [`Self::forward`] but reusing an existing parameter binding and
    /// input node, so callers can differentiate with respect to either.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        xid: NodeId,
        dropout: Option<&Tensor>,
    ) -> Result<CamGraph> {
        let p = params;
        assert_eq!(p.len(), self.params.len(), "parameter binding mismatch");
        let (w1, b1, w2, b2, fw, fb) = (p[0], p[1], p[2], p[3], p[4], p[5]);

        let c1 = tape.conv2d(xid, w1)?;
        let c1b = {
            let s = tape.shape(c1).to_vec();
            let bb = tape.channel_broadcast(b1, s[1], s[2])?;
            tape.add(c1, bb)?
        };
        let a1 = tape.relu(c1b)?;
        let p1 = tape.maxpool2(a1)?;

        let c2 = tape.conv2d(p1, w2)?;
        let c2b = {
            let s = tape.shape(c2).to_vec();
            let bb = tape.channel_broadcast(b2, s[1], s[2])?;
            tape.add(c2, bb)?
        };
        let last_conv = tape.relu(c2b)?;

        let pooled = tape.avgpool2(last_conv)?;
        let mut flat = tape.reshape(pooled, &[self.feature_len()])?;
        if let Some(mask) = dropout {
            let m = tape.constant(mask.clone());
            flat = tape.mul(flat, m)?;
        }
        let wx = tape.matvec(fw, flat, false)?;
        let logits = tape.add(wx, fb)?;
        let probs = tape.softmax(logits)?;

        Ok(CamGraph { x: xid, last_conv, logits, probs, params: p.to_vec() })
    }
}

impl ProbModel for ConvClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> [usize; 3] {
        INPUT_SHAPE
    }

    fn build_probs(&self, tape: &mut Tape, x: &Tensor) -> Result<ProbGraph> {
        let g = self.forward(tape, x, None)?;
        Ok(ProbGraph { x: g.x, logits: g.logits, probs: g.probs })
    }
}

impl CamModel for ConvClassifier {
    fn bind_params(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect()
    }

    fn build_cam_with(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        x: &Tensor,
        dropout: Option<&Tensor>,
    ) -> Result<CamGraph> {
        self.check_input(x)?;
        let xid = tape.leaf(x.clone(), true);
        self.forward_from(tape, params, xid, dropout)
    }

    fn sample_dropout(&self, rng: &mut ChaCha8Rng) -> Option<Tensor> {
        if self.dropout_rate == 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        let data = (0..self.feature_len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        Some(Tensor::new(vec![self.feature_len()], data).unwrap())
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────

/// A serializable training snapshot. Round-trips losslessly: the binary
/// format stores raw f64 bits and a trailing SHA-256 of the payload.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ConvClassifier,
    pub step: u64,
    pub val_accuracy: f64,
    pub config_hash: [u8; 32],
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.model.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.model.channels.0 as u32).to_le_bytes());
        out.extend_from_slice(&(self.model.channels.1 as u32).to_le_bytes());
        out.extend_from_slice(&self.model.dropout_rate.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.val_accuracy.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in &self.model.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and additionally checks the class count against `expected`.
    pub fn load_expecting(path: &Path, expected_classes: usize) -> Result<Checkpoint> {
        let ckpt = Self::load(path)?;
        if ckpt.model.num_classes != expected_classes {
            return Err(Error::ClassCountMismatch {
                checkpoint: ckpt.model.num_classes,
                expected: expected_classes,
            });
        }
        Ok(ckpt)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let fail = |m: &str| Error::format(path, m);
        if bytes.len() < MAGIC.len() + 32 {
            return Err(fail("file too short for a checkpoint"));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::ChecksumMismatch { path: path.to_path_buf() });
        }
        let mut cur = std::io::Cursor::new(payload);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| fail("truncated header"))?;
        if &magic != MAGIC {
            return Err(fail("bad magic bytes"));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        let mut read_u32 = |cur: &mut std::io::Cursor<&[u8]>| -> Result<u32> {
            cur.read_exact(&mut u32buf).map_err(|_| fail("truncated field"))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let num_classes = read_u32(&mut cur)? as usize;
        let c1 = read_u32(&mut cur)? as usize;
        let c2 = read_u32(&mut cur)? as usize;
        cur.read_exact(&mut u64buf).map_err(|_| fail("truncated field"))?;
        let dropout_rate = f64::from_le_bytes(u64buf);
        cur.read_exact(&mut u64buf).map_err(|_| fail("truncated field"))?;
        let step = u64::from_le_bytes(u64buf);
        cur.read_exact(&mut u64buf).map_err(|_| fail("truncated field"))?;
        let val_accuracy = f64::from_le_bytes(u64buf);
        let mut config_hash = [0u8; 32];
        cur.read_exact(&mut config_hash).map_err(|_| fail("truncated field"))?;
        let n_params = read_u32(&mut cur)? as usize;

        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let mut u16buf = [0u8; 2];
            cur.read_exact(&mut u16buf).map_err(|_| fail("truncated tensor table"))?;
            let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
            cur.read_exact(&mut name).map_err(|_| fail("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| fail("tensor name not utf-8"))?;
            let mut ndim = [0u8; 1];
            cur.read_exact(&mut ndim).map_err(|_| fail("truncated tensor rank"))?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                cur.read_exact(&mut u32buf).map_err(|_| fail("truncated shape"))?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                cur.read_exact(&mut u64buf).map_err(|_| fail("truncated tensor data"))?;
                data.push(f64::from_le_bytes(u64buf));
            }
            let value = Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))?;
            params.push(Param { name, value });
        }

        let model = ConvClassifier { num_classes, channels: (c1, c2), dropout_rate, params };
        Ok(Checkpoint { model, step, val_accuracy, config_hash })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_image(seed: u64) -> Tensor {
        let mut rng = stream(seed, "test-image", &[]);
        let data = (0..3 * 32 * 32).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(vec![3, 32, 32], data).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = ConvClassifier::new(4, 7).unwrap();
        let p = model.predict(&random_image(0)).unwrap();
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let mut model = ConvClassifier::new(5, 7).unwrap();
        let zeros: Vec<Tensor> = model.param_values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        model.set_param_values(&zeros);
        let p = model.predict(&random_image(1)).unwrap();
        for v in &p {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn tap_shape_is_at_least_4x4() {
        let model = ConvClassifier::new(3, 7).unwrap();
        let mut tape = Tape::new();
        let g = model.forward(&mut tape, &random_image(2), None).unwrap();
        let s = tape.shape(g.last_conv).to_vec();
        assert_eq!(s, vec![16, 13, 13]);
        assert!(s[1] >= 4 && s[2] >= 4);
    }

    #[test]
    fn predict_is_pure_and_respects_batch_permutation() {
        let model = ConvClassifier::new(3, 9).unwrap();
        let imgs: Vec<Tensor> = (0..4).map(random_image).collect();
        let first: Vec<Vec<f64>> = imgs.iter().map(|x| model.predict(x).unwrap()).collect();
        let second: Vec<Vec<f64>> = imgs.iter().map(|x| model.predict(x).unwrap()).collect();
        assert_eq!(first, second);
        // Reversing the batch reverses the outputs and changes nothing else.
        let rev: Vec<Vec<f64>> = imgs.iter().rev().map(|x| model.predict(x).unwrap()).collect();
        let mut expect = first.clone();
        expect.reverse();
        assert_eq!(rev, expect);
    }

    #[test]
    fn golden_probabilities_fixed_seed() {
        // Frozen from this implementation's first run (seed 42, image seed 3);
        // regenerate by printing `model.predict(&random_image(3))`.
        let model = ConvClassifier::new(3, 42).unwrap();
        let p = model.predict(&random_image(3)).unwrap();
        let golden = [
            0.15698612289447916,
            0.3825801913231617,
            0.4604336857823591,
        ];
        for (got, want) in p.iter().zip(&golden) {
            assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ConvClassifier::new(3, 11).unwrap();
        let ckpt = Checkpoint { model, step: 4000, val_accuracy: 0.97, config_hash: [7u8; 32] };
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 4000);
        assert_eq!(loaded.val_accuracy, 0.97);
        assert_eq!(loaded.config_hash, [7u8; 32]);
        for seed in 0..10 {
            let x = random_image(seed);
            let a = ckpt.model.predict(&x).unwrap();
            let b = loaded.model.predict(&x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption_and_class_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ConvClassifier::new(3, 11).unwrap();
        let ckpt = Checkpoint { model, step: 1, val_accuracy: 0.5, config_hash: [0u8; 32] };
        ckpt.save(&path).unwrap();

        assert!(Checkpoint::load_expecting(&path, 3).is_ok());
        assert!(matches!(
            Checkpoint::load_expecting(&path, 4),
            Err(Error::ClassCountMismatch { checkpoint: 3, expected: 4 })
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn dropout_mask_is_inverse_scaled() {
        let model = ConvClassifier::new(3, 5).unwrap();
        let mut rng = stream(5, "dropout", &[]);
        let mask = model.sample_dropout(&mut rng).unwrap();
        let scale = 1.0 / 0.9;
        assert!(mask.data().iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
        assert!(mask.data().iter().any(|&v| v == 0.0));
    }
}
