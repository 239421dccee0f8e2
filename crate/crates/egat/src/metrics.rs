//! Robustness and explanation-quality metrics, plus the empirical estimators
//! behind the stability bound audit.
//!
//! Comprehensiveness and Sufficiency are exact probability differences
//! between two plain forward passes (occluding the top-k salient pixels,
//! resp. keeping only them), so an independent recomputation reproduces them
//! to machine precision. The bound audit compares, for pairs that share
//! object pixels and differ only in background,
//!
//! ```text
//! || f(x_test) - f(x_train) ||  <=  ||grad_bg f(x_train)|| * ||dx_bg||
//!                                   + kappa_phi / 2 * ||dx_bg||^2
//! ```
//!
//! with the background gradient computed by the tape and masked to background
//! coordinates, and `kappa_phi` an empirical Lipschitz estimate of the
//! gradient field (a max over sampled pairs, i.e. a lower bound on the true
//! constant — callers inflate it with a safety factor).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::{LabeledImage, SyntheticSample};
use crate::error::{Error, Result};
use crate::explain::grad_cam;
use crate::model::{CamModel, ProbModel};
use crate::rng;
use crate::tensor::{Tape, Tensor};

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub clean_correct: usize,
    pub adv_correct: usize,
}

/// One evaluation report; serialized as JSON for machines and rendered as an
/// aligned table for humans.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clean_accuracy: f64,
    pub adversarial_accuracy: Option<f64>,
    pub comprehensiveness: Option<f64>,
    pub sufficiency: Option<f64>,
    pub k_fraction: Option<f64>,
    pub attack: Option<AttackConfig>,
    pub ood: bool,
    pub samples: usize,
    pub per_class: Vec<ClassStats>,
}

impl MetricsReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let fmt_opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "-".into(),
        };
        out.push_str(&format!(
            "samples {:>6}   ood {}\n",
            self.samples,
            if self.ood { "yes" } else { "no" }
        ));
        if let Some(a) = &self.attack {
            out.push_str(&format!(
                "attack  {:>6}   eps {:.4}   steps {}\n",
                a.kind.name(),
                a.epsilon,
                a.effective_steps()
            ));
        }
        out.push_str(&format!("cAcc    {:>6.4}\n", self.clean_accuracy));
        out.push_str(&format!("aAcc    {:>6}\n", fmt_opt(self.adversarial_accuracy)));
        out.push_str(&format!(
            "Comp    {:>6}   Suff {:>6}   k {}\n",
            fmt_opt(self.comprehensiveness),
            fmt_opt(self.sufficiency),
            fmt_opt(self.k_fraction),
        ));
        out.push_str("class  count  cAcc    aAcc\n");
        for c in &self.per_class {
            let clean = c.clean_correct as f64 / c.count.max(1) as f64;
            let adv = if self.adversarial_accuracy.is_some() {
                format!("{:.4}", c.adv_correct as f64 / c.count.max(1) as f64)
            } else {
                "-".into()
            };
            out.push_str(&format!("{:>5}  {:>5}  {:.4}  {}\n", c.class, c.count, clean, adv));
        }
        out
    }
}

/// Fraction of argmax-correct predictions; on attacked inputs when `attack`
/// is given.
pub fn accuracy<M: ProbModel + Sync>(
    model: &M,
    samples: &[LabeledImage],
    attack: Option<&AttackConfig>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let inputs: Vec<Tensor> = match attack {
        Some(cfg) => attacks::attack_batch(model, samples, cfg)?,
        None => samples.iter().map(|s| s.image.clone()).collect(),
    };
    let correct: Result<Vec<bool>> = inputs
        .par_iter()
        .zip(samples)
        .map(|(x, s)| Ok(argmax(&model.predict(x)?) == s.label))
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64)
}

/// What occluded pixels are replaced with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemovalBaseline {
    #[default]
    Zero,
    /// Per-channel mean of the image itself.
    ChannelMean,
}

fn top_k_pixels(saliency: &Tensor, k_fraction: f64) -> Vec<usize> {
    let hw = saliency.len();
    let k = ((k_fraction * hw as f64).round() as usize).min(hw);
    let mut order: Vec<usize> = (0..hw).collect();
    // Ties break toward the smaller row-major index.
    order.sort_by(|&a, &b| {
        saliency.data()[b]
            .partial_cmp(&saliency.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn occlude(x: &Tensor, pixels: &[usize], keep_selected: bool, baseline: RemovalBaseline) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut selected = vec![false; hw];
    for &p in pixels {
        selected[p] = true;
    }
    let fill: Vec<f64> = match baseline {
        RemovalBaseline::Zero => vec![0.0; c],
        RemovalBaseline::ChannelMean => (0..c)
            .map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect(),
    };
    let mut out = x.clone();
    for ch in 0..c {
        for p in 0..hw {
            let replace = if keep_selected { !selected[p] } else { selected[p] };
            if replace {
                out.data_mut()[ch * hw + p] = fill[ch];
            }
        }
    }
    out
}

fn saliency_ranking<M: CamModel>(model: &M, x: &Tensor, y: usize) -> Result<Tensor> {
    let map = grad_cam(model, x, y)?;
    let up = map.upsampled(x.shape()[1], x.shape()[2])?;
    Ok(up.values)
}

/// `f_y(x) - f_y(x with its top-k salient pixels removed)`. Exact difference
/// of two forward passes.
pub fn comprehensiveness<M: CamModel>(
    model: &M,
    x: &Tensor,
    y: usize,
    k_fraction: f64,
    baseline: RemovalBaseline,
) -> Result<f64> {
    occlusion_delta(model, x, y, k_fraction, baseline, false)
}

/// `f_y(x) - f_y(only the top-k salient pixels kept)`. Keeping every pixel
/// reproduces `x` bit for bit, so the delta is exactly zero.
pub fn sufficiency<M: CamModel>(
    model: &M,
    x: &Tensor,
    y: usize,
    k_fraction: f64,
    baseline: RemovalBaseline,
) -> Result<f64> {
    occlusion_delta(model, x, y, k_fraction, baseline, true)
}

fn occlusion_delta<M: CamModel>(
    model: &M,
    x: &Tensor,
    y: usize,
    k_fraction: f64,
    baseline: RemovalBaseline,
    keep_selected: bool,
) -> Result<f64> {
    if !(0.0 < k_fraction && k_fraction <= 1.0) {
        return Err(Error::Config(format!("k_fraction must be in (0, 1], got {k_fraction}")));
    }
    let ranking = saliency_ranking(model, x, y)?;
    let pixels = top_k_pixels(&ranking, k_fraction);
    let occluded = occlude(x, &pixels, keep_selected, baseline);
    let p_clean = model.predict(x)?[y];
    let p_occ = model.predict(&occluded)?[y];
    Ok(p_clean - p_occ)
}

/// Full evaluation used by the reporting pipeline.
pub fn evaluate<M: CamModel + Sync>(
    model: &M,
    samples: &[LabeledImage],
    attack: Option<&AttackConfig>,
    faithfulness_k: Option<f64>,
    baseline: RemovalBaseline,
    ood: bool,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let adv_inputs: Option<Vec<Tensor>> = match attack {
        Some(cfg) => Some(attacks::attack_batch(model, samples, cfg)?),
        None => None,
    };

    let rows: Result<Vec<(bool, Option<bool>)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let clean = argmax(&model.predict(&s.image)?) == s.label;
            let adv = match &adv_inputs {
                Some(advs) => Some(argmax(&model.predict(&advs[i])?) == s.label),
                None => None,
            };
            Ok((clean, adv))
        })
        .collect();
    let rows = rows?;

    let num_classes = model.num_classes();
    let mut per_class: Vec<ClassStats> = (0..num_classes)
        .map(|c| ClassStats { class: c, ..Default::default() })
        .collect();
    let mut clean_total = 0usize;
    let mut adv_total = 0usize;
    for (s, (clean, adv)) in samples.iter().zip(&rows) {
        let slot = &mut per_class[s.label];
        slot.count += 1;
        if *clean {
            slot.clean_correct += 1;
            clean_total += 1;
        }
        if adv == &Some(true) {
            slot.adv_correct += 1;
            adv_total += 1;
        }
    }

    let (comp, suff) = match faithfulness_k {
        Some(k) => {
            let deltas: Result<Vec<(f64, f64)>> = samples
                .par_iter()
                .map(|s| {
                    Ok((
                        comprehensiveness(model, &s.image, s.label, k, baseline)?,
                        sufficiency(model, &s.image, s.label, k, baseline)?,
                    ))
                })
                .collect();
            let deltas = deltas?;
            let n = deltas.len() as f64;
            (
                Some(deltas.iter().map(|d| d.0).sum::<f64>() / n),
                Some(deltas.iter().map(|d| d.1).sum::<f64>() / n),
            )
        }
        None => (None, None),
    };

    Ok(MetricsReport {
        clean_accuracy: clean_total as f64 / samples.len() as f64,
        adversarial_accuracy: attack.map(|_| adv_total as f64 / samples.len() as f64),
        comprehensiveness: comp,
        sufficiency: suff,
        k_fraction: faithfulness_k,
        attack: attack.cloned(),
        ood,
        samples: samples.len(),
        per_class,
    })
}

// ── empirical constants ─────────────────────────────────────────────────

/// Max over sampled pairs of `||g(x) - g(x')|| / ||x - x'||`. Pairs alternate
/// between (point, nearby perturbation) and (point, other point); zero
///-distance pairs are skipped. The estimate never decreases as `pairs` grows
/// for a fixed seed (the sampling sequence is a prefix chain).
pub fn estimate_lipschitz(
    f: impl Fn(&Tensor) -> Result<Vec<f64>> + Sync,
    sampler: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Tensor + Sync,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::Config("need at least one pair".into()));
    }
    let ratios: Result<Vec<Option<f64>>> = (0..pairs)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng::stream(seed, "lipschitz", &[p as u64]);
            let a = sampler(&mut rng);
            let b = if p % 2 == 1 {
                // Small perturbation around a.
                let scale = 1e-3;
                let data = a
                    .data()
                    .iter()
                    .map(|&v| v + scale * (rand::Rng::gen::<f64>(&mut rng) - 0.5))
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else {
                sampler(&mut rng)
            };
            let dist = {
                let d2: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                d2.sqrt()
            };
            if dist < 1e-12 {
                return Ok(None);
            }
            let fa = f(&a)?;
            let fb = f(&b)?;
            let fd2: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum();
            Ok(Some(fd2.sqrt() / dist))
        })
        .collect();
    let ratios = ratios?;
    let valid: Vec<f64> = ratios.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::Config("all sampled pairs were degenerate".into()));
    }
    Ok(valid.into_iter().fold(0.0, f64::max))
}

/// Gradient of the class-`y` output with respect to the input, flattened.
pub fn input_gradient_of_class<M: ProbModel>(model: &M, x: &Tensor, y: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let g = model.build_probs(&mut tape, x)?;
    let py = tape.select(g.probs, y)?;
    let grad = tape.grad_values(py, &[g.x])?;
    Ok(grad[0].data().to_vec())
}

/// Loose analytic ceiling on the network's Lipschitz constant: the product of
/// per-layer operator-norm bounds (conv: Frobenius times sqrt(kh*kw); pools,
/// relu and softmax at most 1; dense: Frobenius).
pub fn lipschitz_ceiling(model: &crate::model::ConvClassifier) -> f64 {
    let frob = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let params = model.params();
    let conv1 = frob(&params[0].value) * 3.0;
    let conv2 = frob(&params[2].value) * 3.0;
    let dense = frob(&params[4].value);
    conv1 * conv2 * dense
}

// ── stability-bound audit ───────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairAudit {
    pub index: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub bg_shift_norm: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub kappa_f: f64,
    pub kappa_phi: f64,
    pub kappa_bg: f64,
    pub g_max: f64,
    pub sample_pairs: usize,
    pub audits: Vec<PairAudit>,
    pub satisfaction_rate: f64,
}

/// Checks the background-shift prediction bound on pairs that share object
/// pixels. `kappa_phi` is the (safety-inflated) smoothness estimate for the
/// true-class gradient field.
pub fn lemma1_check<M: ProbModel + Sync>(
    model: &M,
    pairs: &[(SyntheticSample, SyntheticSample)],
    kappa_phi: f64,
) -> Result<Vec<PairAudit>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(idx, (train, test))| {
            if train.object_mask != test.object_mask {
                return Err(Error::Config(format!(
                    "pair {idx}: object masks differ; pairs must share object pixels"
                )));
            }
            if train.label != test.label {
                return Err(Error::Config(format!("pair {idx}: labels differ")));
            }
            let p_train = model.predict(&train.image)?;
            let p_test = model.predict(&test.image)?;
            let lhs: f64 = p_train
                .iter()
                .zip(&p_test)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();

            let grad = input_gradient_of_class(model, &train.image, train.label)?;
            let hw = train.object_mask.len();
            let channels = train.image.len() / hw;
            let mut grad_bg_sq = 0.0;
            let mut shift_sq = 0.0;
            for c in 0..channels {
                for p in 0..hw {
                    if !train.object_mask[p] {
                        let i = c * hw + p;
                        grad_bg_sq += grad[i] * grad[i];
                        let d = test.image.data()[i] - train.image.data()[i];
                        shift_sq += d * d;
                    }
                }
            }
            let bg_shift_norm = shift_sq.sqrt();
            let rhs = grad_bg_sq.sqrt() * bg_shift_norm + 0.5 * kappa_phi * shift_sq;
            Ok(PairAudit {
                index: idx,
                lhs,
                rhs,
                bg_shift_norm,
                satisfied: lhs <= rhs + 1e-12,
            })
        })
        .collect()
}

/// Measurable ingredients of the generalization bound, evaluated with no
/// tightness claim: `bound = 2 (kappa_f + alpha kappa_phi / G) sqrt(d/n)
/// + sqrt(ln(1/delta) / (2n))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoremReport {
    pub kappa_f: f64,
    pub kappa_phi: f64,
    pub g_max: f64,
    pub alpha: f64,
    pub input_dim: usize,
    pub sample_count: usize,
    pub delta: f64,
    pub empirical_adv_risk: f64,
    pub rademacher_term: f64,
    pub deviation_term: f64,
    pub bound: f64,
}

impl TheoremReport {
    pub fn evaluate(
        kappa_f: f64,
        kappa_phi: f64,
        g_max: f64,
        alpha: f64,
        input_dim: usize,
        sample_count: usize,
        delta: f64,
        empirical_adv_risk: f64,
    ) -> TheoremReport {
        let n = sample_count as f64;
        let lipschitz = kappa_f + alpha * kappa_phi / g_max.max(1e-12);
        let rademacher_term = lipschitz * (input_dim as f64).sqrt() / n.sqrt();
        let deviation_term = ((1.0 / delta).ln() / (2.0 * n)).sqrt();
        TheoremReport {
            kappa_f,
            kappa_phi,
            g_max,
            alpha,
            input_dim,
            sample_count,
            delta,
            empirical_adv_risk,
            rademacher_term,
            deviation_term,
            bound: 2.0 * rademacher_term + deviation_term,
        }
    }
}

/// Empirical adversarial risk under the 0-1 loss plus the normalized
/// gradient-field shift term, with the inner maximization approximated by the
/// configured attack.
pub fn empirical_adv_risk<M: ProbModel + Sync>(
    model: &M,
    samples: &[LabeledImage],
    attack: &AttackConfig,
    alpha: f64,
    g_max: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let advs = attacks::attack_batch(model, samples, attack)?;
    let terms: Result<Vec<f64>> = samples
        .par_iter()
        .zip(&advs)
        .map(|(s, adv)| {
            let zero_one = if argmax(&model.predict(adv)?) == s.label { 0.0 } else { 1.0 };
            let g_clean = input_gradient_of_class(model, &s.image, s.label)?;
            let g_adv = input_gradient_of_class(model, adv, s.label)?;
            let shift: f64 = g_clean
                .iter()
                .zip(&g_adv)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok(zero_one + alpha * shift / g_max.max(1e-12))
        })
        .collect();
    let terms = terms?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Domain};
    use crate::model::{CamGraph, ConvClassifier, ProbGraph};
    use crate::rng::stream;
    use crate::tensor::NodeId;
    use rand::Rng;

    /// Separates disks (class 0) from squares (class 1) by the fill ratio of
    /// the bright region's bounding box; perfect on generated glyphs by
    /// construction (a rasterized disk fills ~78% of its box, a square 100%).
    struct ShapeOracle;

    impl ProbModel for ShapeOracle {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_shape(&self) -> [usize; 3] {
            [3, 32, 32]
        }
        fn build_probs(&self, tape: &mut Tape, x: &Tensor) -> Result<ProbGraph> {
            let hw = 32 * 32;
            let bright: Vec<usize> = (0..hw)
                .filter(|&p| {
                    0.299 * x.data()[p] + 0.587 * x.data()[hw + p] + 0.114 * x.data()[2 * hw + p]
                        > 0.4
                })
                .collect();
            let score = if bright.is_empty() {
                0.0
            } else {
                let (mut i0, mut i1, mut j0, mut j1) = (usize::MAX, 0, usize::MAX, 0);
                for &p in &bright {
                    let (i, j) = (p / 32, p % 32);
                    i0 = i0.min(i);
                    i1 = i1.max(i);
                    j0 = j0.min(j);
                    j1 = j1.max(j);
                }
                let area = (i1 - i0 + 1) * (j1 - j0 + 1);
                let fill = bright.len() as f64 / area as f64;
                if fill > 0.9 {
                    10.0
                } else {
                    -10.0
                }
            };
            let xid = tape.leaf(x.clone(), true);
            let logits = tape.constant(Tensor::new(vec![2], vec![-score, score]).unwrap());
            let probs = tape.softmax(logits)?;
            Ok(ProbGraph { x: xid, logits, probs })
        }
    }

    #[test]
    fn accuracy_examples() {
        let samples: Vec<LabeledImage> = gen_synthetic(60, 2, &[Domain::Flat], 5)
            .unwrap()
            .iter()
            .map(|s| s.to_labeled())
            .collect();
        assert_eq!(accuracy(&ShapeOracle, &samples, None).unwrap(), 1.0);

        // Empty ball: attacked accuracy equals clean accuracy exactly.
        let model = ConvClassifier::new(3, 2).unwrap();
        let clean = accuracy(&model, &samples, None).unwrap();
        let zero = accuracy(&model, &samples, Some(&AttackConfig::pgd(0.0, 10))).unwrap();
        assert_eq!(clean, zero);

        assert!(accuracy(&model, &[], None).is_err());
    }

    #[test]
    fn chance_level_under_label_permutation() {
        // Random labels against a fixed predictor: accuracy near 1/C.
        let mut rng = stream(3, "chance", &[]);
        let samples: Vec<LabeledImage> = gen_synthetic(400, 4, &[Domain::Flat], 7)
            .unwrap()
            .iter()
            .map(|s| LabeledImage { image: s.image.clone(), label: rng.gen_range(0..4) })
            .collect();
        let model = ConvClassifier::new(4, 9).unwrap();
        let acc = accuracy(&model, &samples, None).unwrap();
        // 4-sigma binomial interval around 0.25 for n = 400; an untrained
        // model against permuted labels sits at chance level.
        let sigma = (0.25 * 0.75 / 400.0f64).sqrt();
        assert!((acc - 0.25).abs() < 4.0 * sigma, "{acc}");
    }

    /// CamModel wrapper so occlusion metrics can run on toy models.
    struct LinearCam {
        w: Vec<f64>, // (2, n) flattened
        n: usize,
    }

    impl ProbModel for LinearCam {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_shape(&self) -> [usize; 3] {
            [1, 2, 2]
        }
        fn build_probs(&self, tape: &mut Tape, x: &Tensor) -> Result<ProbGraph> {
            let g = self.build_cam(tape, x, None)?;
            Ok(ProbGraph { x: g.x, logits: g.logits, probs: g.probs })
        }
    }

    impl CamModel for LinearCam {
        fn build_cam_with(
            &self,
            tape: &mut Tape,
            _params: &[NodeId],
            x: &Tensor,
            _dropout: Option<&Tensor>,
        ) -> Result<CamGraph> {
            let xid = tape.leaf(x.clone(), true);
            let flat = tape.reshape(xid, &[self.n])?;
            let w = tape.constant(Tensor::new(vec![2, self.n], self.w.clone()).unwrap());
            let logits = tape.matvec(w, flat, false)?;
            let probs = tape.softmax(logits)?;
            Ok(CamGraph { x: xid, last_conv: xid, logits, probs, params: vec![] })
        }
    }

    #[test]
    fn occlusion_metrics_match_forward_pass_oracle() {
        let model = LinearCam { w: vec![1.0, -0.5, 0.25, 0.7, -0.2, 0.9, -0.8, 0.1], n: 4 };
        let x = Tensor::new(vec![1, 2, 2], vec![0.9, 0.2, 0.6, 0.4]).unwrap();
        let y = 0usize;
        let k = 0.5;

        let comp = comprehensiveness(&model, &x, y, k, RemovalBaseline::Zero).unwrap();
        let suff = sufficiency(&model, &x, y, k, RemovalBaseline::Zero).unwrap();

        // Independent recomputation: rank by the upsampled saliency map, then
        // two plain forward passes.
        let ranking = saliency_ranking(&model, &x, y).unwrap();
        let pixels = top_k_pixels(&ranking, k);
        let removed = occlude(&x, &pixels, false, RemovalBaseline::Zero);
        let kept = occlude(&x, &pixels, true, RemovalBaseline::Zero);
        let p = model.predict(&x).unwrap()[y];
        let want_comp = p - model.predict(&removed).unwrap()[y];
        let want_suff = p - model.predict(&kept).unwrap()[y];
        assert!((comp - want_comp).abs() < 1e-12);
        assert!((suff - want_suff).abs() < 1e-12);
    }

    #[test]
    fn occlusion_metrics_degenerate_cases() {
        // Constant model: every occlusion delta is zero.
        let model = LinearCam { w: vec![0.0; 8], n: 4 };
        let x = Tensor::new(vec![1, 2, 2], vec![0.9, 0.2, 0.6, 0.4]).unwrap();
        assert_eq!(comprehensiveness(&model, &x, 0, 0.5, RemovalBaseline::Zero).unwrap(), 0.0);
        assert_eq!(sufficiency(&model, &x, 0, 0.5, RemovalBaseline::Zero).unwrap(), 0.0);

        // Keeping 100% of pixels reproduces the input bit for bit.
        let model = LinearCam { w: vec![1.0, -0.5, 0.25, 0.7, -0.2, 0.9, -0.8, 0.1], n: 4 };
        assert_eq!(sufficiency(&model, &x, 0, 1.0, RemovalBaseline::Zero).unwrap(), 0.0);

        // Removing 100% against the zero baseline: f_y(x) - f_y(0).
        let comp = comprehensiveness(&model, &x, 0, 1.0, RemovalBaseline::Zero).unwrap();
        let zero = Tensor::zeros(&[1, 2, 2]);
        let want = model.predict(&x).unwrap()[0] - model.predict(&zero).unwrap()[0];
        assert!((comp - want).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_examples() {
        // Linear map diag(3, 1): ratios never exceed 3 and approach it.
        let f = |x: &Tensor| -> Result<Vec<f64>> { Ok(vec![3.0 * x.data()[0], x.data()[1]]) };
        let sampler = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::new(vec![2], vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap()
        };
        let small = estimate_lipschitz(f, sampler, 50, 3).unwrap();
        let big = estimate_lipschitz(f, sampler, 2000, 3).unwrap();
        assert!(small <= 3.0 + 1e-12);
        assert!(big <= 3.0 + 1e-12);
        assert!(big >= 2.9, "{big}");

        // Nested monotonicity for a fixed seed.
        let mid = estimate_lipschitz(f, sampler, 500, 3).unwrap();
        assert!(small <= mid && mid <= big);

        // Constant function.
        let c = |_: &Tensor| -> Result<Vec<f64>> { Ok(vec![1.0, 2.0]) };
        assert_eq!(estimate_lipschitz(c, sampler, 100, 4).unwrap(), 0.0);

        // All-degenerate sampling: a collapsed sampler with a single
        // data-data pair has nothing to measure.
        let point = |_: &mut rand_chacha::ChaCha8Rng| Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        assert!(estimate_lipschitz(f, point, 1, 5).is_err());
    }

    #[test]
    fn model_lipschitz_estimate_below_analytic_ceiling() {
        let model = ConvClassifier::new(3, 17).unwrap();
        let ceiling = lipschitz_ceiling(&model);
        let f = |x: &Tensor| model.predict(x);
        let sampler = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data = (0..3 * 32 * 32).map(|_| rng.gen::<f64>()).collect();
            Tensor::new(vec![3, 32, 32], data).unwrap()
        };
        let est = estimate_lipschitz(f, sampler, 200, 7).unwrap();
        assert!(est <= ceiling, "estimate {est} above ceiling {ceiling}");
    }

    /// Linear audit model: output is `W x` read directly as the prediction
    /// vector. Rows other than the true class are zero on background
    /// coordinates, so the single-row gradient field bounds the full shift.
    struct LinearBg {
        w: Vec<f64>, // (3, d)
        d: usize,
    }

    impl ProbModel for LinearBg {
        fn num_classes(&self) -> usize {
            3
        }
        fn input_shape(&self) -> [usize; 3] {
            [3, 32, 32]
        }
        fn build_probs(&self, tape: &mut Tape, x: &Tensor) -> Result<ProbGraph> {
            let xid = tape.leaf(x.clone(), true);
            let flat = tape.reshape(xid, &[self.d])?;
            let w = tape.constant(Tensor::new(vec![3, self.d], self.w.clone()).unwrap());
            let out = tape.matvec(w, flat, false)?;
            Ok(ProbGraph { x: xid, logits: out, probs: out })
        }
    }

    #[test]
    fn lemma_audit_identical_pair_and_linear_model() {
        let base = gen_synthetic(12, 3, &[Domain::Flat], 31).unwrap();
        let shifted = gen_synthetic(12, 3, &[Domain::Stripes], 31).unwrap();

        // Identical pairs: lhs = rhs = 0, satisfied.
        let model = ConvClassifier::new(3, 3).unwrap();
        let pairs: Vec<_> = base.iter().map(|s| (s.clone(), s.clone())).collect();
        let audits = lemma1_check(&model, &pairs, 0.0).unwrap();
        for a in &audits {
            assert_eq!(a.lhs, 0.0);
            assert_eq!(a.rhs, 0.0);
            assert!(a.satisfied);
        }

        // Linear model whose off-class rows ignore the background: the
        // closed-form row gradient makes the first-order bound exact, so
        // every cross-domain pair satisfies it with kappa_phi = 0.
        let d = 3 * 32 * 32;
        let hw = 32 * 32;
        let mut pairs = Vec::new();
        for (a, b) in base.iter().zip(&shifted) {
            pairs.push((a.clone(), b.clone()));
        }
        for (train, _) in &pairs {
            let y = train.label;
            let mut w = vec![0.0; 3 * d];
            let mut rng = stream(train.index as u64, "linear-audit", &[]);
            for c in 0..3usize {
                for p in 0..hw {
                    for ch in 0..3 {
                        let i = ch * hw + p;
                        let on_object = train.object_mask[p];
                        if c == y || on_object {
                            w[c * d + i] = rng.gen_range(-0.5..0.5);
                        }
                    }
                }
            }
            let model = LinearBg { w, d };
            let audits =
                lemma1_check(&model, std::slice::from_ref(&(train.clone(), pairs.iter().find(|p| p.0.index == train.index).unwrap().1.clone())), 0.0)
                    .unwrap();
            assert!(audits[0].satisfied, "lhs {} rhs {}", audits[0].lhs, audits[0].rhs);

            // Closed-form oracle for the rhs gradient term.
            let grad = input_gradient_of_class(&model, &train.image, y).unwrap();
            for (i, g) in grad.iter().enumerate() {
                assert!((g - model.w[y * d + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_mismatch_is_an_error() {
        let model = ConvClassifier::new(3, 3).unwrap();
        let a = gen_synthetic(3, 3, &[Domain::Flat], 1).unwrap();
        let b = gen_synthetic(3, 3, &[Domain::Flat], 2).unwrap();
        let pairs = vec![(a[0].clone(), b[0].clone())];
        assert!(lemma1_check(&model, &pairs, 0.0).is_err());
    }

    #[test]
    fn theorem_report_formula() {
        let r = TheoremReport::evaluate(2.0, 4.0, 2.0, 0.2, 100, 400, 0.05, 0.1);
        let lips = 2.0 + 0.2 * 4.0 / 2.0;
        let rad = lips * 10.0 / 20.0;
        assert!((r.rademacher_term - rad).abs() < 1e-12);
        assert!((r.bound - (2.0 * rad + ((1.0f64 / 0.05).ln() / 800.0).sqrt())).abs() < 1e-12);
    }
}
