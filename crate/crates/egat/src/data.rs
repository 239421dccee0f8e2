//! Synthetic object/background data, guide maps, splits and image loading.
//!
//! Each synthetic sample is a bright glyph (the class decides the shape)
//! painted over a domain-specific background texture. Object pixels are drawn
//! from a stream that depends only on the run seed and the sample index, while
//! background pixels additionally depend on the domain. Re-rendering a sample
//! under another domain therefore changes only the background: held-out-domain
//! evaluation is a pure background shift, and aligned cross-domain pairs share
//! their object pixels exactly.
//!
//! Glyph colors all have Rec. 601 luminance above 0.45 while background
//! textures stay below 0.35, so the grayscale guide map always highlights the
//! object region.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::model::INPUT_SHAPE;
use crate::rng;
use crate::tensor::Tensor;

pub const SIDE: usize = 32;

/// Rec. 601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Background texture family. The per-sample statistics (levels, noise
/// amplitude, phase) are drawn from the background stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Flat,
    Stripes,
    Noise,
    Checker,
}

impl Domain {
    pub fn parse(name: &str) -> Result<Domain> {
        match name {
            "flat" => Ok(Domain::Flat),
            "stripes" => Ok(Domain::Stripes),
            "noise" => Ok(Domain::Noise),
            "checker" => Ok(Domain::Checker),
            other => Err(Error::Config(format!(
                "unknown domain '{other}' (expected flat, stripes, noise or checker)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Domain::Flat => "flat",
            Domain::Stripes => "stripes",
            Domain::Noise => "noise",
            Domain::Checker => "checker",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Domain::Flat => 1,
            Domain::Stripes => 2,
            Domain::Noise => 3,
            Domain::Checker => 4,
        }
    }

    pub fn parse_list(spec: &str) -> Result<Vec<Domain>> {
        let domains: Result<Vec<Domain>> = spec.split(',').map(|s| Domain::parse(s.trim())).collect();
        let domains = domains?;
        if domains.is_empty() {
            return Err(Error::Config("need at least one domain".into()));
        }
        Ok(domains)
    }
}

/// Glyph shapes, indexed by class.
const SHAPES: usize = 6;

/// Bright, saturated glyph colors. The color is drawn per sample from the
/// object stream, independent of the class: shape is the only label signal,
/// color is a nuisance factor.
const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.85, 0.20],
    [0.95, 0.35, 0.30],
    [0.35, 0.90, 0.95],
    [0.90, 0.55, 0.95],
    [0.45, 0.95, 0.45],
    [0.95, 0.65, 0.25],
];

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// `(3, 32, 32)` image in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Row-major object mask; background pixels are its complement.
    pub object_mask: Vec<bool>,
    pub domain: Domain,
    /// Index within the generated set; aligned across domains.
    pub index: usize,
}

/// An image/label pair as produced by the directory loader.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: usize,
}

impl SyntheticSample {
    pub fn to_labeled(&self) -> LabeledImage {
        LabeledImage { image: self.image.clone(), label: self.label }
    }
}

pub trait HasLabel {
    fn label(&self) -> usize;
}

impl HasLabel for SyntheticSample {
    fn label(&self) -> usize {
        self.label
    }
}

impl HasLabel for LabeledImage {
    fn label(&self) -> usize {
        self.label
    }
}

fn glyph_hit(shape: usize, dx: i64, dy: i64, r: i64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => (3 * dx.abs() <= r && dy.abs() <= r) || (3 * dy.abs() <= r && dx.abs() <= r), // cross
        3 => dy >= -r && dy <= r && 2 * dx.abs() <= r + dy, // upward triangle
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && 4 * d2 >= r * r
        }
        _ => dx.abs() + dy.abs() <= r,
    }
}

fn paint_background(domain: Domain, rng: &mut rand_chacha::ChaCha8Rng, img: &mut [f64]) {
    let hw = SIDE * SIDE;
    match domain {
        Domain::Flat => {
            let level = rng.gen_range(0.05..0.30);
            for c in 0..3 {
                for s in 0..hw {
                    img[c * hw + s] = level;
                }
            }
        }
        Domain::Stripes => {
            let dark = rng.gen_range(0.03..0.12);
            let light = rng.gen_range(0.20..0.34);
            let phase = rng.gen_range(0..8usize);
            for i in 0..SIDE {
                let level = if ((i + phase) / 4) % 2 == 0 { dark } else { light };
                for j in 0..SIDE {
                    for c in 0..3 {
                        img[c * hw + i * SIDE + j] = level;
                    }
                }
            }
        }
        Domain::Noise => {
            let sigma = rng.gen_range(0.04..0.08);
            let mean = rng.gen_range(0.12..0.22);
            let normal = Normal::new(mean, sigma).unwrap();
            for s in 0..hw {
                let v: f64 = normal.sample(rng);
                let v = v.clamp(0.0, 0.34);
                for c in 0..3 {
                    img[c * hw + s] = v;
                }
            }
        }
        Domain::Checker => {
            let dark = rng.gen_range(0.03..0.12);
            let light = rng.gen_range(0.20..0.34);
            let (pi, pj) = (rng.gen_range(0..8usize), rng.gen_range(0..8usize));
            for i in 0..SIDE {
                for j in 0..SIDE {
                    let cell = ((i + pi) / 4 + (j + pj) / 4) % 2;
                    let level = if cell == 0 { dark } else { light };
                    for c in 0..3 {
                        img[c * hw + i * SIDE + j] = level;
                    }
                }
            }
        }
    }
}

/// Renders sample `index` for one domain. Object geometry and color depend
/// only on `(seed, index, num_classes)`.
pub fn render_sample(
    index: usize,
    num_classes: usize,
    domain: Domain,
    seed: u64,
) -> SyntheticSample {
    let label = index % num_classes;
    let hw = SIDE * SIDE;
    let mut img = vec![0.0; 3 * hw];

    let mut bg_rng = rng::stream(seed, "gen-bg", &[index as u64, domain.salt()]);
    paint_background(domain, &mut bg_rng, &mut img);

    let mut obj_rng = rng::stream(seed, "gen-obj", &[index as u64]);
    let r = obj_rng.gen_range(7..=10i64);
    let cx = obj_rng.gen_range(r..(SIDE as i64 - r));
    let cy = obj_rng.gen_range(r..(SIDE as i64 - r));
    let color = PALETTE[obj_rng.gen_range(0..PALETTE.len())];

    let mut mask = vec![false; hw];
    for i in 0..SIDE {
        for j in 0..SIDE {
            let (dy, dx) = (i as i64 - cy, j as i64 - cx);
            if glyph_hit(label, dx, dy, r) {
                mask[i * SIDE + j] = true;
                for c in 0..3 {
                    img[c * hw + i * SIDE + j] = color[c];
                }
            }
        }
    }

    SyntheticSample {
        image: Tensor::from_parts(vec![3, SIDE, SIDE], img),
        label,
        object_mask: mask,
        domain,
        index,
    }
}

/// Generates `n` samples with labels `index % num_classes` (exactly balanced)
/// and domains assigned block-cyclically so every (class, domain) pair is
/// covered evenly.
pub fn gen_synthetic(
    n: usize,
    num_classes: usize,
    domains: &[Domain],
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    if num_classes < 2 || num_classes > SHAPES {
        return Err(Error::Config(format!(
            "num_classes must be in 2..={SHAPES}, got {num_classes}"
        )));
    }
    if domains.is_empty() {
        return Err(Error::Config("need at least one domain".into()));
    }
    Ok((0..n)
        .map(|i| {
            let domain = domains[(i / num_classes) % domains.len()];
            render_sample(i, num_classes, domain, seed)
        })
        .collect())
}

/// Rec. 601 grayscale of an RGB image, in `[0, 1]`.
pub fn guide_map(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Config(format!("guide map expects (3, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = x.data();
    let mut out = vec![0.0; h * w];
    for (i, o) in out.iter_mut().enumerate() {
        *o = LUMA[0] * d[i] + LUMA[1] * d[h * w + i] + LUMA[2] * d[2 * h * w + i];
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

// ── splits ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

fn shuffled_indices(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates, explicit so the assignment is stable across rand versions.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// 60/20/20 split: seeded shuffle then contiguous cut, val and test sizes
/// floored with the remainder going to train. Stratified per label whenever
/// every class has at least 5 samples.
pub fn split<T: HasLabel + Clone>(samples: &[T], seed: u64) -> Result<DatasetSplit<T>> {
    if samples.len() < 5 {
        return Err(Error::Config(format!(
            "need at least 5 samples to split, got {}",
            samples.len()
        )));
    }
    let mut by_label: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match by_label.iter_mut().find(|(l, _)| *l == s.label()) {
            Some((_, v)) => v.push(i),
            None => by_label.push((s.label(), vec![i])),
        }
    }
    let stratified = by_label.iter().all(|(_, v)| v.len() >= 5);

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut cut = |indices: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
        let order = shuffled_indices(indices.len(), rng);
        let n = indices.len();
        let n_val = n / 5;
        let n_test = n / 5;
        let n_train = n - n_val - n_test;
        for (pos, &o) in order.iter().enumerate() {
            let sample = samples[indices[o]].clone();
            if pos < n_train {
                train.push(sample);
            } else if pos < n_train + n_val {
                val.push(sample);
            } else {
                test.push(sample);
            }
        }
    };

    if stratified {
        for (label, indices) in &by_label {
            let mut rng = rng::stream(seed, "split", &[*label as u64]);
            cut(indices, &mut rng);
        }
    } else {
        let all: Vec<usize> = (0..samples.len()).collect();
        let mut rng = rng::stream(seed, "split", &[]);
        cut(&all, &mut rng);
    }

    Ok(DatasetSplit { train, val, test, seed })
}

// ── on-disk layout ──────────────────────────────────────────────────────

/// Arguments a generated dataset was rendered from; stored alongside the
/// images so aligned cross-domain pairs can be re-rendered bit-identically.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenSpec {
    pub n: usize,
    pub classes: usize,
    pub domains: Vec<Domain>,
    pub seed: u64,
}

pub const GEN_SPEC_FILE: &str = "dataset.json";

impl GenSpec {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(GEN_SPEC_FILE);
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<GenSpec> {
        let path = dir.join(GEN_SPEC_FILE);
        let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&body).map_err(Into::into)
    }
}

/// Writes `<dir>/<domain>/class_<label>/img_<index>.png` plus an 8-bit mask
/// sidecar (`img_<index>.mask.png`, 255 = object) per sample. Returns the
/// files written, in a deterministic order.
pub fn export_dataset(samples: &[SyntheticSample], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for s in samples {
        let class_dir = dir.join(s.domain.name()).join(format!("class_{}", s.label));
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let img_path = class_dir.join(format!("img_{:05}.png", s.index));
        let bytes = image_io::tensor_to_rgb_bytes(&s.image);
        image_io::save_rgb(&img_path, SIDE, SIDE, &bytes)?;
        let mask_path = class_dir.join(format!("img_{:05}.mask.png", s.index));
        let mask_bytes: Vec<u8> = s.object_mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        image_io::save_gray(&mask_path, SIDE, SIDE, &mask_bytes)?;
        written.push(img_path);
        written.push(mask_path);
    }
    Ok(written)
}

fn is_mask_file(name: &str) -> bool {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    stem.ends_with(".mask")
}

/// Loads a class-per-subdirectory image tree. Labels follow the sorted
/// subdirectory order; images are resized to 32x32 and scaled to `[0, 1]`.
/// Mask sidecars (`*.mask.*`) are skipped. Returns the samples together with
/// the class names in label order.
pub fn load_image_dir(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<String>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut class_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::format(dir, "no class subdirectories"));
    }

    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    for (label, class_dir) in class_dirs.iter().enumerate() {
        let name = class_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(class_dir)
            .map_err(|e| Error::io(class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .filter(|p| {
                p.file_name()
                    .map(|n| !is_mask_file(&n.to_string_lossy()))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::format(class_dir, "class directory contains no images"));
        }
        for f in files {
            let image = image_io::load_rgb_resized(&f, SIDE, SIDE)?;
            samples.push(LabeledImage { image, label });
        }
        class_names.push(name);
    }
    let _ = INPUT_SHAPE;
    Ok((samples, class_names))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_two_domains_share_object_pixels_only() {
        let a = gen_synthetic(24, 3, &[Domain::Flat], 5).unwrap();
        let b = gen_synthetic(24, 3, &[Domain::Stripes], 5).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.object_mask, sb.object_mask);
            assert_eq!(sa.label, sb.label);
            let hw = SIDE * SIDE;
            let mut bg_differs = false;
            for (i, &m) in sa.object_mask.iter().enumerate() {
                for c in 0..3 {
                    let (va, vb) = (sa.image.data()[c * hw + i], sb.image.data()[c * hw + i]);
                    if m {
                        assert_eq!(va, vb, "object pixel changed across domains");
                    } else if va != vb {
                        bg_differs = true;
                    }
                }
            }
            assert!(bg_differs, "backgrounds should differ across domains");
        }
    }

    #[test]
    fn balanced_labels() {
        let samples = gen_synthetic(100, 2, &[Domain::Flat], 1).unwrap();
        let ones = samples.iter().filter(|s| s.label == 1).count();
        assert_eq!(ones, 50);
        assert_eq!(samples.len() - ones, 50);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_sample(17, 3, Domain::Noise, 9);
        let b = render_sample(17, 3, Domain::Noise, 9);
        assert_eq!(a.image, b.image);
        assert_eq!(a.object_mask, b.object_mask);
    }

    #[test]
    fn generation_rejects_bad_arguments() {
        assert!(gen_synthetic(0, 3, &[Domain::Flat], 1).is_err());
        assert!(gen_synthetic(10, 1, &[Domain::Flat], 1).is_err());
        assert!(gen_synthetic(10, 3, &[], 1).is_err());
    }

    #[test]
    fn guide_map_examples() {
        let white = Tensor::filled(&[3, 4, 4], 1.0);
        let g = guide_map(&white).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let mut red = Tensor::zeros(&[3, 4, 4]);
        for i in 0..16 {
            red.data_mut()[i] = 1.0;
        }
        let g = guide_map(&red).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.299).abs() < 1e-12));

        assert!(guide_map(&Tensor::zeros(&[1, 4, 4])).is_err());
    }

    #[test]
    fn guide_map_matches_scalar_oracle() {
        let s = render_sample(3, 3, Domain::Checker, 11);
        let g = guide_map(&s.image).unwrap();
        let hw = SIDE * SIDE;
        for i in 0..hw {
            let want = 0.299 * s.image.data()[i]
                + 0.587 * s.image.data()[hw + i]
                + 0.114 * s.image.data()[2 * hw + i];
            assert_eq!(g.data()[i], want);
        }
    }

    #[test]
    fn guide_map_contrast_favors_object() {
        for idx in 0..12 {
            for domain in [Domain::Flat, Domain::Stripes, Domain::Noise, Domain::Checker] {
                let s = render_sample(idx, 6, domain, 21);
                let g = guide_map(&s.image).unwrap();
                let (mut inside, mut outside, mut n_in, mut n_out) = (0.0, 0.0, 0usize, 0usize);
                for (i, &m) in s.object_mask.iter().enumerate() {
                    if m {
                        inside += g.data()[i];
                        n_in += 1;
                    } else {
                        outside += g.data()[i];
                        n_out += 1;
                    }
                }
                assert!(n_in > 0 && n_out > 0);
                assert!(inside / n_in as f64 > outside / n_out as f64);
            }
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let samples = gen_synthetic(100, 2, &[Domain::Flat], 3).unwrap();
        let s = split(&samples, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));

        let samples101 = gen_synthetic(101, 2, &[Domain::Flat], 3).unwrap();
        let s101 = split(&samples101, 7).unwrap();
        assert_eq!((s101.train.len(), s101.val.len(), s101.test.len()), (61, 20, 20));

        let again = split(&samples, 7).unwrap();
        let ids = |v: &[SyntheticSample]| v.iter().map(|s| s.index).collect::<Vec<_>>();
        assert_eq!(ids(&s.train), ids(&again.train));
        assert_eq!(ids(&s.val), ids(&again.val));
        assert_eq!(ids(&s.test), ids(&again.test));

        assert!(split(&samples[..4], 7).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let samples = gen_synthetic(83, 3, &[Domain::Flat, Domain::Noise], 13).unwrap();
        let s = split(&samples, 5).unwrap();
        let mut seen: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .map(|x| x.index)
            .collect();
        seen.sort_unstable();
        let expect: Vec<usize> = (0..83).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn export_and_reload_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_synthetic(12, 2, &[Domain::Flat], 19).unwrap();
        export_dataset(&samples, dir.path()).unwrap();
        GenSpec { n: 12, classes: 2, domains: vec![Domain::Flat], seed: 19 }
            .save(dir.path())
            .unwrap();

        let (loaded, names) = load_image_dir(&dir.path().join("flat")).unwrap();
        assert_eq!(names, vec!["class_0", "class_1"]);
        assert_eq!(loaded.len(), 12);
        // 8-bit quantization: each pixel within half a level.
        let orig = &samples[0];
        let reloaded = loaded
            .iter()
            .find(|l| l.label == orig.label)
            .unwrap();
        assert_eq!(reloaded.image.shape(), &[3, 32, 32]);
        for v in reloaded.image.data() {
            assert!((0.0..=1.0).contains(v));
        }

        let spec = GenSpec::load(dir.path()).unwrap();
        assert_eq!(spec.seed, 19);

        // Mask sidecars decode back to the object masks.
        let s0 = &samples[0];
        let mask_path = dir
            .path()
            .join(s0.domain.name())
            .join(format!("class_{}", s0.label))
            .join(format!("img_{:05}.mask.png", s0.index));
        let (w, h, bytes) = image_io::load_gray(&mask_path).unwrap();
        assert_eq!((w, h), (SIDE, SIDE));
        let decoded: Vec<bool> = bytes.iter().map(|&b| b == 255).collect();
        assert_eq!(decoded, s0.object_mask);
    }

    #[test]
    fn loader_rejects_empty_and_missing_layouts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_dir(dir.path()).is_err());
        std::fs::create_dir(dir.path().join("class_0")).unwrap();
        assert!(load_image_dir(dir.path()).is_err());
    }

    #[test]
    fn loader_resizes_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("bright");
        std::fs::create_dir(&class).unwrap();
        // 64x64 all-white image -> 32x32 all-ones tensor.
        let bytes = vec![255u8; 64 * 64 * 3];
        image_io::save_rgb(&class.join("white.png"), 64, 64, &bytes).unwrap();
        let (samples, names) = load_image_dir(dir.path()).unwrap();
        assert_eq!(names, vec!["bright"]);
        assert_eq!(samples[0].image.shape(), &[3, 32, 32]);
        assert!(samples[0].image.data().iter().all(|&v| v == 1.0));
    }
}
