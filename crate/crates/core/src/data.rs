//! Dataset plumbing: manifests, luminance conversion, patch-pair extraction
//! and the shuffled batch stream.
//!
//! Patch geometry is fixed by the network skeleton: a 33x33 noisy window
//! pairs with the centered 17x17 clean crop (offset +8 on both axes).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};
use crate::topology::{CLEAN_PATCH, NOISY_PATCH, PATCH_OFFSET};

/// BT.601 luminance from an interleaved-channel RGB tensor (c = 3).
pub fn rgb_to_luma<T: Element>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let s = rgb.shape();
    if s.c != 3 {
        return Err(Error::shape("rgb_to_luma", "3 channels", s));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = 0.299 * rgb.at(n, 0, y, x).to64()
                    + 0.587 * rgb.at(n, 1, y, x).to64()
                    + 0.114 * rgb.at(n, 2, y, x).to64();
                out.set(n, 0, y, x, T::of(v));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split '{other}' (expected train|test)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

/// Plain-text dataset manifest: one `path<TAB or space>split` per line,
/// '#' comments allowed. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let base = path.as_ref().parent().unwrap_or(Path::new("."));
        Manifest::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let path = parts.next().expect("non-empty line");
            let split = parts
                .next()
                .ok_or_else(|| {
                    Error::format("manifest", format!("line {}: missing split field", lineno + 1))
                })?
                .parse::<Split>()
                .map_err(|e| Error::format("manifest", format!("line {}: {e}", lineno + 1)))?;
            if parts.next().is_some() {
                return Err(Error::format(
                    "manifest",
                    format!("line {}: unexpected extra fields", lineno + 1),
                ));
            }
            let p = Path::new(path);
            let resolved = if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            };
            entries.push(ManifestEntry {
                path: resolved,
                split,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn split_paths(&self, split: Split) -> Vec<&Path> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.path.as_path())
            .collect()
    }
}

/// One training example: a noisy context window, its clean center crop, and
/// enough provenance to trace the pair back to (image, position, model).
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub source: String,
    pub origin: (usize, usize),
    pub model_index: usize,
}

/// Slide a NOISY_PATCH window over the degraded image at `stride`, with
/// optional per-patch jitter, pairing each window with the centered clean
/// crop. Images smaller than one window yield an empty list (with a
/// warning); callers decide whether that is fatal.
pub fn extract_patch_pairs(
    clean: &Tensor<f32>,
    degraded: &Tensor<f32>,
    source: &str,
    model_index: usize,
    stride: usize,
    jitter: Option<(usize, &mut ChaCha8Rng)>,
) -> Result<Vec<PatchPair>> {
    let s = clean.shape();
    if degraded.shape() != s {
        return Err(Error::shape("patch extraction", s, degraded.shape()));
    }
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("patch extraction", "(1, 1, h, w)", s));
    }
    if stride == 0 {
        return Err(Error::arg("stride must be positive"));
    }
    if s.h < NOISY_PATCH || s.w < NOISY_PATCH {
        log::warn!(
            "image '{source}' is {}x{}, smaller than one {NOISY_PATCH}x{NOISY_PATCH} window; no patches",
            s.h,
            s.w
        );
        return Ok(Vec::new());
    }

    let max_y = s.h - NOISY_PATCH;
    let max_x = s.w - NOISY_PATCH;
    let mut pairs = Vec::new();
    let (jitter_amount, mut jitter_rng) = match jitter {
        Some((j, rng)) => (j, Some(rng)),
        None => (0, None),
    };

    let mut y0 = 0usize;
    loop {
        let mut x0 = 0usize;
        loop {
            let (mut y, mut x) = (y0, x0);
            if jitter_amount > 0 {
                if let Some(rng) = jitter_rng.as_deref_mut() {
                    let jj = jitter_amount as i64;
                    let dy = rng.random_range(-jj..=jj) as isize;
                    let dx = rng.random_range(-jj..=jj) as isize;
                    y = (y as isize + dy).clamp(0, max_y as isize) as usize;
                    x = (x as isize + dx).clamp(0, max_x as isize) as usize;
                }
            }
            pairs.push(PatchPair {
                noisy: crop(degraded, y, x, NOISY_PATCH),
                clean: crop(clean, y + PATCH_OFFSET, x + PATCH_OFFSET, CLEAN_PATCH),
                source: source.to_string(),
                origin: (y, x),
                model_index,
            });
            if x0 == max_x {
                break;
            }
            x0 = (x0 + stride).min(max_x);
        }
        if y0 == max_y {
            break;
        }
        y0 = (y0 + stride).min(max_y);
    }
    Ok(pairs)
}

fn crop(img: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(Shape::new(1, 1, size, size));
    let s = img.shape();
    for y in 0..size {
        let src = (y0 + y) * s.w + x0;
        let dst = y * size;
        out.data_mut()[dst..dst + size].copy_from_slice(&img.data()[src..src + size]);
    }
    out
}

/// One stacked minibatch plus the pair indices it was drawn from.
pub struct Batch {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub indices: Vec<usize>,
}

pub struct BatchIter<'a> {
    pairs: &'a [PatchPair],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;

        let b = indices.len();
        let mut noisy = Tensor::zeros(Shape::new(b, 1, NOISY_PATCH, NOISY_PATCH));
        let mut clean = Tensor::zeros(Shape::new(b, 1, CLEAN_PATCH, CLEAN_PATCH));
        let np = NOISY_PATCH * NOISY_PATCH;
        let cp = CLEAN_PATCH * CLEAN_PATCH;
        for (slot, &idx) in indices.iter().enumerate() {
            let pair = &self.pairs[idx];
            noisy.data_mut()[slot * np..(slot + 1) * np].copy_from_slice(pair.noisy.data());
            clean.data_mut()[slot * cp..(slot + 1) * cp].copy_from_slice(pair.clean.data());
        }
        Some(Batch {
            noisy,
            clean,
            indices,
        })
    }
}

/// Fisher-Yates shuffled batches for one epoch; the order is fully
/// determined by `rng`. The final batch may be smaller than `batch_size`.
pub fn epoch_batches<'a>(
    pairs: &'a [PatchPair],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    if pairs.is_empty() {
        return Err(Error::arg("no training patches available"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    Ok(BatchIter {
        pairs,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamRole};

    fn img(h: usize, w: usize, scale: f32) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
            ((y * w + x) % 251) as f32 / 255.0 * scale
        })
    }

    #[test]
    fn luma_weights_sum_to_unity() {
        let rgb = Tensor::<f64>::filled(Shape::new(1, 3, 2, 2), 0.6);
        let y = rgb_to_luma(&rgb).unwrap();
        for &v in y.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
        let gray = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(rgb_to_luma(&gray).is_err());
    }

    #[test]
    fn patch_counts_match_grid_arithmetic() {
        // 65x65 image, stride 16: floor((65-33)/16)+1 = 3 positions per
        // axis, 9 pairs total.
        let clean = img(65, 65, 1.0);
        let pairs = extract_patch_pairs(&clean, &clean, "t", 0, 16, None).unwrap();
        assert_eq!(pairs.len(), 9);
        for p in &pairs {
            assert_eq!(p.noisy.shape(), Shape::new(1, 1, NOISY_PATCH, NOISY_PATCH));
            assert_eq!(p.clean.shape(), Shape::new(1, 1, CLEAN_PATCH, CLEAN_PATCH));
        }
    }

    #[test]
    fn clean_crop_is_centered_in_the_noisy_window() {
        let clean = img(64, 80, 1.0);
        let noisy = img(64, 80, 0.5);
        let pairs = extract_patch_pairs(&clean, &noisy, "t", 0, 17, None).unwrap();
        for p in &pairs {
            let (y, x) = p.origin;
            for dy in 0..CLEAN_PATCH {
                for dx in 0..CLEAN_PATCH {
                    let want = clean.at(0, 0, y + PATCH_OFFSET + dy, x + PATCH_OFFSET + dx);
                    assert_eq!(p.clean.at(0, 0, dy, dx), want);
                }
            }
            // Noisy window comes from the degraded image, not the clean one.
            assert_eq!(p.noisy.at(0, 0, 0, 0), noisy.at(0, 0, y, x));
        }
    }

    #[test]
    fn undersized_image_yields_empty_list() {
        let clean = img(32, 32, 1.0);
        let pairs = extract_patch_pairs(&clean, &clean, "small", 0, 17, None).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn jitter_keeps_windows_in_bounds_and_is_deterministic() {
        let clean = img(70, 70, 1.0);
        let mut r1 = stream_rng(9, StreamRole::Jitter, 0);
        let a = extract_patch_pairs(&clean, &clean, "t", 0, 17, Some((8, &mut r1))).unwrap();
        let mut r2 = stream_rng(9, StreamRole::Jitter, 0);
        let b = extract_patch_pairs(&clean, &clean, "t", 0, 17, Some((8, &mut r2))).unwrap();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.origin, pb.origin);
            let (y, x) = pa.origin;
            assert!(y + NOISY_PATCH <= 70 && x + NOISY_PATCH <= 70);
        }
        let mut r3 = stream_rng(10, StreamRole::Jitter, 0);
        let c = extract_patch_pairs(&clean, &clean, "t", 0, 17, Some((8, &mut r3))).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.origin != y.origin));
    }

    #[test]
    fn batches_cover_every_pair_exactly_once() {
        let clean = img(67, 67, 1.0);
        let pairs = extract_patch_pairs(&clean, &clean, "t", 0, 17, None).unwrap();
        let mut rng = stream_rng(3, StreamRole::Shuffle, 0);
        let mut seen = vec![0usize; pairs.len()];
        let mut batch_sizes = Vec::new();
        for batch in epoch_batches(&pairs, 4, &mut rng).unwrap() {
            batch_sizes.push(batch.indices.len());
            for &i in &batch.indices {
                seen[i] += 1;
            }
            assert_eq!(batch.noisy.shape().n, batch.indices.len());
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(batch_sizes[..batch_sizes.len() - 1].iter().all(|&b| b == 4));
    }

    #[test]
    fn different_epoch_seeds_give_different_orders() {
        let clean = img(67, 67, 1.0);
        let pairs = extract_patch_pairs(&clean, &clean, "t", 0, 17, None).unwrap();
        let order = |idx: u64| -> Vec<usize> {
            let mut rng = stream_rng(3, StreamRole::Shuffle, idx);
            epoch_batches(&pairs, 64, &mut rng)
                .unwrap()
                .flat_map(|b| b.indices)
                .collect()
        };
        assert_eq!(order(1), order(1));
        assert_ne!(order(1), order(2));
    }

    #[test]
    fn manifest_parsing_resolves_relative_paths() {
        let text = "# corpus\nimages/a.pgm\ttrain\nimages/b.pgm test\n\n/abs/c.pgm train\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[0].path, Path::new("/data/images/a.pgm"));
        assert_eq!(m.entries[1].split, Split::Test);
        assert_eq!(m.entries[2].path, Path::new("/abs/c.pgm"));
        assert_eq!(m.split_paths(Split::Train).len(), 2);

        assert!(Manifest::parse("a.pgm\n", Path::new(".")).is_err());
        assert!(Manifest::parse("a.pgm dev\n", Path::new(".")).is_err());
        assert!(Manifest::parse("a.pgm train extra\n", Path::new(".")).is_err());
    }
}
