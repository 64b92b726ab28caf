//! Dataset plumbing: IDX parsing, binarization, a synthetic toy corpus,
//! and deterministic batch iteration. File and gzip handling live in the
//! companion crate; everything here works on in-memory bytes and tensors.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{domain, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeMode {
    /// Pixel is 1 iff its value is >= 0.5.
    FixedThreshold,
    /// Pixel ~ Bernoulli(value), drawn once at load time.
    Stochastic,
}

/// In-memory image corpus, values in [0,1]; binarized corpora hold exact
/// zeros and ones only.
#[derive(Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub source: String,
    /// Recorded so a run's binarization is reproducible from its metrics.
    pub binarization: Option<(BinarizeMode, u64)>,
}

impl Dataset {
    pub fn new(images: Tensor, source: &str) -> Result<Dataset> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::InvalidShape(format!("dataset images must be [N,1,H,W], got {s:?}")));
        }
        Ok(Dataset { images, source: source.to_string(), binarization: None })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let end = at + 4;
    if end > bytes.len() {
        return Err(Error::Format(format!("IDX header truncated at byte {at}")));
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

/// Parses an IDX image payload (magic 0x00000803, big-endian counts,
/// unsigned bytes) into [N,1,rows,cols] scaled to [0,1] by /255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!("bad image magic {magic:#010x}, want 0x00000803")));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let want = 16 + n * rows * cols;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "IDX payload is {} bytes, header implies {want}",
            bytes.len()
        )));
    }
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(&[n, 1, rows, cols], data)
}

/// Parses an IDX label payload (magic 0x00000801). Parsed for completeness;
/// the models are unconditional and never consume labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!("bad label magic {magic:#010x}, want 0x00000801")));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format(format!(
            "IDX labels are {} bytes, header implies {}",
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Maps a [0,1]-valued corpus to exact {0,1}. Stochastic draws happen here,
/// once; the returned dataset is static afterwards.
pub fn binarize(dataset: &Dataset, mode: BinarizeMode, seed: u64) -> Result<Dataset> {
    if dataset.images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract("binarize input must lie in [0,1]".into()));
    }
    let data: Vec<f64> = match mode {
        BinarizeMode::FixedThreshold => {
            dataset.images.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
        }
        BinarizeMode::Stochastic => {
            let mut s = Stream::new(seed, domain::BINARIZE, 0);
            // uniform() < 1 strictly, so exact ones stay ones.
            dataset.images.data().iter().map(|&v| if s.uniform() < v { 1.0 } else { 0.0 }).collect()
        }
    };
    Ok(Dataset {
        images: Tensor::from_vec(dataset.images.shape(), data)?,
        source: dataset.source.clone(),
        binarization: Some((mode, seed)),
    })
}

pub const TOY_SIDE: usize = 8;

/// n binary 8x8 images of filled axis-aligned rectangles with uniform
/// corners. Image i uses stream index i, so prefixes of a larger corpus
/// match a smaller one.
pub fn make_toy_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("toy dataset needs n >= 1".into()));
    }
    let side = TOY_SIDE;
    let mut data = vec![0.0; n * side * side];
    for i in 0..n {
        let mut s = Stream::new(seed, domain::TOY, i as u64);
        let (r0, r1) = (s.below(side as u64) as usize, s.below(side as u64) as usize);
        let (c0, c1) = (s.below(side as u64) as usize, s.below(side as u64) as usize);
        let img = &mut data[i * side * side..(i + 1) * side * side];
        for r in r0.min(r1)..=r0.max(r1) {
            for c in c0.min(c1)..=c0.max(c1) {
                img[r * side + c] = 1.0;
            }
        }
    }
    let mut ds = Dataset::new(Tensor::from_vec(&[n, 1, side, side], data)?, "toy-rectangles")?;
    ds.binarization = Some((BinarizeMode::FixedThreshold, seed));
    Ok(ds)
}

/// Deterministic shuffled batches: a fresh permutation per (seed, epoch),
/// short final batch included.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> BatchIter {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut s = Stream::new(shuffle_seed, domain::SHUFFLE, epoch);
    s.shuffle(&mut order);
    BatchIter { dataset: dataset.clone(), order, batch_size, at: 0 }
}

pub struct BatchIter {
    dataset: Dataset,
    order: Vec<usize>,
    batch_size: usize,
    at: usize,
}

impl Iterator for BatchIter {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        if self.at >= self.order.len() {
            return None;
        }
        let end = (self.at + self.batch_size).min(self.order.len());
        let idx = &self.order[self.at..end];
        self.at = end;
        let (h, w) = self.dataset.image_hw();
        let per = h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.dataset.images.data()[i * per..(i + 1) * per]);
        }
        Some(Tensor::from_vec(&[idx.len(), 1, h, w], data).expect("batch shape is valid"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Test-side IDX encoder, the independent half of the round-trip oracle.
    fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        b.extend_from_slice(&(images.len() as u32).to_be_bytes());
        b.extend_from_slice(&(rows as u32).to_be_bytes());
        b.extend_from_slice(&(cols as u32).to_be_bytes());
        for img in images {
            assert_eq!(img.len(), rows * cols);
            b.extend_from_slice(img);
        }
        b
    }

    #[test]
    fn parses_the_hand_built_fixture() {
        let bytes = encode_idx_images(&[vec![0x00, 0x80, 0xFF, 0x40]], 2, 2);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        let want = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (a, e) in t.data().iter().zip(&want) {
            assert_eq!(a, e);
        }
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let mut bytes = encode_idx_images(&[vec![1, 2, 3, 4]], 2, 2);
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&[]), Err(Error::Format(_))));
        let bytes = encode_idx_images(&[vec![1, 2, 3, 4]], 2, 2);
        assert!(matches!(parse_idx_images(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn round_trips_random_bytes() {
        let mut s = Stream::new(5, domain::PROBE, 11);
        let imgs: Vec<Vec<u8>> =
            (0..3).map(|_| (0..12).map(|_| s.below(256) as u8).collect()).collect();
        let t = parse_idx_images(&encode_idx_images(&imgs, 3, 4)).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            for (j, &b) in img.iter().enumerate() {
                assert_eq!(t.data()[i * 12 + j], b as f64 / 255.0);
            }
        }
    }

    #[test]
    fn parses_labels() {
        let mut b = Vec::new();
        b.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 0, 9]);
        b[3] = 0x03;
        assert!(matches!(parse_idx_labels(&b), Err(Error::Format(_))));
    }

    fn dataset_from(values: Vec<f64>, n: usize, side: usize) -> Dataset {
        Dataset::new(Tensor::from_vec(&[n, 1, side, side], values).unwrap(), "test").unwrap()
    }

    #[test]
    fn fixed_threshold_uses_the_gte_tie_rule() {
        let ds = dataset_from(vec![0.4, 0.5, 0.49999, 1.0], 1, 2);
        let b = binarize(&ds, BinarizeMode::FixedThreshold, 0).unwrap();
        assert_eq!(b.images.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(b.binarization, Some((BinarizeMode::FixedThreshold, 0)));
    }

    #[test]
    fn binarize_rejects_out_of_range() {
        let ds = dataset_from(vec![0.0, 1.2, 0.0, 0.0], 1, 2);
        assert!(matches!(binarize(&ds, BinarizeMode::FixedThreshold, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn stochastic_fraction_matches_binomial_oracle() {
        let n = 100_000;
        let p = 0.3;
        let ds = Dataset::new(Tensor::full(&[n / 4, 1, 2, 2], p).unwrap(), "const").unwrap();
        let b = binarize(&ds, BinarizeMode::Stochastic, 123).unwrap();
        let ones = b.images.data().iter().filter(|&&v| v == 1.0).count() as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((ones / n as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn binarize_is_idempotent_on_binary_data() {
        let ds = make_toy_dataset(64, 9).unwrap();
        for mode in [BinarizeMode::FixedThreshold, BinarizeMode::Stochastic] {
            let again = binarize(&ds, mode, 1).unwrap();
            assert_eq!(again.images.data(), ds.images.data(), "{mode:?}");
        }
    }

    #[test]
    fn toy_dataset_is_deterministic_and_rectangular() {
        let a = make_toy_dataset(50, 7).unwrap();
        let b = make_toy_dataset(50, 7).unwrap();
        assert_eq!(a.images.data(), b.images.data());

        for i in 0..50 {
            let img = &a.images.data()[i * 64..(i + 1) * 64];
            // Occupied rows form one contiguous run sharing one column run.
            let rows: Vec<usize> = (0..8).filter(|r| (0..8).any(|c| img[r * 8 + c] == 1.0)).collect();
            assert!(!rows.is_empty());
            assert_eq!(rows.last().unwrap() - rows[0] + 1, rows.len(), "rows not contiguous");
            let cols_of = |r: usize| -> Vec<usize> {
                (0..8).filter(|&c| img[r * 8 + c] == 1.0).collect()
            };
            let first = cols_of(rows[0]);
            assert_eq!(first.last().unwrap() - first[0] + 1, first.len(), "cols not contiguous");
            for &r in &rows {
                assert_eq!(cols_of(r), first, "ragged rectangle");
            }
        }
    }

    #[test]
    fn toy_pixel_mean_is_stable_across_seeds() {
        let mean_and_se = |seed: u64| {
            let ds = make_toy_dataset(10_000, seed).unwrap();
            let per: Vec<f64> = (0..10_000)
                .map(|i| ds.images.data()[i * 64..(i + 1) * 64].iter().sum::<f64>() / 64.0)
                .collect();
            let m = per.iter().sum::<f64>() / per.len() as f64;
            let var = per.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (per.len() - 1) as f64;
            (m, var / per.len() as f64)
        };
        let (m1, v1) = mean_and_se(1);
        let (m2, v2) = mean_and_se(2);
        assert!((m1 - m2).abs() < 3.0 * (v1 + v2).sqrt(), "means {m1} vs {m2}");
    }

    #[test]
    fn batches_cover_the_dataset_exactly_once() {
        let ds = make_toy_dataset(10, 3).unwrap();
        let sizes: Vec<usize> = batch_iter(&ds, 4, 1, 0).map(|b| b.shape()[0]).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let collect_rows = |seed: u64, epoch: u64| -> Vec<Vec<u64>> {
            batch_iter(&ds, 4, seed, epoch)
                .flat_map(|b| {
                    let n = b.shape()[0];
                    (0..n)
                        .map(|i| b.data()[i * 64..(i + 1) * 64].iter().map(|v| v.to_bits()).collect())
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        assert_eq!(collect_rows(1, 0), collect_rows(1, 0), "same seed and epoch must agree");
        assert_ne!(collect_rows(1, 0), collect_rows(1, 1), "epochs should reshuffle");

        let mut seen = collect_rows(1, 5);
        let mut want: Vec<Vec<u64>> = (0..10)
            .map(|i| ds.images.data()[i * 64..(i + 1) * 64].iter().map(|v| v.to_bits()).collect())
            .collect();
        seen.sort();
        want.sort();
        assert_eq!(seen, want, "batches are not a permutation of the dataset");
    }
}
