//! Benchmark data: the adding problem and pixel-by-pixel MNIST.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndcore::Rng;
use crate::network::{SequenceBatch, Targets};

pub const ADDING_MAGIC: &[u8; 8] = b"ADDP0001";
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const MNIST_CLASSES: usize = 10;

/// Anything the training loop can draw minibatches from.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Per-step input width.
    fn input_dim(&self) -> usize;
    fn batch(&self, indices: &[usize]) -> Result<SequenceBatch>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AddingExample {
    pub signal: Vec<f64>,
    pub mask: Vec<f64>,
    pub target: f64,
}

impl AddingExample {
    /// Positions of the two marked steps, if the mask is well formed.
    pub fn marked(&self) -> Option<(usize, usize)> {
        let mut ones = Vec::with_capacity(2);
        for (t, &m) in self.mask.iter().enumerate() {
            if m == 1.0 {
                ones.push(t);
            } else if m != 0.0 {
                return None;
            }
        }
        match ones[..] {
            [i, j] => Some((i, j)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AddingDataset {
    pub steps: usize,
    pub examples: Vec<AddingExample>,
}

/// `n` adding-problem sequences of length `steps`. Both marked positions are
/// uniform over all unordered pairs in `0..steps`.
pub fn gen_adding(steps: usize, n: usize, rng: &mut Rng) -> Result<AddingDataset> {
    if steps < 2 {
        return Err(Error::invalid(format!("adding problem needs T >= 2, got {steps}")));
    }
    let examples = (0..n)
        .map(|_| {
            let signal: Vec<f64> = (0..steps).map(|_| rng.uniform()).collect();
            let i = rng.below(steps);
            let mut j = rng.below(steps - 1);
            if j >= i {
                j += 1;
            }
            let mut mask = vec![0.0; steps];
            mask[i] = 1.0;
            mask[j] = 1.0;
            let target = signal[i.min(j)] + signal[i.max(j)];
            AddingExample { signal, mask, target }
        })
        .collect();
    Ok(AddingDataset { steps, examples })
}

/// Mean squared error of always predicting 1.0.
pub fn baseline_mse(ds: &AddingDataset) -> f64 {
    if ds.examples.is_empty() {
        return f64::NAN;
    }
    let s: f64 = ds.examples.iter().map(|e| (1.0 - e.target).powi(2)).sum();
    s / ds.examples.len() as f64
}

impl Dataset for AddingDataset {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn batch(&self, indices: &[usize]) -> Result<SequenceBatch> {
        let b = indices.len();
        let t_max = self.steps;
        let mut inputs = vec![0.0; t_max * b * 2];
        let mut targets = Vec::with_capacity(b);
        for (lane, &idx) in indices.iter().enumerate() {
            let ex = self
                .examples
                .get(idx)
                .ok_or_else(|| Error::invalid(format!("example index {idx} out of range ({})", self.len())))?;
            for t in 0..t_max {
                let at = (t * b + lane) * 2;
                inputs[at] = ex.signal[t];
                inputs[at + 1] = ex.mask[t];
            }
            targets.push(ex.target);
        }
        SequenceBatch::new(t_max, b, 2, inputs, Targets::Regression(targets))
    }
}

pub fn adding_to_bytes(ds: &AddingDataset) -> Vec<u8> {
    let per = 2 * ds.steps + 1;
    let mut out = Vec::with_capacity(24 + ds.examples.len() * per * 8);
    out.extend_from_slice(ADDING_MAGIC);
    out.extend_from_slice(&(ds.steps as i64).to_le_bytes());
    out.extend_from_slice(&(ds.examples.len() as i64).to_le_bytes());
    for ex in &ds.examples {
        for x in ex.signal.iter().chain(&ex.mask).chain(std::iter::once(&ex.target)) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn adding_from_bytes(bytes: &[u8]) -> Result<AddingDataset> {
    let err = |offset: usize, reason: String| Error::Format {
        what: "adding dataset".into(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 24 {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..8] != ADDING_MAGIC {
        return Err(err(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8]))));
    }
    let read_i64 = |at: usize| i64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (steps, n) = (read_i64(8), read_i64(16));
    if steps < 2 {
        return Err(err(8, format!("sequence length {steps} < 2")));
    }
    if n < 0 {
        return Err(err(16, format!("negative example count {n}")));
    }
    let (steps, n) = (steps as usize, n as usize);
    let per = (2 * steps + 1)
        .checked_mul(8)
        .ok_or_else(|| err(8, "sequence length overflows".into()))?;
    let expected = per.checked_mul(n).and_then(|x| x.checked_add(24));
    if expected != Some(bytes.len()) {
        return Err(err(
            bytes.len().min(expected.unwrap_or(usize::MAX)),
            format!("expected {} bytes for T={steps}, n={n}, found {}", expected.map_or("overflow".into(), |e| e.to_string()), bytes.len()),
        ));
    }
    let mut examples = Vec::with_capacity(n);
    for k in 0..n {
        let base = 24 + k * per;
        let vals: Vec<f64> = bytes[base..base + per]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let ex = AddingExample {
            signal: vals[..steps].to_vec(),
            mask: vals[steps..2 * steps].to_vec(),
            target: vals[2 * steps],
        };
        match ex.marked() {
            Some((i, j)) if ex.signal[i] + ex.signal[j] == ex.target => examples.push(ex),
            Some(_) => return Err(err(base + 2 * steps * 8, format!("example {k}: target is not the sum of the marked signals"))),
            None => return Err(err(base + steps * 8, format!("example {k}: mask must hold exactly two ones"))),
        }
    }
    Ok(AddingDataset { steps, examples })
}

pub fn save_adding(path: impl AsRef<Path>, ds: &AddingDataset) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&adding_to_bytes(ds))?;
    Ok(())
}

pub fn load_adding(path: impl AsRef<Path>) -> Result<AddingDataset> {
    adding_from_bytes(&fs::read(path)?)
}

/// Raw MNIST images and labels as stored in the IDX files.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistSeqDataset {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows·cols` bytes, row-major per image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistSeqDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            what: what.into(),
            offset: bytes.len() as u64,
            reason: "truncated header".into(),
        })
}

/// Parses an IDX image file; returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let what = "IDX images";
    let magic = read_be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            what: what.into(),
            offset: 0,
            reason: format!("bad magic 0x{magic:08X}, expected 0x{IDX_IMAGES_MAGIC:08X}"),
        });
    }
    let count = read_be_u32(bytes, 4, what)? as usize;
    let rows = read_be_u32(bytes, 8, what)? as usize;
    let cols = read_be_u32(bytes, 12, what)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Format {
            what: what.into(),
            offset: bytes.len() as u64,
            reason: format!("expected {need} pixel bytes for {count}×{rows}×{cols}, found {}", body.len()),
        });
    }
    Ok((count, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "IDX labels";
    let magic = read_be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            what: what.into(),
            offset: 0,
            reason: format!("bad magic 0x{magic:08X}, expected 0x{IDX_LABELS_MAGIC:08X}"),
        });
    }
    let count = read_be_u32(bytes, 4, what)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format {
            what: what.into(),
            offset: bytes.len() as u64,
            reason: format!("expected {count} labels, found {}", body.len()),
        });
    }
    if let Some(pos) = body.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(Error::Format {
            what: what.into(),
            offset: (8 + pos) as u64,
            reason: format!("label {} out of range", body[pos]),
        });
    }
    Ok(body.to_vec())
}

pub fn mnist_from_bytes(images: &[u8], labels: &[u8]) -> Result<MnistSeqDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Format {
            what: "IDX labels".into(),
            offset: 4,
            reason: format!("label count {} does not match image count {count}", labels.len()),
        });
    }
    Ok(MnistSeqDataset {
        rows,
        cols,
        images: pixels,
        labels,
    })
}

pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<MnistSeqDataset> {
    mnist_from_bytes(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Fisher–Yates permutation of `0..n`.
pub fn make_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut p);
    p
}

pub fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

/// Average-pools a square image to `side × side` (values still 0..255).
pub fn downsample(image: &[u8], native: usize, side: usize) -> Result<Vec<f64>> {
    if side == 0 || !native.is_multiple_of(side) {
        return Err(Error::invalid(format!("downsample side {side} does not divide {native}")));
    }
    let f = native / side;
    let area = (f * f) as f64;
    let mut out = vec![0.0; side * side];
    for (k, o) in out.iter_mut().enumerate() {
        let (r, c) = (k / side, k % side);
        let mut s = 0.0;
        for dr in 0..f {
            for dc in 0..f {
                s += image[(r * f + dr) * native + c * f + dc] as f64;
            }
        }
        *o = s / area;
    }
    Ok(out)
}

/// Turns images into `T = side²` one-dimensional steps in scanline order,
/// scaled to [0, 1]. The optional permutation (over the final `side²`
/// positions) is applied identically to every image.
pub fn to_sequence_batch(
    ds: &MnistSeqDataset,
    indices: &[usize],
    permutation: Option<&[usize]>,
    downsample_to: Option<usize>,
) -> Result<SequenceBatch> {
    if ds.rows != ds.cols {
        return Err(Error::invalid(format!("images must be square, got {}×{}", ds.rows, ds.cols)));
    }
    let native = ds.rows;
    let side = downsample_to.unwrap_or(native);
    if side == 0 || !native.is_multiple_of(side) {
        return Err(Error::invalid(format!("downsample side {side} does not divide {native}")));
    }
    let t_max = side * side;
    if let Some(p) = permutation {
        if p.len() != t_max || !is_permutation(p) {
            return Err(Error::invalid(format!("permutation must be a bijection on 0..{t_max}")));
        }
    }
    let b = indices.len();
    let mut inputs = vec![0.0; t_max * b];
    let mut labels = Vec::with_capacity(b);
    for (lane, &idx) in indices.iter().enumerate() {
        if idx >= ds.len() {
            return Err(Error::invalid(format!("image index {idx} out of range ({})", ds.len())));
        }
        let pixels = downsample(ds.image(idx), native, side)?;
        for t in 0..t_max {
            let src = permutation.map_or(t, |p| p[t]);
            inputs[t * b + lane] = pixels[src] / 255.0;
        }
        labels.push(ds.labels[idx] as usize);
    }
    SequenceBatch::new(t_max, b, 1, inputs, Targets::Classes(labels))
}

/// MNIST with a fixed view (permutation, downsampling) for training.
#[derive(Clone, Debug)]
pub struct MnistTask {
    pub data: MnistSeqDataset,
    pub permutation: Option<Vec<usize>>,
    pub side: Option<usize>,
}

impl MnistTask {
    pub fn new(data: MnistSeqDataset, permutation: Option<Vec<usize>>, side: Option<usize>) -> Result<Self> {
        let task = Self { data, permutation, side };
        if !task.data.is_empty() {
            task.batch(&[0])?;
        }
        Ok(task)
    }

    pub fn steps(&self) -> usize {
        let s = self.side.unwrap_or(self.data.rows);
        s * s
    }
}

impl Dataset for MnistTask {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn batch(&self, indices: &[usize]) -> Result<SequenceBatch> {
        to_sequence_batch(&self.data, indices, self.permutation.as_deref(), self.side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_adding_rejects_short_sequences() {
        assert!(gen_adding(1, 5, &mut Rng::new(0)).is_err());
        assert!(gen_adding(0, 5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn two_step_sequences_mark_both() {
        let ds = gen_adding(2, 50, &mut Rng::new(3)).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.mask, vec![1.0, 1.0]);
            assert_eq!(ex.target, ex.signal[0] + ex.signal[1]);
        }
    }

    #[test]
    fn caption_example_target() {
        // second and seventh numbers marked, summing to 1.2
        let mut signal = vec![0.0; 10];
        signal[1] = 0.5;
        signal[6] = 0.7;
        let mut mask = vec![0.0; 10];
        mask[1] = 1.0;
        mask[6] = 1.0;
        let ex = AddingExample { signal, mask, target: 0.5 + 0.7 };
        assert_eq!(ex.marked(), Some((1, 6)));
        assert!((ex.target - 1.2).abs() < 1e-15);
        let ds = AddingDataset { steps: 10, examples: vec![ex] };
        assert!(adding_from_bytes(&adding_to_bytes(&ds)).is_ok());
    }

    #[test]
    fn every_example_is_well_formed() {
        let ds = gen_adding(30, 2000, &mut Rng::new(5)).unwrap();
        let mut first_seen = [false; 30];
        for ex in &ds.examples {
            let (i, j) = ex.marked().expect("two ones");
            assert!(i < j);
            assert_eq!(ex.target, ex.signal[i] + ex.signal[j]);
            assert!(ex.signal.iter().all(|s| (0.0..1.0).contains(s)));
            first_seen[i] = true;
        }
        // positions are not confined to any part of the sequence
        assert!(first_seen[..29].iter().all(|&s| s));
    }

    #[test]
    fn target_mean_is_one() {
        let ds = gen_adding(5, 100_000, &mut Rng::new(8)).unwrap();
        let mean = ds.examples.iter().map(|e| e.target).sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn baseline_examples() {
        let one = AddingDataset {
            steps: 2,
            examples: vec![AddingExample { signal: vec![0.25, 0.75], mask: vec![1.0, 1.0], target: 1.0 }],
        };
        assert_eq!(baseline_mse(&one), 0.0);
        let ds = gen_adding(10, 10_000, &mut Rng::new(1)).unwrap();
        assert!((baseline_mse(&ds) - 1.0 / 6.0).abs() < 0.005);
    }

    #[test]
    fn adding_batch_layout() {
        let ds = gen_adding(4, 3, &mut Rng::new(2)).unwrap();
        let b = ds.batch(&[2, 0]).unwrap();
        assert_eq!((b.steps(), b.lanes(), b.dim()), (4, 2, 2));
        assert_eq!(b.input(3, 0), &[ds.examples[2].signal[3], ds.examples[2].mask[3]]);
        assert_eq!(b.input(1, 1), &[ds.examples[0].signal[1], ds.examples[0].mask[1]]);
        assert_eq!(b.targets, Targets::Regression(vec![ds.examples[2].target, ds.examples[0].target]));
        assert!(ds.batch(&[3]).is_err());
    }

    #[test]
    fn adding_rejects_bad_files() {
        let ds = gen_adding(3, 2, &mut Rng::new(0)).unwrap();
        let good = adding_to_bytes(&ds);
        assert_eq!(adding_from_bytes(&good).unwrap(), ds);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(adding_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(adding_from_bytes(&good[..good.len() - 1]).is_err());
        let mut bad_mask = good.clone();
        bad_mask[24 + 3 * 8..24 + 4 * 8].copy_from_slice(&0.5f64.to_le_bytes());
        assert!(adding_from_bytes(&bad_mask).is_err());
    }

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn hand_dataset() -> MnistSeqDataset {
        let pixels: Vec<u8> = (0..2 * 784).map(|k| (k % 251) as u8).collect();
        mnist_from_bytes(&idx_images(2, 28, 28, &pixels), &idx_labels(&[7, 3])).unwrap()
    }

    #[test]
    fn idx_round_trip_and_corruption() {
        let ds = hand_dataset();
        assert_eq!((ds.len(), ds.rows, ds.cols), (2, 28, 28));

        let pixels = vec![0u8; 2 * 784];
        let mut magic = idx_images(2, 28, 28, &pixels);
        magic[..4].copy_from_slice(&0xDEADBEEFu32.to_be_bytes());
        assert!(matches!(parse_idx_images(&magic), Err(Error::Format { offset: 0, .. })));

        let truncated = idx_images(2, 28, 28, &pixels[..1000]);
        assert!(parse_idx_images(&truncated).is_err());

        let mismatch = mnist_from_bytes(&idx_images(2, 28, 28, &pixels), &idx_labels(&[1, 2, 3]));
        assert!(matches!(mismatch, Err(Error::Format { .. })));

        assert!(parse_idx_labels(&idx_labels(&[10])).is_err());
        assert!(parse_idx_images(&[0, 0]).is_err());
    }

    #[test]
    fn scanline_sequences() {
        let ds = hand_dataset();
        let b = to_sequence_batch(&ds, &[1, 0], None, None).unwrap();
        assert_eq!((b.steps(), b.dim()), (784, 1));
        assert_eq!(b.input(0, 0)[0], ds.image(1)[0] as f64 / 255.0);
        assert_eq!(b.input(29, 1)[0], ds.image(0)[29] as f64 / 255.0);
        assert_eq!(b.targets, Targets::Classes(vec![3, 7]));

        let ident: Vec<usize> = (0..784).collect();
        let p = to_sequence_batch(&ds, &[1, 0], Some(&ident), None).unwrap();
        assert_eq!(p, b);
    }

    #[test]
    fn permuted_sequences_follow_the_permutation() {
        let ds = hand_dataset();
        let perm = make_permutation(784, 7);
        let plain = to_sequence_batch(&ds, &[0, 1], None, None).unwrap();
        let b = to_sequence_batch(&ds, &[0, 1], Some(&perm), None).unwrap();
        for t in [0, 100, 783] {
            for lane in 0..2 {
                assert_eq!(b.input(t, lane), plain.input(perm[t], lane));
            }
        }
        assert_eq!(b.targets, plain.targets);
        assert!(to_sequence_batch(&ds, &[0], Some(&[0, 0, 1]), None).is_err());
    }

    #[test]
    fn downsampling_pools_blocks() {
        let ds = hand_dataset();
        let b = to_sequence_batch(&ds, &[0], None, Some(14)).unwrap();
        assert_eq!(b.steps(), 196);
        let img = ds.image(0);
        // output (r, c) = mean of the 2×2 block at (2r, 2c)
        for (r, c) in [(0, 0), (3, 5), (13, 13)] {
            let s: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dr, dc)| img[(2 * r + dr) * 28 + 2 * c + dc] as f64)
                .sum();
            assert_eq!(b.input(r * 14 + c, 0)[0], s / 4.0 / 255.0);
        }
        assert_eq!(to_sequence_batch(&ds, &[0], None, Some(7)).unwrap().steps(), 49);
        assert!(to_sequence_batch(&ds, &[0], None, Some(5)).is_err());
        assert!(to_sequence_batch(&ds, &[5], None, None).is_err());
    }

    #[test]
    fn permutations() {
        let a = make_permutation(784, 7);
        assert_eq!(a, make_permutation(784, 7));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..784).collect::<Vec<_>>());
        assert_ne!(make_permutation(784, 1), make_permutation(784, 2));
        assert!(is_permutation(&a));
        assert!(!is_permutation(&[0, 2]));
    }
}
