//! Synthetic grouped-classification data, deterministic splits and batching.
//!
//! Samples carry features, a class label and a sensitive-group indicator.
//! Features are class-conditional Gaussian clusters; groups other than the
//! reference group 0 have their class means contracted toward the global
//! centroid by the shift magnitude, which shrinks their class margins so
//! group gaps emerge under weight compression. Everything is a pure function
//! of its seed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    /// Per-group sample proportions, summing to 1.
    pub group_proportions: Vec<f64>,
    /// Class-conditional mean contraction for non-reference groups, in [0, 1].
    pub shift: f64,
    /// Per-sample feature shape, e.g. `[1, 8, 8]` or `[16]`.
    pub feature_shape: Vec<usize>,
    /// Standard deviation of the per-dimension Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_samples: 4000,
            num_classes: 4,
            num_groups: 2,
            group_proportions: vec![0.8, 0.2],
            shift: 0.55,
            feature_shape: vec![1, 8, 8],
            noise: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.group_proportions.len() != self.num_groups {
            return Err(Error::config(format!(
                "{} group proportions for {} groups",
                self.group_proportions.len(),
                self.num_groups
            )));
        }
        if self.group_proportions.iter().any(|&p| p < 0.0) {
            return Err(Error::config("negative group proportion".into()));
        }
        let sum: f64 = self.group_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("group proportions sum to {sum}, expected 1")));
        }
        if self.num_samples < self.num_classes * self.num_groups {
            return Err(Error::config("need at least one sample per (class, group) cell".into()));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::config(format!("shift {} outside [0, 1]", self.shift)));
        }
        if self.feature_shape.is_empty() || self.feature_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("empty feature shape".into()));
        }
        Ok(())
    }
}

/// Samples stored struct-of-arrays; `features[i]` is flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub feature_shape: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub num_classes: usize,
    pub num_groups: usize,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> GroupedDataset {
        GroupedDataset {
            feature_shape: self.feature_shape.clone(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            num_classes: self.num_classes,
            num_groups: self.num_groups,
        }
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups];
        for &g in &self.groups {
            counts[g] += 1;
        }
        counts
    }

    /// Batch tensor `[n, ...feature_shape]` over the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let per = self.features.first().map(Vec::len).unwrap_or(0);
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.features[i]);
        }
        Batch {
            features: Tensor::new(shape, data).expect("consistent feature shapes"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
        }
    }
}

/// One mini-batch with group labels attached.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn group_histogram(&self, num_groups: usize) -> Vec<usize> {
        let mut h = vec![0; num_groups];
        for &g in &self.groups {
            h[g] += 1;
        }
        h
    }
}

/// Integer counts summing to `total` that best match the proportions
/// (largest-remainder rounding).
pub fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let targets: Vec<f64> = proportions.iter().map(|&p| p * total as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|&t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // stable tie-break by index keeps this deterministic
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Class-conditional Gaussian clusters with group-contracted means.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<GroupedDataset> {
    spec.validate()?;
    let dim: usize = spec.feature_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Base class means: random directions scaled to a fixed norm.
    let mean_norm = 2.0;
    let mut class_means: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let v = gaussian_vec(&mut rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        class_means.push(v.iter().map(|x| x / norm * mean_norm).collect());
    }
    let centroid: Vec<f64> = (0..dim)
        .map(|d| class_means.iter().map(|m| m[d]).sum::<f64>() / spec.num_classes as f64)
        .collect();

    let group_counts = largest_remainder_counts(&spec.group_proportions, spec.num_samples);
    let noise = Normal::new(0.0, spec.noise).map_err(|_| Error::config("invalid noise level".into()))?;

    let mut features = Vec::with_capacity(spec.num_samples);
    let mut labels = Vec::with_capacity(spec.num_samples);
    let mut groups = Vec::with_capacity(spec.num_samples);
    for (g, &count) in group_counts.iter().enumerate() {
        let contraction = if g == 0 { 0.0 } else { spec.shift };
        for i in 0..count {
            let y = i % spec.num_classes;
            let mut x: Vec<f64> = (0..dim)
                .map(|d| {
                    let mean = (1.0 - contraction) * class_means[y][d] + contraction * centroid[d];
                    mean + noise.sample(&mut rng)
                })
                .collect();
            // keep features finite even for extreme specs
            for v in &mut x {
                debug_assert!(v.is_finite());
            }
            features.push(x);
            labels.push(y);
            groups.push(g);
        }
    }
    Ok(GroupedDataset {
        feature_shape: spec.feature_shape.clone(),
        features,
        labels,
        groups,
        num_classes: spec.num_classes,
        num_groups: spec.num_groups,
    })
}

/// Stratified split by (label, group). Every cell with at least 3 members is
/// represented in every split with a nonzero fraction.
pub fn split(
    dataset: &GroupedDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset, GroupedDataset)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f < 0.0) {
        return Err(Error::config("negative split fraction".into()));
    }
    let sum: f64 = fr.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions sum to {sum}, expected 1")));
    }

    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        cells.entry((dataset.labels[i], dataset.groups[i])).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let nonzero: Vec<usize> = (0..3).filter(|&k| fr[k] > 0.0).collect();
    for ((label, group), mut members) in cells {
        members.shuffle(&mut rng);
        let mut counts = largest_remainder_counts(&fr, members.len());
        if members.len() >= 3 {
            // guarantee representation in every nonzero split
            for &k in &nonzero {
                while counts[k] == 0 {
                    let donor = (0..3)
                        .filter(|&d| counts[d] > 1)
                        .max_by_key(|&d| counts[d])
                        .ok_or_else(|| {
                            Error::Data(format!(
                                "cannot stratify cell (label {label}, group {group}) of size {}",
                                members.len()
                            ))
                        })?;
                    counts[donor] -= 1;
                    counts[k] += 1;
                }
            }
        }
        let mut offset = 0;
        for k in 0..3 {
            parts[k].extend_from_slice(&members[offset..offset + counts[k]]);
            offset += counts[k];
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((dataset.subset(&parts[0]), dataset.subset(&parts[1]), dataset.subset(&parts[2])))
}

fn epoch_rng(shuffle_seed: u64, epoch: u64) -> ChaCha8Rng {
    // distinct, deterministic stream per (seed, epoch)
    ChaCha8Rng::seed_from_u64(shuffle_seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Shuffled mini-batches for one epoch; the last partial batch is kept.
pub fn batches(dataset: &GroupedDataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut epoch_rng(shuffle_seed, epoch));
    indices.chunks(batch_size).map(|chunk| dataset.gather(chunk)).collect()
}

/// Deterministic calibration batches: sampled without replacement until the
/// split is exhausted, then cycling the same permutation.
pub fn calibration_stream(
    train: &GroupedDataset,
    batch_size: usize,
    num_batches: usize,
    seed: u64,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(num_batches);
    let mut cursor = 0;
    for _ in 0..num_batches {
        let mut idx = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            idx.push(order[cursor]);
            cursor = (cursor + 1) % order.len();
        }
        out.push(train.gather(&idx));
    }
    out
}

// ── on-disk format ──────────────────────────────────────────────────────
//
// manifest.csv: header `id,label,group,path`, one row per sample, paths
// relative to the manifest directory. Each sample is a little-endian blob
// with a 16-byte header: u32 dtype code (1 = f64), u32 rank, four u16 dims.

const DTYPE_F64: u32 = 1;

fn write_blob(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    if shape.len() > 4 {
        return Err(Error::Data(format!("blob rank {} exceeds 4", shape.len())));
    }
    let mut buf = Vec::with_capacity(16 + data.len() * 8);
    buf.extend_from_slice(&DTYPE_F64.to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for i in 0..4 {
        let d = shape.get(i).copied().unwrap_or(0) as u16;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 {
        return Err(Error::Data(format!("blob {} too short", path.display())));
    }
    let dtype = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    if dtype != DTYPE_F64 {
        return Err(Error::Data(format!("unsupported dtype code {dtype}")));
    }
    let rank = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if rank > 4 {
        return Err(Error::Data(format!("blob rank {rank} exceeds 4")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 2 * i;
        shape.push(u16::from_le_bytes(buf[off..off + 2].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if buf.len() != 16 + numel * 8 {
        return Err(Error::Data(format!(
            "blob {} payload is {} bytes, expected {}",
            path.display(),
            buf.len() - 16,
            numel * 8
        )));
    }
    let data = buf[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

/// Write `manifest.csv` plus one blob per sample under `blobs/`.
pub fn write_manifest(dataset: &GroupedDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("blobs"))?;
    let mut csv = String::from("id,label,group,path\n");
    for i in 0..dataset.len() {
        let rel = format!("blobs/sample_{i:06}.bin");
        write_blob(&dir.join(&rel), &dataset.feature_shape, &dataset.features[i])?;
        csv.push_str(&format!("{i},{},{},{rel}\n", dataset.labels[i], dataset.groups[i]));
    }
    std::fs::write(dir.join("manifest.csv"), csv)?;
    Ok(())
}

/// Load a dataset from a `manifest.csv` written by [`write_manifest`].
pub fn load_manifest(manifest_path: &Path) -> Result<GroupedDataset> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("id,label,group,path") => {}
        other => {
            return Err(Error::Data(format!("bad manifest header: {other:?}")));
        }
    }
    let mut feature_shape: Option<Vec<usize>> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!("manifest line {}: expected 4 fields", lineno + 2)));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad label", lineno + 2)))?;
        let group: usize = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad group", lineno + 2)))?;
        let (shape, data) = read_blob(&dir.join(fields[3]))?;
        match &feature_shape {
            None => feature_shape = Some(shape),
            Some(expected) if *expected != shape => {
                return Err(Error::Data(format!(
                    "manifest line {}: feature shape {shape:?} != {expected:?}",
                    lineno + 2
                )));
            }
            _ => {}
        }
        features.push(data);
        labels.push(label);
        groups.push(group);
    }
    if features.is_empty() {
        return Err(Error::Data("empty manifest".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let num_groups = groups.iter().max().unwrap() + 1;
    Ok(GroupedDataset {
        feature_shape: feature_shape.unwrap(),
        features,
        labels,
        groups,
        num_classes,
        num_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            num_samples: 60,
            num_classes: 3,
            num_groups: 2,
            group_proportions: vec![0.8, 0.2],
            shift: 0.5,
            feature_shape: vec![4],
            noise: 0.5,
            seed: 9,
        }
    }

    #[test]
    fn largest_remainder_exact_counts() {
        assert_eq!(largest_remainder_counts(&[0.8, 0.2], 1000), vec![800, 200]);
        assert_eq!(largest_remainder_counts(&[0.5, 0.5], 5), vec![3, 2]);
        let c = largest_remainder_counts(&[0.2, 0.4, 0.4], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_counts_match_proportions_exactly() {
        let mut spec = tiny_spec();
        spec.num_samples = 1000;
        let d = generate_synthetic(&spec).unwrap();
        assert_eq!(d.group_counts(), vec![800, 200]);
    }

    #[test]
    fn zero_shift_groups_share_class_means() {
        let mut spec = tiny_spec();
        spec.shift = 0.0;
        spec.num_samples = 6000;
        spec.noise = 0.3;
        let d = generate_synthetic(&spec).unwrap();
        // per-(class, group) sample means should agree across groups
        let dim = 4;
        for y in 0..spec.num_classes {
            let mut means = Vec::new();
            for g in 0..2 {
                let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == y && d.groups[i] == g).collect();
                let m: Vec<f64> = (0..dim)
                    .map(|k| idx.iter().map(|&i| d.features[i][k]).sum::<f64>() / idx.len() as f64)
                    .collect();
                means.push(m);
            }
            for k in 0..dim {
                assert!((means[0][k] - means[1][k]).abs() < 0.15, "class {y} dim {k}");
            }
        }
    }

    #[test]
    fn invalid_proportions_rejected() {
        let mut spec = tiny_spec();
        spec.group_proportions = vec![0.9, 0.2];
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn full_train_split_is_identity() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let (train, val, test) = split(&d, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(train, d);
        assert!(val.is_empty());
        assert!(test.is_empty());
    }

    #[test]
    fn split_cell_sizes_track_fractions() {
        let mut spec = tiny_spec();
        spec.num_samples = 600;
        spec.group_proportions = vec![0.5, 0.5];
        let d = generate_synthetic(&spec).unwrap();
        let (train, val, test) = split(&d, (0.6, 0.2, 0.2), 5).unwrap();
        // cells are 100 each; expect 60/20/20 within 1
        for part in [(&train, 60.0), (&val, 20.0), (&test, 20.0)] {
            let (set, expect) = part;
            for y in 0..3 {
                for g in 0..2 {
                    let n = (0..set.len()).filter(|&i| set.labels[i] == y && set.groups[i] == g).count();
                    assert!((n as f64 - expect).abs() <= 1.0, "cell ({y},{g}): {n}");
                }
            }
        }
    }

    #[test]
    fn split_seed_changes_membership_not_counts() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let (a, _, _) = split(&d, (0.6, 0.2, 0.2), 1).unwrap();
        let (b, _, _) = split(&d, (0.6, 0.2, 0.2), 2).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.group_counts(), b.group_counts());
        assert_ne!(a.features, b.features);
    }

    #[test]
    fn small_cells_reach_every_split() {
        let mut spec = tiny_spec();
        spec.num_samples = 18; // cells of 3 in group 0, ~1 in group 1
        spec.group_proportions = vec![1.0, 0.0];
        spec.num_groups = 2;
        let d = generate_synthetic(&spec).unwrap();
        let (train, val, test) = split(&d, (0.6, 0.2, 0.2), 7).unwrap();
        // every (y, 0) cell has 6 members >= 3, so all splits see each class
        for set in [&train, &val, &test] {
            for y in 0..3 {
                assert!(set.labels.contains(&y), "class {y} missing");
            }
        }
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let mut spec = tiny_spec();
        spec.num_samples = 10;
        spec.num_classes = 2;
        spec.num_groups = 2;
        let d = generate_synthetic(&spec).unwrap();
        let bs = batches(&d, 4, 3, 0);
        assert_eq!(bs.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let one = batches(&d, 100, 3, 0);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 10);
        let again = batches(&d, 4, 3, 0);
        for (a, b) in bs.iter().zip(&again) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.features, b.features);
        }
        let other_epoch = batches(&d, 4, 3, 1);
        assert_ne!(
            bs.iter().flat_map(|b| b.labels.clone()).collect::<Vec<_>>(),
            other_epoch.iter().flat_map(|b| b.labels.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn batch_group_histogram_sums_to_batch_size() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        for b in batches(&d, 7, 1, 0) {
            assert_eq!(b.group_histogram(2).iter().sum::<usize>(), b.len());
        }
    }

    #[test]
    fn calibration_stream_is_deterministic_and_cycles() {
        let mut spec = tiny_spec();
        spec.num_samples = 12;
        let d = generate_synthetic(&spec).unwrap();
        let a = calibration_stream(&d, 5, 4, 77);
        let b = calibration_stream(&d, 5, 4, 77);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features, y.features);
        }
        // 4 batches of 5 over 12 samples: wraps after the 12th draw
        let single = calibration_stream(&d, 5, 1, 77);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 5);
    }

    #[test]
    fn manifest_roundtrip_is_exact() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&d, dir.path()).unwrap();
        let back = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn blob_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_blob(&p, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (shape, data) = read_blob(&p).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0]);
        std::fs::write(&p, b"short").unwrap();
        assert!(read_blob(&p).is_err());
    }
}
