//! Datasets: the two-moons synthetic generator and an IDX-format image
//! reader, plus the train/test container the pipeline consumes.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_y.len()
    }
}

/// Two interleaved half-circles before noise and rescaling: label 0 on the
/// upper arc (cos t, sin t), label 1 on the lower arc (1 - cos t,
/// 0.5 - sin t), t in [0, pi].
fn two_moons_raw(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<usize>) {
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let arc = |count: usize, i: usize| {
        if count <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    for i in 0..n_outer {
        let t = arc(n_outer, i);
        points.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = arc(n_inner, i);
        points.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        let gauss = Normal::new(0.0, noise).expect("noise is a valid std dev");
        for p in &mut points {
            p[0] += gauss.sample(rng);
            p[1] += gauss.sample(rng);
        }
    }
    (points, labels)
}

/// Affine per-axis map of the realized extent onto [0.1, 0.9].
fn rescale(points: &mut [[f64; 2]]) {
    for axis in 0..2 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points.iter() {
            lo = lo.min(p[axis]);
            hi = hi.max(p[axis]);
        }
        let span = hi - lo;
        for p in points.iter_mut() {
            p[axis] = if span > 0.0 {
                0.1 + 0.8 * (p[axis] - lo) / span
            } else {
                0.5
            };
        }
    }
}

/// Deterministic two-moons dataset: n points, seeded Gaussian noise, mapped
/// into [0.1, 0.9]^2, split 80/20 by a seeded shuffle.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("two-moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidInput(format!("negative or NaN noise {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut points, labels) = two_moons_raw(n, noise, &mut rng);
    rescale(&mut points);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 4 / 5;
    let build = |idx: &[usize]| -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * 2);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(points[i][0] as f32);
            data.push(points[i][1] as f32);
            y.push(labels[i]);
        }
        (Tensor::new(vec![idx.len(), 2], data).expect("row-major moons"), y)
    };
    let (train_x, train_y) = build(&order[..n_train]);
    let (test_x, test_y) = build(&order[n_train..]);
    Ok(Dataset { train_x, train_y, test_x, test_y, num_classes: 2 })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxCursor<'a> {
    bytes: &'a [u8],
    offset: u64,
}

impl<'a> IdxCursor<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut rest = &self.bytes[self.offset.min(self.bytes.len() as u64) as usize..];
        let v = rest.read_u32::<BigEndian>().map_err(|_| Error::Idx {
            offset: self.offset,
            reason: format!("truncated while reading {what}"),
        })?;
        self.offset += 4;
        Ok(v)
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.offset as usize;
        if self.bytes.len() < start + len {
            return Err(Error::Idx {
                offset: self.bytes.len() as u64,
                reason: format!(
                    "truncated {what}: need {} bytes, file has {}",
                    start + len,
                    self.bytes.len()
                ),
            });
        }
        self.offset += len as u64;
        Ok(&self.bytes[start..start + len])
    }
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut cur = IdxCursor { bytes, offset: 0 };
    let magic = cur.u32("images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            reason: format!("bad images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = cur.u32("image count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let raw = cur.payload(n * rows * cols, "image payload")?;
    let data = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, rows, cols, data))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = IdxCursor { bytes, offset: 0 };
    let magic = cur.u32("labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            reason: format!("bad labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = cur.u32("label count")? as usize;
    let raw = cur.payload(n, "label payload")?;
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// Parse an IDX image/label file pair into a `[n, 1, rows, cols]` tensor in
/// [0, 1] and integer labels. `subset` keeps the first N items in original
/// order.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    subset: Option<usize>,
) -> Result<(Tensor, Vec<usize>)> {
    let image_bytes = read_file(images.as_ref())?;
    let label_bytes = read_file(labels.as_ref())?;
    load_idx_bytes(&image_bytes, &label_bytes, subset)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::Idx {
            offset: 0,
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
    Ok(buf)
}

/// In-memory variant of `load_idx`; the file paths only add I/O.
pub fn load_idx_bytes(
    image_bytes: &[u8],
    label_bytes: &[u8],
    subset: Option<usize>,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, rows, cols, data) = parse_idx_images(image_bytes)?;
    let all_labels = parse_idx_labels(label_bytes)?;
    if all_labels.len() != n {
        return Err(Error::Idx {
            offset: 4,
            reason: format!("image count {n} != label count {}", all_labels.len()),
        });
    }
    let keep = match subset {
        Some(k) if k > n => {
            return Err(Error::Idx {
                offset: 4,
                reason: format!("subset {k} exceeds {n} available items"),
            })
        }
        Some(k) => k,
        None => n,
    };
    let x = Tensor::new(vec![keep, 1, rows, cols], data[..keep * rows * cols].to_vec())?;
    Ok((x, all_labels[..keep].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::{BigEndian, WriteBytesExt};

    #[test]
    fn moons_deterministic_split_and_range() {
        let a = gen_two_moons(100, 0.05, 7).unwrap();
        let b = gen_two_moons(100, 0.05, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_two_moons(100, 0.05, 8).unwrap();
        assert_ne!(a, c);

        assert_eq!(a.train_len(), 80);
        assert_eq!(a.test_len(), 20);
        for v in a.train_x.data().iter().chain(a.test_x.data()) {
            assert!((0.1..=0.9).contains(v), "{v} outside the mapped square");
        }
        // Roughly balanced labels overall.
        let ones: usize = a.train_y.iter().chain(&a.test_y).sum();
        assert_eq!(ones, 50);
    }

    #[test]
    fn zero_noise_points_sit_on_the_arcs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (points, labels) = two_moons_raw(64, 0.0, &mut rng);
        for (p, &y) in points.iter().zip(&labels) {
            let r2 = if y == 0 {
                p[0] * p[0] + p[1] * p[1]
            } else {
                (p[0] - 1.0).powi(2) + (p[1] - 0.5).powi(2)
            };
            assert!((r2 - 1.0).abs() < 1e-12, "off-arc point {p:?} label {y}");
        }
        // With noise the arc equation must break for most points.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (noisy, labels) = two_moons_raw(64, 0.1, &mut rng);
        let off = noisy
            .iter()
            .zip(&labels)
            .filter(|(p, &y)| {
                let r2 = if y == 0 {
                    p[0] * p[0] + p[1] * p[1]
                } else {
                    (p[0] - 1.0).powi(2) + (p[1] - 0.5).powi(2)
                };
                (r2 - 1.0).abs() > 1e-6
            })
            .count();
        assert!(off > 50);
    }

    #[test]
    fn rescale_hits_both_endpoints() {
        let mut pts = vec![[-3.0, 2.0], [5.0, 2.5], [1.0, 4.0]];
        rescale(&mut pts);
        let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
        assert_eq!(xs[0], 0.1);
        assert_eq!(xs[1], 0.9);
        assert_eq!(ys[0], 0.1);
        assert_eq!(ys[2], 0.9);
        // Interior points keep their relative position: 1 is halfway.
        assert!((xs[2] - 0.5).abs() < 1e-12);
    }

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
        img.write_u32::<BigEndian>(3).unwrap(); // 3 images
        img.write_u32::<BigEndian>(2).unwrap(); // 2x2
        img.write_u32::<BigEndian>(2).unwrap();
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60]);
        let mut lab = Vec::new();
        lab.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        lab.write_u32::<BigEndian>(3).unwrap();
        lab.extend_from_slice(&[7, 0, 3]);
        (img, lab)
    }

    #[test]
    fn idx_parses_shapes_scaling_and_subset() {
        let (img, lab) = idx_fixture();
        let (x, y) = load_idx_bytes(&img, &lab, None).unwrap();
        assert_eq!(x.shape(), &[3, 1, 2, 2]);
        assert_eq!(y, vec![7, 0, 3]);
        assert_eq!(x.data()[0], 0.0);
        assert!((x.data()[1] - 51.0 / 255.0).abs() < 1e-7);
        assert_eq!(x.data()[5], 1.0);

        let (x2, y2) = load_idx_bytes(&img, &lab, Some(2)).unwrap();
        assert_eq!(x2.shape(), &[2, 1, 2, 2]);
        assert_eq!(y2, vec![7, 0]);
        assert_eq!(x2.data(), &x.data()[..8]);

        assert!(load_idx_bytes(&img, &lab, Some(4)).is_err());
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation_with_offsets() {
        let (mut img, lab) = idx_fixture();
        img[3] = 0x02; // magic 0x00000802
        let err = load_idx_bytes(&img, &lab, None).unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 0, .. }), "{err}");

        let (img, lab) = idx_fixture();
        let err = load_idx_bytes(&img[..20], &lab, None).unwrap_err();
        match err {
            Error::Idx { offset, reason } => {
                assert_eq!(offset, 20);
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("unexpected error {other}"),
        }

        // Count mismatch between the two files.
        let (img, mut lab) = idx_fixture();
        lab[7] = 2;
        lab.truncate(10);
        let err = load_idx_bytes(&img, &lab, None).unwrap_err();
        assert!(err.to_string().contains("image count 3 != label count 2"), "{err}");
    }

    #[test]
    fn idx_reads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let (x, y) = load_idx(&ip, &lp, Some(1)).unwrap();
        assert_eq!(x.shape(), &[1, 1, 2, 2]);
        assert_eq!(y, vec![7]);
        assert!(load_idx(dir.path().join("missing"), &lp, None).is_err());
    }
}
