//! Datasets: a seeded synthetic generator whose classes differ only in
//! second-order structure, and an optional folder loader for PPM images.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset.{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

/// Procedural textures. Every image is tiled with `cell × cell` patches, each
/// a random combination `Σ z_k·pattern_k` of a fixed dictionary with
/// `z ~ N(0, I)`. A class fixes one coefficient pair `(i, j)` and a sign, and
/// correlates `z_i` with `z_j` at strength `correlation`. Every class has the
/// same per-pixel mean (zero) and the same expected image energy, so class
/// identity lives in products of pixel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_cell")]
    pub cell: usize,
    #[serde(default = "default_dictionary")]
    pub dictionary: usize,
    #[serde(default = "default_correlation")]
    pub correlation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Seed for the dictionary and the train/test draws; independent of the
    /// model seed so all seeds of an experiment see the same data.
    #[serde(default)]
    pub seed: u64,
}

fn default_cell() -> usize {
    4
}
fn default_dictionary() -> usize {
    6
}
fn default_correlation() -> f64 {
    0.8
}
fn default_noise() -> f64 {
    0.1
}

/// Images stored NCHW, flattened per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub image_size: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub n_classes: usize,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self, image_size: usize) -> Result<(), DataError> {
        let bad = |field, reason: String| Err(DataError::Invalid { field, reason });
        if self.cell == 0 || !image_size.is_multiple_of(self.cell) {
            return bad("cell", format!("{} must divide image_size {image_size}", self.cell));
        }
        let pairs = self.dictionary * self.dictionary.saturating_sub(1) / 2;
        if self.n_classes < 2 || self.n_classes > 2 * pairs {
            return bad(
                "n_classes",
                format!("need 2..={} classes for a dictionary of {}", 2 * pairs, self.dictionary),
            );
        }
        if self.samples_per_class == 0 || self.test_per_class == 0 {
            return bad("samples_per_class", "train and test counts must be positive".into());
        }
        if self.dictionary > 3 * self.cell * self.cell {
            return bad("dictionary", format!("at most {} patterns fit a cell", 3 * self.cell * self.cell));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return bad("correlation", format!("{} not in [0, 1)", self.correlation));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return bad("noise", format!("{} must be finite and non-negative", self.noise));
        }
        Ok(())
    }

    /// `(i, j, sign)` for each class.
    pub fn class_codes(&self) -> Vec<(usize, usize, f64)> {
        let mut pairs = Vec::new();
        for i in 0..self.dictionary {
            for j in i + 1..self.dictionary {
                pairs.push((i, j));
            }
        }
        (0..self.n_classes)
            .map(|c| {
                let (i, j) = pairs[(c / 2) % pairs.len()];
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                (i, j, sign)
            })
            .collect()
    }

    /// Pure function of the spec.
    pub fn generate(&self, image_size: usize) -> Result<Dataset, DataError> {
        self.validate(image_size)?;
        const CHANNELS: usize = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let cell_len = CHANNELS * self.cell * self.cell;
        // Orthogonal patterns keep the expected image energy class-independent.
        let scale = (cell_len as f64 / self.dictionary as f64).sqrt();
        let mut dictionary: Vec<Vec<f64>> = Vec::with_capacity(self.dictionary);
        while dictionary.len() < self.dictionary {
            let mut v: Vec<f64> = (0..cell_len).map(|_| rng.sample(StandardNormal)).collect();
            for d in &dictionary {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / (scale * scale);
                for (a, b) in v.iter_mut().zip(d) {
                    *a -= dot * b;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                dictionary.push(v.into_iter().map(|x| x * scale / n).collect());
            }
        }
        let codes = self.class_codes();
        let train = self.draw(
            &mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x7472_6169_6e00),
            &dictionary,
            &codes,
            image_size,
            self.samples_per_class,
        );
        let test = self.draw(
            &mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x7465_7374_0000),
            &dictionary,
            &codes,
            image_size,
            self.test_per_class,
        );
        Ok(Dataset {
            train,
            test,
            n_classes: self.n_classes,
        })
    }

    fn draw(
        &self,
        rng: &mut ChaCha8Rng,
        dictionary: &[Vec<f64>],
        codes: &[(usize, usize, f64)],
        image_size: usize,
        per_class: usize,
    ) -> Split {
        const CHANNELS: usize = 3;
        let cells = image_size / self.cell;
        let rho = self.correlation;
        let rho_c = (1.0 - rho * rho).sqrt();
        let mut images = Vec::with_capacity(per_class * codes.len() * CHANNELS * image_size * image_size);
        let mut labels = Vec::with_capacity(per_class * codes.len());
        let mut z = vec![0.0; self.dictionary];
        let mut img = vec![0.0f32; CHANNELS * image_size * image_size];
        // Interleave classes so any prefix is balanced.
        for _ in 0..per_class {
            for (label, &(i, j, sign)) in codes.iter().enumerate() {
                for cy in 0..cells {
                    for cx in 0..cells {
                        for zk in z.iter_mut() {
                            *zk = rng.sample(StandardNormal);
                        }
                        z[j] = sign * rho * z[i] + rho_c * z[j];
                        for ch in 0..CHANNELS {
                            for py in 0..self.cell {
                                for px in 0..self.cell {
                                    let k = (ch * self.cell + py) * self.cell + px;
                                    let mut v: f64 = z.iter().zip(dictionary).map(|(a, d)| a * d[k]).sum();
                                    v += self.noise * rng.sample::<f64, _>(StandardNormal);
                                    let (y, x) = (cy * self.cell + py, cx * self.cell + px);
                                    img[(ch * image_size + y) * image_size + x] = v as f32;
                                }
                            }
                        }
                    }
                }
                images.extend_from_slice(&img);
                labels.push(label);
            }
        }
        Split {
            images,
            labels,
            channels: CHANNELS,
            image_size,
        }
    }
}

/// `root/<class>/<file>.ppm` with classes sorted by directory name. Files are
/// assigned to the test split when a stable hash of their name falls below
/// `test_fraction`. Pixels are scaled to `[-1, 1]`.
pub fn load_folder(root: &Path, image_size: usize, test_fraction: f64) -> Result<Dataset, DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    let mut classes: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.len() < 2 {
        return Err(DataError::Invalid {
            field: "path",
            reason: format!("{} has fewer than two class directories", root.display()),
        });
    }
    let empty = || Split {
        images: Vec::new(),
        labels: Vec::new(),
        channels: 3,
        image_size,
    };
    let (mut train, mut test) = (empty(), empty());
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        files.sort();
        for f in files {
            let bytes = fs::read(&f).map_err(io(&f))?;
            let pixels = parse_ppm(&bytes, image_size).map_err(|reason| DataError::Format {
                path: f.clone(),
                reason,
            })?;
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let split = if name_fraction(&name) < test_fraction {
                &mut test
            } else {
                &mut train
            };
            split.images.extend(pixels);
            split.labels.push(label);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(DataError::Invalid {
            field: "test_fraction",
            reason: format!("split left train={} test={} images", train.len(), test.len()),
        });
    }
    Ok(Dataset {
        train,
        test,
        n_classes: classes.len(),
    })
}

fn name_fraction(name: &str) -> f64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Binary P6 with maxval ≤ 255, returned NCHW.
fn parse_ppm(bytes: &[u8], image_size: usize) -> Result<Vec<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s}: {e}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w != image_size || h != image_size {
        return Err(format!("{w}×{h} image, expected {image_size}×{image_size}"));
    }
    if max == 0 || max > 255 {
        return Err(format!("maxval {max} unsupported"));
    }
    let data = bytes.get(pos..pos + 3 * w * h).ok_or("truncated pixel data")?;
    let mut out = vec![0.0f32; 3 * w * h];
    for (p, rgb) in data.chunks(3).enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            out[c * w * h + p] = 2.0 * v as f32 / max as f32 - 1.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            n_classes: 4,
            samples_per_class: 30,
            test_per_class: 10,
            cell: 4,
            dictionary: 4,
            correlation: 0.8,
            noise: 0.1,
            seed: 9,
        }
    }

    #[test]
    fn generation_is_pure_and_shaped() {
        let a = spec().generate(8).unwrap();
        let b = spec().generate(8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 120);
        assert_eq!(a.test.len(), 40);
        assert_eq!(a.train.images.len(), 120 * 3 * 64);
        assert_eq!(&a.train.labels[..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn train_and_test_are_disjoint() {
        let d = spec().generate(8).unwrap();
        for i in 0..d.test.len() {
            for j in 0..d.train.len() {
                assert_ne!(d.test.image(i), d.train.image(j));
            }
        }
    }

    #[test]
    fn classes_share_first_order_statistics() {
        let mut s = spec();
        s.samples_per_class = 400;
        let d = s.generate(8).unwrap();
        let n = d.train.sample_len();
        let mut stats = vec![(0.0f64, 0.0f64, 0usize); 4];
        for i in 0..d.train.len() {
            let st = &mut stats[d.train.labels[i]];
            for &v in d.train.image(i) {
                st.0 += v as f64;
                st.1 += (v as f64).powi(2);
            }
            st.2 += n;
        }
        for (sum, sq, cnt) in stats {
            let mean = sum / cnt as f64;
            let var = sq / cnt as f64 - mean * mean;
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((var - 1.01).abs() < 0.1, "var {var}");
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = spec();
        s.n_classes = 50;
        let e = s.generate(8).unwrap_err().to_string();
        assert!(e.contains("n_classes"), "{e}");
        let e = spec().generate(6).unwrap_err().to_string();
        assert!(e.contains("cell"), "{e}");
    }

    #[test]
    fn folder_loader_reads_ppm_classes() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a", "b"] {
            let cdir = dir.path().join(class);
            fs::create_dir(&cdir).unwrap();
            for k in 0..20 {
                let mut bytes = b"P6\n# c\n2 2\n255\n".to_vec();
                bytes.extend([k as u8; 12]);
                fs::write(cdir.join(format!("{class}{k}.ppm")), bytes).unwrap();
            }
        }
        let d = load_folder(dir.path(), 2, 0.25).unwrap();
        assert_eq!(d.n_classes, 2);
        assert_eq!(d.train.len() + d.test.len(), 40);
        assert!(d.train.images.iter().all(|v| (-1.0..=1.0).contains(v)));
        let bad = load_folder(dir.path(), 4, 0.25).unwrap_err().to_string();
        assert!(bad.contains("expected 4×4"), "{bad}");
    }
}
