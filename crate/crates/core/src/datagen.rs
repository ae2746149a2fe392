//! Deterministic synthetic dataset of rotated bars.
//!
//! Each sample is a bright bar on a dark background, rotated by a uniform
//! random orientation in [0, 180) degrees and labeled with its orientation
//! bin. Rendering uses supersampled coverage averaging; noise is Gaussian
//! on splitmix64 uniforms. Every sample draws from its own substream of
//! the dataset seed, so generation is order-independent and the whole
//! dataset is a pure function of its configuration.

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, SplitMix64};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct DatasetConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub bar_length: f64,
    pub bar_width: f64,
    /// Number of orientation bins (the class count).
    pub bins: usize,
    /// Bar center jitter, uniform in [-jitter, jitter] per axis.
    pub jitter: f64,
    /// Additive Gaussian noise standard deviation.
    pub noise_std: f64,
    /// Supersampling factor per axis for coverage anti-aliasing.
    pub supersample: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            size: 32,
            bar_length: 20.0,
            bar_width: 4.0,
            bins: 8,
            jitter: 2.0,
            noise_std: 0.05,
            supersample: 4,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.bins < 2 || self.supersample == 0 {
            return Err(Error::config(format!("dataset: bad config {self:?}")));
        }
        if self.bar_length <= 0.0 || self.bar_width <= 0.0 || self.noise_std < 0.0 {
            return Err(Error::config(format!("dataset: bad bar geometry {self:?}")));
        }
        // The bar must stay inside the image for every orientation and jitter.
        let half_diag = (self.bar_length * self.bar_length + self.bar_width * self.bar_width)
            .sqrt()
            / 2.0;
        if half_diag + self.jitter.abs() > self.size as f64 / 2.0 {
            return Err(Error::config(format!(
                "dataset: bar (half-diagonal {half_diag:.2} + jitter {}) exceeds image half-size {}",
                self.jitter.abs(),
                self.size as f64 / 2.0
            )));
        }
        Ok(())
    }

    pub fn bin_width_deg(&self) -> f64 {
        180.0 / self.bins as f64
    }
}

#[derive(Clone, Debug)]
pub struct OrientedBarSample {
    /// `[1, size, size]` grayscale image with values in [0, 1].
    pub image: Tensor,
    /// Orientation in degrees, in [0, 180).
    pub orientation_deg: f64,
    /// `floor(orientation / (180 / bins))`.
    pub label: usize,
}

impl OrientedBarSample {
    /// FNV-1a over the image's little-endian f32 bytes.
    pub fn checksum(&self) -> u64 {
        self.image.checksum()
    }
}

fn snap_trig(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < 1e-12 {
            return target;
        }
    }
    v
}

/// Render one bar image (no noise). The orientation is counter-clockwise
/// in the visual sense; 0 degrees is a horizontal bar.
pub fn render_bar(config: &DatasetConfig, orientation_deg: f64, jitter: (f64, f64)) -> Tensor {
    let size = config.size;
    let center = (size as f64 - 1.0) / 2.0;
    let (bar_c, bar_r) = (center + jitter.0, center + jitter.1);
    let phi = orientation_deg.to_radians();
    let (sin, cos) = (snap_trig(phi.sin()), snap_trig(phi.cos()));
    let (half_l, half_w) = (config.bar_length / 2.0, config.bar_width / 2.0);
    let ss = config.supersample;
    let inv_ss_sq = 1.0 / (ss * ss) as f64;
    let mut pixels = vec![0.0f32; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut hits = 0usize;
            for sub_r in 0..ss {
                for sub_c in 0..ss {
                    let rr = r as f64 + (sub_r as f64 + 0.5) / ss as f64 - 0.5 - bar_r;
                    let cc = c as f64 + (sub_c as f64 + 0.5) / ss as f64 - 0.5 - bar_c;
                    // Visual frame: x right, y up; rows grow downward.
                    let u = cc * cos - rr * sin;
                    let v = -cc * sin - rr * cos;
                    if u.abs() <= half_l && v.abs() <= half_w {
                        hits += 1;
                    }
                }
            }
            pixels[r * size + c] = (hits as f64 * inv_ss_sq) as f32;
        }
    }
    Tensor::from_f32(&[1, size, size], pixels)
}

fn label_for(orientation_deg: f64, bins: usize) -> usize {
    ((orientation_deg / (180.0 / bins as f64)) as usize).min(bins - 1)
}

/// Generate one sample from its dedicated substream.
pub fn generate_sample(config: &DatasetConfig, index: u64) -> OrientedBarSample {
    let mut rng = SplitMix64::substream(config.seed, index);
    let orientation_deg = rng.next_f64() * 180.0;
    let jx = rng.uniform(-config.jitter, config.jitter);
    let jy = rng.uniform(-config.jitter, config.jitter);
    let mut image = render_bar(config, orientation_deg, (jx, jy));
    if config.noise_std > 0.0 {
        for i in 0..image.numel() {
            let noisy = image.at(i) + config.noise_std * rng.gaussian();
            image.set(i, noisy.clamp(0.0, 1.0));
        }
    }
    OrientedBarSample {
        image,
        orientation_deg,
        label: label_for(orientation_deg, config.bins),
    }
}

/// Generate `count` samples deterministically from the config.
pub fn generate(config: &DatasetConfig, count: usize) -> Result<Vec<OrientedBarSample>> {
    config.validate()?;
    if count == 0 {
        return Err(Error::config("dataset: count must be >= 1"));
    }
    Ok((0..count as u64)
        .map(|i| generate_sample(config, i))
        .collect())
}

/// Deterministic shuffled split into (train, test).
pub fn split(
    dataset: Vec<OrientedBarSample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<OrientedBarSample>, Vec<OrientedBarSample>)> {
    let n = dataset.len();
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "split: fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::config(format!(
            "split: degenerate sizes {n_train}/{} from {n} samples",
            n - n_train
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::substream(seed, fnv1a64(b"split"));
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let mut samples: Vec<Option<OrientedBarSample>> = dataset.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (pos, &idx) in order.iter().enumerate() {
        let s = samples[idx].take().expect("each index visited once");
        if pos < n_train {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

/// Checksum of a whole dataset: folds each sample's image checksum with
/// its orientation bits and label.
pub fn dataset_checksum(samples: &[OrientedBarSample]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for s in samples {
        for part in [
            s.checksum(),
            s.orientation_deg.to_bits(),
            s.label as u64,
        ] {
            h ^= part;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// Encode an image as a binary PGM (P5, maxval 255).
pub fn to_pgm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape("to_pgm", format!("{:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        out.push((image.at(i).clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_config() -> DatasetConfig {
        DatasetConfig {
            noise_std: 0.0,
            jitter: 0.0,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn horizontal_bar_is_mirror_symmetric() {
        let cfg = clean_config();
        let img = render_bar(&cfg, 0.0, (0.0, 0.0));
        let s = cfg.size;
        for r in 0..s {
            for c in 0..s {
                assert_eq!(
                    img.at(r * s + c),
                    img.at(r * s + (s - 1 - c)),
                    "({r},{c})"
                );
            }
        }
        // The bar is actually present.
        assert!(img.max_abs() == 1.0);
    }

    #[test]
    fn ninety_degree_render_is_index_rotation() {
        let cfg = clean_config();
        let img0 = render_bar(&cfg, 0.0, (0.0, 0.0));
        let img90 = render_bar(&cfg, 90.0, (0.0, 0.0));
        let s = cfg.size;
        for r in 0..s {
            for c in 0..s {
                // Counter-clockwise image rotation: out[r][c] = in[c][s-1-r].
                assert_eq!(
                    img90.at(r * s + c),
                    img0.at(c * s + (s - 1 - r)),
                    "({r},{c})"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_labels_consistent() {
        let cfg = DatasetConfig::default();
        let a = generate(&cfg, 64).unwrap();
        let b = generate(&cfg, 64).unwrap();
        assert_eq!(dataset_checksum(&a), dataset_checksum(&b));
        for s in &a {
            assert!((0.0..180.0).contains(&s.orientation_deg));
            assert_eq!(
                s.label,
                (s.orientation_deg / cfg.bin_width_deg()) as usize
            );
            for i in 0..s.image.numel() {
                let v = s.image.at(i);
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let other = generate(&DatasetConfig { seed: 1, ..cfg }, 64).unwrap();
        assert_ne!(dataset_checksum(&a), dataset_checksum(&other));
    }

    #[test]
    fn oversized_bar_is_config_error() {
        let cfg = DatasetConfig {
            bar_length: 40.0,
            ..DatasetConfig::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let cfg = DatasetConfig::default();
        let data = generate(&cfg, 1000).unwrap();
        let checksums: std::collections::HashSet<u64> =
            data.iter().map(|s| s.checksum()).collect();
        let (train, test) = split(data, 0.8, 5).unwrap();
        assert_eq!(train.len(), 800);
        assert_eq!(test.len(), 200);
        let mut seen = std::collections::HashSet::new();
        for s in train.iter().chain(test.iter()) {
            seen.insert(s.checksum());
        }
        assert_eq!(seen, checksums);
    }

    #[test]
    fn split_covers_all_bins() {
        let cfg = DatasetConfig::default();
        let data = generate(&cfg, 1600).unwrap();
        let (train, test) = split(data, 0.8, 7).unwrap();
        for part in [&train, &test] {
            let mut hit = vec![false; cfg.bins];
            for s in part.iter() {
                hit[s.label] = true;
            }
            assert!(hit.iter().all(|&h| h), "missing bin in a split");
        }
    }

    #[test]
    fn degenerate_split_rejected() {
        let cfg = DatasetConfig::default();
        let data = generate(&cfg, 3).unwrap();
        assert!(split(data.clone(), 0.01, 1).is_err());
        assert!(split(data, 1.5, 1).is_err());
    }

    #[test]
    fn pgm_has_correct_header_and_size() {
        let cfg = clean_config();
        let img = render_bar(&cfg, 45.0, (0.0, 0.0));
        let pgm = to_pgm(&img).unwrap();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(pgm.len(), 13 + 32 * 32);
    }
}
