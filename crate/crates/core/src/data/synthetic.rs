//! Schematic two-eye face renderer with recoverable gaze labels.
//!
//! Each eye is an elliptical socket of sclera with a dark iris disc whose
//! centre sits `gain · (yaw, -pitch)` pixels from the socket centre. Subjects
//! differ in skin tone, eye spacing and eye height. Rendering is supersampled
//! so iris positions carry sub-pixel information, then seeded Gaussian noise
//! is added and values are clamped to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::gaze::GazeDirection;
use crate::tensor::{Result, TensorError};

pub const GENERATOR_VERSION: u32 = 1;

const SCLERA: [f64; 3] = [0.95, 0.95, 0.93];
const IRIS: [f64; 3] = [0.12, 0.18, 0.42];
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub subjects: usize,
    /// The highest-numbered subjects form the test split.
    pub test_subjects: usize,
    pub image_size: usize,
    /// Labels are drawn uniformly from `[-yaw_max, yaw_max] × [-pitch_max, pitch_max]`.
    pub yaw_max: f64,
    pub pitch_max: f64,
    /// Iris displacement in pixels per radian.
    pub gain: f64,
    pub socket_a: f64,
    pub socket_b: f64,
    pub iris_radius: f64,
    /// Mean horizontal distance between the eye centres.
    pub eye_spacing: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            subjects: 10,
            test_subjects: 2,
            image_size: 64,
            yaw_max: 0.3,
            pitch_max: 0.2,
            gain: 20.0,
            socket_a: 11.0,
            socket_b: 8.5,
            iris_radius: 2.5,
            eye_spacing: 30.0,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

/// Per-subject appearance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Subject {
    pub skin: [f64; 3],
    pub spacing: f64,
    pub eye_y: f64,
}

impl SyntheticConfig {
    /// Geometry of the defaults scaled to `size` pixels; gain scales too.
    pub fn scaled_to(size: usize) -> Self {
        let k = size as f64 / 64.0;
        let d = Self::default();
        Self {
            image_size: size,
            gain: d.gain * k,
            socket_a: d.socket_a * k,
            socket_b: d.socket_b * k,
            iris_radius: d.iris_radius * k,
            eye_spacing: d.eye_spacing * k,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TensorError::Config(m));
        if self.samples == 0 || self.subjects == 0 || self.image_size == 0 {
            return fail("samples, subjects and image_size must be positive".into());
        }
        if self.test_subjects >= self.subjects {
            return fail(format!(
                "test_subjects {} leaves no training subjects out of {}",
                self.test_subjects, self.subjects
            ));
        }
        let vals = [self.yaw_max, self.pitch_max, self.gain, self.socket_a, self.socket_b, self.iris_radius, self.noise_std];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("generator parameters must be finite and non-negative".into());
        }
        if self.pitch_max > std::f64::consts::FRAC_PI_2 {
            return fail(format!("pitch_max {} exceeds π/2", self.pitch_max));
        }
        // The iris disc at the extreme label must stay inside the socket.
        let (cx, cy) = (self.gain * self.yaw_max, self.gain * self.pitch_max);
        let clearance = ellipse_clearance(self.socket_a, self.socket_b, cx, cy);
        if cx * cx / self.socket_a.powi(2) + cy * cy / self.socket_b.powi(2) > 1.0 || clearance < self.iris_radius {
            return fail(format!(
                "label range leaves the eye: an iris of radius {:.2} px offset by ({cx:.2}, {cy:.2}) px does not fit a {:.2}×{:.2} px socket",
                self.iris_radius, self.socket_a, self.socket_b
            ));
        }
        let s = self.image_size as f64;
        if self.eye_spacing * 0.9 < 2.0 * self.socket_a {
            return fail(format!("eye spacing {} lets sockets overlap", self.eye_spacing));
        }
        if self.eye_spacing * 1.1 / 2.0 + self.socket_a > s / 2.0 || self.socket_b * 2.0 > s * 0.6 {
            return fail(format!("eyes do not fit in a {}px image", self.image_size));
        }
        Ok(())
    }

    pub fn is_test_subject(&self, subject: u32) -> bool {
        subject as usize >= self.subjects - self.test_subjects
    }

    pub fn subject_of(&self, index: usize) -> u32 {
        (index % self.subjects) as u32
    }

    pub fn subject(&self, id: u32) -> Subject {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((1 << 40) | id as u64);
        let tone = rng.random_range(0.35..0.75);
        let s = self.image_size as f64;
        Subject {
            skin: [tone, tone * 0.82, tone * 0.68],
            spacing: self.eye_spacing * rng.random_range(0.9..1.1),
            eye_y: s * 0.42 + rng.random_range(-0.03..0.03) * s,
        }
    }

    /// Left and right socket centres in pixel coordinates.
    pub fn eye_centres(&self, subject: &Subject) -> [(f64, f64); 2] {
        let cx = self.image_size as f64 / 2.0;
        [(cx - subject.spacing / 2.0, subject.eye_y), (cx + subject.spacing / 2.0, subject.eye_y)]
    }

    /// Label of sample `index`.
    pub fn label(&self, index: usize) -> GazeDirection {
        let mut rng = self.sample_rng(index);
        GazeDirection::new(
            rng.random_range(-self.yaw_max..=self.yaw_max),
            rng.random_range(-self.pitch_max..=self.pitch_max),
        )
    }

    fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Renders sample `index` as `[3, H, W]`, channel-major.
    pub fn render(&self, index: usize, gaze: GazeDirection, noise: bool) -> Result<Vec<f32>> {
        let n = self.image_size;
        let subject = self.subject(self.subject_of(index));
        let eyes = self.eye_centres(&subject);
        let (dx, dy) = (self.gain * gaze.yaw, -self.gain * gaze.pitch);
        let mut img = vec![0f32; 3 * n * n];
        let step = 1.0 / SUPERSAMPLE as f64;
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let (a2, b2, r2) = (self.socket_a.powi(2), self.socket_b.powi(2), self.iris_radius.powi(2));
        for y in 0..n {
            for x in 0..n {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        let mut colour = subject.skin;
                        for &(ex, ey) in &eyes {
                            let (ux, uy) = (px - ex, py - ey);
                            if ux * ux / a2 + uy * uy / b2 <= 1.0 {
                                let (ix, iy) = (ux - dx, uy - dy);
                                colour = if ix * ix + iy * iy <= r2 { IRIS } else { SCLERA };
                            }
                        }
                        for c in 0..3 {
                            acc[c] += colour[c];
                        }
                    }
                }
                for c in 0..3 {
                    img[c * n * n + y * n + x] = (acc[c] * inv) as f32;
                }
            }
        }
        if noise && self.noise_std > 0.0 {
            let mut rng = self.sample_rng(index);
            rng.set_word_pos(1 << 20);
            let dist = Normal::new(0.0, self.noise_std).map_err(|e| TensorError::Config(e.to_string()))?;
            for v in &mut img {
                let noisy = *v as f64 + dist.sample(&mut rng);
                *v = noisy.clamp(0.0, 1.0) as f32;
            }
        }
        Ok(img)
    }
}

/// Smallest distance from `(cx, cy)` to the boundary of the axis-aligned
/// ellipse with semi-axes `a`, `b`.
fn ellipse_clearance(a: f64, b: f64, cx: f64, cy: f64) -> f64 {
    const STEPS: usize = 20_000;
    (0..STEPS)
        .map(|i| {
            let t = i as f64 * std::f64::consts::TAU / STEPS as f64;
            (a * t.cos() - cx).hypot(b * t.sin() - cy)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Generates the full dataset described by `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    generate_with_noise(cfg, true)
}

/// As [`generate_synthetic`] but optionally without pixel noise.
pub fn generate_with_noise(cfg: &SyntheticConfig, noise: bool) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.image_size;
    let mut images = Vec::with_capacity(cfg.samples * 3 * n * n);
    let mut labels = Vec::with_capacity(cfg.samples);
    let mut subjects = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let label = cfg.label(i);
        images.extend(cfg.render(i, label, noise)?);
        labels.push(label);
        subjects.push(cfg.subject_of(i));
    }
    Dataset::new([3, n, n], images, labels, subjects)
}

/// Reads gaze back from rendered pixels: the iris centroid in each socket,
/// found from per-pixel iris coverage, divided by the gain.
#[derive(Clone, Debug)]
pub struct GeometricDecoder {
    pub config: SyntheticConfig,
}

impl GeometricDecoder {
    pub fn new(config: SyntheticConfig) -> Self {
        Self { config }
    }

    /// Iris centre offsets `(dx, dy)` in pixels for each eye.
    ///
    /// Every pixel near a socket mixes at most skin, sclera and iris, whose
    /// colours are linearly independent, so the iris fraction is recovered by
    /// solving a 3×3 system per pixel.
    pub fn iris_offsets(&self, image: &[f32], subject: u32) -> [(f64, f64); 2] {
        let cfg = &self.config;
        let n = cfg.image_size;
        let sub = cfg.subject(subject);
        let unmix = Unmix::new(sub.skin, SCLERA, IRIS);
        cfg.eye_centres(&sub).map(|(ex, ey)| {
            let (mut w, mut sx, mut sy) = (0.0, 0.0, 0.0);
            let x0 = (ex - cfg.socket_a).floor().max(0.0) as usize;
            let x1 = ((ex + cfg.socket_a).ceil() as usize).min(n - 1);
            let y0 = (ey - cfg.socket_b).floor().max(0.0) as usize;
            let y1 = ((ey + cfg.socket_b).ceil() as usize).min(n - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let px = [0, 1, 2].map(|c| image[c * n * n + y * n + x] as f64);
                    let cover = unmix.last_fraction(px).clamp(0.0, 1.0);
                    w += cover;
                    sx += cover * (x as f64 + 0.5);
                    sy += cover * (y as f64 + 0.5);
                }
            }
            if w == 0.0 {
                (0.0, 0.0)
            } else {
                (sx / w - ex, sy / w - ey)
            }
        })
    }

    pub fn decode(&self, image: &[f32], subject: u32) -> GazeDirection {
        let [(lx, ly), (rx, ry)] = self.iris_offsets(image, subject);
        let g = self.config.gain;
        GazeDirection::new((lx + rx) / (2.0 * g), -(ly + ry) / (2.0 * g))
    }
}

/// Inverse of the colour matrix whose columns are three materials.
struct Unmix {
    inv: [[f64; 3]; 3],
}

impl Unmix {
    fn new(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Self {
        let m = [[a[0], b[0], c[0]], [a[1], b[1], c[1]], [a[2], b[2], c[2]]];
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                // adjugate: cofactor of (j, i)
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
            }
        }
        Self { inv }
    }

    /// Weight of the third material in `px`.
    fn last_fraction(&self, px: [f64; 3]) -> f64 {
        self.inv[2].iter().zip(px).map(|(a, b)| a * b).sum()
    }
}

impl super::Predictor for GeometricDecoder {
    fn predict(&self, data: &Dataset) -> Result<Vec<GazeDirection>> {
        Ok((0..data.len()).map(|i| self.decode(data.image(i), data.subjects()[i])).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            samples: 40,
            subjects: 5,
            test_subjects: 1,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.labels(), b.labels());
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn pixels_lie_in_unit_interval() {
        let d = generate_synthetic(&SyntheticConfig {
            noise_std: 0.3,
            ..small()
        })
        .unwrap();
        assert!(d.images().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn labels_stay_in_range() {
        let cfg = small();
        let d = generate_synthetic(&cfg).unwrap();
        for g in d.labels() {
            assert!(g.yaw.abs() <= cfg.yaw_max && g.pitch.abs() <= cfg.pitch_max);
        }
    }

    #[test]
    fn centred_gaze_gives_concentric_iris() {
        let cfg = small();
        let img = cfg.render(0, GazeDirection::new(0.0, 0.0), false).unwrap();
        for (dx, dy) in GeometricDecoder::new(cfg).iris_offsets(&img, 0) {
            assert!(dx.abs() < 0.05 && dy.abs() < 0.05, "{dx} {dy}");
        }
    }

    #[test]
    fn yaw_offset_follows_gain() {
        let cfg = small();
        let img = cfg.render(3, GazeDirection::new(0.3, 0.0), false).unwrap();
        for (dx, dy) in GeometricDecoder::new(cfg).iris_offsets(&img, 3) {
            assert!((dx - 6.0).abs() < 0.05, "{dx}");
            assert!(dy.abs() < 0.05, "{dy}");
        }
    }

    #[test]
    fn decoder_recovers_noise_free_labels() {
        let cfg = SyntheticConfig {
            samples: 200,
            ..small()
        };
        let d = generate_with_noise(&cfg, false).unwrap();
        let dec = GeometricDecoder::new(cfg);
        for i in 0..d.len() {
            let got = dec.decode(d.image(i), d.subjects()[i]);
            let want = d.labels()[i];
            assert!((got.yaw - want.yaw).abs() < 0.02 && (got.pitch - want.pitch).abs() < 0.02, "{i}: {got:?} vs {want:?}");
        }
    }

    #[test]
    fn oversized_label_range_is_a_geometry_error() {
        let cfg = SyntheticConfig {
            yaw_max: 0.6,
            ..small()
        };
        let err = generate_synthetic(&cfg).unwrap_err().to_string();
        assert!(err.contains("leaves the eye"), "{err}");
    }

    #[test]
    fn diagonal_extreme_must_fit_the_socket() {
        // Each axis alone fits, the corner does not.
        let cfg = SyntheticConfig {
            socket_a: 9.0,
            socket_b: 7.0,
            ..small()
        };
        assert!(cfg.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn unmixing_recovers_fractions() {
        let u = Unmix::new([0.5, 0.4, 0.3], SCLERA, IRIS);
        let px = [0, 1, 2].map(|c| 0.2 * [0.5, 0.4, 0.3][c] + 0.5 * SCLERA[c] + 0.3 * IRIS[c]);
        assert!((u.last_fraction(px) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn subjects_differ_in_appearance() {
        let cfg = small();
        assert_ne!(cfg.subject(0), cfg.subject(1));
        assert_eq!(cfg.subject(2), cfg.subject(2));
    }

    #[test]
    fn scaled_geometry_is_valid_at_224() {
        let cfg = SyntheticConfig {
            samples: 2,
            ..SyntheticConfig::scaled_to(224)
        };
        let d = generate_synthetic(&cfg).unwrap();
        assert_eq!(d.image_shape(), [3, 224, 224]);
    }
}
