//! Synthetic brain-like phantom volumes with sequence-specific contrast.
//!
//! Every patient gets an anatomy (head ellipsoid, scalp shell, gray and
//! white matter, two lateral ventricles, a few vessels running along the
//! axial axis) and one study per sequence class. A study's voxels are
//!
//! ```text
//! gain * bias(p) * (contrast[class][tissue(p)] + texture[class](p)) + N(0, noise_level^2)
//! ```
//!
//! where `contrast` is a per-class tissue intensity table (jittered per
//! study), `bias` a smooth linear field and `gain` a global scanner scale.
//! Class textures:
//!
//! | class     | signature                                              |
//! |-----------|--------------------------------------------------------|
//! | T1        | bright white matter, dark CSF                          |
//! | T2        | inverted: bright CSF, dark vessels (flow voids)        |
//! | FLAIR     | T2-like but dark CSF and a hyperintense ventricular rim |
//! | TOF       | suppressed tissue, bright vessels (streaks off-axial)  |
//! | TraceW    | multiplicative speckle                                 |
//! | DWI       | dark overall with oblique periodic ghosting stripes    |
//! | ADC       | bright CSF, no scalp, concentric ring mottling         |
//! | GRE       | dark susceptibility spots                              |
//! | Perfusion | coarse block structure, bright vessels                 |

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SequenceLabel, Volume, N_CLASSES};
use crate::rng::{mix64, sub_rng, ChaCha8Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Patients to simulate; each patient has one study of every class.
    pub n_studies_per_class: usize,
    /// `[D, H, W]`.
    pub volume_shape: [usize; 3],
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_studies_per_class: 20,
            volume_shape: [16, 16, 16],
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_studies_per_class == 0 {
            return Err(Error::validation("phantom.n_studies_per_class", "must be at least 1"));
        }
        if self.volume_shape.iter().any(|&n| n == 0) {
            return Err(Error::validation(
                "phantom.volume_shape",
                format!("{:?} has a zero dimension", self.volume_shape),
            ));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::validation(
                "phantom.noise_level",
                format!("{} must be finite and non-negative", self.noise_level),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background = 0,
    Scalp,
    Gray,
    White,
    Csf,
    Vessel,
}

// background, scalp, gray, white, csf, vessel
const CONTRAST: [[f32; 6]; N_CLASSES] = [
    [0.0, 0.95, 0.50, 0.85, 0.05, 0.30], // T1
    [0.0, 0.60, 0.55, 0.30, 1.00, 0.05], // T2
    [0.0, 0.50, 0.80, 0.35, 0.05, 0.20], // FLAIR
    [0.0, 0.20, 0.20, 0.15, 0.05, 1.00], // TOF
    [0.0, 0.05, 0.85, 0.65, 0.35, 0.30], // TraceW
    [0.0, 0.05, 0.35, 0.25, 0.02, 0.05], // DWI
    [0.0, 0.02, 0.30, 0.50, 0.95, 0.55], // ADC
    [0.0, 0.90, 0.35, 0.50, 0.65, 0.02], // GRE
    [0.0, 0.25, 1.00, 0.45, 0.20, 0.80], // Perfusion
];

type P3 = [f32; 3];

fn ellipsoid_radius(p: P3, center: P3, axes: P3) -> f32 {
    (0..3)
        .map(|i| ((p[i] - center[i]) / axes[i]).powi(2))
        .sum::<f32>()
        .sqrt()
}

struct Anatomy {
    center: P3,
    head_axes: P3,
    ventricles: [(P3, P3); 2],
    /// (y, x, radius) of tubes parallel to the axial axis.
    vessels: Vec<(f32, f32, f32)>,
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let center = [
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        ];
        let head_axes = [
            rng.random_range(0.78..0.86),
            rng.random_range(0.82..0.9),
            rng.random_range(0.74..0.82),
        ];
        let vent_axes = [
            rng.random_range(0.25..0.3),
            rng.random_range(0.22..0.27),
            rng.random_range(0.1..0.12),
        ];
        let spread = rng.random_range(0.12..0.15);
        let ventricles = [-1.0f32, 1.0].map(|s| {
            (
                [center[0], center[1] - 0.05, center[2] + s * spread],
                vent_axes,
            )
        });
        let vessels = (0..4)
            .map(|k| {
                let angle = (k as f32 + rng.random_range(-0.15..0.15)) * std::f32::consts::FRAC_PI_2 + 0.6;
                let r = rng.random_range(0.4..0.5);
                (
                    center[1] + r * head_axes[1] * angle.sin(),
                    center[2] + r * head_axes[2] * angle.cos(),
                    rng.random_range(0.05..0.08),
                )
            })
            .collect();
        Anatomy { center, head_axes, ventricles, vessels }
    }

    fn brain_axes(&self) -> P3 {
        self.head_axes.map(|a| a * 0.86)
    }

    fn tissue(&self, p: P3) -> Tissue {
        if ellipsoid_radius(p, self.center, self.head_axes) > 1.0 {
            return Tissue::Background;
        }
        let rb = ellipsoid_radius(p, self.center, self.brain_axes());
        if rb > 1.0 {
            return Tissue::Scalp;
        }
        if self
            .vessels
            .iter()
            .any(|&(y, x, r)| (p[1] - y).powi(2) + (p[2] - x).powi(2) < r * r)
        {
            return Tissue::Vessel;
        }
        if self.ventricle_radius(p) <= 1.0 {
            return Tissue::Csf;
        }
        if rb > 0.7 {
            Tissue::Gray
        } else {
            Tissue::White
        }
    }

    fn ventricle_radius(&self, p: P3) -> f32 {
        self.ventricles
            .iter()
            .map(|&(c, a)| ellipsoid_radius(p, c, a))
            .fold(f32::INFINITY, f32::min)
    }
}

struct StudyNuisance {
    gain: f32,
    bias_dir: P3,
    contrast: [f32; 6],
    phase: f32,
    spots: Vec<(P3, f32)>,
}

impl StudyNuisance {
    fn sample(rng: &mut ChaCha8Rng, label: SequenceLabel, anatomy: &Anatomy) -> Self {
        let mut contrast = CONTRAST[label.index()];
        for c in contrast.iter_mut().skip(1) {
            *c = (*c + rng.random_range(-0.04..0.04)).max(0.0);
        }
        let dir: P3 = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
        let spots = (0..rng.random_range(4..=7))
            .map(|_| {
                let b = anatomy.brain_axes();
                (
                    [
                        anatomy.center[0] + rng.random_range(-0.6..0.6) * b[0],
                        anatomy.center[1] + rng.random_range(-0.6..0.6) * b[1],
                        anatomy.center[2] + rng.random_range(-0.6..0.6) * b[2],
                    ],
                    rng.random_range(0.1..0.16),
                )
            })
            .collect();
        StudyNuisance {
            gain: rng.random_range(0.9..1.1),
            bias_dir: dir.map(|v| 0.1 * v / norm),
            contrast,
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            spots,
        }
    }
}

fn coord(i: usize, n: usize) -> f32 {
    2.0 * (i as f32 + 0.5) / n as f32 - 1.0
}

fn quantize(v: f32, cells: f32) -> f32 {
    ((v + 1.0) * 0.5 * cells).floor().min(cells - 1.0) / cells * 2.0 - 1.0 + 1.0 / cells
}

fn study_volume(spec: &PhantomSpec, anatomy: &Anatomy, label: SequenceLabel, seed: u64) -> Array3<f32> {
    let mut rng = sub_rng(seed, 0);
    let nuisance = StudyNuisance::sample(&mut rng, label, anatomy);
    let mut noise_rng = sub_rng(seed, 1);
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
    let [d, h, w] = spec.volume_shape;
    let noise = spec.noise_level as f32;
    let tau = std::f32::consts::TAU;

    let mut vox = Array3::<f32>::zeros((d, h, w));
    for ((i, j, k), v) in vox.indexed_iter_mut() {
        let mut p = [coord(i, d), coord(j, h), coord(k, w)];
        if label == SequenceLabel::Perfusion {
            p = p.map(|v| quantize(v, 5.0));
        }
        let tissue = anatomy.tissue(p);
        let mut s = nuisance.contrast[tissue as usize];
        if tissue != Tissue::Background {
            match label {
                SequenceLabel::Flair => {
                    let r = anatomy.ventricle_radius(p);
                    if tissue != Tissue::Csf && tissue != Tissue::Scalp && r < 1.3 {
                        s = 0.9;
                    }
                }
                SequenceLabel::TraceW => {
                    s *= 1.0 + 0.5 * unit.sample(&mut rng);
                }
                SequenceLabel::Dwi => {
                    let u = (p[0] + p[1] + p[2]) / 3f32.sqrt();
                    s += 0.4 * (0.5 + 0.5 * (tau * 3.0 * u + nuisance.phase).sin());
                }
                SequenceLabel::Adc => {
                    let r = ellipsoid_radius(p, anatomy.center, [1.0; 3]);
                    s += 0.2 * (tau * 2.0 * r + nuisance.phase).sin();
                }
                SequenceLabel::Gre => {
                    if nuisance
                        .spots
                        .iter()
                        .any(|&(c, r)| ellipsoid_radius(p, c, [r, r, r]) < 1.0)
                    {
                        s = 0.03;
                    }
                }
                _ => {}
            }
            let bias = 1.0
                + nuisance.bias_dir[0] * p[0]
                + nuisance.bias_dir[1] * p[1]
                + nuisance.bias_dir[2] * p[2];
            s *= nuisance.gain * bias;
        }
        *v = s + noise * unit.sample(&mut noise_rng);
    }
    vox
}

/// Generates `n_studies_per_class` patients, each with one study per class,
/// ordered by patient then class. Output is a pure function of `spec`.
pub fn generate_phantom_dataset(spec: &PhantomSpec) -> Result<Vec<Volume>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_studies_per_class * N_CLASSES);
    for patient in 0..spec.n_studies_per_class {
        let patient_seed = mix64(spec.seed, patient as u64);
        let anatomy = Anatomy::sample(&mut sub_rng(patient_seed, u64::MAX));
        let patient_id = format!("P{patient:04}");
        for label in SequenceLabel::ALL {
            let voxels = study_volume(spec, &anatomy, label, mix64(patient_seed, label.index() as u64));
            out.push(Volume::new(
                patient_id.clone(),
                format!("{patient_id}-{}", label.name()),
                label,
                voxels,
            )?);
        }
    }
    Ok(out)
}
