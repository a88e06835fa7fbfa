//! Synthetic camera pipeline: procedural linear scenes rendered through a
//! white-balance step and a per-camera tone curve, plus patch sampling and
//! dihedral augmentation for training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WbError};
use crate::image::ImageRGB;
use crate::model::DecoderId;

/// Range of the "wrong" input WB and of scene illuminants.
pub const TEMPERATURE_RANGE: (f64, f64) = (2500.0, 8500.0);

/// CIE 1931 chromaticity of a blackbody at `kelvin`, via the cubic-spline
/// fit of Kim et al. Valid on 1667..=25000 K.
pub fn planckian_xy(kelvin: f64) -> Result<(f64, f64)> {
    if !(1667.0..=25000.0).contains(&kelvin) {
        return Err(WbError::OutOfRange {
            what: "color temperature",
            detail: format!("{kelvin} K outside 1667..=25000"),
        });
    }
    let t = kelvin;
    let (t2, t3) = (t * t, t * t * t);
    let x = if t <= 4000.0 {
        -0.2661239e9 / t3 - 0.2343589e6 / t2 + 0.8776956e3 / t + 0.179910
    } else {
        -3.0258469e9 / t3 + 2.1070379e6 / t2 + 0.2226347e3 / t + 0.240390
    };
    let (x2, x3) = (x * x, x * x * x);
    let y = if t <= 2222.0 {
        -1.1063814 * x3 - 1.34811020 * x2 + 2.18555832 * x - 0.20219683
    } else if t <= 4000.0 {
        -0.9549476 * x3 - 1.37418593 * x2 + 2.09137015 * x - 0.16748867
    } else {
        3.0817580 * x3 - 5.87338670 * x2 + 3.75112997 * x - 0.37001483
    };
    Ok((x, y))
}

/// Linear-RGB response to a blackbody illuminant, normalized so G = 1.
pub fn temperature_gains(kelvin: f64) -> Result<[f32; 3]> {
    let (x, y) = planckian_xy(kelvin)?;
    let (xx, zz) = (x / y, (1.0 - x - y) / y);
    let r = 3.2404542 * xx - 1.5371385 - 0.4985314 * zz;
    let g = -0.9692660 * xx + 1.8760108 + 0.0415560 * zz;
    let b = 0.0556434 * xx - 0.2040259 + 1.0572252 * zz;
    Ok([(r / g) as f32, 1.0, (b / g) as f32])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WbPreset {
    pub name: String,
    pub temperature: f64,
    pub gains: [f32; 3],
}

impl WbPreset {
    pub fn at(name: impl Into<String>, temperature: f64) -> Result<Self> {
        Ok(WbPreset {
            name: name.into(),
            temperature,
            gains: temperature_gains(temperature)?,
        })
    }

    pub fn tungsten() -> Self {
        Self::at("tungsten", 2850.0).expect("in range")
    }

    pub fn shade() -> Self {
        Self::at("shade", 7500.0).expect("in range")
    }
}

/// Per-camera rendering style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Tone curve is `c^(1/gamma)`.
    pub gamma: f32,
    /// Per-channel `a` in `c + a * c * (1 - c)`.
    pub perturb: [f32; 3],
}

impl RenderParams {
    pub const LINEAR: RenderParams = RenderParams {
        gamma: 1.0,
        perturb: [0.0; 3],
    };
}

/// Fixed camera styles; each scene is shot with one of them.
pub const CAMERAS: [RenderParams; 4] = [
    RenderParams { gamma: 2.2, perturb: [0.0, 0.0, 0.0] },
    RenderParams { gamma: 2.4, perturb: [0.10, 0.05, -0.08] },
    RenderParams { gamma: 2.0, perturb: [-0.06, 0.08, 0.12] },
    RenderParams { gamma: 2.3, perturb: [0.15, -0.05, 0.04] },
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// Surface reflectances, linear, non-negative.
    pub linear_scene: ImageRGB,
    /// Sensor response to the scene illuminant, G = 1.
    pub illum_gains: [f32; 3],
    pub render_params: RenderParams,
}

fn check_gains(gains: [f32; 3]) -> Result<()> {
    if gains.iter().all(|g| g.is_finite() && *g > 0.0) {
        Ok(())
    } else {
        Err(WbError::OutOfRange {
            what: "wb gains",
            detail: format!("{gains:?} must be positive"),
        })
    }
}

/// ISP output before the final clamp. Values above 1 skip the polynomial
/// perturbation so the curve stays monotone.
pub fn render_unclamped(scene: &SceneSample, wb_gains: [f32; 3]) -> Result<ImageRGB> {
    check_gains(wb_gains)?;
    check_gains(scene.illum_gains)?;
    let p = scene.render_params;
    let scale: [f32; 3] = std::array::from_fn(|c| scene.illum_gains[c] / wb_gains[c]);
    let inv_gamma = 1.0 / p.gamma;
    let mut out = scene.linear_scene.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            let mut v = (px[c] * scale[c]).max(0.0);
            if v <= 1.0 {
                v += p.perturb[c] * v * (1.0 - v);
            }
            px[c] = v.powf(inv_gamma);
        }
    }
    Ok(out)
}

/// Renders the scene as a camera would with the given WB gains.
pub fn render_with_wb(scene: &SceneSample, wb_gains: [f32; 3]) -> Result<ImageRGB> {
    Ok(render_unclamped(scene, wb_gains)?.clamped())
}

/// Random smooth background, a handful of flat-colored shapes and a little
/// sensor-like noise.
pub fn procedural_scene<R: Rng>(rng: &mut R, width: usize, height: usize) -> ImageRGB {
    let color = |rng: &mut R| -> [f32; 3] { std::array::from_fn(|_| rng.random_range(0.04..0.75)) };
    let c0 = color(rng);
    let c1 = color(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let span = (width + height).max(1) as f32;
    let mut img = ImageRGB::from_fn(width, height, |x, y| {
        let t = ((x as f32 * dx + y as f32 * dy) / span + 0.5).clamp(0.0, 1.0);
        std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t)
    });

    let n_shapes = rng.random_range(3..9);
    for _ in 0..n_shapes {
        let col = color(rng);
        let cx = rng.random_range(0.0..width as f32);
        let cy = rng.random_range(0.0..height as f32);
        let rx = rng.random_range(0.05..0.3) * width as f32;
        let ry = rng.random_range(0.05..0.3) * height as f32;
        let ellipse = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let u = (x as f32 - cx) / rx;
                let v = (y as f32 - cy) / ry;
                let inside = if ellipse {
                    u * u + v * v <= 1.0
                } else {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                };
                if inside {
                    img.set_pixel(x, y, col);
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, 0.008).expect("valid sigma");
    for v in img.data_mut() {
        *v = (*v + noise.sample(rng)).max(0.0);
    }
    img
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub camera: usize,
    /// WB temperature used to render the input.
    pub input_temperature: f64,
    /// Temperature of the scene illuminant (what AWB should recover).
    pub scene_temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub input: ImageRGB,
    pub targets: BTreeMap<DecoderId, ImageRGB>,
    /// Additional ground truth keyed by WB temperature in Kelvin.
    pub extra: BTreeMap<u32, ImageRGB>,
    pub meta: ExampleMeta,
}

impl TrainExample {
    pub fn dims(&self) -> (usize, usize) {
        self.input.dims()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub width: usize,
    pub height: usize,
    /// Extra fixed-temperature renders, e.g. 3800/5500/6500 for evaluation.
    #[serde(default)]
    pub extra_temperatures: Vec<u32>,
}

impl DatasetConfig {
    pub fn square(seed: u64, n_scenes: usize, size: usize) -> Self {
        DatasetConfig {
            seed,
            n_scenes,
            width: size,
            height: size,
            extra_temperatures: Vec::new(),
        }
    }
}

/// Scene `index` of a dataset; independent of every other index.
pub fn make_scene(cfg: &DatasetConfig, index: usize) -> Result<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let camera = rng.random_range(0..CAMERAS.len());
    let (lo, hi) = TEMPERATURE_RANGE;
    let scene_temperature = rng.random_range(lo..=hi);
    let input_temperature = rng.random_range(lo..=hi);
    let scene = SceneSample {
        linear_scene: procedural_scene(&mut rng, cfg.width, cfg.height),
        illum_gains: temperature_gains(scene_temperature)?,
        render_params: CAMERAS[camera],
    };
    let mut targets = BTreeMap::new();
    targets.insert(DecoderId::Awb, render_with_wb(&scene, scene.illum_gains)?);
    targets.insert(DecoderId::Tungsten, render_with_wb(&scene, WbPreset::tungsten().gains)?);
    targets.insert(DecoderId::Shade, render_with_wb(&scene, WbPreset::shade().gains)?);
    let extra = cfg
        .extra_temperatures
        .iter()
        .map(|&t| Ok((t, render_with_wb(&scene, temperature_gains(t as f64)?)?)))
        .collect::<Result<_>>()?;
    Ok(TrainExample {
        id: format!("{index:04}"),
        input: render_with_wb(&scene, temperature_gains(input_temperature)?)?,
        targets,
        extra,
        meta: ExampleMeta {
            camera,
            input_temperature,
            scene_temperature,
        },
    })
}

pub fn make_dataset_with(cfg: &DatasetConfig) -> Result<Vec<TrainExample>> {
    if cfg.n_scenes == 0 {
        return Err(WbError::Config("n_scenes must be at least 1".into()));
    }
    if cfg.width == 0 || cfg.height == 0 || !cfg.width.is_multiple_of(16) || !cfg.height.is_multiple_of(16) {
        return Err(WbError::NotMultiple {
            op: "make_dataset",
            height: cfg.height,
            width: cfg.width,
            multiple: 16,
        });
    }
    (0..cfg.n_scenes).map(|i| make_scene(cfg, i)).collect()
}

/// `n_scenes` square scenes of side `size`.
pub fn make_dataset(seed: u64, n_scenes: usize, size: usize) -> Result<Vec<TrainExample>> {
    make_dataset_with(&DatasetConfig::square(seed, n_scenes, size))
}

/// An input crop and the matching target crops.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub input: ImageRGB,
    pub targets: BTreeMap<DecoderId, ImageRGB>,
}

impl PatchSet {
    /// The same window from every image of `ex`.
    pub fn crop(ex: &TrainExample, x0: usize, y0: usize, w: usize, h: usize) -> Result<PatchSet> {
        Ok(PatchSet {
            input: ex.input.crop(x0, y0, w, h)?,
            targets: ex
                .targets
                .iter()
                .map(|(&id, img)| Ok((id, img.crop(x0, y0, w, h)?)))
                .collect::<Result<_>>()?,
        })
    }

    fn map(&self, f: impl Fn(&ImageRGB) -> Result<ImageRGB>) -> Result<PatchSet> {
        Ok(PatchSet {
            input: f(&self.input)?,
            targets: self
                .targets
                .iter()
                .map(|(&id, img)| Ok((id, f(img)?)))
                .collect::<Result<_>>()?,
        })
    }
}

/// `count` square crops of side `patch` at seeded random offsets.
pub fn sample_patches<R: Rng>(ex: &TrainExample, patch: usize, count: usize, rng: &mut R) -> Result<Vec<PatchSet>> {
    let (w, h) = ex.dims();
    if patch == 0 || patch > w || patch > h {
        return Err(WbError::OutOfRange {
            what: "patch size",
            detail: format!("{patch} for a {w}x{h} image"),
        });
    }
    (0..count)
        .map(|_| {
            let x0 = rng.random_range(0..=w - patch);
            let y0 = rng.random_range(0..=h - patch);
            PatchSet::crop(ex, x0, y0, patch, patch)
        })
        .collect()
}

/// One of the eight symmetries of the square: optional horizontal flip,
/// then `quarter_turns` clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        flip: false,
        quarter_turns: 0,
    };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|i| Dihedral {
            flip: i >= 4,
            quarter_turns: i % 4,
        })
    }

    pub fn random<R: Rng>(rng: &mut R) -> Dihedral {
        let i: u8 = rng.random_range(0..8);
        Dihedral {
            flip: i >= 4,
            quarter_turns: i % 4,
        }
    }

    pub fn apply(self, img: &ImageRGB) -> Result<ImageRGB> {
        let (w, h) = img.dims();
        if self.quarter_turns % 2 == 1 && w != h {
            return Err(WbError::shape("augment", "square patch for a quarter turn", format!("{w}x{h}")));
        }
        let mut out = if self.flip {
            ImageRGB::from_fn(w, h, |x, y| img.pixel(w - 1 - x, y))
        } else {
            img.clone()
        };
        for _ in 0..self.quarter_turns % 4 {
            let (w, h) = out.dims();
            out = ImageRGB::from_fn(h, w, |x, y| out.pixel(y, h - 1 - x));
        }
        Ok(out)
    }
}

/// Applies one random dihedral transform to every image of the set.
pub fn augment<R: Rng>(set: &PatchSet, rng: &mut R) -> Result<PatchSet> {
    let t = Dihedral::random(rng);
    set.map(|img| t.apply(img))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    #[serde(flatten)]
    pub meta: ExampleMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub config: DatasetConfig,
    pub scenes: Vec<SceneRecord>,
}

fn image_path(dir: &Path, id: &str, tag: &str) -> std::path::PathBuf {
    dir.join("scenes").join(format!("{id}_{tag}.png"))
}

/// Writes `scenes/NNNN_{input|awb|tungsten|shade}.png`, any
/// `NNNN_tKKKK.png` extras, and `manifest.json`.
pub fn save_dataset(dir: impl AsRef<Path>, cfg: &DatasetConfig, examples: &[TrainExample]) -> Result<()> {
    let dir = dir.as_ref();
    let scenes = dir.join("scenes");
    std::fs::create_dir_all(&scenes).map_err(|e| WbError::io(&scenes, e))?;
    for ex in examples {
        ex.input.save(image_path(dir, &ex.id, "input"))?;
        for (id, img) in &ex.targets {
            img.save(image_path(dir, &ex.id, id.as_str()))?;
        }
        for (t, img) in &ex.extra {
            img.save(image_path(dir, &ex.id, &format!("t{t}")))?;
        }
    }
    let manifest = Manifest {
        config: cfg.clone(),
        scenes: examples
            .iter()
            .map(|ex| SceneRecord {
                id: ex.id.clone(),
                meta: ex.meta.clone(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| WbError::io(&path, e))
}

/// Reads a directory written by [`save_dataset`]. Targets missing on disk
/// are simply absent from the example.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<TrainExample>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| WbError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut examples = Vec::with_capacity(manifest.scenes.len());
    for rec in &manifest.scenes {
        let mut targets = BTreeMap::new();
        for id in DecoderId::ALL {
            let p = image_path(dir, &rec.id, id.as_str());
            if p.exists() {
                targets.insert(id, ImageRGB::load(p)?);
            }
        }
        let mut extra = BTreeMap::new();
        for &t in &manifest.config.extra_temperatures {
            let p = image_path(dir, &rec.id, &format!("t{t}"));
            if p.exists() {
                extra.insert(t, ImageRGB::load(p)?);
            }
        }
        examples.push(TrainExample {
            id: rec.id.clone(),
            input: ImageRGB::load(image_path(dir, &rec.id, "input"))?,
            targets,
            extra,
            meta: rec.meta.clone(),
        });
    }
    Ok((manifest, examples))
}
