//! Inference: downsize, run the decoders, fit a global color mapping from the
//! downsized input to each output, apply it at the original resolution.
//! Arbitrary temperatures blend the Tungsten and Shade results.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::Rgb32FImage;

use crate::colormap::{apply_mapping, fit_mapping, MappingMatrix};
use crate::error::{Result, WbError};
use crate::image::ImageRGB;
use crate::metrics::{MetricReport, MetricRow};
use crate::model::{DecoderId, WbNet};
use crate::synthdata::TrainExample;

/// Longest side fed to the network.
pub const MAX_NET_SIDE: usize = 656;
pub const TUNGSTEN_K: f64 = 2850.0;
pub const SHADE_K: f64 = 7500.0;

/// Anything that maps an image to per-decoder outputs of the same size.
pub trait WbModel {
    fn decoder_ids(&self) -> Vec<DecoderId>;
    /// Spatial sizes the model accepts must be multiples of this.
    fn required_multiple(&self) -> usize;
    fn predict(&self, image: &ImageRGB, ids: &[DecoderId]) -> Result<BTreeMap<DecoderId, ImageRGB>>;
}

impl WbModel for WbNet {
    fn decoder_ids(&self) -> Vec<DecoderId> {
        WbNet::decoder_ids(self).to_vec()
    }

    fn required_multiple(&self) -> usize {
        self.config().required_multiple()
    }

    fn predict(&self, image: &ImageRGB, ids: &[DecoderId]) -> Result<BTreeMap<DecoderId, ImageRGB>> {
        self.forward(&image.to_tensor(), ids)?
            .into_iter()
            .map(|(id, t)| Ok((id, ImageRGB::from_tensor(&t, 0)?)))
            .collect()
    }
}

fn round_to_multiple(v: f64, m: usize) -> usize {
    (((v / m as f64).round() as usize) * m).max(m)
}

/// Size the network sees for a `width x height` image.
pub fn net_dims(width: usize, height: usize, multiple: usize) -> Result<(usize, usize)> {
    if width == 0 || height == 0 {
        return Err(WbError::OutOfRange {
            what: "image size",
            detail: format!("{width}x{height}"),
        });
    }
    let scale = (MAX_NET_SIDE as f64 / width.max(height) as f64).min(1.0);
    Ok((
        round_to_multiple(width as f64 * scale, multiple),
        round_to_multiple(height as f64 * scale, multiple),
    ))
}

/// Bilinear (triangle filter) resize.
pub fn resize(image: &ImageRGB, width: usize, height: usize) -> Result<ImageRGB> {
    if image.dims() == (width, height) {
        return Ok(image.clone());
    }
    let buf = Rgb32FImage::from_raw(image.width() as u32, image.height() as u32, image.data().to_vec())
        .expect("buffer matches dims");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    ImageRGB::from_vec(width, height, out.into_raw())
}

/// Longest side at most 656, both sides rounded to the nearest multiple of 16.
pub fn resize_for_net(image: &ImageRGB) -> Result<ImageRGB> {
    let (w, h) = net_dims(image.width(), image.height(), 16)?;
    resize(image, w, h)
}

fn resize_for_model(model: &impl WbModel, image: &ImageRGB) -> Result<ImageRGB> {
    let (w, h) = net_dims(image.width(), image.height(), model.required_multiple())?;
    resize(image, w, h)
}

/// Blend weight of the Tungsten image for temperature `t`.
pub fn interpolation_ratio(t: f64) -> Result<f64> {
    if !(TUNGSTEN_K..=SHADE_K).contains(&t) {
        return Err(WbError::OutOfRange {
            what: "temperature",
            detail: format!("{t} K outside {TUNGSTEN_K}..={SHADE_K}"),
        });
    }
    Ok((1.0 / t - 1.0 / SHADE_K) / (1.0 / TUNGSTEN_K - 1.0 / SHADE_K))
}

/// `b * tungsten + (1 - b) * shade`, evaluated in f64 so each output stays
/// between its two inputs.
pub fn blend_temperature(tungsten: &ImageRGB, shade: &ImageRGB, t: f64) -> Result<ImageRGB> {
    let b = interpolation_ratio(t)?;
    if tungsten.dims() != shade.dims() {
        return Err(WbError::shape(
            "blend_temperature",
            format!("{:?}", tungsten.dims()),
            format!("{:?}", shade.dims()),
        ));
    }
    if b == 1.0 {
        return Ok(tungsten.clone());
    }
    if b == 0.0 {
        return Ok(shade.clone());
    }
    let data = tungsten
        .data()
        .iter()
        .zip(shade.data())
        .map(|(&a, &s)| (s as f64 + b * (a as f64 - s as f64)) as f32)
        .collect();
    ImageRGB::from_vec(tungsten.width(), tungsten.height(), data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WbTarget {
    Awb,
    Tungsten,
    Shade,
    /// Kelvin, within 2850..=7500.
    Temperature(f64),
}

impl WbTarget {
    pub fn decoders(self) -> Vec<DecoderId> {
        match self {
            WbTarget::Awb => vec![DecoderId::Awb],
            WbTarget::Tungsten => vec![DecoderId::Tungsten],
            WbTarget::Shade => vec![DecoderId::Shade],
            WbTarget::Temperature(_) => vec![DecoderId::Tungsten, DecoderId::Shade],
        }
    }

    pub fn validate(self) -> Result<()> {
        if let WbTarget::Temperature(t) = self {
            interpolation_ratio(t)?;
        }
        Ok(())
    }

    /// Report label: `awb`, `tungsten`, `shade` or `t<kelvin>`.
    pub fn label(self) -> String {
        match self {
            WbTarget::Temperature(t) => format!("t{}", t.round() as i64),
            other => other.decoders()[0].to_string(),
        }
    }
}

impl fmt::Display for WbTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for WbTarget {
    type Err = WbError;

    /// Accepts decoder names, a bare Kelvin value, or `t<kelvin>`.
    fn from_str(s: &str) -> Result<Self> {
        let k = s.strip_prefix('t').unwrap_or(s);
        if let Ok(t) = k.parse::<f64>() {
            let target = WbTarget::Temperature(t);
            target.validate()?;
            return Ok(target);
        }
        Ok(match s.parse::<DecoderId>()? {
            DecoderId::Awb => WbTarget::Awb,
            DecoderId::Tungsten => WbTarget::Tungsten,
            DecoderId::Shade => WbTarget::Shade,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub image: ImageRGB,
    pub target: WbTarget,
}

/// Network-resolution previews and the mappings fitted from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// The input as the network saw it.
    pub resized: ImageRGB,
    /// Network outputs, clamped to `[0, 1]`.
    pub previews: BTreeMap<DecoderId, ImageRGB>,
    pub mappings: BTreeMap<DecoderId, MappingMatrix>,
}

impl Prepared {
    /// Full-resolution result for `target` on `original`, the image this was
    /// prepared from.
    pub fn render(&self, original: &ImageRGB, target: WbTarget) -> Result<ImageRGB> {
        target.validate()?;
        let apply = |id: DecoderId| -> Result<ImageRGB> {
            let m = self
                .mappings
                .get(&id)
                .ok_or_else(|| WbError::UnknownDecoder(format!("{id} was not prepared")))?;
            Ok(apply_mapping(m, original))
        };
        match target {
            WbTarget::Temperature(t) => blend_temperature(&apply(DecoderId::Tungsten)?, &apply(DecoderId::Shade)?, t),
            preset => apply(preset.decoders()[0]),
        }
    }

    /// Network-resolution preview for `target`.
    pub fn preview(&self, target: WbTarget) -> Result<ImageRGB> {
        let get = |id: DecoderId| {
            self.previews
                .get(&id)
                .ok_or_else(|| WbError::UnknownDecoder(format!("{id} was not prepared")))
        };
        match target {
            WbTarget::Temperature(t) => blend_temperature(get(DecoderId::Tungsten)?, get(DecoderId::Shade)?, t),
            preset => Ok(get(preset.decoders()[0])?.clone()),
        }
    }
}

/// Runs decoders `ids` once on the downsized image and fits one mapping per
/// decoder.
pub fn prepare(model: &impl WbModel, image: &ImageRGB, ids: &[DecoderId]) -> Result<Prepared> {
    let available = model.decoder_ids();
    if let Some(missing) = ids.iter().find(|id| !available.contains(id)) {
        return Err(WbError::UnknownDecoder(missing.to_string()));
    }
    let resized = resize_for_model(model, image)?;
    let outputs = model.predict(&resized, ids)?;
    let mut previews = BTreeMap::new();
    let mut mappings = BTreeMap::new();
    for (id, out) in outputs {
        let m = fit_mapping(&resized, &out)?;
        if !m.is_finite() {
            return Err(WbError::NonFinite(format!("color mapping for {id}")));
        }
        mappings.insert(id, m);
        previews.insert(id, out.clamped());
    }
    Ok(Prepared {
        resized,
        previews,
        mappings,
    })
}

#[derive(Clone, Debug)]
pub struct EditResult {
    /// Same size as the request image, values in `[0, 1]`.
    pub output: ImageRGB,
    pub mappings: BTreeMap<DecoderId, MappingMatrix>,
    pub previews: BTreeMap<DecoderId, ImageRGB>,
}

pub fn edit_wb(model: &impl WbModel, request: &EditRequest) -> Result<EditResult> {
    request.target.validate()?;
    let prepared = prepare(model, &request.image, &request.target.decoders())?;
    let output = prepared.render(&request.image, request.target)?;
    Ok(EditResult {
        output,
        mappings: prepared.mappings,
        previews: prepared.previews,
    })
}

fn ground_truth(ex: &TrainExample, target: WbTarget) -> Result<&ImageRGB> {
    let found = match target {
        WbTarget::Temperature(t) => {
            let k = t.round() as u32;
            match k {
                2850 => ex.targets.get(&DecoderId::Tungsten),
                7500 => ex.targets.get(&DecoderId::Shade),
                _ => ex.extra.get(&k),
            }
        }
        preset => ex.targets.get(&preset.decoders()[0]),
    };
    found.ok_or_else(|| WbError::MissingGroundTruth(format!("scene {} has no `{}` target", ex.id, target.label())))
}

/// Edits every example for every setting and scores it against ground truth.
/// Rows are ordered by example, then setting.
pub fn evaluate(model: &impl WbModel, dataset: &[TrainExample], settings: &[WbTarget]) -> Result<MetricReport> {
    let mut ids: Vec<DecoderId> = settings.iter().flat_map(|s| s.decoders()).collect();
    ids.sort();
    ids.dedup();
    let mut rows = Vec::with_capacity(dataset.len() * settings.len());
    for ex in dataset {
        for &s in settings {
            ground_truth(ex, s)?;
        }
        let prepared = prepare(model, &ex.input, &ids)?;
        for &s in settings {
            let out = prepared.render(&ex.input, s)?;
            rows.push(MetricRow::compute(&ex.id, s.label(), &out, ground_truth(ex, s)?)?);
        }
    }
    MetricReport::from_rows(rows)
}

/// Scores the unedited input against each setting's ground truth.
pub fn identity_baseline(dataset: &[TrainExample], settings: &[WbTarget]) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for ex in dataset {
        for &s in settings {
            rows.push(MetricRow::compute(&ex.id, s.label(), &ex.input, ground_truth(ex, s)?)?);
        }
    }
    MetricReport::from_rows(rows)
}
