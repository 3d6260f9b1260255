//! Deterministic synthetic place datasets.
//!
//! Each place is a seeded procedural canvas (oriented gradient, rectangles,
//! periodic textures). Views of a place are random crops of its canvas,
//! each followed by one random condition change.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Geotag, Manifest, ManifestRecord, Role};
use crate::tensor::Tensor;

/// Largest crop translation as a fraction of the crop size.
pub const MAX_SHIFT: f64 = 0.05;
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
/// Spacing of place geotags in meters.
pub const PLACE_SPACING: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub places: usize,
    pub per_place: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Upper bound on condition-transform magnitudes.
    pub max_magnitude: f64,
    /// Weight of the scene layer shared by all places; higher values make
    /// places look more alike.
    pub aliasing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            places: 50,
            per_place: 4,
            image_size: 64,
            seed: 0,
            max_magnitude: 0.3,
            aliasing: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.places < 4 {
            return Err(Error::Config(format!("need at least 4 places, got {}", self.places)));
        }
        if self.per_place < 2 {
            return Err(Error::Config(format!(
                "need at least 2 images per place, got {}",
                self.per_place
            )));
        }
        if self.image_size == 0
            || !(0.0..=1.0).contains(&self.max_magnitude)
            || !(0.0..1.0).contains(&self.aliasing)
        {
            return Err(Error::Config("bad image size, magnitude or aliasing weight".into()));
        }
        Ok(())
    }

    /// Smallest canvas that fits every crop window.
    pub fn canvas_size(&self) -> usize {
        required_canvas(self.image_size)
    }
}

pub fn required_canvas(crop: usize) -> usize {
    (crop as f64 * (SCALE_RANGE.1 + 2.0 * MAX_SHIFT)).ceil() as usize + 2
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticPlaceSpec {
    pub place: usize,
    pub pattern_seed: u64,
    /// Seed of the shared scene layer; equal for every place of a dataset.
    pub style_seed: u64,
    pub aliasing: f64,
    pub geotag: Geotag,
    pub canvas: usize,
}

impl SyntheticPlaceSpec {
    /// Place `i` of a dataset: its own pattern stream, on a square grid of
    /// geotags `PLACE_SPACING` apart.
    pub fn for_place(seed: u64, place: usize, places: usize, canvas: usize, aliasing: f64) -> Self {
        let cols = (places as f64).sqrt().ceil().max(1.0) as usize;
        Self {
            place,
            pattern_seed: place_rng(seed, place).random(),
            style_seed: ChaCha8Rng::seed_from_u64(seed).random(),
            aliasing,
            geotag: Geotag::Planar {
                x: (place % cols) as f64 * PLACE_SPACING,
                y: (place / cols) as f64 * PLACE_SPACING,
            },
            canvas,
        }
    }
}

/// Independent stream per (master seed, place).
pub fn place_rng(seed: u64, place: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(place as u64 + 1);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionKind {
    Brightness,
    Contrast,
    Tint,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionTransform {
    pub kind: ConditionKind,
    /// In `[0, 1]`; 0 is the identity.
    pub magnitude: f64,
}

/// Applies `t` to a `[3, H, W]` image with values in `[0, 1]`; the result
/// is clamped back to `[0, 1]`.
pub fn apply_condition_transform<R: Rng + ?Sized>(
    img: &Tensor<f32>,
    t: ConditionTransform,
    rng: &mut R,
) -> Tensor<f32> {
    let m = t.magnitude;
    let mut out = img.clone();
    let plane = img.numel() / 3;
    match t.kind {
        ConditionKind::Brightness => {
            let shift = m * 0.4 * if rng.random::<bool>() { 1.0 } else { -1.0 };
            out.data_mut().iter_mut().for_each(|v| *v = (*v as f64 + shift) as f32);
        }
        ConditionKind::Contrast => {
            let gain = 1.0 + m * rng.random_range(-0.6..=1.0);
            let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.numel().max(1) as f64;
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = (mean + (*v as f64 - mean) * gain) as f32);
        }
        ConditionKind::Tint => {
            for c in 0..3 {
                let gain = 1.0 + m * rng.random_range(-0.4..=0.4);
                out.data_mut()[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = (*v as f64 * gain) as f32);
            }
        }
        ConditionKind::Noise => {
            let sigma = 0.25 * m;
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                out.data_mut().iter_mut().for_each(|v| {
                    let n: f64 = normal.sample(rng);
                    *v = (*v as f64 + n.clamp(-3.0 * sigma, 3.0 * sigma)) as f32;
                });
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

fn random_condition<R: Rng + ?Sized>(rng: &mut R, max_magnitude: f64) -> ConditionTransform {
    let kind = match rng.random_range(0..4) {
        0 => ConditionKind::Brightness,
        1 => ConditionKind::Contrast,
        2 => ConditionKind::Tint,
        _ => ConditionKind::Noise,
    };
    ConditionTransform {
        kind,
        magnitude: rng.random_range(0.0..=max_magnitude),
    }
}

/// Renders the canvas for `spec`: its own pattern blended with the shared
/// scene layer, `[3, C, C]`.
pub fn render_canvas(spec: &SyntheticPlaceSpec) -> Tensor<f32> {
    let own = render_pattern(spec.pattern_seed, spec.canvas);
    if spec.aliasing == 0.0 {
        return own;
    }
    let shared = render_pattern(spec.style_seed, spec.canvas);
    let a = spec.aliasing as f32;
    let data = own
        .data()
        .iter()
        .zip(shared.data())
        .map(|(&x, &y)| (1.0 - a) * x + a * y)
        .collect();
    Tensor::new(own.shape().to_vec(), data).expect("canvas shape")
}

/// One seeded procedural pattern (oriented gradient, rectangles, periodic
/// textures) as a `[3, c, c]` image.
pub fn render_pattern(seed: u64, c: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cf = c as f64;
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.random(), rng.random(), rng.random()] };

    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (color(&mut rng), color(&mut rng));

    struct Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
        col: [f64; 3],
        alpha: f64,
    }
    let rects: Vec<Rect> = (0..rng.random_range(4..=8))
        .map(|_| {
            let (h, w) = (rng.random_range(0.1..0.45) * cf, rng.random_range(0.1..0.45) * cf);
            let (y0, x0) = (rng.random_range(0.0..cf - h), rng.random_range(0.0..cf - w));
            Rect {
                y0,
                x0,
                y1: y0 + h,
                x1: x0 + w,
                col: color(&mut rng),
                alpha: rng.random_range(0.5..0.9),
            }
        })
        .collect();

    struct Wave {
        ky: f64,
        kx: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..rng.random_range(2..=3))
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(6.0..24.0);
            let k = std::f64::consts::TAU / period;
            Wave {
                ky: k * theta.sin(),
                kx: k * theta.cos(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                ],
            }
        })
        .collect();

    let mut data = vec![0f32; 3 * c * c];
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..c {
        for x in 0..c {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = (((xf / cf - 0.5) * ca + (yf / cf - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = ga[ch] * (1.0 - t) + gb[ch] * t;
            }
            for r in &rects {
                if yf >= r.y0 && yf < r.y1 && xf >= r.x0 && xf < r.x1 {
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - r.alpha) + r.col[ch] * r.alpha;
                    }
                }
            }
            for w in &waves {
                let s = (w.ky * yf + w.kx * xf + w.phase).sin();
                for ch in 0..3 {
                    px[ch] += w.amp[ch] * s;
                }
            }
            for ch in 0..3 {
                data[(ch * c + y) * c + x] = px[ch].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new([3, c, c], data).expect("canvas shape")
}

/// A square crop window on the canvas, in canvas pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub center_y: f64,
    pub center_x: f64,
    pub size: f64,
}

impl CropWindow {
    pub fn centered(canvas: usize, crop: usize) -> Self {
        Self {
            center_y: canvas as f64 / 2.0,
            center_x: canvas as f64 / 2.0,
            size: crop as f64,
        }
    }

    fn random<R: Rng + ?Sized>(rng: &mut R, canvas: usize, crop: usize) -> Self {
        let shift = MAX_SHIFT * crop as f64;
        let mut w = Self::centered(canvas, crop);
        w.center_y += rng.random_range(-shift..=shift);
        w.center_x += rng.random_range(-shift..=shift);
        w.size *= rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        w
    }
}

/// Bilinear resampling of `window` to a `[3, out, out]` image.
pub fn crop(canvas: &Tensor<f32>, window: CropWindow, out: usize) -> Tensor<f32> {
    let c = canvas.shape()[1];
    let src = canvas.data();
    let step = window.size / out as f64;
    let y0 = window.center_y - window.size / 2.0;
    let x0 = window.center_x - window.size / 2.0;
    let mut data = vec![0f32; 3 * out * out];
    for i in 0..out {
        let sy = (y0 + (i as f64 + 0.5) * step - 0.5).clamp(0.0, (c - 1) as f64);
        let (iy, fy) = (sy.floor() as usize, sy.fract());
        let iy1 = (iy + 1).min(c - 1);
        for j in 0..out {
            let sx = (x0 + (j as f64 + 0.5) * step - 0.5).clamp(0.0, (c - 1) as f64);
            let (ix, fx) = (sx.floor() as usize, sx.fract());
            let ix1 = (ix + 1).min(c - 1);
            for ch in 0..3 {
                let at = |y: usize, x: usize| src[(ch * c + y) * c + x] as f64;
                let top = at(iy, ix) * (1.0 - fx) + at(iy, ix1) * fx;
                let bot = at(iy1, ix) * (1.0 - fx) + at(iy1, ix1) * fx;
                data[(ch * out + i) * out + j] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new([3, out, out], data).expect("crop shape")
}

/// `K` views of one place.
#[derive(Clone, Debug)]
pub struct PlaceImages {
    pub place: usize,
    pub geotag: Geotag,
    pub images: Vec<Tensor<f32>>,
}

pub fn gen_place<R: Rng + ?Sized>(
    spec: &SyntheticPlaceSpec,
    k: usize,
    image_size: usize,
    max_magnitude: f64,
    rng: &mut R,
) -> Result<PlaceImages> {
    let needed = required_canvas(image_size);
    if spec.canvas < needed {
        return Err(Error::CanvasTooSmall {
            canvas: spec.canvas,
            crop: image_size,
            needed,
        });
    }
    let canvas = render_canvas(spec);
    let images = (0..k)
        .map(|_| {
            let window = CropWindow::random(rng, spec.canvas, image_size);
            let view = crop(&canvas, window, image_size);
            let t = random_condition(rng, max_magnitude);
            apply_condition_transform(&view, t, rng)
        })
        .collect();
    Ok(PlaceImages {
        place: spec.place,
        geotag: spec.geotag,
        images,
    })
}

/// One generated image with its metadata.
#[derive(Clone, Debug)]
pub struct SynthImage {
    pub id: String,
    pub place: usize,
    pub geotag: Geotag,
    pub role: Role,
    pub image: Tensor<f32>,
}

/// An in-memory dataset. View 0 of every place is its query; the rest form
/// the database, which is also the training set.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
}

impl SynthDataset {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let canvas = config.canvas_size();
        let places: Vec<PlaceImages> = (0..config.places)
            .into_par_iter()
            .map(|p| {
                let spec = SyntheticPlaceSpec::for_place(config.seed, p, config.places, canvas, config.aliasing);
                let mut rng = place_rng(config.seed, p);
                // skip the draw used for the pattern seed
                let _: u64 = rng.random();
                gen_place(&spec, config.per_place, config.image_size, config.max_magnitude, &mut rng)
            })
            .collect::<Result<_>>()?;
        let images = places
            .into_iter()
            .flat_map(|p| {
                let (place, geotag) = (p.place, p.geotag);
                p.images.into_iter().enumerate().map(move |(k, image)| SynthImage {
                    id: format!("p{place:04}_v{k}"),
                    place,
                    geotag,
                    role: if k == 0 { Role::Query } else { Role::Db },
                    image,
                })
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            images,
        })
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &SynthImage> {
        self.images.iter().filter(move |i| i.role == role)
    }

    /// Writes `images/<id>.bin`, `manifest.csv` (all images) and
    /// `split.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir)?;
        self.images
            .par_iter()
            .try_for_each(|im| io::write_image(&img_dir.join(format!("{}.bin", im.id)), &im.image))?;
        let manifest = Manifest {
            records: self
                .images
                .iter()
                .map(|im| ManifestRecord {
                    path: Path::new("images").join(format!("{}.bin", im.id)),
                    place: im.place,
                    geotag: im.geotag,
                })
                .collect(),
        };
        manifest.save(&dir.join(MANIFEST_FILE))?;
        let split: Vec<(String, Role)> = self.images.iter().map(|im| (im.id.clone(), im.role)).collect();
        fs::write(dir.join(SPLIT_FILE), io::split_text(&split))?;
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPLIT_FILE: &str = "split.txt";

/// Mean absolute per-pixel difference.
pub fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.numel().max(1) as f64
}

/// Pearson correlation of raw pixel values.
pub fn pixel_correlation(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.numel() as f64;
    let ma = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt().max(1e-12)
}
