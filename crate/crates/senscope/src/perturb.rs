//! The degradation catalogue: seeded, deterministic, replayable transforms.
//!
//! Every perturbation is a pure function of `(image, spec, seed, trial)`.
//! Trial `t` of base seed `b` draws its noise from the counter stream keyed
//! by `mix(b, t)`; compose child `i` re-keys with `mix(trial_key, i)`. Noise
//! values are consumed in row-major pixel order, so outputs are identical
//! across platforms and thread schedules.
//!
//! Additive Gaussian noise clamps the result back to `[0, 255]`; hue noise
//! wraps modulo 256 instead, because hue is circular.

use crate::color::{hsi_to_rgb, rgb_to_hsi};
use crate::error::{Error, Result};
use crate::rng::{mix, CounterRng};
use crate::tensor::{clamp_u8_range, ImageTensor};

/// Base seed for a family of Monte Carlo trials.
///
/// `trial_key(t) = mix(base, t)` gives statistically independent streams per
/// trial while staying replayable: the same `(base, trial)` always produces
/// the identical noise field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed {
    pub base: u64,
}

impl Seed {
    pub fn new(base: u64) -> Self {
        Self { base }
    }

    #[inline]
    pub fn trial_key(self, trial: u64) -> u64 {
        mix(self.base, trial)
    }

    /// Derived seed for a sub-stream (per image, per spec, ...).
    #[inline]
    pub fn derive(self, index: u64) -> Seed {
        Seed { base: mix(self.base, index) }
    }
}

/// Whether pepper noise hits whole pixels or individual channel elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PepperMode {
    /// One Bernoulli draw per pixel; a hit zeroes all channels. This is the
    /// variant the analytic pepper predictor models.
    #[default]
    PerPixel,
    /// One Bernoulli draw per element (channel of a pixel).
    PerChannel,
}

impl PepperMode {
    pub fn name(self) -> &'static str {
        match self {
            PepperMode::PerPixel => "per_pixel",
            PepperMode::PerChannel => "per_channel",
        }
    }
}

/// One image degradation and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum PerturbationSpec {
    /// Additive iid N(0, sigma^2) on every channel element.
    GaussianRgb { sigma: f64 },
    /// Additive iid N(0, sigma^2) on the HSI intensity channel.
    GaussianIntensity { sigma: f64 },
    /// One shared N(0, sigma^2) hue offset for the whole image (wraps).
    GlobalColorShift { sigma: f64 },
    /// Independent N(0, sigma^2) hue offset per pixel (wraps).
    LocalColorShift { sigma: f64 },
    /// Additive iid N(0, sigma^2) on the HSI saturation channel.
    GaussianSaturation { sigma: f64 },
    /// Impulse noise setting values to 0 with probability p.
    Pepper { p: f64, mode: PepperMode },
    /// Random translation by (dx, dy) ~ N(0, sigma^2 I), bilinear resampling
    /// with reflecting boundary.
    Translation { sigma: f64 },
    /// 90-degree clockwise rotation (deterministic).
    Rotate90,
    /// Vertical mirror (deterministic).
    FlipUd,
    /// Horizontal mirror (deterministic).
    FlipLr,
    /// Children applied left to right.
    Compose(Vec<PerturbationSpec>),
}

impl PerturbationSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::GaussianRgb { .. } => "gaussian_rgb",
            Self::GaussianIntensity { .. } => "gaussian_intensity",
            Self::GlobalColorShift { .. } => "global_color_shift",
            Self::LocalColorShift { .. } => "local_color_shift",
            Self::GaussianSaturation { .. } => "gaussian_saturation",
            Self::Pepper { .. } => "pepper",
            Self::Translation { .. } => "translation",
            Self::Rotate90 => "rotate90",
            Self::FlipUd => "flip_ud",
            Self::FlipLr => "flip_lr",
            Self::Compose(_) => "compose",
        }
    }

    /// The scalar knob of the perturbation: sigma, p, or 0 when there is none.
    pub fn nominal_level(&self) -> f64 {
        match self {
            Self::GaussianRgb { sigma }
            | Self::GaussianIntensity { sigma }
            | Self::GlobalColorShift { sigma }
            | Self::LocalColorShift { sigma }
            | Self::GaussianSaturation { sigma }
            | Self::Translation { sigma } => *sigma,
            Self::Pepper { p, .. } => *p,
            Self::Rotate90 | Self::FlipUd | Self::FlipLr => 0.0,
            Self::Compose(children) => {
                children.iter().map(|c| c.nominal_level()).find(|&l| l != 0.0).unwrap_or(0.0)
            }
        }
    }

    /// Copy of the spec with its scalar knob replaced (sigma or p).
    pub fn with_level(&self, level: f64) -> Result<Self> {
        let spec = match self {
            Self::GaussianRgb { .. } => Self::GaussianRgb { sigma: level },
            Self::GaussianIntensity { .. } => Self::GaussianIntensity { sigma: level },
            Self::GlobalColorShift { .. } => Self::GlobalColorShift { sigma: level },
            Self::LocalColorShift { .. } => Self::LocalColorShift { sigma: level },
            Self::GaussianSaturation { .. } => Self::GaussianSaturation { sigma: level },
            Self::Translation { .. } => Self::Translation { sigma: level },
            Self::Pepper { mode, .. } => Self::Pepper { p: level, mode: *mode },
            other => {
                return Err(Error::Unsupported(format!(
                    "{} has no scalar level to set",
                    other.kind_name()
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::GaussianRgb { sigma }
            | Self::GaussianIntensity { sigma }
            | Self::GlobalColorShift { sigma }
            | Self::LocalColorShift { sigma }
            | Self::GaussianSaturation { sigma }
            | Self::Translation { sigma } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "sigma must be finite and nonnegative, got {sigma}"
                    )));
                }
            }
            Self::Pepper { p, .. } => {
                if !p.is_finite() || !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidArgument(format!(
                        "pepper probability must lie in [0, 1], got {p}"
                    )));
                }
            }
            Self::Rotate90 | Self::FlipUd | Self::FlipLr => {}
            Self::Compose(children) => {
                if children.is_empty() {
                    return Err(Error::InvalidArgument("compose needs at least one child".into()));
                }
                for c in children {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }

    /// True for the HSI-domain kinds that need a 3-channel input.
    fn needs_rgb(&self) -> bool {
        matches!(
            self,
            Self::GaussianIntensity { .. }
                | Self::GlobalColorShift { .. }
                | Self::LocalColorShift { .. }
                | Self::GaussianSaturation { .. }
        )
    }

    /// Serializes to the plain-text config form, e.g.
    /// `kind=gaussian_rgb sigma=2` or `[ kind=pepper p=0.1 mode=per_pixel ; kind=flip_lr ]`.
    pub fn to_config_string(&self) -> String {
        match self {
            Self::Pepper { p, mode } => format!("kind=pepper p={p} mode={}", mode.name()),
            Self::Rotate90 | Self::FlipUd | Self::FlipLr => format!("kind={}", self.kind_name()),
            Self::Compose(children) => {
                let inner: Vec<String> = children.iter().map(|c| c.to_config_string()).collect();
                format!("[ {} ]", inner.join(" ; "))
            }
            sigma_kind => {
                format!("kind={} sigma={}", sigma_kind.kind_name(), sigma_kind.nominal_level())
            }
        }
    }

    /// Parses one spec from its plain-text form. Semicolons at the top level
    /// form an implicit compose; bracketed groups nest.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = tokenize(text);
        let mut pos = 0usize;
        let spec = parse_sequence(&tokens, &mut pos, false)?;
        if pos != tokens.len() {
            return Err(Error::Format(format!(
                "trailing tokens in perturbation spec: {:?}",
                &tokens[pos..]
            )));
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '[' | ']' | ';' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Parses `spec (; spec)*` until `]` (if `bracketed`) or end of input.
fn parse_sequence(tokens: &[String], pos: &mut usize, bracketed: bool) -> Result<PerturbationSpec> {
    let mut parts = Vec::new();
    loop {
        parts.push(parse_single(tokens, pos)?);
        match tokens.get(*pos).map(String::as_str) {
            Some(";") => {
                *pos += 1;
            }
            Some("]") if bracketed => {
                *pos += 1;
                break;
            }
            None if !bracketed => break,
            None => return Err(Error::Format("unclosed '[' in perturbation spec".into())),
            Some(other) if bracketed => {
                return Err(Error::Format(format!("expected ';' or ']', got '{other}'")))
            }
            Some(_) => break,
        }
    }
    Ok(if parts.len() == 1 { parts.pop().unwrap() } else { PerturbationSpec::Compose(parts) })
}

fn parse_single(tokens: &[String], pos: &mut usize) -> Result<PerturbationSpec> {
    if tokens.get(*pos).map(String::as_str) == Some("[") {
        *pos += 1;
        return parse_sequence(tokens, pos, true);
    }
    let mut kind: Option<String> = None;
    let mut sigma: Option<f64> = None;
    let mut p: Option<f64> = None;
    let mut mode = PepperMode::default();
    while let Some(tok) = tokens.get(*pos) {
        if tok == ";" || tok == "]" || tok == "[" {
            break;
        }
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected key=value, got '{tok}'")))?;
        match key {
            "kind" => kind = Some(value.to_string()),
            "sigma" => {
                sigma = Some(value.parse().map_err(|_| {
                    Error::Format(format!("sigma value '{value}' is not a number"))
                })?)
            }
            "p" => {
                p = Some(
                    value
                        .parse()
                        .map_err(|_| Error::Format(format!("p value '{value}' is not a number")))?,
                )
            }
            "mode" => {
                mode = match value {
                    "per_pixel" => PepperMode::PerPixel,
                    "per_channel" => PepperMode::PerChannel,
                    other => {
                        return Err(Error::Format(format!("unknown pepper mode '{other}'")))
                    }
                }
            }
            other => return Err(Error::Format(format!("unknown spec key '{other}'"))),
        }
        *pos += 1;
    }
    let kind = kind.ok_or_else(|| Error::Format("perturbation spec is missing kind=".into()))?;
    let need_sigma = || sigma.ok_or_else(|| Error::Format(format!("kind={kind} needs sigma=")));
    let spec = match kind.as_str() {
        "gaussian_rgb" => PerturbationSpec::GaussianRgb { sigma: need_sigma()? },
        "gaussian_intensity" => PerturbationSpec::GaussianIntensity { sigma: need_sigma()? },
        "global_color_shift" => PerturbationSpec::GlobalColorShift { sigma: need_sigma()? },
        "local_color_shift" => PerturbationSpec::LocalColorShift { sigma: need_sigma()? },
        "gaussian_saturation" => PerturbationSpec::GaussianSaturation { sigma: need_sigma()? },
        "translation" => PerturbationSpec::Translation { sigma: need_sigma()? },
        "pepper" => PerturbationSpec::Pepper {
            p: p.ok_or_else(|| Error::Format("kind=pepper needs p=".into()))?,
            mode,
        },
        "rotate90" => PerturbationSpec::Rotate90,
        "flip_ud" => PerturbationSpec::FlipUd,
        "flip_lr" => PerturbationSpec::FlipLr,
        other => return Err(Error::Format(format!("unknown perturbation kind '{other}'"))),
    };
    Ok(spec)
}

/// Applies `spec` to `img` using the noise field of the given trial.
///
/// Deterministic kinds ignore the seed. Repeated calls with identical
/// arguments return bit-identical images.
pub fn apply_perturbation(
    img: &ImageTensor,
    spec: &PerturbationSpec,
    seed: Seed,
    trial: u64,
) -> Result<ImageTensor> {
    spec.validate()?;
    apply_with_key(img, spec, seed.trial_key(trial))
}

fn apply_with_key(img: &ImageTensor, spec: &PerturbationSpec, key: u64) -> Result<ImageTensor> {
    if spec.needs_rgb() && img.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "{} operates in the HSI domain and needs a 3-channel image",
            spec.kind_name()
        )));
    }
    let mut rng = CounterRng::new(key);
    match spec {
        PerturbationSpec::GaussianRgb { sigma } => {
            let data = img
                .data()
                .iter()
                .map(|&v| clamp_u8_range(v as f64 + sigma * rng.next_gaussian()))
                .collect();
            ImageTensor::new(img.height(), img.width(), img.channels(), data)
        }
        PerturbationSpec::GaussianIntensity { sigma } => {
            let mut hsi = rgb_to_hsi(img)?;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    hsi.shift_clamped(y, x, 2, sigma * rng.next_gaussian());
                }
            }
            Ok(hsi_to_rgb(&hsi))
        }
        PerturbationSpec::GlobalColorShift { sigma } => {
            let delta = sigma * rng.next_gaussian();
            let mut hsi = rgb_to_hsi(img)?;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    hsi.shift_hue(y, x, delta);
                }
            }
            Ok(hsi_to_rgb(&hsi))
        }
        PerturbationSpec::LocalColorShift { sigma } => {
            let mut hsi = rgb_to_hsi(img)?;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    hsi.shift_hue(y, x, sigma * rng.next_gaussian());
                }
            }
            Ok(hsi_to_rgb(&hsi))
        }
        PerturbationSpec::GaussianSaturation { sigma } => {
            let mut hsi = rgb_to_hsi(img)?;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    hsi.shift_clamped(y, x, 1, sigma * rng.next_gaussian());
                }
            }
            Ok(hsi_to_rgb(&hsi))
        }
        PerturbationSpec::Pepper { p, mode } => {
            let mut out = img.clone();
            let ch = img.channels();
            match mode {
                PepperMode::PerPixel => {
                    let mut data = out.data().to_vec();
                    for px in 0..img.num_pixels() {
                        if rng.next_f64() < *p {
                            for c in 0..ch {
                                data[px * ch + c] = 0.0;
                            }
                        }
                    }
                    out = ImageTensor::new(img.height(), img.width(), ch, data)?;
                }
                PepperMode::PerChannel => {
                    let mut data = out.data().to_vec();
                    for v in data.iter_mut() {
                        if rng.next_f64() < *p {
                            *v = 0.0;
                        }
                    }
                    out = ImageTensor::new(img.height(), img.width(), ch, data)?;
                }
            }
            Ok(out)
        }
        PerturbationSpec::Translation { sigma } => {
            let dx = sigma * rng.next_gaussian();
            let dy = sigma * rng.next_gaussian();
            ImageTensor::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
                img.sample_bilinear_reflect(y as f64 - dy, x as f64 - dx, c)
            })
        }
        PerturbationSpec::Rotate90 => Ok(img.rotate90()),
        PerturbationSpec::FlipUd => Ok(img.flip_ud()),
        PerturbationSpec::FlipLr => Ok(img.flip_lr()),
        PerturbationSpec::Compose(children) => {
            let mut current = img.clone();
            for (i, child) in children.iter().enumerate() {
                current = apply_with_key(&current, child, mix(key, i as u64))?;
            }
            Ok(current)
        }
    }
}
