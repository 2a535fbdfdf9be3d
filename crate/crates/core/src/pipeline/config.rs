//! Run configuration and its plain-text `key = value` form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::refine::RefineConfig;
use crate::render::RenderConfig;
use crate::tonecurve::{LutDomain, PriorCombine};

/// Which parts of the enhancement pipeline train. Frozen parts stay at identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modules {
    pub global_curve: bool,
    pub curve_bias: bool,
    pub color_matrix: bool,
    pub prior_generator: bool,
    /// Per-Gaussian gain and offset.
    pub color_adjust: bool,
    pub spatial_loss: bool,
    pub curve_loss: bool,
}

/// The ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Plain splats fit to the degraded inputs.
    Baseline,
    GlobalOnly,
    BiasOnly,
    GlobalBias,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::GlobalOnly,
        Variant::BiasOnly,
        Variant::GlobalBias,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::GlobalOnly => "global",
            Variant::BiasOnly => "bias",
            Variant::GlobalBias => "global+bias",
            Variant::Full => "global+bias+matrix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .or(match s {
                "full" => Some(Variant::Full),
                "g" | "global_only" => Some(Variant::GlobalOnly),
                "b" | "bias_only" => Some(Variant::BiasOnly),
                "g+b" => Some(Variant::GlobalBias),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }

    pub fn modules(self) -> Modules {
        let enhance = self != Variant::Baseline;
        Modules {
            global_curve: matches!(self, Variant::GlobalOnly | Variant::GlobalBias | Variant::Full),
            curve_bias: matches!(self, Variant::BiasOnly | Variant::GlobalBias | Variant::Full),
            color_matrix: self == Variant::Full,
            prior_generator: enhance,
            color_adjust: enhance,
            spatial_loss: enhance,
            curve_loss: enhance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub positions: f64,
    pub scales: f64,
    pub rotations: f64,
    pub opacity: f64,
    pub colors: f64,
    pub color_adjust: f64,
    pub matrices: f64,
    pub matrices_decay: f64,
    pub global_curve: f64,
    pub global_curve_decay: f64,
    pub generators: f64,
    pub generators_decay: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            positions: 1.6e-4,
            scales: 5e-3,
            rotations: 1e-3,
            opacity: 5e-2,
            colors: 2.5e-3,
            color_adjust: 2.5e-3,
            matrices: 2.5e-4,
            matrices_decay: 1e-5,
            global_curve: 1e-3,
            global_curve_decay: 1e-4,
            generators: 1e-5,
            generators_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub iterations: u64,
    pub seed: u64,
    pub init_gaussians: usize,
    pub checkpoint_interval: u64,
    pub variant: Variant,
    pub lut_domain: LutDomain,
    pub prior_combine: PriorCombine,
    pub lr: LearningRates,
    pub loss: LossConfig,
    pub refine: RefineConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            seed: 0,
            init_gaussians: 400,
            checkpoint_interval: 1000,
            variant: Variant::Full,
            lut_domain: LutDomain::Clamp,
            prior_combine: PriorCombine::Product,
            lr: LearningRates::default(),
            loss: LossConfig::default(),
            refine: RefineConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {v:?}")))
}

fn parse_rgb(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(format!("config key {key}: expected r,g,b")));
    }
    Ok([parse_num(key, parts[0])?, parse_num(key, parts[1])?, parse_num(key, parts[2])?])
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be positive".into()));
        }
        if self.init_gaussians == 0 {
            return Err(Error::InvalidArgument("init_gaussians must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::InvalidArgument("checkpoint_interval must be positive".into()));
        }
        self.loss.validate()?;
        self.refine.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "init_gaussians" => self.init_gaussians = parse_num(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_num(key, v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "lut_domain" => {
                self.lut_domain = match v {
                    "clamp" => LutDomain::Clamp,
                    "extrapolate" => LutDomain::Extrapolate,
                    _ => return Err(Error::InvalidArgument(format!("lut_domain: unknown value {v:?}"))),
                }
            }
            "prior_combine" => {
                self.prior_combine = match v {
                    "product" => PriorCombine::Product,
                    "compose" => PriorCombine::Compose,
                    _ => return Err(Error::InvalidArgument(format!("prior_combine: unknown value {v:?}"))),
                }
            }
            "lr_positions" => self.lr.positions = parse_num(key, v)?,
            "lr_scales" => self.lr.scales = parse_num(key, v)?,
            "lr_rotations" => self.lr.rotations = parse_num(key, v)?,
            "lr_opacity" => self.lr.opacity = parse_num(key, v)?,
            "lr_colors" => self.lr.colors = parse_num(key, v)?,
            "lr_color_adjust" => self.lr.color_adjust = parse_num(key, v)?,
            "lr_matrices" => self.lr.matrices = parse_num(key, v)?,
            "wd_matrices" => self.lr.matrices_decay = parse_num(key, v)?,
            "lr_global_curve" => self.lr.global_curve = parse_num(key, v)?,
            "wd_global_curve" => self.lr.global_curve_decay = parse_num(key, v)?,
            "lr_generators" => self.lr.generators = parse_num(key, v)?,
            "wd_generators" => self.lr.generators_decay = parse_num(key, v)?,
            "lambda_dssim" => self.loss.lambda_dssim = parse_num(key, v)?,
            "omega_before" => self.loss.omega_before = parse_num(key, v)?,
            "omega_after" => self.loss.omega_after = parse_num(key, v)?,
            "omega_switch" => self.loss.omega_switch = parse_num(key, v)?,
            "curve_weight" => self.loss.curve_weight = parse_num(key, v)?,
            "ssim_window" => self.loss.ssim_window = parse_num(key, v)?,
            "ssim_sigma" => self.loss.ssim_sigma = parse_num(key, v)?,
            "spa_region" => self.loss.spa_region = parse_num(key, v)?,
            "spa_mean_floor" => self.loss.spa_mean_floor = parse_num(key, v)?,
            "refine_interval" => self.refine.interval = parse_num(key, v)?,
            "refine_stop" => self.refine.stop_iteration = parse_num(key, v)?,
            "prune_opacity" => self.refine.prune_opacity = parse_num(key, v)?,
            "clone_fraction" => self.refine.clone_fraction = parse_num(key, v)?,
            "max_gaussians" => self.refine.max_gaussians = parse_num(key, v)?,
            "clone_jitter" => self.refine.jitter = parse_num(key, v)?,
            "blur_floor" => self.render.blur_floor = parse_num(key, v)?,
            "near" => self.render.near = parse_num(key, v)?,
            "truncation_sigma" => self.render.truncation_sigma = parse_num(key, v)?,
            "min_transmittance" => self.render.min_transmittance = parse_num(key, v)?,
            "background" => self.render.background = parse_rgb(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Full listing of every key, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let domain = match self.lut_domain {
            LutDomain::Clamp => "clamp",
            LutDomain::Extrapolate => "extrapolate",
        };
        let combine = match self.prior_combine {
            PriorCombine::Product => "product",
            PriorCombine::Compose => "compose",
        };
        let bg = self.render.background;
        let rows: Vec<(&str, String)> = vec![
            ("iterations", self.iterations.to_string()),
            ("seed", self.seed.to_string()),
            ("init_gaussians", self.init_gaussians.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("variant", self.variant.label().to_string()),
            ("lut_domain", domain.to_string()),
            ("prior_combine", combine.to_string()),
            ("lr_positions", format!("{:e}", self.lr.positions)),
            ("lr_scales", format!("{:e}", self.lr.scales)),
            ("lr_rotations", format!("{:e}", self.lr.rotations)),
            ("lr_opacity", format!("{:e}", self.lr.opacity)),
            ("lr_colors", format!("{:e}", self.lr.colors)),
            ("lr_color_adjust", format!("{:e}", self.lr.color_adjust)),
            ("lr_matrices", format!("{:e}", self.lr.matrices)),
            ("wd_matrices", format!("{:e}", self.lr.matrices_decay)),
            ("lr_global_curve", format!("{:e}", self.lr.global_curve)),
            ("wd_global_curve", format!("{:e}", self.lr.global_curve_decay)),
            ("lr_generators", format!("{:e}", self.lr.generators)),
            ("wd_generators", format!("{:e}", self.lr.generators_decay)),
            ("lambda_dssim", self.loss.lambda_dssim.to_string()),
            ("omega_before", self.loss.omega_before.to_string()),
            ("omega_after", self.loss.omega_after.to_string()),
            ("omega_switch", self.loss.omega_switch.to_string()),
            ("curve_weight", self.loss.curve_weight.to_string()),
            ("ssim_window", self.loss.ssim_window.to_string()),
            ("ssim_sigma", self.loss.ssim_sigma.to_string()),
            ("spa_region", self.loss.spa_region.to_string()),
            ("spa_mean_floor", self.loss.spa_mean_floor.to_string()),
            ("refine_interval", self.refine.interval.to_string()),
            ("refine_stop", self.refine.stop_iteration.to_string()),
            ("prune_opacity", self.refine.prune_opacity.to_string()),
            ("clone_fraction", self.refine.clone_fraction.to_string()),
            ("max_gaussians", self.refine.max_gaussians.to_string()),
            ("clone_jitter", self.refine.jitter.to_string()),
            ("blur_floor", self.render.blur_floor.to_string()),
            ("near", self.render.near.to_string()),
            ("truncation_sigma", self.render.truncation_sigma.to_string()),
            ("min_transmittance", format!("{:e}", self.render.min_transmittance)),
            ("background", format!("{},{},{}", bg[0], bg[1], bg[2])),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
