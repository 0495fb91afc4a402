//! Declarative network schedules and their text format.
//!
//! A config file is a block of `key = value` lines followed by one line per
//! layer:
//!
//! ```text
//! variant = tiny-4
//! window = 8x8
//! alpha = 0.8
//! mamba rf te=h:cat token=1x1 channels=3
//! mamba rf te=none:- token=1x2 channels=6
//! ```
//!
//! `token` and `channels` are optional declared columns; when present they
//! must agree with the trajectory computed from the expansion steps. Lines
//! starting with `#` and blank lines are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::expansion::{Axis, ExpansionSpec, PadMode};
use crate::fusion::{merge_count, MergeWeighting};
use crate::serialization::ScanWindow;
use crate::ssm::MambaConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub has_mamba: bool,
    pub has_fusion: bool,
    pub te: Option<ExpansionSpec>,
    /// Declared receptive field `(rows, cols)` at layer input.
    pub token: Option<(usize, usize)>,
    /// Declared channel width at layer input.
    pub channels: Option<usize>,
}

impl LayerSpec {
    pub fn new(te: Option<ExpansionSpec>) -> Self {
        LayerSpec {
            has_mamba: true,
            has_fusion: true,
            te,
            token: None,
            channels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub variant: String,
    pub init_channels: usize,
    pub window: ScanWindow,
    pub alpha: f64,
    pub mamba: MambaConfig,
    pub pad: PadMode,
    pub weighting: MergeWeighting,
    pub layers: Vec<LayerSpec>,
}

pub const PIXELMAMBA_6M: &str = include_str!("../configs/pixelmamba-6m.cfg");
pub const PIXELMAMBA_21M: &str = include_str!("../configs/pixelmamba-21m.cfg");
pub const TINY_8: &str = include_str!("../configs/tiny-8.cfg");
pub const TINY_4: &str = include_str!("../configs/tiny-4.cfg");

/// Names accepted by [`NetworkConfig::bundled`].
pub const BUNDLED: [&str; 4] = ["pixelmamba-6m", "pixelmamba-21m", "tiny-8", "tiny-4"];

/// Per-layer shape bookkeeping at layer input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub channels: usize,
    pub rf: (usize, usize),
}

impl NetworkConfig {
    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name {
            "pixelmamba-6m" | "6m" => PIXELMAMBA_6M,
            "pixelmamba-21m" | "21m" => PIXELMAMBA_21M,
            "tiny-8" => TINY_8,
            "tiny-4" => TINY_4,
            _ => return Err(Error::Invalid(format!("no bundled config named '{name}'"))),
        };
        Self::parse(text)
    }

    /// Loads a bundled config by name or a config file by path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.exists() {
            Self::parse(&std::fs::read_to_string(path)?)
        } else {
            Self::bundled(name_or_path.trim_end_matches(".cfg"))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig {
            variant: String::from("custom"),
            init_channels: 3,
            window: ScanWindow::square(32)?,
            alpha: 0.8,
            mamba: MambaConfig::default(),
            pad: PadMode::Replicate,
            weighting: MergeWeighting::Members,
            layers: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let first = line.split_whitespace().next().unwrap_or_default();
            if matches!(first, "mamba" | "rf") || first.starts_with("te=") {
                cfg.layers.push(parse_layer(line).map_err(err)?);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value or a layer line, got '{line}'")))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Invalid(format!("'{v}' is not a non-negative integer")))
        };
        match key {
            "variant" => self.variant = value.to_string(),
            "init_channels" => self.init_channels = num(value)?,
            "window" => {
                let (h, w) = parse_dims(value).map_err(Error::Invalid)?;
                self.window = ScanWindow::new(h, w)?;
            }
            "alpha" => {
                self.alpha = value
                    .parse()
                    .map_err(|_| Error::Invalid(format!("alpha '{value}' is not a number")))?
            }
            "d_state" => self.mamba.d_state = num(value)?,
            "expand" => self.mamba.expand = num(value)?,
            "d_conv" => self.mamba.d_conv = num(value)?,
            "dt_rank" => {
                self.mamba.dt_rank = match value {
                    "auto" => None,
                    v => Some(num(v)?),
                }
            }
            "shared_conv" => {
                self.mamba.shared_conv = value
                    .parse()
                    .map_err(|_| Error::Invalid(format!("shared_conv '{value}' is not a bool")))?
            }
            "norm_eps" => {
                self.mamba.norm_eps = value
                    .parse()
                    .map_err(|_| Error::Invalid(format!("norm_eps '{value}' is not a number")))?
            }
            "pad" => {
                self.pad = match value {
                    "replicate" => PadMode::Replicate,
                    "zero" => PadMode::Zero,
                    _ => return Err(Error::Invalid(format!("unknown pad mode '{value}'"))),
                }
            }
            "weighting" => {
                self.weighting = match value {
                    "members" => MergeWeighting::Members,
                    "equal" => MergeWeighting::Equal,
                    _ => return Err(Error::Invalid(format!("unknown weighting '{value}'"))),
                }
            }
            _ => return Err(Error::Invalid(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let m = &self.mamba;
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "init_channels = {}", self.init_channels);
        let _ = writeln!(s, "window = {}x{}", self.window.h, self.window.w);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "d_state = {}", m.d_state);
        let _ = writeln!(s, "expand = {}", m.expand);
        let _ = writeln!(s, "d_conv = {}", m.d_conv);
        match m.dt_rank {
            Some(r) => {
                let _ = writeln!(s, "dt_rank = {r}");
            }
            None => s.push_str("dt_rank = auto\n"),
        }
        let _ = writeln!(s, "shared_conv = {}", m.shared_conv);
        let _ = writeln!(s, "norm_eps = {:?}", m.norm_eps);
        let pad = match self.pad {
            PadMode::Replicate => "replicate",
            PadMode::Zero => "zero",
        };
        let _ = writeln!(s, "pad = {pad}");
        let weighting = match self.weighting {
            MergeWeighting::Members => "members",
            MergeWeighting::Equal => "equal",
        };
        let _ = writeln!(s, "weighting = {weighting}");
        for layer in &self.layers {
            s.push_str(&layer_text(layer));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Channel width and receptive field at the input of each layer, plus
    /// the output after the last layer.
    pub fn trajectory(&self) -> Vec<LayerShape> {
        let mut cur = LayerShape {
            channels: self.init_channels,
            rf: (1, 1),
        };
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        for layer in &self.layers {
            out.push(cur);
            if let Some(te) = layer.te {
                cur = LayerShape {
                    channels: te.out_channels(cur.channels),
                    rf: te.grow_rf(cur.rf),
                };
            }
        }
        out.push(cur);
        out
    }

    pub fn final_channels(&self) -> usize {
        self.trajectory().last().map_or(self.init_channels, |s| s.channels)
    }

    /// Region counts before each layer and merges per layer for `n0` windows.
    pub fn fusion_counts(&self, n0: usize) -> Result<Vec<(usize, usize)>> {
        let mut n = n0;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let k = if layer.has_fusion {
                merge_count(n, self.alpha, self.layers.len())?
            } else {
                0
            };
            out.push((n, k));
            n -= k;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("config has no layers".into()));
        }
        if self.init_channels == 0 {
            return Err(Error::Invalid("init_channels must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let m = &self.mamba;
        if m.d_state == 0 || m.expand == 0 || m.d_conv == 0 || m.dt_rank == Some(0) {
            return Err(Error::Invalid("mamba hyper-parameters must be positive".into()));
        }
        if !(m.norm_eps > 0.0) {
            return Err(Error::Invalid("norm_eps must be positive".into()));
        }
        let traj = self.trajectory();
        for (i, (layer, shape)) in self.layers.iter().zip(&traj).enumerate() {
            if let Some(c) = layer.channels.filter(|&c| c != shape.channels) {
                return Err(Error::Invalid(format!(
                    "layer {} declares {c} channels but the expansion schedule gives {}",
                    i + 1,
                    shape.channels
                )));
            }
            if let Some(t) = layer.token.filter(|&t| t != shape.rf) {
                return Err(Error::Invalid(format!(
                    "layer {} declares token {}x{} but the expansion schedule gives {}x{}",
                    i + 1,
                    t.0,
                    t.1,
                    shape.rf.0,
                    shape.rf.1
                )));
            }
        }
        let rf = traj.last().unwrap().rf;
        if !self.window.h.is_multiple_of(rf.0) || !self.window.w.is_multiple_of(rf.1) {
            return Err(Error::Invalid(format!(
                "window {}x{} is not divisible by the final receptive field {}x{}",
                self.window.h, self.window.w, rf.0, rf.1
            )));
        }
        Ok(())
    }

    /// Total halvings along rows and columns.
    pub fn downsampling(&self) -> (usize, usize) {
        self.trajectory().last().unwrap().rf
    }
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| format!("'{s}' is not RxC"))?;
    let a = a.trim().parse().map_err(|_| format!("bad extent in '{s}'"))?;
    let b = b.trim().parse().map_err(|_| format!("bad extent in '{s}'"))?;
    Ok((a, b))
}

fn parse_layer(line: &str) -> std::result::Result<LayerSpec, String> {
    let mut spec = LayerSpec {
        has_mamba: false,
        has_fusion: false,
        te: None,
        token: None,
        channels: None,
    };
    let mut saw_te = false;
    for word in line.split_whitespace() {
        match word.split_once('=') {
            None => match word {
                "mamba" => spec.has_mamba = true,
                "rf" => spec.has_fusion = true,
                _ => return Err(format!("unknown layer component '{word}'")),
            },
            Some(("te", v)) => {
                saw_te = true;
                spec.te = match v {
                    "none" | "none:-" => None,
                    _ => Some(v.parse::<ExpansionSpec>().map_err(|e| e.to_string())?),
                };
            }
            Some(("token", v)) => spec.token = Some(parse_dims(v)?),
            Some(("channels", v)) => {
                spec.channels = Some(v.parse().map_err(|_| format!("bad channel count '{v}'"))?)
            }
            Some((k, _)) => return Err(format!("unknown layer field '{k}'")),
        }
    }
    if !saw_te {
        return Err("layer line needs te=<h|v|none>:<cat|avg|->".into());
    }
    Ok(spec)
}

fn layer_text(layer: &LayerSpec) -> String {
    let mut parts: Vec<String> = Vec::new();
    if layer.has_mamba {
        parts.push("mamba".into());
    }
    if layer.has_fusion {
        parts.push("rf".into());
    }
    parts.push(match layer.te {
        Some(te) => format!("te={te}"),
        None => "te=none:-".into(),
    });
    if let Some((r, c)) = layer.token {
        parts.push(format!("token={r}x{c}"));
    }
    if let Some(c) = layer.channels {
        parts.push(format!("channels={c}"));
    }
    parts.join(" ")
}

/// Number of expansion steps along each axis.
pub fn expansion_steps(cfg: &NetworkConfig) -> (usize, usize) {
    cfg.layers.iter().filter_map(|l| l.te).fold((0, 0), |(v, h), te| match te.axis {
        Axis::Vertical => (v + 1, h),
        Axis::Horizontal => (v, h + 1),
    })
}
