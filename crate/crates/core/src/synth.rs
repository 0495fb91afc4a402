//! Synthetic mock slides and dataset storage.
//!
//! A slide is a noisy raster tiled into small cells. A fixed fraction of the
//! cells carry the target motif; others may carry a distractor motif of a
//! different shape. The label is the quantized target density, so a model
//! needs both the local shape and the global count to get it right.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::{SurvivalRecord, Task};
use crate::serialization::ScanWindow;
use crate::tensor::{load_tensor, save_tensor, Rng, Tensor};

/// Side of one motif cell in pixels.
pub const CELL: usize = 4;

const TARGET: [[u8; 3]; 3] = [[0, 1, 0], [1, 1, 1], [0, 1, 0]];
const DISTRACTOR: [[u8; 3]; 3] = [[1, 0, 1], [0, 1, 0], [1, 0, 1]];
const MOTIF_RGB: [f64; 3] = [0.9, 0.15, 0.55];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub window: ScanWindow,
    /// Target density of the densest class, in `[0, 1]`.
    pub max_density: f64,
    pub distractor_density: f64,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
    pub classes: usize,
    pub bins: usize,
    pub censor_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            window: ScanWindow { h: 16, w: 16 },
            max_density: 0.6,
            distractor_density: 0.0,
            noise: 0.1,
            classes: 4,
            bins: 4,
            censor_rate: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("image dims must be positive".into()));
        }
        if !self.height.is_multiple_of(self.window.h) || !self.width.is_multiple_of(self.window.w) {
            return Err(Error::Invalid(format!(
                "image {}x{} is not tiled by window {}x{}",
                self.height, self.width, self.window.h, self.window.w
            )));
        }
        if self.height < CELL || self.width < CELL {
            return Err(Error::Invalid(format!("image must be at least {CELL}x{CELL}")));
        }
        for (name, v) in [
            ("max_density", self.max_density),
            ("distractor_density", self.distractor_density),
            ("censor_rate", self.censor_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.max_density + self.distractor_density > 1.0 {
            return Err(Error::Invalid("target and distractor densities exceed 1".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Invalid("noise must be non-negative".into()));
        }
        if self.classes == 0 || self.bins == 0 {
            return Err(Error::Invalid("classes and bins must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || err(format!("bad value '{v}' for {k}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let real = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "height" => spec.height = int()?,
                "width" => spec.width = int()?,
                "window" => {
                    let (h, w) = v.split_once('x').ok_or_else(bad)?;
                    spec.window = ScanWindow::new(
                        h.parse().map_err(|_| bad())?,
                        w.parse().map_err(|_| bad())?,
                    )?;
                }
                "max_density" => spec.max_density = real()?,
                "distractor_density" => spec.distractor_density = real()?,
                "noise" => spec.noise = real()?,
                "classes" => spec.classes = int()?,
                "bins" => spec.bins = int()?,
                "censor_rate" => spec.censor_rate = real()?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(err(format!("unknown key '{k}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        format!(
            "height = {}\nwidth = {}\nwindow = {}x{}\nmax_density = {:?}\ndistractor_density = {:?}\n\
             noise = {:?}\nclasses = {}\nbins = {}\ncensor_rate = {:?}\nseed = {}\n",
            self.height,
            self.width,
            self.window.h,
            self.window.w,
            self.max_density,
            self.distractor_density,
            self.noise,
            self.classes,
            self.bins,
            self.censor_rate,
            self.seed
        )
    }

    fn cells(&self) -> usize {
        (self.height / CELL) * (self.width / CELL)
    }

    /// Target density for a class under round-robin balancing.
    pub fn class_density(&self, class: usize) -> f64 {
        if self.classes < 2 {
            0.0
        } else {
            self.max_density * class as f64 / (self.classes - 1) as f64
        }
    }

    /// Renders one slide with the given motif densities.
    pub fn render(&self, density: f64, rng: &mut Rng) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data: Vec<f64> = (0..h * w * 3).map(|_| self.noise * rng.uniform()).collect();
        let cells_w = w / CELL;
        let mut slots: Vec<usize> = (0..self.cells()).collect();
        rng.shuffle(&mut slots);
        let n_target = (density * slots.len() as f64).round() as usize;
        let n_distractor = (self.distractor_density * slots.len() as f64).round() as usize;
        let n_distractor = n_distractor.min(slots.len() - n_target);
        for (i, &slot) in slots.iter().enumerate().take(n_target + n_distractor) {
            let motif = if i < n_target { &TARGET } else { &DISTRACTOR };
            let (cr, cc) = (slot / cells_w * CELL, slot % cells_w * CELL);
            let (dr, dc) = (rng.below(CELL - 2), rng.below(CELL - 2));
            for (mr, row) in motif.iter().enumerate() {
                for (mc, &on) in row.iter().enumerate() {
                    if on == 1 {
                        let base = ((cr + dr + mr) * w + cc + dc + mc) * 3;
                        data[base..base + 3].copy_from_slice(&MOTIF_RGB);
                    }
                }
            }
        }
        Tensor::from_parts(vec![h, w, 3], data)
    }
}

/// Ground truth attached to a slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    Survival(SurvivalRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| match s.target {
                Target::Class(c) => Some(c),
                Target::Survival(_) => None,
            })
            .collect()
    }

    pub fn records(&self) -> Option<Vec<SurvivalRecord>> {
        self.samples
            .iter()
            .map(|s| match s.target {
                Target::Survival(r) => Some(r),
                Target::Class(_) => None,
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Checks targets against the task.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        for s in &self.samples {
            match (self.task, s.target) {
                (Task::Classify { classes }, Target::Class(c)) if c < classes => {}
                (Task::Survive { bins }, Target::Survival(r)) if r.t >= 1 && r.t <= bins => {}
                _ => {
                    return Err(Error::Invalid(format!(
                        "slide {} target {:?} does not fit task {:?}",
                        s.id, s.target, self.task
                    )))
                }
            }
        }
        Ok(())
    }

    /// Writes `manifest.txt`, a target CSV and one tensor file per slide.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = match self.task {
            Task::Classify { classes } => format!("task = classify\nclasses = {classes}\n"),
            Task::Survive { bins } => format!("task = survive\nbins = {bins}\n"),
        };
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        let mut csv = String::new();
        match self.task {
            Task::Classify { .. } => csv.push_str("slide_id,label\n"),
            Task::Survive { .. } => csv.push_str("slide_id,time_bin,censor\n"),
        }
        for s in &self.samples {
            save_tensor(dir.join(format!("{}.pxmt", s.id)), &s.image)?;
            match s.target {
                Target::Class(c) => {
                    let _ = writeln!(csv, "{},{c}", s.id);
                }
                Target::Survival(r) => {
                    let _ = writeln!(csv, "{},{},{}", s.id, r.t, u8::from(r.censored));
                }
            }
        }
        let name = match self.task {
            Task::Classify { .. } => "labels.csv",
            Task::Survive { .. } => "records.csv",
        };
        std::fs::write(dir.join(name), csv)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut kind = None;
        let mut count = None;
        for (i, line) in manifest.lines().enumerate() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("bad manifest line '{line}'"),
            };
            match k.trim() {
                "task" => kind = Some(v.trim().to_string()),
                "classes" | "bins" => count = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let count = count.ok_or_else(|| Error::Format("manifest lacks classes/bins".into()))?;
        let (task, csv_name) = match kind.as_deref() {
            Some("classify") => (Task::Classify { classes: count }, "labels.csv"),
            Some("survive") => (Task::Survive { bins: count }, "records.csv"),
            other => return Err(Error::Format(format!("unknown task {other:?} in manifest"))),
        };
        let csv = std::fs::read_to_string(dir.join(csv_name))?;
        let mut samples = Vec::new();
        for (i, line) in csv.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("bad row '{line}' in {csv_name}"),
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let target = match (task, cols.as_slice()) {
                (Task::Classify { .. }, [_, label]) => Target::Class(label.parse().map_err(|_| bad())?),
                (Task::Survive { .. }, [_, t, c]) => {
                    let censored = match *c {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad()),
                    };
                    Target::Survival(SurvivalRecord::new(t.parse().map_err(|_| bad())?, censored))
                }
                _ => return Err(bad()),
            };
            let id = cols[0].to_string();
            let image = load_tensor(dir.join(format!("{id}.pxmt")))?;
            samples.push(Sample { id, image, target });
        }
        let ds = Dataset { task, samples };
        ds.validate()?;
        Ok(ds)
    }
}

/// Reads an image as `[H, W, 3]` in `[0, 1]`: a tensor file (`.pxmt`) is
/// taken as is, anything else is decoded as a portable pixmap.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "pxmt") {
        let t = load_tensor(path)?;
        if t.rank() != 3 {
            return Err(Error::Invalid(format!("image tensor must be [H, W, C], got {:?}", t.shape())));
        }
        return Ok(t);
    }
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Writes an `[H, W, 3]` tensor as an 8-bit binary PPM, clamping to `[0, 1]`.
pub fn save_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::Invalid(format!("PPM needs [H, W, 3], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[0] as u32, img.shape()[1] as u32);
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w, h, bytes).expect("buffer matches dims");
    buf.save_with_format(path, image::ImageFormat::Pnm)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Deterministic dataset of `n` slides for `task`.
///
/// Classification labels go round-robin over the classes. For survival each
/// slide draws a density uniformly; denser slides fall into earlier time bins.
pub fn synth_dataset(spec: &SynthSpec, n: usize, task: Task) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Invalid("need at least one slide".into()));
    }
    let root = Rng::new(spec.seed);
    let samples = (0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let id = format!("slide_{i:04}");
            match task {
                Task::Classify { classes } => {
                    let label = i % classes;
                    let spec = SynthSpec { classes, ..spec.clone() };
                    let image = spec.render(spec.class_density(label), &mut rng);
                    Sample {
                        id,
                        image,
                        target: Target::Class(label),
                    }
                }
                Task::Survive { bins } => {
                    let u = rng.uniform();
                    let t = (1 + ((1.0 - u) * bins as f64).floor() as usize).min(bins);
                    let censored = rng.bernoulli(spec.censor_rate);
                    let image = spec.render(u * spec.max_density, &mut rng);
                    Sample {
                        id,
                        image,
                        target: Target::Survival(SurvivalRecord::new(t, censored)),
                    }
                }
            }
        })
        .collect();
    Ok(Dataset { task, samples })
}

/// `k` folds of sample indices. With labels, each class is dealt across the
/// folds in turn so class proportions stay balanced.
pub fn kfold(n: usize, k: usize, seed: u64, labels: Option<&[usize]>) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("cannot split {n} samples into {k} folds")));
    }
    let mut rng = Rng::new(seed);
    let mut groups: Vec<Vec<usize>> = match labels {
        Some(l) => {
            let classes = l.iter().max().map_or(0, |&m| m + 1);
            let mut g = vec![Vec::new(); classes];
            for (i, &c) in l.iter().enumerate() {
                g[c].push(i);
            }
            g
        }
        None => vec![(0..n).collect()],
    };
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for g in groups.iter_mut() {
        rng.shuffle(g);
        for &i in g.iter() {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}
