use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pixel_mamba::config::NetworkConfig;
use pixel_mamba::metrics::{km_csv, km_curve, km_svg, logrank};
use pixel_mamba::network::{output_shape, shape_trace, Model};
use pixel_mamba::serialization::{coords_of, serialize, ScanWindow, TokenCoord};
use pixel_mamba::synth::{load_image, save_ppm, synth_dataset, Dataset, SynthSpec};
use pixel_mamba::train::{evaluate, loss_curve_csv, train_with, Checkpoint, TrainConfig};
use pixel_mamba::{Error, Parallelism, Rng, Task, Tensor};

#[derive(Parser)]
#[command(name = "pixel-mamba", version, about = "Pixel-level state-space models for gigapixel images")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run slides one after another instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classify,
    Survive,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory.
    Train {
        /// Bundled config name or path to a config file.
        #[arg(long, default_value = "tiny-8")]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 4e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        weight_decay: f64,
        /// Slides per optimizer update.
        #[arg(long, default_value_t = 8)]
        accum: usize,
        /// Keep the learning rate constant.
        #[arg(long)]
        no_cosine: bool,
        /// Global gradient-norm cap; 0 disables it.
        #[arg(long, default_value_t = 1.0)]
        clip: f64,
        /// Stop once the epoch loss drops below this value.
        #[arg(long)]
        target_loss: Option<f64>,
        #[arg(long, default_value = "model.pxmk")]
        out: PathBuf,
        #[arg(long, default_value = "loss.csv")]
        curve: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Prefix for Kaplan-Meier CSV and SVG files (survival only).
        #[arg(long)]
        km: Option<PathBuf>,
    },
    /// Serialize an image into its token sequence and list token coordinates.
    Serialize {
        #[arg(long)]
        image: PathBuf,
        /// Window side in pixels.
        #[arg(long)]
        window: usize,
        /// Window width if it differs from the height.
        #[arg(long)]
        window_w: Option<usize>,
        /// Write `index,kind,region,row,col` rows here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-layer shape and fusion schedule of a config.
    Inspect {
        #[arg(long, default_value = "pixelmamba-6m")]
        config: String,
        /// Image size as HxW.
        #[arg(long)]
        dims: String,
        /// Override the config's window side.
        #[arg(long)]
        window: Option<usize>,
        /// Run a randomly initialized model on this image and log what it did.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Write the realized fusion trace here (needs --image).
        #[arg(long)]
        fusion_csv: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// Generator spec file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, value_enum, default_value = "classify")]
        task: TaskArg,
        /// Also write each slide as a PPM preview.
        #[arg(long)]
        preview: bool,
    },
    /// Kaplan-Meier curves and log-rank test for a median risk split.
    Km {
        /// CSV with `slide_id,risk`.
        #[arg(long)]
        risks: PathBuf,
        /// CSV with `slide_id,time_bin,censor`.
        #[arg(long)]
        records: PathBuf,
        /// Output path; `.svg` gives a plot, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parallelism(cli: &Cli) -> Parallelism {
    if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once('x').ok_or_else(|| invalid(format!("dims '{s}' is not HxW")))?;
    let h = h.parse().map_err(|_| invalid(format!("bad height in '{s}'")))?;
    let w = w.parse().map_err(|_| invalid(format!("bad width in '{s}'")))?;
    Ok((h, w))
}

fn invalid(msg: String) -> anyhow::Error {
    Error::Invalid(msg).into()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(dir: &Path, task: Option<TaskArg>) -> Result<Dataset> {
    let data = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    match (task, data.task) {
        (None, _) | (Some(TaskArg::Classify), Task::Classify { .. }) | (Some(TaskArg::Survive), Task::Survive { .. }) => {
            Ok(data)
        }
        _ => Err(invalid(format!("dataset {} holds {} data", dir.display(), data.task.name()))),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let par = parallelism(cli);
    match &cli.command {
        Command::Train {
            config,
            data,
            task,
            epochs,
            lr,
            weight_decay,
            accum,
            no_cosine,
            clip,
            target_loss,
            out,
            curve,
        } => {
            let cfg = NetworkConfig::load(config)?;
            let data = load_dataset(data, Some(*task))?;
            let tc = TrainConfig {
                epochs: *epochs,
                lr: *lr,
                weight_decay: *weight_decay,
                accum: *accum,
                cosine: !no_cosine,
                clip: (*clip > 0.0).then_some(*clip),
                shuffle: true,
                seed: cli.seed,
                parallelism: par,
            };
            let init = Checkpoint::init(cfg, data.task, cli.seed)?;
            println!(
                "training {} ({} parameters) on {} slides, {} updates planned",
                init.config.variant,
                init.param_count(),
                data.len(),
                tc.updates(data.len())
            );
            let run = train_with(init, &data, &tc, |e, _| {
                println!("epoch {:>4}  loss {:.6}  lr {:.3e}", e.epoch, e.loss, e.lr);
                match target_loss {
                    Some(t) if e.loss < *t => ControlFlow::Break(()),
                    _ => ControlFlow::Continue(()),
                }
            });
            if let Err(Error::Diverged { dump, .. }) = &run {
                let path = out.with_extension("diverged.txt");
                write_file(&path, dump)?;
                eprintln!("diagnostics written to {}", path.display());
            }
            let outcome = run?;
            outcome.checkpoint.save(out)?;
            write_file(curve, &loss_curve_csv(&outcome.curve))?;
            println!(
                "{} updates; checkpoint {}; loss curve {}",
                outcome.updates,
                out.display(),
                curve.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            folds,
            report,
            km,
        } => {
            let ckpt = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let data = load_dataset(data, None)?;
            let rep = evaluate(&ckpt, &data, *folds, cli.seed, par)?;
            println!("{} {:.6}", rep.metric_name(), rep.overall);
            if let Some(a) = rep.accuracy {
                println!("accuracy {a:.6}");
            }
            for f in &rep.folds {
                match f.value {
                    Some(v) => println!("fold {} (n={}) {:.6}", f.fold + 1, f.size, v),
                    None => println!("fold {} (n={}) undefined", f.fold + 1, f.size),
                }
            }
            if let Some(sp) = &rep.split {
                println!("log-rank chi2 {:.6} p {:.6e}", sp.test.chi2, sp.test.p);
                if let Some(prefix) = km {
                    let base = prefix.display().to_string();
                    let mut csv = String::from("group,");
                    let high = km_csv(&sp.high);
                    let low = km_csv(&sp.low);
                    csv.push_str(high.lines().next().unwrap_or_default());
                    csv.push('\n');
                    for (g, body) in [("high", &high), ("low", &low)] {
                        for line in body.lines().skip(1) {
                            let _ = writeln!(csv, "{g},{line}");
                        }
                    }
                    write_file(Path::new(&format!("{base}.csv")), &csv)?;
                    let svg = km_svg(&[("high risk", &sp.high), ("low risk", &sp.low)]);
                    write_file(Path::new(&format!("{base}.svg")), &svg)?;
                }
            }
            if let Some(path) = report {
                write_file(path, &rep.to_csv())?;
            }
        }
        Command::Serialize {
            image,
            window,
            window_w,
            out,
        } => {
            let img = load_image(image)?;
            let win = ScanWindow::new(*window, window_w.unwrap_or(*window))?;
            let cls = Tensor::zeros(&[img.shape()[2]]);
            let seq = serialize(&img, win, &cls)?;
            let (h, w) = (img.shape()[0], img.shape()[1]);
            println!(
                "image {h}x{w}, window {}x{}: {} regions, {} tokens",
                win.h,
                win.w,
                seq.regions.len(),
                seq.len()
            );
            if let Some(path) = out {
                let mut csv = String::from("index,kind,region,row,col\n");
                let mut region = 0;
                for i in 0..seq.len() {
                    match coords_of(&seq, i)? {
                        TokenCoord::Pixel { row, col } => {
                            let _ = writeln!(csv, "{i},pixel,{region},{row},{col}");
                        }
                        TokenCoord::Cls { region: r } => {
                            region = r;
                            let _ = writeln!(csv, "{i},cls,{r},,");
                        }
                    }
                }
                write_file(path, &csv)?;
            }
        }
        Command::Inspect {
            config,
            dims,
            window,
            image,
            fusion_csv,
        } => {
            let mut cfg = NetworkConfig::load(config)?;
            if let Some(side) = window {
                cfg.window = ScanWindow::square(*side)?;
                cfg.validate()?;
            }
            let (h, w) = parse_dims(dims)?;
            let trace = shape_trace(&cfg, h, w)?;
            println!(
                "{} window {}x{} image {h}x{w}",
                cfg.variant, cfg.window.h, cfg.window.w
            );
            println!("layer  regions  merged  grid     tokens/region  channels  rf       seq_in  seq_out");
            for t in &trace {
                println!(
                    "{:>5}  {:>7}  {:>6}  {:<7}  {:>13}  {:>8}  {:<7}  {:>6}  {:>7}",
                    t.layer,
                    t.n_before,
                    t.k,
                    format!("{}x{}", t.grid.0, t.grid.1),
                    t.grid.0 * t.grid.1 + 1,
                    t.channels,
                    format!("{}x{}", t.rf.0, t.rf.1),
                    t.tokens_in,
                    t.tokens_out
                );
            }
            let ((gh, gw), c) = output_shape(&cfg)?;
            let last = trace.last().expect("config has layers");
            println!(
                "output: {} regions of {gh}x{gw} tokens + CLS, {c} channels",
                last.n_before - last.k
            );
            if let Some(path) = image {
                let img = load_image(path)?;
                if (img.shape()[0], img.shape()[1]) != (h, w) {
                    return Err(invalid(format!(
                        "image is {}x{}, --dims says {h}x{w}",
                        img.shape()[0],
                        img.shape()[1]
                    )));
                }
                let model = Model::build(cfg.clone(), &mut Rng::new(cli.seed))?;
                let emb = model.forward(&img)?;
                println!("forward: embedding of {} values from {} regions", emb.vector.len(), emb.regions);
                let m0 = emb.layers.first().map_or(0, |l| l.tokens_in);
                println!("layer  seq_in  peak  seq_out");
                for l in &emb.layers {
                    println!("{:>5}  {:>6}  {:>4}  {:>7}", l.layer, l.tokens_in, l.peak_tokens, l.tokens_out);
                }
                let peak = emb.layers.iter().map(|l| l.peak_tokens).max().unwrap_or(0);
                println!("peak live tokens {peak} (initial sequence {m0})");
                if emb.layers != trace {
                    return Err(Error::Invalid("realized shapes differ from the closed-form trace".into()).into());
                }
                if let Some(csv) = fusion_csv {
                    write_file(csv, &emb.fusion.to_csv())?;
                }
            } else if fusion_csv.is_some() {
                return Err(invalid("--fusion-csv needs --image".into()));
            }
        }
        Command::Synth {
            spec,
            out,
            n,
            task,
            preview,
        } => {
            let mut spec = match spec {
                Some(p) => SynthSpec::parse(
                    &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => SynthSpec::default(),
            };
            spec.seed = cli.seed;
            let task = match task {
                TaskArg::Classify => Task::Classify { classes: spec.classes },
                TaskArg::Survive => Task::Survive { bins: spec.bins },
            };
            let data = synth_dataset(&spec, *n, task)?;
            data.save(out)?;
            if *preview {
                for s in &data.samples {
                    save_ppm(out.join(format!("{}.ppm", s.id)), &s.image)?;
                }
            }
            println!("wrote {} {} slides to {}", data.len(), task.name(), out.display());
        }
        Command::Km { risks, records, out } => {
            let risk_rows = read_csv(risks)?;
            let record_rows = read_csv(records)?;
            let mut risk_of = std::collections::HashMap::new();
            for row in &risk_rows {
                let [id, r] = row.as_slice() else {
                    return Err(invalid(format!("{}: expected slide_id,risk", risks.display())));
                };
                let r: f64 = r.parse().map_err(|_| invalid(format!("bad risk '{r}'")))?;
                risk_of.insert(id.clone(), r);
            }
            let mut rows = Vec::new();
            for row in &record_rows {
                let [id, t, c] = row.as_slice() else {
                    return Err(invalid(format!("{}: expected slide_id,time_bin,censor", records.display())));
                };
                let risk = *risk_of.get(id).ok_or_else(|| invalid(format!("no risk for slide {id}")))?;
                let t: f64 = t.parse().map_err(|_| invalid(format!("bad time '{t}'")))?;
                let event = match c.as_str() {
                    "0" => true,
                    "1" => false,
                    _ => return Err(invalid(format!("bad censor flag '{c}'"))),
                };
                rows.push((risk, t, event));
            }
            if rows.len() < 2 {
                return Err(invalid("need at least two slides".into()));
            }
            rows.sort_by(|a, b| b.0.total_cmp(&a.0));
            let (hi, lo) = rows.split_at(rows.len() / 2);
            let cols = |g: &[(f64, f64, bool)]| -> (Vec<f64>, Vec<bool>) { g.iter().map(|r| (r.1, r.2)).unzip() };
            let (ht, he) = cols(hi);
            let (lt, le) = cols(lo);
            let high = km_curve(&ht, &he)?;
            let low = km_curve(&lt, &le)?;
            let test = logrank(&ht, &he, &lt, &le)?;
            println!("log-rank chi2 {:.6} p {:.6e}", test.chi2, test.p);
            if out.extension().is_some_and(|e| e == "svg") {
                write_file(out, &km_svg(&[("high risk", &high), ("low risk", &low)]))?;
            } else {
                let mut csv = String::from("group,t,S_hat,n_at_risk\n");
                for (g, pts) in [("high", &high), ("low", &low)] {
                    for p in pts.iter() {
                        let _ = writeln!(csv, "{g},{},{},{}", p.t, p.survival, p.at_risk);
                    }
                }
                write_file(out, &csv)?;
            }
        }
    }
    Ok(())
}

/// Rows of a headed CSV, header dropped.
fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|f| f.trim().to_string()).collect())
        .collect())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numeric() => 3,
        Some(Error::Io(_)) => 1,
        Some(_) => 2,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
