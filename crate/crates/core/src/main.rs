use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use ffnet::analysis::count_flops;
use ffnet::graph::BackboneConfig;
use ffnet::segtool::{
    classmap_to_image, colorize, image_to_classmap, preprocess, ConfusionMatrix, Image,
    Normalization, Palette,
};
use ffnet::tensor::{argmax_channels, upsample};
use ffnet::{
    benchmark, build_model, fold_batchnorm, init_random, BenchOptions, Dims, Error,
    InferenceSession, ModelConfig, UpsampleMode, WeightStore,
};

#[derive(Parser)]
#[command(
    name = "ffnet",
    version,
    about = "FFNet segmentation networks: build, profile, benchmark, run"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in backbones.
    Registry,
    /// Per-node parameters, MACs, FLOPs, memory traffic and receptive field.
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward passes at batch size 1.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 30)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Fold batch norm into the preceding convolutions first.
        #[arg(long)]
        fold_bn: bool,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append per-iteration timings and a median row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write seeded He-normal weights for a model.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one PPM image.
    Segment {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Colorized prediction (PPM).
        #[arg(long)]
        out: PathBuf,
        /// Raw labels as a grayscale PGM.
        #[arg(long)]
        classmap: Option<PathBuf>,
        /// Warn instead of failing on weight entries the model does not use.
        #[arg(long)]
        permissive: bool,
        #[arg(long)]
        fold_bn: bool,
        /// Upsample logits to the image size before taking the argmax.
        #[arg(long)]
        full_res: bool,
        /// Per-channel mean, `r,g,b`, applied to pixels scaled to [0, 1].
        #[arg(long, value_parser = parse_triple)]
        mean: Option<[f32; 3]>,
        /// Per-channel std, `r,g,b`.
        #[arg(long, value_parser = parse_triple)]
        std: Option<[f32; 3]>,
    },
    /// mIoU of predicted label maps against ground truth (matching PGM names).
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, default_value_t = 19)]
        classes: usize,
        #[arg(long, default_value_t = 255)]
        ignore: u8,
        /// Write per-class IoU as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Model config file.
    #[arg(long, required_unless_present = "model")]
    config: Option<PathBuf>,
    /// Inline config, e.g. "backbone=resnet22s stem=C up=C seg=C".
    #[arg(long, conflicts_with = "config")]
    model: Option<String>,
    /// Input size `HxW`, overriding the config.
    #[arg(long, value_parser = parse_hw)]
    input: Option<(usize, usize)>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h
        .trim()
        .parse()
        .map_err(|_| format!("bad height in `{s}`"))?;
    let w = w
        .trim()
        .parse()
        .map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

fn parse_triple(s: &str) -> Result<[f32; 3], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<f32>()
                .map_err(|_| format!("bad number in `{s}`"))
        })
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected three comma-separated values, got `{s}`"))
}

impl ModelArgs {
    fn load(&self) -> ffnet::Result<ModelConfig> {
        let mut cfg = match (&self.config, &self.model) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                ModelConfig::parse(&text)?
            }
            (None, Some(text)) => ModelConfig::parse(text)?,
            (None, None) => unreachable!("clap requires one of --config/--model"),
        };
        if let Some((h, w)) = self.input {
            cfg = cfg.with_input(h, w);
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

/// `println!` that reports write failures instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(io::stdout(), $($arg)*).map_err(|e| io_err(Path::new("<stdout>"), e))?
    };
}

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn output(path: Option<&Path>) -> ffnet::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> ffnet::Result<()> {
    match cli.command {
        Command::Registry => {
            outln!(
                "{:<12} {:<10} {:<16} {:<22} strides",
                "name", "block", "blocks", "channels"
            );
            for b in BackboneConfig::registry() {
                outln!(
                    "{:<12} {:<10} {:<16} {:<22} {:?}",
                    b.name,
                    format!("{:?}", b.block_type).to_lowercase(),
                    format!("{:?}", b.num_blocks),
                    format!("{:?}", b.stage_channels),
                    b.stage_strides
                );
            }
            Ok(())
        }
        Command::Profile { model, format, out } => {
            let cfg = model.load()?;
            let graph = build_model(&cfg)?;
            let (h, w) = cfg.input_hw;
            let report = count_flops(&graph, Dims::new(1, 3, h, w))?;
            let mut sink = output(out.as_deref())?;
            let res = match format {
                Format::Csv => report.write_csv(&mut sink),
                Format::Text => sink.write_all(report.to_text().as_bytes()),
            };
            res.and_then(|_| sink.flush())
                .map_err(|e| io_err(out.as_deref().unwrap_or(Path::new("<stdout>")), e))
        }
        Command::Bench {
            model,
            iters,
            warmup,
            fold_bn,
            threads,
            seed,
            csv,
        } => {
            let cfg = model.load()?;
            let defaults = BenchOptions::default();
            let opts = BenchOptions {
                iters,
                warmup,
                fold_bn,
                threads: threads.unwrap_or(defaults.threads),
                seed,
            };
            let report = benchmark(&cfg, cfg.input_hw, &opts)?;
            outln!("{report}");
            if let Some(path) = csv {
                let header = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| io_err(&path, e))?;
                let mut w = BufWriter::new(file);
                report
                    .write_csv(&mut w, header)
                    .and_then(|_| w.flush())
                    .map_err(|e| io_err(&path, e))?;
            }
            Ok(())
        }
        Command::Init { model, seed, out } => {
            let cfg = model.load()?;
            let graph = build_model(&cfg)?;
            let store = init_random(&graph, seed);
            store.save(&out)?;
            outln!(
                "{}: {} entries, {} values -> {}",
                graph.name(),
                store.len(),
                store.num_elements(),
                out.display()
            );
            Ok(())
        }
        Command::Segment {
            model,
            weights,
            image,
            out,
            classmap,
            permissive,
            fold_bn,
            full_res,
            mean,
            std,
        } => {
            let img = Image::load(&image)?;
            let cfg = model.load()?.with_input(img.height(), img.width());
            let graph = build_model(&cfg)?;
            let store = WeightStore::load(&weights)?;
            for name in store.check_against(&graph, permissive)? {
                eprintln!("warning: unused weight entry `{name}`");
            }
            let (graph, store) = if fold_bn {
                fold_batchnorm(&graph, &store)?
            } else {
                (graph, store)
            };
            let norm = Normalization {
                mean: mean.unwrap_or(Normalization::IMAGENET.mean),
                std: std.unwrap_or(Normalization::IMAGENET.std),
            };
            let input = preprocess(&img, &norm)?;
            let mut session =
                InferenceSession::new(Arc::new(graph), Arc::new(store), input.dims())?;
            let mut logits = session.run(&input)?.logits;
            if full_res {
                let factor = img.height() / logits.dims().h;
                logits = upsample(&logits, factor, UpsampleMode::Bilinear)?;
            }
            let labels = argmax_channels(&logits)?;
            colorize(&labels, &Palette::cityscapes())?.save(&out)?;
            if let Some(path) = classmap {
                classmap_to_image(&labels)?.save(path)?;
            }
            outln!(
                "{} -> {} ({}x{})",
                image.display(),
                out.display(),
                labels.w,
                labels.h
            );
            Ok(())
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            classes,
            ignore,
            csv,
        } => eval(&pred_dir, &gt_dir, classes, ignore, csv.as_deref()),
    }
}

fn eval(
    pred_dir: &Path,
    gt_dir: &Path,
    classes: usize,
    ignore: u8,
    csv: Option<&Path>,
) -> ffnet::Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(pred_dir)
        .map_err(|e| io_err(pred_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .pgm files in {}",
            pred_dir.display()
        )));
    }
    let per_image: Vec<ConfusionMatrix> = names
        .par_iter()
        .map(|pred_path| {
            let gt_path = gt_dir.join(pred_path.file_name().expect("file path"));
            let pred = image_to_classmap(&Image::load(pred_path)?)?;
            let gt = image_to_classmap(&Image::load(&gt_path)?)?;
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&pred, &gt, ignore)?;
            Ok(cm)
        })
        .collect::<ffnet::Result<_>>()?;
    let mut total = ConfusionMatrix::new(classes);
    for cm in &per_image {
        total.merge(cm)?;
    }
    let palette = Palette::cityscapes();
    let label = |c: usize| {
        if classes == palette.len() {
            palette.names[c].clone()
        } else {
            c.to_string()
        }
    };
    let iou = total.iou();
    for (c, v) in iou.iter().enumerate() {
        match v {
            Some(v) => outln!("{:>3} {:<14} {:6.2}", c, label(c), 100.0 * v),
            None => outln!("{:>3} {:<14} {:>6}", c, label(c), "-"),
        }
    }
    match total.mean_iou() {
        Some(m) => outln!(
            "mIoU {:.2} over {} images ({} pixels)",
            100.0 * m,
            names.len(),
            total.total()
        ),
        None => outln!("mIoU undefined: no labelled pixels"),
    }
    if let Some(path) = csv {
        let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
        let write = |w: &mut BufWriter<File>| -> io::Result<()> {
            writeln!(w, "class,name,iou")?;
            for (c, v) in iou.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{}",
                    c,
                    label(c),
                    v.map(|v| v.to_string()).unwrap_or_default()
                )?;
            }
            writeln!(
                w,
                "mean,,{}",
                total.mean_iou().map(|v| v.to_string()).unwrap_or_default()
            )?;
            w.flush()
        };
        write(&mut w).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
