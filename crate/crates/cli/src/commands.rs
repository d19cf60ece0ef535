use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rmgl_core::augment::{apply_shift, sample_shift, Image, ShiftSample};
use rmgl_core::data::{Dataset, Split};
use rmgl_core::eval::{embeddings_to_csv, evaluate, extract_embeddings, write_report, Protocol};
use rmgl_core::experiment::{Ablation, ExperimentConfig};
use rmgl_core::model::{train, FeaturePath, Model};
use rmgl_core::partition::{abp_boundaries, max_activation_histogram, stripe_average_pool, StripeBoundaries};
use rmgl_core::receptive::{partition_grid, ArchSpec};
use rmgl_core::rng::stream;
use rmgl_core::tensor::{kernel_suite, Mode, Shape, Tensor};
use rmgl_core::{checkpoint, Error};

/// Failure reported as `error[class]: message`.
pub struct Failure {
    pub class: &'static str,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            class: e.class(),
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn write(path: &Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn mkdir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

#[derive(Parser)]
#[command(name = "rmgl", version, about = "Receptive multi-granularity stripe features: analysis, training and evaluation")]
pub struct Cli {
    /// Experiment configuration (TOML); the bundled toy configuration when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Receptive-field table and partition feasibility grid of a backbone.
    Analyze(AnalyzeArgs),
    /// Train a model and write checkpoint, log and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a query/gallery split.
    Eval(EvalArgs),
    /// Write randomly shifted copies of an image with their transforms.
    AugmentPreview(PreviewArgs),
    /// Compare balanced and uniform stripe boundaries on a feature map.
    AbpDemo(AbpArgs),
    /// Finite-difference check of every kernel and loss.
    Gradcheck(GradArgs),
    /// Channel-summed final-map responses per branch, path and stripe.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// `toy`, `resnet50-last-stride1` or a path to an `.arch` file.
    #[arg(default_value = "resnet50-last-stride1")]
    arch: String,
    /// Stripe counts for the feasibility grid.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6")]
    stripes: Vec<usize>,
    /// Print the partition plan at this map (layer name or index).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Ablation rows to run (comma-separated, or `all`); each row trains in
    /// its own subdirectory.
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Query,
    Gallery,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Query => Split::Query,
            SplitArg::Gallery => Split::Gallery,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    CrossCamera,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; the configured dataset when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cross-camera")]
    protocol: ProtocolArg,
    #[arg(long, value_enum, default_value = "query")]
    query_split: SplitArg,
    #[arg(long, value_enum, default_value = "gallery")]
    gallery_split: SplitArg,
    /// Use plain features instead of the image/mirror mean.
    #[arg(long)]
    no_flip: bool,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Source image; the first configured dataset image when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value = "png")]
    format: String,
}

#[derive(Args)]
struct AbpArgs {
    #[arg(long, default_value_t = 3)]
    stripes: usize,
    #[arg(long, default_value_t = 24)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Use the original-path final map of this checkpoint instead of a random map.
    #[arg(long, requires = "image")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    branch: usize,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

pub fn run(cli: Cli) -> CliResult {
    let ctx = Context {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::AugmentPreview(a) => preview(&ctx, a),
        Command::AbpDemo(a) => abp_demo(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::Heatmap(a) => heatmap(&ctx, a),
    }
}

struct Context {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Context {
    fn experiment(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::toy(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }

    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn load_arch(name: &str) -> CliResult<ArchSpec> {
    Ok(match name {
        "toy" => ArchSpec::toy_backbone(),
        "resnet50-last-stride1" => ArchSpec::resnet50_last_stride1(),
        path => ArchSpec::from_file(Path::new(path))?,
    })
}

fn analyze(ctx: &Context, a: AnalyzeArgs) -> CliResult {
    let arch = load_arch(&a.arch)?;
    let report = arch.analyze()?;
    let out = ctx.out("analysis");
    write(&out.join("receptive_fields.csv"), &report.to_csv())?;
    write(&out.join("partition_grid.csv"), &partition_grid(&arch, &a.stripes)?)?;
    print!("{}", report.to_table());
    let last = report.final_row();
    println!("final map {}: receptive field {}x{}, stride {}x{}", last.name, last.rf.h, last.rf.w, last.stride.h, last.stride.w);
    if let Some(split) = a.split {
        let j = match split.parse::<usize>() {
            Ok(j) => j,
            Err(_) => arch.map_index(&split).ok_or_else(|| Failure {
                class: "config",
                message: format!("unknown layer {split}"),
            })?,
        };
        for &k in &a.stripes {
            match arch.restricted_region(j, k) {
                Ok(p) => println!(
                    "split {j}, {k} stripes: stripe height {}, restricted region {}, subsequent rf {}, effective {}",
                    p.stripe_height, p.restricted, p.subsequent_rf, p.effective
                ),
                Err(e) => println!("split {j}, {k} stripes: {e}"),
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(ctx: &Context, a: TrainArgs) -> CliResult {
    let mut base = ctx.experiment()?;
    if let Some(e) = a.epochs {
        base.schedule.epochs = e;
    }
    let rows: Vec<Option<Ablation>> = if a.ablation.is_empty() {
        vec![None]
    } else if a.ablation.iter().any(|s| s == "all") {
        Ablation::ALL.into_iter().map(Some).collect()
    } else {
        a.ablation
            .iter()
            .map(|s| {
                Ablation::parse(s).map(Some).ok_or_else(|| Failure {
                    class: "config",
                    message: format!("unknown ablation row {s}"),
                })
            })
            .collect::<CliResult<_>>()?
    };
    // Every configuration is checked before any training starts.
    let configs: Vec<(Option<Ablation>, ExperimentConfig)> = rows
        .into_iter()
        .map(|r| {
            let mut cfg = match r {
                Some(ab) => base.clone().with_ablation(ab),
                None => base.clone(),
            };
            if let Some(ab) = r {
                cfg.out = base.out.join(ab.name());
            }
            cfg.validate().map(|()| (r, cfg)).map_err(Failure::from)
        })
        .collect::<CliResult<_>>()?;
    let data = base.dataset()?;
    let mut summary = String::from("row,rank1,map\n");
    for (row, cfg) in configs {
        let (model, metrics) = train_one(&cfg, &data)?;
        let name = row.map_or("run", Ablation::name);
        let _ = writeln!(summary, "{name},{},{}", metrics.0, metrics.1);
        eprintln!(
            "{name}: rank1 {:.4} mAP {:.4} ({} parameters) -> {}",
            metrics.0,
            metrics.1,
            model.num_params(),
            cfg.out.display()
        );
    }
    if !a.ablation.is_empty() {
        write(&base.out.join("ablation.csv"), &summary)?;
        print!("{summary}");
    }
    Ok(())
}

fn train_one(cfg: &ExperimentConfig, data: &Dataset) -> CliResult<(Model, (f64, f64))> {
    mkdir(&cfg.out)?;
    write(&cfg.out.join("effective_config.toml"), &cfg.to_toml())?;
    let (model, log) = train(&cfg.model, &cfg.schedule, &cfg.augment, data, cfg.seed, |row| {
        let metric = row.rank1.map(|r| format!(" rank1 {r:.4}")).unwrap_or_default();
        eprintln!("epoch {:>3} lr {:.2e} loss {:.5}{metric}", row.epoch, row.lr, row.total_loss);
    })?;
    write(&cfg.out.join("train_log.csv"), &log.to_csv())?;
    checkpoint::save(&model, &cfg.out.join("checkpoint"))?;
    let metrics = if data.indices(Split::Query).is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let result = rmgl_core::eval::evaluate_dataset(&model, data, true, Protocol::CrossCamera)?;
        write_report(&result, &cfg.out.join("metrics.json"))?;
        (result.cmc_at(1), result.map)
    };
    Ok((model, metrics))
}

fn cmd_eval(ctx: &Context, a: EvalArgs) -> CliResult {
    let model = checkpoint::load(&a.checkpoint)?;
    let data = match &a.manifest {
        Some(m) => Dataset::load(m)?,
        None => ctx.experiment()?.dataset()?,
    };
    let protocol = match a.protocol {
        ProtocolArg::CrossCamera => Protocol::CrossCamera,
        ProtocolArg::All => Protocol::All,
    };
    let flip_mean = !a.no_flip;
    let q = extract_embeddings(&model, &data, &data.indices(a.query_split.into()), flip_mean)?;
    let g = extract_embeddings(&model, &data, &data.indices(a.gallery_split.into()), flip_mean)?;
    let result = evaluate(&q, &g, protocol)?;
    let out = ctx.out("eval");
    mkdir(&out)?;
    write_report(&result, &out.join("metrics.json"))?;
    write(&out.join("query_embeddings.csv"), &embeddings_to_csv(&q))?;
    write(&out.join("gallery_embeddings.csv"), &embeddings_to_csv(&g))?;
    println!("{}", serde_json::to_string_pretty(&result.report_json()).expect("json"));
    Ok(())
}

fn preview(ctx: &Context, a: PreviewArgs) -> CliResult {
    let cfg = ctx.experiment()?;
    if !matches!(a.format.as_str(), "png" | "ppm") {
        return Err(Failure {
            class: "config",
            message: format!("unsupported image format {}", a.format),
        });
    }
    let img = match &a.image {
        Some(p) => Image::load(p)?,
        None => cfg.dataset()?.images[0].clone(),
    };
    let params = &cfg.augment.rsa_params;
    let fill = params.fill_for(img.range());
    let out = ctx.out("augment_preview");
    mkdir(&out)?;
    img.save(&out.join(format!("original.{}", a.format)))?;
    let mut csv = format!("{}\n", ShiftSample::CSV_HEADER);
    for i in 0..a.count {
        let mut rng = stream(cfg.seed, i as u64);
        let s = sample_shift(params, img.height(), img.width(), &mut rng)?;
        for w in &s.warnings {
            eprintln!("warning: sample {i}: {w}");
        }
        let shifted = match s.transform {
            Some(t) => apply_shift(&img, &t, fill)?,
            None => img.clone(),
        };
        shifted.save(&out.join(format!("shift_{i:04}.{}", a.format)))?;
        let _ = writeln!(csv, "{}", s.csv_row(i));
    }
    write(&out.join("transforms.csv"), &csv)?;
    println!("wrote {} samples to {}", a.count, out.display());
    Ok(())
}

fn abp_demo(ctx: &Context, a: AbpArgs) -> CliResult {
    let fmap = match (&a.checkpoint, &a.image) {
        (Some(ck), Some(img)) => {
            let model = checkpoint::load(ck)?;
            let x = Image::load(img)?.to_tensor();
            let maps = model.final_maps(&x, Mode::Eval)?;
            maps.into_iter()
                .find(|(b, p, _)| *b == a.branch && *p == FeaturePath::Original)
                .map(|(_, _, m)| m)
                .ok_or_else(|| Failure {
                    class: "config",
                    message: format!("checkpoint has no original path for branch {}", a.branch),
                })?
        }
        _ => skewed_map(a.channels, a.height, a.width, ctx.seed()),
    };
    let hist = max_activation_histogram(&fmap)?;
    let h = fmap.shape().h;
    let balanced = abp_boundaries(&hist, a.stripes)?;
    let uniform = StripeBoundaries::uniform(h, a.stripes).ok();
    let out = ctx.out("abp_demo");
    write(&out.join("histogram.csv"), &hist.to_csv())?;
    let mut csv = String::from("method,stripe,start,end,max_activations\n");
    let counts = |b: &StripeBoundaries| -> Vec<usize> {
        (0..b.stripes()).map(|k| hist.at(b.stripe(k).end) - hist.at(b.stripe(k).start)).collect()
    };
    let mut methods = vec![("abp", balanced.clone())];
    if let Some(u) = uniform {
        methods.push(("uniform", u));
    }
    for (name, b) in &methods {
        for (k, c) in counts(b).iter().enumerate() {
            let r = b.stripe(k);
            let _ = writeln!(csv, "{name},{k},{},{},{c}", r.start, r.end);
        }
        println!("{name:>8}: cuts {:?} counts {:?}", b.cuts(), counts(b));
    }
    write(&out.join("boundaries.csv"), &csv)?;
    let pooled = stripe_average_pool(&fmap, &balanced)?;
    let mut feats = String::from("stripe,values\n");
    for (k, v) in pooled.iter().enumerate() {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(feats, "{k},{}", vals.join(","));
    }
    write(&out.join("stripe_features.csv"), &feats)?;
    println!("{}", balanced.render());
    Ok(())
}

/// Random non-negative map whose channel maxima crowd near a random row.
fn skewed_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = stream(seed, 0);
    let centre = rng.random_range(0.0..h as f64);
    let mut t = Tensor::uniform(Shape::new(1, c, h, w), 0.0, 1.0, &mut rng);
    for ch in 0..c {
        for y in 0..h {
            let boost = (-((y as f64 - centre) / (h as f64 / 6.0)).powi(2)).exp();
            for x in 0..w {
                let i = t.index(0, ch, y, x);
                t.data_mut()[i] += boost;
            }
        }
    }
    t
}

fn gradcheck(ctx: &Context, a: GradArgs) -> CliResult {
    let entries = kernel_suite(ctx.seed(), a.tolerance)?;
    let mut csv = String::from("op,wrt,probes,flagged,max_rel_error,max_abs_error,passed\n");
    let mut failed = Vec::new();
    for e in &entries {
        let r = &e.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{:e},{:e},{}",
            e.op,
            e.wrt,
            r.probes,
            r.flagged.len(),
            r.max_rel_error,
            r.max_abs_error,
            r.passed
        );
        println!(
            "{:<20} {:<7} max rel error {:.3e} ({} probes, {} kinks skipped) {}",
            e.op,
            e.wrt,
            r.max_rel_error,
            r.probes,
            r.flagged.len(),
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(format!("{}:{}", e.op, e.wrt));
        }
    }
    write(&ctx.out("gradcheck").join("gradcheck.csv"), &csv)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            class: "gradient-check",
            message: format!("relative error above {} for {}", a.tolerance, failed.join(", ")),
        })
    }
}

fn heatmap(ctx: &Context, a: HeatmapArgs) -> CliResult {
    let model = checkpoint::load(&a.checkpoint)?;
    let x = Image::load(&a.image)?.to_tensor();
    let maps = model.final_maps(&x, Mode::Eval)?;
    let responses = model.response_maps(&x)?;
    let out = ctx.out("heatmap");
    mkdir(&out)?;
    let mut written = 0;
    for ((b, path, map), (_, _, resp)) in maps.iter().zip(&responses) {
        let s = resp.shape();
        let mut grid = vec![0.0; s.h * s.w];
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    grid[y * s.w + xx] += resp.at(0, c, y, xx);
                }
            }
        }
        let (bounds, _) = model.stripe_bounds(*b, *path, map, Mode::Eval)?;
        let bounds = &bounds[0];
        let whole = 0..s.h;
        for stripe in 0..=bounds.stripes() {
            let rows = if stripe == 0 { whole.clone() } else { bounds.stripe(stripe - 1) };
            let mut csv = String::new();
            for y in rows {
                let vals: Vec<String> = grid[y * s.w..(y + 1) * s.w].iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(csv, "{}", vals.join(","));
            }
            write(&out.join(format!("heatmap_b{b}_{}_s{stripe}.csv", path.as_str())), &csv)?;
            written += 1;
        }
    }
    println!("wrote {written} response grids to {}", out.display());
    Ok(())
}
