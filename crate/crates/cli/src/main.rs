//! `salibi`: dataset generation, training, gradient checks, bias dumps and probes.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scale_alibi::attention::Modality;
use scale_alibi::bias::{cross_bias, self_bias, write_csv, PatchGrid, SlopeSchedule};
use scale_alibi::data::{generate, write_dataset, AlignedTriplet, Dataset, DatasetInfo};
use scale_alibi::gradcheck::{gradcheck_model, GradcheckOptions};
use scale_alibi::losses::{contrastive_loss, contrastive_loss_literal, ContrastiveBatch};
use scale_alibi::model::{load_checkpoint, save_checkpoint, ModelConfig, ProbeEncoder, Trainer};
use scale_alibi::probe::{kmeans_probe, knn_probe, mlp_probe, MlpProbeConfig, KNN_K, MLP_HIDDEN};
use scale_alibi::tensor::Graph;
use scale_alibi::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "salibi",
    version,
    about = "Scale-aware ALiBi multimodal pretraining toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic aligned-triplet dataset.
    GenData(GenDataArgs),
    /// Train from a config on a dataset, writing metrics and a checkpoint.
    Train(TrainArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write self or cross bias matrices as CSV.
    BiasDump(BiasDumpArgs),
    /// Evaluate frozen encoder features with a probe.
    Probe(ProbeArgs),
    /// Check a dataset directory end to end.
    VerifyDataset(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    classes: u32,
    /// Low-res side length in pixels; high-res is twice this.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Subset tag recorded in the manifest.
    #[arg(long)]
    subset: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config JSON file, or a preset name (desk, micro, full).
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    data: PathBuf,
    /// Steps to run in this invocation.
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines metrics file; appended to when resuming.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "micro")]
    config: String,
    /// Flip one analytic gradient sign; the check must then fail.
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Args)]
struct BiasDumpArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    patch: usize,
    #[arg(long)]
    gsd: f64,
    #[arg(long, requires_all = ["key_cols", "key_gsd"])]
    key_rows: Option<usize>,
    #[arg(long, requires = "key_rows")]
    key_cols: Option<usize>,
    #[arg(long, requires = "key_rows")]
    key_gsd: Option<f64>,
    /// Key patch size; defaults to --patch.
    #[arg(long, requires = "key_rows")]
    key_patch: Option<usize>,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Knn,
    Kmeans,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderChoice {
    Lores,
    Hires,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Probe training data; also the evaluation set when --test-data is absent.
    #[arg(long)]
    data: PathBuf,
    /// Held-out evaluation set. Without it, every fourth sample of each class in --data is held out.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, value_enum, default_value = "lores")]
    encoder: EncoderChoice,
    #[arg(long, default_value_t = KNN_K)]
    k: usize,
    /// k-means cluster count; defaults to the number of classes.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = MLP_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report the alignment objective evaluated exactly as printed
    /// (no logarithm, squared pair-count normalizer) next to the trained form.
    #[arg(long)]
    paper_literal_infonce: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    data: PathBuf,
    /// Expected SHA-256 of samples.bin, hex.
    #[arg(long)]
    expect_sha256: Option<String>,
}

/// A failed check whose cause is not an error in the inputs.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return EXIT_VERIFY;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } | Error::Format { .. } => EXIT_IO,
                Error::NonFinite { .. } => EXIT_VERIFY,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::BiasDump(a) => bias_dump(a),
        Command::Probe(a) => probe(a),
        Command::VerifyDataset(a) => verify_dataset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn announce(value: serde_json::Value) {
    println!("resolved: {value}");
}

fn resolve_config(spec: &str) -> anyhow::Result<ModelConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return Ok(ModelConfig::load(path)?);
    }
    ModelConfig::preset(spec).ok_or_else(|| {
        anyhow!(Error::Config(format!(
            "{spec:?} is neither a config file nor a preset"
        )))
    })
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    announce(json!({
        "command": "gen-data",
        "out": a.out,
        "samples": a.samples,
        "classes": a.classes,
        "size": a.size,
        "seed": a.seed,
        "subset": a.subset,
    }));
    let samples = generate(a.samples, a.classes, a.size, a.seed)?;
    let info = DatasetInfo {
        seed: Some(a.seed),
        classes: Some(a.classes),
        subset: a.subset,
    };
    let manifest = write_dataset(&samples, a.size, &info, &a.out)?;
    let ds = Dataset::open(&a.out)?;
    println!(
        "wrote {} samples ({} bytes each) to {}; samples.bin sha256 {}",
        manifest.count,
        manifest.record_size,
        a.out.display(),
        ds.samples_hash()?
    );
    Ok(())
}

fn open_log(path: &Path, append: bool) -> anyhow::Result<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(BufWriter::new(file))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut trainer = match (&a.resume, &a.config) {
        (Some(ckpt), cfg) => {
            let t = load_checkpoint(ckpt)?;
            if let Some(spec) = cfg {
                let mut want = resolve_config(spec)?;
                if let Some(seed) = a.seed {
                    want.seed = seed;
                }
                if want != *t.cfg() {
                    bail!(Error::Config(format!(
                        "--config does not match the config stored in {}",
                        ckpt.display()
                    )));
                }
            }
            t
        }
        (None, Some(spec)) => {
            let mut cfg = resolve_config(spec)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            Trainer::new(&cfg)?
        }
        (None, None) => bail!(Error::Config("train needs --config or --resume".into())),
    };
    announce(json!({
        "command": "train",
        "seed": trainer.cfg().seed,
        "start_step": trainer.state.step,
        "steps": a.steps,
        "config": trainer.cfg(),
    }));
    let data = Dataset::open(&a.data)?.read_all()?;
    trainer.check_data(&data)?;
    if data.is_empty() && a.steps > 0 {
        bail!(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut log = match &a.log {
        Some(p) => Some(open_log(p, a.resume.is_some())?),
        None => None,
    };
    let end = trainer.state.step + a.steps;
    for _ in 0..a.steps {
        let m = match trainer.train_on(&data) {
            Ok(m) => m,
            Err(e @ Error::NonFinite { .. }) => {
                eprintln!("non-finite values, no checkpoint written");
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let line = serde_json::to_string(&m)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{line}").with_context(|| "writing metrics")?;
        }
        if m.step % 10 == 0 || trainer.state.step == end {
            println!("{line}");
        }
    }
    if let Some(mut w) = log {
        w.flush().with_context(|| "writing metrics")?;
    }
    save_checkpoint(&trainer, &a.out)?;
    println!(
        "checkpoint at step {} written to {}",
        trainer.state.step,
        a.out.display()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let mut cfg = resolve_config(&a.config)?;
    cfg.seed = a.seed;
    announce(json!({
        "command": "gradcheck",
        "seed": a.seed,
        "sabotage": a.sabotage,
        "config": cfg,
    }));
    let opts = GradcheckOptions {
        seed: a.seed,
        sabotage: a.sabotage,
        ..GradcheckOptions::default()
    };
    let report = gradcheck_model(&cfg, &opts)?;
    println!(
        "{:<22} {:>12} {:>8}  worst entry",
        "group", "max rel err", "checked"
    );
    for r in report.rows() {
        println!(
            "{:<22} {:>12.3e} {:>8}  {}",
            r.name, r.max_rel_err, r.checked, r.worst
        );
    }
    let worst = report.worst().expect("non-empty report");
    if report.passed() {
        println!("PASS: all groups below {:e}", report.tolerance);
        Ok(())
    } else {
        Err(VerificationFailed(format!(
            "gradient check failed: {} in {} has relative error {:.3e} (tolerance {:e})",
            worst.worst, worst.name, worst.max_rel_err, report.tolerance
        ))
        .into())
    }
}

fn bias_dump(a: BiasDumpArgs) -> anyhow::Result<()> {
    announce(json!({
        "command": "bias-dump",
        "rows": a.rows, "cols": a.cols, "patch": a.patch, "gsd": a.gsd,
        "key_rows": a.key_rows, "key_cols": a.key_cols, "key_gsd": a.key_gsd,
        "key_patch": a.key_patch, "heads": a.heads,
        "seed": serde_json::Value::Null,
    }));
    let slopes = SlopeSchedule::new(a.heads)?;
    let query = PatchGrid::new(a.rows, a.cols, a.patch, a.gsd)?;
    let bias = match (a.key_rows, a.key_cols, a.key_gsd) {
        (Some(r), Some(c), Some(g)) => {
            let key = PatchGrid::new(r, c, a.key_patch.unwrap_or(a.patch), g)?;
            cross_bias(&query, &key, &slopes)?
        }
        _ => self_bias(&query, &slopes),
    };
    let file = File::create(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    write_csv(&bias, &slopes, &mut w)
        .and_then(|()| w.flush())
        .map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
    let [h, q, k] = bias.shape();
    println!("wrote {h} matrices of {q}x{k} to {}", a.out.display());
    Ok(())
}

fn features(
    t: &Trainer,
    data: &[AlignedTriplet],
    which: ProbeEncoder,
) -> anyhow::Result<Vec<Vec<f64>>> {
    data.iter()
        .map(|s| {
            let img = match which {
                ProbeEncoder::Lores => &s.lores,
                ProbeEncoder::Hires => &s.hires,
            };
            Ok(t.model.encode_for_probe(&t.state.store, img, which)?)
        })
        .collect()
}

/// Holds out every fourth sample of each class.
fn holdout_split(data: Vec<AlignedTriplet>) -> (Vec<AlignedTriplet>, Vec<AlignedTriplet>) {
    let mut seen = std::collections::HashMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in data {
        let n = seen.entry(s.class_id).or_insert(0usize);
        *n += 1;
        if *n % 4 == 0 {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    (train, test)
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let trainer = load_checkpoint(&a.ckpt)?;
    let which = match a.encoder {
        EncoderChoice::Lores => ProbeEncoder::Lores,
        EncoderChoice::Hires => ProbeEncoder::Hires,
    };
    let method = match a.method {
        Method::Knn => "knn",
        Method::Kmeans => "kmeans",
        Method::Mlp => "mlp",
    };
    announce(json!({
        "command": "probe",
        "ckpt": a.ckpt,
        "method": method,
        "encoder": which,
        "k": a.k,
        "clusters": a.clusters,
        "hidden": a.hidden,
        "epochs": a.epochs,
        "seed": a.seed,
        "model_seed": trainer.cfg().seed,
        "step": trainer.state.step,
    }));
    let data = Dataset::open(&a.data)?.read_all()?;
    trainer.check_data(&data)?;
    let (train, test): (Vec<AlignedTriplet>, Vec<AlignedTriplet>) = match &a.test_data {
        Some(p) => {
            let test = Dataset::open(p)?.read_all()?;
            trainer.check_data(&test)?;
            (data, test)
        }
        None => holdout_split(data),
    };
    let train_f = features(&trainer, &train, which)?;
    let train_l: Vec<u32> = train.iter().map(|s| s.class_id).collect();
    let test_f = features(&trainer, &test, which)?;
    let test_l: Vec<u32> = test.iter().map(|s| s.class_id).collect();
    let mut classes = train_l.clone();
    classes.extend(&test_l);
    classes.sort_unstable();
    classes.dedup();
    println!(
        "probe train {} samples, test {} samples, {} classes, chance {:.4}",
        train.len(),
        test.len(),
        classes.len(),
        1.0 / classes.len().max(1) as f64
    );
    match a.method {
        Method::Knn => {
            let r = knn_probe(&train_f, &train_l, &test_f, &test_l, a.k)?;
            println!("knn k={} accuracy {:.4}", a.k, r.accuracy);
        }
        Method::Kmeans => {
            let mut all = train_f;
            all.extend(test_f);
            let mut labels = train_l;
            labels.extend(test_l);
            let k = a.clusters.unwrap_or(classes.len());
            let r = kmeans_probe(&all, &labels, k, a.seed)?;
            println!(
                "kmeans k={k} seed={} iterations {} matched accuracy {:.4}",
                a.seed, r.iterations, r.accuracy
            );
        }
        Method::Mlp => {
            let cfg = MlpProbeConfig {
                hidden: a.hidden,
                epochs: a.epochs,
                seed: a.seed,
                ..MlpProbeConfig::default()
            };
            let r = mlp_probe(&train_f, &train_l, &test_f, &test_l, &cfg)?;
            println!(
                "mlp hidden={} epochs={} seed={} accuracy {:.4}",
                a.hidden, a.epochs, a.seed, r.accuracy
            );
        }
    }
    if a.paper_literal_infonce {
        report_infonce(&trainer, &test)?;
    }
    Ok(())
}

/// Both alignment objectives on the held-out set's unimodal representations.
fn report_infonce(t: &Trainer, data: &[AlignedTriplet]) -> anyhow::Result<()> {
    if data.is_empty() {
        bail!(Error::Config(
            "no held-out samples for the InfoNCE report".into()
        ));
    }
    let mut g = Graph::new();
    let mut z = Vec::new();
    let encoders = [
        (Modality::Radar, &t.model.radar, t.cfg().lores_gsd),
        (Modality::Lores, &t.model.lores, t.cfg().lores_gsd),
        (Modality::Hires, &t.model.hires, t.cfg().hires_gsd()),
    ];
    for (i, (m, enc, gsd)) in encoders.into_iter().enumerate() {
        let mut rows = Vec::with_capacity(data.len());
        for s in data {
            let r = [&s.radar, &s.lores, &s.hires][i];
            let x = g.constant(&[r.channels, r.height, r.width], r.to_f64())?;
            let stream = enc.forward(&mut g, &t.state.store, x, gsd, m)?;
            let head = t.model.proj.as_ref().map(|p| &p[i]);
            let v = scale_alibi::losses::pool_and_normalize(&mut g, &t.state.store, &stream, head)?;
            let p = g.shape(v)[0];
            rows.push(g.reshape(v, &[1, p])?);
        }
        z.push((m, g.concat(&rows, 0)?));
    }
    let batch = ContrastiveBatch {
        z,
        temperature: t.cfg().temperature,
    };
    let literal = contrastive_loss_literal(&g, &batch)?;
    let standard = contrastive_loss(&mut g, &batch)?;
    println!(
        "infonce over {} held-out samples: trained form {:.6}, printed form {:.6}",
        data.len(),
        g.item(standard),
        literal
    );
    Ok(())
}

fn verify_dataset(a: VerifyArgs) -> anyhow::Result<()> {
    announce(json!({
        "command": "verify-dataset",
        "data": a.data,
        "expect_sha256": a.expect_sha256,
        "seed": serde_json::Value::Null,
    }));
    let ds = Dataset::open(&a.data)?;
    let mut n = 0usize;
    for rec in ds.iter()? {
        rec?.validate()?;
        n += 1;
    }
    let hash = ds.samples_hash()?;
    println!(
        "{n} records verified (size {}, seed {:?}, classes {:?}); samples.bin sha256 {hash}",
        ds.manifest.size, ds.manifest.seed, ds.manifest.classes
    );
    if let Some(want) = a.expect_sha256 {
        if !want.eq_ignore_ascii_case(&hash) {
            return Err(VerificationFailed(format!(
                "samples.bin hash {hash} differs from expected {want}"
            ))
            .into());
        }
    }
    Ok(())
}
