use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ren_core::config::{DatasetFamily, ExperimentConfig, VarianceSource};
use ren_core::datasets::{self, Split};
use ren_core::metrics::{self, RelevanceReport};
use ren_core::networks::checkpoint::{sha256_hex, OptimizerState};
use ren_core::rng::SeedTree;
use ren_core::trainer::{write_record, Trainer};
use ren_core::{build_model, Checkpoint, RenModel, Tensor};
use serde_json::{json, Value};

use crate::output::{columns, ensure_dir, format_f64s, write_csv, write_json, write_jsonl};
use crate::UsageError;

/// Images per panel in image plot dumps.
const PANEL_IMAGES: usize = 64;

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub save_every: usize,
    pub quiet: bool,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n_generate: Option<usize>,
}

pub struct GenDataArgs {
    pub dataset: Option<String>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub from_csv: Option<PathBuf>,
    pub from_raw: Option<PathBuf>,
    pub shape: Option<(usize, usize)>,
    pub train_count: Option<usize>,
    pub label_last: bool,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(usage(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    Ok(ExperimentConfig::from_file(path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(cfg.to_toml().as_bytes())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let (cfg, mut model, mut trainer) = match &args.checkpoint {
        Some(path) => {
            if args.config.is_some() {
                return Err(usage(
                    "--config and --checkpoint are exclusive: a resumed run uses its saved config",
                ));
            }
            let ck = load_checkpoint(path)?;
            let optimizer = ck.optimizer.clone().unwrap_or_default();
            let trainer = Trainer::resume(
                ck.config.train.clone(),
                optimizer,
                ck.epochs_completed as usize,
            )?;
            (ck.config, ck.model, trainer)
        }
        None => {
            let path = args
                .config
                .as_deref()
                .ok_or_else(|| usage("train needs --config or --checkpoint"))?;
            let mut cfg = load_config(path)?;
            if let Some(seed) = args.seed {
                cfg.train.seed = seed;
            }
            let model = build_model(&cfg)?;
            let trainer = Trainer::new(cfg.train.clone())?;
            (cfg, model, trainer)
        }
    };
    if args.checkpoint.is_some() && args.seed.is_some() {
        return Err(usage("--seed cannot change the seed of a resumed run"));
    }
    // --out is not written into the saved config, so it cannot change checkpoint hashes
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    ensure_dir(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config echo")?;

    let train = datasets::load_split(&cfg, Split::Train)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.checkpoint.is_some())
        .truncate(args.checkpoint.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let ck_path = out.join("checkpoint.bin");
    let start = Instant::now();
    let epochs = cfg.train.epochs;
    let report_every = (epochs / 30).max(1);
    let snapshot = |model: &RenModel, trainer: &Trainer| Checkpoint {
        config: cfg.clone(),
        model: model.clone(),
        epochs_completed: trainer.epochs_completed as u64,
        optimizer: Some(trainer.optimizer.clone()),
    };
    for epoch in trainer.epochs_completed + 1..=epochs {
        let record = trainer.run_epoch(&mut model, &train, epoch)?;
        trainer.epochs_completed = epoch;
        write_record(&mut log, &record)
            .with_context(|| format!("writing {}", log_path.display()))?;
        if !args.quiet && (epoch % report_every == 0 || epoch == epochs) {
            eprintln!(
                "epoch {:>5}/{epochs}  elbo {:>10.4}  recon {:>10.4}  log_sigma {:>7.3}  alpha [{}]",
                epoch,
                record.total,
                record.recon,
                record.log_sigma_dec,
                record.alpha.iter().map(|a| format!("{a:.3e}")).collect::<Vec<_>>().join(", ")
            );
        }
        if args.save_every > 0 && epoch % args.save_every == 0 && epoch < epochs {
            snapshot(&model, &trainer).save(&ck_path)?;
        }
    }
    let ck = snapshot(&model, &trainer);
    ck.save(&ck_path)?;
    let manifest = json!({
        "command": "train",
        "checkpoint": ck_path,
        "checkpoint_hash": ck.content_hash(),
        "config_hash": config_hash(&cfg),
        "config": cfg.to_toml(),
        "seed": cfg.train.seed,
        "epochs_completed": ck.epochs_completed,
        "wall_seconds": start.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("{}", ck_path.display());
    Ok(())
}

/// The checkpoint's config with its dataset section replaced as requested.
fn eval_config(ck: &Checkpoint, dataset: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = ck.config.clone();
    if let Some(arg) = dataset {
        let as_path = Path::new(arg);
        if as_path.is_file() {
            cfg.dataset = load_config(as_path)?.dataset;
        } else {
            let family: DatasetFamily = arg.parse().map_err(|e| {
                usage(format!(
                    "--dataset {arg:?} is neither a config file nor a dataset name: {e}"
                ))
            })?;
            if family != cfg.dataset.name {
                cfg.dataset = ExperimentConfig::defaults(family).dataset;
            }
        }
    }
    let expected = ck.model.data_dim();
    let found = cfg.dataset.name.data_dim();
    if expected != found {
        return Err(usage(format!(
            "data dimension mismatch: the checkpoint expects D = {expected}, dataset {} has D = {found}",
            cfg.dataset.name
        )));
    }
    let mut errors = Vec::new();
    cfg.dataset.validate(&mut errors);
    if !errors.is_empty() {
        return Err(ren_core::Error::Config(errors).into());
    }
    Ok(cfg)
}

fn report(model: &RenModel, cfg: &ExperimentConfig, test: &Tensor) -> Result<RelevanceReport> {
    Ok(match cfg.eval.variance_source {
        VarianceSource::Prior => metrics::relevance_report(&model.current_alpha)?,
        VarianceSource::Empirical => {
            let v = metrics::empirical_latent_variance(model, test)?;
            metrics::report_from_variances(model.current_alpha.clone(), &v)?
        }
    })
}

fn generation_rng(seed: u64) -> ren_core::rng::RenRng {
    SeedTree::new(seed).child("eval").child("generate").rng()
}

fn default_out(ck_path: &Path, leaf: &str) -> PathBuf {
    ck_path.parent().unwrap_or(Path::new(".")).join(leaf)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let cfg = eval_config(&ck, args.dataset.as_deref())?;
    let test = datasets::load_split(&cfg, Split::Test)?;
    let model = &ck.model;
    let seed = args.seed.unwrap_or(ck.config.train.seed);
    let n_generate = args.n_generate.unwrap_or(cfg.eval.n_generate);

    let mse = metrics::recon_mse(model, &test)?;
    let rep = report(model, &cfg, &test)?;
    let generated = metrics::generate(model, n_generate, &mut generation_rng(seed))?;
    let energy = if n_generate >= 2 {
        Value::from(metrics::energy_distance(
            &test,
            &generated,
            cfg.eval.unbiased_energy,
        )?)
    } else {
        Value::Null
    };

    let base = |metric: &str, value: Value| {
        json!({
            "metric": metric,
            "value": value,
            "dataset": cfg.dataset.name.name(),
            "config_hash": config_hash(&ck.config),
            "checkpoint_hash": ck.content_hash(),
            "seed": seed,
        })
    };
    let records = vec![
        base("mse", Value::from(mse)),
        base("l_star", Value::from(rep.l_star)),
        base("top_explained_ratio", Value::from(rep.explained_ratio[0])),
        base("relevance_report", serde_json::to_value(&rep)?),
        base("energy_distance", energy),
    ];
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_out(&args.checkpoint, "eval"));
    ensure_dir(&out)?;
    write_jsonl(&out.join("results.jsonl"), &records)?;
    for r in &records {
        println!("{r}");
    }
    Ok(())
}

pub fn dump_plots(args: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let cfg = eval_config(&ck, args.dataset.as_deref())?;
    let test = datasets::load_split(&cfg, Split::Test)?;
    let model = &ck.model;
    let seed = args.seed.unwrap_or(ck.config.train.seed);
    let n_generate = args.n_generate.unwrap_or(cfg.eval.n_generate);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_out(&args.checkpoint, "plots"));
    ensure_dir(&out)?;

    let d = model.data_dim();
    let l = model.latent_dim();
    let recon = metrics::reconstruct(model, &test)?;
    let (mu, _) = metrics::encode_means(model, &test)?;
    let generated = metrics::generate(model, n_generate, &mut generation_rng(seed))?;
    let rep = report(model, &cfg, &test)?;
    let alpha_note = vec![format!("alpha = {}", format_f64s(&model.current_alpha))];

    let mut header = columns("x", d);
    header.extend(columns("recon", d));
    write_csv(
        &out.join("reconstructions.csv"),
        &[],
        &header,
        &[&test, &recon],
    )?;
    write_csv(
        &out.join("latents.csv"),
        &alpha_note,
        &columns("z", l),
        &[&mu],
    )?;
    write_csv(
        &out.join("generated.csv"),
        &[],
        &columns("x", d),
        &[&generated],
    )?;

    let mut rel = String::from("dim,inv_alpha,explained_ratio\n");
    for (k, &dim) in rep.order.iter().enumerate() {
        rel.push_str(&format!(
            "{dim},{:?},{:?}\n",
            rep.variances[k], rep.explained_ratio[k]
        ));
    }
    std::fs::write(out.join("relevance.csv"), rel).context("writing relevance.csv")?;

    if let Some((h, w)) = cfg.dataset.name.image_shape() {
        let note = vec![format!("{h}x{w} images, one row-major pixel grid per line")];
        let first =
            |t: &Tensor| t.select_rows(&(0..t.rows().min(PANEL_IMAGES)).collect::<Vec<_>>());
        let px = columns("p", d);
        write_csv(
            &out.join("panel_original.csv"),
            &note,
            &px,
            &[&first(&test)],
        )?;
        write_csv(
            &out.join("panel_reconstructed.csv"),
            &note,
            &px,
            &[&first(&recon)],
        )?;
        write_csv(
            &out.join("panel_generated.csv"),
            &note,
            &px,
            &[&first(&generated)],
        )?;
    }
    println!("{}", out.display());
    Ok(())
}

fn read_csv_images(
    path: &Path,
    shape: Option<(usize, usize)>,
    label_last: bool,
) -> Result<(Vec<u8>, Vec<u8>, usize, usize)> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut width = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').collect();
        if label_last {
            fields.rotate_right(1);
        }
        let parse = |s: &str| -> Result<u8> {
            s.trim()
                .parse::<u8>()
                .with_context(|| format!("{}:{}: {s:?} is not a byte", path.display(), i + 1))
        };
        let first = match parse(fields[0]) {
            Ok(v) => v,
            // a header line
            Err(_) if i == 0 => continue,
            Err(e) => return Err(e),
        };
        let n = fields.len() - 1;
        if *width.get_or_insert(n) != n {
            bail!(
                "{}:{}: expected {} pixels, found {n}",
                path.display(),
                i + 1,
                width.unwrap_or(0)
            );
        }
        labels.push(first);
        for f in &fields[1..] {
            pixels.push(parse(f)?);
        }
    }
    let d = width.ok_or_else(|| usage(format!("{} holds no images", path.display())))?;
    let (h, w) = match shape {
        Some(s) => s,
        None => {
            let side = (d as f64).sqrt().round() as usize;
            (side, side)
        }
    };
    if h * w != d {
        return Err(usage(format!(
            "{} has {d} pixels per image, not {h}x{w}",
            path.display()
        )));
    }
    Ok((pixels, labels, h, w))
}

fn write_image_set(out: &Path, prefix: &str, set: &datasets::ImageSet) -> Result<()> {
    let bytes = datasets::to_pixel_bytes(&set.images);
    let images = datasets::idx_image_bytes(&bytes, set.len(), set.height, set.width)?;
    datasets::write_maybe_gz(&out.join(format!("{prefix}images.idx.gz")), &images)?;
    if let Some(l) = &set.labels {
        datasets::write_maybe_gz(
            &out.join(format!("{prefix}labels.idx.gz")),
            &datasets::idx_label_bytes(l),
        )?;
    }
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    if let Some(csv) = &args.from_csv {
        let (pixels, labels, h, w) = read_csv_images(csv, args.shape, args.label_last)?;
        let n = labels.len();
        if let Some(k) = args.train_count {
            if k == 0 || k >= n {
                return Err(usage(format!(
                    "--train-count must be between 1 and {}, got {k}",
                    n - 1
                )));
            }
            let set = datasets::ImageSet {
                images: Tensor::new(
                    vec![n, h * w],
                    pixels.iter().map(|&p| p as f64 / 255.0).collect(),
                )?,
                labels: Some(labels),
                height: h,
                width: w,
            };
            let (train, test) = datasets::split_off(&set, k, args.seed.unwrap_or(0))?;
            write_image_set(&args.out, "train-", &train)?;
            write_image_set(&args.out, "test-", &test)?;
            println!(
                "{k} training and {} test images of {h}x{w} written to {}",
                n - k,
                args.out.display()
            );
            return Ok(());
        }
        datasets::write_maybe_gz(
            &args.out.join("images.idx.gz"),
            &datasets::idx_image_bytes(&pixels, n, h, w)?,
        )?;
        datasets::write_maybe_gz(
            &args.out.join("labels.idx.gz"),
            &datasets::idx_label_bytes(&labels),
        )?;
        println!("{n} images of {h}x{w} written to {}", args.out.display());
        return Ok(());
    }
    if let Some(raw) = &args.from_raw {
        let (h, w) = args
            .shape
            .ok_or_else(|| usage("--from-raw needs --height and --width"))?;
        let pixels = std::fs::read(raw).with_context(|| format!("reading {}", raw.display()))?;
        if pixels.is_empty() || pixels.len() % (h * w) != 0 {
            return Err(usage(format!(
                "{} holds {} bytes, not a whole number of {h}x{w} images",
                raw.display(),
                pixels.len()
            )));
        }
        let n = pixels.len() / (h * w);
        datasets::write_maybe_gz(
            &args.out.join("images.idx.gz"),
            &datasets::idx_image_bytes(&pixels, n, h, w)?,
        )?;
        println!("{n} images of {h}x{w} written to {}", args.out.display());
        return Ok(());
    }

    let mut cfg = match (&args.config, &args.dataset) {
        (Some(p), _) => load_config(p)?,
        (None, Some(name)) => {
            let family: DatasetFamily =
                name.parse().map_err(|e| usage(format!("--dataset: {e}")))?;
            let cfg = ExperimentConfig::defaults(family);
            if !family.is_toy() {
                return Err(usage(format!("{family} needs --config with image paths")));
            }
            cfg
        }
        (None, None) => {
            return Err(usage(
                "gen-data needs --dataset, --config, --from-csv or --from-raw",
            ))
        }
    };
    if let (Some(_), Some(name)) = (&args.config, &args.dataset) {
        let family: DatasetFamily = name.parse().map_err(|e| usage(format!("--dataset: {e}")))?;
        if family != cfg.dataset.name {
            return Err(usage(format!(
                "--dataset {family} contradicts the config's {}",
                cfg.dataset.name
            )));
        }
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    for split in [Split::Train, Split::Test] {
        if cfg.dataset.name.is_toy() {
            let x = datasets::toy_split(&cfg, split)?;
            write_csv(
                &args.out.join(format!("{}.csv", split.name())),
                &[],
                &columns("x", 2),
                &[&x],
            )?;
        } else {
            let set = datasets::image_split(&cfg, split)?;
            write_image_set(&args.out, &format!("{}-", split.name()), &set)?;
        }
    }
    println!("{}", args.out.display());
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let ck = load_checkpoint(path)?;
    let rep = metrics::relevance_report(&ck.model.current_alpha)?;
    let opt: Option<&OptimizerState> = ck.optimizer.as_ref();
    let manifest = json!({
        "checkpoint": path,
        "checkpoint_hash": ck.content_hash(),
        "config_hash": config_hash(&ck.config),
        "dataset": ck.config.dataset.name.name(),
        "variant": format!("{:?}", ck.config.model.variant).to_lowercase(),
        "latent_dim": ck.model.latent_dim(),
        "data_dim": ck.model.data_dim(),
        "parameters": ck.model.params().len(),
        "scalars": ck.model.params().num_scalars(),
        "epochs_completed": ck.epochs_completed,
        "has_optimizer_state": opt.is_some(),
        "seed": ck.config.train.seed,
        "alpha": ck.model.current_alpha,
        "l_star": rep.l_star,
        "explained_ratio": rep.explained_ratio,
        "config": ck.config.to_toml(),
    });
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &manifest)?;
    writeln!(stdout)?;
    Ok(())
}
