use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use qimagegen::cli_io::{image_grid, RunConfig};
use qimagegen::generator::{generate_from_noise, sample_noise, GeneratedSample, NoiseDraw};
use qimagegen::image_codec::{read_imgf64, read_pnm, write_imgf64, write_pnm, Encoding, Image};
use qimagegen::metrics::{
    grad_magnitude, layerwise_entropy, mode_pca, select_checkpoint, Kernel, MmdReport,
};
use qimagegen::statevector::QuantumState;
use qimagegen::trainer::{self, list_checkpoints, Checkpoint, Trainer, LOG_HEADER};

#[derive(Parser)]
#[command(name = "qimagegen", version, about = "Quantum image GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a PGM/PPM/.imgf64 image into a `.qsv` statevector.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_parser = parse_encoding, default_value = "frqi")]
        encoding: Encoding,
    },
    /// Decode a `.qsv` statevector into an image.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_parser = parse_encoding, default_value = "frqi")]
        encoding: Encoding,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the number of generator iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from the latest checkpoint in `--out`. Only the iteration
    /// budget may differ from the original configuration.
        #[arg(long)]
        resume: bool,
    },
    /// Render generated samples from a checkpoint as an image grid.
    Sample(SampleArgs),
    /// Pick the best checkpoint of a run by smoothed MMD.
    Select {
        run: PathBuf,
    },
    /// Analyses of a trained generator.
    #[command(subcommand)]
    Analyze(Analysis),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Measurement shots per image; omitted means exact probabilities.
    #[arg(long)]
    shots: Option<u64>,
    /// Restrict sampling to one noise mode.
    #[arg(long)]
    mode: Option<usize>,
    /// Display as `1 − x`.
    #[arg(long)]
    invert: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the grid as lossless `.imgf64`.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analysis {
    /// Subsystem entropies after every layer, as CSV.
    Entropy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        draws: usize,
        /// Qubit subsets such as `0;1,2`.
        #[arg(long, default_value = "0")]
        subsets: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Norm of the generator gradient divided by the parameter count.
    Grad {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// First principal component of one mode's samples.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: usize,
        /// Output prefix; writes `<prefix>_{minus,mean,plus}.pgm`.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_encoding(s: &str) -> Result<Encoding, String> {
    match s {
        "frqi" => Ok(Encoding::Frqi),
        "mcrqi" => Ok(Encoding::Mcrqi),
        "amplitude" => Ok(Encoding::Amplitude),
        _ => Err(format!("unknown encoding {s:?} (frqi, mcrqi, amplitude)")),
    }
}

fn main() -> Result<()> {
    if let Ok(n) = std::env::var("QIMAGEGEN_THREADS") {
        let n: usize = n.parse().context("QIMAGEGEN_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match Cli::parse().command {
        Command::Encode {
            input,
            output,
            encoding,
        } => encode(&input, &output, encoding),
        Command::Decode {
            input,
            output,
            encoding,
        } => decode(&input, &output, encoding),
        Command::Train {
            config,
            out,
            iterations,
            resume,
        } => train(config.as_deref(), &out, iterations, resume),
        Command::Sample(args) => sample(&args),
        Command::Select { run } => select(&run),
        Command::Analyze(a) => analyze(a),
    }
}

fn read_image(path: &Path) -> Result<Image> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let img = if path.extension().is_some_and(|e| e == "imgf64") {
        read_imgf64(BufReader::new(file))?
    } else {
        read_pnm(BufReader::new(file))?
    };
    Ok(img)
}

fn write_image(path: &Path, image: &Image) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "imgf64") {
        write_imgf64(image, &mut w)?;
    } else {
        write_pnm(image, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn encode(input: &Path, output: &Path, encoding: Encoding) -> Result<()> {
    let state = encoding.encode(&read_image(input)?)?;
    let mut w = BufWriter::new(File::create(output)?);
    state.write_qsv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn decode(input: &Path, output: &Path, encoding: Encoding) -> Result<()> {
    let state = QuantumState::read_qsv(BufReader::new(File::open(input)?))?;
    write_image(output, &encoding.decode(&state.probabilities())?)
}

fn train(config: Option<&Path>, out: &Path, iterations: Option<usize>, resume: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    let config_path = out.join("config.json");
    let (mut run, base) = match config {
        Some(p) => (
            RunConfig::load(p)?,
            p.parent().unwrap_or(Path::new(".")).to_path_buf(),
        ),
        None if resume => (RunConfig::load(&config_path)?, out.to_path_buf()),
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if let Some(n) = iterations {
        run.train.iterations = n;
    }
    let base = std::path::absolute(&base)?;
    for path in [&mut run.dataset.images, &mut run.dataset.labels].into_iter().flatten() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    let hash = {
        let mut budgetless = run.clone();
        budgetless.train.iterations = 0;
        budgetless.hash()
    };
    let data = run.dataset.load(run.generator.side, &base)?;
    let log_path = out.join("metrics.csv");

    let mut trainer = match list_checkpoints(out)?.last() {
        Some((_, latest)) if resume => {
            let mut t = Trainer::from_checkpoint(Checkpoint::load(latest)?)?;
            ensure!(
                t.config_hash.as_deref() == Some(hash.as_str()),
                "run configuration changed since {}; refusing to resume",
                latest.display()
            );
            t.config.iterations = run.train.iterations;
            t.config_hash = Some(hash.clone());
            truncate_log(&log_path, t.iteration)?;
            t
        }
        Some(_) if !resume => bail!(
            "{} already holds checkpoints; pass --resume or pick a new directory",
            out.display()
        ),
        _ => {
            let mut t = Trainer::new(run.generator.clone(), run.critic.clone(), run.train.clone())?;
            t.config_hash = Some(hash.clone());
            fs::write(&log_path, format!("{LOG_HEADER}\n"))?;
            t
        }
    };
    fs::write(&config_path, run.to_json() + "\n")?;
    fs::write(out.join("config_hash.txt"), format!("{hash}\n"))?;
    fs::write(out.join("seed.txt"), format!("{}\n", run.train.seed))?;

    eprintln!(
        "training {} parameters on {} images ({}), {} → {} iterations",
        trainer.params.len(),
        data.len(),
        data.provenance,
        trainer.iteration,
        trainer.config.iterations
    );
    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    let mut write_err = None;
    trainer::train_with(&mut trainer, &data.images, Some(out), |row| {
        if write_err.is_some() {
            return;
        }
        if let Err(e) = writeln!(log, "{}", row.to_csv()).and_then(|_| log.flush()) {
            write_err = Some(e);
        }
        if let Some(m) = row.mmd {
            eprintln!(
                "iteration {:>6}: mmd linear {:.5} poly {:.5} rbf {:.5}",
                row.iteration, m.linear, m.poly, m.rbf
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics.csv");
    }
    Ok(())
}

/// Drops log rows past `iteration`, left behind by an interrupted run.
fn truncate_log(path: &Path, iteration: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_else(|_| format!("{LOG_HEADER}\n"));
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .is_some_and(|it| it <= iteration);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn draw_samples(ck: &Checkpoint, count: usize, mode: Option<usize>, shots: Option<u64>, seed: u64) -> Result<Vec<GeneratedSample>> {
    ensure!(count > 0, "count must be positive");
    if let Some(m) = mode {
        ensure!(m < ck.generator.modes, "mode {m} out of range ({} modes)", ck.generator.modes);
    }
    let params = qimagegen::generator::GeneratorParams::from_vec(&ck.generator, ck.params.clone())?;
    let mut rng = qimagegen::rng(seed);
    let noises: Vec<NoiseDraw> = (0..count)
        .map(|_| {
            let mut n = sample_noise(&ck.generator, &mut rng);
            if let Some(m) = mode {
                n.mode = m;
            }
            n
        })
        .collect();
    Ok(generate_from_noise(&ck.generator, &params, noises, shots, &mut rng)?)
}

fn sample(args: &SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let samples = draw_samples(&ck, args.count, args.mode, args.shots, args.seed)?;
    let images: Vec<Image> = samples
        .into_iter()
        .map(|s| if args.invert { s.image.inverted() } else { s.image })
        .collect();
    let columns = (images.len() as f64).sqrt().ceil() as usize;
    let gap = if args.invert { 1.0 } else { 0.0 };
    let grid = image_grid(&images, columns, gap)?;
    write_image(&args.output, &grid)?;
    if let Some(raw) = &args.raw {
        write_image(raw, &grid)?;
    }
    Ok(())
}

fn read_mmd_log(path: &Path) -> Result<Vec<(usize, MmdReport)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 6, "malformed metrics row {line:?}");
        if f[3].is_empty() {
            continue;
        }
        out.push((
            f[0].parse()?,
            MmdReport {
                linear: f[3].parse()?,
                poly: f[4].parse()?,
                rbf: f[5].parse()?,
                samples: 0,
            },
        ));
    }
    Ok(out)
}

fn select(run: &Path) -> Result<()> {
    let log = run.join("metrics.csv");
    let series = if log.exists() {
        read_mmd_log(&log)?
    } else {
        let config = RunConfig::load(&run.join("config.json"))?;
        let data = config.dataset.load(config.generator.side, run)?;
        list_checkpoints(run)?
            .into_iter()
            .map(|(it, path)| {
                let t = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
                Ok((it, t.evaluate_mmd(&data.images, config.train.mmd_samples.max(1))?))
            })
            .collect::<Result<Vec<_>>>()?
    };
    ensure!(!series.is_empty(), "no MMD evaluations found in {}", run.display());
    let per_kernel: Vec<Vec<f64>> = Kernel::ALL
        .iter()
        .map(|&k| series.iter().map(|(_, m)| m.get(k)).collect())
        .collect();
    let best = select_checkpoint(&per_kernel).expect("non-empty series");
    let (it, m) = series[best];
    println!(
        "{}\titeration {it}\tmmd linear {} poly {} rbf {}",
        trainer::checkpoint_dir(run, it).display(),
        m.linear,
        m.poly,
        m.rbf
    );
    Ok(())
}

fn parse_subsets(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|part| {
            part.split(',')
                .map(|q| q.trim().parse::<usize>().with_context(|| format!("bad qubit index {q:?}")))
                .collect()
        })
        .collect()
}

fn analyze(a: Analysis) -> Result<()> {
    match a {
        Analysis::Entropy {
            checkpoint,
            output,
            draws,
            subsets,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let params = qimagegen::generator::GeneratorParams::from_vec(&ck.generator, ck.params.clone())?;
            let mut rng = qimagegen::rng(seed);
            let noise: Vec<NoiseDraw> = (0..draws).map(|_| sample_noise(&ck.generator, &mut rng)).collect();
            let trace = layerwise_entropy(&ck.generator, &params, &parse_subsets(&subsets)?, &noise)?;
            match output {
                Some(p) => fs::write(p, trace.to_csv())?,
                None => print!("{}", trace.to_csv()),
            }
        }
        Analysis::Grad {
            checkpoint,
            batch,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let samples = draw_samples(&ck, batch, None, None, seed)?;
            let t = Trainer::from_checkpoint(ck)?;
            println!("{}", grad_magnitude(&t.generator, &t.params, &t.critic, &samples)?);
        }
        Analysis::Pca {
            checkpoint,
            mode,
            output,
            samples,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (side, channels) = (ck.generator.side, ck.generator.encoding.channels());
            let drawn = draw_samples(&ck, samples, Some(mode), None, seed)?;
            let flat: Vec<Vec<f64>> = drawn.into_iter().map(|s| s.image.into_data()).collect();
            let pca = mode_pca(&flat)?;
            let stem = output.to_string_lossy().into_owned();
            for (tag, v) in [("minus", &pca.minus), ("mean", &pca.mean), ("plus", &pca.plus)] {
                let img = Image::new(side, side, channels, v.clone())?;
                write_image(Path::new(&format!("{stem}_{tag}.pgm")), &img)?;
            }
            if pca.zero_variance {
                println!("sigma 0 (all samples identical)");
            } else {
                println!("sigma {}", pca.sigma());
            }
        }
    }
    Ok(())
}
