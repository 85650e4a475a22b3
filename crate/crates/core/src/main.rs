use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mimgen::checkpoint::Checkpoint;
use mimgen::config::RunConfig;
use mimgen::datagen::make_corpus;
use mimgen::editor::{edit, edit_mask_free, EditRequest};
use mimgen::imageio::{GrayImage, RgbImage};
use mimgen::model::T2iModel;
use mimgen::sampler::{generate_tokens, DecodeTrace, SamplerConfig};
use mimgen::schedule::cosine_schedule;
use mimgen::text::Vocabulary;
use mimgen::tokens::TokenGrid;
use mimgen::trainer::{train_t2i, Control, TrainItem};
use mimgen::verify::{self, Suite};
use mimgen::vq::{train_tokenizer, VqTokenizer};
use mimgen::Error;

/// Masked-token text-to-image generation on synthetic scenes.
#[derive(Parser)]
#[command(name = "mimgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a corpus of synthetic scenes as `{i}.ppm` plus `captions.txt`.
    Datagen {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the VQ tokenizer on a datagen directory.
    TrainTokenizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Write `step,loss,grad_norm` lines here instead of stdout.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the text-to-image model on a datagen directory.
    TrainT2i {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first N pairs.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate an image from a caption.
    Generate {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        caption: String,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Output image; `.png` or `.ppm`.
        #[arg(long)]
        out: PathBuf,
        /// Per-step CSV `step,masked_before,committed,min_confidence`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write the final token grid.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Regenerate a masked region of an image under a new caption.
    Edit {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        /// Binary PGM (P5) of the image size; nonzero pixels are edited.
        #[arg(long, required_unless_present = "strength")]
        mask: Option<PathBuf>,
        /// Without a mask: remask this fraction of the least likely tokens.
        #[arg(long, conflicts_with = "mask")]
        strength: Option<f64>,
        #[arg(long)]
        caption: String,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run verification suites; prints `name status measured threshold` per check.
    Verify {
        /// `all`, or a comma-separated list of schedule, grad, rope, sampler, edit, persistence.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Print the `t m_t` table for `STEPS:TOKENS` instead of running suites.
        #[arg(long, value_name = "STEPS:TOKENS")]
        schedule_table: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON configuration file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one dotted key, e.g. `--set train.steps=500`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 48)]
    steps: usize,
    #[arg(long = "cfg", default_value_t = 9.0)]
    guidance: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance: self.guidance,
            temperature: self.temperature,
            seed: self.seed,
            ..SamplerConfig::default()
        }
    }
}

impl RunArgs {
    fn load(&self) -> mimgen::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

enum Outcome {
    Pass,
    CheckFailed,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => 2,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_corpus(dir: &Path) -> mimgen::Result<Vec<(RgbImage, String)>> {
    let captions = fs::read_to_string(dir.join("captions.txt"))?;
    captions
        .lines()
        .enumerate()
        .map(|(i, c)| Ok((RgbImage::load_ppm(dir.join(format!("{i}.ppm")))?, c.to_string())))
        .collect()
}

fn log_sink(path: &Option<PathBuf>) -> mimgen::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    })
}

fn load_models(m: &ModelArgs) -> mimgen::Result<(VqTokenizer<f32>, T2iModel<f32>)> {
    let tokenizer = Checkpoint::load(&m.tokenizer)?.into_tokenizer()?;
    let model = Checkpoint::load(&m.model)?.into_t2i()?;
    check_pairing(&tokenizer, &model)?;
    Ok((tokenizer, model))
}

fn check_pairing(tokenizer: &VqTokenizer<f32>, model: &T2iModel<f32>) -> mimgen::Result<()> {
    let side = tokenizer.config.grid_side();
    if model.model.grid_h != side || model.model.grid_w != side || model.model.codebook_k != tokenizer.config.codebook_k {
        return Err(Error::Config(format!(
            "model expects {}×{} grids over {} codes, tokenizer produces {side}×{side} over {}",
            model.model.grid_h, model.model.grid_w, model.model.codebook_k, tokenizer.config.codebook_k
        )));
    }
    Ok(())
}

fn write_trace(path: &Option<PathBuf>, trace: &DecodeTrace) -> mimgen::Result<()> {
    if let Some(p) = path {
        fs::write(p, trace.to_csv())?;
    }
    Ok(())
}

fn run(command: Command) -> mimgen::Result<Outcome> {
    match command {
        Command::Datagen { n, seed, image_size, out } => {
            let corpus = make_corpus(n, seed, image_size)?;
            fs::create_dir_all(&out)?;
            let mut captions = String::new();
            for (i, s) in corpus.iter().enumerate() {
                s.image.save_ppm(out.join(format!("{i}.ppm")))?;
                captions.push_str(&s.caption);
                captions.push('\n');
            }
            fs::write(out.join("captions.txt"), captions)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::TrainTokenizer { data, out, run, log } => {
            let cfg = run.load()?;
            let images: Vec<RgbImage> = load_corpus(&data)?.into_iter().map(|(img, _)| img).collect();
            let mut sink = log_sink(&log)?;
            let mut io_err = None;
            let (tok, report) = train_tokenizer(&images, &cfg.vq, &cfg.tokenizer_train, |s| {
                if let Err(e) = writeln!(sink, "{}", s.log_line()) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            sink.flush()?;
            Checkpoint::from_tokenizer(&tok, cfg.seed)?.save(&out)?;
            eprintln!(
                "used codes {}/{}, reconstruction mse {:.5}",
                report.used_entries(),
                cfg.vq.codebook_k,
                tok.reconstruction_mse(&images)?
            );
        }
        Command::TrainT2i {
            data,
            tokenizer,
            out,
            limit,
            run,
            log,
        } => {
            let cfg = run.load()?;
            let tokenizer = Checkpoint::load(&tokenizer)?.into_tokenizer()?;
            let mut corpus = load_corpus(&data)?;
            if let Some(l) = limit {
                corpus.truncate(l);
            }
            let model = T2iModel::<f32>::new(
                cfg.model.clone(),
                cfg.text.clone(),
                Vocabulary::captions(),
                tokenizer.config.image_size,
                cfg.seed,
            )?;
            check_pairing(&tokenizer, &model)?;
            let images: Vec<RgbImage> = corpus.iter().map(|(img, _)| img.clone()).collect();
            let grids: Vec<TokenGrid> = tokenizer.encode_rgb(&images)?;
            let items: Vec<TrainItem> = grids
                .into_iter()
                .zip(&corpus)
                .map(|(grid, (_, c))| TrainItem {
                    grid,
                    text_ids: model.tokenize(c),
                })
                .collect();
            let mut sink = log_sink(&log)?;
            let (model, report) = train_t2i(model, &items, &cfg.train, |_, s| {
                writeln!(sink, "{}", s.log_line())?;
                Ok(Control::Continue)
            })?;
            sink.flush()?;
            Checkpoint::from_t2i(&model, cfg.seed)?.save(&out)?;
            if let Some(ce) = report.final_eval() {
                eprintln!("final eval masked-ce {ce:.5}");
            }
        }
        Command::Generate {
            models,
            caption,
            sampler,
            out,
            trace,
            tokens,
        } => {
            let (tokenizer, model) = load_models(&models)?;
            let (grid, decode) = generate_tokens(&model, &caption, &sampler.config())?;
            tokenizer.decode_rgb(std::slice::from_ref(&grid))?[0].save(&out)?;
            write_trace(&trace, &decode)?;
            if let Some(p) = tokens {
                grid.save(p)?;
            }
        }
        Command::Edit {
            models,
            image,
            mask,
            strength,
            caption,
            sampler,
            out,
            trace,
        } => {
            let (tokenizer, model) = load_models(&models)?;
            let image = RgbImage::load(&image)?;
            let config = sampler.config();
            let (result, decode) = match (mask, strength) {
                (Some(m), _) => {
                    let mask = GrayImage::load_pgm(m)?;
                    if (mask.width, mask.height) != (image.width, image.height) {
                        return Err(Error::InvalidArgument(format!(
                            "mask is {}×{}, image is {}×{}",
                            mask.width, mask.height, image.width, image.height
                        )));
                    }
                    let request = EditRequest {
                        image,
                        region: mask.to_mask(),
                        caption,
                        sampler: config,
                    };
                    let o = edit(&tokenizer, &model, &request)?;
                    (o.image, o.trace)
                }
                (None, Some(rho)) => {
                    let source = tokenizer.encode_rgb(std::slice::from_ref(&image))?.remove(0);
                    let (grid, t) = edit_mask_free(&model, &source, &caption, rho, &config)?;
                    (tokenizer.decode_rgb(std::slice::from_ref(&grid))?.remove(0), t)
                }
                (None, None) => unreachable!("clap requires --mask or --strength"),
            };
            result.save(&out)?;
            write_trace(&trace, &decode)?;
        }
        Command::Verify {
            suite,
            schedule_table,
            run,
        } => {
            if let Some(spec) = schedule_table {
                let (t, n) = spec
                    .split_once(':')
                    .and_then(|(t, n)| Some((t.parse().ok()?, n.parse().ok()?)))
                    .ok_or_else(|| Error::InvalidArgument(format!("expected STEPS:TOKENS, got {spec:?}")))?;
                print!("{}", cosine_schedule(t, n)?.table());
                return Ok(Outcome::Pass);
            }
            let cfg = run.load()?;
            let suites = Suite::parse_selector(&suite)?;
            let checks = verify::run(&suites, &cfg)?;
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(Outcome::CheckFailed);
            }
        }
    }
    Ok(Outcome::Pass)
}
