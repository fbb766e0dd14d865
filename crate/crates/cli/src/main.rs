use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use softtree_lmc::checkpoint::{config_hash, load_checkpoint, AlignmentFile, FORMAT_VERSION};
use softtree_lmc::data::{synth_gaussian_blobs, synth_xor, write_csv};
use softtree_lmc::evaluation::Split;
use softtree_lmc::experiment::{
    barrier_for_alignment, curves_csv, match_models, prepare_data, write_matrix_outputs, write_merge_outputs,
    write_train_outputs, DataSource, ExperimentConfig,
};
use softtree_lmc::invariance::op_count;
use softtree_lmc::matching::{InvarianceLevel, MatchMethod};
use softtree_lmc::model::{ArchitectureSpec, TreeKind};
use softtree_lmc::oracle::{equivalence_sweep, expansion_check, gradient_check, lap_cross_check, OracleReport};

#[derive(Parser)]
#[command(
    name = "softtree",
    version,
    about = "Align soft tree ensembles and measure linear mode connectivity barriers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and write checkpoints plus training history.
    Train(Common),
    /// Align checkpoint A to checkpoint B and write an alignment file.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Barrier curves: for one aligned checkpoint pair, or for the whole seed matrix.
    Barrier {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires_all = ["b", "alignment"])]
        a: Option<PathBuf>,
        #[arg(long, requires_all = ["a", "alignment"])]
        b: Option<PathBuf>,
        #[arg(long, requires_all = ["a", "b"])]
        alignment: Option<PathBuf>,
    },
    /// Train on the two class-ratio halves of the data, merge and evaluate.
    MergeSplit(Common),
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Run the invariance, gradient and assignment oracles.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named profile used when no config file is given: desk or large.
    #[arg(long)]
    preset: Option<String>,
    /// Numeric CSV with a trailing label column.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Synthetic dataset: blobs or xor.
    #[arg(long)]
    synth: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// nonoblivious, oblivious, dlist or dlist-mod.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    trees: Option<usize>,
    /// wm or am.
    #[arg(long)]
    matching: Option<String>,
    /// Comma-separated subset of naive, perm, full.
    #[arg(long, value_delimiter = ',')]
    invariances: Option<Vec<String>>,
    #[arg(long)]
    lambda_steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds_a: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    seeds_b: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    lr_candidates: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    activation_samples: Option<usize>,
    /// Train A and B on the two class-ratio halves.
    #[arg(long)]
    split_data: bool,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (or file for match).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// blobs or xor.
    #[arg(long, default_value = "blobs")]
    kind: String,
    #[arg(long, default_value_t = 4000)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    features: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Restrict to one architecture.
    #[arg(long)]
    arch: Option<String>,
    /// Restrict to one depth (1 to 3).
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(name: &str) -> Result<TreeKind> {
    TreeKind::from_cli_name(name).ok_or_else(|| anyhow!("unknown architecture {name:?}"))
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            (None, Some(name)) => ExperimentConfig::preset(name).ok_or_else(|| anyhow!("unknown preset {name:?}"))?,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(path) = &self.data {
            c.data = DataSource::Csv {
                path: path.clone(),
                classes: self.classes,
            };
        } else {
            if let Some(kind) = &self.synth {
                c.data = match kind.as_str() {
                    "blobs" => DataSource::default(),
                    "xor" => DataSource::Xor {
                        samples: 4000,
                        features: 6,
                        label_noise: 0.05,
                        seed: 0,
                    },
                    other => bail!("unknown synthetic dataset {other:?}"),
                };
            }
            match &mut c.data {
                DataSource::Blobs {
                    samples,
                    features,
                    classes,
                    ..
                } => {
                    *samples = self.samples.unwrap_or(*samples);
                    *features = self.features.unwrap_or(*features);
                    *classes = self.classes.unwrap_or(*classes);
                }
                DataSource::Xor { samples, features, .. } => {
                    *samples = self.samples.unwrap_or(*samples);
                    *features = self.features.unwrap_or(*features);
                }
                DataSource::Csv { classes, .. } => {
                    if self.classes.is_some() {
                        *classes = self.classes;
                    }
                }
            }
        }
        if let Some(arch) = &self.arch {
            c.arch = parse_kind(arch)?;
        }
        if let Some(m) = &self.matching {
            c.matching = MatchMethod::from_name(m).ok_or_else(|| anyhow!("unknown matching method {m:?}"))?;
        }
        if let Some(levels) = &self.invariances {
            c.invariances = levels
                .iter()
                .map(|l| InvarianceLevel::from_name(l).ok_or_else(|| anyhow!("unknown invariance level {l:?}")))
                .collect::<Result<_>>()?;
        }
        c.split_seed = self.split_seed.unwrap_or(c.split_seed);
        c.depth = self.depth.unwrap_or(c.depth);
        c.trees = self.trees.unwrap_or(c.trees);
        c.lambda_steps = self.lambda_steps.unwrap_or(c.lambda_steps);
        c.seeds_a = self.seeds_a.clone().unwrap_or(c.seeds_a);
        c.seeds_b = self.seeds_b.clone().unwrap_or(c.seeds_b);
        c.learning_rates = self.lr_candidates.clone().unwrap_or(c.learning_rates);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.activation_samples = self.activation_samples.unwrap_or(c.activation_samples);
        c.split_data |= self.split_data;
        c.jobs = self.jobs.unwrap_or(c.jobs);
        c.validate()?;
        Ok(c)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn report_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn cmd_match(common: &Common, a: &Path, b: &Path) -> Result<()> {
    let config = common.config()?;
    let ca = load_checkpoint(a).with_context(|| format!("reading {}", a.display()))?;
    let cb = load_checkpoint(b).with_context(|| format!("reading {}", b.display()))?;
    if ca.params.spec != cb.params.spec {
        bail!("checkpoints have different architectures");
    }
    let level = match config.invariances.as_slice() {
        [level] => *level,
        _ if common.invariances.is_none() => InvarianceLevel::Full,
        _ => bail!("match takes a single invariance level"),
    };
    let data = match config.matching {
        MatchMethod::Am => Some(prepare_data(&config)?),
        MatchMethod::Wm => None,
    };
    let seed = |meta: &softtree_lmc::checkpoint::Meta| meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let sample_seed = softtree_lmc::training::stream_seed(seed(&ca.meta), seed(&cb.meta));
    let file = match_models(&config, data.as_ref(), &ca.params, &cb.params, level, sample_seed)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("alignment.json"));
    let out = if out.is_dir() { out.join("alignment.json") } else { out };
    file.save(&out)?;
    report_files(&[out]);
    Ok(())
}

fn cmd_barrier_pair(common: &Common, a: &Path, b: &Path, alignment: &Path) -> Result<()> {
    let config = common.config()?;
    let ca = load_checkpoint(a).with_context(|| format!("reading {}", a.display()))?;
    let cb = load_checkpoint(b).with_context(|| format!("reading {}", b.display()))?;
    let al = AlignmentFile::load(alignment).with_context(|| format!("reading {}", alignment.display()))?;
    let data = prepare_data(&config)?;
    let (train, test) = barrier_for_alignment(&config, &data, &ca.params, &cb.params, &al)?;
    let seed = |meta: &softtree_lmc::checkpoint::Meta| meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let (sa, sb) = (seed(&ca.meta), seed(&cb.meta));
    let hash = config_hash(&config)?;
    let csv = curves_csv(
        &hash,
        al.method,
        &[
            (sa, sb, al.level, &train, Split::Train),
            (sa, sb, al.level, &test, Split::Test),
        ],
    );
    let summary = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "config_hash": hash,
        "method": al.method,
        "matching": al.level,
        "seed_a": sa,
        "seed_b": sb,
        "train": train,
        "test": test,
    });
    let out = common.out_dir();
    std::fs::create_dir_all(&out)?;
    let (curves_path, summary_path) = (out.join("curves.csv"), out.join("summary.json"));
    std::fs::write(&curves_path, csv)?;
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    println!("train barrier {:.3}  test barrier {:.3}", train.barrier, test.barrier);
    report_files(&[curves_path, summary_path]);
    Ok(())
}

fn cmd_barrier_matrix(common: &Common) -> Result<()> {
    let config = common.config()?;
    let (summary, files) = write_matrix_outputs(&config, &common.out_dir())?;
    for row in &summary.rows {
        println!(
            "{} {:5} {:5} barrier {:.3} ± {:.3}",
            row.method.name(),
            row.matching.name(),
            row.split.name(),
            row.mean,
            row.std
        );
    }
    report_files(&files);
    Ok(())
}

fn cmd_merge_split(common: &Common) -> Result<()> {
    let config = common.config()?;
    let (summary, files) = write_merge_outputs(&config, &common.out_dir())?;
    for p in &summary.pairs {
        println!(
            "seeds {}/{}: endpoints {:.2} / {:.2}, best interior {:.2} at lambda {:.3}, full-data reference {:.2}",
            p.seed_a,
            p.seed_b,
            p.curve.endpoint_a,
            p.curve.endpoint_b,
            p.best_interior.1,
            p.best_interior.0,
            p.reference_accuracy
        );
    }
    println!(
        "interior beats both endpoints in {} of {} pairs",
        summary.interior_wins,
        summary.pairs.len()
    );
    report_files(&files);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let data = match args.kind.as_str() {
        "blobs" => synth_gaussian_blobs(args.samples, args.features, args.classes, args.separation, args.seed)?,
        "xor" => synth_xor(args.samples, args.features, args.noise, args.seed)?,
        other => bail!("unknown synthetic dataset {other:?}"),
    };
    write_csv(&data, &args.out)?;
    report_files(std::slice::from_ref(&args.out));
    Ok(())
}

/// Returns whether every oracle passed.
fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let kinds = match &args.arch {
        Some(name) => vec![parse_kind(name)?],
        None => TreeKind::ALL.to_vec(),
    };
    let depths = match args.depth {
        Some(d) if (1..=3).contains(&d) => vec![d],
        Some(d) => bail!("verify supports depths 1 to 3, got {d}"),
        None => vec![1, 2, 3],
    };
    let mut reports: Vec<OracleReport> = Vec::new();
    for &kind in &kinds {
        for &depth in &depths {
            let spec = ArchitectureSpec::new(kind, depth, 1, 4, 3)?;
            let mut sweep = equivalence_sweep(&spec, args.trials, args.seed)?;
            sweep.name = format!("{} (U={})", sweep.name, op_count(&spec));
            reports.push(sweep);
            if kind == TreeKind::Oblivious {
                reports.push(expansion_check(&spec, 100, args.seed)?);
            }
        }
        let grad_spec = ArchitectureSpec::new(kind, 2, 2, 3, 2)?;
        reports.push(gradient_check(&grad_spec, 8, args.seed, 1e-6, 1e-6)?);
    }
    reports.push(lap_cross_check(100, 6, args.seed)?);
    for r in &reports {
        println!("{r}");
    }
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&reports)?)?;
        println!("wrote {}", out.display());
    }
    Ok(reports.iter().all(OracleReport::passed))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train(common) => {
            let files = write_train_outputs(&common.config()?, &common.out_dir())?;
            report_files(&files);
        }
        Command::Match { common, a, b } => cmd_match(common, a, b)?,
        Command::Barrier {
            common,
            a: Some(a),
            b: Some(b),
            alignment: Some(al),
        } => cmd_barrier_pair(common, a, b, al)?,
        Command::Barrier { common, .. } => cmd_barrier_matrix(common)?,
        Command::MergeSplit(common) => cmd_merge_split(common)?,
        Command::Synth(args) => cmd_synth(args)?,
        Command::Verify(args) => {
            if !cmd_verify(args)? {
                eprintln!("verification failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
