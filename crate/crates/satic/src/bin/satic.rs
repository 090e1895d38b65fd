//! Thin command-line front end over `satic::pipeline`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use satic::pipeline::{
    cmd_ablate, cmd_bench, cmd_decode, cmd_distill, cmd_eval, cmd_gen_data, cmd_train_satic,
    cmd_train_teacher, data_root, DataPaths, RunConfig,
};
use satic::Result;

#[derive(Parser)]
#[command(
    name = "satic",
    about = "Semi-autoregressive image captioning laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct TrainFlags {
    /// Data root (default: $SATIC_DATA_ROOT or ./data).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Run directory (default: <data-root>/runs/<name>).
    #[arg(long)]
    run: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model size profile: desk or paper.
    #[arg(long)]
    profile: Option<String>,
    /// Tokens decoded per model call.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs_xe: Option<u64>,
    #[arg(long)]
    epochs_sc: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak cross-entropy learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Self-critical learning rate (constant).
    #[arg(long)]
    sc_lr: Option<f64>,
    /// Warmup steps; 0 keeps the rate constant.
    #[arg(long)]
    warmup: Option<usize>,
    /// Self-critical samples per item.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Train on the distilled dataset.
    #[arg(long)]
    seqkd: bool,
    /// Initialize weights from the teacher checkpoint.
    #[arg(long)]
    weight_init: bool,
    #[arg(long)]
    scheduled_sampling: bool,
    /// Teacher run directory or checkpoint (for --weight-init).
    #[arg(long)]
    teacher: Option<PathBuf>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.profile {
            cfg.profile = v.clone();
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.beam_width {
            cfg.beam_width = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs_xe {
            cfg.epochs_xe = v;
        }
        if let Some(v) = self.epochs_sc {
            cfg.epochs_sc = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.sc_lr {
            cfg.sc_lr = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup = v;
        }
        if let Some(v) = self.n_samples {
            cfg.n_samples = v;
        }
        cfg.seqkd |= self.seqkd;
        cfg.weight_init |= self.weight_init;
        cfg.scheduled_sampling |= self.scheduled_sampling;
        cfg.validate()?;
        Ok(cfg)
    }

    fn roots(&self, default_run_name: &str) -> (PathBuf, PathBuf) {
        let data = data_root(self.data_root.clone());
        let run = self
            .run
            .clone()
            .unwrap_or_else(|| DataPaths::new(data.clone()).runs().join(default_run_name));
        (data, run)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus (train/val/test + vocabulary).
    GenData {
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n_items: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the K=1 autoregressive teacher.
    TrainTeacher(TrainFlags),
    /// Replace training references with teacher beam captions.
    Distill {
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Teacher run directory or checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam_width: usize,
    },
    /// Train a SATIC model at the chosen K.
    TrainSatic(TrainFlags),
    /// Decode a split into caption JSONL.
    Decode {
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long, default_value_t = 25)]
        batch_size: usize,
    },
    /// Score a decoded split against its references.
    Eval {
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Latency benchmark across K and batch sizes.
    Bench {
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 6])]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 8, 16, 32])]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        beam_width: usize,
        /// Test items to time.
        #[arg(long, default_value_t = 32)]
        limit: usize,
        /// Untimed warmup decodes.
        #[arg(long, default_value_t = 2)]
        warmup_decodes: usize,
    },
    /// Train and evaluate the K x beam-width x {seqkd, weight-init} grid.
    Ablate {
        #[command(flatten)]
        train: TrainFlags,
        /// Output directory (default: <data-root>/runs/ablation).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 6])]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 3])]
        bws: Vec<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            data_root: dr,
            n_items,
            seed,
        } => cmd_gen_data(&data_root(dr), n_items, seed),
        Cmd::TrainTeacher(flags) => {
            let cfg = flags.resolve()?;
            let (data, run) = flags.roots("teacher");
            cmd_train_teacher(&data, &run, cfg)
        }
        Cmd::TrainSatic(flags) => {
            let cfg = flags.resolve()?;
            let (data, run) = flags.roots(&format!("satic-k{}", cfg.k));
            let default_teacher = DataPaths::new(data.clone()).runs().join("teacher");
            let teacher = flags.teacher.clone().or_else(|| {
                (cfg.weight_init && default_teacher.exists()).then_some(default_teacher)
            });
            cmd_train_satic(&data, &run, cfg, teacher.as_deref())
        }
        Cmd::Distill {
            data_root: dr,
            teacher,
            beam_width,
        } => {
            let data = data_root(dr);
            let teacher = teacher
                .unwrap_or_else(|| DataPaths::new(data.clone()).runs().join("teacher"));
            cmd_distill(&data, &teacher, beam_width)
        }
        Cmd::Decode {
            data_root: dr,
            run,
            split,
            beam_width,
            batch_size,
        } => cmd_decode(&data_root(dr), &run, &split, beam_width, batch_size).map(|_| ()),
        Cmd::Eval {
            data_root: dr,
            run,
            split,
            beam_width,
        } => cmd_eval(&data_root(dr), &run, &split, beam_width).map(|_| ()),
        Cmd::Bench {
            data_root: dr,
            run,
            ks,
            batch_sizes,
            beam_width,
            limit,
            warmup_decodes,
        } => cmd_bench(
            &data_root(dr),
            &run,
            &ks,
            &batch_sizes,
            beam_width,
            limit,
            warmup_decodes,
        )
        .map(|_| ()),
        Cmd::Ablate { train, out, ks, bws } => {
            let cfg = train.resolve()?;
            let data = data_root(train.data_root.clone());
            let out =
                out.unwrap_or_else(|| DataPaths::new(data.clone()).runs().join("ablation"));
            cmd_ablate(&data, &out, cfg, &ks, &bws).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
