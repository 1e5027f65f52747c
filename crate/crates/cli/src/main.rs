use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use contourlm::training::Stage;
use contourlm::Split;
use contourlm_cli as cli;

#[derive(Parser)]
#[command(name = "contourlm", version, about = "Coordinate-token building contour extraction")]
struct Args {
    /// Pipeline config (TOML or JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Sft,
    Dpo,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Sft => Stage::Sft,
            StageArg::Dpo => Stage::Dpo,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/val/test splits under <out>/data.
    GenData,
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Dataset root (default <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Starting checkpoint (default: the previous stage under <out>).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Preference pairs for dpo (default <out>/pairs/pairs.jsonl).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Mine preference pairs with the sft checkpoint before dpo.
        #[arg(long)]
        mine_pairs: bool,
    },
    /// Mine preference pairs on the training split.
    MinePairs {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict the contour inside one box of a source image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// x_min,y_min,x_max,y_max in source pixels.
        #[arg(long)]
        bbox: String,
        /// Also print the raw bracket-syntax token string.
        #[arg(long)]
        tokens: bool,
        /// Write the polygon JSON here as well as to stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Oracle-box evaluation; writes <out>/eval/{result.json,dump.jsonl}.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root (default <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Draw SVG and PNG overlays from an evaluation dump into <out>/render.
    Render {
        #[arg(long)]
        dump: PathBuf,
        /// Dataset root holding the crops to draw under the rings.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn run(args: Args) -> cli::CliResult<()> {
    let out = &args.out;
    match args.cmd {
        Cmd::GenData => {
            let cfg = cli::load_config(args.config.as_deref(), args.seed)?;
            cli::cmd_gen_data(&cfg, out)?;
        }
        Cmd::Train { stage, data, init, pairs, mine_pairs } => {
            let cfg = cli::load_config(args.config.as_deref(), args.seed)?;
            let targs = cli::TrainArgs { data, init, pairs, mine_pairs };
            cli::cmd_train(&cfg, stage.into(), out, &targs)?;
        }
        Cmd::MinePairs { ckpt, data } => {
            let cfg = cli::load_config(args.config.as_deref(), args.seed)?;
            cli::cmd_mine_pairs(&cfg, out, ckpt.as_deref(), data.as_deref())?;
        }
        Cmd::Infer { ckpt, image, bbox, tokens, json } => {
            let bbox = cli::parse_bbox(&bbox)?;
            let res = cli::cmd_infer(&ckpt, &image, &bbox, json.as_deref())?;
            println!("{}", serde_json::to_string(&res.polygon).map_err(contourlm::Error::from)?);
            if tokens {
                println!("{}", res.tokens);
            }
        }
        Cmd::Eval { ckpt, data, split } => {
            let cfg = cli::load_config(args.config.as_deref(), args.seed)?;
            let data = data.unwrap_or_else(|| cli::data_dir(out));
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let res = cli::cmd_eval(&cfg, &ckpt, &data, split, out)?;
            print!("{}", res.table());
        }
        Cmd::Render { dump, data, limit } => {
            let n = cli::cmd_render(&dump, out, limit, data.as_deref())?;
            println!("rendered {n} overlays into {}", out.join("render").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
