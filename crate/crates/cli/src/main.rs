use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pfnas::data::Partition;
use pfnas::federation::{make_partition, run_federation};
use pfnas::manifest::{read_manifest, DatasetSource, ExperimentManifest};
use pfnas::report::{emit_reports, summarize};
use pfnas::space::{export_dot, ArchMask, CellKind, EDGES_PER_CELL};
use pfnas::trainer::Mode;
use pfnas::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pfnas",
    version,
    about = "Architecture-personalized federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Federated training with private per-client architecture search.
    Run(Common),
    /// A baseline method on the same data and partition.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Print a saved mask (JSON) as DOT, or check and print a DOT file.
    Inspect { path: PathBuf },
    /// Draw the non-IID partition and save it as JSON.
    Partition(Common),
}

#[derive(Args)]
struct Common {
    /// TOML manifest; documented defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// spider | ditto | local-adapt | fedavg
    #[arg(long)]
    mode: Option<Mode>,
    /// synthetic | cifar10:<path> | cifar100:<path>
    #[arg(long)]
    dataset: Option<DatasetSource>,
}

impl Common {
    fn manifest(&self) -> Result<ExperimentManifest> {
        let mut m = match &self.config {
            Some(p) => read_manifest(p)?,
            None => ExperimentManifest::default(),
        };
        if let Some(s) = self.seed {
            m.run.seed = s;
        }
        if let Some(o) = &self.out {
            m.run.out = o.clone();
        }
        if let Some(mode) = self.mode {
            m.run.mode = mode;
        }
        if let Some(d) = &self.dataset {
            m.dataset.source = d.clone();
        }
        m.validate(None)?;
        Ok(m)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(m: &ExperimentManifest) -> Result<()> {
    let data = m.load_dataset()?;
    let fixed_mask = match &m.trainer.fixed_mask {
        Some(p) => Some(ArchMask::from_json(&read(p)?)?),
        None => None,
    };
    let cfg = m.run_config(fixed_mask);
    let partition = match &m.partition.manifest {
        Some(p) => Partition::from_json(&read(p)?)?,
        None => make_partition(&cfg, &data)?,
    };
    let output = run_federation(&cfg, &data, &partition)?;
    let out = &m.run.out;
    emit_reports(&output, out)?;
    write(&out.join("config.toml"), &m.to_toml())?;
    write(&out.join("partition.json"), &partition.to_json())?;
    let s = summarize(&output);
    match (s.mean_accuracy, s.std_accuracy, s.mean_flops) {
        (Some(acc), Some(std), Some(flops)) => println!(
            "{}: accuracy {:.4} +- {:.4}, mean FLOPs {:.0}, reports in {}",
            s.method,
            acc,
            std,
            flops,
            out.display()
        ),
        _ => println!("{}: no rounds run, reports in {}", s.method, out.display()),
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "dot") {
        if !text.contains("digraph") {
            return Err(Error::Format(format!("{}: not a DOT digraph", path.display())));
        }
        print!("{text}");
        return Ok(());
    }
    let mask = ArchMask::from_json(&text)?;
    for kind in CellKind::ALL {
        println!(
            "{} cell: {} of {EDGES_PER_CELL} edges finalized",
            kind.name(),
            mask.finalized_edges(kind)
        );
    }
    print!("{}", export_dot(&mask));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => run(&c.manifest()?),
        Command::Baseline { common } => {
            let m = common.manifest()?;
            if m.run.mode == Mode::Spider {
                return Err(Error::Usage(
                    "baseline needs --mode ditto, local-adapt or fedavg".into(),
                ));
            }
            run(&m)
        }
        Command::Inspect { path } => inspect(&path),
        Command::Partition(c) => {
            let m = c.manifest()?;
            let data = m.load_dataset()?;
            let partition = make_partition(&m.run_config(None), &data)?;
            create_dir(&m.run.out)?;
            let path = m.run.out.join("partition.json");
            write(&path, &partition.to_json())?;
            let sizes: Vec<String> = partition.clients.iter().map(|c| c.len().to_string()).collect();
            println!("client sizes {} written to {}", sizes.join(" "), path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
