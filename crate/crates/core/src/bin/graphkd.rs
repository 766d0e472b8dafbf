use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use graphkd::bench::{results_csv, run_benchmark};
use graphkd::checks::{run_checks, GRADCHECK_TOL};
use graphkd::config::{load_config, load_dataset, RunConfig};
use graphkd::data::{prepare, PreparedData};
use graphkd::error::{Error, Result};
use graphkd::gnn::{load_checkpoint, save_checkpoint, Model};
use graphkd::graph::{format_graph, Graph};
use graphkd::simrep::{similarity_csv, similarity_rows};
use graphkd::synth::{synth_molgraphs, synth_sbm};
use graphkd::train::{distill, evaluate, extract_embeddings, train_supervised, SplitSel};

#[derive(Parser)]
#[command(name = "graphkd", version, about = "GNN knowledge distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Sbm,
    Mol,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

impl From<Split> for SplitSel {
    fn from(s: Split) -> SplitSel {
        match s {
            Split::Train => SplitSel::Train,
            Split::Valid => SplitSel::Valid,
            Split::Test => SplitSel::Test,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset: graph files plus a manifest.
    GenData {
        #[arg(value_enum)]
        kind: DataKind,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// SBM: number of blocks.
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        /// SBM: nodes per block.
        #[arg(long, default_value_t = 50)]
        nodes_per_block: usize,
        /// SBM: within-block edge probability.
        #[arg(long, default_value_t = 0.1)]
        p_in: f64,
        /// SBM: cross-block edge probability.
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        /// SBM: feature dimension.
        #[arg(long, default_value_t = 8)]
        d_in: usize,
        /// SBM: feature noise scale.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        /// Mol: number of graphs.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Mol: minimum nodes per graph.
        #[arg(long, default_value_t = 6)]
        min_nodes: usize,
        /// Mol: maximum nodes per graph.
        #[arg(long, default_value_t = 12)]
        max_nodes: usize,
        /// Mol: number of classes.
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
    /// Train the teacher model from the config and save a checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a student against a teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Teacher checkpoint; overrides the config's teacher.checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Method string such as kd, gcrd, kd+gcrd; overrides the config.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-seed benchmark over all configured methods.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Explicit seed list; required (no silent nondeterminism).
        #[arg(long, required = true, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Write the per-cell results as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Representational similarity of student checkpoints vs a teacher.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        teacher: PathBuf,
        /// Student checkpoints, one CSV row each.
        students: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient-check the registered losses and layers.
    Gradcheck {
        /// Run the full registry.
        #[arg(long, conflicts_with = "loss", required_unless_present = "loss")]
        all: bool,
        /// Check items whose name starts with this prefix, e.g. gcrd or lsp/rbf.
        #[arg(long)]
        loss: Option<String>,
        /// Explicit seed; required (no silent nondeterminism).
        #[arg(long, required = true)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData {
            kind,
            out_dir,
            seed,
            blocks,
            nodes_per_block,
            p_in,
            p_out,
            d_in,
            noise,
            count,
            min_nodes,
            max_nodes,
            classes,
        } => {
            let graphs = match kind {
                DataKind::Sbm => vec![synth_sbm(blocks, nodes_per_block, p_in, p_out, d_in, noise, seed)?],
                DataKind::Mol => synth_molgraphs(count, min_nodes, max_nodes, classes, seed)?,
            };
            write_dataset(&graphs, &out_dir)?;
            print_dataset_summary(&graphs, &out_dir);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainTeacher {
            config,
            overrides,
            seed,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let data = prepare_data(&cfg, &config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let (model, history) = train_supervised(cfg.teacher.spec.clone(), &data, cfg.teacher_optim(), &cfg.train, seed)?;
            save_checkpoint(&model, &out)?;
            let test = evaluate(&model, &data, SplitSel::Test)?;
            println!(
                "teacher: best epoch {} valid {:.4} test {:.4} params {}",
                history.best_epoch,
                history.best_valid,
                test,
                model.count_params()
            );
            println!("checkpoint written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Distill {
            config,
            overrides,
            teacher,
            method,
            seed,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let data = prepare_data(&cfg, &config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let mut dspec = cfg.distill.clone();
            if let Some(m) = method {
                dspec.method = m.parse()?;
            }
            let teacher_path = teacher.or_else(|| cfg.teacher.checkpoint.clone());
            let teacher_model = match teacher_path {
                Some(p) => checked_checkpoint(&p, &data)?,
                None => {
                    eprintln!("no teacher checkpoint given, training the teacher first");
                    train_supervised(cfg.teacher.spec.clone(), &data, cfg.teacher_optim(), &cfg.train, seed)?.0
                }
            };
            let out2 = distill(&teacher_model, cfg.student.spec.clone(), &dspec, &data, &cfg.optim, &cfg.train, seed)?;
            let (student, history) = (out2.model, out2.history);
            let test = evaluate(&student, &data, SplitSel::Test)?;
            println!(
                "student ({}): best epoch {} valid {:.4} test {:.4} params {}",
                dspec.method,
                history.best_epoch,
                history.best_valid,
                test,
                student.count_params()
            );
            if let Some(out) = out {
                save_checkpoint(&student, &out)?;
                println!("checkpoint written to {}", out.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench {
            config,
            overrides,
            seeds,
            csv,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            cfg.seeds = seeds;
            let data = prepare_data(&cfg, &config)?;
            let report = run_benchmark(&cfg, &data)?;
            for e in &report.errors {
                eprintln!("warning: {e}");
            }
            if let Some(path) = csv {
                std::fs::write(&path, results_csv(&report.cells))?;
                println!("results written to {}", path.display());
            }
            print!("{}", report.summary);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Analyze {
            config,
            overrides,
            teacher,
            students,
            split,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let data = prepare_data(&cfg, &config)?;
            let teacher_model = checked_checkpoint(&teacher, &data)?;
            let (teacher_set, edges) = extract_embeddings(&teacher_model, &data, split.into(), "teacher")?;
            let mut student_sets = Vec::new();
            for path in &students {
                let model = checked_checkpoint(path, &data)?;
                let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
                let (set, _) = extract_embeddings(&model, &data, split.into(), &label)?;
                student_sets.push(set);
            }
            let rows = similarity_rows(&teacher_set, &student_sets, &edges)?;
            let csv = similarity_csv(&rows);
            match out {
                Some(path) => {
                    std::fs::write(&path, csv)?;
                    println!("similarity table written to {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { all, loss, seed } => {
            let filter = if all { None } else { loss.as_deref() };
            let results = run_checks(filter, seed)?;
            let mut ok = true;
            for r in &results {
                let status = if r.pass() { "PASS" } else { "FAIL" };
                println!("{status} {:<28} max rel err {:.3e}", r.name, r.max_rel_err);
                ok &= r.pass();
            }
            println!(
                "{}/{} checks under tolerance {GRADCHECK_TOL:.0e}",
                results.iter().filter(|r| r.pass()).count(),
                results.len()
            );
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn prepare_data(cfg: &RunConfig, config_path: &Path) -> Result<PreparedData> {
    let base = config_path.parent();
    let graphs = load_dataset(&cfg.dataset, base)?;
    prepare(graphs, &cfg.dataset.split)
}

fn checked_checkpoint(path: &Path, data: &PreparedData) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.d_in != data.feature_dim() {
        return Err(Error::Checkpoint(format!(
            "{}: input width {} does not match dataset feature dim {}",
            path.display(),
            model.d_in,
            data.feature_dim()
        )));
    }
    Ok(model)
}

fn write_dataset(graphs: &[Graph], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = String::new();
    for (i, g) in graphs.iter().enumerate() {
        let name = format!("g{i:04}.graph");
        std::fs::write(out_dir.join(&name), format_graph(g))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    std::fs::write(out_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn print_dataset_summary(graphs: &[Graph], out_dir: &Path) {
    let nodes: usize = graphs.iter().map(|g| g.n).sum();
    let edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
    let classes = graphs.iter().map(|g| g.classes).max().unwrap_or(0);
    println!(
        "wrote {} graph(s) to {}: {} nodes, {} directed edges, {} classes, feature dim {}, avg nodes/graph {:.1}",
        graphs.len(),
        out_dir.display(),
        nodes,
        edges,
        classes,
        graphs.first().map(|g| g.feature_dim()).unwrap_or(0),
        nodes as f64 / graphs.len().max(1) as f64
    );
}
