use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zonescm::did::{regression_table, trends_table};
use zonescm::inference::PlaceboFit;
use zonescm::pipeline::{
    balance_csv, composition_csv, ratio_csv, run, simulate, validate, Analysis, OutputSet, PipelineError, RunConfig,
};
use zonescm::scm::effect_table;
use zonescm::synthgen::GeneratorSpec;

#[derive(Debug, Parser)]
#[command(
    name = "zonescm",
    version,
    about = "Border-region synthetic control and DiD analysis"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel fits.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check inputs and list every violation.
    Validate,
    /// Print the nested border regions.
    Regions,
    /// Fit the synthetic control for one depth.
    FitScm {
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
    /// In-time placebo for one depth.
    Placebo {
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// Defaults to the first configured placebo year.
        #[arg(long)]
        placebo_year: Option<i32>,
    },
    /// Donor placebo sweep and RMSPE ratio test for one depth.
    Permute {
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
    /// Difference-in-differences table for every depth.
    FitDid,
    /// Pre-period parallel-trends test for every depth.
    TrendsTest,
    /// Full analysis with all outputs and a manifest.
    Run {
        /// Replaces the configured in-time placebo years.
        #[arg(long)]
        placebo_year: Vec<i32>,
    },
    /// Generate a synthetic dataset with known effects.
    Simulate {
        /// Generator spec (TOML); defaults are used when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global pool is built once");
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    match cli.threads {
        Some(_) => config.threads = cli.threads,
        None => {
            if let Some(n) = config.threads {
                // a config file may also pin the worker count
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    Ok(config)
}

/// Writes `out` when `--out` was given.
fn maybe_write(cli: &Cli, out: &OutputSet) -> Result<(), PipelineError> {
    match &cli.out {
        Some(dir) => out.write(dir),
        None => Ok(()),
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode, PipelineError> {
    match &cli.command {
        Command::Simulate { spec } => {
            let mut spec = match spec {
                Some(path) => read_spec(path)?,
                None => GeneratorSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let truth = simulate(&spec, &dir)?;
            println!(
                "wrote {} ({} units, {} treated)",
                dir.display(),
                truth.counterfactual.len(),
                truth.treated_units.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate => {
            let report = validate(&load_config(cli)?)?;
            print!("{report}");
            Ok(if report.is_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Run { placebo_year } => {
            let mut config = load_config(cli)?;
            if !placebo_year.is_empty() {
                config.inference.placebo_years = placebo_year.clone();
            }
            let summary = run(config)?;
            println!("wrote {} files to {}", summary.files.len(), summary.out_dir.display());
            println!("config hash {}", summary.config_hash);
            for d in &summary.depths {
                let gaps: Vec<String> = d.gaps.iter().map(|(y, g)| format!("{y}: {g:.4}")).collect();
                let p = d.pseudo_p.map(|p| format!("{p:.3}")).unwrap_or_else(|| "-".into());
                println!(
                    "border{}: gaps [{}], pre-RMSPE {:.4}, pseudo-p {}, DiD ATET {:.4}",
                    d.depth,
                    gaps.join(", "),
                    d.rmspe_pre,
                    p,
                    d.atet
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        command => {
            let analysis = Analysis::prepare(load_config(cli)?)?;
            analyze(cli, command, &analysis)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn read_spec(path: &Path) -> Result<GeneratorSpec, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let spec: GeneratorSpec =
        toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

fn analyze(cli: &Cli, command: &Command, analysis: &Analysis) -> Result<(), PipelineError> {
    let mut out = OutputSet::default();
    match command {
        Command::Regions => {
            for r in analysis.regions.records() {
                println!("border{}_{}: {} units", r.depth, r.side, r.members.len());
            }
            out.add_json("regions.json", &analysis.regions.records());
        }
        Command::FitScm { depth } => {
            let fit = analysis.fit(*depth)?;
            let table = effect_table(&fit).to_csv();
            print!("{table}");
            out.add_json("fit.json", &fit);
            out.add("path.csv", fit.path_csv());
            out.add("effects.csv", table);
            out.add("balance.csv", balance_csv(&fit));
            out.add(
                "composition.csv",
                composition_csv(&fit, &analysis.panel, analysis.config.scm.composition_threshold),
            );
        }
        Command::Placebo { depth, placebo_year } => {
            let year = placebo_year
                .or_else(|| analysis.config.inference.placebo_years.first().copied())
                .ok_or_else(|| PipelineError::Config("no placebo year given".into()))?;
            let placebo: PlaceboFit = analysis.placebo(*depth, year)?;
            println!(
                "placebo {year}, {}: max |gap| {:.6} over {}",
                placebo.fit.treated_label,
                placebo.max_abs_gap,
                placebo
                    .window
                    .map(|w| format!("{}..={}", w.first, w.last))
                    .unwrap_or_else(|| "an empty window".into())
            );
            out.add_json(format!("placebo_{year}.json"), &placebo);
            out.add(format!("placebo_{year}_path.csv"), placebo.fit.path_csv());
        }
        Command::Permute { depth } => {
            let fit = analysis.fit(*depth)?;
            let placebos = analysis.donor_placebos(&analysis.donor_pool(*depth))?;
            let test = analysis.ratio_test(&fit, &placebos);
            println!(
                "{}: ratio {:.4}, rank {} of {}, pseudo-p {:.4}",
                test.treated_label, test.ratio, test.rank, test.count, test.pseudo_p
            );
            out.add_json("ratio_test.json", &test);
            out.add("ratio_test.csv", ratio_csv(&test));
        }
        Command::FitDid => {
            let mut columns = Vec::new();
            let mut placebos = Vec::new();
            for depth in analysis.depths() {
                let did = analysis.did(depth)?;
                columns.push((format!("Border {depth}"), did.plain.clone()));
                if let Some(f) = &did.with_controls {
                    columns.push((format!("Border {depth} + controls"), f.clone()));
                }
                if let Some(p) = &did.placebo {
                    placebos.push((format!("Border {depth}"), p.clone()));
                }
                out.add_json(format!("border{depth}/did.json"), &did);
            }
            let table = regression_table(&columns.iter().map(|(t, f)| (t.as_str(), f)).collect::<Vec<_>>());
            print!("{table}");
            out.add("did_table.txt", table);
            if !placebos.is_empty() {
                let table = regression_table(&placebos.iter().map(|(t, f)| (t.as_str(), f)).collect::<Vec<_>>());
                println!(
                    "\nPlacebo (post from {})",
                    analysis.config.did.placebo_post_year.unwrap_or_default()
                );
                print!("{table}");
                out.add("did_placebo_table.txt", table);
            }
        }
        Command::TrendsTest => {
            let mut columns = Vec::new();
            for depth in analysis.depths() {
                columns.push((format!("Border {depth}"), analysis.did(depth)?.trends));
            }
            let table = trends_table(&columns.iter().map(|(t, f)| (t.as_str(), f)).collect::<Vec<_>>());
            print!("{table}");
            out.add("trends_table.txt", table);
        }
        Command::Validate | Command::Run { .. } | Command::Simulate { .. } => unreachable!("handled by dispatch"),
    }
    maybe_write(cli, &out)
}
