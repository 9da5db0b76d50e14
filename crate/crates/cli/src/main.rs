//! Batch driver for the solver: uniform and adaptive studies with report
//! emission, plus the verification suite as a subcommand.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bihdg::adapt::AdaptiveConfig;
use bihdg::estimators::{EtaTildeMode, NormFlavor};
use bihdg::forms::PenaltyConfig;
use bihdg::problems::Example;
use bihdg::study::{
    adaptive_study, emit_adaptive_report, emit_uniform_report, uniform_study, AdaptiveStudySpec,
    DriverKind, DtLaw, UniformStudySpec,
};
use bihdg::verify::run_all_with;

#[derive(Parser)]
#[command(name = "bihdg", version, about = "Adaptive DG solver for u_t + Δ²u = f on the unit square")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a study and write CSV/JSON reports into --out
    Solve(Box<SolveArgs>),
    /// Run every verification check; exits nonzero if any fail
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExampleArg {
    U1,
    U2,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Uniform,
    AdaptiveImplicit,
    AdaptiveExplicit,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtLawArg {
    H3,
    H2,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    LinfL2,
    L2L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum EtaArg {
    PerStep,
    CommonCoarsening,
}

fn parse_levels(s: &str) -> Result<(u8, u8), String> {
    let parse_one = |t: &str| t.trim().parse::<u8>().map_err(|e| e.to_string());
    if let Some((a, b)) = s.split_once("..=").or_else(|| s.split_once("..")) {
        let (lo, hi) = (parse_one(a)?, parse_one(b)?);
        if lo > hi {
            return Err(format!("empty level range {lo}..{hi}"));
        }
        Ok((lo, hi))
    } else {
        let v = parse_one(s)?;
        Ok((v, v))
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Manufactured solution to run
    #[arg(long, value_enum)]
    example: ExampleArg,
    /// Polynomial degree (2 or 3)
    #[arg(long, default_value_t = 2)]
    degree: usize,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Mesh level range A..B for uniform sweeps; A is the adaptive start level
    #[arg(long, default_value = "1..4", value_parser = parse_levels)]
    levels: (u8, u8),
    /// Step-size law of uniform runs (λ = h³ or h²)
    #[arg(long, value_enum, default_value_t = DtLawArg::H2)]
    dt_law: DtLawArg,
    /// Jump-penalty coefficient
    #[arg(long, default_value_t = 20.0)]
    sigma0: f64,
    /// Gradient-jump penalty coefficient
    #[arg(long, default_value_t = 20.0)]
    xi0: f64,
    /// Norm flavor driving acceptance and the accumulator report
    #[arg(long, value_enum, default_value_t = NormArg::LinfL2)]
    norm: NormArg,
    #[arg(long, default_value_t = 1e-2)]
    tol_time: f64,
    #[arg(long, default_value_t = 2.5e-3)]
    tol_time_min: f64,
    #[arg(long, default_value_t = 5e-3)]
    tol_space: f64,
    #[arg(long, default_value_t = 0.1)]
    tol_coarse: f64,
    /// Interpolation tolerance for the initial iterate
    #[arg(long, default_value_t = 5e-3)]
    tol_initial: f64,
    /// First step size of the adaptive drivers
    #[arg(long, default_value_t = 1e-2)]
    lambda0: f64,
    /// Final time
    #[arg(long = "T", default_value_t = 1.0)]
    final_time: f64,
    /// How the extra space term of the time estimator is evaluated
    #[arg(long, value_enum, default_value_t = EtaArg::PerStep)]
    eta_tilde: EtaArg,
    /// Output directory for the reports
    #[arg(long)]
    out: PathBuf,
    /// Skip uniform levels whose spatial dof count exceeds this cap
    #[arg(long, default_value_t = usize::MAX)]
    max_dofs: usize,
    /// Level range for the matched-error uniform pairing of adaptive runs
    /// (defaults to --levels); --no-pair disables the comparison
    #[arg(long, value_parser = parse_levels)]
    pair: Option<(u8, u8)>,
    #[arg(long)]
    no_pair: bool,
}

fn solve(args: &SolveArgs) -> bihdg::error::Result<()> {
    let example = match args.example {
        ExampleArg::U1 => Example::U1,
        ExampleArg::U2 => Example::U2,
    };
    let dt_law = match args.dt_law {
        DtLawArg::H3 => DtLaw::H3,
        DtLawArg::H2 => DtLaw::H2,
    };
    let norm = match args.norm {
        NormArg::LinfL2 => NormFlavor::LinfL2,
        NormArg::L2L2 => NormFlavor::L2L2,
    };
    let eta_tilde = match args.eta_tilde {
        EtaArg::PerStep => EtaTildeMode::PerStep,
        EtaArg::CommonCoarsening => EtaTildeMode::CommonCoarsening,
    };
    let pen = PenaltyConfig {
        sigma0: args.sigma0,
        xi0: args.xi0,
    };

    match args.mode {
        ModeArg::Uniform => {
            let spec = UniformStudySpec {
                example,
                degree: args.degree,
                levels: args.levels,
                dt_law,
                pen,
                final_time: args.final_time,
                norm,
                eta_tilde,
                max_dofs: args.max_dofs,
            };
            let report = uniform_study(&spec)?;
            if report.truncated {
                eprintln!(
                    "warning: level range cut short by the {}-dof cap ({} of {} levels run)",
                    args.max_dofs,
                    report.rows.len(),
                    args.levels.1 - args.levels.0 + 1
                );
            }
            emit_uniform_report(&report, &spec, &args.out)?;
            println!("level     err_linf_l2       err_l2_l2    eoc_inf     eoc_2");
            for row in &report.rows {
                println!(
                    "{:>5}  {:>14.6e}  {:>14.6e}  {:>9.3}  {:>8.3}",
                    row.level, row.err_linf_l2, row.err_l2_l2, row.eoc_linf, row.eoc_l2
                );
            }
        }
        ModeArg::AdaptiveImplicit | ModeArg::AdaptiveExplicit => {
            let kind = match args.mode {
                ModeArg::AdaptiveImplicit => DriverKind::Implicit,
                _ => DriverKind::Explicit,
            };
            let config = AdaptiveConfig {
                tol_time: args.tol_time,
                tol_time_min: args.tol_time_min,
                tol_space: args.tol_space,
                tol_coarse: args.tol_coarse,
                tol_initial: args.tol_initial,
                lambda0: args.lambda0,
                final_time: args.final_time,
                eta_tilde,
                norm,
                ..AdaptiveConfig::default()
            };
            let spec = AdaptiveStudySpec {
                example,
                degree: args.degree,
                kind,
                start_level: args.levels.0,
                config,
                pen,
                pairing_levels: if args.no_pair {
                    None
                } else {
                    Some(args.pair.unwrap_or(args.levels))
                },
                dt_law,
            };
            let report = adaptive_study(&spec)?;
            emit_adaptive_report(&report, &args.out)?;
            let (linf, l2) = report.log.final_errors();
            println!(
                "{} steps ({} rejected), errors {:.6e} / {:.6e}, total dofs {}",
                report.log.entries.len() - 1,
                report.log.rejected_steps,
                linf,
                l2,
                report.log.total_dofs
            );
            match &report.paired {
                Some(p) if p.matched => println!(
                    "matched uniform run: level {}, step {:.3e}, total dofs {} (ratio {:.3})",
                    p.level, p.lambda, p.total_dofs, p.dof_ratio
                ),
                Some(p) => println!(
                    "pairing missed the error target (closest uniform error {:.6e}); ratio not comparable",
                    p.err_linf_l2
                ),
                None => {}
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve(args) => match solve(&args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::Verify => {
            let results = run_all_with(|r| println!("{}", r.line()));
            if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
