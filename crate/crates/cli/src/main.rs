use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sctp_dc::bench::config::Scenario;
use sctp_dc::bench::{
    run_experiment, run_loss_sweep, BenchError, ConfigError, Outcome, ScenarioConfig,
};

/// Deterministic SCTP/TCP data-center benchmark on a simulated network.
#[derive(Parser, Debug)]
#[command(name = "sctpdc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and print its CSV (or write it with --csv).
    Run(Opts),
    /// Loss sweep over --drop-list for every mode; prints the sweep CSV.
    Sweep(Opts),
    /// Run one scenario and print a human-readable report.
    Report(Opts),
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// bulk_12k | small_128b | multistream | scaling | loss_sweep | failover
    #[arg(long)]
    scenario: Option<String>,
    /// tcp | sctp
    #[arg(long)]
    protocol: Option<String>,
    /// per-packet | lk-double | per-k:<k> | delayed:<ms>
    #[arg(long)]
    sack_policy: Option<String>,
    /// Go-back-N acknowledgments instead of selective ones.
    #[arg(long)]
    gbn: bool,
    /// Disable the Nagle-style hold of sub-MTU data.
    #[arg(long)]
    no_delay: bool,
    /// legacy | optimized
    #[arg(long)]
    copy_mode: Option<String>,
    /// Per-packet drop probability.
    #[arg(long, conflicts_with = "drop_list")]
    drop: Option<String>,
    /// Comma-separated drop probabilities for sweeps.
    #[arg(long)]
    drop_list: Option<String>,
    /// Link rate in bits per second (k/m/g suffixes).
    #[arg(long)]
    bandwidth: Option<String>,
    /// Round-trip propagation delay in microseconds.
    #[arg(long)]
    rtt_us: Option<String>,
    /// Receive window in bytes (k/m suffixes).
    #[arg(long)]
    rwnd: Option<String>,
    /// Maximum burst size in packets.
    #[arg(long)]
    mbs: Option<String>,
    /// Streams per association.
    #[arg(long)]
    streams: Option<String>,
    /// Associations (or TCP connections).
    #[arg(long)]
    assocs: Option<String>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<String>,
    /// Seeds per sweep point.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated sweep modes: tcp, sctp_sack, sctp_gbn.
    #[arg(long)]
    modes: Option<String>,
    /// Byte target (k/m/g suffixes).
    #[arg(long)]
    bytes: Option<String>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Flat key = value file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Opts {
    fn to_config(&self, default_scenario: Scenario) -> Result<ScenarioConfig, ConfigError> {
        let mut cfg = ScenarioConfig::for_scenario(default_scenario);
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let pairs = [
            ("scenario", &self.scenario),
            ("protocol", &self.protocol),
            ("sack_policy", &self.sack_policy),
            ("copy_mode", &self.copy_mode),
            ("drop", &self.drop),
            ("drop_list", &self.drop_list),
            ("bandwidth", &self.bandwidth),
            ("rtt_us", &self.rtt_us),
            ("rwnd", &self.rwnd),
            ("mbs", &self.mbs),
            ("streams", &self.streams),
            ("assocs", &self.assocs),
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("modes", &self.modes),
            ("bytes", &self.bytes),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if self.gbn {
            cfg.set("gbn", "true")?;
        }
        if self.no_delay {
            cfg.set("no_delay", "true")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_out(csv: &str, dest: Option<&PathBuf>, also_stdout: bool) -> Result<(), BenchError> {
    match dest {
        Some(p) => std::fs::write(p, csv)?,
        None if also_stdout => print!("{csv}"),
        None => {}
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<(), BenchError> {
    match cmd {
        Command::Run(o) => {
            let cfg = o.to_config(Scenario::Bulk12k)?;
            let out = run_experiment(&cfg)?;
            write_out(&out.to_csv(), o.csv.as_ref(), true)?;
        }
        Command::Sweep(o) => {
            let mut cfg = o.to_config(Scenario::LossSweep)?;
            if o.scenario.is_none() {
                cfg.scenario = Scenario::LossSweep;
            }
            let out = Outcome::Sweep(run_loss_sweep(&cfg)?);
            write_out(&out.to_csv(), o.csv.as_ref(), true)?;
        }
        Command::Report(o) => {
            let cfg = o.to_config(Scenario::Bulk12k)?;
            let out = run_experiment(&cfg)?;
            print!("{}", out.to_text());
            write_out(&out.to_csv(), o.csv.as_ref(), false)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
