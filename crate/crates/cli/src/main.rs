//! `treemix` command-line front end.

mod commands;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treemix::topology::parse_config_lines;
use treemix::TreeFamilySpec;

#[derive(Parser, Debug)]
#[command(name = "treemix", version, about = "Mixing, hitting and coupling of lazy walks on path-and-binary-tree families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a family member and write its region table.
    Build(commands::BuildArgs),
    /// Exact d(t) profile per canonical start.
    Profile(commands::ProfileArgs),
    /// Exact worst-case mixing time at one eps.
    Tmix(commands::TmixArgs),
    /// Exact hitting-time moments.
    Hitting(commands::HittingArgs),
    /// Relaxation time, bottleneck ratio and Poincaré checks.
    Spectral(commands::SpectralArgs),
    /// Monte Carlo hitting times with the path/tree decomposition.
    Mc(commands::McArgs),
    /// Monte Carlo coupling against the exact distance to stationarity.
    Couple(commands::CoupleArgs),
    /// Full property suite; exits 1 if any check fails.
    Verify(commands::VerifyArgs),
    /// Cutoff report across several k.
    Sweep(commands::SweepArgs),
}

/// Family parameters. Any of them may also come from `--config`; flags win.
#[derive(Args, Debug, Clone, Default, serde::Serialize)]
pub struct SpecArgs {
    /// Family index (>= 1).
    #[arg(long)]
    pub k: Option<u32>,
    /// Mass exponent, N = n_k^alpha (rational such as 3 or 5/2).
    #[arg(long)]
    pub alpha: Option<String>,
    /// Tree shape: perfect or exact_size.
    #[arg(long)]
    pub mode: Option<String>,
    /// Use the geometric schedule n_j = base^j instead of 2^(2^j).
    #[arg(long)]
    pub base: Option<u64>,
    /// First attached level (default ceil(k/2)).
    #[arg(long)]
    pub attach_lo: Option<u32>,
    /// Self-loops at tree leaves.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub loops: Option<bool>,
}

/// Options shared by every command.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Plain-text `key = value` file; spec keys plus `seed` and `replicates`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "TREEMIX_OUT_DIR", default_value = "treemix-out")]
    pub out_dir: PathBuf,
    /// Worker threads (default: available cores). Outputs do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or an invalid spec: exit 2.
    Usage(String),
    /// A verification or sweep check failed: exit 1.
    Failed(String),
    /// Any other runtime error: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<treemix::Error>() {
            Some(
                treemix::Error::InvalidSpec(_)
                | treemix::Error::Config { .. }
                | treemix::Error::Epsilon(_)
                | treemix::Error::Addressing(_)
                | treemix::Error::EmptyGrid,
            ) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<treemix::Error> for Failure {
    fn from(e: treemix::Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Values read from `--config`, split into spec keys and run keys.
#[derive(Debug, Default)]
pub struct ConfigFile {
    spec: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub replicates: Option<u64>,
}

const SPEC_KEYS: [&str; 6] = ["k", "base", "alpha", "attach_lo", "mode", "leaf_self_loops"];

impl ConfigFile {
    pub fn load(common: &CommonArgs) -> CliResult<Self> {
        let Some(path) = &common.config else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut out = Self::default();
        for (key, value, line) in parse_config_lines(&text)? {
            let bad = |what: &str| Failure::Usage(format!("config line {line}: bad {what} {value:?}"));
            match key.as_str() {
                "seed" => out.seed = Some(value.parse().map_err(|_| bad("seed"))?),
                "replicates" => out.replicates = Some(value.parse().map_err(|_| bad("replicates"))?),
                k if SPEC_KEYS.contains(&k) => {
                    out.spec.insert(key, value);
                }
                _ => return Err(Failure::Usage(format!("config line {line}: unknown key {key:?}"))),
            }
        }
        Ok(out)
    }

    /// Config spec keys overridden by flags.
    pub fn spec(&self, flags: &SpecArgs) -> CliResult<TreeFamilySpec> {
        let mut keys = self.spec.clone();
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                keys.insert(k.into(), v);
            }
        };
        set("k", flags.k.map(|x| x.to_string()));
        set("base", flags.base.map(|x| x.to_string()));
        set("alpha", flags.alpha.clone());
        set("attach_lo", flags.attach_lo.map(|x| x.to_string()));
        set("mode", flags.mode.clone());
        set("leaf_self_loops", flags.loops.map(|x| x.to_string()));
        if !keys.contains_key("k") {
            return Err(Failure::Usage("--k is required (flag or config key)".into()));
        }
        let text: String = keys.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let spec = TreeFamilySpec::from_config(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn init_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(anyhow::anyhow!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Build(a) => &a.common,
        Command::Profile(a) => &a.common,
        Command::Tmix(a) => &a.common,
        Command::Hitting(a) => &a.common,
        Command::Spectral(a) => &a.common,
        Command::Mc(a) => &a.common,
        Command::Couple(a) => &a.common,
        Command::Verify(a) => &a.common,
        Command::Sweep(a) => &a.common,
    };
    init_threads(common.threads)?;
    let config = ConfigFile::load(common)?;
    match &cli.command {
        Command::Build(a) => commands::build(a, &config),
        Command::Profile(a) => commands::profile(a, &config),
        Command::Tmix(a) => commands::tmix(a, &config),
        Command::Hitting(a) => commands::hitting(a, &config),
        Command::Spectral(a) => commands::spectral(a, &config),
        Command::Mc(a) => commands::mc(a, &config),
        Command::Couple(a) => commands::couple(a, &config),
        Command::Verify(a) => commands::verify(a, &config),
        Command::Sweep(a) => commands::sweep(a, &config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "k = 3\nmode = exact_size\nseed = 9\n").unwrap();
        let common = CommonArgs { config: Some(path), out_dir: dir.path().into(), threads: None };
        let cfg = ConfigFile::load(&common).unwrap();
        assert_eq!(cfg.seed, Some(9));
        let spec = cfg.spec(&SpecArgs { k: Some(2), ..Default::default() }).unwrap();
        assert_eq!(spec.k, 2);
        assert_eq!(spec.mode, treemix::TreeMode::ExactSize);
    }

    #[test]
    fn zero_k_is_a_usage_error() {
        let cfg = ConfigFile::default();
        assert!(matches!(cfg.spec(&SpecArgs { k: Some(0), ..Default::default() }), Err(Failure::Usage(_))));
        assert!(matches!(cfg.spec(&SpecArgs::default()), Err(Failure::Usage(_))));
    }
}
