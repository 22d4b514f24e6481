use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, SecondsFormat};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use personaweaver::banks::{self, find_setting};
use personaweaver::gateway::{BackendConfig, BackendKind, Gateway};
use personaweaver::generator::{self, BehaviorBanks, Method, Population};
use personaweaver::harness::{self, RunConfig, RunManifest, SettingChoice};
use personaweaver::probes::{self, ClassifierMode};
use personaweaver::stylometry::{self, StyleLexicons};
use personaweaver::worldgen::{self, WorldBank, WorldgenOptions};

#[derive(Parser)]
#[command(name = "personaweaver", version, about = "Procedural character generation and bias measurement")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendChoice>,
    /// Mock script (JSON); implies the mock backend.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Mock,
    Live,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full settings x methods grid.
    Run,
    /// Generate one population.
    Generate {
        #[arg(long)]
        setting: String,
        #[arg(long, default_value = "personaweaver")]
        method: Method,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        persona_file: Option<PathBuf>,
        /// Reuse a saved world bank instead of building one.
        #[arg(long)]
        world_bank: Option<PathBuf>,
    },
    /// Run a probe over a population file.
    Probe {
        #[arg(long)]
        population: PathBuf,
        #[arg(long, value_enum)]
        kind: ProbeKind,
        /// Classify replies into the eight reaction styles, folded to three.
        #[arg(long)]
        eight_way: bool,
    },
    /// Build a style report from probe records.
    Style {
        #[arg(long)]
        records: PathBuf,
    },
    /// Compare methods across run manifests.
    Compare {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Comparison plus SVG charts.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Inspect the built-in banks.
    Banks {
        #[command(subcommand)]
        action: BanksAction,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    Moral,
    Reaction,
}

#[derive(Subcommand)]
enum BanksAction {
    Show {
        #[arg(value_enum, default_value = "all")]
        which: BankChoice,
    },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BankChoice {
    All,
    Morals,
    Reactions,
    Settings,
    Probes,
    Checksums,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut config = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    match (g.backend, &g.mock_script) {
        (Some(BackendChoice::Live), Some(_)) => bail!("--mock-script cannot be combined with --backend live"),
        (Some(BackendChoice::Live), None) if config.backend.kind != BackendKind::Live => {
            config.backend = BackendConfig::live("https://api.openai.com", "OPENAI_API_KEY", "gpt-4o");
        }
        (Some(BackendChoice::Mock), _) | (None, Some(_)) if config.backend.kind != BackendKind::Mock => {
            config.backend = BackendConfig::mock();
            config.aux_backend = None;
        }
        _ => {}
    }
    if let Some(script) = &g.mock_script {
        config.backend.mock_script = Some(script.clone());
        if let Some(aux) = config.aux_backend.as_mut().filter(|a| a.kind == BackendKind::Mock) {
            aux.mock_script = Some(script.clone());
        }
    }
    if let Some(out) = &g.out {
        config.output_dir = out.clone();
    }
    if config.fixed_timestamp.is_none() {
        if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
            let secs: i64 = epoch.trim().parse().context("SOURCE_DATE_EPOCH must be an integer")?;
            let ts = DateTime::from_timestamp(secs, 0).context("SOURCE_DATE_EPOCH out of range")?;
            config.fixed_timestamp = Some(ts.to_rfc3339_opts(SecondsFormat::Secs, true));
        }
    }
    Ok(config)
}

fn gateways(config: &RunConfig) -> Result<(Gateway, Gateway)> {
    let main = Gateway::from_config(&config.backend)?;
    let aux = Gateway::from_config(config.aux_backend.as_ref().unwrap_or(&config.backend))?;
    Ok((main, aux))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn out_dir(g: &Global) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

/// Returns the number of stage errors.
fn execute(cli: Cli) -> Result<usize> {
    let g = &cli.global;
    match cli.command {
        Command::Run => {
            let config = load_config(g)?;
            let manifest = harness::run_experiment(&config)?;
            for cell in &manifest.cells {
                println!("{:<22}{:<15}{:>5} profiles  {:>3} errors", cell.setting, cell.method, cell.profiles, cell.error_count());
                for m in &cell.messages {
                    println!("    {m}");
                }
            }
            println!("manifest: {}", config.output_dir.join(harness::MANIFEST_FILE).display());
            Ok(manifest.error_count())
        }
        Command::Generate { setting, method, n, persona_file, world_bank } => {
            let config = load_config(g)?;
            let spec = find_setting(&setting)?;
            let (gateway, _) = gateways(&config)?;
            let opts = generator::GenerationOptions {
                temperature: config.generation.temperature,
                judge_temperature: config.generation.judge_temperature,
                revise: config.generation.revise,
                with_replacement: config.generation.with_replacement,
                ..Default::default()
            };
            let pop = match method {
                Method::PersonaWeaver => {
                    let world = match world_bank {
                        Some(p) => WorldBank::load(&p)?,
                        None => {
                            let wopts = WorldgenOptions { llm_screen: config.generation.llm_screen, ..Default::default() };
                            let w = worldgen::build_world_bank(&spec, config.generation.k, config.generation.m, &gateway, &wopts)?;
                            write(&out_dir(g).join(format!("{}_world_bank.json", spec.slug())), &w.to_json())?;
                            w
                        }
                    };
                    generator::generate_personaweaver(&spec, n, &world, &BehaviorBanks::builtin(), &gateway, config.seed, &opts)?
                }
                Method::WorldWeaver => generator::generate_worldweaver(&spec, n, &gateway, &opts)?,
                Method::PersonaHub => {
                    let file = persona_file.or(config.persona_file).context("personahub needs --persona-file")?;
                    generator::generate_personahub(&spec, &file, n, &gateway, config.seed, &opts)?
                }
            };
            write(&out_dir(g).join(format!("{}_{method}.jsonl", spec.slug())), &pop.to_jsonl())?;
            for issue in &pop.issues {
                eprintln!("{}: {}", if issue.warning { "warning" } else { "error" }, issue.message);
            }
            println!("{} profiles ({} requested)", pop.profiles.len(), pop.requested);
            Ok(pop.error_count())
        }
        Command::Probe { population, kind, eight_way } => {
            let config = load_config(g)?;
            let pop = Population::load(&population)?;
            let setting = match config.settings.iter().map(SettingChoice::resolve).find(|s| {
                s.as_ref().is_ok_and(|s| s.name == pop.setting_name)
            }) {
                Some(s) => s?,
                None => find_setting(&pop.setting_name)?,
            };
            let (gateway, aux) = gateways(&config)?;
            let corpus = banks::load_probe_corpus();
            let (run, name) = match kind {
                ProbeKind::Moral => (probes::run_moral_probe(&pop, &setting, &corpus.moral_items(), &gateway)?, "moral"),
                ProbeKind::Reaction => {
                    let mode = if eight_way || config.probes.eight_way {
                        ClassifierMode::EightWay { styles: banks::load_reaction_bank() }
                    } else {
                        ClassifierMode::ThreeWay
                    };
                    (probes::run_reaction_probe(&pop, &setting, &corpus.question_items(), &gateway, &aux, &mode)?, "reaction")
                }
            };
            let dir = out_dir(g);
            write(&dir.join(format!("{name}_records.jsonl")), &probes::records_to_jsonl(&run.records))?;
            write(&dir.join(format!("{name}_dist.csv")), &run.distribution.to_csv())?;
            print!("{}", run.distribution.to_csv());
            if let Ok(h) = stylometry::normalized_entropy(&run.distribution) {
                println!("normalized entropy: {h:.4}");
            }
            Ok(run.error_count())
        }
        Command::Style { records } => {
            let records = probes::load_records(&records)?;
            let report = stylometry::build_style_report(&records, &StyleLexicons::default());
            let dir = out_dir(g);
            write(&dir.join("style.csv"), &report.to_csv())?;
            write(&dir.join("style.json"), &report.to_json())?;
            print!("{}", report.to_json());
            Ok(0)
        }
        Command::Compare { manifests } => {
            let report = compare(&manifests)?;
            print!("{}", report.summary());
            if let Some(out) = &g.out {
                write(&out.join("comparison.json"), &report.to_json())?;
            }
            Ok(0)
        }
        Command::Report { manifests } => {
            let report = compare(&manifests)?;
            let dir = out_dir(g);
            write(&dir.join("comparison.json"), &report.to_json())?;
            for path in harness::emit_charts(&report, &dir)? {
                eprintln!("wrote {}", path.display());
            }
            print!("{}", report.summary());
            Ok(0)
        }
        Command::Banks { action: BanksAction::Show { which } } => {
            show_banks(which);
            Ok(0)
        }
    }
}

fn compare(paths: &[PathBuf]) -> Result<harness::ComparisonReport> {
    let manifests = paths.iter().map(|p| RunManifest::load(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(harness::compare_methods(&manifests)?)
}

fn show_banks(which: BankChoice) {
    let want = |b: BankChoice| which == BankChoice::All || which == b;
    if want(BankChoice::Morals) {
        println!("# moral positions");
        for m in banks::load_moral_bank() {
            println!("{}\t{}", m.id, m.text);
        }
    }
    if want(BankChoice::Reactions) {
        println!("# reaction styles");
        for r in banks::load_reaction_bank() {
            println!("{}\t{}\t{}", r.id, r.name, r.description);
        }
    }
    if want(BankChoice::Settings) {
        println!("# settings");
        for s in banks::load_settings() {
            println!("{}\t{}\t{}", s.name, s.category, s.prompt);
        }
    }
    if want(BankChoice::Probes) {
        let corpus = banks::load_probe_corpus();
        println!("# probe items");
        for item in corpus.moral_items().into_iter().chain(corpus.question_items()) {
            println!("{}\t{}", item.id, item.text);
        }
    }
    if want(BankChoice::Checksums) {
        println!("# sha256");
        for (name, digest) in banks::builtin_checksums() {
            println!("{name}\t{digest}");
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(errors) => {
            eprintln!("{errors} stage error(s)");
            ExitCode::from(1)
        }
        Err(e) => {
            // Library errors already embed their cause; print each new part once.
            let mut msg = String::new();
            for part in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&part) {
                    msg = if msg.is_empty() { part } else { format!("{msg}: {part}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
