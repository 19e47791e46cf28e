//! Command-line driver.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use brex_core::env::Role;
use brex_core::eval::StateCategory;
use brex_core::policy::Behavior;
use brex_core::repr::BrKind;
use clap::{Parser, Subcommand};

use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::http::{serve, AppState};
use crate::ops::{self, Backends, ExplainRequest};
use crate::store::ArtifactStore;

#[derive(Debug, Parser)]
#[command(name = "brex", version, about = "Tree-based behavior representations and their explanations")]
pub struct Cli {
    /// Artifact store directory.
    #[arg(long, global = true, env = "BREX_STORE", default_value = "brex-store")]
    pub store: PathBuf,
    /// TOML file with env and distillation defaults.
    #[arg(long, global = true, env = "BREX_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out episodes and store them.
    Rollout {
        #[arg(long)]
        behavior: Behavior,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Episode i uses seed + i.
        #[arg(long, default_value_t = 1)]
        episodes: u64,
    },
    /// Distill a tree for one behavior and role.
    Distill {
        #[arg(long)]
        behavior: Behavior,
        #[arg(long)]
        role: Role,
    },
    /// Explain the action taken at one step of a stored episode.
    Explain {
        #[arg(long)]
        trajectory: String,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        role: Role,
        #[arg(long, default_value = "path")]
        br: BrKind,
        #[arg(long)]
        tree: Option<String>,
        /// Use the endpoint from BREX_LLM_* instead of the offline mock.
        #[arg(long)]
        live: bool,
    },
    /// Follow-up questions on an explanation; reads stdin when no message is given.
    Chat {
        #[arg(long)]
        record: String,
        #[arg(long)]
        message: Option<String>,
    },
    /// Sample evaluation states and explain each with every representation.
    Eval {
        #[arg(long)]
        behavior: Behavior,
        #[arg(long)]
        category: Option<StateCategory>,
        /// States per role.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        live: bool,
    },
    /// Print fidelity, accuracy and hallucination tables.
    Report,
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Make the BREX_LLM_* endpoint available for live requests.
        #[arg(long)]
        live: bool,
    },
    /// Annotation label files.
    Labels {
        #[command(subcommand)]
        command: LabelsCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum LabelsCommand {
    /// Import labeled items, one JSON object per line.
    Import { file: PathBuf },
}

fn backends(live: bool) -> Backends {
    if live {
        Backends::from_env()
    } else {
        Backends::offline()
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), ApiError> {
    let config = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    let store = ArtifactStore::open(&cli.store)?;
    let w = |out: &mut dyn Write, s: &str| {
        out.write_all(s.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| ApiError::invalid(format!("write failed: {e}")))
    };
    match cli.command {
        Command::Rollout {
            behavior,
            seed,
            episodes,
        } => {
            for i in 0..episodes {
                let ep = ops::create_episode(&store, behavior, config.env.with_seed(seed.wrapping_add(i)))?;
                w(out, &format!("{}\n", ep.id))?;
            }
        }
        Command::Distill { behavior, role } => {
            let t = ops::distill_tree(&store, &config, behavior, role)?;
            w(
                out,
                &format!(
                    "{}\n{behavior} {role}: depth {}, {} leaves, fidelity {:.4} over {} episodes\n",
                    t.id, t.depth, t.leaves, t.fidelity.accuracy, t.fidelity.episodes
                ),
            )?;
        }
        Command::Explain {
            trajectory,
            t,
            role,
            br,
            tree,
            live,
        } => {
            let req = ExplainRequest {
                episode: trajectory,
                t,
                role,
                br_kind: br,
                live,
                tree,
            };
            let (rec, _) = ops::explain(&store, &config, &backends(live), &req)?;
            w(
                out,
                &format!(
                    "{}\n\nExplanation:\n{}\n\nPrediction:\n{}\n",
                    rec.id,
                    rec.explanation_text.as_deref().unwrap_or(""),
                    rec.prediction_text.as_deref().unwrap_or("")
                ),
            )?;
        }
        Command::Chat { record, message } => {
            let b = Backends::from_env();
            match message {
                Some(m) => {
                    let (reply, _) = ops::chat(&store, &b, &record, &m)?;
                    w(out, &format!("{reply}\n"))?;
                }
                None => {
                    for line in std::io::stdin().lock().lines() {
                        let line = line.map_err(|e| ApiError::invalid(e.to_string()))?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let (reply, _) = ops::chat(&store, &b, &record, &line)?;
                        w(out, &format!("{reply}\n"))?;
                    }
                }
            }
        }
        Command::Eval {
            behavior,
            category,
            n,
            seed,
            live,
        } => {
            let batch = ops::eval_batch(&store, &config, &backends(live), behavior, category, n, seed, live)?;
            for id in &batch.records {
                w(out, &format!("{id}\n"))?;
            }
            for s in &batch.shortfall {
                eprintln!("warning: {} {}: found {} of {} states", behavior, s.role, s.found, s.requested);
            }
        }
        Command::Report => {
            let mut text = ops::fidelity_table(&store)?;
            let acc = ops::accuracy_report(&store)?;
            if !acc.report.cells.is_empty() {
                let hal = ops::hallucination_report(&store)?;
                text.push('\n');
                text.push_str(&acc.table);
                text.push_str("\nHallucination rates\n");
                text.push_str(&hal.table);
                if let Some(c) = hal.correlation {
                    text.push_str(&format!("\nPearson r = {:.4}, p = {:.4}, n = {}\n", c.r, c.p, c.n));
                }
            }
            w(out, &text)?;
        }
        Command::Serve { port, host, live } => {
            let state = AppState::new(store, config, backends(live));
            let rt = tokio::runtime::Runtime::new().map_err(|e| ApiError::invalid(e.to_string()))?;
            rt.block_on(serve(state, &host, port))
                .map_err(|e| ApiError::invalid(format!("server error: {e}")))?;
        }
        Command::Labels {
            command: LabelsCommand::Import { file },
        } => {
            let text = std::fs::read_to_string(&file)
                .map_err(|e| ApiError::invalid(format!("cannot read {}: {e}", file.display())))?;
            let n = ops::import_labels(&store, &ops::parse_label_lines(&text)?)?;
            w(out, &format!("imported {n} labeled items\n"))?;
        }
    }
    Ok(())
}
