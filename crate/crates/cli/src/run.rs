use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use toa_core::compute::BudgetLedger;
use toa_core::engine::run_strategy;
use toa_core::io::{read_prompts, write_json, write_samples, write_text, write_tree};
use toa_core::seed::{hash_str, mix};
use toa_core::{validate_config, Orchestra, RunConfig, Strategy, StrategyOutput};

use crate::{
    CliError, LedgerFile, LedgerSummary, Overrides, PromptLedger, RunArgs, RunManifest, RunOutputs, TreeFile,
    MANIFEST_FILE,
};

fn read_bytes(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// File stem for a prompt id: unsafe characters become `_`, collisions get
/// a numeric suffix.
fn tree_stem(prompt_id: &str, taken: &mut HashSet<String>) -> String {
    let base: String = prompt_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    let base = if base.is_empty() || base.starts_with('.') {
        format!("_{base}")
    } else {
        base
    };
    let mut stem = base.clone();
    let mut i = 1;
    while !taken.insert(stem.clone()) {
        stem = format!("{base}-{i}");
        i += 1;
    }
    stem
}

/// Deterministic run id from the inputs (timestamps excluded).
fn run_id(config_text: &str, prompts_text: &str, o: &Overrides) -> String {
    let overrides = serde_json::to_string(o).expect("overrides serialize");
    format!(
        "{:016x}",
        mix(&[hash_str(config_text), hash_str(prompts_text), hash_str(&overrides)])
    )
}

pub fn cmd_run(args: &RunArgs) -> Result<RunManifest, CliError> {
    let started_at = chrono::Utc::now();
    let config_text = read_bytes(&args.config)?;
    let prompts_text = read_bytes(&args.prompts)?;

    let mut cfg = RunConfig::from_toml_str(&config_text).map_err(toa_core::Error::from)?;
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    let validated = validate_config(cfg).map_err(toa_core::Error::from)?;
    let prompts = read_prompts(&args.prompts)?;
    let orch = Orchestra::from_config(&validated)?;

    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Input(format!("worker pool: {e}")))?;
    let outputs: Vec<StrategyOutput> = pool.install(|| {
        prompts
            .par_iter()
            .map(|p| run_strategy(&orch, &validated, p))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let out = &args.out;
    write_text(&out.join("config.toml"), &config_text)?;
    write_text(&out.join("prompts.jsonl"), &prompts_text)?;
    write_samples(&out.join("samples.jsonl"), outputs.iter().map(|o| &o.samples))?;

    let mut trees = Vec::new();
    if validated.strategy() == Strategy::Toa {
        let mut taken = HashSet::new();
        for o in &outputs {
            let tree = o.tree.as_ref().expect("tree search returns its tree");
            let rel = format!("trees/{}.json", tree_stem(&o.samples.prompt_id, &mut taken));
            write_tree(&out.join(&rel), &tree.snapshot(&o.samples.prompt_id, validated.toa()))?;
            trees.push(TreeFile {
                prompt_id: o.samples.prompt_id.clone(),
                path: rel,
            });
        }
    }

    let total = outputs.iter().fold(BudgetLedger::new(), |acc, o| acc.merged(&o.ledger));
    let ledger = LedgerFile {
        total: total.clone(),
        per_prompt: outputs
            .iter()
            .map(|o| PromptLedger {
                prompt_id: o.samples.prompt_id.clone(),
                ledger: o.ledger.clone(),
            })
            .collect(),
    };
    write_json(&out.join("ledger.json"), &ledger)?;

    let overrides = Overrides {
        strategy: args.strategy,
        n: args.n,
        seed: args.seed,
    };
    let manifest = RunManifest {
        run_id: run_id(&config_text, &prompts_text, &overrides),
        strategy: validated.strategy(),
        n: validated.n(),
        k: validated.k(),
        master_seed: validated.config().master_seed,
        overrides,
        prompt_count: prompts.len(),
        started_at,
        finished_at: chrono::Utc::now(),
        outputs: RunOutputs {
            config: "config.toml".into(),
            prompts: "prompts.jsonl".into(),
            samples: "samples.jsonl".into(),
            ledger: "ledger.json".into(),
            trees,
        },
        ledger: LedgerSummary::new(&total, prompts.len()),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
