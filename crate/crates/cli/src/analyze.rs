use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use toa_core::analysis::{
    best_of_n, best_path, export_dot, layer_reward_stats, majority_vote, path_frequencies, summarize_layers,
    top_k_mean, transition_proportions, AnalysisError, AnswerExtractor, RefinementPath,
};
use toa_core::compute::{fit_scaling_curve, ScalingFit};
use toa_core::io::{read_prompts, read_samples, read_tree, write_text};
use toa_core::toa::SearchTree;
use toa_core::{Prompt, SampleSet};

use crate::{AnalyzeArgs, CliError, FitArgs, LedgerFile, Report, RunManifest};

/// One run directory loaded for analysis.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub prompts: Vec<Prompt>,
    pub samples: Vec<SampleSet>,
    /// `(prompt_id, tree file stem, tree)`; empty unless requested.
    pub trees: Vec<(String, String, SearchTree)>,
    pub ledger: LedgerFile,
}

impl LoadedRun {
    pub fn load(dir: &Path, with_trees: bool) -> Result<Self, CliError> {
        let manifest = RunManifest::load(dir)?;
        let prompts = read_prompts(&dir.join(&manifest.outputs.prompts))?;
        let samples = read_samples(&dir.join(&manifest.outputs.samples))?;
        let ledger_path = dir.join(&manifest.outputs.ledger);
        let ledger_text =
            fs::read_to_string(&ledger_path).map_err(|e| CliError::Input(format!("{}: {e}", ledger_path.display())))?;
        let ledger: LedgerFile = serde_json::from_str(&ledger_text)
            .map_err(|e| CliError::Input(format!("{}: {e}", ledger_path.display())))?;
        let mut trees = Vec::new();
        if with_trees {
            for t in &manifest.outputs.trees {
                let snap = read_tree(&dir.join(&t.path))?;
                let tree = SearchTree::from_snapshot(&snap).map_err(|e| CliError::Input(format!("{}: {e}", t.path)))?;
                let stem = Path::new(&t.path)
                    .file_stem()
                    .map_or_else(|| t.prompt_id.clone(), |s| s.to_string_lossy().into_owned());
                trees.push((t.prompt_id.clone(), stem, tree));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            prompts,
            samples,
            trees,
            ledger,
        })
    }
}

/// Quotes a CSV field when needed.
fn csv(field: impl ToString) -> String {
    let s = field.to_string();
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut line = fields.iter().map(csv).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

struct Writer {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_text(&path, text)?;
        self.written.push(path);
        Ok(())
    }
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<Vec<PathBuf>, CliError> {
    let report = args.report;
    let mut runs = Vec::new();
    for dir in &args.run_dirs {
        let run = LoadedRun::load(dir, report.needs_trees())?;
        if report.needs_trees() && run.manifest.outputs.trees.is_empty() {
            return Err(CliError::MissingArtifact {
                report: report.as_str(),
                run_dir: dir.clone(),
                strategy: run.manifest.strategy,
            });
        }
        runs.push(run);
    }
    let out_dir = args.out.clone().unwrap_or_else(|| args.run_dirs[0].join("reports"));
    let mut w = Writer {
        dir: out_dir,
        written: Vec::new(),
    };
    match report {
        Report::Paths => paths_report(&runs, args, &mut w)?,
        Report::Transitions => transitions_report(&runs, &mut w)?,
        Report::Layers => layers_report(&runs, &mut w)?,
        Report::Scaling => scaling_report(&runs, args, &mut w)?,
        Report::Select => select_report(&runs, args, &mut w)?,
    }
    Ok(w.written)
}

fn best_paths(runs: &[LoadedRun]) -> Result<Vec<(String, RefinementPath)>, CliError> {
    let mut out = Vec::new();
    for run in runs {
        for (prompt_id, _, tree) in &run.trees {
            out.push((
                run.manifest.run_id.clone(),
                best_path(tree, prompt_id).map_err(toa_core::Error::from)?,
            ));
        }
    }
    Ok(out)
}

fn paths_report(runs: &[LoadedRun], args: &AnalyzeArgs, w: &mut Writer) -> Result<(), CliError> {
    let tagged = best_paths(runs)?;
    let paths: Vec<RefinementPath> = tagged.iter().map(|(_, p)| p.clone()).collect();
    let freq = path_frequencies(&paths, args.top);
    let total = freq.total_paths.max(1) as f64;

    let mut text = String::from("rank,path,count,share,distinct_models\n");
    for (i, row) in freq.ranked.iter().enumerate() {
        text += &csv_line(&[
            (i + 1).to_string(),
            row.path.clone(),
            row.count.to_string(),
            format!("{:.6}", row.count as f64 / total),
            row.distinct_models.to_string(),
        ]);
    }
    w.put("paths.csv", &text)?;

    let mut text = String::from("distinct_models,paths,share\n");
    for (models, count) in &freq.distinct_model_counts {
        let _ = writeln!(text, "{models},{count},{:.6}", *count as f64 / total);
    }
    w.put("path_models.csv", &text)?;

    let mut text = String::from("run_id,prompt_id,path,terminal_reward\n");
    for (run_id, p) in &tagged {
        text += &csv_line(&[
            run_id.clone(),
            p.prompt_id.clone(),
            p.key(),
            p.terminal_reward.to_string(),
        ]);
    }
    w.put("best_paths.csv", &text)?;

    for (i, run) in runs.iter().enumerate() {
        for (_, stem, tree) in &run.trees {
            let name = if runs.len() == 1 {
                format!("dot/{stem}.dot")
            } else {
                format!("dot/{i}-{stem}.dot")
            };
            w.put(&name, &export_dot(tree))?;
        }
    }
    Ok(())
}

fn transitions_report(runs: &[LoadedRun], w: &mut Writer) -> Result<(), CliError> {
    let paths: Vec<RefinementPath> = best_paths(runs)?.into_iter().map(|(_, p)| p).collect();
    let stats = transition_proportions(&paths);
    let mut text = String::from("predecessor,successor,count,proportion\n");
    for ((pred, succ), count) in &stats.counts {
        text += &csv_line(&[
            pred.clone(),
            succ.clone(),
            count.to_string(),
            format!("{:.6}", stats.proportion(pred, succ)),
        ]);
    }
    w.put("transitions.csv", &text)?;

    let mut agents: Vec<String> = runs
        .iter()
        .flat_map(|r| r.trees.iter().flat_map(|t| t.2.agents().to_vec()))
        .collect();
    agents.sort();
    agents.dedup();
    let fmt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    let text = format!(
        "paths,same_agent_mean,cross_agent_mean\n{},{},{}\n",
        paths.len(),
        fmt(stats.diagonal_mean()),
        fmt(stats.off_diagonal_mean(&agents))
    );
    w.put("transitions_summary.csv", &text)
}

fn layers_report(runs: &[LoadedRun], w: &mut Writer) -> Result<(), CliError> {
    let mut stats = Vec::new();
    for run in runs {
        for (_, _, tree) in &run.trees {
            stats.push(layer_reward_stats(tree).map_err(toa_core::Error::from)?);
        }
    }
    let mut text = String::from("agent_id,depth,mean_max_reward,prompts,best_proportion\n");
    for row in summarize_layers(&stats) {
        text += &csv_line(&[
            row.agent_id,
            row.depth.to_string(),
            format!("{:.6}", row.mean_max_reward),
            row.prompts.to_string(),
            format!("{:.6}", row.best_proportion),
        ]);
    }
    w.put("layers.csv", &text)?;

    let max_depth = stats.iter().map(|s| s.max_depth).max().unwrap_or(0);
    let mut text = String::from("depth,prompts_with_best,best_proportion\n");
    for depth in 1..=max_depth {
        let hits = stats.iter().filter(|s| s.contains_best(depth)).count();
        let _ = writeln!(text, "{depth},{hits},{:.6}", hits as f64 / stats.len().max(1) as f64);
    }
    w.put("layer_best.csv", &text)
}

/// Mean per-prompt top-k reward, with k capped at each set's size.
fn mean_top_k(sets: &[SampleSet], k: usize) -> Result<f64, CliError> {
    let mut sum = 0.0;
    for set in sets {
        sum += top_k_mean(set, k.min(set.len()).max(1)).map_err(toa_core::Error::from)?;
    }
    Ok(sum / sets.len().max(1) as f64)
}

fn scaling_report(runs: &[LoadedRun], args: &AnalyzeArgs, w: &mut Writer) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for run in runs {
        let flops = run.ledger.per_prompt.iter().map(|p| p.ledger.total_flops).sum::<f64>()
            / run.ledger.per_prompt.len().max(1) as f64;
        rows.push((run, flops, mean_top_k(&run.samples, args.k)?));
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut text = String::from("run_id,strategy,n,flops_per_prompt,top_k_reward\n");
    for (run, flops, metric) in &rows {
        text += &csv_line(&[
            run.manifest.run_id.clone(),
            run.manifest.strategy.to_string(),
            run.manifest.n.to_string(),
            format!("{flops:e}"),
            format!("{metric:.6}"),
        ]);
    }
    w.put("scaling.csv", &text)?;

    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();
    match fit_scaling_curve(&points) {
        Ok(fit) => w.put(
            "scaling_fit.csv",
            &format!("{}\n{}\n", ScalingFit::csv_header(), fit.csv_row()),
        ),
        Err(e) => {
            eprintln!("scaling fit skipped: {e}");
            Ok(())
        }
    }
}

fn normalize(answer: &str) -> String {
    answer.trim().trim_end_matches('.').replace(' ', "")
}

fn select_report(runs: &[LoadedRun], args: &AnalyzeArgs, w: &mut Writer) -> Result<(), CliError> {
    let extractor = match &args.answer_regex {
        Some(p) => AnswerExtractor::regex(p).map_err(|e| CliError::Input(format!("--answer-regex: {e}")))?,
        None => AnswerExtractor::default(),
    };
    let mut text = String::from(
        "run_id,prompt_id,best_index,best_agent,best_reward,top_k_mean,majority_answer,reference,majority_correct\n",
    );
    let mut summary = String::from("run_id,strategy,n,prompts,mean_best_reward,mean_top_k,majority_accuracy\n");
    for run in runs {
        let (mut best_sum, mut top_sum, mut correct, mut graded) = (0.0, 0.0, 0usize, 0usize);
        for set in &run.samples {
            let best = best_of_n(set).map_err(toa_core::Error::from)?;
            let top = top_k_mean(set, args.k.min(set.len()).max(1)).map_err(toa_core::Error::from)?;
            let first_n = args.first_n.unwrap_or(set.len()).min(set.len());
            let majority = match majority_vote(set, &extractor, first_n) {
                Ok(a) => Some(a),
                Err(AnalysisError::NoExtractableAnswer) => None,
                Err(e) => return Err(toa_core::Error::from(e).into()),
            };
            let reference = run
                .prompts
                .iter()
                .find(|p| p.prompt_id == set.prompt_id)
                .and_then(|p| p.answer.clone());
            let verdict = match (&majority, &reference) {
                (Some(m), Some(r)) => {
                    graded += 1;
                    let ok = normalize(m) == normalize(r);
                    correct += usize::from(ok);
                    ok.to_string()
                }
                (None, Some(_)) => {
                    graded += 1;
                    "false".to_string()
                }
                _ => String::new(),
            };
            best_sum += best.reward.unwrap_or(f64::NAN);
            top_sum += top;
            text += &csv_line(&[
                run.manifest.run_id.clone(),
                set.prompt_id.clone(),
                best.sample_index.to_string(),
                best.agent_id.clone(),
                format!("{:.6}", best.reward.unwrap_or(f64::NAN)),
                format!("{top:.6}"),
                majority.unwrap_or_default(),
                reference.unwrap_or_default(),
                verdict,
            ]);
        }
        let count = run.samples.len().max(1) as f64;
        summary += &csv_line(&[
            run.manifest.run_id.clone(),
            run.manifest.strategy.to_string(),
            run.manifest.n.to_string(),
            run.samples.len().to_string(),
            format!("{:.6}", best_sum / count),
            format!("{:.6}", top_sum / count),
            if graded > 0 {
                format!("{:.6}", correct as f64 / graded as f64)
            } else {
                String::new()
            },
        ]);
    }
    w.put("select.csv", &text)?;
    w.put("select_summary.csv", &summary)
}

/// Parses `compute,reward` rows; a non-numeric first line is a header.
pub fn parse_points(text: &str) -> Result<Vec<(f64, f64)>, CliError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let parsed = match (cols.next(), cols.next()) {
            (Some(c), Some(r)) => c.parse::<f64>().ok().zip(r.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => points.push(p),
            None if i == 0 => {}
            None => return Err(CliError::Input(format!("line {}: expected `compute,reward`", i + 1))),
        }
    }
    Ok(points)
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let text =
        fs::read_to_string(&args.points).map_err(|e| CliError::Input(format!("{}: {e}", args.points.display())))?;
    let fit = fit_scaling_curve(&parse_points(&text)?).map_err(toa_core::Error::from)?;
    let out = format!("{}\n{}\n", ScalingFit::csv_header(), fit.csv_row());
    match &args.out {
        Some(path) => write_text(path, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        assert_eq!(csv("plain"), "plain");
        assert_eq!(csv("a,b"), "\"a,b\"");
        assert_eq!(csv("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn points_with_and_without_header() {
        assert_eq!(
            parse_points("compute,reward\n1e12,0.5\n\n1e13, 0.6\n").unwrap(),
            vec![(1e12, 0.5), (1e13, 0.6)]
        );
        assert_eq!(parse_points("10,1").unwrap(), vec![(10.0, 1.0)]);
        assert!(parse_points("c,r\n1,x\n").is_err());
    }

    #[test]
    fn answers_normalize() {
        assert_eq!(normalize(" 1 / 2. "), "1/2");
    }
}
