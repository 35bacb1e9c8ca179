use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use divkit_core::corpus::{load_jsonl, prompt_bag, save_jsonl, PreferenceSample};
use divkit_core::curation::{
    augment_dataset, build_nested_subsets, plan_budget, rerank_with_scores, uniform_growth,
    AugmentationConfig, SubsetSpec,
};
use divkit_core::diversity::{search_decay_index, CorpusSummary, DiversityScore, GridSearchConfig};
use divkit_core::losses::{
    pro_loss, pro_loss_finite_diff, pro_loss_grad, pro_ranking_loss, pro_temperatures,
    relative_error, sft_loss, GRADIENT_CHECK_FLOOR, LossGradient, RankingLogProbs,
};
use divkit_core::scorer::{
    score_batch, MockScorer, RemoteScorer, ScoreError, ScoreRequest, Scorer, SCORER_URL_ENV,
};

use crate::manifest::RunRecorder;
use crate::{AnalyzeArgs, AugmentArgs, FitDecayArgs, LossCheckArgs, RerankArgs, SubsetArgs};

fn load(path: &Path) -> Result<Vec<PreferenceSample>> {
    load_jsonl(path).with_context(|| format!("loading {}", path.display()))
}

fn corpus_diversity(samples: &[PreferenceSample], ngram: usize, p: f64) -> Result<DiversityScore> {
    let bag = prompt_bag(samples, ngram)?;
    Ok(CorpusSummary::from_bag(&bag, samples.len())?.score(p)?)
}

#[derive(Serialize)]
struct CurveRow {
    m: usize,
    r_unique: f64,
    d: f64,
    score: Option<f64>,
}

impl From<&DiversityScore> for CurveRow {
    fn from(s: &DiversityScore) -> Self {
        Self {
            m: s.m,
            r_unique: s.r_unique,
            d: s.d,
            score: None,
        }
    }
}

fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Analysis {
    ngram: usize,
    total_grams: u64,
    unique_grams: u64,
    #[serde(flatten)]
    diversity: DiversityScore,
    prefixes: Vec<DiversityScore>,
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let mut run = RunRecorder::new("analyze", args, &args.out.output_dir, None)?;
    run.input(&args.input)?;
    let samples = load(&args.input)?;
    ensure!(!samples.is_empty(), "{} holds no samples", args.input.display());

    let bag = prompt_bag(&samples, args.ngram)?;
    let diversity = CorpusSummary::from_bag(&bag, samples.len())?.score(args.decay)?;
    let mut prefixes = Vec::new();
    for &size in &args.sizes {
        ensure!(
            (1..=samples.len()).contains(&size),
            "prefix size {size} outside 1..={}",
            samples.len()
        );
        prefixes.push(corpus_diversity(&samples[..size], args.ngram, args.decay)?);
    }

    let rows: Vec<CurveRow> = prefixes.iter().chain([&diversity]).map(CurveRow::from).collect();
    let report = Analysis {
        ngram: args.ngram,
        total_grams: bag.total(),
        unique_grams: bag.unique(),
        diversity,
        prefixes,
    };
    run.write_json("analysis.json", &report)?;
    let csv_path = run.output("analysis.csv");
    write_curve(&csv_path, &rows)?;
    run.finish()?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Deserialize)]
struct RunRow {
    corpus: PathBuf,
    score: f64,
}

pub fn fit_decay(args: &FitDecayArgs) -> Result<()> {
    let mut run = RunRecorder::new("fit-decay", args, &args.out.output_dir, None)?;
    run.input(&args.runs)?;
    let base = args.runs.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(&args.runs)
        .with_context(|| format!("cannot read {}", args.runs.display()))?;
    let mut corpora = Vec::new();
    let mut scores = Vec::new();
    for (i, row) in reader.deserialize::<RunRow>().enumerate() {
        let row = row.with_context(|| format!("{}: row {}", args.runs.display(), i + 1))?;
        let path = base.join(&row.corpus);
        run.input(&path)?;
        let samples = load(&path)?;
        ensure!(!samples.is_empty(), "{} holds no samples", path.display());
        let bag = prompt_bag(&samples, args.ngram)?;
        corpora.push(CorpusSummary::from_bag(&bag, samples.len())?);
        scores.push(row.score);
    }

    let config = GridSearchConfig {
        step: args.step,
        require_ascending: !args.allow_non_ascending,
        strict_ascending: args.strict,
        p_max: args.p_max,
    };
    let result = search_decay_index(&corpora, &scores, &config)?;
    run.write_json("fit.json", &result)?;

    let rows: Vec<CurveRow> = corpora
        .iter()
        .zip(&scores)
        .map(|(c, &s)| {
            let d = c.score(result.p)?;
            Ok(CurveRow {
                score: Some(s),
                ..CurveRow::from(&d)
            })
        })
        .collect::<Result<_>>()?;
    let csv_path = run.output("points.csv");
    write_curve(&csv_path, &rows)?;
    run.finish()?;
    println!(
        "{}",
        serde_json::json!({"p": result.p, "alpha": result.alpha, "beta": result.beta, "mse": result.mse})
    );
    Ok(())
}

#[derive(Serialize)]
struct SubsetManifest<'a> {
    spec: SubsetSpec,
    ids: Vec<&'a str>,
    diversity: DiversityScore,
}

pub fn subset(args: &SubsetArgs) -> Result<()> {
    let mut run = RunRecorder::new("subset", args, &args.out.output_dir, Some(args.seed))?;
    run.input(&args.input)?;
    let samples = load(&args.input)?;
    let plan = plan_budget(args.budget, &args.lengths)?;

    let mut sizes: Vec<usize> = plan.allocations.iter().map(|a| a.prompt_count).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut lengths: Vec<usize> = plan.allocations.iter().map(|a| a.ranking_length).collect();
    lengths.sort_unstable();
    let subsets = build_nested_subsets(&samples, &sizes, &lengths, args.seed)?;

    run.write_json("plan.json", &plan)?;
    for (&(size, length), subset) in &subsets {
        let planned = plan
            .allocations
            .iter()
            .any(|a| a.prompt_count == size && a.ranking_length == length);
        if !planned && !args.all_combinations {
            continue;
        }
        let stem = format!("subset-{size}-k{length}");
        let data_path = run.output(&format!("{stem}.jsonl"));
        save_jsonl(&data_path, subset)?;
        let manifest = SubsetManifest {
            spec: SubsetSpec {
                size,
                ranking_length: length,
                seed: args.seed,
            },
            ids: subset.iter().map(|s| s.id.as_str()).collect(),
            diversity: corpus_diversity(subset, args.ngram, args.decay)?,
        };
        run.write_json(&format!("{stem}.json"), &manifest)?;
    }
    let manifest = run.finish()?;
    println!("{}", serde_json::to_string(&manifest.outputs)?);
    Ok(())
}

fn resolve_scorer(args: &RerankArgs) -> Result<Box<dyn Scorer>> {
    if args.mock {
        return Ok(Box::new(MockScorer));
    }
    let url = args
        .scorer_url
        .clone()
        .or_else(|| std::env::var(SCORER_URL_ENV).ok())
        .ok_or_else(|| anyhow!("no scorer configured: pass --scorer-url, set {SCORER_URL_ENV}, or use --mock"))?;
    Ok(Box::new(RemoteScorer::new(&url)?))
}

pub fn rerank(args: &RerankArgs) -> Result<()> {
    let scorer = resolve_scorer(args)?;
    let mut run = RunRecorder::new("rerank", args, &args.out.output_dir, None)?;
    run.input(&args.input)?;
    let samples = load(&args.input)?;

    let mut owners = Vec::new();
    let mut requests = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for r in &s.responses {
            let req = ScoreRequest::new(s.prompt.clone(), r.clone())
                .with_context(|| format!("sample {}", s.id))?;
            requests.push(req);
            owners.push(i);
        }
    }
    let runtime = tokio::runtime::Runtime::new()?;
    let responses = runtime
        .block_on(score_batch(scorer.as_ref(), &requests, args.max_in_flight))
        .map_err(|e| match &e {
            ScoreError::Batch { index, .. } => {
                anyhow!("scoring sample {} failed: {e}", samples[owners[*index]].id)
            }
            _ => anyhow!(e),
        })?;

    let mut reranked = Vec::with_capacity(samples.len());
    let mut offset = 0;
    for s in &samples {
        let n = s.responses.len();
        let scores: Vec<f64> = responses[offset..offset + n].iter().map(|r| r.score).collect();
        offset += n;
        reranked.push(rerank_with_scores(s, &scores)?);
    }
    let out = run.output("reranked.jsonl");
    save_jsonl(&out, &reranked)?;
    run.finish()?;
    println!("{}", serde_json::json!({"samples": reranked.len()}));
    Ok(())
}

#[derive(Serialize)]
struct AugmentReport<'a> {
    before: DiversityScore,
    after: DiversityScore,
    uniform_baseline: DiversityScore,
    added_ids: Vec<&'a str>,
}

pub fn augment(args: &AugmentArgs) -> Result<()> {
    let mut run = RunRecorder::new("augment", args, &args.out.output_dir, Some(args.seed))?;
    run.input(&args.seed_set)?;
    run.input(&args.pool)?;
    let seed_set = load(&args.seed_set)?;
    let pool = load(&args.pool)?;
    let config = AugmentationConfig {
        n_support: args.n_support,
        batch_size: args.batch,
        count: args.count,
        ngram_order: args.ngram,
        seed: args.seed,
    };
    let outcome = augment_dataset(&seed_set, &pool, &config)?;
    let baseline = uniform_growth(&seed_set, &pool, args.count, args.seed)?;

    let report = AugmentReport {
        before: corpus_diversity(&seed_set, args.ngram, args.decay)?,
        after: corpus_diversity(&outcome.samples, args.ngram, args.decay)?,
        uniform_baseline: corpus_diversity(&baseline, args.ngram, args.decay)?,
        added_ids: outcome.added().iter().map(|s| s.id.as_str()).collect(),
    };
    let data = run.output("augmented.jsonl");
    save_jsonl(&data, &outcome.samples)?;
    run.write_json("augment_report.json", &report)?;
    run.write_json("augment_steps.json", &outcome.steps)?;
    run.finish()?;
    println!(
        "{}",
        serde_json::json!({"before": report.before.d, "after": report.after.d, "uniform_baseline": report.uniform_baseline.d})
    );
    Ok(())
}

#[derive(Deserialize)]
struct LossInstance {
    candidate_logprobs: Vec<f64>,
    top_token_logprobs: Vec<f64>,
    rewards: Vec<f64>,
    beta: f64,
}

#[derive(Serialize)]
struct LossReport {
    sft_loss: f64,
    ranking_loss: f64,
    loss: f64,
    temperatures: Vec<Vec<f64>>,
    gradient: LossGradient,
    finite_difference: LossGradient,
    delta: LossGradient,
    max_relative_error: f64,
}

fn check_instance(inst: LossInstance, h: f64) -> Result<LossReport> {
    ensure!(
        inst.rewards.len() == inst.candidate_logprobs.len(),
        "{} rewards for {} candidates",
        inst.rewards.len(),
        inst.candidate_logprobs.len()
    );
    let lp = RankingLogProbs::new(inst.candidate_logprobs, inst.top_token_logprobs)?;
    let temps = pro_temperatures(&inst.rewards)?;
    let gradient = pro_loss_grad(&lp, &temps, inst.beta)?;
    let fd = pro_loss_finite_diff(&lp, &temps, inst.beta, h)?;
    let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let delta = LossGradient {
        candidate_logprobs: sub(&gradient.candidate_logprobs, &fd.candidate_logprobs),
        top_token_logprobs: sub(&gradient.top_token_logprobs, &fd.top_token_logprobs),
    };
    let max_relative_error = gradient
        .candidate_logprobs
        .iter()
        .chain(&gradient.top_token_logprobs)
        .zip(fd.candidate_logprobs.iter().chain(&fd.top_token_logprobs))
        .map(|(a, b)| relative_error(*a, *b, GRADIENT_CHECK_FLOOR))
        .fold(0.0, f64::max);
    Ok(LossReport {
        sft_loss: sft_loss(&lp.top_token_logprobs)?,
        ranking_loss: pro_ranking_loss(&lp, &temps)?,
        loss: pro_loss(&lp, &temps, inst.beta)?,
        temperatures: temps.rows().to_vec(),
        gradient,
        finite_difference: fd,
        delta,
        max_relative_error,
    })
}

pub fn loss_check(args: &LossCheckArgs) -> Result<()> {
    let mut run = RunRecorder::new("loss-check", args, &args.out.output_dir, None)?;
    run.input(&args.input)?;
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("cannot read {}", args.input.display()))?;
    let instances: Vec<LossInstance> = serde_json::from_str(&text)
        .with_context(|| format!("{}: expected a JSON array of loss instances", args.input.display()))?;
    let reports = instances
        .into_iter()
        .enumerate()
        .map(|(i, inst)| check_instance(inst, args.h).with_context(|| format!("instance {i}")))
        .collect::<Result<Vec<_>>>()?;
    run.write_json("loss_check.json", &reports)?;
    run.finish()?;

    let failed: Vec<usize> = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| r.max_relative_error > args.tolerance)
        .map(|(i, _)| i)
        .collect();
    if !failed.is_empty() {
        bail!(
            "gradient check exceeded relative tolerance {} for instances {failed:?}",
            args.tolerance
        );
    }
    println!("{}", serde_json::json!({"instances": reports.len(), "max_relative_error": reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max)}));
    Ok(())
}
