use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crossrank_core::embedstore::{
    load_embedding_set, read_labels_csv, save_embedding_set, LabelRecord, LabelStorage, LabelsRef,
    Manifest,
};
use crossrank_core::gradcheck::{check_attention, check_cross_entropy, check_triplet, GradCheckReport};
use crossrank_core::io::write_atomic;
use crossrank_core::losses::{total_loss, DistillationForm, LossWeights};
use crossrank_core::metrics::{average_precision, precision_at_k};
use crossrank_core::ranking::{write_distance_csv, write_rank_csv};
use crossrank_core::rerank::{relevance_matrix, rerank_queries, QueryOutcome, TraceOptions};
use crossrank_core::synth::{generate, SynthSpec};
use crossrank_core::{
    pairwise_distances, rank_rows, DistanceMatrix, EmbeddingSet, Error, GalleryGraph, RankMatrix,
    RetrievalResult,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{CliError, CliResult};
use crate::loss_input::{BatchFile, WeightsArg};
use crate::{
    CheckKind, EvalArgs, GenSynthArgs, GradcheckArgs, LossEvalArgs, RankArgs, RerankArgs, SetArgs,
    Switch, TraceArgs,
};

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn log(stage: &str) {
    eprintln!("crossrank: {stage}");
}

pub fn gen_synth(args: &GenSynthArgs) -> CliResult<()> {
    let mut spec = match &args.spec {
        Some(path) => serde_json::from_slice::<SynthSpec>(&read_bytes(path)?)?,
        None => SynthSpec::chain_demo(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (gallery, queries) = generate::<f64>(&spec)?;
    save_embedding_set(&gallery, &args.out_dir, "gallery", LabelStorage::CsvFile)?;
    save_embedding_set(&queries, &args.out_dir, "queries", LabelStorage::CsvFile)?;
    log(&format!(
        "wrote {} gallery and {} query rows to {}",
        gallery.len(),
        queries.len(),
        args.out_dir.display()
    ));
    Ok(())
}

struct LoadedSets {
    gallery: EmbeddingSet<f64>,
    queries: EmbeddingSet<f64>,
    query_gallery: DistanceMatrix<f64>,
}

fn load_sets(gallery: &Path, queries: &Path) -> CliResult<LoadedSets> {
    let gallery = load_embedding_set::<f64>(gallery)?;
    let queries = load_embedding_set::<f64>(queries)?;
    let query_gallery = pairwise_distances(&queries, &gallery)?;
    log(&format!(
        "loaded {} queries x {} gallery items, dim {}",
        queries.len(),
        gallery.len(),
        gallery.dim()
    ));
    Ok(LoadedSets {
        gallery,
        queries,
        query_gallery,
    })
}

fn dump(dir: &Path, sets: &LoadedSets, graph: Option<&GalleryGraph<f64>>, qg_ranks: &RankMatrix) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let qg = &sets.query_gallery;
    write_distance_csv(qg, &dir.join("query_gallery_distances.csv"))?;
    write_rank_csv(qg_ranks, qg.row_ids(), qg.col_ids(), &dir.join("query_gallery_ranks.csv"))?;
    let built;
    let graph = match graph {
        Some(g) => g,
        None => {
            built = GalleryGraph::build(&sets.gallery)?;
            &built
        }
    };
    let gg = graph.distances();
    write_distance_csv(gg, &dir.join("gallery_gallery_distances.csv"))?;
    write_rank_csv(graph.ranks(), gg.row_ids(), gg.col_ids(), &dir.join("gallery_gallery_ranks.csv"))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RankingRow {
    query_id: String,
    rank: usize,
    gallery_id: String,
    distance: f64,
}

/// One row per (query, position), positions 1-based.
fn rankings_csv<'a>(
    gallery_ids: &[String],
    per_query: impl Iterator<Item = (&'a str, &'a [usize], &'a [f64])>,
) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (query_id, order, distances) in per_query {
        for (pos, &g) in order.iter().enumerate() {
            w.serialize(RankingRow {
                query_id: query_id.to_string(),
                rank: pos + 1,
                gallery_id: gallery_ids[g].clone(),
                distance: distances[g],
            })?;
        }
    }
    w.into_inner()
        .map_err(|e| CliError::from(csv::Error::from(e.into_error())))
}

fn set_args_dump(sets_args: &SetArgs) -> Option<&Path> {
    sets_args.dump_dir.as_deref()
}

pub fn rank(args: &RankArgs) -> CliResult<()> {
    let sets = load_sets(&args.sets.gallery, &args.sets.queries)?;
    let ranks = rank_rows(&sets.query_gallery);
    let qg = &sets.query_gallery;
    let orders: Vec<Vec<usize>> = (0..qg.rows()).map(|q| ranks.order_row(q).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..qg.rows()).map(|q| qg.row(q).to_vec()).collect();
    let bytes = rankings_csv(
        sets.gallery.ids(),
        (0..qg.rows()).map(|q| (qg.row_ids()[q].as_str(), orders[q].as_slice(), rows[q].as_slice())),
    )?;
    if let Some(dir) = set_args_dump(&args.sets) {
        dump(dir, &sets, None, &ranks)?;
    }
    write_atomic(&args.out, &bytes)?;
    log(&format!("wrote {}", args.out.display()));
    Ok(())
}

fn run_rerank(
    sets: &LoadedSets,
    graph: &GalleryGraph<f64>,
    flags: &crate::RerankFlags,
    full_trace: bool,
) -> CliResult<Vec<QueryOutcome<f64>>> {
    let cfg = flags.config()?;
    let relevance = relevance_matrix(&sets.queries, &sets.gallery);
    let opts = TraceOptions {
        thin: !full_trace,
        keep_rankings: false,
    };
    let outcomes = rerank_queries(&sets.query_gallery, graph, &cfg, &opts, Some(&relevance))?;
    let converged = outcomes.iter().filter(|o| o.trace.converged_at().is_some()).count();
    let last = outcomes.iter().map(|o| o.state.iteration).max().unwrap_or(0);
    log(&format!(
        "re-ranked {} queries: {converged} converged, longest run {last} iterations",
        outcomes.len()
    ));
    Ok(outcomes)
}

pub fn rerank(args: &RerankArgs) -> CliResult<()> {
    args.flags.config()?;
    let sets = load_sets(&args.sets.gallery, &args.sets.queries)?;
    let graph = GalleryGraph::build(&sets.gallery)?;
    let outcomes = run_rerank(&sets, &graph, &args.flags, args.full_trace)?;
    let bytes = rankings_csv(
        sets.gallery.ids(),
        outcomes.iter().map(|o| {
            (
                o.query_id.as_str(),
                o.state.ranking.as_slice(),
                o.state.distances.as_slice(),
            )
        }),
    )?;
    let trace = match &args.trace_out {
        Some(_) => Some(query_trace_csv(&outcomes)?),
        None => None,
    };
    if let Some(dir) = set_args_dump(&args.sets) {
        dump(dir, &sets, Some(&graph), &rank_rows(&sets.query_gallery))?;
    }
    write_atomic(&args.out, &bytes)?;
    if let (Some(path), Some(trace)) = (&args.trace_out, trace) {
        write_atomic(path, &trace)?;
    }
    log(&format!("wrote {}", args.out.display()));
    Ok(())
}

/// `(iteration, AP@all)` per query with the repeated fixed-point snapshot
/// folded into the iteration that first reached it.
fn fixed_point_series(o: &QueryOutcome<f64>) -> Vec<(usize, Option<f64>)> {
    let mut series: Vec<(usize, Option<f64>)> = o
        .trace
        .snapshots
        .iter()
        .map(|s| (s.iteration, s.average_precision))
        .collect();
    if let Some(t) = o.trace.converged_at() {
        let last = series.len() - 1;
        series[last].0 = t - 1;
        if last > 0 && series[last - 1].0 == t - 1 {
            series.pop();
        }
    }
    series
}

fn query_trace_csv(outcomes: &[QueryOutcome<f64>]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query_id", "iteration", "ap"])?;
    for o in outcomes {
        for (t, ap) in fixed_point_series(o) {
            let ap = ap.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([o.query_id.as_str(), &t.to_string(), &ap])?;
        }
    }
    w.into_inner()
        .map_err(|e| CliError::from(csv::Error::from(e.into_error())))
}

pub fn trace(args: &TraceArgs) -> CliResult<()> {
    args.flags.config()?;
    let sets = load_sets(&args.gallery, &args.queries)?;
    let graph = GalleryGraph::build(&sets.gallery)?;
    let outcomes = run_rerank(&sets, &graph, &args.flags, args.full_trace)?;
    let mut series = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let s = fixed_point_series(o);
        if s.iter().any(|(_, ap)| ap.is_none()) {
            return Err(Error::NoRelevantItems {
                query_id: o.query_id.clone(),
            }
            .into());
        }
        series.push(s);
    }
    let mut iterations: Vec<usize> = series.iter().flatten().map(|(t, _)| *t).collect();
    iterations.sort_unstable();
    iterations.dedup();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "map"])?;
    let mut cursor = vec![0usize; series.len()];
    for &t in &iterations {
        let mut sum = 0.0;
        for (s, c) in series.iter().zip(cursor.iter_mut()) {
            while *c + 1 < s.len() && s[*c + 1].0 <= t {
                *c += 1;
            }
            sum += s[*c].1.unwrap_or_default();
        }
        w.write_record([t.to_string(), (sum / series.len() as f64).to_string()])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::from(csv::Error::from(e.into_error())))?;
    write_atomic(&args.out, &bytes)?;
    log(&format!("wrote {} trace rows to {}", iterations.len(), args.out.display()));
    Ok(())
}

/// Labels from a headerless CSV or from a manifest's label reference.
fn read_labels(path: &Path) -> CliResult<HashMap<String, u32>> {
    let records: Vec<LabelRecord> = if path.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::read(path)?;
        match manifest.labels {
            LabelsRef::Inline(r) => r,
            LabelsRef::File(rel) => read_labels_csv(path.parent().unwrap_or(Path::new("")).join(rel))?,
        }
    } else {
        read_labels_csv(path)?
    };
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert(r.id.clone(), r.class_id).is_some() {
            return Err(Error::DuplicateId(r.id).into());
        }
    }
    Ok(map)
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    if args.k.is_empty() {
        return Err(CliError::Usage("--k needs at least one cutoff".into()));
    }
    let gallery = read_labels(&args.gallery_labels)?;
    let queries = read_labels(&args.query_labels)?;
    let mut class_sizes: HashMap<u32, usize> = HashMap::new();
    for &c in gallery.values() {
        *class_sizes.entry(c).or_default() += 1;
    }

    let rankings = read_bytes(&args.rankings)?;
    let mut reader = csv::Reader::from_reader(rankings.as_slice());
    let mut order: Vec<String> = Vec::new();
    let mut lists: HashMap<String, Vec<(usize, String)>> = HashMap::new();
    for row in reader.deserialize::<RankingRow>() {
        let row = row?;
        let list = lists.entry(row.query_id.clone()).or_insert_with(|| {
            order.push(row.query_id.clone());
            Vec::new()
        });
        list.push((row.rank, row.gallery_id));
    }

    let mut results = Vec::with_capacity(order.len());
    for qid in &order {
        let invalid = |message: String| Error::InvalidResult {
            query_id: qid.clone(),
            message,
        };
        let class = *queries
            .get(qid)
            .ok_or_else(|| invalid("query id missing from query labels".into()))?;
        let mut list = lists.remove(qid).unwrap_or_default();
        list.sort_by_key(|(rank, _)| *rank);
        if list.iter().enumerate().any(|(i, (rank, _))| *rank != i + 1) {
            return Err(invalid("ranks must run 1, 2, ... without gaps".into()).into());
        }
        let mut relevance = Vec::with_capacity(list.len());
        for (_, gid) in &list {
            let gc = gallery
                .get(gid)
                .ok_or_else(|| invalid(format!("gallery id {gid:?} missing from gallery labels")))?;
            relevance.push(*gc == class);
        }
        let ids = list.into_iter().map(|(_, g)| g).collect();
        let total = class_sizes.get(&class).copied().unwrap_or(0);
        results.push(RetrievalResult::new(qid.clone(), ids, relevance, total)?);
    }
    if results.is_empty() {
        return Err(Error::EmptyResults.into());
    }

    let denom = args.ap_denominator.into();
    let mut per_query = Vec::with_capacity(results.len());
    let mut map_sum = vec![0.0; args.k.len()];
    let mut prec_sum = vec![0.0; args.k.len()];
    for r in &results {
        let mut ap = Map::new();
        let mut prec = Map::new();
        for (i, &cutoff) in args.k.iter().enumerate() {
            let a = average_precision(r, cutoff, denom)?;
            let p = precision_at_k(r, cutoff.resolve(r.len()))?;
            map_sum[i] += a;
            prec_sum[i] += p;
            ap.insert(cutoff.to_string(), json!(a));
            prec.insert(cutoff.to_string(), json!(p));
        }
        per_query.push(json!({ "query_id": r.query_id, "ap": ap, "prec": prec }));
    }
    let n = results.len() as f64;
    let mean = |sums: &[f64]| -> Map<String, Value> {
        args.k
            .iter()
            .zip(sums)
            .map(|(c, s)| (c.to_string(), json!(s / n)))
            .collect()
    };
    let out = json!({
        "mAP": mean(&map_sum),
        "prec": mean(&prec_sum),
        "ap_denominator": denom.to_string(),
        "queries": results.len(),
        "per_query": per_query,
    });
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    write_atomic(&args.out, text.as_bytes())?;
    log(&format!("wrote {}", args.out.display()));
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let softmax = args.softmax == Switch::On;
    let mut reports: Vec<GradCheckReport> = Vec::new();
    if matches!(args.check, CheckKind::All | CheckKind::Attention) {
        reports.push(check_attention(args.seed, softmax)?);
    }
    if matches!(args.check, CheckKind::All | CheckKind::Triplet) {
        reports.push(check_triplet(args.seed)?);
    }
    if matches!(args.check, CheckKind::All | CheckKind::Ce) {
        reports.push(check_cross_entropy(args.seed)?);
    }
    println!("{}", serde_json::to_string_pretty(&reports)?);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(failed.join(", ")))
    }
}

pub fn loss_eval(args: &LossEvalArgs) -> CliResult<()> {
    let weights: WeightsArg = serde_json::from_str(&args.weights)
        .map_err(|e| CliError::Usage(format!("--weights: {e}")))?;
    let weights = LossWeights {
        triplet: weights.triplet,
        cad: weights.cad,
        ce: weights.ce,
        margin: args.margin,
        temperature: args.temperature,
        distillation: if args.mse { DistillationForm::Mse } else { DistillationForm::Kl },
    };
    weights.validate()?;
    let file: BatchFile = serde_json::from_slice(&read_bytes(&args.batch)?)?;
    let (batch, features) = file.into_inputs()?;
    let breakdown = total_loss(&batch, features.as_ref(), &weights)?;
    println!("{}", serde_json::to_string_pretty(&breakdown)?);
    Ok(())
}
