use crossrank_core::metrics::ap_of_ranking;
use crossrank_core::rerank::{rerank_gallery_against_queries, relevance_matrix, TraceOptions};
use crossrank_core::synth::{generate, SynthSpec};
use crossrank_core::RerankConfig;

#[test]
fn chain_demo_gains_early_and_lifts_the_chain_end() {
    let spec = SynthSpec::chain_demo();
    let (gallery, queries) = generate::<f64>(&spec).unwrap();
    let opts = TraceOptions { thin: false, keep_rankings: true };
    let cfg = RerankConfig::default();
    let outcomes = rerank_gallery_against_queries(&queries, &gallery, &cfg, &opts, true).unwrap();
    let relevance = relevance_matrix(&queries, &gallery);

    let map_at = |t: usize| -> f64 {
        outcomes
            .iter()
            .map(|o| {
                let snap = o.trace.snapshots.get(t).unwrap_or_else(|| o.trace.snapshots.last().unwrap());
                snap.average_precision.unwrap()
            })
            .sum::<f64>()
            / outcomes.len() as f64
    };
    let before = map_at(0);
    let after = outcomes
        .iter()
        .zip(&relevance)
        .map(|(o, rel)| ap_of_ranking(&o.state.ranking, rel).unwrap())
        .sum::<f64>()
        / outcomes.len() as f64;
    assert!(after > before, "{before} -> {after}");
    assert!((map_at(20) - before) >= 0.8 * (after - before));
    assert!(outcomes.iter().all(|o| o.trace.converged_at().is_some()));

    let chain_end = *spec.chain_gallery_indices().last().unwrap();
    let chain_class = spec.chain.as_ref().unwrap().class_id;
    for (o, class) in outcomes.iter().zip(queries.class_ids()) {
        if class == chain_class {
            let start = o.trace.snapshots[0].ranking.as_ref().unwrap();
            let start_rank = start.iter().position(|&g| g == chain_end).unwrap();
            let end_rank = o.state.query_ranks[chain_end] - 1;
            assert!(end_rank < start_rank, "{}: {start_rank} -> {end_rank}", o.query_id);
        }
    }
}
