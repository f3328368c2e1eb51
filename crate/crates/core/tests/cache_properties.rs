mod support;

use std::io::Write;

use mmbias_core::backend::{ProbabilityCache, Prober, SyntheticBackend, SUBSET_SUM_TOLERANCE};
use mmbias_core::plan::build_probe_plan;
use mmbias_core::BiasSource;
use proptest::prelude::*;
use support::oracle::RandomAudit;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn caching_does_not_change_records(
        seed in any::<u64>(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..40),
        parallelism in 1usize..6,
    ) {
        let audit = RandomAudit::generate(seed);
        let plan = build_probe_plan(&audit.catalog(), Some(&audit.manifest()), &BiasSource::ALL).unwrap();
        let probes: Vec<_> = picks.iter().map(|i| plan.queries[i.index(plan.len())].clone()).collect();

        let plain = Prober::new(SyntheticBackend::new(audit.table.clone())).with_parallelism(parallelism);
        let cached = Prober::new(SyntheticBackend::new(audit.table.clone()))
            .with_cache(ProbabilityCache::in_memory())
            .with_parallelism(parallelism);

        let a: Vec<_> = probes.iter().map(|p| plain.query(p).unwrap()).collect();
        let b: Vec<_> = probes.iter().map(|p| cached.query(p).unwrap()).collect();
        prop_assert_eq!(&a, &b);

        let batch = cached.query_batch(&probes);
        let again: Vec<_> = batch.results.into_iter().map(Result::unwrap).collect();
        prop_assert_eq!(&a, &again);

        let distinct: std::collections::BTreeSet<_> = probes.iter().map(|p| p.key()).collect();
        prop_assert_eq!(cached.wire_requests(), distinct.len());
        prop_assert_eq!(plain.wire_requests(), probes.len());

        for record in &a {
            let sum: f64 = record.probabilities.values().sum();
            prop_assert!(sum <= 1.0 + SUBSET_SUM_TOLERANCE);
        }
    }
}

#[test]
fn synthetic_backend_is_deterministic_across_instances() {
    let audit = RandomAudit::generate(11);
    let plan =
        build_probe_plan(&audit.catalog(), Some(&audit.manifest()), &BiasSource::ALL).unwrap();
    let a = Prober::new(SyntheticBackend::new(audit.table.clone())).query_batch(&plan.queries);
    let b = Prober::new(SyntheticBackend::new(audit.table.clone())).query_batch(&plan.queries);
    let a: Vec<_> = a.records().cloned().collect();
    let b: Vec<_> = b.records().cloned().collect();
    assert_eq!(a.len(), plan.len());
    assert_eq!(a, b);
}

#[test]
fn persisted_cache_survives_reopen_and_a_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let audit = RandomAudit::generate(3);
    let plan =
        build_probe_plan(&audit.catalog(), Some(&audit.manifest()), &BiasSource::ALL).unwrap();

    let first = Prober::new(SyntheticBackend::new(audit.table.clone()))
        .with_cache(ProbabilityCache::open(&path).unwrap());
    let cold: Vec<_> = first
        .query_batch(&plan.queries)
        .records()
        .cloned()
        .collect();
    assert_eq!(first.wire_requests(), plan.len());
    drop(first);

    // Simulate a crash halfway through writing one more line.
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap();
    f.write_all(br#"{"backend_id":"synthetic-"#).unwrap();
    drop(f);

    let second = Prober::new(SyntheticBackend::new(audit.table.clone()))
        .with_cache(ProbabilityCache::open(&path).unwrap());
    let warm: Vec<_> = second
        .query_batch(&plan.queries)
        .records()
        .cloned()
        .collect();
    assert_eq!(second.wire_requests(), 0);
    assert_eq!(cold, warm);
    drop(second);

    // The torn line stays isolated: the file still reopens cleanly.
    let reopened = ProbabilityCache::open(&path).unwrap();
    assert!(!reopened.is_empty());
}
