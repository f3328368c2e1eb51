//! Acceptance suite. Prints one PASS/FAIL line per criterion to stderr
//! (uncaptured, so the summary shows in a plain `cargo test` run) and fails
//! if any criterion fails.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mmbias_cli::config::{AuditConfig, ConfigLayer};
use mmbias_cli::{cmd_audit, cmd_plan, cmd_survey, SurveyArgs};
use mmbias_core::backend::{ModelTag, Prober, SyntheticBackend, SyntheticTable};
use mmbias_core::corpus::parse_image_manifest;
use mmbias_core::report::AuditReport;
use mmbias_core::scoring::{association_score, bias_score, AssociationScore, Direction};
use mmbias_core::{run_audit, AgentSet, AuditInputs, BiasSource, Catalog, Gender, ImageManifest};
use oracle::RandomAudit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn case_study() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/case_study")
}

fn case_study_config(out: &Path, sources: Option<Vec<BiasSource>>) -> AuditConfig {
    let file = ConfigLayer::load(case_study().join("audit.conf")).unwrap();
    let flags = ConfigLayer {
        out: Some(out.to_path_buf()),
        sources,
        ..Default::default()
    };
    AuditConfig::resolve(flags.over(file), None).unwrap()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn image_argmax_pattern() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = case_study_config(dir.path(), Some(vec![BiasSource::Visual]));
    config.cache = None;
    let report = cmd_audit(&config).map_err(|e| e.to_string())?.run.report;
    let find = |id: &str| {
        report
            .image_predictions
            .iter()
            .find(|p| p.image_id == id)
            .ok_or(format!("no prediction for {id}"))
    };
    let man = find("purse-man-1")?;
    let woman = find("briefcase-woman-8")?;
    ensure(man.caption == "The person is carrying a [MASK] .", || {
        man.caption.clone()
    })?;
    ensure(
        man.probabilities["purse"] == 0.0018 && man.probabilities["briefcase"] == 0.4944,
        || format!("man-image probabilities {:?}", man.probabilities),
    )?;
    ensure(
        woman.probabilities["purse"] == 0.084 && woman.probabilities["briefcase"] == 0.067,
        || format!("woman-image probabilities {:?}", woman.probabilities),
    )?;
    ensure(
        man.depicted == "purse" && man.predicted == "briefcase" && !man.aligned,
        || format!("man image: {man:?}"),
    )?;
    ensure(
        woman.depicted == "briefcase" && woman.predicted == "purse" && !woman.aligned,
        || format!("woman image: {woman:?}"),
    )?;
    within(Duration::from_secs(1), start)?;
    Ok(format!(
        "man image -> {} (x), woman image -> {} (x)",
        man.predicted, woman.predicted
    ))
}

const CARRY: &str = "The [AGENT] is carrying a [ENTITY] .";

fn purse_audit(per_gender: usize, table: SyntheticTable) -> Result<AuditReport, String> {
    let catalog = Catalog::parse(
        &format!("carry\t{CARRY}\npurse\tcarry\tnone\n"),
        AgentSet::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut manifest = String::new();
    for g in ["m", "f"] {
        for k in 0..per_gender {
            manifest.push_str(&format!("purse\t{g}\tp-{g}{k}\tp/{g}{k}.jpg\n"));
        }
    }
    let manifest: ImageManifest = parse_image_manifest(&manifest).map_err(|e| e.to_string())?;
    let prober = Prober::new(SyntheticBackend::new(table));
    run_audit(
        AuditInputs {
            catalog: &catalog,
            manifest: Some(&manifest),
            sources: &BiasSource::ALL,
            labels: &[],
        },
        &prober,
    )
    .map(|r| r.report)
    .map_err(|e| e.to_string())
}

fn cap(agent: &str) -> String {
    format!("The {agent} is carrying a [MASK] .")
}

fn score_algebra() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let samples = 2000;

    for _ in 0..samples {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        ensure(association_score(a, b) == -association_score(b, a), || {
            format!("antisymmetry fails at ({a}, {b})")
        })?;
        let mk = |g, v| AssociationScore {
            entity: "purse".into(),
            gender: g,
            source: BiasSource::Language,
            value: v,
            terms: Vec::new(),
        };
        let (f, m) = (
            mk(Gender::Female, a * 10.0 - 5.0),
            mk(Gender::Male, b * 10.0 - 5.0),
        );
        let fwd = bias_score(&f, &m).map_err(|e| e.to_string())?;
        let swap = bias_score(&m, &f).map_err(|e| e.to_string())?;
        let flipped = match fwd.direction {
            Direction::Female => Direction::Male,
            Direction::Male => Direction::Female,
            Direction::None => Direction::None,
        };
        ensure(
            swap.value == -fwd.value && swap.direction == flipped,
            || "gender swap does not negate".into(),
        )?;
    }

    // Neutral-term cancellation: one image carrying the imageless gendered
    // probabilities; the language bias over that image equals the direct one.
    for _ in 0..50 {
        let p = |rng: &mut ChaCha8Rng| rng.random_range(1e-5..0.9);
        let (pm, pf, pp) = (p(&mut rng), p(&mut rng), p(&mut rng));
        let mut t = SyntheticTable::new();
        let vl = ModelTag::VisionLanguage;
        for (img, pm, pf, pp) in [("p-m0", pm, pf, pp), ("p-f0", pm, pf, pp)] {
            t.insert(cap("man"), Some(img), vl, "purse", pm);
            t.insert(cap("woman"), Some(img), vl, "purse", pf);
            t.insert(cap("person"), Some(img), vl, "purse", pp);
        }
        for (agent, q) in [("man", pm), ("woman", pf), ("person", pp)] {
            t.insert(cap(agent), None, vl, "purse", q);
            t.insert(cap(agent), None, ModelTag::TextOnly, "purse", 0.5);
        }
        let report = purse_audit(1, t)?;
        let language = report
            .row("purse", BiasSource::Language)
            .ok_or("no language row")?;
        let direct = &report.language_bias[0];
        ensure(
            (language.bias - direct.b_vision_language).abs() <= 1e-9,
            || {
                format!(
                    "cancellation: {} vs {}",
                    language.bias, direct.b_vision_language
                )
            },
        )?;
    }

    // Scale invariance on random full audits.
    for seed in 0..40 {
        let audit = RandomAudit::generate(seed);
        let c = rng.random_range(0.01..=1.0);
        let catalog = audit.catalog();
        let manifest = audit.manifest();
        let run = |table: SyntheticTable| {
            run_audit(
                AuditInputs {
                    catalog: &catalog,
                    manifest: Some(&manifest),
                    sources: &BiasSource::ALL,
                    labels: &[],
                },
                &Prober::new(SyntheticBackend::new(table)),
            )
            .map(|r| r.report)
            .map_err(|e| e.to_string())
        };
        let base = run(audit.table.clone())?;
        let scaled = run(audit.table.map_probabilities(|p| p * c))?;
        for (x, y) in base.rows.iter().zip(&scaled.rows) {
            let d = (x.s_male - y.s_male)
                .abs()
                .max((x.s_female - y.s_female).abs())
                .max((x.bias - y.bias).abs());
            ensure(d <= 1e-9, || {
                format!("scale {c} moved {}/{} by {d}", x.entity, x.source)
            })?;
        }
    }

    // Aggregation order: female images 0.1 and 0.3, baseline 0.1.
    let mut t = SyntheticTable::new();
    let vl = ModelTag::VisionLanguage;
    for (img, p) in [("p-m0", 0.5), ("p-m1", 0.5), ("p-f0", 0.1), ("p-f1", 0.3)] {
        for agent in ["man", "woman"] {
            t.insert(cap(agent), Some(img), vl, "purse", 0.5);
        }
        t.insert(cap("person"), Some(img), vl, "purse", p);
    }
    for agent in ["man", "woman", "person"] {
        t.insert(cap(agent), None, vl, "purse", 0.1);
        t.insert(cap(agent), None, ModelTag::TextOnly, "purse", 0.1);
    }
    let report = purse_audit(2, t)?;
    let s_v = report
        .row("purse", BiasSource::Visual)
        .ok_or("no visual row")?
        .s_female;
    let ln2 = std::f64::consts::LN_2;
    ensure((s_v - ln2).abs() < 1e-12, || {
        format!("S_V = {s_v}, expected ln 2")
    })?;
    ensure((s_v - 3f64.sqrt().ln()).abs() > 0.1, || {
        "S_V equals ln sqrt 3".into()
    })?;

    within(Duration::from_secs(5), start)?;
    Ok(format!("{samples} samples; S_V = {s_v:.6} (ln 2)"))
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for seed in 0..200 {
        let audit = RandomAudit::generate(seed);
        let catalog = audit.catalog();
        let manifest = audit.manifest();
        let report = run_audit(
            AuditInputs {
                catalog: &catalog,
                manifest: Some(&manifest),
                sources: &BiasSource::ALL,
                labels: &[],
            },
            &Prober::new(SyntheticBackend::new(audit.table.clone())),
        )
        .map_err(|e| format!("seed {seed}: {e}"))?
        .report;
        let expected = audit.all_scores();
        ensure(report.rows.len() == expected.len(), || {
            format!("seed {seed}: row count")
        })?;
        for ((entity, source), (m, f, b)) in expected {
            let row = report
                .row(&entity, source)
                .ok_or(format!("seed {seed}: missing {entity}/{source}"))?;
            for d in [row.s_male - m, row.s_female - f, row.bias - b] {
                worst = worst.max(d.abs());
                compared += 1;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "200 tables, {compared} values, max deviation {worst:.1e}"
    ))
}

fn survey_aggregation() -> Check {
    let start = Instant::now();
    let outcome = cmd_survey(&SurveyArgs {
        survey: case_study().join("survey.tsv"),
        out: None,
        annotators: Some(10),
    })
    .map_err(|e| e.to_string())?;
    let n = outcome.labels.len();
    ensure(n == 40, || format!("{n} labels retained"))?;
    ensure(outcome.labels.iter().all(|l| l.agreement > 0.5), || {
        "a label without strict majority".into()
    })?;
    within(Duration::from_secs(1), start)?;
    Ok("40/50 entities retained".into())
}

fn plan_audit_consistency() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = case_study_config(dir.path(), None);
    let plan = cmd_plan(&config).map_err(|e| e.to_string())?;
    let cold = cmd_audit(&config).map_err(|e| e.to_string())?;
    let cold_json = std::fs::read(dir.path().join("report.json")).map_err(|e| e.to_string())?;
    ensure(cold.run.report.rows.len() == 18, || {
        format!("{} rows", cold.run.report.rows.len())
    })?;
    ensure(plan.total == cold.run.wire_requests, || {
        format!("plan {} vs cold {}", plan.total, cold.run.wire_requests)
    })?;
    let warm = cmd_audit(&config).map_err(|e| e.to_string())?;
    let warm_json = std::fs::read(dir.path().join("report.json")).map_err(|e| e.to_string())?;
    ensure(warm.run.wire_requests == 0, || {
        format!("warm rerun sent {} requests", warm.run.wire_requests)
    })?;
    ensure(warm_json == cold_json, || "warm report differs".into())?;
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "plan {} = cold {}; warm 0, report identical",
        plan.total, cold.run.wire_requests
    ))
}

fn directional_sanity() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = case_study_config(dir.path(), Some(vec![BiasSource::Pretraining]));
    config.cache = None;
    let report = cmd_audit(&config).map_err(|e| e.to_string())?.run.report;
    let b = |e: &str| {
        report
            .language_bias
            .iter()
            .find(|r| r.entity == e)
            .map(|r| (r.b_vision_language, r.b_text_only))
            .ok_or(format!("no language bias for {e}"))
    };
    let (purse_vl, purse_l) = b("purse")?;
    let (case_vl, case_l) = b("briefcase")?;
    ensure(purse_vl > 0.0 && purse_l > 0.0, || {
        format!("B_L(purse) = {purse_vl}, {purse_l}")
    })?;
    ensure(case_vl < 0.0 && case_l < 0.0, || {
        format!("B_L(briefcase) = {case_vl}, {case_l}")
    })?;
    Ok(format!(
        "B_L(purse) = {purse_vl:+.4}, B_L(briefcase) = {case_vl:+.4}"
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 6] = [
        ("image argmax pattern", image_argmax_pattern),
        ("score algebra", score_algebra),
        ("oracle equivalence", oracle_equivalence),
        ("survey aggregation", survey_aggregation),
        ("plan/audit consistency", plan_audit_consistency),
        ("directional sanity", directional_sanity),
    ];
    let mut failed = 0;
    let mut lines = String::new();
    for (name, check) in criteria {
        match check() {
            Ok(detail) => lines.push_str(&format!("PASS  {name}: {detail}\n")),
            Err(why) => {
                failed += 1;
                lines.push_str(&format!("FAIL  {name}: {why}\n"));
            }
        }
    }
    let _ = std::io::stderr().write_all(lines.as_bytes());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
