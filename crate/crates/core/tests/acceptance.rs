//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chunkforest::corpus::synthetic_corpus;
use chunkforest::events::{CHUNK_MS, PHRASE_MS};
use chunkforest::features::{Bin, BinEdges, Dimension, DimensionBins, FeatureVector};
use chunkforest::forest::{
    build_forest_to_dir, load_forest, node_file_name, read_manifest, Forest, ForestConfig, NodePath,
};
use chunkforest::generator::{train, GeneratorModel, GeneratorSpec};
use chunkforest::midi::{export_midi, import_notes};
use chunkforest::seed::RngSeed;
use chunkforest::steering::{
    ConstraintSet, HistoryEntry, KeyChoice, OptionSet, RelativeChoice, Session, SessionMode, SteeringEngine,
};
use chunkforest::study::stats::paired_t;
use chunkforest::study::{make_assignments, numeric_score, ComparisonKind, Deck, OptionSlot, RawAnswer, StudyPlan};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn(&Fixture) -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

const CARD: &str = "happy";

struct Fixture {
    dir: tempfile::TempDir,
    forest: Arc<Forest>,
    build_time: Duration,
}

fn model() -> GeneratorModel {
    train(&synthetic_corpus(RngSeed(0), 24), GeneratorSpec::default()).expect("training succeeds")
}

fn forest_dir(dir: &Path) -> std::path::PathBuf {
    dir.join("forest")
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let model = model();
    let start = Instant::now();
    build_forest_to_dir(
        &model,
        ForestConfig::new(10, 10, 10, 2024),
        &forest_dir(dir.path()),
        None,
    )
    .unwrap();
    let build_time = start.elapsed();
    let mut forest = load_forest(&forest_dir(dir.path())).unwrap();
    forest.index_features().unwrap();
    Fixture {
        dir,
        forest: Arc::new(forest),
        build_time,
    }
}

fn engine(forest: &Arc<Forest>) -> SteeringEngine {
    SteeringEngine::new(
        forest.clone(),
        Deck::default().ids().map(str::to_string).collect::<Vec<_>>(),
    )
}

fn cardinality(fx: &Fixture) -> Outcome {
    let full = ForestConfig::full_size(0);
    let (n1, n2, n3) = (100u64, 100u64, 100u64);
    ensure!(
        full.total_nodes() == n1 + n1 * n2 + n1 * n2 * n3,
        "total {}",
        full.total_nodes()
    );
    ensure!(full.total_nodes() == 1_010_100, "total {}", full.total_nodes());
    ensure!(full.phrase_count() == 1_000_000, "phrases {}", full.phrase_count());

    ensure!(
        fx.build_time < Duration::from_secs(60),
        "10/10/10 build took {:?}",
        fx.build_time
    );
    let mut per_depth = [0usize; 3];
    let mut ids = BTreeSet::new();
    fx.forest
        .for_each_node(|n| {
            per_depth[n.depth as usize - 1] += 1;
            ids.insert(n.id);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    ensure!(per_depth == [10, 100, 1000], "per depth {per_depth:?}");
    ensure!(ids.len() == 1110, "distinct ids {}", ids.len());
    ensure!(fx.forest.config().total_nodes() == 1110, "config total");
    Ok(())
}

fn timing(fx: &Fixture) -> Outcome {
    let mut bad = Vec::new();
    fx.forest
        .for_each_node(|n| {
            let ms: u32 = n.chunk.events().iter().map(|e| e.shift_ms()).sum();
            if ms != CHUNK_MS || n.chunk.duration_ms() != 5000 {
                bad.push((n.path.clone(), ms));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    ensure!(bad.is_empty(), "chunks not 5000 ms: {:?}", &bad[..bad.len().min(5)]);
    for i in 0..10 {
        for j in 0..10 {
            for k in 0..10 {
                let p = fx.forest.phrase_at(i, j, k).map_err(|e| e.to_string())?;
                let ms: u32 = p.events().iter().map(|e| e.shift_ms()).sum();
                ensure!(ms == PHRASE_MS && ms == 15000, "phrase {i}/{j}/{k} is {ms} ms");
                ensure!(
                    p.total_duration_ms() == 15000 && p.chunks().len() == 3,
                    "phrase {i}/{j}/{k}"
                );
            }
        }
    }
    Ok(())
}

// Oracle predicate, written against the stored edges without the engine's
// distance function.
fn oracle_bin(bins: &DimensionBins, v: f64) -> Bin {
    let below = bins.edges.iter().filter(|&&e| e < v).count();
    let at_or_below = bins.edges.iter().filter(|&&e| e <= v).count();
    Bin::ALL[(below + at_or_below) / 2]
}

fn oracle_satisfies(
    c: &ConstraintSet,
    x: &FeatureVector,
    depth: u8,
    parent: Option<&FeatureVector>,
    e: &BinEdges,
) -> bool {
    for (dim, choice) in &c.absolute {
        if let Some(want) = choice.bin() {
            if oracle_bin(e.dimension(depth, *dim).unwrap(), x.value(*dim)) != want {
                return false;
            }
        }
    }
    for (dim, choice) in &c.relative {
        let eps = e.dimension(depth, *dim).unwrap().epsilon;
        let d = x.value(*dim) - parent.unwrap().value(*dim);
        let ok = match choice {
            RelativeChoice::Any => true,
            RelativeChoice::Higher => d > eps,
            RelativeChoice::Lower => d < -eps,
            RelativeChoice::Same => d.abs() <= eps,
        };
        if !ok {
            return false;
        }
    }
    let (k, pk) = (x.key, parent.and_then(|p| p.key));
    match c.key_relation {
        KeyChoice::Any => true,
        KeyChoice::SameKey => k.is_some() && pk.is_some() && k == pk,
        KeyChoice::DifferentKey => k.is_some() && pk.is_some() && k != pk,
    }
}

fn random_constraints(rng: &mut ChaCha8Rng, depth: u8) -> ConstraintSet {
    let mut c = ConstraintSet::any();
    for dim in Dimension::ALL {
        if rng.random_bool(0.35) {
            c = c.with_absolute(dim, Bin::ALL[rng.random_range(0..5)]);
        }
        if depth > 1 && rng.random_bool(0.3) {
            let r = [RelativeChoice::Lower, RelativeChoice::Same, RelativeChoice::Higher][rng.random_range(0..3)];
            c = c.with_relative(dim, r);
        }
    }
    if depth > 1 && rng.random_bool(0.25) {
        c = c.with_key(if rng.random_bool(0.5) {
            KeyChoice::SameKey
        } else {
            KeyChoice::DifferentKey
        });
    }
    c
}

fn pick(engine: &SteeringEngine, s: &mut Session, rng: &mut ChaCha8Rng) -> Result<OptionSet, String> {
    let set = engine
        .request_options(s, &ConstraintSet::any())
        .map_err(|e| e.to_string())?;
    let i = rng.random_range(0..set.options.len());
    engine.select_option(s, Some(set.token), i).map_err(|e| e.to_string())?;
    Ok(set)
}

fn filter(fx: &Fixture) -> Outcome {
    let engine = engine(&fx.forest);
    let edges = fx.forest.bin_edges().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut relaxed_seen = 0;
    for case in 0..500u64 {
        let depth = rng.random_range(1..=3u8);
        let mut s = engine
            .start_session(format!("f{case}"), SessionMode::Steering, CARD, RngSeed(case))
            .unwrap();
        for _ in 1..depth {
            pick(&engine, &mut s, &mut rng)?;
        }
        let c = random_constraints(&mut rng, depth);
        let set = engine.request_options(&mut s, &c).map_err(|e| e.to_string())?;

        let parent_path = NodePath(s.selected_path.clone());
        let (pool, parent) = if depth == 1 {
            (fx.forest.roots().to_vec(), None)
        } else {
            let parent = fx.forest.node(&parent_path).unwrap().features.clone();
            let pool = fx
                .forest
                .children(&parent_path)
                .unwrap()
                .into_iter()
                .map(|n| n.into_owned())
                .collect();
            (pool, Some(parent))
        };
        let count: usize = if depth == 1 { 10 } else { 5 };
        let matching = pool
            .iter()
            .filter(|n| oracle_satisfies(&c, &n.features, depth, parent.as_ref(), edges))
            .count();
        let deficit = count.saturating_sub(matching);
        ensure!(set.options.len() == count, "case {case}: {} options", set.options.len());
        ensure!(
            set.matching == matching,
            "case {case}: matching {} vs oracle {matching}",
            set.matching
        );
        ensure!(
            set.shortfall == deficit,
            "case {case}: shortfall {} vs deficit {deficit}",
            set.shortfall
        );
        let paths: BTreeSet<_> = set.options.iter().map(|o| o.path.clone()).collect();
        ensure!(paths.len() == count, "case {case}: duplicate options");
        for o in &set.options {
            let node = fx.forest.node(&o.path).unwrap();
            ensure!(o.path.depth() == depth, "case {case}: wrong depth");
            if depth > 1 {
                ensure!(
                    o.path.parent().as_ref() == Some(&parent_path),
                    "case {case}: not a child"
                );
            }
            let ok = oracle_satisfies(&c, &node.features, depth, parent.as_ref(), edges);
            ensure!(
                ok != o.relaxed,
                "case {case}: {:?} relaxed={} satisfies={ok}",
                o.path,
                o.relaxed
            );
        }
        ensure!(
            set.options.iter().filter(|o| o.relaxed).count() == deficit,
            "case {case}: relaxed count"
        );
        relaxed_seen += deficit;
    }
    ensure!(relaxed_seen > 0, "no case exercised relaxation");
    Ok(())
}

fn option_counts(fx: &Fixture) -> Outcome {
    let engine = engine(&fx.forest);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for n in 0..100u64 {
        let mode = if n % 2 == 0 {
            SessionMode::Radio
        } else {
            SessionMode::Steering
        };
        let mut s = engine
            .start_session(format!("s{n}"), mode, CARD, RngSeed(n * 7 + 1))
            .unwrap();
        while !s.is_complete() {
            pick(&engine, &mut s, &mut rng)?;
        }
        let replayed = engine.replay(s.history()).map_err(|e| e.to_string())?;
        ensure!(replayed == s, "session {n} replay differs");
        let counts: Vec<usize> = replayed
            .history()
            .iter()
            .filter_map(|e| match e {
                HistoryEntry::Request { options, .. } => Some(options.len()),
                _ => None,
            })
            .collect();
        match mode {
            SessionMode::Radio => {
                ensure!(counts == [10], "radio session {n}: {counts:?}");
                if let Some(HistoryEntry::Request { options, .. }) = replayed.history().get(1) {
                    let roots: BTreeSet<u32> = options.iter().map(|p| p.0[0]).collect();
                    ensure!(roots.len() == 10, "radio session {n}: {} roots", roots.len());
                }
            }
            SessionMode::Steering => ensure!(counts == [10, 5, 5], "steering session {n}: {counts:?}"),
        }
    }
    Ok(())
}

fn binning(fx: &Fixture) -> Outcome {
    // Distinct values: every quintile holds exactly a fifth, within one.
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for trial in 0..50 {
        let mut values: Vec<f64> = (0..100).map(|_| rng.random_range(-50.0..50.0)).collect();
        values.dedup();
        let bins = DimensionBins::from_population(&values).unwrap();
        let mut counts = [0usize; 5];
        for v in &values {
            counts[bins.bin_of(*v).index()] += 1;
        }
        ensure!(counts.iter().all(|c| c.abs_diff(20) <= 1), "trial {trial}: {counts:?}");
    }

    // Forest depth-2 population of 100 nodes.
    let population = fx.forest.depth_features(2);
    ensure!(population.len() == 100, "population {}", population.len());
    let edges = fx.forest.bin_edges().unwrap();
    for dim in Dimension::ALL {
        let bins = edges.dimension(2, dim).unwrap();
        let values: Vec<f64> = population.iter().map(|f| f.value(dim)).collect();
        let mut counts = [0usize; 5];
        for v in &values {
            counts[bins.bin_of(*v).index()] += 1;
        }
        let tied_at_edge = bins.edges.iter().any(|e| values.iter().filter(|v| *v == e).count() > 1);
        if !tied_at_edge {
            ensure!(counts.iter().all(|c| c.abs_diff(20) <= 1), "{dim:?}: {counts:?}");
            continue;
        }
        // Ties: equal values share a bin, bins are monotone, and each bin's
        // deviation from 20 is covered by the tie groups on its edges.
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        for w in sorted.windows(2) {
            ensure!(bins.bin_of(w[0]) <= bins.bin_of(w[1]), "{dim:?}: not monotone");
        }
        for (b, count) in counts.iter().enumerate() {
            let lo = (b > 0).then(|| bins.edges[b - 1]);
            let hi = (b < 4).then(|| bins.edges[b]);
            let tie_mass: usize = [lo, hi]
                .iter()
                .flatten()
                .map(|e| values.iter().filter(|v| *v == e).count())
                .filter(|&c| c > 1)
                .sum();
            ensure!(
                count.abs_diff(20) <= 1 + tie_mass,
                "{dim:?} bin {b}: {count} with tie mass {tie_mass}"
            );
        }
    }
    Ok(())
}

fn determinism(fx: &Fixture) -> Outcome {
    let original = forest_dir(fx.dir.path());
    let manifest = read_manifest(&original).map_err(|e| e.to_string())?;
    let engine_a = engine(&fx.forest);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut logs = Vec::new();
    for n in 0..10u64 {
        let mode = if n % 3 == 0 {
            SessionMode::Radio
        } else {
            SessionMode::Steering
        };
        let mut s = engine_a.start_session(format!("d{n}"), mode, CARD, RngSeed(n)).unwrap();
        while !s.is_complete() {
            let depth = s.selected_path.len() as u8 + 1;
            let c = if mode == SessionMode::Steering {
                random_constraints(&mut rng, depth)
            } else {
                ConstraintSet::any()
            };
            let set = engine_a.request_options(&mut s, &c).map_err(|e| e.to_string())?;
            let i = rng.random_range(0..set.options.len());
            engine_a
                .select_option(&mut s, Some(set.token), i)
                .map_err(|e| e.to_string())?;
        }
        let phrase = export_midi(&engine_a.export_composition(&s).map_err(|e| e.to_string())?);
        logs.push((s.history_jsonl(), phrase));
    }

    // Rebuild from nothing but the manifest's recorded settings.
    let model = train(&synthetic_corpus(RngSeed(0), 24), manifest.generator.spec.clone()).unwrap();
    ensure!(model.digest() == manifest.generator.digest, "generator digest differs");
    let rebuilt_dir = fx.dir.path().join("rebuilt");
    let rebuilt = build_forest_to_dir(&model, manifest.config, &rebuilt_dir, None).map_err(|e| e.to_string())?;
    ensure!(rebuilt.digest == manifest.digest, "forest digest differs");
    for d in 1..=3 {
        let name = node_file_name(d);
        ensure!(
            std::fs::read(original.join(&name)).unwrap() == std::fs::read(rebuilt_dir.join(&name)).unwrap(),
            "{name} differs"
        );
    }
    let mut forest = load_forest(&rebuilt_dir).map_err(|e| e.to_string())?;
    forest.index_features().map_err(|e| e.to_string())?;
    let engine_b = engine(&Arc::new(forest));
    for (n, (log, phrase)) in logs.iter().enumerate() {
        let history = chunkforest::steering::parse_history_jsonl(log).map_err(|e| e.to_string())?;
        let s = engine_b.replay(&history).map_err(|e| format!("log {n}: {e}"))?;
        ensure!(s.history_jsonl() == *log, "log {n}: option sets differ");
        let again = export_midi(&engine_b.export_composition(&s).map_err(|e| e.to_string())?);
        ensure!(again == *phrase, "log {n}: phrase bytes differ");
    }
    Ok(())
}

// Oracle: two-sided Student-t tail for integer df from the finite
// trigonometric series.
fn t_two_sided(t: f64, df: u32) -> f64 {
    let theta = (t.abs() / f64::from(df).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let c2 = c * c;
    let mut sum = 1.0;
    let mut term = 1.0;
    if df % 2 == 1 {
        if df == 1 {
            return 1.0 - 2.0 * theta / std::f64::consts::PI;
        }
        let mut k = 2;
        while k < df - 1 {
            term *= f64::from(k) / f64::from(k + 1) * c2;
            sum += term;
            k += 2;
        }
        1.0 - 2.0 / std::f64::consts::PI * (theta + s * c * sum)
    } else {
        let mut k = 1;
        while k < df - 1 {
            term *= f64::from(k) / f64::from(k + 1) * c2;
            sum += term;
            k += 2;
        }
        1.0 - s * sum
    }
}

fn statistics(_: &Fixture) -> Outcome {
    let r = paired_t(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    ensure!(r.mean == 2.0 && r.sd == 1.0 && r.df() == 2, "fixture {r:?}");
    ensure!((r.t - 3.4641).abs() < 5e-5, "fixture t {}", r.t);
    ensure!((r.p - 0.0742).abs() < 5e-5, "fixture p {}", r.p);

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for case in 0..1000 {
        let n = rng.random_range(2..=50usize);
        let shift = rng.random_range(-1.0..1.0);
        let d: Vec<f64> = (0..n).map(|_| shift + rng.random_range(-2.0..2.0)).collect();
        let r = paired_t(&d).map_err(|e| e.to_string())?;
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let t = mean / (sd / (n as f64).sqrt());
        let p = t_two_sided(t, (n - 1) as u32);
        ensure!((r.t - t).abs() < 1e-9, "case {case}: t {} vs {t}", r.t);
        ensure!((r.p - p).abs() < 1e-9, "case {case}: n {n} p {} vs {p}", r.p);
    }
    Ok(())
}

fn midi_round_trip(fx: &Fixture) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut notes_seen = 0;
    for case in 0..100 {
        let (i, j, k) = (
            rng.random_range(0..10),
            rng.random_range(0..10),
            rng.random_range(0..10),
        );
        let phrase = fx.forest.phrase_at(i, j, k).map_err(|e| e.to_string())?;
        let notes = phrase.to_notes();
        let back = import_notes(&export_midi(&phrase)).map_err(|e| e.to_string())?;
        ensure!(back == notes, "case {case}: phrase {i}/{j}/{k} note lists differ");
        notes_seen += notes.len();
    }
    ensure!(notes_seen > 0, "phrases carried no notes");
    Ok(())
}

fn scale_conversion(_: &Fixture) -> Outcome {
    // (answer label, slot of the treatment system, expected score)
    let table: [(&str, u8, i8); 10] = [
        ("Strong preference for option 1", 2, -2),
        ("Weak preference for option 1", 2, -1),
        ("No preference", 2, 0),
        ("Weak preference for option2", 2, 1),
        ("Strong preference for option2", 2, 2),
        ("Strong preference for option 1", 1, 2),
        ("Weak preference for option 1", 1, 1),
        ("No preference", 1, 0),
        ("Weak preference for option2", 1, -1),
        ("Strong preference for option2", 1, -2),
    ];
    let mut seen = BTreeSet::new();
    for (label, slot, want) in table {
        let raw = RawAnswer::parse(label).ok_or(format!("label {label:?} not recognised"))?;
        let slot = OptionSlot::try_from(slot)?;
        let got = numeric_score(raw, slot);
        ensure!(got == want, "{label} with treatment in {slot:?}: {got} vs {want}");
        seen.insert((raw, u8::from(slot)));
    }
    ensure!(seen.len() == 10, "table is not exhaustive");
    Ok(())
}

fn bookkeeping(_: &Fixture) -> Outcome {
    let ids: Vec<String> = (1..=26).map(|i| format!("c{i:02}")).collect();
    let mut plan = StudyPlan::new(make_assignments(&ids, &Deck::default(), RngSeed(5)));
    ensure!(
        plan.comparisons.len() == 52,
        "{} comparisons before the drop",
        plan.comparisons.len()
    );
    plan.drop_comparison("c26", ComparisonKind::Model)
        .map_err(|e| e.to_string())?;
    let b = plan.bookkeeping(20);
    ensure!(b.comparisons == 51, "comparisons {}", b.comparisons);
    ensure!(b.interface_comparisons == 26 && b.model_comparisons == 25, "{b:?}");
    ensure!(b.pair_ratings == 1020, "pair ratings {}", b.pair_ratings);
    ensure!(b.question_ratings == 2040, "question ratings {}", b.question_ratings);
    Ok(())
}

fn main() {
    let fx = fixture();
    let criteria: [Criterion; 10] = [
        ("forest cardinality", cardinality),
        ("chunk and phrase timing", timing),
        ("filter soundness and completeness", filter),
        ("option counts", option_counts),
        ("quintile binning", binning),
        ("determinism and replay", determinism),
        ("paired t statistics", statistics),
        ("midi round trip", midi_round_trip),
        ("scale conversion", scale_conversion),
        ("full-cohort bookkeeping", bookkeeping),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&fx)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match outcome {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
