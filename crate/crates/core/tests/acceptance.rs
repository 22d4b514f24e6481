//! Acceptance suite. Prints one line per criterion and exits non-zero when any
//! of them fails. The live-backend check lives in `live_check.rs` and is
//! ignored by default.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use personaweaver::banks::{self, builtin_checksums, find_setting, SettingSpec};
use personaweaver::gateway::{BackendConfig, BackendReply, ChatRequest, Gateway, GatewayError, Matcher, MockScript};
use personaweaver::generator::{generate_personaweaver, sample_blueprint, BehaviorBanks, GenerationOptions, Method};
use personaweaver::harness::{run_experiment, CellData, RunConfig, RunManifest, SettingChoice};
use personaweaver::probes::{self, parse_choice, LikertChoice, ParseError, ReactionLabel};
use personaweaver::stylometry::{
    filler_rate, jensen_shannon, normalized_entropy, punctuation_profile, sentiment_label, word_count, FillerLexicon,
    Sentiment, ValenceLexicon,
};
use personaweaver::worldgen::{WorldAxis, WorldBank};
use personaweaver::CategoricalDistribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const MORAL_SHA: &str = "e8c709c2c747a4d30a40a4c935c6a816cd5f3dbd86da6d136e9cb04f80e77a23";
const REACTION_SHA: &str = "808376a612f617235cf44aecb77b87d024213479ec431076edab3901efc68cc1";
const SETTINGS_SHA: &str = "a820ac90df68f21791a49e3b54e0bcadb8ec862006743a17d2708b05ad29a59f";
const PROBES_SHA: &str = "4c9f1e308ccf7ea70eba5e510a59163f62864cea1de476182eb93942464085e7";

const STAMP: &str = "2025-01-01T00:00:00Z";

/// Runs completed by earlier criteria, re-checked for conservation at the end.
#[derive(Default)]
struct Ledger {
    manifests: Vec<RunManifest>,
    dirs: Vec<tempfile::TempDir>,
}

fn within(limit: Duration, start: Instant) -> Result<Duration> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:.2?}, limit {limit:?}");
    Ok(took)
}

// ---------------------------------------------------------------------------

fn bank_fidelity(_: &mut Ledger) -> Result<String> {
    let start = Instant::now();
    let morals = banks::load_moral_bank();
    let reactions = banks::load_reaction_bank();
    let settings = banks::load_settings();
    let corpus = banks::load_probe_corpus();
    ensure!(morals.len() == 8, "{} moral positions", morals.len());
    ensure!(reactions.len() == 8, "{} reaction styles", reactions.len());
    ensure!(settings.len() == 10, "{} settings", settings.len());
    ensure!(corpus.moral_statements.len() == 10, "{} moral statements", corpus.moral_statements.len());
    let questions = corpus.sentiment_questions.len() + corpus.general_questions.len();
    ensure!(questions == 10, "{questions} questions");
    let expected = [("moral", MORAL_SHA), ("reaction", REACTION_SHA), ("settings", SETTINGS_SHA), ("probes", PROBES_SHA)];
    for ((name, got), (want_name, want)) in builtin_checksums().iter().zip(expected) {
        ensure!(*name == want_name && got == want, "{name} checksum {got}");
    }
    let took = within(Duration::from_secs(1), start)?;
    Ok(format!("8/8/10/10+10 entries, checksums match, {took:.1?}"))
}

fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root)?.to_path_buf(), fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn determinism(ledger: &mut Ledger) -> Result<String> {
    let start = Instant::now();
    let tmp = tempfile::tempdir()?;
    let personas: Vec<String> = (1..=12).map(|i| format!("A retired tradesperson, number {i}, who keeps bees.")).collect();
    let persona_file = tmp.path().join("personas.jsonl");
    fs::write(&persona_file, banks::serialize_personas(&personas))?;
    let out = tmp.path().join("run");
    let config = RunConfig {
        settings: vec![SettingChoice::Named("Fargo".into())],
        methods: vec![Method::PersonaWeaver, Method::WorldWeaver, Method::PersonaHub],
        n_per_setting: 5,
        seed: 11,
        output_dir: out.clone(),
        persona_file: Some(persona_file),
        fixed_timestamp: Some(STAMP.into()),
        ..RunConfig::default()
    };
    let first = run_experiment(&config)?;
    let a = snapshot(&out)?;
    fs::remove_dir_all(&out)?;
    let second = run_experiment(&config)?;
    let b = snapshot(&out)?;
    ensure!(first.cells.len() == 3, "{} cells", first.cells.len());
    ensure!(first.error_count() == 0, "{} stage errors", first.error_count());
    ensure!(a.keys().eq(b.keys()), "file sets differ");
    for (path, bytes) in &a {
        ensure!(b[path] == *bytes, "{} differs between runs", path.display());
    }
    let took = within(Duration::from_secs(10), start)?;
    ledger.manifests.push(second);
    ledger.dirs.push(tmp);
    Ok(format!("{} files byte-identical across two runs, {took:.1?}", a.len()))
}

fn fargo() -> SettingSpec {
    find_setting("Fargo").expect("built-in setting")
}

fn toy_world(axes: usize, options: usize) -> WorldBank {
    WorldBank {
        setting: fargo(),
        axes: (0..axes)
            .map(|a| WorldAxis { name: format!("axis {a}"), options: (0..options).map(|o| format!("option {a}.{o}")).collect() })
            .collect(),
    }
}

fn chi_square(counts: &[u64], n: u64) -> (f64, f64) {
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat);
    (stat, p)
}

fn mixing_uniformity(_: &mut Ledger) -> Result<String> {
    let start = Instant::now();
    let banks = BehaviorBanks::builtin();
    let world = toy_world(3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut morals: BTreeMap<String, u64> = banks.morals.iter().map(|m| (m.id.clone(), 0)).collect();
    let mut reactions = [0u64; 8];
    for _ in 0..8000 {
        let bp = sample_blueprint(&world, &banks.morals, &banks.reactions, &mut rng)?;
        *morals.get_mut(&bp.moral_id).context("unknown moral id")? += 1;
        reactions[bp.reaction_id as usize] += 1;
    }
    let morals: Vec<u64> = morals.into_values().collect();
    let mut worst = 1.0f64;
    for (name, counts) in [("moral", morals.as_slice()), ("reaction", reactions.as_slice())] {
        ensure!(counts.iter().all(|c| c.abs_diff(1000) <= 90), "{name} counts {counts:?}");
        let (stat, p) = chi_square(counts, 8000);
        ensure!(p > 0.001, "{name} chi-square {stat:.2}, p = {p:.5}");
        worst = worst.min(p);
    }
    let took = within(Duration::from_secs(5), start)?;
    Ok(format!("min p = {worst:.3}, {took:.1?}"))
}

fn behavioral_immutability(_: &mut Ledger) -> Result<String> {
    let banks = BehaviorBanks::builtin();
    // Flags everything, then tries to soften the moral outlook while also
    // making a legitimate world edit.
    let adversary = |r: &ChatRequest| -> Result<BackendReply, GatewayError> {
        let user = &r.turns[0].text;
        if user.contains("PLAUSIBLE or IMPLAUSIBLE") {
            return Ok(BackendReply::stop("IMPLAUSIBLE: the attributes clash."));
        }
        let Some(body) = user.split("Character profile:\n").nth(1) else {
            return Ok(BackendReply::stop("NO"));
        };
        let body = body.split("\n\nSome world attributes").next().unwrap_or(body);
        let edited: Vec<String> = body
            .lines()
            .map(|l| match l.strip_prefix("Moral outlook: ") {
                Some(text) => format!("Moral outlook: Always be kind. {text}"),
                None => l.replace("option", "choice"),
            })
            .collect();
        Ok(BackendReply::stop(edited.join("\n")))
    };
    let gw = Gateway::with_backend(adversary);
    let pop = generate_personaweaver(&fargo(), 200, &toy_world(4, 6), &banks, &gw, 5, &GenerationOptions::default())?;
    ensure!(pop.profiles.len() == 200, "{} profiles", pop.profiles.len());
    let mut violations = 0;
    for p in &pop.profiles {
        let bp = p.blueprint.as_ref().context("blueprint missing")?;
        let moral = &banks.moral(&bp.moral_id)?.text;
        if !p.description.contains(&format!("Moral outlook: {moral}\n")) || p.revised {
            violations += 1;
        }
    }
    ensure!(violations == 0, "{violations} descriptions lost their bank moral text");
    let rejected = pop.issues.iter().filter(|i| i.warning).count();
    ensure!(rejected >= 200, "only {rejected} rejected revisions were recorded");
    Ok(format!("200 profiles, 0 violations, {rejected} tampering revisions rejected"))
}

fn script_file(dir: &Path, name: &str, script: &MockScript) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(script)?)?;
    Ok(path)
}

/// Always "(A)", always a direct answer, and every answer judged compliant.
fn assistant_biased() -> MockScript {
    let demo = MockScript::demo();
    let list = demo
        .rules
        .iter()
        .find(|r| matches!(&r.matcher, Matcher::Pattern(p) if p.contains("different character profiles")))
        .expect("demo script generates lists")
        .clone();
    let mut script = MockScript::with_default("I'm doing great, thank you for asking! How can I help you today?")
        .contains("How much do you agree with this statement", "(A) Strongly agree. That is the right thing to do.")
        .contains("Label the response with exactly one word.", "compliance");
    script.rules.push(list);
    script
}

fn mock_run(out: &Path, script: PathBuf, method: Method, n: usize) -> Result<(RunManifest, CellData)> {
    let config = RunConfig {
        settings: vec![SettingChoice::Named("Fargo".into())],
        methods: vec![method],
        n_per_setting: n,
        seed: 3,
        output_dir: out.to_path_buf(),
        backend: BackendConfig { mock_script: Some(script), ..BackendConfig::mock() },
        fixed_timestamp: Some(STAMP.into()),
        ..RunConfig::default()
    };
    let manifest = run_experiment(&config)?;
    ensure!(manifest.error_count() == 0, "{method} run had {} stage errors", manifest.error_count());
    let data = CellData::load(&manifest, &manifest.cells[0])?;
    Ok((manifest, data))
}

fn bias_shape(ledger: &mut Ledger) -> Result<String> {
    let start = Instant::now();
    let tmp = tempfile::tempdir()?;
    let biased = script_file(tmp.path(), "biased.json", &assistant_biased())?;
    let demo = script_file(tmp.path(), "demo.json", &MockScript::demo())?;

    let (base_manifest, base) = mock_run(&tmp.path().join("baseline"), biased, Method::WorldWeaver, 20)?;
    let base_moral = normalized_entropy(base.moral.as_ref().context("no moral distribution")?)?;
    let base_reaction = normalized_entropy(base.reaction.as_ref().context("no reaction distribution")?)?;
    ensure!(base_moral < 0.05, "baseline moral entropy {base_moral:.4}");
    ensure!(base_reaction < 0.05, "baseline reaction entropy {base_reaction:.4}");

    let (pw_manifest, pw) = mock_run(&tmp.path().join("personaweaver"), demo, Method::PersonaWeaver, 100)?;
    let reaction = pw.reaction.as_ref().context("no reaction distribution")?;
    let pw_reaction = normalized_entropy(reaction)?;
    ensure!(pw_reaction >= 0.8, "PersonaWeaver reaction entropy {pw_reaction:.4}");
    ensure!(reaction.count("refusal") > 0, "no refusals");
    ensure!(reaction.count("deflection") > 0, "no deflections");
    let took = within(Duration::from_secs(30), start)?;
    ledger.manifests.push(base_manifest);
    ledger.manifests.push(pw_manifest);
    ledger.dirs.push(tmp);
    Ok(format!(
        "baseline H(moral)={base_moral:.3} H(reaction)={base_reaction:.3}; PersonaWeaver H(reaction)={pw_reaction:.3} \
         (refusal {}, deflection {}, compliance {}), {took:.1?}",
        reaction.count("refusal"),
        reaction.count("deflection"),
        reaction.count("compliance")
    ))
}

fn dist(counts: &[u64]) -> CategoricalDistribution {
    CategoricalDistribution::from_counts(counts.iter().enumerate().map(|(i, &c)| (format!("c{i}"), c)))
}

// Natural-log formulations, rescaled, so they share no code path with the
// library's base-2 arithmetic.
fn brute_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h / (counts.len() as f64).ln()
}

fn brute_jsd(p: &[u64], q: &[u64]) -> f64 {
    let (tp, tq) = (p.iter().sum::<u64>() as f64, q.iter().sum::<u64>() as f64);
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a as f64 / tp, b as f64 / tq);
        let m = (a + b) / 2.0;
        if a > 0.0 {
            d += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            d += 0.5 * b * (b / m).ln();
        }
    }
    d / std::f64::consts::LN_2
}

fn metric_correctness(_: &mut Ledger) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=8);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u64> {
            loop {
                let v: Vec<u64> = (0..k).map(|_| if rng.gen_bool(0.25) { 0 } else { rng.gen_range(0..20) }).collect();
                if v.iter().sum::<u64>() > 0 {
                    return v;
                }
            }
        };
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        worst = worst.max((normalized_entropy(&dist(&p))? - brute_entropy(&p)).abs());
        worst = worst.max((jensen_shannon(&dist(&p), &dist(&q))? - brute_jsd(&p, &q)).abs());
    }
    ensure!(worst <= 1e-9, "max deviation from brute force {worst:e}");

    let skewed = normalized_entropy(&dist(&[2, 1, 1]))?;
    ensure!((skewed - 0.9464).abs() <= 1e-4, "{{0.5,0.25,0.25}} gave {skewed}");
    let half = jensen_shannon(&dist(&[1, 0]), &dist(&[1, 1]))?;
    ensure!((half - 0.3113).abs() <= 1e-4, "{{1,0}} vs {{0.5,0.5}} gave {half}");
    let disjoint = jensen_shannon(&dist(&[1, 0]), &dist(&[0, 1]))?;
    ensure!((disjoint - 1.0).abs() <= 1e-4, "disjoint point masses gave {disjoint}");
    let same = jensen_shannon(&dist(&[3, 1]), &dist(&[6, 2]))?;
    ensure!(same.abs() <= 1e-4, "equal distributions gave {same}");
    Ok(format!("1000 random cases, max deviation {worst:.1e}; 0.9464, 0.3113, 0 and 1 reproduced"))
}

fn stylometry_oracle(_: &mut Ledger) -> Result<String> {
    let fillers = FillerLexicon::default();
    let valence = ValenceLexicon::default();

    for (text, n) in [("How are you?", 3), ("", 0), ("a  b\tc\n", 3)] {
        ensure!(word_count(text) == n, "word_count({text:?}) = {}", word_count(text));
    }
    let marks = |text: &str| -> Vec<(char, u64)> {
        punctuation_profile(text).into_iter().filter(|(_, n)| *n > 0).collect()
    };
    let mut wait = marks("Wait... what?!");
    wait.sort();
    ensure!(marks("Hello!! Really?").iter().copied().collect::<BTreeMap<_, _>>() == BTreeMap::from([('!', 2), ('?', 1)]), "Hello!! Really?");
    ensure!(marks("no marks here").is_empty(), "no marks here");
    ensure!(wait == vec![('!', 1), ('.', 3), ('?', 1)], "Wait... what?! gave {wait:?}");
    ensure!(punctuation_profile("no marks here").len() == 10, "fixed mark set has 10 entries");

    for (text, rate) in [("The door opened.", 0.0), ("Um, well, I guess so.", 60.0), ("", 0.0)] {
        let got = filler_rate(text, &fillers);
        ensure!(got == rate, "filler_rate({text:?}) = {got}");
    }
    for (text, label) in [
        ("The door is blue.", Sentiment::Neutral),
        ("I love this wonderful town.", Sentiment::Positive),
        ("I am not happy.", Sentiment::Negative),
    ] {
        let got = sentiment_label(text, &valence);
        ensure!(got == label, "sentiment_label({text:?}) = {got:?}");
    }

    let words = [
        "um", "well", "you", "know", "I", "mean", "guess", "sort", "of", "kind", "like", "love", "not", "happy", "never",
        "terrible", "wonderful", "town", "door", "sad", "great", "uh", "really", "don't", "good",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let len = rng.gen_range(0..14);
        let text: String = (0..len)
            .map(|_| {
                let w = words[rng.gen_range(0..words.len())];
                let sep = [" ", ", ", ". ", "! "][rng.gen_range(0..4)];
                format!("{w}{sep}")
            })
            .collect();
        let flipped: String = text
            .chars()
            .map(|c| if rng.gen_bool(0.5) { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
            .collect();
        ensure!(filler_rate(&text, &fillers) == filler_rate(&flipped, &fillers), "filler_rate case-sensitive on {text:?}");
        ensure!(
            sentiment_label(&text, &valence) == sentiment_label(&flipped, &valence),
            "sentiment_label case-sensitive on {text:?}"
        );
    }
    Ok("all worked examples exact; 100 case-flipped strings agree".into())
}

fn parser_robustness(_: &mut Ledger) -> Result<String> {
    use LikertChoice::*;
    let ok = |c| Ok(c);
    let amb = Err(());
    let none: Result<LikertChoice, ()> = Err(());
    let corpus: Vec<(&str, Result<LikertChoice, ()>, &str)> = vec![
        ("(B) Agree", ok(B), "paren"),
        ("(A) Strongly agree.", ok(A), "paren"),
        ("I'd pick (E), strongly disagree", ok(E), "paren"),
        ("(C)(C) neutral", ok(C), "paren"),
        ("Definitely (D).", ok(D), "paren"),
        ("(A) but also E", ok(A), "paren"),
        ("(A) or (B)", amb, "ambiguous"),
        ("(D) disagree... no, (E)", amb, "ambiguous"),
        ("B", ok(B), "letter"),
        ("E - strongly disagree", ok(E), "letter"),
        ("B) Agree", ok(B), "letter"),
        ("Answer: C", ok(C), "letter"),
        ("D\nbecause lying hurts", ok(D), "letter"),
        ("Option A: strongly agree", ok(A), "letter"),
        ("A or B, hard to say", amb, "ambiguous"),
        ("A\nB", amb, "ambiguous"),
        ("Strongly disagree.", ok(E), "label"),
        ("strongly agree", ok(A), "label"),
        ("I agree with that.", ok(B), "label"),
        ("I disagree.", ok(D), "label"),
        ("I'm neutral on this.", ok(C), "label"),
        ("STRONGLY DISAGREE!", ok(E), "label"),
        ("Well, I agree, I really agree.", ok(B), "label"),
        ("neither agree nor disagree", amb, "ambiguous"),
        ("strongly agree, or maybe just disagree", amb, "ambiguous"),
        ("", none, "no match"),
        ("Maybe.", none, "no match"),
        ("ABC", none, "no match"),
        ("(F) none of these", none, "no match"),
        ("I'd rather not say.", none, "no match"),
    ];
    ensure!(corpus.len() == 30, "corpus has {} cases", corpus.len());
    for (text, want, rule) in &corpus {
        let got = parse_choice(text);
        let pass = match (want, &got, *rule) {
            (Ok(w), Ok(g), _) => w == g,
            (Err(()), Err(ParseError::Ambiguous(found)), "ambiguous") => found.len() >= 2,
            (Err(()), Err(ParseError::NoMatch), "no match") => true,
            _ => false,
        };
        ensure!(pass, "parse_choice({text:?}) = {got:?}, expected {rule} {want:?}");
    }

    // Classifier replies range from clean labels to noise; whatever comes
    // back must be one of the three labels or an explicit error.
    let replies = [
        "compliance", "refusal", "deflection", "Compliance.", "REFUSAL", "Deflection!", " compliance\n", "refusal.",
        "Label: deflection", "The label is compliance.", "banana", "", "2", "hostile", "meta", "I cannot label this.",
        "compliance or refusal", "deflected", "complied", "refused", "**refusal**", "\"deflection\"", "None", "N/A",
        "compliance, definitely", "It's a refusal", "deflection?", "0", "7", "volunteering", "answer", "yes", "no",
        "Refusal: the person declines.", "compliance compliance", "refusal deflection", "DEFLECTION", "Compliance!!",
        "label", "unknown", "...", "Refusal.", "Deflection.", "Compliance", "refusal\nbecause they declined", "{}",
        "compliance?", "deflection, maybe", "neither", "3",
    ];
    ensure!(replies.len() == 50, "fuzz set has {} replies", replies.len());
    let backend = move |r: &ChatRequest| -> Result<BackendReply, GatewayError> {
        let rendered = r.rendered();
        let i: usize = rendered
            .split("reply number ")
            .nth(1)
            .and_then(|s| s.split(|c: char| !c.is_ascii_digit()).next())
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        Ok(BackendReply::stop(replies[i]))
    };
    let aux = Gateway::with_backend(backend);
    let (mut labelled, mut rejected) = (0, 0);
    for i in 0..replies.len() {
        match probes::classify_reaction(&format!("This is reply number {i}."), &aux) {
            Ok(label) => {
                ensure!(ReactionLabel::ALL.contains(&label), "label {label:?} outside the taxonomy");
                ensure!(["refusal", "deflection", "compliance"].contains(&label.as_str()), "{}", label.as_str());
                labelled += 1;
            }
            Err(probes::ProbeError::Unclassifiable(_) | probes::ProbeError::Backend(_)) => rejected += 1,
            Err(e) => bail!("reply {i}: unexpected error {e}"),
        }
    }
    Ok(format!("30 parse cases pass; 50 classifier replies: {labelled} labelled, {rejected} rejected with an error"))
}

fn conservation(ledger: &mut Ledger) -> Result<String> {
    let mut checked = 0;
    for manifest in &ledger.manifests {
        for cell in &manifest.cells {
            for kind in ["moral", "reaction"] {
                let Some(records) = cell.artifacts.get(&format!("{kind}_records")) else { continue };
                let records = probes::load_records(&manifest.resolve(records))?;
                let dist = fs::read_to_string(manifest.resolve(&cell.artifacts[&format!("{kind}_dist")]))?;
                let dist = CategoricalDistribution::from_csv(&dist).map_err(anyhow::Error::msg)?;
                let items = 10;
                let errors = records.iter().filter(|r| r.is_error()).count();
                ensure!(
                    dist.total() as usize + errors == cell.profiles * items && records.len() == cell.profiles * items,
                    "{} / {} / {kind}: {} counted + {errors} errors != {} x {items}",
                    cell.setting,
                    cell.method,
                    dist.total(),
                    cell.profiles
                );
                checked += 1;
            }
        }
    }
    ensure!(checked > 0, "no probe runs to check");
    Ok(format!("{checked} probe runs balanced"))
}

fn main() {
    type Check = fn(&mut Ledger) -> Result<String>;
    let criteria: [(&str, Check); 9] = [
        ("bank fidelity", bank_fidelity),
        ("determinism", determinism),
        ("mixing uniformity", mixing_uniformity),
        ("behavioral immutability", behavioral_immutability),
        ("bias-shape reproduction", bias_shape),
        ("metric correctness", metric_correctness),
        ("stylometry oracle", stylometry_oracle),
        ("parser robustness", parser_robustness),
        ("conservation", conservation),
    ];
    let mut ledger = Ledger::default();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check(&mut ledger) {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {e:#}", i + 1);
            }
        }
    }
    println!("criterion 10: SKIPPED live check (cargo test --test live_check -- --ignored)");
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
