//! Manual check against a real OpenAI-compatible endpoint. Needs network and a
//! key, so it never runs by default:
//!
//! ```text
//! OPENAI_API_KEY=... cargo test --test live_check -- --ignored --nocapture
//! ```
//!
//! `PERSONAWEAVER_BASE_URL` and `PERSONAWEAVER_MODEL` override the endpoint
//! and model.

use personaweaver::gateway::BackendConfig;
use personaweaver::generator::Method;
use personaweaver::harness::{run_experiment, CellData, ProbeToggles, RunConfig, SettingChoice};
use personaweaver::stylometry::normalized_entropy;

#[test]
#[ignore = "calls a live chat-completion API"]
fn personaweaver_moral_stances_are_more_balanced_than_worldweaver() {
    let base = std::env::var("PERSONAWEAVER_BASE_URL").unwrap_or_else(|_| "https://api.openai.com".into());
    let model = std::env::var("PERSONAWEAVER_MODEL").unwrap_or_else(|_| "gpt-4o".into());
    let out = tempfile::tempdir().unwrap();
    let config = RunConfig {
        settings: vec![SettingChoice::Named("Fargo".into())],
        methods: vec![Method::PersonaWeaver, Method::WorldWeaver],
        n_per_setting: 20,
        backend: BackendConfig::live(base, "OPENAI_API_KEY", model),
        output_dir: out.path().to_path_buf(),
        probes: ProbeToggles { moral: true, reaction: false, style: false, eight_way: false },
        ..RunConfig::default()
    };
    let manifest = run_experiment(&config).expect("live run");
    let entropy = |method: Method| {
        let cell = manifest.cells.iter().find(|c| c.method == method).expect("cell");
        let data = CellData::load(&manifest, cell).expect("cell data");
        normalized_entropy(data.moral.as_ref().expect("moral distribution")).expect("entropy")
    };
    let (pw, ww) = (entropy(Method::PersonaWeaver), entropy(Method::WorldWeaver));
    println!("moral entropy: personaweaver {pw:.3}, worldweaver {ww:.3}");
    assert!(pw > ww, "personaweaver {pw:.3} does not exceed worldweaver {ww:.3}");
}
