//! Population generation.
//!
//! [`generate_personaweaver`] samples one option per world axis plus one moral
//! position and one reaction style, renders the bundle into a fixed-template
//! description, and lets the backend repair implausible world combinations
//! without touching the behavioral lines. The two baselines either prompt for
//! whole characters directly ([`generate_worldweaver`]) or adapt personas from
//! an external bank ([`generate_personahub`]).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::warn;

use crate::banks::{self, BankError, MoralPosition, ReactionStyle, SettingSpec};
use crate::canonical::digest_of;
use crate::gateway::{parallel_map, ChatRequest, Gateway, GENERATION_TEMPERATURE, PROBE_TEMPERATURE};
use crate::worldgen::{BehavioralLexicon, WorldBank};

/// Re-draws allowed per profile before a duplicate blueprint is accepted.
pub const MAX_REDRAWS: usize = 100;
/// Profiles requested per direct-prompting call.
pub const WORLDWEAVER_BATCH: usize = 10;

const MORAL_PREFIX: &str = "Moral outlook: ";
const REACTION_PREFIX: &str = "Conversational style: when asked a question, this character ";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("empty bank: {0}")]
    EmptyBank(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("unknown moral position `{0}`")]
    UnknownMoral(String),
    #[error("unknown reaction style {0}")]
    UnknownReaction(u32),
    #[error("persona file has {available} personas but {requested} were requested without replacement")]
    ShortPersonaFile { available: usize, requested: usize },
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("population file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    PersonaWeaver,
    WorldWeaver,
    PersonaHub,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PersonaWeaver, Method::WorldWeaver, Method::PersonaHub];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PersonaWeaver => "personaweaver",
            Method::WorldWeaver => "worldweaver",
            Method::PersonaHub => "personahub",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Method::PersonaWeaver => "pw",
            Method::WorldWeaver => "ww",
            Method::PersonaHub => "ph",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown method `{s}` (expected personaweaver, worldweaver or personahub)"))
    }
}

/// The moral and reaction banks used for sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorBanks {
    pub morals: Vec<MoralPosition>,
    pub reactions: Vec<ReactionStyle>,
}

impl BehaviorBanks {
    pub fn builtin() -> Self {
        Self { morals: banks::load_moral_bank(), reactions: banks::load_reaction_bank() }
    }

    pub fn moral(&self, id: &str) -> Result<&MoralPosition, GenerationError> {
        self.morals.iter().find(|m| m.id == id).ok_or_else(|| GenerationError::UnknownMoral(id.to_string()))
    }

    pub fn reaction(&self, id: u32) -> Result<&ReactionStyle, GenerationError> {
        self.reactions.iter().find(|r| r.id == id).ok_or(GenerationError::UnknownReaction(id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterBlueprint {
    pub world_choices: IndexMap<String, String>,
    pub moral_id: String,
    pub reaction_id: u32,
    pub draw_seed: u64,
}

impl CharacterBlueprint {
    /// Everything except the seed; two blueprints with equal keys describe
    /// the same character.
    fn combination_key(&self) -> (Vec<(String, String)>, String, u32) {
        (
            self.world_choices.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            self.moral_id.clone(),
            self.reaction_id,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub id: String,
    pub setting_name: String,
    pub method: Method,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blueprint: Option<CharacterBlueprint>,
    pub revised: bool,
}

/// Something that went wrong while producing a population. Failed profiles
/// are listed here instead of being dropped silently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationIssue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_id: Option<String>,
    pub stage: String,
    pub message: String,
    /// Warnings (duplicate blueprints, rejected revisions) do not count as errors.
    #[serde(default)]
    pub warning: bool,
}

impl GenerationIssue {
    fn error(profile_id: Option<String>, stage: &str, message: impl Into<String>) -> Self {
        Self { profile_id, stage: stage.into(), message: message.into(), warning: false }
    }

    fn warning(profile_id: Option<String>, stage: &str, message: impl Into<String>) -> Self {
        Self { profile_id, stage: stage.into(), message: message.into(), warning: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Population {
    pub setting_name: String,
    pub method: Method,
    pub seed: u64,
    pub requested: usize,
    pub generation_config_digest: String,
    pub profiles: Vec<CharacterProfile>,
    pub issues: Vec<GenerationIssue>,
}

#[derive(Serialize, Deserialize)]
struct PopulationHeader {
    setting: String,
    method: Method,
    config_digest: String,
    seed: u64,
    requested: usize,
    issues: Vec<GenerationIssue>,
}

impl Population {
    pub fn error_count(&self) -> usize {
        self.issues.iter().filter(|i| !i.warning).count()
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let mut ids = HashSet::new();
        for p in &self.profiles {
            if !ids.insert(p.id.as_str()) {
                return Err(GenerationError::Format(format!("duplicate profile id {}", p.id)));
            }
            if p.description.trim().is_empty() {
                return Err(GenerationError::Format(format!("profile {} has an empty description", p.id)));
            }
            if p.method != self.method {
                return Err(GenerationError::Format(format!("profile {} has method {}", p.id, p.method)));
            }
            if p.blueprint.is_some() != (p.method == Method::PersonaWeaver) {
                return Err(GenerationError::Format(format!("profile {} blueprint does not match its method", p.id)));
            }
        }
        if self.profiles.len() != self.requested && self.error_count() == 0 {
            return Err(GenerationError::Format(format!(
                "{} profiles for {} requested with no recorded errors",
                self.profiles.len(),
                self.requested
            )));
        }
        Ok(())
    }

    /// Header line followed by one profile per line.
    pub fn to_jsonl(&self) -> String {
        let header = PopulationHeader {
            setting: self.setting_name.clone(),
            method: self.method,
            config_digest: self.generation_config_digest.clone(),
            seed: self.seed,
            requested: self.requested,
            issues: self.issues.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for p in &self.profiles {
            out.push_str(&serde_json::to_string(p).expect("profile serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, GenerationError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| GenerationError::Format("missing header line".into()))?;
        let header: PopulationHeader =
            serde_json::from_str(first).map_err(|e| GenerationError::Format(format!("line 1: {e}")))?;
        let mut profiles = Vec::new();
        for (i, line) in lines {
            let p: CharacterProfile =
                serde_json::from_str(line).map_err(|e| GenerationError::Format(format!("line {}: {e}", i + 1)))?;
            profiles.push(p);
        }
        let pop = Population {
            setting_name: header.setting,
            method: header.method,
            seed: header.seed,
            requested: header.requested,
            generation_config_digest: header.config_digest,
            profiles,
            issues: header.issues,
        };
        pop.validate()?;
        Ok(pop)
    }

    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path).map_err(|e| GenerationError::Format(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }
}

/// Shared knobs for all three generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub temperature: f64,
    pub judge_temperature: f64,
    pub max_tokens: u32,
    /// Run the plausibility flag/revise pass on sampled profiles.
    pub revise: bool,
    /// Let the persona baseline sample with replacement when the file is short.
    pub with_replacement: bool,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            temperature: GENERATION_TEMPERATURE,
            judge_temperature: PROBE_TEMPERATURE,
            max_tokens: 1200,
            revise: true,
            with_replacement: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Sample and mix
// ---------------------------------------------------------------------------

/// Draws one blueprint. A fresh seed is taken from `rng` and every attribute
/// is drawn uniformly and independently from a generator seeded with it, so
/// `draw_seed` alone reproduces the blueprint.
pub fn sample_blueprint<R: RngCore>(
    world: &WorldBank,
    morals: &[MoralPosition],
    reactions: &[ReactionStyle],
    rng: &mut R,
) -> Result<CharacterBlueprint, GenerationError> {
    if morals.is_empty() {
        return Err(GenerationError::EmptyBank("moral positions".into()));
    }
    if reactions.is_empty() {
        return Err(GenerationError::EmptyBank("reaction styles".into()));
    }
    if let Some(axis) = world.axes.iter().find(|a| a.options.is_empty()) {
        return Err(GenerationError::EmptyBank(format!("world axis `{}`", axis.name)));
    }
    let draw_seed = rng.next_u64();
    let mut draw = ChaCha8Rng::seed_from_u64(draw_seed);
    let world_choices = world
        .axes
        .iter()
        .map(|a| (a.name.clone(), a.options[draw.gen_range(0..a.options.len())].clone()))
        .collect();
    let moral_id = morals[draw.gen_range(0..morals.len())].id.clone();
    let reaction_id = reactions[draw.gen_range(0..reactions.len())].id;
    Ok(CharacterBlueprint { world_choices, moral_id, reaction_id, draw_seed })
}

fn base_verb(word: &str) -> String {
    let lower = word.to_lowercase();
    if let Some(stem) = lower.strip_suffix("ies") {
        format!("{stem}y")
    } else if ["sses", "shes", "ches", "xes", "zes"].iter().any(|s| lower.ends_with(s)) {
        lower[..lower.len() - 2].to_string()
    } else if let Some(stem) = lower.strip_suffix('s') {
        stem.to_string()
    } else {
        lower
    }
}

/// Turns a third-person behavior description into a standing disposition:
/// "Refuses to answer the question." becomes "tends to refuse to answer
/// questions".
pub fn disposition(description: &str) -> String {
    let text = description.trim().trim_end_matches('.');
    let mut words: Vec<String> = text.split(' ').map(str::to_string).collect();
    if let Some(first) = words.first_mut() {
        *first = base_verb(first);
    }
    for i in 1..words.len() {
        let after_conjunction = matches!(words[i - 1].as_str(), "and" | "or");
        let is_verb = words[i].ends_with('s') && words[i].chars().all(|c| c.is_ascii_lowercase());
        if after_conjunction && is_verb {
            words[i] = base_verb(&words[i]);
        }
    }
    static THE_QUESTION: OnceLock<Regex> = OnceLock::new();
    let re = THE_QUESTION.get_or_init(|| Regex::new(r"\bthe question\b").unwrap());
    format!("tends to {}", re.replace_all(&words.join(" "), "questions"))
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// A rendered profile split into its revisable world lines and its fixed
/// behavioral lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedProfile {
    pub world_lines: Vec<String>,
    pub moral_line: String,
    pub reaction_line: String,
}

impl RenderedProfile {
    pub fn text(&self) -> String {
        let mut lines = self.world_lines.clone();
        lines.push(self.moral_line.clone());
        lines.push(self.reaction_line.clone());
        lines.join("\n")
    }
}

pub fn render_parts(
    bp: &CharacterBlueprint,
    setting: &SettingSpec,
    banks: &BehaviorBanks,
) -> Result<RenderedProfile, GenerationError> {
    let moral = banks.moral(&bp.moral_id)?;
    let reaction = banks.reaction(bp.reaction_id)?;
    let mut world_lines = vec![format!("Home: {}", setting.prompt)];
    world_lines.extend(
        bp.world_choices.iter().map(|(axis, option)| format!("Their {} is {}.", axis.to_lowercase(), lower_first(option))),
    );
    Ok(RenderedProfile {
        world_lines,
        moral_line: format!("{MORAL_PREFIX}{}", moral.text),
        reaction_line: format!("{REACTION_PREFIX}{}.", disposition(&reaction.description)),
    })
}

/// Renders the fixed-template description for a blueprint.
pub fn render_profile(
    bp: &CharacterBlueprint,
    setting: &SettingSpec,
    banks: &BehaviorBanks,
) -> Result<String, GenerationError> {
    Ok(render_parts(bp, setting, banks)?.text())
}

// ---------------------------------------------------------------------------
// Plausibility revision
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevisionOutcome {
    pub profile: CharacterProfile,
    /// Revisions that were rejected, and why.
    pub violations: Vec<String>,
    /// Backend failure; the profile is returned unrevised.
    pub error: Option<String>,
}

const FLAG_SYSTEM: &str = "You review character profiles for a social simulation.";
const REVISE_SYSTEM: &str = "You minimally revise character profiles so their world attributes are coherent.";

pub fn flag_request(profile: &CharacterProfile, model: &str, opts: &GenerationOptions) -> ChatRequest {
    ChatRequest::new(
        model,
        FLAG_SYSTEM,
        format!(
            "Character profile:\n{}\n\nDo the world attributes of this profile (home, roles, affiliations, \
             background) fit together plausibly for a single person? Answer with one word: PLAUSIBLE or IMPLAUSIBLE.",
            profile.description
        ),
    )
    .temperature(opts.judge_temperature)
    .max_tokens(5)
}

/// Only a reply whose first word is IMPLAUSIBLE flags the profile.
pub fn is_flagged(reply: &str) -> bool {
    reply
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .is_some_and(|w| w.eq_ignore_ascii_case("implausible"))
}

fn revise_request(profile: &CharacterProfile, model: &str, opts: &GenerationOptions) -> ChatRequest {
    ChatRequest::new(
        model,
        REVISE_SYSTEM,
        format!(
            "Character profile:\n{}\n\nSome world attributes in this profile do not fit together. Rewrite only the \
             lines before \"{}\", changing as little as possible so they become coherent. Copy the \"{}\" and \
             \"Conversational style:\" lines exactly, character for character. Reply with the full revised profile only.",
            profile.description,
            MORAL_PREFIX.trim_end(),
            MORAL_PREFIX.trim_end().trim_end_matches(':'),
        ),
    )
    .temperature(opts.temperature)
    .max_tokens(opts.max_tokens)
}

/// Checks a reviser reply: both behavioral lines must appear verbatim and the
/// remaining lines must be free of behavioral vocabulary.
fn accept_revision(
    reply: &str,
    parts: &RenderedProfile,
    lexicon: &BehavioralLexicon,
) -> Result<RenderedProfile, String> {
    let lines: Vec<&str> = reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if !lines.contains(&parts.moral_line.as_str()) {
        return Err("reviser altered the moral outlook".into());
    }
    if !lines.contains(&parts.reaction_line.as_str()) {
        return Err("reviser altered the conversational style".into());
    }
    let world_lines: Vec<String> = lines
        .iter()
        .filter(|l| **l != parts.moral_line && **l != parts.reaction_line)
        .map(|l| l.to_string())
        .collect();
    if world_lines.is_empty() {
        return Err("reviser removed every world attribute".into());
    }
    for line in &world_lines {
        let screen = lexicon.screen(line);
        if !screen.clean {
            return Err(format!("reviser added behavioral terms {:?}", screen.matched_terms));
        }
    }
    Ok(RenderedProfile { world_lines, moral_line: parts.moral_line.clone(), reaction_line: parts.reaction_line.clone() })
}

/// One flag call; when flagged, up to two revision calls. Only world lines may
/// change: a revision that touches the behavioral lines is rejected.
pub fn revise_implausible(
    profile: &CharacterProfile,
    setting: &SettingSpec,
    banks: &BehaviorBanks,
    gateway: &Gateway,
    opts: &GenerationOptions,
) -> Result<RevisionOutcome, GenerationError> {
    let flag = gateway.complete(&flag_request(profile, gateway.model(), opts));
    revise_after_flag(profile, setting, banks, gateway, opts, flag.map(|r| r.text).map_err(|e| e.to_string()))
}

fn revise_after_flag(
    profile: &CharacterProfile,
    setting: &SettingSpec,
    banks: &BehaviorBanks,
    gateway: &Gateway,
    opts: &GenerationOptions,
    flag: Result<String, String>,
) -> Result<RevisionOutcome, GenerationError> {
    let bp = profile
        .blueprint
        .as_ref()
        .ok_or_else(|| GenerationError::InvalidParams(format!("profile {} has no blueprint", profile.id)))?;
    let unchanged = |violations, error| RevisionOutcome { profile: profile.clone(), violations, error };

    let verdict = match flag {
        Ok(text) => text,
        Err(e) => return Ok(unchanged(vec![], Some(format!("plausibility flag failed: {e}")))),
    };
    if !is_flagged(&verdict) {
        return Ok(unchanged(vec![], None));
    }

    let parts = render_parts(bp, setting, banks)?;
    let lexicon = BehavioralLexicon::default();
    let mut violations = Vec::new();
    let mut req = revise_request(profile, gateway.model(), opts);
    for attempt in 0..2 {
        let reply = match gateway.complete(&req) {
            Ok(r) => r.text,
            Err(e) => return Ok(unchanged(violations, Some(format!("revision failed: {e}")))),
        };
        match accept_revision(&reply, &parts, &lexicon) {
            Ok(revised) => {
                let mut p = profile.clone();
                p.description = revised.text();
                p.revised = true;
                return Ok(RevisionOutcome { profile: p, violations, error: None });
            }
            Err(why) => {
                violations.push(why);
                if attempt == 0 {
                    req = req.follow_up(
                        &reply,
                        "The \"Moral outlook:\" and \"Conversational style:\" lines must be copied exactly and the \
                         other lines must not describe personality. Reply with the full corrected profile only.",
                    );
                }
            }
        }
    }
    Ok(unchanged(violations, None))
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

fn config_digest(method: Method, setting: &SettingSpec, n: usize, seed: u64, extra: serde_json::Value, gateway: &Gateway, opts: &GenerationOptions) -> String {
    digest_of(&json!({
        "method": method,
        "setting": setting,
        "n": n,
        "seed": seed,
        "backend": gateway.backend_id(),
        "model": gateway.model(),
        "options": opts,
        "extra": extra,
    }))
}

pub fn generate_personaweaver(
    setting: &SettingSpec,
    n: usize,
    world: &WorldBank,
    banks: &BehaviorBanks,
    gateway: &Gateway,
    seed: u64,
    opts: &GenerationOptions,
) -> Result<Population, GenerationError> {
    if n == 0 {
        return Err(GenerationError::InvalidParams("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    let mut profiles = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{}-{i:04}", Method::PersonaWeaver.id_prefix());
        let mut bp = sample_blueprint(world, &banks.morals, &banks.reactions, &mut rng)?;
        let mut redraws = 0;
        while seen.contains(&bp.combination_key()) && redraws < MAX_REDRAWS {
            bp = sample_blueprint(world, &banks.morals, &banks.reactions, &mut rng)?;
            redraws += 1;
        }
        if !seen.insert(bp.combination_key()) {
            warn!(profile = %id, "accepting duplicate blueprint after {MAX_REDRAWS} re-draws");
            issues.push(GenerationIssue::warning(
                Some(id.clone()),
                "sample",
                format!("duplicate blueprint accepted after {MAX_REDRAWS} re-draws"),
            ));
        }
        let description = render_profile(&bp, setting, banks)?;
        profiles.push(CharacterProfile {
            id,
            setting_name: setting.name.clone(),
            method: Method::PersonaWeaver,
            description,
            blueprint: Some(bp),
            revised: false,
        });
    }

    if opts.revise {
        let flags: Vec<ChatRequest> = profiles.iter().map(|p| flag_request(p, gateway.model(), opts)).collect();
        let verdicts = gateway.complete_batch(&flags);
        let jobs: Vec<(CharacterProfile, Result<String, String>)> = profiles
            .into_iter()
            .zip(verdicts)
            .map(|(p, v)| {
                let verdict = match v.error {
                    Some(e) => Err(e),
                    None => Ok(v.text),
                };
                (p, verdict)
            })
            .collect();
        let outcomes = parallel_map(&jobs, gateway.max_in_flight(), |(p, verdict)| {
            revise_after_flag(p, setting, banks, gateway, opts, verdict.clone())
        });
        profiles = Vec::with_capacity(n);
        for outcome in outcomes {
            let outcome = outcome?;
            let id = Some(outcome.profile.id.clone());
            for v in outcome.violations {
                issues.push(GenerationIssue::warning(id.clone(), "revise", v));
            }
            if let Some(e) = outcome.error {
                issues.push(GenerationIssue::error(id.clone(), "revise", e));
            }
            profiles.push(outcome.profile);
        }
    }

    Ok(Population {
        setting_name: setting.name.clone(),
        method: Method::PersonaWeaver,
        seed,
        requested: n,
        generation_config_digest: config_digest(
            Method::PersonaWeaver,
            setting,
            n,
            seed,
            json!({"world": world, "banks": banks}),
            gateway,
            opts,
        ),
        profiles,
        issues,
    })
}

/// Items of a numbered list ("1. ...", "2) ...", "**3.** ..."); unnumbered
/// lines continue the current item.
pub fn parse_numbered(reply: &str) -> Vec<String> {
    static ITEM: OnceLock<Regex> = OnceLock::new();
    let item = ITEM.get_or_init(|| Regex::new(r"^\s*(?:\*\*)?\d+\s*[.):](?:\*\*)?\s*(.*)$").unwrap());
    let mut items: Vec<String> = Vec::new();
    for line in reply.lines() {
        if let Some(c) = item.captures(line) {
            items.push(c[1].trim().to_string());
        } else if let Some(last) = items.last_mut() {
            let extra = line.trim();
            if !extra.is_empty() {
                if !last.is_empty() {
                    last.push(' ');
                }
                last.push_str(extra);
            }
        }
    }
    items.retain(|s| !s.is_empty());
    items
}

const DIRECT_SYSTEM: &str = "You create characters for interactive simulations.";

fn direct_prompt(setting: &SettingSpec, batch_size: usize, batch: usize, batches: usize) -> String {
    format!(
        "Generate {batch_size} different character profiles for the following setting.\n\n\
         Setting: {}\n\n\
         This is batch {batch} of {batches}. Write each profile as one short paragraph on a single line, \
         numbered 1 to {batch_size} in the form \"1. <profile>\".",
        setting.prompt
    )
}

/// Direct prompting in batches of [`WORLDWEAVER_BATCH`] numbered profiles.
pub fn generate_worldweaver(
    setting: &SettingSpec,
    n: usize,
    gateway: &Gateway,
    opts: &GenerationOptions,
) -> Result<Population, GenerationError> {
    if n == 0 {
        return Err(GenerationError::InvalidParams("n must be at least 1".into()));
    }
    let sizes: Vec<usize> = (0..n).step_by(WORLDWEAVER_BATCH).map(|start| WORLDWEAVER_BATCH.min(n - start)).collect();
    let reqs: Vec<ChatRequest> = sizes
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            ChatRequest::new(gateway.model(), DIRECT_SYSTEM, direct_prompt(setting, b, j + 1, sizes.len()))
                .temperature(opts.temperature)
                .max_tokens(opts.max_tokens.saturating_mul(b as u32).min(16_000))
        })
        .collect();
    let firsts = gateway.complete_batch(&reqs);

    let mut issues = Vec::new();
    let mut profiles = Vec::with_capacity(n);
    for (j, ((req, first), &size)) in reqs.iter().zip(firsts).zip(&sizes).enumerate() {
        let stage = format!("batch {}", j + 1);
        let mut items = if first.is_error() { Vec::new() } else { parse_numbered(&first.text) };
        if items.is_empty() {
            let retry = if first.is_error() {
                gateway.complete(req)
            } else {
                gateway.complete(&req.follow_up(
                    &first.text,
                    format!("Please reply with exactly {size} numbered profiles: \"1. ...\", \"2. ...\", one per line."),
                ))
            };
            match retry {
                Ok(r) => items = parse_numbered(&r.text),
                Err(e) => issues.push(GenerationIssue::error(None, &stage, format!("backend failure: {e}"))),
            }
        }
        if items.is_empty() {
            for _ in 0..size {
                issues.push(GenerationIssue::error(None, &stage, "reply was not a numbered list"));
            }
            continue;
        }
        items.truncate(size);
        for _ in items.len()..size {
            issues.push(GenerationIssue::error(None, &stage, "fewer profiles than requested"));
        }
        for description in items {
            profiles.push(CharacterProfile {
                id: format!("{}-{:04}", Method::WorldWeaver.id_prefix(), profiles.len()),
                setting_name: setting.name.clone(),
                method: Method::WorldWeaver,
                description,
                blueprint: None,
                revised: false,
            });
        }
    }
    Ok(Population {
        setting_name: setting.name.clone(),
        method: Method::WorldWeaver,
        seed: 0,
        requested: n,
        generation_config_digest: config_digest(Method::WorldWeaver, setting, n, 0, json!(null), gateway, opts),
        profiles,
        issues,
    })
}

const ADAPT_SYSTEM: &str = "You adapt existing personas into characters for a given setting.";

/// Seeded selection of `n` persona indices: a shuffled prefix without
/// replacement, or independent uniform draws with it.
pub fn select_personas(available: usize, n: usize, seed: u64, with_replacement: bool) -> Result<Vec<usize>, GenerationError> {
    if available == 0 || (!with_replacement && available < n) {
        return Err(GenerationError::ShortPersonaFile { available, requested: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if with_replacement {
        Ok((0..n).map(|_| rng.gen_range(0..available)).collect())
    } else {
        let mut idx: Vec<usize> = (0..available).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        Ok(idx)
    }
}

pub fn generate_personahub(
    setting: &SettingSpec,
    persona_file: &Path,
    n: usize,
    gateway: &Gateway,
    seed: u64,
    opts: &GenerationOptions,
) -> Result<Population, GenerationError> {
    let personas = banks::parse_persona_file(persona_file)?;
    generate_personahub_from(setting, &personas, n, gateway, seed, opts)
}

pub fn generate_personahub_from(
    setting: &SettingSpec,
    personas: &[String],
    n: usize,
    gateway: &Gateway,
    seed: u64,
    opts: &GenerationOptions,
) -> Result<Population, GenerationError> {
    if n == 0 {
        return Err(GenerationError::InvalidParams("n must be at least 1".into()));
    }
    let picks = select_personas(personas.len(), n, seed, opts.with_replacement)?;
    let reqs: Vec<ChatRequest> = picks
        .iter()
        .map(|&i| {
            ChatRequest::new(
                gateway.model(),
                ADAPT_SYSTEM,
                format!(
                    "Adapt this persona to the setting below as a short character profile.\n\nSetting: {}\n\nPersona: {}",
                    setting.prompt, personas[i]
                ),
            )
            .temperature(opts.temperature)
            .max_tokens(opts.max_tokens)
        })
        .collect();
    let replies = gateway.complete_batch(&reqs);
    let mut profiles = Vec::with_capacity(n);
    let mut issues = Vec::new();
    for (i, reply) in replies.into_iter().enumerate() {
        let id = format!("{}-{i:04}", Method::PersonaHub.id_prefix());
        match reply.error {
            Some(e) => issues.push(GenerationIssue::error(Some(id), "adapt", e)),
            None => profiles.push(CharacterProfile {
                id,
                setting_name: setting.name.clone(),
                method: Method::PersonaHub,
                description: reply.text.trim().to_string(),
                blueprint: None,
                revised: false,
            }),
        }
    }
    Ok(Population {
        setting_name: setting.name.clone(),
        method: Method::PersonaHub,
        seed,
        requested: n,
        generation_config_digest: config_digest(
            Method::PersonaHub,
            setting,
            n,
            seed,
            json!({"personas": crate::canonical::sha256_hex(banks::serialize_personas(personas).as_bytes())}),
            gateway,
            opts,
        ),
        profiles,
        issues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::banks::find_setting;
    use crate::gateway::{BackendReply, GatewayError, MockScript};
    use crate::worldgen::WorldAxis;

    fn setting() -> SettingSpec {
        find_setting("Game of Thrones").unwrap()
    }

    fn world(axes: &[(&str, &[&str])]) -> WorldBank {
        WorldBank {
            setting: setting(),
            axes: axes
                .iter()
                .map(|(n, o)| WorldAxis { name: n.to_string(), options: o.iter().map(|s| s.to_string()).collect() })
                .collect(),
        }
    }

    fn small_world() -> WorldBank {
        world(&[("occupation", &["blacksmith", "harbor pilot", "scribe"]), ("affiliation", &["city watch", "fishers' guild"])])
    }

    fn no_revise() -> GenerationOptions {
        GenerationOptions { revise: false, ..Default::default() }
    }

    #[test]
    fn degenerate_banks_give_the_unique_combination() {
        let w = world(&[("occupation", &["scribe"])]);
        let banks = BehaviorBanks::builtin();
        let morals = &banks.morals[..1];
        let reactions = &banks.reactions[..1];
        for seed in [0, 1, 99] {
            let bp = sample_blueprint(&w, morals, reactions, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(bp.world_choices["occupation"], "scribe");
            assert_eq!(bp.moral_id, "M1");
            assert_eq!(bp.reaction_id, 0);
        }
    }

    #[test]
    fn same_seed_same_blueprint() {
        let banks = BehaviorBanks::builtin();
        let a = sample_blueprint(&small_world(), &banks.morals, &banks.reactions, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_blueprint(&small_world(), &banks.morals, &banks.reactions, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_banks_rejected() {
        let banks = BehaviorBanks::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_blueprint(&small_world(), &[], &banks.reactions, &mut rng), Err(GenerationError::EmptyBank(_))));
        assert!(matches!(sample_blueprint(&small_world(), &banks.morals, &[], &mut rng), Err(GenerationError::EmptyBank(_))));
        let w = world(&[("occupation", &[])]);
        assert!(matches!(sample_blueprint(&w, &banks.morals, &banks.reactions, &mut rng), Err(GenerationError::EmptyBank(_))));
    }

    #[test]
    fn dispositions_for_builtin_reactions() {
        let got: Vec<String> = BehaviorBanks::builtin().reactions.iter().map(|r| disposition(&r.description)).collect();
        assert_eq!(
            got,
            [
                "tends to refuse to answer questions",
                "tends to redirect or dismiss questions",
                "tends to hesitate about whether to answer",
                "tends to answer questions directly",
                "tends to answer fully and add extra details, even unasked ones",
                "tends to reply in a teasing, sarcastic, or ironic way",
                "tends to respond with aggression, sarcasm, or dismissal of the asker",
                "tends to comment on the act of being questioned itself instead of answering",
            ]
        );
    }

    fn bp(moral: &str, reaction: u32) -> CharacterBlueprint {
        CharacterBlueprint {
            world_choices: [("occupation".to_string(), "Harbor pilot".to_string())].into_iter().collect(),
            moral_id: moral.into(),
            reaction_id: reaction,
            draw_seed: 0,
        }
    }

    #[test]
    fn render_contains_verbatim_behavior() {
        let banks = BehaviorBanks::builtin();
        let text = render_profile(&bp("M7", 0), &setting(), &banks).unwrap();
        assert!(text.contains("Be polite and respectful to others."));
        assert!(text.contains(&banks.moral("M7").unwrap().text));
        assert!(text.contains("tends to refuse to answer questions"));
        assert!(text.contains("Their occupation is harbor pilot."));
        assert!(!text.contains("M7"));
        assert_eq!(text, render_profile(&bp("M7", 0), &setting(), &banks).unwrap());
        assert!(matches!(render_profile(&bp("M9", 0), &setting(), &banks), Err(GenerationError::UnknownMoral(_))));
        assert!(matches!(render_profile(&bp("M1", 8), &setting(), &banks), Err(GenerationError::UnknownReaction(8))));
    }

    #[test]
    fn flag_verdicts() {
        assert!(is_flagged("IMPLAUSIBLE"));
        assert!(is_flagged("implausible."));
        assert!(is_flagged("**Implausible** because"));
        assert!(!is_flagged("PLAUSIBLE"));
        assert!(!is_flagged("I think this is implausible"));
        assert!(!is_flagged(""));
    }

    fn knight_profile() -> (CharacterProfile, BehaviorBanks) {
        let banks = BehaviorBanks::builtin();
        let mut b = bp("M4", 6);
        b.world_choices.insert("occupation".into(), "medieval knight software engineer".into());
        let profile = CharacterProfile {
            id: "pw-0000".into(),
            setting_name: setting().name,
            method: Method::PersonaWeaver,
            description: render_profile(&b, &setting(), &banks).unwrap(),
            blueprint: Some(b),
            revised: false,
        };
        (profile, banks)
    }

    #[test]
    fn plausible_profiles_untouched() {
        let (profile, banks) = knight_profile();
        let gw = Gateway::mock(&MockScript::with_default("PLAUSIBLE")).unwrap();
        let out = revise_implausible(&profile, &setting(), &banks, &gw, &GenerationOptions::default()).unwrap();
        assert_eq!(out.profile, profile);
        assert!(!out.profile.revised);
        assert_eq!(gw.stats().requests, 1);
    }

    #[test]
    fn implausible_world_is_revised() {
        let (profile, banks) = knight_profile();
        let reviser = |r: &ChatRequest| -> Result<BackendReply, GatewayError> {
            if r.system == FLAG_SYSTEM {
                return Ok(BackendReply::stop("IMPLAUSIBLE"));
            }
            let body = r.last_user_text().split("Character profile:\n").nth(1).unwrap();
            let body = body.split("\n\nSome world attributes").next().unwrap();
            Ok(BackendReply::stop(body.replace("medieval knight software engineer", "castle blacksmith")))
        };
        let gw = Gateway::with_backend(reviser);
        let out = revise_implausible(&profile, &setting(), &banks, &gw, &GenerationOptions::default()).unwrap();
        assert!(out.profile.revised);
        assert!(out.violations.is_empty());
        assert!(out.profile.description.contains("Their occupation is castle blacksmith."));
        assert!(!out.profile.description.contains("software engineer"));
        let before = render_parts(profile.blueprint.as_ref().unwrap(), &setting(), &banks).unwrap();
        assert!(out.profile.description.contains(&before.moral_line));
        assert!(out.profile.description.contains(&before.reaction_line));
    }

    #[test]
    fn reviser_editing_moral_text_is_rejected() {
        let (profile, banks) = knight_profile();
        let adversary = |r: &ChatRequest| -> Result<BackendReply, GatewayError> {
            if r.system == FLAG_SYSTEM {
                return Ok(BackendReply::stop("IMPLAUSIBLE"));
            }
            let body = r.turns[0].text.split("Character profile:\n").nth(1).unwrap();
            let body = body.split("\n\nSome world attributes").next().unwrap();
            Ok(BackendReply::stop(body.replace("Cheat and deceive", "Never cheat or deceive")))
        };
        let gw = Gateway::with_backend(adversary);
        let out = revise_implausible(&profile, &setting(), &banks, &gw, &GenerationOptions::default()).unwrap();
        assert_eq!(out.profile, profile);
        assert!(!out.profile.revised);
        assert_eq!(out.violations.len(), 2);
        assert!(out.violations[0].contains("moral"));
        assert_eq!(gw.stats().requests, 3);
    }

    #[test]
    fn reviser_leaking_behavior_is_rejected() {
        let (profile, banks) = knight_profile();
        let adversary = |r: &ChatRequest| -> Result<BackendReply, GatewayError> {
            if r.system == FLAG_SYSTEM {
                return Ok(BackendReply::stop("IMPLAUSIBLE"));
            }
            let body = r.turns[0].text.split("Character profile:\n").nth(1).unwrap();
            let body = body.split("\n\nSome world attributes").next().unwrap();
            Ok(BackendReply::stop(body.replace("medieval knight software engineer", "friendly blacksmith")))
        };
        let out = revise_implausible(&profile, &setting(), &banks, &Gateway::with_backend(adversary), &GenerationOptions::default()).unwrap();
        assert!(!out.profile.revised);
        assert!(out.violations.iter().all(|v| v.contains("friendly")));
    }

    #[test]
    fn flag_failure_returns_profile_with_error() {
        let (profile, banks) = knight_profile();
        let down = |_: &ChatRequest| -> Result<BackendReply, GatewayError> { Err(GatewayError::Transport("down".into())) };
        let out = revise_implausible(&profile, &setting(), &banks, &Gateway::with_backend(down), &GenerationOptions::default()).unwrap();
        assert_eq!(out.profile, profile);
        assert!(out.error.unwrap().contains("down"));
    }

    #[test]
    fn personaweaver_population_is_deterministic() {
        let banks = BehaviorBanks::builtin();
        let gw = Gateway::mock(&MockScript::with_default("PLAUSIBLE")).unwrap();
        let a = generate_personaweaver(&setting(), 1, &small_world(), &banks, &gw, 42, &GenerationOptions::default()).unwrap();
        let b = generate_personaweaver(&setting(), 1, &small_world(), &banks, &gw, 42, &GenerationOptions::default()).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.profiles.len(), 1);
        a.validate().unwrap();
        let c = generate_personaweaver(&setting(), 1, &small_world(), &banks, &gw, 43, &GenerationOptions::default()).unwrap();
        assert_ne!(a.generation_config_digest, c.generation_config_digest);
    }

    #[test]
    fn blueprints_redrawn_until_distinct() {
        // 2 occupations x 1 moral x 2 reactions = 4 combinations for 3 profiles.
        let w = world(&[("occupation", &["scribe", "pilot"])]);
        let full = BehaviorBanks::builtin();
        let banks = BehaviorBanks { morals: full.morals[..1].to_vec(), reactions: full.reactions[..2].to_vec() };
        let gw = Gateway::mock(&MockScript::with_default("PLAUSIBLE")).unwrap();
        for seed in 0..20 {
            let pop = generate_personaweaver(&setting(), 3, &w, &banks, &gw, seed, &no_revise()).unwrap();
            let keys: HashSet<_> = pop.profiles.iter().map(|p| p.blueprint.as_ref().unwrap().combination_key()).collect();
            assert_eq!(keys.len(), 3, "seed {seed}");
            assert!(pop.issues.is_empty());
        }
        // Only 2 combinations for 3 profiles: the third is a recorded duplicate.
        let w1 = world(&[("occupation", &["scribe"])]);
        let pop = generate_personaweaver(&setting(), 3, &w1, &banks, &gw, 0, &no_revise()).unwrap();
        assert_eq!(pop.profiles.len(), 3);
        assert_eq!(pop.issues.len(), 1);
        assert!(pop.issues[0].warning);
        assert_eq!(pop.error_count(), 0);
    }

    #[test]
    fn numbered_list_parsing() {
        assert_eq!(parse_numbered("1. A farmer...\n2. A teacher..."), ["A farmer...", "A teacher..."]);
        assert_eq!(parse_numbered("Sure!\n1) Ann, a baker\n   who sings\n**2.** Bo"), ["Ann, a baker who sings", "Bo"]);
        assert!(parse_numbered("Just some prose without numbers.").is_empty());
    }

    #[test]
    fn worldweaver_batches() {
        let ten: String = (1..=10).map(|i| format!("{i}. Character number {i}.\n")).collect();
        let gw = Gateway::mock(&MockScript::with_default(ten)).unwrap();
        let pop = generate_worldweaver(&setting(), 25, &gw, &no_revise()).unwrap();
        assert_eq!(gw.stats().backend_calls, 3);
        assert_eq!(pop.profiles.len(), 25);
        assert!(pop.profiles.iter().all(|p| p.blueprint.is_none() && p.method == Method::WorldWeaver));
        pop.validate().unwrap();

        let gw = Gateway::mock(&MockScript::with_default("1. A farmer...\n2. A teacher...")).unwrap();
        let pop = generate_worldweaver(&setting(), 2, &gw, &no_revise()).unwrap();
        let d: Vec<&str> = pop.profiles.iter().map(|p| p.description.as_str()).collect();
        assert_eq!(d, ["A farmer...", "A teacher..."]);
    }

    #[test]
    fn worldweaver_unparseable_batch() {
        let gw = Gateway::mock(&MockScript::with_default("Here are some lovely people who live there.")).unwrap();
        let pop = generate_worldweaver(&setting(), 3, &gw, &no_revise()).unwrap();
        assert_eq!(gw.stats().backend_calls, 2);
        assert!(pop.profiles.is_empty());
        assert_eq!(pop.error_count(), 3);
        pop.validate().unwrap();
    }

    fn personas(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("persona {i}")).collect()
    }

    #[test]
    fn personahub_exhaustive_shuffled_and_seeded() {
        let script = MockScript::with_default("").pattern(r"(?s)Persona: (.*)$", "ADAPTED: $1");
        let gw = Gateway::mock(&script).unwrap();
        let pool = personas(6);
        let a = generate_personahub_from(&setting(), &pool, 6, &gw, 9, &no_revise()).unwrap();
        assert!(a.profiles.iter().all(|p| p.description.starts_with("ADAPTED:")));
        let mut used: Vec<String> = a.profiles.iter().map(|p| p.description.replace("ADAPTED: ", "")).collect();
        let order = used.clone();
        used.sort();
        assert_eq!(used, pool);
        assert_ne!(order, pool, "seed 9 should not be the identity permutation");
        let b = generate_personahub_from(&setting(), &pool, 6, &gw, 9, &no_revise()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn personahub_short_file() {
        let gw = Gateway::mock(&MockScript::with_default("x")).unwrap();
        assert!(matches!(
            generate_personahub_from(&setting(), &personas(2), 5, &gw, 0, &no_revise()),
            Err(GenerationError::ShortPersonaFile { available: 2, requested: 5 })
        ));
        let opts = GenerationOptions { with_replacement: true, ..no_revise() };
        assert_eq!(generate_personahub_from(&setting(), &personas(2), 5, &gw, 0, &opts).unwrap().profiles.len(), 5);
        assert!(matches!(
            generate_personahub(&setting(), Path::new("/nonexistent.jsonl"), 1, &gw, 0, &opts),
            Err(GenerationError::Bank(_))
        ));
    }

    #[test]
    fn population_jsonl_round_trip() {
        let banks = BehaviorBanks::builtin();
        let gw = Gateway::mock(&MockScript::with_default("PLAUSIBLE")).unwrap();
        let pop = generate_personaweaver(&setting(), 4, &small_world(), &banks, &gw, 1, &GenerationOptions::default()).unwrap();
        let text = pop.to_jsonl();
        assert_eq!(text.lines().count(), 5);
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header["method"], "personaweaver");
        assert_eq!(header["seed"], 1);
        assert_eq!(Population::from_jsonl(&text).unwrap(), pop);
    }

    #[test]
    fn moral_and_reaction_draws_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let banks = BehaviorBanks::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut morals: IndexMap<String, u64> = banks.morals.iter().map(|m| (m.id.clone(), 0)).collect();
        let mut reactions = [0u64; 8];
        for _ in 0..8000 {
            let bp = sample_blueprint(&small_world(), &banks.morals, &banks.reactions, &mut rng).unwrap();
            morals[&bp.moral_id] += 1;
            reactions[bp.reaction_id as usize] += 1;
        }
        let chi = ChiSquared::new(7.0).unwrap();
        for counts in [morals.values().copied().collect::<Vec<_>>(), reactions.to_vec()] {
            assert!(counts.iter().all(|&c| c.abs_diff(1000) <= 90), "{counts:?}");
            let stat: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
            assert!(1.0 - chi.cdf(stat) > 0.001, "chi2 {stat}");
        }
    }

    #[test]
    fn method_names() {
        assert_eq!("WorldWeaver".parse::<Method>().unwrap(), Method::WorldWeaver);
        assert!("other".parse::<Method>().is_err());
        assert_eq!(serde_json::to_string(&Method::PersonaHub).unwrap(), "\"personahub\"");
    }
}
