//! World-building: setting-specific, non-behavioral attribute banks.
//!
//! The backend proposes axes of variation (occupation, affiliation, ...) and
//! then expands each axis into options that fit the setting. Every axis name
//! and option must pass a lexicon screen, so nothing behavioral can leak into
//! the world bank no matter what the model returns.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banks::SettingSpec;
use crate::gateway::{ChatRequest, ChatResponse, Gateway, GatewayError, GENERATION_TEMPERATURE};

const DEFAULT_LEXICON: &str = include_str!("../assets/behavioral_terms.txt");

pub const DEFAULT_AXES: usize = 6;
pub const DEFAULT_OPTIONS: usize = 10;

const SYSTEM_PROMPT: &str = "You help design the population of a fictional or real-world setting. \
You describe only world-building facts such as roles, positions, groups, backgrounds and skills.";

#[derive(Debug, Error)]
pub enum WorldgenError {
    #[error("backend failure: {0}")]
    Backend(#[from] GatewayError),
    #[error("only {found} usable axes after re-prompting (rejected: {rejected:?})")]
    TooFewAxes { found: usize, rejected: Vec<String> },
    #[error("axis `{axis}` has only {found} usable options")]
    TooFewOptions { axis: String, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("invalid world bank: {0}")]
    InvalidBank(String),
    #[error("cannot read lexicon {path}: {reason}")]
    Lexicon { path: String, reason: String },
    #[error("world bank I/O: {0}")]
    Io(String),
}

/// Result of screening one label against the behavioral lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Screen {
    pub clean: bool,
    pub matched_terms: Vec<String>,
}

/// Case-insensitive term list matched on word boundaries. Words are runs of
/// alphanumerics, `-` and `'`; multi-word terms match consecutive words.
#[derive(Debug, Clone)]
pub struct BehavioralLexicon {
    terms: Vec<(String, Vec<String>)>,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl BehavioralLexicon {
    /// Newline-delimited terms; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        let mut seen = HashSet::new();
        let terms = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .filter(|t| seen.insert(t.clone()))
            .filter_map(|t| {
                let w = words(&t);
                (!w.is_empty()).then_some((t, w))
            })
            .collect();
        Self { terms }
    }

    pub fn load(path: &Path) -> Result<Self, WorldgenError> {
        let text = fs::read_to_string(path)
            .map_err(|e| WorldgenError::Lexicon { path: path.display().to_string(), reason: e.to_string() })?;
        Ok(Self::parse(&text))
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(|(t, _)| t.as_str())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Matched terms are reported in the order they occur in `label`.
    pub fn screen(&self, label: &str) -> Screen {
        let label_words = words(label);
        let mut hits: Vec<(usize, &str)> = self
            .terms
            .iter()
            .filter_map(|(t, tw)| {
                label_words
                    .windows(tw.len())
                    .position(|w| w == tw.as_slice())
                    .map(|pos| (pos, t.as_str()))
            })
            .collect();
        hits.sort();
        Screen { clean: hits.is_empty(), matched_terms: hits.into_iter().map(|(_, t)| t.to_string()).collect() }
    }
}

impl Default for BehavioralLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON)
    }
}

fn default_lexicon() -> &'static BehavioralLexicon {
    static LEXICON: OnceLock<BehavioralLexicon> = OnceLock::new();
    LEXICON.get_or_init(BehavioralLexicon::default)
}

/// Screens `label` against the shipped lexicon.
pub fn screen_behavioral(label: &str) -> Screen {
    default_lexicon().screen(label)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldAxis {
    pub name: String,
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldBank {
    pub setting: SettingSpec,
    pub axes: Vec<WorldAxis>,
}

impl WorldBank {
    pub fn validate(&self, lexicon: &BehavioralLexicon) -> Result<(), WorldgenError> {
        let mut names = HashSet::new();
        for axis in &self.axes {
            if !names.insert(axis.name.to_lowercase()) {
                return Err(WorldgenError::InvalidBank(format!("duplicate axis `{}`", axis.name)));
            }
            if axis.options.len() < 2 {
                return Err(WorldgenError::TooFewOptions { axis: axis.name.clone(), found: axis.options.len() });
            }
            let mut seen = HashSet::new();
            for label in std::iter::once(&axis.name).chain(&axis.options) {
                let screen = lexicon.screen(label);
                if !screen.clean {
                    return Err(WorldgenError::InvalidBank(format!(
                        "`{label}` contains behavioral terms {:?}",
                        screen.matched_terms
                    )));
                }
            }
            for option in &axis.options {
                if !seen.insert(option.to_lowercase()) {
                    return Err(WorldgenError::InvalidBank(format!(
                        "axis `{}` repeats option `{option}`",
                        axis.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of distinct world-attribute combinations.
    pub fn combinations(&self) -> u128 {
        self.axes.iter().map(|a| a.options.len() as u128).product()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world bank serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldgenError> {
        fs::write(path, self.to_json() + "\n").map_err(|e| WorldgenError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, WorldgenError> {
        let text = fs::read_to_string(path).map_err(|e| WorldgenError::Io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| WorldgenError::Io(e.to_string()))
    }
}

/// Knobs for the world-building calls.
#[derive(Debug, Clone)]
pub struct WorldgenOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    pub lexicon: Arc<BehavioralLexicon>,
    /// Second screening pass that asks the backend about each surviving label.
    pub llm_screen: bool,
}

impl Default for WorldgenOptions {
    fn default() -> Self {
        Self {
            temperature: GENERATION_TEMPERATURE,
            max_tokens: 400,
            lexicon: Arc::new(BehavioralLexicon::default()),
            llm_screen: false,
        }
    }
}

/// Splits a model reply into list items: commas and newlines separate items;
/// bullets, numbering, quotes, a trailing period and a leading "and"/"or" are
/// stripped; headings and chatty sentences are dropped.
pub fn parse_list(reply: &str) -> Vec<String> {
    static BULLET: OnceLock<Regex> = OnceLock::new();
    let bullet = BULLET.get_or_init(|| Regex::new(r"^(?:[-*•]+|\d+[.)]|\(\d+\))\s*").unwrap());
    let mut items = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        if line.is_empty() || line.ends_with(':') {
            continue;
        }
        for part in line.split([',', ';']) {
            let mut item = bullet.replace(part.trim(), "").trim().to_string();
            item = item.replace("**", "");
            let lower = item.to_lowercase();
            for prefix in ["and ", "or "] {
                if lower.starts_with(prefix) {
                    item = item[prefix.len()..].to_string();
                    break;
                }
            }
            let item = item.trim().trim_matches(|c| matches!(c, '"' | '\'' | '`' | '“' | '”')).trim_end_matches('.').trim();
            if item.is_empty() || item.split_whitespace().count() > 8 {
                continue;
            }
            items.push(item.to_string());
        }
    }
    items
}

/// Keeps items that pass the lexicon and are new under case-insensitive
/// comparison. Returns (accepted, rejected).
fn screen_items(
    items: Vec<String>,
    lexicon: &BehavioralLexicon,
    seen: &mut HashSet<String>,
) -> (Vec<String>, Vec<String>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for item in items {
        if !lexicon.screen(&item).clean {
            rejected.push(item);
        } else if seen.insert(item.to_lowercase()) {
            accepted.push(item);
        }
    }
    (accepted, rejected)
}

/// Asks the backend whether each label is behavioral; drops the ones it says
/// are. Unclear answers keep the label.
fn llm_screen(labels: Vec<String>, gateway: &Gateway) -> Vec<String> {
    let reqs: Vec<ChatRequest> = labels
        .iter()
        .map(|label| {
            ChatRequest::new(
                gateway.model(),
                "You check labels for behavioral content.",
                format!(
                    "Label: \"{label}\"\n\nDoes this label describe a personality trait, moral value, \
                     emotional tendency or conversational behavior? Answer YES or NO."
                ),
            )
            .temperature(0.0)
            .max_tokens(5)
        })
        .collect();
    let replies = gateway.complete_batch(&reqs);
    labels
        .into_iter()
        .zip(replies)
        .filter(|(_, r)| !r.text.trim().to_uppercase().starts_with("YES"))
        .map(|(l, _)| l)
        .collect()
}

/// An empty reply is treated as an empty list rather than a failure.
fn reply_or_empty(result: Result<ChatResponse, GatewayError>) -> Result<ChatResponse, GatewayError> {
    match result {
        Err(GatewayError::EmptyResponse) => Ok(ChatResponse {
            text: String::new(),
            finish_reason: crate::gateway::FinishReason::Stop,
            cached: false,
            error: None,
        }),
        other => other,
    }
}

fn axes_prompt(setting: &SettingSpec, k: usize) -> String {
    format!(
        "Setting: {}\n\n\
         Propose {k} axes of variation along which the inhabitants of this setting differ, \
         for example occupation or affiliation. Use only world-building attributes: roles, \
         positions, groups, backgrounds, skills. Do not include any behavioral dimension: \
         no personality, temperament, moral values, attitudes, emotions or conversational style.\n\n\
         Reply with the axis names only, as a comma-separated list.",
        setting.prompt
    )
}

fn options_prompt(setting: &SettingSpec, axis: &str, m: usize) -> String {
    format!(
        "Setting: {}\n\n\
         List {m} distinct options for the character attribute \"{axis}\" that fit this specific setting. \
         Each option must be a world-building fact, without any personality or moral descriptor.\n\n\
         Reply with the options only, as a comma-separated list.",
        setting.prompt
    )
}

fn request(gateway: &Gateway, user: String, opts: &WorldgenOptions) -> ChatRequest {
    ChatRequest::new(gateway.model(), SYSTEM_PROMPT, user)
        .temperature(opts.temperature)
        .max_tokens(opts.max_tokens)
}

pub fn propose_axes(
    setting: &SettingSpec,
    k: usize,
    gateway: &Gateway,
    opts: &WorldgenOptions,
) -> Result<Vec<String>, WorldgenError> {
    if k == 0 {
        return Err(WorldgenError::InvalidParams("k must be at least 1".into()));
    }
    let req = request(gateway, axes_prompt(setting, k), opts);
    let first = reply_or_empty(gateway.complete(&req))?;

    let mut seen = HashSet::new();
    let (mut axes, mut rejected) = screen_items(parse_list(&first.text), &opts.lexicon, &mut seen);
    if opts.llm_screen {
        axes = llm_screen(axes, gateway);
    }
    if axes.len() < k {
        let needed = k - axes.len();
        let follow = req.follow_up(
            &first.text,
            format!(
                "Give {needed} more axis names, different from: {}. Rejected items (behavioral or unusable): {}. \
                 Remember: no behavioral traits. Reply as a comma-separated list.",
                if axes.is_empty() { "none".to_string() } else { axes.join(", ") },
                if rejected.is_empty() { "none".to_string() } else { rejected.join(", ") },
            ),
        );
        let second = reply_or_empty(gateway.complete(&follow))?;
        let (mut more, more_rejected) = screen_items(parse_list(&second.text), &opts.lexicon, &mut seen);
        if opts.llm_screen {
            more = llm_screen(more, gateway);
        }
        axes.extend(more);
        rejected.extend(more_rejected);
    }
    axes.truncate(k);
    if axes.len() < k.min(2) {
        return Err(WorldgenError::TooFewAxes { found: axes.len(), rejected });
    }
    Ok(axes)
}

fn finish_options(
    axis: &str,
    m: usize,
    first: ChatResponse,
    req: &ChatRequest,
    gateway: &Gateway,
    opts: &WorldgenOptions,
) -> Result<Vec<String>, WorldgenError> {
    let mut seen = HashSet::new();
    let (mut options, _) = screen_items(parse_list(&first.text), &opts.lexicon, &mut seen);
    if opts.llm_screen {
        options = llm_screen(options, gateway);
    }
    if options.len() < 2 {
        let follow = req.follow_up(
            &first.text,
            format!(
                "That list had too few usable options. List {m} options for \"{axis}\" again, \
                 with no personality or moral descriptors, as a comma-separated list."
            ),
        );
        let second = reply_or_empty(gateway.complete(&follow))?;
        let (mut more, _) = screen_items(parse_list(&second.text), &opts.lexicon, &mut seen);
        if opts.llm_screen {
            more = llm_screen(more, gateway);
        }
        options.extend(more);
    }
    options.truncate(m);
    if options.len() < 2 {
        return Err(WorldgenError::TooFewOptions { axis: axis.to_string(), found: options.len() });
    }
    Ok(options)
}

pub fn expand_axis(
    setting: &SettingSpec,
    axis_name: &str,
    m: usize,
    gateway: &Gateway,
    opts: &WorldgenOptions,
) -> Result<Vec<String>, WorldgenError> {
    if m < 2 {
        return Err(WorldgenError::InvalidParams("m must be at least 2".into()));
    }
    let req = request(gateway, options_prompt(setting, axis_name, m), opts);
    let first = reply_or_empty(gateway.complete(&req))?;
    finish_options(axis_name, m, first, &req, gateway, opts)
}

/// Proposes `k` axes and expands each into up to `m` options. The first
/// expansion round for all axes goes out as one batch.
pub fn build_world_bank(
    setting: &SettingSpec,
    k: usize,
    m: usize,
    gateway: &Gateway,
    opts: &WorldgenOptions,
) -> Result<WorldBank, WorldgenError> {
    if k < 2 || m < 2 {
        return Err(WorldgenError::InvalidParams(format!("need k >= 2 and m >= 2, got k={k}, m={m}")));
    }
    let names = propose_axes(setting, k, gateway, opts)?;
    let reqs: Vec<ChatRequest> =
        names.iter().map(|n| request(gateway, options_prompt(setting, n, m), opts)).collect();
    let firsts = gateway.complete_batch(&reqs);

    let mut axes = Vec::with_capacity(names.len());
    for ((name, req), first) in names.into_iter().zip(&reqs).zip(firsts) {
        // Failed batch items get one direct retry so the real error surfaces.
        let first = if first.is_error() { reply_or_empty(gateway.complete(req))? } else { first };
        let options = finish_options(&name, m, first, req, gateway, opts)?;
        axes.push(WorldAxis { name, options });
    }
    let bank = WorldBank { setting: setting.clone(), axes };
    bank.validate(&opts.lexicon)?;
    Ok(bank)
}
