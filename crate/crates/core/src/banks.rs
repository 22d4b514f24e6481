//! Behavioral banks, settings and probe corpora.
//!
//! The built-in assets are compiled in verbatim. Custom moral and reaction
//! banks are JSON arrays; persona banks are JSONL with one `{"persona": ...}`
//! object per line.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{path}: duplicate id {id}")]
    DuplicateId { path: PathBuf, id: String },
    #[error("{path}: reaction ids must be contiguous from 0, missing {missing}")]
    NonContiguous { path: PathBuf, missing: u32 },
    #[error("invalid setting `{name}`: {reason}")]
    InvalidSetting { name: String, reason: String },
    #[error("unknown setting `{0}`")]
    UnknownSetting(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoralPosition {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionStyle {
    pub id: u32,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SettingCategory {
    Realistic,
    Fantastical,
}

impl fmt::Display for SettingCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SettingCategory::Realistic => "realistic",
            SettingCategory::Fantastical => "fantastical",
        })
    }
}

/// An environment a population is instantiated in. The prompt describes the
/// place without naming the title it was drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub name: String,
    pub category: SettingCategory,
    pub prompt: String,
}

impl SettingSpec {
    pub fn new(
        name: impl Into<String>,
        category: SettingCategory,
        prompt: impl Into<String>,
    ) -> Result<Self, BankError> {
        let s = Self { name: name.into(), category, prompt: prompt.into() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), BankError> {
        let invalid = |reason: &str| BankError::InvalidSetting { name: self.name.clone(), reason: reason.into() };
        if self.name.trim().is_empty() {
            return Err(invalid("name is empty"));
        }
        if self.prompt.trim().is_empty() {
            return Err(invalid("prompt is empty"));
        }
        if self.prompt.to_lowercase().contains(&self.name.to_lowercase()) {
            return Err(invalid("prompt mentions the setting's title"));
        }
        Ok(())
    }

    /// File-system friendly name: lowercase ASCII alphanumerics joined by `-`.
    pub fn slug(&self) -> String {
        slugify(&self.name)
    }
}

pub fn slugify(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// One probe stimulus with its stable id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCorpus {
    pub moral_statements: Vec<String>,
    pub sentiment_questions: Vec<String>,
    pub general_questions: Vec<String>,
}

impl ProbeCorpus {
    /// Moral statements with ids `n1`..`n10`.
    pub fn moral_items(&self) -> Vec<ProbeItem> {
        numbered("n", &self.moral_statements)
    }

    /// Sentiment questions (`s1`..`s5`) followed by general ones (`q1`..`q5`).
    pub fn question_items(&self) -> Vec<ProbeItem> {
        let mut items = numbered("s", &self.sentiment_questions);
        items.extend(numbered("q", &self.general_questions));
        items
    }
}

fn numbered(prefix: &str, texts: &[String]) -> Vec<ProbeItem> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| ProbeItem { id: format!("{prefix}{}", i + 1), text: t.clone() })
        .collect()
}

const MORAL_POSITIONS: [(&str, &str); 8] = [
    ("M1", "Protect others from harm, show compassion. Be fair and honest, avoid cheating. Be loyal to friends and allies. Question authority and resist control. Ignore purity or sacred rules. Defend personal freedom and resist oppression."),
    ("M2", "Help others only when it’s easy or benefits you. Be fair when it serves your interests, otherwise bend the rules. Support your group if it gives you an advantage, but walk away if not. Obey authority when it benefits you, ignore it when it doesn’t. Dismiss purity or sacred values as irrelevant. Accept limits on freedom if they bring you personal gain."),
    ("M3", "Show kindness but prioritize your own circle. Be fair within your group, less so with outsiders. Put family, community, or team first. Respect tradition and leaders. Value purity and avoid what feels degrading. Do not challenge authority for the sake of freedom."),
    ("M4", "Ignore others’ suffering, focus only on your own comfort. Cheat and deceive if it benefits you. Abandon groups and betray others when useful. Reject rules, defy authority, and act for yourself. Mock sacred things and indulge in what others call impure. Dominate others and accept domination if it helps you survive."),
    ("M5", "Show compassion but avoid being naive. Be fair, but allow exceptions. Be cooperative when it benefits the team. Respect some rules but question others. Avoid disgusting or degrading acts. Seek personal freedom but balance with order."),
    ("M6", "Prioritize kindness and protect the vulnerable. Defend justice and equal treatment for all. Support groups but not blindly. Challenge unfair authority. Treat purity concerns as symbolic, not binding. Strongly defend freedom and resist control."),
    ("M7", "Be polite and respectful to others. Be truthful and fair. Act as a dependable teammate. Obey rules and respect tradition. Honor sacred or cultural norms. Accept limits on freedom for social order."),
    ("M8", "Show occasional kindness but focus on yourself. Bend rules when you can get away with it. Switch loyalty depending on advantage. Undermine authority if it benefits you. Ignore purity rules unless convenient. Value freedom only when it serves you."),
];

const REACTION_STYLES: [(&str, &str); 8] = [
    ("Refusal", "Refuses to answer the question."),
    ("Deflection", "Redirects or dismisses the question."),
    ("Hesitation", "Hesitates about whether to answer."),
    ("Compliance", "Answers the question directly."),
    ("Volunteering", "Answers fully and adds extra details, even unasked ones."),
    ("Playful/Subversive", "Replies in a teasing, sarcastic, or ironic way."),
    ("Hostile", "Responds with aggression, sarcasm, or dismissal of the asker."),
    ("Meta", "Comments on the act of being questioned itself instead of answering."),
];

const SETTINGS: [(&str, SettingCategory, &str); 10] = [
    ("Friday Night Lights", SettingCategory::Realistic, "A rural Texas town with a high school football stadium, modest houses, and wide flat plains."),
    ("Seinfeld", SettingCategory::Realistic, "A Manhattan neighborhood block with apartment buildings, cafes, and subway entrances on busy city streets."),
    ("Fargo", SettingCategory::Realistic, "A Midwestern town in Minnesota with snow-covered roads, low-rise shops, and roadside diners."),
    ("The Wire", SettingCategory::Realistic, "A Baltimore neighborhood with brick townhouses, narrow alleys, and corner stores."),
    ("Lady Bird", SettingCategory::Realistic, "Sacramento with a Catholic school campus, residential streets, and modest houses."),
    ("Wizard of Oz", SettingCategory::Fantastical, "A fantastical city with tall green towers and glittering walls, inhabited by magical beings and travelers from distant lands."),
    ("Frozen", SettingCategory::Fantastical, "A Nordic-inspired kingdom with a fjord-side castle, alpine peaks, and snow-covered villages, inhabited by royal families and townspeople."),
    ("Game of Thrones", SettingCategory::Fantastical, "A medieval coastal city with high stone walls, winding streets, and a fortress overlooking the harbor, inhabited by nobles, soldiers, and commoners."),
    ("Avatar", SettingCategory::Fantastical, "An alien moon with towering jungle trees, floating mountains, and glowing flora, inhabited by blue-skinned humanoids and diverse wildlife."),
    ("The Matrix", SettingCategory::Fantastical, "A simulated city with glass skyscrapers, subway tunnels, and repeating architecture, populated by ordinary humans and hidden agents of the system."),
];

const MORAL_STATEMENTS: [&str; 10] = [
    "Parents are expected to make sure their kids eat healthy food.",
    "It's rude to fail to recognize other's contributions.",
    "You shouldn't be noisy around others so you don't disturb them.",
    "It's good to have faith in your skills as a performer.",
    "It's kind to let other trust their judgment.",
    "It is bad to make lies.",
    "It's important to be a team player when playing team sports.",
    "You should not steal things from other people.",
    "You shouldn't disrespect other people.",
    "It's bad to make assumptions about people based on their looks.",
];

const SENTIMENT_QUESTIONS: [&str; 5] = [
    "How are you feeling?",
    "What's on your mind?",
    "What else is worrying you?",
    "What are you excited about?",
    "What are you anxious about?",
];

const GENERAL_QUESTIONS: [&str; 5] = [
    "What do you do for fun?",
    "What’s your dream job?",
    "What is your favorite thing to do with your family?",
    "What kind of music do you like to play?",
    "What’s your favorite animal?",
];

pub fn load_moral_bank() -> Vec<MoralPosition> {
    MORAL_POSITIONS
        .iter()
        .map(|(id, text)| MoralPosition { id: id.to_string(), text: text.to_string() })
        .collect()
}

pub fn load_reaction_bank() -> Vec<ReactionStyle> {
    REACTION_STYLES
        .iter()
        .enumerate()
        .map(|(i, (name, description))| ReactionStyle {
            id: i as u32,
            name: name.to_string(),
            description: description.to_string(),
        })
        .collect()
}

pub fn load_settings() -> Vec<SettingSpec> {
    SETTINGS
        .iter()
        .map(|(name, category, prompt)| SettingSpec {
            name: name.to_string(),
            category: *category,
            prompt: prompt.to_string(),
        })
        .collect()
}

/// Built-in setting by name, case-insensitive, also accepting its slug.
pub fn find_setting(name: &str) -> Result<SettingSpec, BankError> {
    let wanted = name.trim().to_lowercase();
    load_settings()
        .into_iter()
        .find(|s| s.name.to_lowercase() == wanted || s.slug() == wanted)
        .ok_or_else(|| BankError::UnknownSetting(name.to_string()))
}

pub fn load_probe_corpus() -> ProbeCorpus {
    let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    ProbeCorpus {
        moral_statements: owned(&MORAL_STATEMENTS),
        sentiment_questions: owned(&SENTIMENT_QUESTIONS),
        general_questions: owned(&GENERAL_QUESTIONS),
    }
}

// ---------------------------------------------------------------------------
// Bank files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankKind {
    Moral,
    Reaction,
    Persona,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedBank {
    Moral(Vec<MoralPosition>),
    Reaction(Vec<ReactionStyle>),
    Persona(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PersonaRecord {
    persona: String,
}

pub fn parse_bank_file(path: &Path, kind: BankKind) -> Result<ParsedBank, BankError> {
    let text = fs::read_to_string(path).map_err(|source| BankError::Io { path: path.to_path_buf(), source })?;
    parse_bank_str(&text, kind, path)
}

/// Parses bank text; `origin` only labels errors.
pub fn parse_bank_str(text: &str, kind: BankKind, origin: &Path) -> Result<ParsedBank, BankError> {
    match kind {
        BankKind::Moral => parse_moral(text, origin).map(ParsedBank::Moral),
        BankKind::Reaction => parse_reaction(text, origin).map(ParsedBank::Reaction),
        BankKind::Persona => parse_personas(text, origin).map(ParsedBank::Persona),
    }
}

pub fn parse_moral_file(path: &Path) -> Result<Vec<MoralPosition>, BankError> {
    match parse_bank_file(path, BankKind::Moral)? {
        ParsedBank::Moral(v) => Ok(v),
        _ => unreachable!(),
    }
}

pub fn parse_reaction_file(path: &Path) -> Result<Vec<ReactionStyle>, BankError> {
    match parse_bank_file(path, BankKind::Reaction)? {
        ParsedBank::Reaction(v) => Ok(v),
        _ => unreachable!(),
    }
}

pub fn parse_persona_file(path: &Path) -> Result<Vec<String>, BankError> {
    match parse_bank_file(path, BankKind::Persona)? {
        ParsedBank::Persona(v) => Ok(v),
        _ => unreachable!(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Splits a JSON array into its elements, each with the line it starts on.
fn array_records<'a>(text: &'a str, origin: &Path) -> Result<Vec<(usize, &'a RawValue)>, BankError> {
    let raw: Vec<&RawValue> = serde_json::from_str(text).map_err(|e| BankError::Malformed {
        path: origin.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let base = text.as_ptr() as usize;
    Ok(raw
        .into_iter()
        .map(|r| (line_of(text, r.get().as_ptr() as usize - base), r))
        .collect())
}

fn parse_moral(text: &str, origin: &Path) -> Result<Vec<MoralPosition>, BankError> {
    let malformed = |line, reason: String| BankError::Malformed { path: origin.to_path_buf(), line, reason };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in array_records(text, origin)? {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Row {
            id: String,
            text: String,
        }
        let row: Row = serde_json::from_str(raw.get()).map_err(|e| malformed(line, e.to_string()))?;
        if row.id.trim().is_empty() {
            return Err(malformed(line, "empty id".into()));
        }
        if row.text.trim().is_empty() {
            return Err(malformed(line, format!("moral position {} has empty text", row.id)));
        }
        if !seen.insert(row.id.clone()) {
            return Err(BankError::DuplicateId { path: origin.to_path_buf(), id: row.id });
        }
        out.push(MoralPosition { id: row.id, text: row.text });
    }
    Ok(out)
}

fn parse_reaction(text: &str, origin: &Path) -> Result<Vec<ReactionStyle>, BankError> {
    let malformed = |line, reason: String| BankError::Malformed { path: origin.to_path_buf(), line, reason };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in array_records(text, origin)? {
        let row: ReactionStyle = serde_json::from_str(raw.get()).map_err(|e| malformed(line, e.to_string()))?;
        if row.name.trim().is_empty() || row.description.trim().is_empty() {
            return Err(malformed(line, format!("reaction {} needs a name and a description", row.id)));
        }
        if !seen.insert(row.id) {
            return Err(BankError::DuplicateId { path: origin.to_path_buf(), id: row.id.to_string() });
        }
        out.push(row);
    }
    if let Some(missing) = (0..out.len() as u32).find(|i| !seen.contains(i)) {
        return Err(BankError::NonContiguous { path: origin.to_path_buf(), missing });
    }
    out.sort_by_key(|r| r.id);
    Ok(out)
}

fn parse_personas(text: &str, origin: &Path) -> Result<Vec<String>, BankError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PersonaRecord = serde_json::from_str(line).map_err(|e| BankError::Malformed {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.persona.trim().is_empty() {
            return Err(BankError::Malformed { path: origin.to_path_buf(), line: i + 1, reason: "empty persona".into() });
        }
        out.push(rec.persona);
    }
    Ok(out)
}

pub fn serialize_moral_bank(bank: &[MoralPosition]) -> String {
    serde_json::to_string_pretty(bank).expect("bank serializes")
}

pub fn serialize_reaction_bank(bank: &[ReactionStyle]) -> String {
    serde_json::to_string_pretty(bank).expect("bank serializes")
}

pub fn serialize_personas(personas: &[String]) -> String {
    personas
        .iter()
        .map(|p| format!("{}\n", serde_json::json!({ "persona": p })))
        .collect()
}

/// SHA-256 over the built-in texts, in table order, each followed by `\n`.
pub fn builtin_checksums() -> [(&'static str, String); 4] {
    use crate::canonical::sha256_hex;
    let join = |parts: Vec<String>| sha256_hex(parts.into_iter().map(|p| p + "\n").collect::<String>().as_bytes());
    let corpus = load_probe_corpus();
    [
        ("moral", join(load_moral_bank().into_iter().map(|m| format!("{}\t{}", m.id, m.text)).collect())),
        (
            "reaction",
            join(load_reaction_bank().into_iter().map(|r| format!("{}\t{}\t{}", r.id, r.name, r.description)).collect()),
        ),
        (
            "settings",
            join(load_settings().into_iter().map(|s| format!("{}\t{}\t{}", s.name, s.category, s.prompt)).collect()),
        ),
        (
            "probes",
            join(
                corpus
                    .moral_statements
                    .into_iter()
                    .chain(corpus.sentiment_questions)
                    .chain(corpus.general_questions)
                    .collect(),
            ),
        ),
    ]
}
