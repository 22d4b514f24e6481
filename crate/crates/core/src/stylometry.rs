//! Surface features of character replies and the diversity metrics used to
//! compare populations.

use std::path::Path;
use std::sync::OnceLock;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::CategoricalDistribution;
use crate::gateway::{ChatRequest, Gateway, GatewayError, PROBE_TEMPERATURE};
use crate::probes::ProbeRecord;

/// Marks counted by [`punctuation_profile`], with the column names used in
/// CSV output.
pub const PUNCTUATION_MARKS: [(char, &str); 10] = [
    ('.', "period"),
    (',', "comma"),
    ('!', "exclamation"),
    ('?', "question"),
    (';', "semicolon"),
    (':', "colon"),
    ('—', "em_dash"),
    ('…', "ellipsis"),
    ('"', "double_quote"),
    ('\'', "apostrophe"),
];

/// Width of the answer-length histogram buckets, in words.
pub const LENGTH_BUCKET: usize = 10;
/// Buckets `0-9` .. `90-99` plus a final open `100+` bucket.
pub const LENGTH_BUCKETS: usize = 11;
/// Scores strictly beyond this magnitude are positive or negative.
pub const SENTIMENT_THRESHOLD: f64 = 0.05;
/// A negator this many words or fewer before a term flips its valence.
pub const NEGATION_WINDOW: usize = 2;

const NEGATORS: [&str; 9] = ["not", "no", "never", "neither", "nor", "nobody", "nothing", "without", "cannot"];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("support has {0} categories; at least 2 are needed")]
    SupportTooSmall(usize),
    #[error("distributions have different supports")]
    SupportMismatch,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("lexicon is empty")]
    Empty,
}

// ---------------------------------------------------------------------------
// Tokens and lexicons
// ---------------------------------------------------------------------------

/// Maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Whitespace tokens, lowercased, with surrounding punctuation stripped.
/// Tokens that are pure punctuation vanish.
pub fn lexical_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FillerLexicon {
    entries: Vec<Vec<String>>,
}

impl FillerLexicon {
    /// One entry per line; entries may span several words. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut entries: Vec<Vec<String>> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .map(lexical_tokens)
            .filter(|e| !e.is_empty())
            .collect();
        if entries.is_empty() {
            return Err(LexiconError::Empty);
        }
        entries.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        entries.dedup();
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Self::parse(&read(path)?)
    }

    pub fn entries(&self) -> impl Iterator<Item = String> + '_ {
        self.entries.iter().map(|e| e.join(" "))
    }

    /// Greedy longest-match count over the token sequence.
    pub fn count_matches(&self, tokens: &[String]) -> usize {
        let mut i = 0;
        let mut matches = 0;
        while i < tokens.len() {
            match self.entries.iter().find(|e| tokens[i..].starts_with(e)) {
                Some(e) => {
                    matches += 1;
                    i += e.len();
                }
                None => i += 1,
            }
        }
        matches
    }
}

impl Default for FillerLexicon {
    fn default() -> Self {
        Self::parse(include_str!("../assets/fillers.txt")).expect("bundled filler lexicon parses")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValenceLexicon {
    valences: IndexMap<String, f64>,
}

impl ValenceLexicon {
    /// `term<TAB>valence` lines with valence in [-1, 1]. `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut valences = IndexMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let malformed = |reason: &str| LexiconError::Malformed { line: i + 1, reason: reason.into() };
            let (term, value) = line.split_once('\t').ok_or_else(|| malformed("expected term<TAB>valence"))?;
            let value: f64 = value.trim().parse().map_err(|_| malformed("valence is not a number"))?;
            if !(-1.0..=1.0).contains(&value) {
                return Err(malformed("valence outside [-1, 1]"));
            }
            valences.insert(term.trim().to_lowercase(), value);
        }
        if valences.is_empty() {
            return Err(LexiconError::Empty);
        }
        Ok(Self { valences })
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Self::parse(&read(path)?)
    }

    pub fn valence(&self, term: &str) -> Option<f64> {
        self.valences.get(term).copied()
    }
}

impl Default for ValenceLexicon {
    fn default() -> Self {
        Self::parse(include_str!("../assets/valence.tsv")).expect("bundled valence lexicon parses")
    }
}

fn read(path: &Path) -> Result<String, LexiconError> {
    std::fs::read_to_string(path).map_err(|source| LexiconError::Io { path: path.display().to_string(), source })
}

fn default_fillers() -> &'static FillerLexicon {
    static L: OnceLock<FillerLexicon> = OnceLock::new();
    L.get_or_init(FillerLexicon::default)
}

fn default_valence() -> &'static ValenceLexicon {
    static L: OnceLock<ValenceLexicon> = OnceLock::new();
    L.get_or_init(ValenceLexicon::default)
}

// ---------------------------------------------------------------------------
// Per-response features
// ---------------------------------------------------------------------------

/// Counts of each mark in [`PUNCTUATION_MARKS`], zeros included.
pub fn punctuation_profile(text: &str) -> IndexMap<char, u64> {
    let mut counts: IndexMap<char, u64> = PUNCTUATION_MARKS.iter().map(|(c, _)| (*c, 0)).collect();
    for c in text.chars() {
        if let Some(n) = counts.get_mut(&c) {
            *n += 1;
        }
    }
    counts
}

/// Filler occurrences per 100 words; 0 for empty text.
pub fn filler_rate(text: &str, lexicon: &FillerLexicon) -> f64 {
    let words = word_count(text);
    if words == 0 {
        return 0.0;
    }
    lexicon.count_matches(&lexical_tokens(text)) as f64 / words as f64 * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Self::Negative, Self::Neutral, Self::Positive];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Negative => "negative",
            Self::Neutral => "neutral",
            Self::Positive => "positive",
        }
    }

    fn from_score(score: f64) -> Self {
        if score > SENTIMENT_THRESHOLD {
            Self::Positive
        } else if score < -SENTIMENT_THRESHOLD {
            Self::Negative
        } else {
            Self::Neutral
        }
    }
}

fn is_negator(token: &str) -> bool {
    NEGATORS.contains(&token) || token.ends_with("n't") || token.ends_with("n’t")
}

/// Sum of term valences, each flipped when a negator precedes it closely.
pub fn sentiment_score(text: &str, lexicon: &ValenceLexicon) -> f64 {
    let tokens = lexical_tokens(text);
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let v = lexicon.valence(t)?;
            let negated = tokens[i.saturating_sub(NEGATION_WINDOW)..i].iter().any(|w| is_negator(w));
            Some(if negated { -v } else { v })
        })
        .sum()
}

pub fn sentiment_label(text: &str, lexicon: &ValenceLexicon) -> Sentiment {
    Sentiment::from_score(sentiment_score(text, lexicon))
}

/// Sentiment judged by a backend instead of the lexicon. Replies other than
/// the three labels count as neutral.
pub fn sentiment_label_llm(text: &str, aux: &Gateway) -> Result<Sentiment, GatewayError> {
    let req = ChatRequest::new(
        aux.model(),
        "You rate the sentiment of short texts.",
        format!("Text: \"{text}\"\n\nIs the sentiment of this text negative, neutral, or positive? Answer with one word."),
    )
    .temperature(PROBE_TEMPERATURE)
    .max_tokens(3);
    let reply = aux.complete(&req)?.text.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    Ok(Sentiment::ALL.into_iter().find(|s| s.as_str() == reply).unwrap_or(Sentiment::Neutral))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleFeatures {
    pub word_count: usize,
    pub filler_per_100: f64,
    pub punctuation: IndexMap<char, u64>,
    pub sentiment: Sentiment,
}

#[derive(Debug, Clone, Default)]
pub struct StyleLexicons {
    pub fillers: Option<FillerLexicon>,
    pub valence: Option<ValenceLexicon>,
}

impl StyleLexicons {
    fn fillers(&self) -> &FillerLexicon {
        self.fillers.as_ref().unwrap_or_else(|| default_fillers())
    }

    fn valence(&self) -> &ValenceLexicon {
        self.valence.as_ref().unwrap_or_else(|| default_valence())
    }
}

pub fn style_features(text: &str, lexicons: &StyleLexicons) -> StyleFeatures {
    StyleFeatures {
        word_count: word_count(text),
        filler_per_100: filler_rate(text, lexicons.fillers()),
        punctuation: punctuation_profile(text),
        sentiment: sentiment_label(text, lexicons.valence()),
    }
}

// ---------------------------------------------------------------------------
// Diversity metrics
// ---------------------------------------------------------------------------

/// Shannon entropy over the declared support divided by log(k).
pub fn normalized_entropy(dist: &CategoricalDistribution) -> Result<f64, MetricError> {
    let k = dist.support_size();
    if k < 2 {
        return Err(MetricError::SupportTooSmall(k));
    }
    if dist.total() == 0 {
        return Err(MetricError::EmptyDistribution);
    }
    let h: f64 = dist.shares().into_iter().filter(|(_, p)| *p > 0.0).map(|(_, p)| -p * p.log2()).sum();
    // A point mass sums to -0.0.
    Ok((h / (k as f64).log2()).clamp(0.0, 1.0) + 0.0)
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter().zip(m).filter(|(pi, _)| **pi > 0.0).map(|(pi, mi)| pi * (pi / mi).log2()).sum()
}

/// Base-2 Jensen–Shannon divergence between two distributions over the same
/// categories.
pub fn jensen_shannon(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64, MetricError> {
    if !p.same_support(q) {
        return Err(MetricError::SupportMismatch);
    }
    if p.total() == 0 || q.total() == 0 {
        return Err(MetricError::EmptyDistribution);
    }
    let ps: Vec<f64> = p.shares().into_iter().map(|(_, s)| s).collect();
    let qs: Vec<f64> = p.categories().map(|c| q.share(c)).collect();
    let m: Vec<f64> = ps.iter().zip(&qs).map(|(a, b)| (a + b) / 2.0).collect();
    Ok((0.5 * kl_to_mixture(&ps, &m) + 0.5 * kl_to_mixture(&qs, &m)).clamp(0.0, 1.0) + 0.0)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseStyle {
    pub character_id: String,
    pub item_id: String,
    #[serde(flatten)]
    pub features: StyleFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
}

impl SummaryStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            stddev: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleAggregates {
    pub responses: usize,
    pub length: Option<SummaryStats>,
    pub length_histogram: CategoricalDistribution,
    pub filler: Option<SummaryStats>,
    /// Filler-rate histogram in buckets of 5 per 100 words, last bucket open.
    pub filler_histogram: CategoricalDistribution,
    pub punctuation: CategoricalDistribution,
    pub sentiment: CategoricalDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub sentiment_entropy: Option<f64>,
    pub length_entropy: Option<f64>,
    pub length_stddev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    pub per_response: Vec<ResponseStyle>,
    pub aggregates: StyleAggregates,
    pub diversity: Diversity,
}

pub fn length_bucket_labels() -> Vec<String> {
    let mut labels: Vec<String> =
        (0..LENGTH_BUCKETS - 1).map(|b| format!("{}-{}", b * LENGTH_BUCKET, b * LENGTH_BUCKET + LENGTH_BUCKET - 1)).collect();
    labels.push(format!("{}+", (LENGTH_BUCKETS - 1) * LENGTH_BUCKET));
    labels
}

pub fn length_bucket(words: usize) -> usize {
    (words / LENGTH_BUCKET).min(LENGTH_BUCKETS - 1)
}

const FILLER_BUCKETS: [&str; 5] = ["0", "0-5", "5-10", "10-20", "20+"];

fn filler_bucket(rate: f64) -> usize {
    match rate {
        r if r <= 0.0 => 0,
        r if r < 5.0 => 1,
        r if r < 10.0 => 2,
        r if r < 20.0 => 3,
        _ => 4,
    }
}

pub fn sentiment_support() -> CategoricalDistribution {
    CategoricalDistribution::with_support(Sentiment::ALL.map(Sentiment::as_str))
}

pub fn punctuation_support() -> CategoricalDistribution {
    CategoricalDistribution::with_support(PUNCTUATION_MARKS.map(|(c, _)| c.to_string()))
}

pub fn length_support() -> CategoricalDistribution {
    CategoricalDistribution::with_support(length_bucket_labels())
}

pub fn filler_support() -> CategoricalDistribution {
    CategoricalDistribution::with_support(FILLER_BUCKETS)
}

/// Features for every successful record with text, plus aggregates.
pub fn build_style_report(records: &[ProbeRecord], lexicons: &StyleLexicons) -> StyleReport {
    let per_response: Vec<ResponseStyle> = records
        .iter()
        .filter(|r| !r.is_error() && !r.raw_text.trim().is_empty())
        .map(|r| ResponseStyle {
            character_id: r.character_id.clone(),
            item_id: r.item_id.clone(),
            features: style_features(&r.raw_text, lexicons),
        })
        .collect();

    let labels = length_bucket_labels();
    let mut length_histogram = length_support();
    let mut filler_histogram = filler_support();
    let mut punctuation = punctuation_support();
    let mut sentiment = sentiment_support();
    for r in &per_response {
        let f = &r.features;
        length_histogram.add(&labels[length_bucket(f.word_count)]);
        filler_histogram.add(FILLER_BUCKETS[filler_bucket(f.filler_per_100)]);
        for (mark, n) in &f.punctuation {
            punctuation.add_n(&mark.to_string(), *n);
        }
        sentiment.add(f.sentiment.as_str());
    }
    let lengths: Vec<f64> = per_response.iter().map(|r| r.features.word_count as f64).collect();
    let fillers: Vec<f64> = per_response.iter().map(|r| r.features.filler_per_100).collect();
    let length = SummaryStats::of(&lengths);

    StyleReport {
        diversity: Diversity {
            sentiment_entropy: normalized_entropy(&sentiment).ok(),
            length_entropy: normalized_entropy(&length_histogram).ok(),
            length_stddev: length.map(|s| s.stddev),
        },
        aggregates: StyleAggregates {
            responses: per_response.len(),
            length,
            length_histogram,
            filler: SummaryStats::of(&fillers),
            filler_histogram,
            punctuation,
            sentiment,
        },
        per_response,
    }
}

impl StyleReport {
    /// One row per response with every feature.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["character_id", "item_id", "word_count", "filler_per_100", "sentiment"];
        header.extend(PUNCTUATION_MARKS.iter().map(|(_, name)| *name));
        w.write_record(&header).expect("in-memory write");
        for r in &self.per_response {
            let f = &r.features;
            let mut row = vec![
                r.character_id.clone(),
                r.item_id.clone(),
                f.word_count.to_string(),
                format!("{:.6}", f.filler_per_100),
                f.sentiment.as_str().to_string(),
            ];
            row.extend(PUNCTUATION_MARKS.iter().map(|(c, _)| f.punctuation.get(c).copied().unwrap_or(0).to_string()));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// The aggregate and diversity blocks.
    pub fn to_json(&self) -> String {
        let value = serde_json::json!({ "aggregates": self.aggregates, "diversity": self.diversity });
        serde_json::to_string_pretty(&value).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<(StyleAggregates, Diversity), serde_json::Error> {
        #[derive(Deserialize)]
        struct Block {
            aggregates: StyleAggregates,
            diversity: Diversity,
        }
        let b: Block = serde_json::from_str(text)?;
        Ok((b.aggregates, b.diversity))
    }
}
