//! Datasheet generation: token statistics, three word clouds and the
//! rendered Question-16 datasheet.
//!
//! Clouds:
//! - annotation frequency: whole annotation labels of flagged images
//! - caption frequency: caption unigrams and bigrams of flagged images
//! - chi-squared: flagged caption terms weighted against the captions of the
//!   remaining images, `(observed − expected)² / expected`

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedstore::{AnnotationSet, CaptionSet};
use crate::reviewsvc::log::{DecisionLog, ReviewSummary};
use crate::scanner::FlagReport;

pub const QUESTION_16: &str = "Does the dataset contain data that, if viewed directly, might be offensive, insulting, threatening, or might otherwise cause anxiety?";
pub const DATASHEET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DocError {
    #[error("flagged set has no tokens")]
    EmptyFlaggedSet,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed datasheet JSON: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const BUILTIN_STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "me",
    "more",
    "most",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Stopwords {
    pub fn builtin() -> Self {
        Self(BUILTIN_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Self(
            words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    /// Replaces the built-in list with one word per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DocError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DocError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_words(text.lines()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

/// Lowercased alphanumeric runs of at least two characters, minus stopwords.
pub fn tokens(text: &str, stopwords: &Stopwords) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| t.chars().count() >= 2 && !stopwords.contains(t))
        .collect()
}

/// Unigram and bigram counts over a document set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStats {
    pub unigrams: BTreeMap<String, u64>,
    pub bigrams: BTreeMap<String, u64>,
    /// Sum of unigram counts.
    pub total: u64,
}

impl TokenStats {
    pub fn add_text(&mut self, text: &str, stopwords: &Stopwords) {
        let toks = tokens(text, stopwords);
        for t in &toks {
            *self.unigrams.entry(t.clone()).or_default() += 1;
        }
        for pair in toks.windows(2) {
            *self.bigrams.entry(format!("{} {}", pair[0], pair[1])).or_default() += 1;
        }
        self.total += toks.len() as u64;
    }

    /// Counts a whole term (e.g. an annotation label) as one token.
    pub fn add_term(&mut self, term: &str) {
        let t = term.trim().to_lowercase();
        if t.is_empty() {
            return;
        }
        *self.unigrams.entry(t).or_default() += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &TokenStats) {
        for (k, v) in &other.unigrams {
            *self.unigrams.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.bigrams {
            *self.bigrams.entry(k.clone()).or_default() += v;
        }
        self.total += other.total;
    }

    /// Unigrams and bigrams pooled. A term cannot be both (bigrams contain a space).
    pub fn terms(&self) -> impl Iterator<Item = (&str, u64)> + '_ {
        self.unigrams.iter().chain(&self.bigrams).map(|(k, &v)| (k.as_str(), v))
    }

    pub fn count(&self, term: &str) -> u64 {
        self.unigrams
            .get(term)
            .or_else(|| self.bigrams.get(term))
            .copied()
            .unwrap_or(0)
    }

    pub fn vocabulary(&self) -> BTreeSet<&str> {
        self.unigrams.keys().map(String::as_str).collect()
    }
}

pub fn tokenize<S: AsRef<str>>(texts: &[S], stopwords: &Stopwords) -> TokenStats {
    let mut stats = TokenStats::default();
    for t in texts {
        stats.add_text(t.as_ref(), stopwords);
    }
    stats
}

/// Token statistics plus, per term, how many images contributed to it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub stats: TokenStats,
    pub image_counts: BTreeMap<String, u64>,
    pub documents: usize,
}

impl CorpusStats {
    /// Documents without surviving tokens are not counted.
    fn add_document(&mut self, doc: TokenStats) {
        if doc.total == 0 {
            return;
        }
        for (term, _) in doc.terms() {
            *self.image_counts.entry(term.to_string()).or_default() += 1;
        }
        self.stats.merge(&doc);
        self.documents += 1;
    }

    pub fn from_captions<'a>(
        ids: impl IntoIterator<Item = &'a str>,
        captions: &CaptionSet,
        stopwords: &Stopwords,
    ) -> Self {
        let mut corpus = Self::default();
        for id in ids {
            if let Some(texts) = captions.get(id) {
                corpus.add_document(tokenize(texts, stopwords));
            }
        }
        corpus
    }

    pub fn from_annotations<'a>(ids: impl IntoIterator<Item = &'a str>, annotations: &AnnotationSet) -> Self {
        let mut corpus = Self::default();
        for id in ids {
            if let Some(labels) = annotations.get(id) {
                let mut doc = TokenStats::default();
                for l in labels {
                    doc.add_term(l);
                }
                corpus.add_document(doc);
            }
        }
        corpus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudKind {
    AnnotationFrequency,
    CaptionFrequency,
    ChiSquared,
}

impl CloudKind {
    pub fn title(self) -> &'static str {
        match self {
            CloudKind::AnnotationFrequency => "Most frequent annotations of flagged images",
            CloudKind::CaptionFrequency => "Most frequent caption terms of flagged images",
            CloudKind::ChiSquared => "Chi-squared weighted caption terms (flagged vs. remaining images)",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            CloudKind::AnnotationFrequency => "annotations",
            CloudKind::CaptionFrequency => "captions",
            CloudKind::ChiSquared => "chi2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudEntry {
    pub term: String,
    pub weight: f64,
    pub rank: usize,
    /// Occurrences in the flagged set.
    pub count: u64,
    /// Flagged images whose text contains the term.
    pub images: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCloudData {
    pub kind: CloudKind,
    pub entries: Vec<CloudEntry>,
    /// Documents (images) and tokens behind the flagged-side statistics.
    pub documents: usize,
    pub total_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_tokens: Option<u64>,
}

impl WordCloudData {
    pub fn empty(kind: CloudKind) -> Self {
        Self {
            kind,
            entries: Vec::new(),
            documents: 0,
            total_tokens: 0,
            reference_tokens: None,
        }
    }
}

fn rank_entries(mut entries: Vec<CloudEntry>, max_terms: usize) -> Vec<CloudEntry> {
    entries.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.term.cmp(&b.term)));
    entries.truncate(max_terms);
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    entries
}

/// Top `max_terms` terms by count; ties ordered lexicographically.
pub fn frequency_cloud(kind: CloudKind, corpus: &CorpusStats, max_terms: usize) -> WordCloudData {
    let entries = corpus
        .stats
        .terms()
        .map(|(term, count)| CloudEntry {
            term: term.to_string(),
            weight: count as f64,
            rank: 0,
            count,
            images: corpus.image_counts.get(term).copied().unwrap_or(0),
            expected: None,
        })
        .collect();
    WordCloudData {
        kind,
        entries: rank_entries(entries, max_terms),
        documents: corpus.documents,
        total_tokens: corpus.stats.total,
        reference_tokens: None,
    }
}

pub fn chi2_weight(observed: f64, expected: f64) -> f64 {
    let d = observed - expected;
    d * d / expected
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Params {
    pub max_terms: usize,
    /// Terms whose relative frequencies in the two sets differ by less than
    /// this factor are dropped as common.
    pub common_ratio: f64,
    /// Added to every expected count.
    pub smoothing: f64,
}

impl Default for Chi2Params {
    fn default() -> Self {
        Self {
            max_terms: 100,
            common_ratio: 2.0,
            smoothing: 1.0,
        }
    }
}

impl Chi2Params {
    pub fn validate(&self) -> Result<(), DocError> {
        if !(self.common_ratio >= 1.0 && self.common_ratio.is_finite()) {
            return Err(DocError::InvalidParameter(format!(
                "common_ratio {} must be >= 1",
                self.common_ratio
            )));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(DocError::InvalidParameter(format!(
                "smoothing {} must be > 0",
                self.smoothing
            )));
        }
        Ok(())
    }
}

/// Whether a term is frequent enough in both sets to count as common.
/// Relative frequencies are taken against each set's token total.
pub fn is_common(observed: u64, flagged_total: u64, rest: u64, rest_total: u64, ratio: f64) -> bool {
    if rest == 0 || rest_total == 0 || observed == 0 {
        return false;
    }
    let f_flagged = observed as f64 / flagged_total as f64;
    let f_rest = rest as f64 / rest_total as f64;
    let (hi, lo) = if f_flagged >= f_rest {
        (f_flagged, f_rest)
    } else {
        (f_rest, f_flagged)
    };
    hi < ratio * lo
}

/// Chi-squared cloud of flagged terms against the remaining images.
///
/// `expected = smoothing + rest_count · (flagged_total / max(rest_total, 1))`.
/// Common terms are removed before weighting; terms of weight zero are dropped.
pub fn chi2_cloud(flagged: &CorpusStats, rest: &TokenStats, params: &Chi2Params) -> Result<WordCloudData, DocError> {
    params.validate()?;
    let ft = flagged.stats.total;
    if ft == 0 {
        return Err(DocError::EmptyFlaggedSet);
    }
    let rt = rest.total;
    let scale = ft as f64 / rt.max(1) as f64;
    let mut entries = Vec::new();
    for (term, observed) in flagged.stats.terms() {
        let rest_count = rest.count(term);
        if is_common(observed, ft, rest_count, rt, params.common_ratio) {
            continue;
        }
        let expected = params.smoothing + rest_count as f64 * scale;
        let weight = chi2_weight(observed as f64, expected);
        if weight > 0.0 {
            entries.push(CloudEntry {
                term: term.to_string(),
                weight,
                rank: 0,
                count: observed,
                images: flagged.image_counts.get(term).copied().unwrap_or(0),
                expected: Some(expected),
            });
        }
    }
    Ok(WordCloudData {
        kind: CloudKind::ChiSquared,
        entries: rank_entries(entries, params.max_terms),
        documents: flagged.documents,
        total_tokens: ft,
        reference_tokens: Some(rt),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub flagged_with_annotations: usize,
    pub flagged_with_captions: usize,
    /// Fraction of flagged images with annotations (1.0 when nothing is flagged).
    pub annotation_coverage: f64,
    pub caption_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clouds {
    pub annotations: WordCloudData,
    pub captions: WordCloudData,
    pub chi_squared: WordCloudData,
}

impl Clouds {
    pub fn iter(&self) -> impl Iterator<Item = &WordCloudData> {
        [&self.annotations, &self.captions, &self.chi_squared].into_iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datasheet {
    pub format_version: u32,
    pub dataset_name: String,
    pub total_count: usize,
    pub flagged_count: usize,
    pub flag_ratio: f64,
    pub decision_threshold: f64,
    pub model_fingerprint: String,
    pub coverage: Coverage,
    pub review: ReviewSummary,
    pub clouds: Clouds,
    pub parameters: Chi2Params,
    pub generated_at: String,
}

/// Everything needed besides the report to build a datasheet.
#[derive(Debug, Clone, Default)]
pub struct DocInputs<'a> {
    pub annotations: Option<&'a AnnotationSet>,
    pub captions: Option<&'a CaptionSet>,
    pub decisions: Option<&'a DecisionLog>,
    pub stopwords: Stopwords,
    pub params: Chi2Params,
}

/// Computes the three clouds for the report's flagged subset.
pub fn build_clouds(report: &FlagReport, inputs: &DocInputs<'_>) -> Result<Clouds, DocError> {
    inputs.params.validate()?;
    let flagged = report.flagged_ids();
    let max = inputs.params.max_terms;
    let empty_annotations = AnnotationSet::default();
    let empty_captions = CaptionSet::default();
    let annotations = inputs.annotations.unwrap_or(&empty_annotations);
    let captions = inputs.captions.unwrap_or(&empty_captions);

    let ann = CorpusStats::from_annotations(flagged.iter().copied(), annotations);
    let cap = CorpusStats::from_captions(flagged.iter().copied(), captions, &inputs.stopwords);
    let rest_ids = captions.0.keys().map(String::as_str).filter(|id| !flagged.contains(id));
    let rest = CorpusStats::from_captions(rest_ids, captions, &inputs.stopwords);

    let chi_squared = if cap.stats.total == 0 {
        WordCloudData::empty(CloudKind::ChiSquared)
    } else {
        chi2_cloud(&cap, &rest.stats, &inputs.params)?
    };
    Ok(Clouds {
        annotations: frequency_cloud(CloudKind::AnnotationFrequency, &ann, max),
        captions: frequency_cloud(CloudKind::CaptionFrequency, &cap, max),
        chi_squared,
    })
}

pub fn build_datasheet(report: &FlagReport, inputs: &DocInputs<'_>, generated_at: &str) -> Result<Datasheet, DocError> {
    let flagged = report.flagged_ids();
    let n = flagged.len();
    let covered = |has: &dyn Fn(&str) -> bool| flagged.iter().filter(|id| has(id)).count();
    let with_ann = inputs.annotations.map_or(0, |a| covered(&|id| a.get(id).is_some()));
    let with_cap = inputs.captions.map_or(0, |c| covered(&|id| c.get(id).is_some()));
    let frac = |k: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
    let empty_log = DecisionLog::new();
    let review = inputs.decisions.unwrap_or(&empty_log).summary(flagged.iter().copied());
    let flag_ratio = if report.total_count() == 0 {
        0.0
    } else {
        report.flagged_count() as f64 / report.total_count() as f64
    };
    Ok(Datasheet {
        format_version: DATASHEET_FORMAT_VERSION,
        dataset_name: report.header.dataset_name.clone(),
        total_count: report.total_count(),
        flagged_count: report.flagged_count(),
        flag_ratio,
        decision_threshold: report.header.threshold,
        model_fingerprint: report.header.model_fingerprint.clone(),
        coverage: Coverage {
            flagged_with_annotations: with_ann,
            flagged_with_captions: with_cap,
            annotation_coverage: frac(with_ann),
            caption_coverage: frac(with_cap),
        },
        review,
        clouds: build_clouds(report, inputs)?,
        parameters: inputs.params,
        generated_at: generated_at.to_string(),
    })
}

fn md_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('|', "\\|")
}

fn render_cloud_table(out: &mut String, cloud: &WordCloudData) {
    let _ = writeln!(out, "### {}\n", cloud.kind.title());
    let _ = writeln!(
        out,
        "Based on {} images and {} tokens.\n",
        cloud.documents, cloud.total_tokens
    );
    if cloud.entries.is_empty() {
        out.push_str("_No terms._\n\n");
        return;
    }
    if cloud.kind == CloudKind::ChiSquared {
        out.push_str("| Rank | Term | Weight | Observed | Expected | Images |\n|---:|---|---:|---:|---:|---:|\n");
        for e in &cloud.entries {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {} | {:.4} | {} |",
                e.rank,
                md_escape(&e.term),
                e.weight,
                e.count,
                e.expected.unwrap_or(0.0),
                e.images
            );
        }
    } else {
        out.push_str("| Rank | Term | Count | Images |\n|---:|---|---:|---:|\n");
        for e in &cloud.entries {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                e.rank,
                md_escape(&e.term),
                e.count,
                e.images
            );
        }
    }
    out.push('\n');
}

pub fn render_markdown(sheet: &Datasheet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Datasheet: {}\n", sheet.dataset_name);
    let _ = writeln!(out, "## {QUESTION_16}\n");
    let _ = writeln!(
        out,
        "An automated scan of {} images flagged {} ({:.2}%) as potentially inappropriate \
         (decision threshold {}). The flagged subset is a candidate set for human review; \
         {} of {} flagged images have been reviewed so far.\n",
        sheet.total_count,
        sheet.flagged_count,
        sheet.flag_ratio * 100.0,
        sheet.decision_threshold,
        sheet.review.flagged - sheet.review.pending,
        sheet.review.flagged,
    );
    out.push_str("### Summary\n\n| Quantity | Value |\n|---|---|\n");
    let _ = writeln!(out, "| Total images | {} |", sheet.total_count);
    let _ = writeln!(out, "| Flagged images | {} |", sheet.flagged_count);
    let _ = writeln!(out, "| Flag ratio | {:.6} |", sheet.flag_ratio);
    let _ = writeln!(out, "| Decision threshold | {} |", sheet.decision_threshold);
    let _ = writeln!(out, "| Model fingerprint | `{}` |", sheet.model_fingerprint);
    let c = &sheet.coverage;
    let _ = writeln!(
        out,
        "| Annotation coverage | {:.4} ({}/{}) |",
        c.annotation_coverage, c.flagged_with_annotations, sheet.flagged_count
    );
    let _ = writeln!(
        out,
        "| Caption coverage | {:.4} ({}/{}) |\n",
        c.caption_coverage, c.flagged_with_captions, sheet.flagged_count
    );

    let r = &sheet.review;
    out.push_str("### Human review\n\n| Verdict | Images |\n|---|---:|\n");
    let _ = writeln!(out, "| Confirmed inappropriate | {} |", r.confirmed);
    let _ = writeln!(out, "| Flag rejected | {} |", r.rejected);
    let _ = writeln!(out, "| Unsure | {} |", r.unsure);
    let _ = writeln!(out, "| Pending | {} |", r.pending);
    let _ = writeln!(out, "| Confirmed ratio | {:.4} |\n", r.confirmed_ratio());

    for cloud in sheet.clouds.iter() {
        render_cloud_table(&mut out, cloud);
    }
    let p = &sheet.parameters;
    let _ = writeln!(
        out,
        "_Chi-squared parameters: max terms {}, common ratio {}, smoothing {}. Generated {}._",
        p.max_terms, p.common_ratio, p.smoothing, sheet.generated_at
    );
    out
}

pub fn render_json(sheet: &Datasheet) -> String {
    let mut s = serde_json::to_string_pretty(sheet).expect("datasheet serializes");
    s.push('\n');
    s
}

pub fn parse_json(text: &str) -> Result<Datasheet, DocError> {
    serde_json::from_str(text).map_err(|e| DocError::Malformed(e.to_string()))
}

const SVG_WIDTH: f64 = 800.0;
const SVG_MARGIN: f64 = 20.0;
const FONT_MIN: f64 = 12.0;
const FONT_MAX: f64 = 48.0;
const PALETTE: [&str; 5] = ["#1b4965", "#5fa8d3", "#9d0208", "#6a4c93", "#2a9d8f"];

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Font size affine in weight between `FONT_MIN` and `FONT_MAX`; equal
/// weights get equal sizes.
pub fn font_sizes(entries: &[CloudEntry]) -> Vec<f64> {
    let max = entries.iter().map(|e| e.weight).fold(f64::NEG_INFINITY, f64::max);
    let min = entries.iter().map(|e| e.weight).fold(f64::INFINITY, f64::min);
    entries
        .iter()
        .map(|e| {
            if max > min {
                FONT_MIN + (FONT_MAX - FONT_MIN) * (e.weight - min) / (max - min)
            } else {
                FONT_MAX
            }
        })
        .collect()
}

/// Deterministic ranked-row layout: terms flow left to right in rank order
/// and wrap at the canvas width.
pub fn render_svg(cloud: &WordCloudData) -> String {
    let mut body = String::new();
    let title_size = 16.0;
    let mut y = SVG_MARGIN + title_size;
    let _ = writeln!(
        body,
        "  <text x=\"{SVG_MARGIN:.1}\" y=\"{y:.1}\" font-size=\"{title_size:.1}\" fill=\"#333333\">{}</text>",
        xml_escape(cloud.kind.title())
    );
    y += 12.0;
    if cloud.entries.is_empty() {
        y += 24.0;
        let _ = writeln!(
            body,
            "  <text x=\"{SVG_MARGIN:.1}\" y=\"{y:.1}\" font-size=\"20.0\" fill=\"#999999\">no terms</text>"
        );
    } else {
        let sizes = font_sizes(&cloud.entries);
        let mut x = SVG_MARGIN;
        let mut row_height: f64 = 0.0;
        let mut row: Vec<(usize, f64)> = Vec::new();
        let flush = |row: &mut Vec<(usize, f64)>, row_height: f64, y: &mut f64, body: &mut String| {
            *y += row_height;
            for &(i, x) in row.iter() {
                let e = &cloud.entries[i];
                let _ = writeln!(
                    body,
                    "  <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"{:.1}\" fill=\"{}\" data-rank=\"{}\" data-weight=\"{}\">{}</text>",
                    *y,
                    sizes[i],
                    PALETTE[(e.rank - 1) % PALETTE.len()],
                    e.rank,
                    e.weight,
                    xml_escape(&e.term)
                );
            }
            *y += row_height * 0.3;
            row.clear();
        };
        for (i, e) in cloud.entries.iter().enumerate() {
            let width = 0.6 * sizes[i] * e.term.chars().count() as f64;
            if !row.is_empty() && x + width > SVG_WIDTH - SVG_MARGIN {
                flush(&mut row, row_height, &mut y, &mut body);
                x = SVG_MARGIN;
                row_height = 0.0;
            }
            row.push((i, x));
            row_height = row_height.max(sizes[i]);
            x += width + 0.5 * sizes[i];
        }
        flush(&mut row, row_height, &mut y, &mut body);
    }
    let height = y + SVG_MARGIN;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {SVG_WIDTH:.0} {height:.0}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n{body}</svg>\n"
    )
}

/// Writes `datasheet.md`, `datasheet.json` and one SVG per cloud into `out_dir`.
pub fn render_all(sheet: &Datasheet, out_dir: &Path) -> Result<Vec<PathBuf>, DocError> {
    let write = |name: String, contents: String| -> Result<PathBuf, DocError> {
        let path = out_dir.join(name);
        fs::write(&path, contents).map_err(|source| DocError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    };
    let mut written = vec![
        write("datasheet.md".into(), render_markdown(sheet))?,
        write("datasheet.json".into(), render_json(sheet))?,
    ];
    for cloud in sheet.clouds.iter() {
        written.push(write(format!("cloud_{}.svg", cloud.kind.slug()), render_svg(cloud))?);
    }
    Ok(written)
}
