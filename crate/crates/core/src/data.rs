//! Corpus assembly and quality control: manifest ingestion, image fetching
//! with failure accounting, proper-noun and language filters, heuristic POS
//! tagging, trigram language identification, rating statistics, and the
//! chance-corrected inter-rater agreement coefficient with ordinal weights.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoders::word_tokens;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("ratings file: {0}")]
    Ratings(String),
    #[error("agreement coefficient undefined: chance agreement reaches 1")]
    UndefinedCoefficient,
    #[error("record {0} has no POS tags and the fallback tagger is disabled")]
    UntaggedRecord(String),
}

// ── Caption records and manifests ───────────────────────────────────────

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    Wit,
    MscocoIt,
    Cc,
    Ilpost,
    Custom,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    pub image_ref: String,
    pub caption: String,
    pub source: SourceTag,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lang: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pos_tags: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    manifest_version: u32,
}

/// Read a line-delimited manifest. An optional leading header line carrying
/// `manifest_version` is accepted; records are validated (non-empty caption,
/// unique ids).
pub fn load_manifest(path: &Path) -> Result<Vec<CaptionRecord>, DataError> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<CaptionRecord>, DataError> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Ok(header) = serde_json::from_str::<ManifestHeader>(line) {
                if header.manifest_version != MANIFEST_VERSION {
                    return Err(DataError::Parse {
                        line: line_no,
                        message: format!(
                            "manifest_version {} (this build reads {MANIFEST_VERSION})",
                            header.manifest_version
                        ),
                    });
                }
                continue;
            }
        }
        let record: CaptionRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.caption.trim().is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("record {} has an empty caption", record.id),
            });
        }
        if let Some(&first) = seen.get(&record.id) {
            return Err(DataError::DuplicateId {
                id: record.id,
                first_line: first,
                second_line: line_no,
            });
        }
        seen.insert(record.id.clone(), line_no);
        records.push(record);
    }
    Ok(records)
}

/// Write a manifest with a version header line.
pub fn write_manifest(path: &Path, records: &[CaptionRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    serde_json::to_writer(
        &mut out,
        &ManifestHeader {
            manifest_version: MANIFEST_VERSION,
        },
    )
    .expect("header serializes");
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| DataError::Contract(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-source adapters: normalize the raw column conventions of the four
/// corpus styles into [`CaptionRecord`]s. Input is one JSON object per line
/// in the source's own field names.
pub mod adapters {
    use super::*;

    #[derive(Deserialize)]
    struct WitRow {
        image_url: String,
        caption_reference_description: String,
        #[serde(default)]
        language: Option<String>,
    }

    #[derive(Deserialize)]
    struct MscocoRow {
        image_id: u64,
        file_name: String,
        caption_it: String,
    }

    #[derive(Deserialize)]
    struct CcRow {
        url: String,
        caption: String,
    }

    #[derive(Deserialize)]
    struct IlpostRow {
        photo_url: String,
        description: String,
    }

    pub fn wit(line: &str, index: usize) -> Result<CaptionRecord, DataError> {
        let row: WitRow = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: index + 1,
            message: e.to_string(),
        })?;
        Ok(CaptionRecord {
            id: format!("wit-{index:06}"),
            image_ref: row.image_url,
            caption: row.caption_reference_description,
            source: SourceTag::Wit,
            lang: row.language,
            pos_tags: None,
        })
    }

    pub fn mscoco_it(line: &str, index: usize) -> Result<CaptionRecord, DataError> {
        let row: MscocoRow = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: index + 1,
            message: e.to_string(),
        })?;
        Ok(CaptionRecord {
            id: format!("mscoco-{}", row.image_id),
            image_ref: row.file_name,
            caption: row.caption_it,
            source: SourceTag::MscocoIt,
            lang: Some("it".into()),
            pos_tags: None,
        })
    }

    pub fn cc(line: &str, index: usize) -> Result<CaptionRecord, DataError> {
        let row: CcRow = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: index + 1,
            message: e.to_string(),
        })?;
        Ok(CaptionRecord {
            id: format!("cc-{index:06}"),
            image_ref: row.url,
            caption: row.caption,
            source: SourceTag::Cc,
            lang: None,
            pos_tags: None,
        })
    }

    pub fn ilpost(line: &str, index: usize) -> Result<CaptionRecord, DataError> {
        let row: IlpostRow = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: index + 1,
            message: e.to_string(),
        })?;
        Ok(CaptionRecord {
            id: format!("ilpost-{index:06}"),
            image_ref: row.photo_url,
            caption: row.description,
            source: SourceTag::Ilpost,
            lang: None,
            pos_tags: None,
        })
    }
}

// ── Image fetching ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FetchStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FetchEntry {
    pub id: String,
    pub status: FetchStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub local_path: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FetchReport {
    pub entries: Vec<FetchEntry>,
}

impl FetchReport {
    pub fn ok_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status == FetchStatus::Ok)
            .count()
    }

    pub fn failed_count(&self) -> usize {
        self.entries.len() - self.ok_count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|e| DataError::Contract(e.to_string()))?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

/// Destination file name for a URL: its SHA-256 digest plus the original
/// extension, so reruns can recognize already-fetched items without
/// re-downloading. Network failures are data (reported), not process errors.
pub fn url_dest_name(url: &str) -> String {
    let digest = Sha256::digest(url.as_bytes());
    let ext = url
        .rsplit('/')
        .next()
        .and_then(|name| name.rsplit_once('.'))
        .map(|(_, e)| e)
        .filter(|e| e.len() <= 4 && e.chars().all(|c| c.is_ascii_alphanumeric()))
        .unwrap_or("img");
    format!("{:x}.{ext}", digest)
}

/// Fetch every URL-referenced image once, storing successes under `dest` by
/// URL digest; local references pass through untouched. Returns the records
/// rewritten to local paths where fetching succeeded, plus a per-id report
/// sorted by record id.
pub fn fetch_images(
    records: &[CaptionRecord],
    dest: &Path,
    concurrency: usize,
    timeout: Duration,
) -> Result<(Vec<CaptionRecord>, FetchReport), DataError> {
    fs::create_dir_all(dest)?;
    let concurrency = concurrency.max(1);

    // split work: URLs needing network vs everything else
    let mut jobs: Vec<(usize, String, PathBuf)> = Vec::new();
    let mut results: Vec<Option<FetchEntry>> = vec![None; records.len()];
    for (i, r) in records.iter().enumerate() {
        if is_url(&r.image_ref) {
            let target = dest.join(url_dest_name(&r.image_ref));
            if target.exists() {
                results[i] = Some(FetchEntry {
                    id: r.id.clone(),
                    status: FetchStatus::Ok,
                    reason: Some("cached".into()),
                    local_path: Some(target.to_string_lossy().into_owned()),
                });
            } else {
                jobs.push((i, r.image_ref.clone(), target));
            }
        } else {
            results[i] = Some(FetchEntry {
                id: r.id.clone(),
                status: FetchStatus::Ok,
                reason: None,
                local_path: Some(r.image_ref.clone()),
            });
        }
    }

    if !jobs.is_empty() {
        let queue = Mutex::new(jobs);
        let outputs: Mutex<Vec<(usize, FetchStatus, Option<String>, Option<String>)>> =
            Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..concurrency {
                scope.spawn(|| {
                    let client = reqwest::blocking::Client::builder()
                        .timeout(timeout)
                        .build();
                    let client = match client {
                        Ok(c) => c,
                        Err(_) => return,
                    };
                    loop {
                        let job = queue.lock().expect("queue lock").pop();
                        let Some((index, url, target)) = job else { break };
                        let outcome = fetch_one(&client, &url, &target);
                        let mut out = outputs.lock().expect("outputs lock");
                        match outcome {
                            Ok(path) => out.push((index, FetchStatus::Ok, None, Some(path))),
                            Err(reason) => {
                                out.push((index, FetchStatus::Failed, Some(reason), None))
                            }
                        }
                    }
                });
            }
        });
        for (index, status, reason, local_path) in outputs.into_inner().expect("outputs lock") {
            results[index] = Some(FetchEntry {
                id: records[index].id.clone(),
                status,
                reason,
                local_path,
            });
        }
    }

    let mut localized = records.to_vec();
    let mut entries: Vec<FetchEntry> = Vec::with_capacity(records.len());
    for (i, entry) in results.into_iter().enumerate() {
        let entry = entry.expect("every record produced an entry");
        if entry.status == FetchStatus::Ok {
            if let Some(path) = &entry.local_path {
                localized[i].image_ref = path.clone();
            }
        }
        entries.push(entry);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((localized, FetchReport { entries }))
}

fn fetch_one(client: &reqwest::blocking::Client, url: &str, target: &Path) -> Result<String, String> {
    let response = client.get(url).send().map_err(|e| e.to_string())?;
    if !response.status().is_success() {
        return Err(format!("http status {}", response.status()));
    }
    let bytes = response.bytes().map_err(|e| e.to_string())?;
    fs::write(target, &bytes).map_err(|e| e.to_string())?;
    Ok(target.to_string_lossy().into_owned())
}

// ── POS tagging and the proper-noun filter ──────────────────────────────

const ITALIAN_DETERMINERS: &[&str] = &[
    "il", "lo", "la", "i", "gli", "le", "un", "uno", "una", "l", "un'", "questo", "questa",
    "questi", "queste", "quel", "quella", "quei", "quelle",
];

const ITALIAN_ADPOSITIONS: &[&str] = &[
    "di", "a", "da", "in", "con", "su", "per", "tra", "fra", "del", "dello", "della", "dei",
    "degli", "delle", "al", "allo", "alla", "ai", "agli", "alle", "dal", "dallo", "dalla", "dai",
    "dagli", "dalle", "nel", "nello", "nella", "nei", "negli", "nelle", "sul", "sullo", "sulla",
    "sui", "sugli", "sulle", "col", "coi",
];

/// Given names recognized as proper nouns even sentence-initially.
const GIVEN_NAMES: &[&str] = &[
    "anna", "maria", "giuseppe", "giovanni", "francesca", "luca", "marco", "paolo", "roberto",
    "laura", "sofia", "giulia", "alessandro", "federico", "matteo", "chiara", "sara", "andrea",
    "elena", "franco", "mario", "luigi", "carlo", "antonio", "angela", "rita", "silvia",
    "stefano", "davide", "simone", "dora", "kim", "ralph", "joey",
];

/// Heuristic fallback tagger: capitalized tokens are PROPN when they are not
/// sentence-initial or appear in the given-name gazetteer; a small Italian
/// function-word list yields DET/ADP; everything else is NOUN.
pub fn heuristic_pos_tag(caption: &str) -> Vec<String> {
    let tokens = word_tokens(caption);
    tokens
        .iter()
        .enumerate()
        .map(|(i, token)| {
            let lower = token.to_lowercase();
            if ITALIAN_DETERMINERS.contains(&lower.as_str()) {
                "DET".to_string()
            } else if ITALIAN_ADPOSITIONS.contains(&lower.as_str()) {
                "ADP".to_string()
            } else {
                let capitalized = token.chars().next().map(|c| c.is_uppercase()).unwrap_or(false);
                if capitalized && (i > 0 || GIVEN_NAMES.contains(&lower.as_str())) {
                    "PROPN".to_string()
                } else {
                    "NOUN".to_string()
                }
            }
        })
        .collect()
}

/// Fraction of tags equal to PROPN.
pub fn propn_fraction(tags: &[String]) -> Result<f64, DataError> {
    if tags.is_empty() {
        return Err(DataError::Contract("propn_fraction over empty tag list".into()));
    }
    let count = tags.iter().filter(|t| t.as_str() == "PROPN").count();
    Ok(count as f64 / tags.len() as f64)
}

/// Remove records whose proper-noun fraction is `>= threshold` (the
/// inclusive "80% or more" reading). Records without tags fall back to the
/// heuristic tagger when enabled, otherwise error. Outputs are ordered by
/// record id.
pub fn filter_propn(
    records: &[CaptionRecord],
    threshold: f64,
    use_fallback_tagger: bool,
) -> Result<(Vec<CaptionRecord>, Vec<CaptionRecord>), DataError> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for r in records {
        let fraction = match &r.pos_tags {
            Some(tags) => propn_fraction(tags)?,
            None if use_fallback_tagger => propn_fraction(&heuristic_pos_tag(&r.caption))?,
            None => return Err(DataError::UntaggedRecord(r.id.clone())),
        };
        if fraction >= threshold {
            removed.push(r.clone());
        } else {
            kept.push(r.clone());
        }
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    removed.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((kept, removed))
}

// ── Language identification ─────────────────────────────────────────────

/// Minimum normalized caption length (chars) for a confident detection.
pub const LANG_CONFIDENCE_MIN_CHARS: usize = 20;

#[derive(Debug, Clone)]
pub struct LanguageProfile {
    pub code: String,
    // BTreeMap keeps float accumulation order fixed, so scores are
    // bit-identical across runs
    trigrams: BTreeMap<String, f64>,
    norm: f64,
}

impl LanguageProfile {
    /// Normalized character-trigram frequency profile from a seed corpus.
    pub fn build(code: &str, corpus: &str) -> Self {
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for line in corpus.lines() {
            for tri in trigrams_of(line) {
                *counts.entry(tri).or_insert(0.0) += 1.0;
                total += 1.0;
            }
        }
        if total > 0.0 {
            for v in counts.values_mut() {
                *v /= total;
            }
        }
        let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
        LanguageProfile {
            code: code.to_string(),
            trigrams: counts,
            norm,
        }
    }

    /// Frequencies sum to 1 (within rounding) by construction.
    pub fn frequency_sum(&self) -> f64 {
        self.trigrams.values().sum()
    }
}

fn normalize_for_lang(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed: Vec<&str> = lowered.split_whitespace().collect();
    collapsed.join(" ")
}

fn trigrams_of(text: &str) -> Vec<String> {
    let normalized = format!(" {} ", normalize_for_lang(text));
    let chars: Vec<char> = normalized.chars().collect();
    if chars.len() < 3 {
        return Vec::new();
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// Profiles for Italian and English built from bundled seed corpora.
pub fn bundled_profiles() -> Vec<LanguageProfile> {
    vec![
        LanguageProfile::build("en", include_str!("../fixtures/lang_en.txt")),
        LanguageProfile::build("it", include_str!("../fixtures/lang_it.txt")),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// `None` when no trigram evidence exists (undetermined).
    pub language: Option<String>,
    pub score: f64,
    pub low_confidence: bool,
}

/// Cosine similarity between the caption's trigram vector and each profile;
/// highest score wins, ties broken by lexicographic language code. Captions
/// shorter than [`LANG_CONFIDENCE_MIN_CHARS`] are flagged low-confidence.
pub fn detect_language(caption: &str, profiles: &[LanguageProfile]) -> Detection {
    let normalized = normalize_for_lang(caption);
    let low_confidence = normalized.chars().count() < LANG_CONFIDENCE_MIN_CHARS;
    let tris = trigrams_of(caption);
    if tris.is_empty() || profiles.is_empty() {
        return Detection {
            language: None,
            score: 0.0,
            low_confidence: true,
        };
    }
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for t in tris {
        *counts.entry(t).or_insert(0.0) += 1.0;
    }
    let caption_norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();

    let mut ordered: Vec<&LanguageProfile> = profiles.iter().collect();
    ordered.sort_by(|a, b| a.code.cmp(&b.code));
    let mut best: Option<(&str, f64)> = None;
    for profile in ordered {
        let dot: f64 = counts
            .iter()
            .filter_map(|(k, v)| profile.trigrams.get(k).map(|p| p * v))
            .sum();
        let denom = caption_norm * profile.norm;
        let score = if denom > 0.0 { dot / denom } else { 0.0 };
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((&profile.code, score)),
        }
    }
    let (code, score) = best.expect("profiles nonempty");
    Detection {
        language: Some(code.to_string()),
        score,
        low_confidence,
    }
}

/// Keep records confidently detected as Italian with score >= `min_score`;
/// low-confidence records (too short to judge) are kept rather than dropped.
/// Outputs are ordered by record id.
pub fn filter_non_italian(
    records: &[CaptionRecord],
    profiles: &[LanguageProfile],
    min_score: f64,
) -> (Vec<CaptionRecord>, Vec<CaptionRecord>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for r in records {
        let detection = detect_language(&r.caption, profiles);
        let keep = detection.low_confidence
            || (detection.language.as_deref() == Some("it") && detection.score >= min_score);
        if keep {
            kept.push(r.clone());
        } else {
            removed.push(r.clone());
        }
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    removed.sort_by(|a, b| a.id.cmp(&b.id));
    (kept, removed)
}

// ── Rating matrices and agreement ───────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    pub rater_ids: Vec<String>,
    /// `rows[item][rater]`, ordinal categories 1..=categories.
    pub rows: Vec<Vec<u8>>,
    pub categories: u8,
}

impl RatingMatrix {
    pub fn new(rater_ids: Vec<String>, rows: Vec<Vec<u8>>, categories: u8) -> Result<Self, DataError> {
        if categories < 2 {
            return Err(DataError::Ratings("need at least 2 categories".into()));
        }
        if rater_ids.is_empty() {
            return Err(DataError::Ratings("no raters".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != rater_ids.len() {
                return Err(DataError::Ratings(format!(
                    "item {} has {} scores for {} raters",
                    i + 1,
                    row.len(),
                    rater_ids.len()
                )));
            }
            for &score in row {
                if score < 1 || score > categories {
                    return Err(DataError::Ratings(format!(
                        "item {} score {score} outside 1..={categories}",
                        i + 1
                    )));
                }
            }
        }
        Ok(RatingMatrix {
            rater_ids,
            rows,
            categories,
        })
    }

    /// Parse "rater_a,rater_b,...\n3,4,3\n..." with a header row of rater ids.
    pub fn parse(text: &str, categories: u8) -> Result<Self, DataError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| DataError::Ratings("empty ratings file".into()))?;
        let rater_ids: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Result<Vec<u8>, _> = line.split(',').map(|s| s.trim().parse::<u8>()).collect();
            let row = row.map_err(|e| DataError::Ratings(format!("item {}: {e}", i + 1)))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(DataError::Ratings("no rating rows".into()));
        }
        RatingMatrix::new(rater_ids, rows, categories)
    }

    pub fn load(path: &Path, categories: u8) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        RatingMatrix::parse(&text, categories)
    }

    pub fn num_items(&self) -> usize {
        self.rows.len()
    }

    pub fn num_raters(&self) -> usize {
        self.rater_ids.len()
    }
}

/// Grand mean over all cells.
pub fn rating_mean(matrix: &RatingMatrix) -> f64 {
    let total: u64 = matrix
        .rows
        .iter()
        .flat_map(|r| r.iter())
        .map(|&v| v as u64)
        .sum();
    let cells = (matrix.num_items() * matrix.num_raters()) as f64;
    total as f64 / cells
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Full credit only for exact agreement (the classic AC1 coefficient).
    Identity,
    /// Partial credit decreasing with ordinal distance.
    Ordinal,
}

/// Ordinal agreement weight for 1-based categories k, l on a q-point scale:
/// `w = 1 − C(|k−l|+1, 2) / C(q, 2)`, so exact agreement weighs 1 and the
/// extreme disagreement weighs 0.
pub fn ordinal_weight(k: u8, l: u8, q: u8) -> f64 {
    let d = k.abs_diff(l) as f64;
    let c2 = |n: f64| n * (n - 1.0) / 2.0;
    1.0 - c2(d + 1.0) / c2(q as f64)
}

/// Gwet's chance-corrected agreement coefficient. Identity weights give the
/// classic AC1; ordinal weights give the weighted (distance-discounted) form.
pub fn gwet_ac(matrix: &RatingMatrix, weighting: Weighting) -> Result<f64, DataError> {
    let r = matrix.num_raters();
    let n = matrix.num_items();
    let q = matrix.categories as usize;
    if r < 2 {
        return Err(DataError::Contract(
            "agreement needs at least 2 raters".into(),
        ));
    }
    if n == 0 {
        return Err(DataError::Contract("agreement needs at least 1 item".into()));
    }

    let weight = |k: usize, l: usize| -> f64 {
        match weighting {
            Weighting::Identity => {
                if k == l {
                    1.0
                } else {
                    0.0
                }
            }
            Weighting::Ordinal => ordinal_weight(k as u8 + 1, l as u8 + 1, q as u8),
        }
    };

    // per-item category counts
    let mut counts = vec![vec![0.0f64; q]; n];
    for (i, row) in matrix.rows.iter().enumerate() {
        for &score in row {
            counts[i][(score - 1) as usize] += 1.0;
        }
    }

    // weighted observed agreement
    let rf = r as f64;
    let mut pa_sum = 0.0;
    for row in &counts {
        let mut item = 0.0;
        for k in 0..q {
            if row[k] == 0.0 {
                continue;
            }
            let weighted: f64 = (0..q).map(|l| weight(k, l) * row[l]).sum();
            item += row[k] * (weighted - 1.0);
        }
        pa_sum += item / (rf * (rf - 1.0));
    }
    let p_a = pa_sum / n as f64;

    // chance agreement
    let t_w: f64 = (0..q)
        .flat_map(|k| (0..q).map(move |l| weight(k, l)))
        .sum();
    let mut pi = vec![0.0f64; q];
    for row in &counts {
        for k in 0..q {
            pi[k] += row[k] / rf;
        }
    }
    for p in &mut pi {
        *p /= n as f64;
    }
    let spread: f64 = pi.iter().map(|p| p * (1.0 - p)).sum();
    let p_e = t_w / (q as f64 * (q as f64 - 1.0)) * spread;

    if 1.0 - p_e <= 0.0 {
        return Err(DataError::UndefinedCoefficient);
    }
    Ok((p_a - p_e) / (1.0 - p_e))
}

// ── Dataset splitting ───────────────────────────────────────────────────

/// Deterministic seeded split; the eval side gets `floor(n · eval_fraction)`
/// items and both sides preserve the input order.
pub fn split_dataset<T: Clone>(items: &[T], eval_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let eval_len = ((n as f64) * eval_fraction.clamp(0.0, 1.0)).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let eval_set: HashSet<usize> = indices.into_iter().take(eval_len).collect();
    let mut train = Vec::with_capacity(n - eval_len);
    let mut eval = Vec::with_capacity(eval_len);
    for (i, item) in items.iter().enumerate() {
        if eval_set.contains(&i) {
            eval.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    (train, eval)
}
