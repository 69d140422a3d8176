//! Rule-based grounding captions from per-view object annotations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bev_partition::{ViewIndex, NUM_VIEWS};
use crate::error::{Error, Result};
use crate::metrics::normalize_tokens;

static BUILTIN_TEMPLATES: &str = include_str!("../assets/groundview_templates.toml");

/// Quantifier for an object count; `None` means the object is not mentioned.
pub fn quantify(count: i64) -> Result<Option<&'static str>> {
    match count {
        c if c < 0 => Err(Error::InputDomain(format!("negative object count {c}"))),
        0 => Ok(None),
        1 => Ok(Some("one")),
        2 => Ok(Some("several")),
        _ => Ok(Some("many")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCount {
    pub category: String,
    pub view: usize,
    pub count: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub road: Option<String>,
}

impl Environment {
    fn tags(&self) -> Vec<&str> {
        [&self.weather, &self.lighting, &self.road]
            .into_iter()
            .flatten()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    #[serde(default)]
    pub objects: Vec<ObjectCount>,
    #[serde(default)]
    pub environment: Environment,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            if o.category.trim().is_empty() {
                return Err(Error::InputDomain(format!("{}: empty category", self.sample_id)));
            }
            if o.view >= NUM_VIEWS {
                return Err(Error::InputDomain(format!(
                    "{}: view {} outside 0..{NUM_VIEWS}",
                    self.sample_id, o.view
                )));
            }
            if o.count < 0 {
                return Err(Error::InputDomain(format!(
                    "{}: negative count {} for {}",
                    self.sample_id, o.count, o.category
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewFilter {
    View(ViewIndex),
    All,
}

impl fmt::Display for ViewFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewFilter::View(v) => write!(f, "{}", v.get()),
            ViewFilter::All => f.write_str("all"),
        }
    }
}

impl FromStr for ViewFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(ViewFilter::All);
        }
        let v: usize = s
            .parse()
            .map_err(|_| Error::InputDomain(format!("view `{s}` is neither `all` nor 0..5")))?;
        Ok(ViewFilter::View(ViewIndex::new(v)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub sample_id: String,
    pub view: String,
    pub text: String,
    pub template_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundViewTemplates {
    pub version: String,
    pub view_phrases: Vec<String>,
    pub all_views_phrase: String,
    pub environment: String,
    pub objects: String,
    pub empty_scene: String,
    #[serde(default)]
    pub plurals: BTreeMap<String, String>,
}

impl GroundViewTemplates {
    /// Templates shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_TEMPLATES).expect("shipped templates are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.version.trim().is_empty() {
            return Err(Error::Template("template version is empty".into()));
        }
        if self.view_phrases.len() != NUM_VIEWS {
            return Err(Error::Template(format!(
                "{} view phrases, expected {NUM_VIEWS}",
                self.view_phrases.len()
            )));
        }
        for (field, text, holes) in [
            ("environment", &self.environment, &["{tags}"][..]),
            ("objects", &self.objects, &["{scope}", "{objects}"][..]),
            ("empty_scene", &self.empty_scene, &[][..]),
        ] {
            for hole in holes {
                if !text.contains(hole) {
                    return Err(Error::Template(format!("`{field}` lacks {hole}")));
                }
            }
        }
        Ok(())
    }

    pub fn view_phrase(&self, view: ViewIndex) -> &str {
        &self.view_phrases[view.get()]
    }

    pub fn scope_phrase(&self, filter: ViewFilter) -> &str {
        match filter {
            ViewFilter::View(v) => self.view_phrase(v),
            ViewFilter::All => &self.all_views_phrase,
        }
    }

    /// Category name as a noun phrase, pluralized unless `count` is 1.
    pub fn noun(&self, category: &str, count: i64) -> String {
        let singular = category.trim().replace('_', " ").to_lowercase();
        if count == 1 {
            return singular;
        }
        if let Some(p) = self.plurals.get(&singular) {
            return p.clone();
        }
        let (head, last) = match singular.rsplit_once(' ') {
            Some((h, l)) => (format!("{h} "), l.to_string()),
            None => (String::new(), singular.clone()),
        };
        if let Some(p) = self.plurals.get(&last) {
            return format!("{head}{p}");
        }
        let plural = if ["s", "x", "z", "ch", "sh"].iter().any(|e| last.ends_with(e)) {
            format!("{last}es")
        } else if last.ends_with('y')
            && !last[..last.len() - 1].ends_with(['a', 'e', 'i', 'o', 'u'])
        {
            format!("{}ies", &last[..last.len() - 1])
        } else {
            format!("{last}s")
        };
        format!("{head}{plural}")
    }
}

/// Summed counts per category for the selected view(s), ordered by count
/// descending then category name. Zero totals are dropped.
pub fn aggregate_counts(record: &AnnotationRecord, filter: ViewFilter) -> Result<Vec<(String, i64)>> {
    record.validate()?;
    let mut totals: BTreeMap<String, i64> = BTreeMap::new();
    for o in &record.objects {
        let selected = match filter {
            ViewFilter::All => true,
            ViewFilter::View(v) => o.view == v.get(),
        };
        if selected {
            *totals.entry(o.category.trim().to_string()).or_default() += o.count;
        }
    }
    let mut ordered: Vec<(String, i64)> = totals.into_iter().filter(|&(_, c)| c > 0).collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ordered)
}

pub fn generate_caption(
    record: &AnnotationRecord,
    filter: ViewFilter,
    templates: &GroundViewTemplates,
) -> Result<CaptionRecord> {
    let counts = aggregate_counts(record, filter)?;
    let scope = templates.scope_phrase(filter);
    let mut sentences = Vec::new();
    let tags = record.environment.tags();
    if !tags.is_empty() {
        sentences.push(templates.environment.replace("{tags}", &tags.join(", ")));
    }
    if !counts.is_empty() {
        let mut items = Vec::with_capacity(counts.len());
        for (category, count) in &counts {
            let q = quantify(*count)?.expect("zero counts are filtered");
            items.push(format!("{q} {}", templates.noun(category, *count)));
        }
        sentences.push(
            templates
                .objects
                .replace("{scope}", scope)
                .replace("{objects}", &items.join(", ")),
        );
    }
    if sentences.is_empty() {
        sentences.push(templates.empty_scene.replace("{scope}", scope));
    }
    Ok(CaptionRecord {
        sample_id: record.sample_id.clone(),
        view: filter.to_string(),
        text: sentences.join(" "),
        template_version: templates.version.clone(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub template_version: String,
    pub records: usize,
    pub skipped: usize,
    pub captions: usize,
    pub vocabulary_size: usize,
    /// Mentions per quantifier word over all emitted captions.
    pub quantifiers: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct CorpusOutput {
    pub captions: Vec<CaptionRecord>,
    pub stats: CorpusStats,
    /// `line N: reason` for each skipped record.
    pub warnings: Vec<String>,
}

impl CorpusOutput {
    /// More than 1% of the non-blank input lines were skipped.
    pub fn too_many_skipped(&self) -> bool {
        let seen = self.stats.records + self.stats.skipped;
        self.stats.skipped * 100 > seen
    }
}

/// Captions for every record of a JSONL annotation file and every filter.
/// Malformed lines are skipped with a warning naming the 1-based line number.
pub fn generate_corpus(
    jsonl: &str,
    filters: &[ViewFilter],
    templates: &GroundViewTemplates,
) -> CorpusOutput {
    let mut captions = Vec::new();
    let mut warnings = Vec::new();
    let mut stats = CorpusStats {
        template_version: templates.version.clone(),
        ..Default::default()
    };
    let mut vocab = std::collections::BTreeSet::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<AnnotationRecord>(line)
            .map_err(Error::from)
            .and_then(|r| {
                filters
                    .iter()
                    .map(|&f| {
                        let counts = aggregate_counts(&r, f)?;
                        Ok((generate_caption(&r, f, templates)?, counts))
                    })
                    .collect::<Result<Vec<_>>>()
            });
        match parsed {
            Ok(records) => {
                stats.records += 1;
                for (caption, counts) in records {
                    for (_, c) in counts {
                        let q = quantify(c).ok().flatten().unwrap_or("one");
                        *stats.quantifiers.entry(q.to_string()).or_default() += 1;
                    }
                    vocab.extend(normalize_tokens(&caption.text));
                    captions.push(caption);
                }
            }
            Err(e) => {
                let msg = format!("line {}: {e}", i + 1);
                log::warn!("skipping malformed annotation, {msg}");
                warnings.push(msg);
                stats.skipped += 1;
            }
        }
    }
    stats.captions = captions.len();
    stats.vocabulary_size = vocab.len();
    CorpusOutput {
        captions,
        stats,
        warnings,
    }
}
