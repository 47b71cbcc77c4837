//! Markdown knowledge packages, split at section granularity and retrieved
//! by a pluggable scorer.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Default number of sections retrieved per prompt slot.
pub const DEFAULT_RETRIEVAL_K: usize = 3;
/// Default character budget for one prompt's knowledge slot.
pub const DEFAULT_CHAR_BUDGET: usize = 8_000;

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("knowledge directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown scorer `{0}`")]
    UnknownScorer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub doc_id: String,
    /// Nesting chain of heading titles; empty for a preamble.
    pub heading_path: Vec<String>,
    /// Text below the heading line, up to the next heading.
    pub body: String,
    /// Position of the section within its document.
    pub order: usize,
    /// The raw section text: heading line followed by the body.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    pub sections: Vec<Section>,
    pub manifest: BTreeMap<String, ManifestEntry>,
}

impl KnowledgeBase {
    pub fn from_documents<I, S, T>(docs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut kb = KnowledgeBase::default();
        for (id, text) in docs {
            let id = id.into();
            let text = text.as_ref();
            kb.manifest.insert(
                id.clone(),
                ManifestEntry {
                    path: PathBuf::from(&id),
                    digest: hex::encode(Sha256::digest(text.as_bytes())),
                },
            );
            kb.sections.extend(split_sections(&id, text));
        }
        kb
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    /// Hex digest over every document's id and content digest.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, entry) in &self.manifest {
            h.update(id.as_bytes());
            h.update([0]);
            h.update(entry.digest.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

/// Loads every `*.md` file below `dir`, ordered by relative path.
pub fn load_packages(dir: &Path) -> Result<KnowledgeBase, KnowledgeError> {
    if !dir.is_dir() {
        return Err(KnowledgeError::MissingDirectory(dir.to_owned()));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| KnowledgeError::Unreadable {
            path: e.path().map(Path::to_owned).unwrap_or_else(|| dir.to_owned()),
            source: e.into(),
        })?;
        let path = entry.path();
        if entry.file_type().is_file() && path.extension().is_some_and(|e| e == "md") {
            files.push(path.to_owned());
        }
    }
    let mut kb = KnowledgeBase::default();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|source| KnowledgeError::Unreadable {
            path: path.clone(),
            source,
        })?;
        let rel = path.strip_prefix(dir).unwrap_or(&path);
        let doc_id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        kb.sections.extend(split_sections(&doc_id, &text));
        kb.manifest.insert(
            doc_id,
            ManifestEntry {
                digest: hex::encode(Sha256::digest(text.as_bytes())),
                path,
            },
        );
    }
    Ok(kb)
}

/// Returns `(level, title)` for an ATX heading of level 1..=3.
fn atx_heading(line: &str) -> Option<(usize, String)> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let level = rest.len() - rest.trim_start_matches('#').len();
    if !(1..=3).contains(&level) {
        return None;
    }
    let after = &rest[level..];
    if !(after.is_empty() || after.starts_with(' ') || after.starts_with('\t')) {
        return None;
    }
    let title = after.trim();
    // closing sequence: "## Title ##"
    let stripped = title.trim_end_matches('#');
    let title = if stripped.len() < title.len() && (stripped.is_empty() || stripped.ends_with(' ')) {
        stripped.trim_end()
    } else {
        title
    };
    Some((level, title.to_owned()))
}

fn fence_marker(line: &str) -> Option<&'static str> {
    let t = line.trim_start();
    if t.starts_with("```") {
        Some("```")
    } else if t.starts_with("~~~") {
        Some("~~~")
    } else {
        None
    }
}

/// Splits a markdown document at ATX headings of level 3 or less.
///
/// Joining the `text` of the returned sections with `"\n"` reproduces the
/// input exactly. Headings inside fenced code blocks are ignored.
pub fn split_sections(doc_id: &str, markdown: &str) -> Vec<Section> {
    if markdown.is_empty() {
        return Vec::new();
    }
    let lines: Vec<&str> = markdown.split('\n').collect();
    // (line index, level, title)
    let mut heads = Vec::new();
    let mut fence: Option<&str> = None;
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if let Some(open) = fence {
            if line.trim_start().starts_with(open) {
                fence = None;
            }
            continue;
        }
        if let Some(m) = fence_marker(line) {
            fence = Some(m);
            continue;
        }
        if let Some((level, title)) = atx_heading(line) {
            heads.push((i, level, title));
        }
    }

    let mut sections = Vec::new();
    let first = heads.first().map_or(lines.len(), |h| h.0);
    if first > 0 {
        let text = lines[..first].join("\n");
        sections.push(Section {
            doc_id: doc_id.to_owned(),
            heading_path: Vec::new(),
            body: text.clone(),
            order: 0,
            text,
        });
    }
    let mut stack: Vec<(usize, String)> = Vec::new();
    for (n, (start, level, title)) in heads.iter().enumerate() {
        let end = heads.get(n + 1).map_or(lines.len(), |h| h.0);
        while stack.last().is_some_and(|(l, _)| *l >= *level) {
            stack.pop();
        }
        stack.push((*level, title.clone()));
        let body = lines[start + 1..end].join("\n");
        sections.push(Section {
            doc_id: doc_id.to_owned(),
            heading_path: stack.iter().map(|(_, t)| t.clone()).collect(),
            body,
            order: sections.len(),
            text: lines[*start..end].join("\n"),
        });
    }
    sections
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, query: &str, section: &Section) -> f64;
}

/// Shared distinct tokens between query and section (heading titles
/// included), divided by the section's token count.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermOverlap;

impl Scorer for TermOverlap {
    fn name(&self) -> &str {
        "term_overlap"
    }

    fn score(&self, query: &str, section: &Section) -> f64 {
        let query: HashSet<String> = tokenize(query).into_iter().collect();
        let mut tokens = tokenize(&section.heading_path.join(" "));
        tokens.extend(tokenize(&section.body));
        if tokens.is_empty() {
            return 0.0;
        }
        let shared = tokens
            .iter()
            .filter(|t| query.contains(*t))
            .collect::<HashSet<_>>()
            .len();
        shared as f64 / tokens.len() as f64
    }
}

pub fn scorer_by_name(name: &str) -> Result<Box<dyn Scorer>, KnowledgeError> {
    match name {
        "term_overlap" => Ok(Box::new(TermOverlap)),
        other => Err(KnowledgeError::UnknownScorer(other.to_owned())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked<'a> {
    pub section: &'a Section,
    pub score: f64,
}

/// At most `k` sections with a positive score, best first; ties keep
/// document order.
pub fn retrieve<'a>(
    kb: &'a KnowledgeBase,
    query: &str,
    k: usize,
    scorer: &dyn Scorer,
) -> Vec<Ranked<'a>> {
    if k == 0 {
        return Vec::new();
    }
    let mut ranked: Vec<Ranked> = kb
        .sections
        .iter()
        .map(|s| Ranked {
            section: s,
            score: scorer.score(query, s),
        })
        .filter(|r| r.score > 0.0)
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.section.doc_id.cmp(&b.section.doc_id))
            .then_with(|| a.section.order.cmp(&b.section.order))
    });
    ranked.truncate(k);
    ranked
}

pub fn retrieve_named<'a>(
    kb: &'a KnowledgeBase,
    query: &str,
    k: usize,
    scorer: &str,
) -> Result<Vec<Ranked<'a>>, KnowledgeError> {
    let scorer = scorer_by_name(scorer)?;
    Ok(retrieve(kb, query, k, scorer.as_ref()))
}

/// Keeps ranked sections while they fit in `budget` characters, dropping
/// the lowest-ranked first. A single oversized top section is cut to fit.
pub fn within_budget(ranked: &[Ranked<'_>], budget: usize) -> Vec<Section> {
    let mut used = 0;
    let mut out = Vec::new();
    for r in ranked {
        let len = r.section.text.chars().count();
        if used + len <= budget {
            used += len;
            out.push(r.section.clone());
        } else if out.is_empty() {
            let mut s = r.section.clone();
            s.text = s.text.chars().take(budget).collect();
            out.push(s);
            break;
        } else {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reconstruct(sections: &[Section]) -> String {
        sections.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn splits_nested_headings() {
        let s = split_sections("d", "# A\nx\n## B\ny");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].heading_path, vec!["A"]);
        assert_eq!(s[0].body, "x");
        assert_eq!(s[1].heading_path, vec!["A", "B"]);
        assert_eq!(s[1].body, "y");
    }

    #[test]
    fn no_headings_is_one_preamble() {
        let s = split_sections("d", "just text\nmore");
        assert_eq!(s.len(), 1);
        assert!(s[0].heading_path.is_empty());
    }

    #[test]
    fn preamble_and_two_sections() {
        let s = split_sections("d", "intro\n## One\na\n## Two\nb\n");
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].body, "intro");
        assert_eq!(s.iter().map(|x| x.order).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn heading_without_body_is_kept() {
        let s = split_sections("d", "# A\n## B\ny");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].body, "");
        assert_eq!(reconstruct(&s), "# A\n## B\ny");
    }

    #[test]
    fn level_four_and_fenced_headings_are_body() {
        let md = "# A\n#### deep\n```\n# not a heading\n```\n## B\n";
        let s = split_sections("d", md);
        assert_eq!(s.len(), 2);
        assert!(s[0].body.contains("#### deep"));
        assert!(s[0].body.contains("# not a heading"));
        assert_eq!(reconstruct(&s), md);
    }

    #[test]
    fn numbered_rules_keep_their_numbers() {
        let md = "# Rules\n## Rule 1. Rectal location\nOnly for rectum.\n## Rule 2. Margins\nZero distance.\n";
        let s = split_sections("rules.md", md);
        assert_eq!(s[1].heading_path.last().unwrap(), "Rule 1. Rectal location");
        assert_eq!(s[2].heading_path.last().unwrap(), "Rule 2. Margins");
    }

    #[test]
    fn closing_hashes_are_stripped() {
        assert_eq!(atx_heading("## Title ##"), Some((2, "Title".into())));
        assert_eq!(atx_heading("#hashtag"), None);
        assert_eq!(atx_heading("    # code"), None);
    }

    proptest! {
        #[test]
        fn reconstruction_is_exact(lines in proptest::collection::vec(
            prop_oneof![
                "[a-z ]{0,12}",
                "#{1,4} [a-z]{1,6}",
                Just(String::new()),
                Just("```".to_string()),
            ], 0..20)) {
            let md = lines.join("\n");
            let s = split_sections("d", &md);
            prop_assert_eq!(reconstruct(&s), md.clone());
            for sec in &s {
                prop_assert!(md.contains(&sec.body));
            }
        }
    }

    fn kb() -> KnowledgeBase {
        KnowledgeBase::from_documents([
            ("a.md", "# Margins\nradial margin distance\n# Site\ncecum ascending colon"),
            ("b.md", "# Other\nunrelated words here"),
        ])
    }

    #[test]
    fn retrieve_ranks_matching_section_first() {
        let kb = kb();
        let r = retrieve(&kb, "where is the cecum", 3, &TermOverlap);
        assert_eq!(r[0].section.heading_path, vec!["Site"]);
        assert!(retrieve(&kb, "cecum", 0, &TermOverlap).is_empty());
    }

    #[test]
    fn equal_scores_follow_document_order() {
        let kb = KnowledgeBase::from_documents([
            ("b.md", "# X\nalpha beta"),
            ("a.md", "# Y\nalpha beta\n# Z\nalpha beta"),
        ]);
        let r = retrieve(&kb, "alpha", 3, &TermOverlap);
        assert_eq!(r.len(), 3);
        let order: Vec<_> = r
            .iter()
            .map(|x| (x.section.doc_id.as_str(), x.section.order))
            .collect();
        assert_eq!(order, vec![("a.md", 0), ("a.md", 1), ("b.md", 0)]);
    }

    #[test]
    fn unknown_scorer_is_an_error() {
        assert!(matches!(
            retrieve_named(&kb(), "x", 1, "embeddings"),
            Err(KnowledgeError::UnknownScorer(_))
        ));
    }

    #[test]
    fn budget_drops_lowest_ranked() {
        let kb = kb();
        let r = retrieve(&kb, "cecum radial margin", 3, &TermOverlap);
        assert_eq!(r.len(), 2);
        let first = r[0].section.text.chars().count();
        let kept = within_budget(&r, first);
        assert_eq!(kept.len(), 1);
        let cut = within_budget(&r, 5);
        assert_eq!(cut[0].text.chars().count(), 5);
    }

    #[test]
    fn load_packages_reads_directory() {
        let dir = tempfile::tempdir().unwrap();
        let empty = load_packages(dir.path()).unwrap();
        assert!(empty.is_empty());
        std::fs::write(dir.path().join("rules.md"), "pre\n## A\nx\n## B\ny\n").unwrap();
        std::fs::write(dir.path().join("notes.txt"), "# ignored").unwrap();
        let kb = load_packages(dir.path()).unwrap();
        assert_eq!(kb.sections.len(), 3);
        assert_eq!(kb.manifest.len(), 1);
        assert_eq!(kb.manifest["rules.md"].digest.len(), 64);
        assert!(load_packages(&dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn retrieve_is_bounded_and_sorted(query in "[a-z ]{0,30}", k in 0usize..6) {
            let kb = kb();
            let r = retrieve(&kb, &query, k, &TermOverlap);
            prop_assert!(r.len() <= k);
            for w in r.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            let again = retrieve(&kb, &query, k, &TermOverlap);
            prop_assert_eq!(r, again);
        }
    }
}
