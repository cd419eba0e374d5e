//! Post ingestion and cohort construction.
//!
//! Posts arrive as flat JSONL or CSV records carrying five fields
//! (`post_id`, `author_id`, `community`, `created_at`, `body`). Cohorts are
//! built by community participation: treatment users have at least
//! `min_treatment_posts` posts pooled across the treatment communities,
//! control users have posted in a control community and never in a
//! treatment or exclusion community.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus file {path} has no usable CSV header: {message}")]
    Header { path: PathBuf, message: String },
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub author_id: String,
    pub community: String,
    pub created_at: i64,
    pub body: String,
}

impl Post {
    fn is_valid(&self) -> bool {
        !self.body.trim().is_empty()
            && self.created_at >= 0
            && !self.post_id.is_empty()
            && !self.author_id.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Treatment,
    Control,
    Unassigned,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Treatment => "treatment",
            Cohort::Control => "control",
            Cohort::Unassigned => "unassigned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    /// Ascending by `created_at`, ties by `post_id`.
    pub posts: Vec<Post>,
    pub cohort: Cohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub treatment_communities: BTreeSet<String>,
    pub control_communities: BTreeSet<String>,
    #[serde(default)]
    pub exclusion_communities: BTreeSet<String>,
    #[serde(default = "default_min_treatment_posts")]
    pub min_treatment_posts: usize,
}

fn default_min_treatment_posts() -> usize {
    100
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_treatment_posts == 0 {
            return Err(CorpusError::InvalidSpec("min_treatment_posts must be >= 1".into()));
        }
        if let Some(shared) = self.treatment_communities.intersection(&self.control_communities).next() {
            return Err(CorpusError::InvalidSpec(format!(
                "community {shared:?} is listed as both treatment and control"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// Guess from the file extension; anything but `.csv` is read as JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub posts: Vec<Post>,
    pub skipped: usize,
}

pub fn ingest_posts(path: &Path, format: InputFormat) -> Result<Ingested, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err)?;
    match format {
        InputFormat::Jsonl => read_jsonl(BufReader::new(file)).map_err(io_err),
        InputFormat::Csv => read_csv(file, path),
    }
}

fn read_jsonl<R: BufRead>(reader: R) -> std::io::Result<Ingested> {
    let mut out = Ingested::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Post>(&line) {
            Ok(post) if post.is_valid() => out.posts.push(post),
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Ingested, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CorpusError::Header {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    // An empty file yields an empty header row, which is a valid empty corpus.
    if headers.is_empty() {
        return Ok(Ingested::default());
    }
    for required in ["post_id", "author_id", "community", "created_at", "body"] {
        if !headers.iter().any(|h| h == required) {
            return Err(CorpusError::Header {
                path: path.to_path_buf(),
                message: format!("missing column {required}"),
            });
        }
    }
    let mut out = Ingested::default();
    for record in rdr.deserialize::<Post>() {
        match record {
            Ok(post) if post.is_valid() => out.posts.push(post),
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Drop repeated `post_id`s, keeping the first occurrence. Returns the number removed.
pub fn dedup_posts(posts: &mut Vec<Post>) -> usize {
    let before = posts.len();
    let mut seen = HashSet::with_capacity(posts.len());
    posts.retain(|p| seen.insert(p.post_id.clone()));
    before - posts.len()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohorts {
    pub treatment: Vec<UserRecord>,
    pub control: Vec<UserRecord>,
}

impl Cohorts {
    pub fn users(&self) -> impl Iterator<Item = &UserRecord> {
        self.treatment.iter().chain(self.control.iter())
    }

    pub fn into_posts(self) -> Vec<Post> {
        self.treatment
            .into_iter()
            .chain(self.control)
            .flat_map(|u| u.posts)
            .collect()
    }
}

/// Split a corpus into treatment and control users. Both lists are sorted by
/// `user_id`, and each user carries their full history across all communities.
pub fn build_cohorts(posts: &[Post], spec: &CohortSpec) -> Result<Cohorts, CorpusError> {
    spec.validate()?;
    let mut seen = HashSet::with_capacity(posts.len());
    let mut by_author: BTreeMap<&str, Vec<&Post>> = BTreeMap::new();
    for post in posts {
        if seen.insert(post.post_id.as_str()) {
            by_author.entry(post.author_id.as_str()).or_default().push(post);
        }
    }

    let mut cohorts = Cohorts::default();
    for (author, user_posts) in by_author {
        let cohort = classify(&user_posts, spec);
        if cohort == Cohort::Unassigned {
            continue;
        }
        let mut history: Vec<Post> = user_posts.into_iter().cloned().collect();
        history.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.post_id.cmp(&b.post_id)));
        let record = UserRecord { user_id: author.to_string(), posts: history, cohort };
        match cohort {
            Cohort::Treatment => cohorts.treatment.push(record),
            Cohort::Control => cohorts.control.push(record),
            Cohort::Unassigned => unreachable!(),
        }
    }
    debug_assert!(cohorts
        .treatment
        .iter()
        .all(|t| cohorts.control.binary_search_by(|c| c.user_id.cmp(&t.user_id)).is_err()));
    Ok(cohorts)
}

fn classify(posts: &[&Post], spec: &CohortSpec) -> Cohort {
    let treatment_posts = posts
        .iter()
        .filter(|p| spec.treatment_communities.contains(&p.community))
        .count();
    if treatment_posts >= spec.min_treatment_posts {
        return Cohort::Treatment;
    }
    let excluded = treatment_posts > 0
        || posts.iter().any(|p| spec.exclusion_communities.contains(&p.community));
    let in_control = posts.iter().any(|p| spec.control_communities.contains(&p.community));
    if in_control && !excluded {
        Cohort::Control
    } else {
        Cohort::Unassigned
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn post(id: &str, author: &str, community: &str, t: i64) -> Post {
        Post {
            post_id: id.into(),
            author_id: author.into(),
            community: community.into(),
            created_at: t,
            body: format!("post {id}"),
        }
    }

    fn spec(min: usize) -> CohortSpec {
        CohortSpec {
            treatment_communities: ["Schizophrenia".to_string()].into(),
            control_communities: ["cooking".to_string(), "movies".to_string()].into(),
            exclusion_communities: ["depression".to_string()].into(),
            min_treatment_posts: min,
        }
    }

    fn user_with(n_treat: usize, author: &str) -> Vec<Post> {
        (0..n_treat)
            .map(|i| post(&format!("{author}-{i}"), author, "Schizophrenia", i as i64))
            .collect()
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.jsonl", InputFormat::Jsonl), ("a.csv", InputFormat::Csv)] {
            let path = dir.path().join(name);
            File::create(&path).unwrap();
            let got = ingest_posts(&path, fmt).unwrap();
            assert!(got.posts.is_empty());
            assert_eq!(got.skipped, 0);
        }
    }

    #[test]
    fn missing_body_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posts.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"post_id":"1","author_id":"u","community":"c","created_at":1,"body":"hello"}}"#).unwrap();
        writeln!(f, r#"{{"post_id":"2","author_id":"u","community":"c","created_at":2}}"#).unwrap();
        writeln!(f, r#"{{"post_id":"3","author_id":"u","community":"c","created_at":3,"body":"again"}}"#).unwrap();
        let got = ingest_posts(&path, InputFormat::Jsonl).unwrap();
        assert_eq!(got.posts.len(), 2);
        assert_eq!(got.skipped, 1);
        assert_eq!(got.posts[1].post_id, "3");
    }

    #[test]
    fn csv_with_quoting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posts.csv");
        std::fs::write(
            &path,
            "post_id,author_id,community,created_at,body\n\
             1,u,c,10,\"hello, \"\"world\"\"\"\n\
             2,u,c,-5,negative time\n\
             3,u,c,11,\"multi\nline\"\n",
        )
        .unwrap();
        let got = ingest_posts(&path, InputFormat::Csv).unwrap();
        assert_eq!(got.skipped, 1);
        assert_eq!(got.posts[0].body, "hello, \"world\"");
        assert_eq!(got.posts[1].body, "multi\nline");
    }

    #[test]
    fn csv_without_required_column_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posts.csv");
        std::fs::write(&path, "post_id,author_id,body\n1,u,x\n").unwrap();
        assert!(matches!(ingest_posts(&path, InputFormat::Csv), Err(CorpusError::Header { .. })));
    }

    #[test]
    fn unreadable_file_is_fatal() {
        let err = ingest_posts(Path::new("/nonexistent/posts.jsonl"), InputFormat::Jsonl);
        assert!(matches!(err, Err(CorpusError::Io { .. })));
    }

    #[test]
    fn treatment_threshold_is_inclusive() {
        let mut posts = user_with(100, "at");
        posts.extend(user_with(99, "below"));
        let got = build_cohorts(&posts, &spec(100)).unwrap();
        assert_eq!(got.treatment.len(), 1);
        assert_eq!(got.treatment[0].user_id, "at");
        assert!(got.control.is_empty());
    }

    #[test]
    fn control_requires_no_treatment_or_exclusion_posts() {
        let posts = vec![
            post("1", "clean", "cooking", 5),
            post("2", "clean", "news", 1),
            post("3", "sad", "cooking", 1),
            post("4", "sad", "depression", 2),
            post("5", "dabbler", "movies", 1),
            post("6", "dabbler", "Schizophrenia", 2),
            post("7", "only_excluded", "depression", 1),
        ];
        let got = build_cohorts(&posts, &spec(100)).unwrap();
        assert!(got.treatment.is_empty());
        assert_eq!(got.control.len(), 1);
        let clean = &got.control[0];
        assert_eq!(clean.user_id, "clean");
        // full history, time ordered
        assert_eq!(clean.posts.iter().map(|p| p.post_id.as_str()).collect::<Vec<_>>(), ["2", "1"]);
        assert_eq!(clean.cohort, Cohort::Control);
    }

    #[test]
    fn duplicate_ids_keep_first() {
        let mut posts = vec![post("1", "a", "cooking", 1), post("1", "b", "cooking", 2)];
        assert_eq!(dedup_posts(&mut posts), 1);
        assert_eq!(posts[0].author_id, "a");
        let got = build_cohorts(&[post("1", "a", "cooking", 1), post("1", "b", "cooking", 2)], &spec(1)).unwrap();
        assert_eq!(got.control.len(), 1);
    }

    #[test]
    fn rejects_overlapping_spec() {
        let mut s = spec(1);
        s.control_communities.insert("Schizophrenia".into());
        assert!(build_cohorts(&[], &s).is_err());
        assert!(build_cohorts(&[], &spec(0)).is_err());
    }
}
