//! Ingestion of exposure logs and user tables.
//!
//! Each item becomes one task whose nominal samples are the feature vectors
//! of the users exposed to it. A categorical user label (age bin,
//! occupation, ...) drives task filtering and defines the nominal and
//! anomalous test users of every task.
//!
//! Events are a headered CSV `user_id,item_id`. Users are a headered CSV
//! `user_id,label:<key>,...,f_0,...,f_{d-1}`: every `label:` column is a
//! categorical label and every other column after the id is a feature.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{Benchmark, FeatureVector, TaskCollection, TaskDataset, TaskTestSpec, TestPool};

const LABEL_PREFIX: &str = "label:";

/// Deduplicated `(user, item)` exposure events in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    events: Vec<(String, String)>,
}

impl EventLog {
    /// Builds a log, dropping repeated `(user, item)` pairs.
    pub fn new<U: Into<String>, I: Into<String>>(events: impl IntoIterator<Item = (U, I)>) -> Self {
        let mut seen = HashSet::new();
        let events = events
            .into_iter()
            .map(|(u, i)| (u.into(), i.into()))
            .filter(|e| seen.insert(e.clone()))
            .collect();
        EventLog { events }
    }

    pub fn events(&self) -> &[(String, String)] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Users exposed to each item.
    pub fn exposures(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (u, i) in &self.events {
            map.entry(i.as_str()).or_default().push(u.as_str());
        }
        map
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub id: String,
    pub features: FeatureVector,
    /// Raw label values keyed by label name (without the `label:` prefix).
    pub labels: BTreeMap<String, String>,
}

/// Users with features and categorical labels, indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTable {
    users: Vec<UserRecord>,
    index: HashMap<String, usize>,
    feature_dim: usize,
}

impl UserTable {
    pub fn new(users: Vec<UserRecord>) -> Result<Self> {
        let feature_dim = users.first().map_or(0, |u| u.features.dim());
        let mut index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if u.features.dim() != feature_dim {
                return Err(Error::DimensionMismatch {
                    task_id: i,
                    expected: feature_dim,
                    found: u.features.dim(),
                });
            }
            if index.insert(u.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate user id {:?}", u.id)));
            }
        }
        Ok(UserTable {
            users,
            index,
            feature_dim,
        })
    }

    pub fn users(&self) -> &[UserRecord] {
        &self.users
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&UserRecord> {
        self.position(id).map(|i| &self.users[i])
    }

    /// Label names present on every user.
    pub fn label_keys(&self) -> Vec<String> {
        self.users
            .first()
            .map(|u| u.labels.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Distinct values of a label, in category-id order.
    pub fn categories(&self, key: &str) -> Result<Vec<String>> {
        let mut values = BTreeSet::new();
        for u in &self.users {
            values.insert(self.raw_label(u, key)?);
        }
        let mut values: Vec<&str> = values.into_iter().collect();
        values.sort_by(|a, b| natural_cmp(a, b));
        Ok(values.into_iter().map(str::to_owned).collect())
    }

    /// Maps each user to a dense category id for `key`.
    pub fn category_ids(&self, key: &str) -> Result<Vec<u32>> {
        let cats = self.categories(key)?;
        let lookup: HashMap<&str, u32> = cats
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i as u32))
            .collect();
        self.users
            .iter()
            .map(|u| Ok(lookup[self.raw_label(u, key)?]))
            .collect()
    }

    fn raw_label<'a>(&self, u: &'a UserRecord, key: &str) -> Result<&'a str> {
        u.labels
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown label {key:?}")))
    }
}

/// Numeric order when both strings are integers, lexical otherwise, with
/// numbers before non-numbers.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_line(e: &csv::Error) -> u64 {
    e.position().map_or(0, |p| p.line())
}

/// Parses an events CSV. `path` is used only in error messages.
pub fn read_events<R: Read>(reader: R, path: &Path) -> Result<EventLog> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(path, csv_line(&e), e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "user_id" || &headers[1] != "item_id" {
        return Err(parse_error(path, 1, "expected header user_id,item_id"));
    }
    let mut events = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_error(path, csv_line(&e), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec[0].is_empty() || rec[1].is_empty() {
            return Err(parse_error(path, line, "empty user or item id"));
        }
        events.push((rec[0].to_owned(), rec[1].to_owned()));
    }
    Ok(EventLog::new(events))
}

/// Parses a users CSV. `path` is used only in error messages.
pub fn read_users<R: Read>(reader: R, path: &Path) -> Result<UserTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(path, csv_line(&e), e.to_string()))?
        .clone();
    if headers.is_empty() || &headers[0] != "user_id" {
        return Err(parse_error(path, 1, "first column must be user_id"));
    }
    let mut label_cols = Vec::new();
    let mut feature_cols = Vec::new();
    for (i, h) in headers.iter().enumerate().skip(1) {
        match h.strip_prefix(LABEL_PREFIX) {
            Some(key) if !key.is_empty() => label_cols.push((i, key.to_owned())),
            Some(_) => return Err(parse_error(path, 1, "empty label name")),
            None => feature_cols.push(i),
        }
    }
    if feature_cols.is_empty() {
        return Err(parse_error(path, 1, "no feature columns"));
    }
    let mut users = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_error(path, csv_line(&e), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let features = feature_cols
            .iter()
            .map(|&c| {
                let v: f64 = rec[c]
                    .parse()
                    .map_err(|_| parse_error(path, line, format!("bad number {:?} in {}", &rec[c], &headers[c])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_error(path, line, format!("non-finite value in {}", &headers[c])))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = label_cols
            .iter()
            .map(|(c, key)| (key.clone(), rec[*c].to_owned()))
            .collect();
        users.push(UserRecord {
            id: rec[0].to_owned(),
            features: FeatureVector::new(features),
            labels,
        });
    }
    UserTable::new(users).map_err(|e| match e {
        Error::InvalidArgument(m) => parse_error(path, 0, m),
        other => other,
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Loads both files and checks every event's user exists.
pub fn load(events_path: &Path, users_path: &Path) -> Result<(EventLog, UserTable)> {
    let log = read_events(open(events_path)?, events_path)?;
    let users = read_users(open(users_path)?, users_path)?;
    check_references(&log, &users)?;
    Ok((log, users))
}

/// Fails with the sorted list of unknown user ids, if any.
pub fn check_references(log: &EventLog, users: &UserTable) -> Result<()> {
    let missing: BTreeSet<&str> = log
        .events()
        .iter()
        .map(|(u, _)| u.as_str())
        .filter(|u| users.position(u).is_none())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::DanglingUsers(missing.into_iter().map(str::to_owned).collect()))
    }
}

/// Shuffles user positions and splits them `round(ratio·n)` / rest. Both
/// halves come back sorted.
pub fn split_users<R: Rng + ?Sized>(users: &UserTable, ratio: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("train ratio {ratio} outside (0, 1)")));
    }
    let n = users.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (ratio * n as f64).round() as usize;
    let mut test = order.split_off(n_train);
    order.sort_unstable();
    test.sort_unstable();
    Ok((order, test))
}

/// Shannon entropy (natural log) of a count histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Per-category exposure counts for every item, over all exposed users.
fn label_histograms<'a>(
    log: &'a EventLog,
    users: &UserTable,
    label_key: &str,
) -> Result<(BTreeMap<&'a str, Vec<usize>>, usize)> {
    check_references(log, users)?;
    let ids = users.category_ids(label_key)?;
    let arity = ids.iter().max().map_or(0, |&m| m as usize + 1);
    let mut hists: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (u, item) in log.events() {
        let cat = ids[users.position(u).expect("references checked")] as usize;
        hists.entry(item.as_str()).or_insert_with(|| vec![0; arity])[cat] += 1;
    }
    Ok((hists, arity))
}

/// Keeps items with at least `min_exposures` events, then the
/// `floor(keep_fraction·n)` of them whose label histogram has the lowest
/// entropy. Ties go to the smaller item id. Returned in ranking order.
pub fn filter_tasks(
    log: &EventLog,
    users: &UserTable,
    min_exposures: usize,
    keep_fraction: f64,
    label_key: &str,
) -> Result<Vec<String>> {
    if min_exposures == 0 {
        return Err(Error::Config("min_exposures must be at least 1".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let (hists, _) = label_histograms(log, users, label_key)?;
    let mut ranked: Vec<(f64, &str)> = hists
        .iter()
        .filter(|(_, h)| h.iter().sum::<usize>() >= min_exposures)
        .map(|(item, h)| (entropy(h), *item))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| natural_cmp(a.1, b.1)));
    let keep = (keep_fraction * ranked.len() as f64).floor() as usize;
    if keep == 0 {
        return Err(Error::NoSurvivors);
    }
    Ok(ranked[..keep].iter().map(|(_, item)| (*item).to_owned()).collect())
}

/// Most frequent category (nominal) and least frequent category with at
/// least one exposure (anomalous). Ties go to the smaller category id; when
/// every category is tied the anomalous side skips the nominal one.
pub fn label_from_histogram(hist: &[usize]) -> Option<(u32, u32)> {
    let present: Vec<(usize, usize)> = hist.iter().copied().enumerate().filter(|&(_, c)| c > 0).collect();
    if present.len() < 2 {
        return None;
    }
    // max_by_key/min_by_key keep the last/first extremum respectively.
    let nominal = present.iter().rev().max_by_key(|&&(_, c)| c)?.0;
    let anomalous = present
        .iter()
        .filter(|&&(cat, _)| cat != nominal)
        .min_by_key(|&&(_, c)| c)?
        .0;
    Some((nominal as u32, anomalous as u32))
}

/// Nominal and anomalous category ids of one item.
pub fn label_task(log: &EventLog, users: &UserTable, item: &str, label_key: &str) -> Result<(u32, u32)> {
    let (hists, _) = label_histograms(log, users, label_key)?;
    let hist = hists
        .get(item)
        .ok_or_else(|| Error::InvalidArgument(format!("item {item:?} has no exposures")))?;
    label_from_histogram(hist).ok_or_else(|| Error::NoAnomalousClass(item.to_owned()))
}

/// One task per retained item with the features of its exposed training
/// users; weights are the resulting sample shares. Samples carry the
/// category ids of `label_key`.
pub fn build_collection(
    log: &EventLog,
    users: &UserTable,
    retained: &[String],
    train_ids: &[usize],
    label_key: &str,
) -> Result<TaskCollection> {
    check_references(log, users)?;
    let cats = users.category_ids(label_key)?;
    let train: HashSet<usize> = train_ids.iter().copied().collect();
    let exposures = log.exposures();
    let tasks = retained
        .iter()
        .enumerate()
        .map(|(t, item)| {
            let members: Vec<usize> = exposures
                .get(item.as_str())
                .into_iter()
                .flatten()
                .map(|u| users.position(u).expect("references checked"))
                .filter(|p| train.contains(p))
                .collect();
            if members.is_empty() {
                return Err(Error::EmptyTask { task_id: t });
            }
            let samples = members.iter().map(|&p| users.users()[p].features.clone()).collect();
            let labels = members.iter().map(|&p| cats[p]).collect();
            Ok(TaskDataset::new(t, samples).with_labels(labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskCollection::from_tasks(tasks))
}

/// Settings for turning raw files into a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub label_key: String,
    pub min_exposures: usize,
    pub keep_fraction: f64,
    pub train_ratio: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            label_key: "age".into(),
            min_exposures: 100,
            keep_fraction: 0.5,
            train_ratio: 0.8,
        }
    }
}

/// Runs split, filtering, labeling and collection building.
///
/// Retained items whose exposed users all share one category have no
/// anomalous class; they are dropped and counted in `meta["dropped_single_category"]`.
/// The test pool holds every test user; a task's test set is restricted to
/// its exposed test users.
pub fn ingest<R: Rng + ?Sized>(log: &EventLog, users: &UserTable, cfg: &IngestConfig, rng: &mut R) -> Result<Benchmark> {
    let (train_ids, test_ids) = split_users(users, cfg.train_ratio, rng)?;
    let retained = filter_tasks(log, users, cfg.min_exposures, cfg.keep_fraction, &cfg.label_key)?;
    let (hists, arity) = label_histograms(log, users, &cfg.label_key)?;

    let mut items = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0usize;
    for item in retained {
        match label_from_histogram(&hists[item.as_str()]) {
            Some(l) => {
                items.push(item);
                labels.push(l);
            }
            None => {
                log::warn!("item {item}: single label category, dropped");
                dropped += 1;
            }
        }
    }
    if items.is_empty() {
        return Err(Error::NoSurvivors);
    }
    let train = build_collection(log, users, &items, &train_ids, &cfg.label_key)?;

    let cats = users.category_ids(&cfg.label_key)?;
    let pool_index: HashMap<usize, usize> = test_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let test = TestPool {
        samples: test_ids.iter().map(|&p| users.users()[p].features.clone()).collect(),
        categories: test_ids.iter().map(|&p| cats[p]).collect(),
    };
    let exposures = log.exposures();
    let task_tests = items
        .iter()
        .zip(&labels)
        .map(|(item, &(nominal, anomalous))| {
            let mut members: Vec<usize> = exposures[item.as_str()]
                .iter()
                .filter_map(|u| pool_index.get(&users.position(u).expect("references checked")).copied())
                .collect();
            members.sort_unstable();
            TaskTestSpec {
                nominal: vec![nominal],
                anomalous: vec![anomalous],
                members: Some(members),
            }
        })
        .collect();

    let meta = BTreeMap::from([
        ("source".to_owned(), "ingest".to_owned()),
        ("label".to_owned(), cfg.label_key.clone()),
        ("L".to_owned(), arity.to_string()),
        ("categories".to_owned(), users.categories(&cfg.label_key)?.join("|")),
        ("min_exposures".to_owned(), cfg.min_exposures.to_string()),
        ("keep_fraction".to_owned(), cfg.keep_fraction.to_string()),
        ("train_ratio".to_owned(), cfg.train_ratio.to_string()),
        ("users_train".to_owned(), train_ids.len().to_string()),
        ("users_test".to_owned(), test_ids.len().to_string()),
        ("dropped_single_category".to_owned(), dropped.to_string()),
    ]);
    Ok(Benchmark {
        train,
        test,
        task_tests,
        ground_truth_active: None,
        task_names: Some(items),
        meta,
    })
}

/// Convenience wrapper around [`load`] and [`ingest`].
pub fn ingest_files<R: Rng + ?Sized>(
    events_path: impl Into<PathBuf>,
    users_path: impl Into<PathBuf>,
    cfg: &IngestConfig,
    rng: &mut R,
) -> Result<Benchmark> {
    let (log, users) = load(&events_path.into(), &users_path.into())?;
    ingest(&log, &users, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn path() -> PathBuf {
        PathBuf::from("mem.csv")
    }

    fn user(id: &str, age: &str, x: f64) -> UserRecord {
        UserRecord {
            id: id.into(),
            features: FeatureVector::new(vec![x, -x]),
            labels: BTreeMap::from([("age".to_owned(), age.to_owned())]),
        }
    }

    /// Users `u0..u{n}` with the given age labels.
    fn table(ages: &[&str]) -> UserTable {
        UserTable::new(
            ages.iter()
                .enumerate()
                .map(|(i, a)| user(&format!("u{i}"), a, i as f64))
                .collect(),
        )
        .unwrap()
    }

    fn log(events: &[(&str, &str)]) -> EventLog {
        EventLog::new(events.iter().copied())
    }

    #[test]
    fn reads_small_files() {
        let events = "user_id,item_id\nu1,a\nu2,a\nu1,b\n";
        let users = "user_id,label:age,f_0,f_1\nu1,18,0.5,1\nu2,25,-1,2e-3\n";
        let log = read_events(events.as_bytes(), &path()).unwrap();
        let table = read_users(users.as_bytes(), &path()).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(table.len(), 2);
        assert_eq!(table.feature_dim(), 2);
        assert_eq!(table.get("u2").unwrap().features.as_slice(), &[-1.0, 0.002]);
        assert_eq!(table.label_keys(), vec!["age".to_owned()]);
        check_references(&log, &table).unwrap();
    }

    #[test]
    fn duplicate_events_collapse() {
        let log = read_events("user_id,item_id\nu1,a\nu1,a\n".as_bytes(), &path()).unwrap();
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn dangling_user_is_reported() {
        let l = log(&[("u0", "a"), ("ghost", "a"), ("ghost", "b"), ("zed", "b")]);
        match check_references(&l, &table(&["1"])) {
            Err(Error::DanglingUsers(ids)) => assert_eq!(ids, vec!["ghost", "zed"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let users = "user_id,label:age,f_0\nu1,18,0.5\nu2,25,oops\n";
        match read_users(users.as_bytes(), &path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_events("user,item\nu1,a\n".as_bytes(), &path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let t = table(&["1"; 10]);
        let (tr, te) = split_users(&t, 0.8, &mut seeded(3, 0)).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert!(tr.iter().all(|u| !te.contains(u)));
        assert_eq!(split_users(&t, 0.8, &mut seeded(3, 0)).unwrap(), (tr, te));
        let (a, b) = split_users(&table(&["1", "2"]), 0.5, &mut seeded(0, 0)).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split_users(&t, 1.0, &mut seeded(0, 0)).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[5, 0, 0]), 0.0);
        assert!((entropy(&[4, 4]) - 2f64.ln()).abs() < 1e-12);
        assert!((entropy(&[6, 2]) - 0.562_335).abs() < 1e-6);
    }

    /// Item `name` exposed to users `range` (as positions in the table).
    fn exposed(name: &'static str, users: std::ops::Range<usize>) -> Vec<(String, &'static str)> {
        users.map(|u| (format!("u{u}"), name)).collect()
    }

    #[test]
    fn filtering_threshold_and_entropy_rank() {
        // u0..u7: four of age 1, four of age 2; u8..u15: six of 1, two of 2.
        let mut ages = vec!["1"; 4];
        ages.extend(["2"; 4]);
        ages.extend(["1"; 6]);
        ages.extend(["2"; 2]);
        let t = table(&ages);
        let mut ev = exposed("even", 0..8);
        ev.extend(exposed("skew", 8..16));
        let l = EventLog::new(ev);
        assert_eq!(filter_tasks(&l, &t, 1, 0.5, "age").unwrap(), vec!["skew"]);
        assert_eq!(filter_tasks(&l, &t, 1, 1.0, "age").unwrap(), vec!["skew", "even"]);
        assert!(matches!(filter_tasks(&l, &t, 9, 1.0, "age"), Err(Error::NoSurvivors)));
        assert!(filter_tasks(&l, &t, 1, 0.5, "occupation").is_err());
    }

    #[test]
    fn below_threshold_item_dropped() {
        let t = table(&vec!["1"; 100]);
        let mut ev = exposed("small", 0..99);
        ev.extend(exposed("big", 0..100));
        let kept = filter_tasks(&EventLog::new(ev), &t, 100, 1.0, "age").unwrap();
        assert_eq!(kept, vec!["big"]);
    }

    #[test]
    fn filtering_ignores_row_order_and_breaks_ties_by_id() {
        let t = table(&["1", "1", "2"]);
        let ev = vec![("u0", "10"), ("u1", "9"), ("u2", "b"), ("u2", "a")];
        let mut rev = ev.clone();
        rev.reverse();
        let a = filter_tasks(&log(&ev), &t, 1, 1.0, "age").unwrap();
        let b = filter_tasks(&log(&rev), &t, 1, 1.0, "age").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec!["9", "10", "a", "b"]);
    }

    #[test]
    fn labeling_rules() {
        assert_eq!(label_from_histogram(&[5, 2, 1]), Some((0, 2)));
        assert_eq!(label_from_histogram(&[3, 3]), Some((0, 1)));
        assert_eq!(label_from_histogram(&[1, 0, 4, 0]), Some((2, 0)));
        assert_eq!(label_from_histogram(&[0, 7]), None);

        let t = table(&["1", "1", "1", "1", "1", "2", "2", "3"]);
        let l = EventLog::new(exposed("m", 0..8));
        assert_eq!(label_task(&l, &t, "m", "age").unwrap(), (0, 2));
        let solo = EventLog::new(exposed("s", 0..3));
        assert!(matches!(label_task(&solo, &t, "s", "age"), Err(Error::NoAnomalousClass(_))));
    }

    #[test]
    fn categories_sort_numerically() {
        let t = table(&["25", "3", "18", "3"]);
        assert_eq!(t.categories("age").unwrap(), vec!["3", "18", "25"]);
        assert_eq!(t.category_ids("age").unwrap(), vec![2, 0, 1, 0]);
    }

    #[test]
    fn collection_uses_train_users_only() {
        let t = table(&["1", "2", "1", "2"]);
        let l = log(&[("u0", "a"), ("u1", "a"), ("u2", "a"), ("u3", "b"), ("u3", "c")]);
        let c = build_collection(&l, &t, &["a".into(), "b".into()], &[0, 1, 2, 3], "age").unwrap();
        assert_eq!(c.weights(), vec![0.75, 0.25]);
        assert_eq!(c.num_tasks(), 2);
        let c = build_collection(&l, &t, &["a".into()], &[0, 2], "age").unwrap();
        let xs: Vec<f64> = c.tasks()[0].samples.iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![0.0, 2.0]);
        assert_eq!(c.tasks()[0].labels.as_deref(), Some(&[0, 0][..]));
        assert!(matches!(
            build_collection(&l, &t, &["b".into()], &[0], "age"),
            Err(Error::EmptyTask { task_id: 0 })
        ));
    }

    #[test]
    fn ingest_end_to_end() {
        let ages: Vec<String> = (0..40).map(|i| ((i % 3) + 1).to_string()).collect();
        let ages: Vec<&str> = ages.iter().map(String::as_str).collect();
        let t = table(&ages);
        let mut ev = exposed("mixed", 0..40);
        ev.extend(exposed("third", 0..20).into_iter().filter(|(u, _)| u != "u1"));
        // Every user here has age 1: no anomalous class.
        ev.extend((0..40).step_by(3).map(|u| (format!("u{u}"), "pure")));
        let l = EventLog::new(ev);
        let cfg = IngestConfig {
            min_exposures: 10,
            keep_fraction: 1.0,
            ..IngestConfig::default()
        };
        let b = ingest(&l, &t, &cfg, &mut seeded(5, 0)).unwrap();
        b.train.validate().unwrap();
        assert_eq!(b.task_names.as_ref().unwrap().len(), 2);
        assert_eq!(b.meta["dropped_single_category"], "1");
        assert_eq!(b.meta["L"], "3");
        assert_eq!(b.test.len(), 8);
        for (task, spec) in b.task_tests.iter().enumerate() {
            let members = spec.members.as_ref().unwrap();
            assert!(members.windows(2).all(|w| w[0] < w[1]));
            let (nom, anom) = b.test_split(task);
            assert!(nom.len() + anom.len() <= members.len());
        }
        let again = ingest(&l, &t, &cfg, &mut seeded(5, 0)).unwrap();
        assert_eq!(b, again);
    }
}
