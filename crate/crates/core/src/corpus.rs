//! Datasets, deterministic partitioning, demonstration sampling and the
//! provenance-tracked pseudolabel store.
//!
//! On disk a dataset is line-delimited JSON, one example per line, with the
//! pseudolabel history inlined:
//!
//! ```text
//! {"id":"000003","input":"list the fares","gold":"O O O","labels":[{"output":"O O O","producer":"teacher","stage":0,"raw":"list O the O fares O"}]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split a whitespace-tokenized input into words.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

impl Example {
    pub fn new(id: impl Into<String>, input: impl Into<String>, gold: Option<String>) -> Self {
        Example {
            id: id.into(),
            input: input.into(),
            gold,
        }
    }

    pub fn words(&self) -> Vec<&str> {
        words(&self.input)
    }
}

/// A model-generated output with its provenance.
///
/// Stage 0 is the teacher; stage `i >= 1` labels come from the students of
/// the i-th intermediate stage. A label that could not be produced carries a
/// `failure` reason and an empty `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pseudolabel {
    pub output: String,
    pub producer: String,
    pub stage: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Pseudolabel {
    pub fn new(output: impl Into<String>, producer: impl Into<String>, stage: u32) -> Self {
        let output = output.into();
        Pseudolabel {
            raw: output.clone(),
            output,
            producer: producer.into(),
            stage,
            confidence: None,
            failure: None,
        }
    }

    pub fn failed(producer: impl Into<String>, stage: u32, reason: impl Into<String>) -> Self {
        Pseudolabel {
            output: String::new(),
            producer: producer.into(),
            stage,
            confidence: None,
            raw: String::new(),
            failure: Some(reason.into()),
        }
    }

    pub fn with_raw(mut self, raw: impl Into<String>) -> Self {
        self.raw = raw.into();
        self
    }

    pub fn with_confidence(mut self, confidence: Option<f64>) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataFormat {
    #[serde(rename = "parse-jsonl")]
    ParseJsonl,
    #[serde(rename = "slot-jsonl")]
    SlotJsonl,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parse-jsonl" | "parse" => Ok(DataFormat::ParseJsonl),
            "slot-jsonl" | "slot" => Ok(DataFormat::SlotJsonl),
            other => Err(Error::config(format!("unknown data format `{other}`"))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataFormat::ParseJsonl => f.write_str("parse-jsonl"),
            DataFormat::SlotJsonl => f.write_str("slot-jsonl"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<Pseudolabel>,
}

/// An ordered collection of examples plus their pseudolabel histories.
///
/// Datasets are values: attaching labels returns a new version and leaves
/// the receiver untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    examples: Vec<Example>,
    pseudolabels: BTreeMap<String, Vec<Pseudolabel>>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if ex.input.trim().is_empty() {
                return Err(Error::validation(format!("example `{}` has an empty input", ex.id)));
            }
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate example id `{}`", ex.id)));
            }
        }
        Ok(Dataset {
            name: name.into(),
            examples,
            pseudolabels: BTreeMap::new(),
            index,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Dataset {
            name: name.into(),
            examples: Vec::new(),
            pseudolabels: BTreeMap::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Full label history of an example, ordered by stage.
    pub fn labels(&self, id: &str) -> &[Pseudolabel] {
        self.pseudolabels.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Latest label recorded for `id` at exactly `stage`.
    pub fn label_at(&self, id: &str, stage: u32) -> Option<&Pseudolabel> {
        self.labels(id).iter().rev().find(|l| l.stage == stage)
    }

    pub fn max_stage(&self, id: &str) -> Option<u32> {
        self.labels(id).last().map(|l| l.stage)
    }

    /// True when every example carries a label (possibly a failure) at `stage`.
    pub fn has_stage(&self, stage: u32) -> bool {
        !self.is_empty() && self.ids().all(|id| self.label_at(id, stage).is_some())
    }

    /// Copy of the dataset with every gold field removed.
    pub fn without_gold(&self) -> Dataset {
        let mut out = self.clone();
        for ex in &mut out.examples {
            ex.gold = None;
        }
        out
    }

    /// Sub-dataset restricted to `ids`, keeping the original order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        let examples: Vec<Example> = self
            .examples
            .iter()
            .filter(|e| ids.contains(&e.id))
            .cloned()
            .collect();
        let mut out = Dataset::new(self.name.clone(), examples).expect("subset of a valid dataset");
        out.pseudolabels = self
            .pseudolabels
            .iter()
            .filter(|(id, _)| ids.contains(*id))
            .map(|(id, l)| (id.clone(), l.clone()))
            .collect();
        out
    }

    /// Append provenance-tagged labels, returning the new version.
    ///
    /// Histories are append-only: a label whose stage is below the latest
    /// stage already recorded for that id is rejected.
    pub fn attach(&self, labels: impl IntoIterator<Item = (String, Pseudolabel)>) -> Result<Dataset> {
        let mut out = self.clone();
        out.attach_in_place(labels)?;
        Ok(out)
    }

    pub(crate) fn attach_in_place(
        &mut self,
        labels: impl IntoIterator<Item = (String, Pseudolabel)>,
    ) -> Result<()> {
        let labels: Vec<(String, Pseudolabel)> = labels.into_iter().collect();
        // validate everything before touching the history
        let mut pending: HashMap<&str, u32> = HashMap::new();
        for (id, label) in &labels {
            if !self.contains(id) {
                return Err(Error::validation(format!("unknown example id `{id}`")));
            }
            if let Some(c) = label.confidence {
                if !(c <= 0.0) {
                    return Err(Error::validation(format!(
                        "confidence for `{id}` must be a log-probability <= 0, got {c}"
                    )));
                }
            }
            let floor = pending
                .get(id.as_str())
                .copied()
                .or_else(|| self.max_stage(id));
            if let Some(floor) = floor {
                if label.stage < floor {
                    return Err(Error::validation(format!(
                        "stage regression for `{id}`: stage {} after stage {floor}",
                        label.stage
                    )));
                }
            }
            pending.insert(id.as_str(), label.stage);
        }
        for (id, label) in labels {
            self.pseudolabels.entry(id).or_default().push(label);
        }
        Ok(())
    }

    /// Attach one output per id with shared provenance.
    pub fn attach_pseudolabels(
        &self,
        labels: &BTreeMap<String, String>,
        producer: &str,
        stage: u32,
    ) -> Result<Dataset> {
        self.attach(
            labels
                .iter()
                .map(|(id, out)| (id.clone(), Pseudolabel::new(out.clone(), producer, stage))),
        )
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ex in &self.examples {
            let rec = Record {
                id: Some(ex.id.clone()),
                input: ex.input.clone(),
                gold: ex.gold.clone(),
                labels: self.labels(&ex.id).to_vec(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(name: &str, reader: R, format: DataFormat, origin: &Path) -> Result<Self> {
        let mut examples = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let load_err = |message: String| Error::Load {
                path: origin.to_path_buf(),
                line: lineno,
                message,
            };
            let rec: Record = serde_json::from_str(&line).map_err(|e| load_err(e.to_string()))?;
            let id = rec.id.unwrap_or_else(|| format!("{:06}", lineno - 1));
            if rec.input.trim().is_empty() {
                return Err(load_err("empty input".into()));
            }
            if let (DataFormat::SlotJsonl, Some(gold)) = (format, rec.gold.as_deref()) {
                let (n_words, n_tags) = (words(&rec.input).len(), words(gold).len());
                if n_words != n_tags {
                    return Err(load_err(format!(
                        "gold has {n_tags} tags for {n_words} input words"
                    )));
                }
            }
            for l in rec.labels {
                labels.push((id.clone(), l));
            }
            examples.push(Example {
                id,
                input: rec.input,
                gold: rec.gold,
            });
        }
        let mut ds = Dataset::new(name, examples)?;
        ds.attach_in_place(labels)?;
        Ok(ds)
    }
}

/// Load a line-delimited dataset file.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let reader = BufReader::new(File::open(path)?);
    Dataset::read_jsonl(&name, reader, format, path)
}

/// The two disjoint halves of the unlabeled pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPair {
    pub seed: u64,
    pub ids_a: BTreeSet<String>,
    pub ids_b: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

impl PartitionPair {
    pub fn side_of(&self, id: &str) -> Option<Side> {
        if self.ids_a.contains(id) {
            Some(Side::A)
        } else if self.ids_b.contains(id) {
            Some(Side::B)
        } else {
            None
        }
    }

    pub fn ids(&self, side: Side) -> &BTreeSet<String> {
        match side {
            Side::A => &self.ids_a,
            Side::B => &self.ids_b,
        }
    }
}

/// Split the dataset's ids randomly and evenly into two sides.
///
/// The sorted id list is shuffled with a ChaCha8 stream seeded by `seed`
/// and cut at `ceil(n / 2)`, so membership depends only on the seed and the
/// id set.
pub fn partition(dataset: &Dataset, seed: u64) -> Result<PartitionPair> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot partition an empty dataset"));
    }
    let mut ids: Vec<String> = dataset.ids().map(str::to_string).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let cut = ids.len().div_ceil(2);
    let ids_b = ids.split_off(cut).into_iter().collect();
    Ok(PartitionPair {
        seed,
        ids_a: ids.into_iter().collect(),
        ids_b,
    })
}

/// Draw `k` distinct gold-labeled examples uniformly without replacement.
pub fn sample_demonstrations(labeled: &Dataset, k: usize, seed: u64) -> Result<Vec<Example>> {
    let mut pool: Vec<&Example> = labeled.examples().iter().filter(|e| e.gold.is_some()).collect();
    if k > pool.len() {
        return Err(Error::validation(format!(
            "requested {k} demonstrations but only {} gold-labeled examples are available",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = pool.partial_shuffle(&mut rng, k);
    Ok(chosen.iter().map(|e| (*e).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(ids: &[&str]) -> Dataset {
        Dataset::new(
            "t",
            ids.iter()
                .map(|id| Example::new(*id, "x y", Some("O O".into())))
                .collect(),
        )
        .unwrap()
    }

    fn read(text: &str, format: DataFormat) -> Result<Dataset> {
        Dataset::read_jsonl("t", text.as_bytes(), format, Path::new("mem.jsonl"))
    }

    #[test]
    fn loads_minimal_record() {
        let d = read(r#"{"id":"a","input":"x y","gold":"(x)(y)"}"#, DataFormat::ParseJsonl).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.get("a").unwrap().gold.as_deref(), Some("(x)(y)"));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(read("", DataFormat::SlotJsonl).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "{\"id\":\"a\",\"input\":\"x\"}\n{\"id\":\"a\",\"input\":\"y\"}\n";
        assert!(matches!(read(text, DataFormat::ParseJsonl), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "{\"id\":\"a\",\"input\":\"x\"}\n{not json\n";
        match read(text, DataFormat::ParseJsonl) {
            Err(Error::Load { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn missing_ids_become_padded_line_indices() {
        let text = "{\"input\":\"x\"}\n{\"input\":\"y\"}\n";
        let d = read(text, DataFormat::ParseJsonl).unwrap();
        assert_eq!(d.ids().collect::<Vec<_>>(), vec!["000000", "000001"]);
    }

    #[test]
    fn slot_gold_length_checked() {
        let text = r#"{"id":"a","input":"x y","gold":"O"}"#;
        assert!(matches!(read(text, DataFormat::SlotJsonl), Err(Error::Load { line: 1, .. })));
    }

    #[test]
    fn partition_even_split() {
        let p = partition(&ds(&["a", "b", "c", "d"]), 7).unwrap();
        assert_eq!((p.ids_a.len(), p.ids_b.len()), (2, 2));
        assert!(p.ids_a.is_disjoint(&p.ids_b));

        let p = partition(&ds(&["a", "b", "c", "d", "e"]), 3).unwrap();
        assert_eq!(p.ids_a.len() + p.ids_b.len(), 5);
        assert!(p.ids_a.len().abs_diff(p.ids_b.len()) <= 1);
    }

    #[test]
    fn partition_of_empty_fails() {
        assert!(partition(&Dataset::empty("e"), 1).is_err());
    }

    #[test]
    fn partition_ignores_input_order() {
        let p1 = partition(&ds(&["a", "b", "c", "d", "e"]), 11).unwrap();
        let p2 = partition(&ds(&["e", "d", "c", "b", "a"]), 11).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn demonstrations() {
        let ids: Vec<String> = (0..50).map(|i| format!("{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let d = ds(&refs);
        let demos = sample_demonstrations(&d, 30, 5).unwrap();
        let distinct: BTreeSet<_> = demos.iter().map(|e| e.id.clone()).collect();
        assert_eq!(distinct.len(), 30);
        assert_eq!(demos, sample_demonstrations(&d, 30, 5).unwrap());

        let all = sample_demonstrations(&d, 50, 5).unwrap();
        assert_eq!(all.iter().map(|e| &e.id).collect::<BTreeSet<_>>().len(), 50);

        let small = ds(&refs[..30]);
        match sample_demonstrations(&small, 31, 0) {
            Err(Error::Validation(msg)) => assert!(msg.contains("31") && msg.contains("30")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn attach_is_append_only() {
        let d = ds(&["a", "b"]);
        let all: BTreeMap<String, String> =
            [("a", "O O"), ("b", "O O")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let d0 = d.attach_pseudolabels(&all, "teacher", 0).unwrap();
        assert!(d0.ids().all(|id| d0.labels(id).len() == 1));
        assert!(d.labels("a").is_empty(), "receiver must be untouched");

        let one: BTreeMap<String, String> = [("a".to_string(), "B-x O".to_string())].into();
        let d1 = d0.attach_pseudolabels(&one, "s", 1).unwrap();
        let stages: Vec<u32> = d1.labels("a").iter().map(|l| l.stage).collect();
        assert_eq!(stages, vec![0, 1]);
        assert_eq!(d1.labels("a")[0], d0.labels("a")[0]);

        assert!(matches!(
            d1.attach_pseudolabels(&one, "teacher", 0),
            Err(Error::Validation(m)) if m.contains("regression")
        ));
        let ghost: BTreeMap<String, String> = [("zz".to_string(), "O".to_string())].into();
        assert!(d1.attach_pseudolabels(&ghost, "s", 2).is_err());
    }

    #[test]
    fn positive_confidence_rejected() {
        let d = ds(&["a"]);
        let l = Pseudolabel::new("O O", "s", 1).with_confidence(Some(0.5));
        assert!(d.attach([("a".to_string(), l)]).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let d = ds(&["a", "b"]);
        let l = Pseudolabel::new("O O", "teacher", 0).with_raw("x O y O");
        let d = d
            .attach([
                ("a".to_string(), l),
                ("b".to_string(), Pseudolabel::failed("teacher", 0, "timeout")),
            ])
            .unwrap();
        let text = d.to_jsonl();
        let back = read(&text, DataFormat::SlotJsonl).unwrap();
        assert_eq!(back, Dataset { name: "t".into(), ..d });
        assert_eq!(back.to_jsonl(), text);
    }
}
