//! Descriptor databases, retrieval recall and the ablation runner.
//!
//! Database files start with `GDB1`, then little-endian `u32` entry count,
//! `u32` dimension and per entry a `u64` place id followed by `dim` `f32`
//! values.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::config::KvConfig;
use crate::dataio::{distance2, PlaceDataset, ScanRef};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::training::{train, TrainConfig};

pub const TRUE_POSITIVE_RADIUS_M: f64 = 25.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub place: u64,
    pub position: [f64; 2],
    pub descriptor: Vec<f32>,
}

/// Ordered descriptor entries of uniform dimension.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DescriptorDb {
    pub dim: usize,
    pub entries: Vec<DbEntry>,
}

impl DescriptorDb {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: DbEntry) -> Result<()> {
        if entry.descriptor.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "descriptor of dimension {} in a {}-d database",
                entry.descriptor.len(),
                self.dim
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Errors on a repeated place id.
    pub fn check_unique_ids(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.entries.iter().map(|e| e.place).collect();
        ids.sort_unstable();
        match ids.windows(2).find(|w| w[0] == w[1]) {
            Some(w) => Err(Error::InvalidInput(format!("place id {} appears twice in the database", w[0]))),
            None => Ok(()),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"GDB1")?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.place.to_le_bytes())?;
            for v in &e.descriptor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.entries.len() * (8 + 4 * self.dim));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads entries; positions are unknown to the file and set to zero.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| Error::format("GDB1", "truncated header"))?;
        if &head[..4] != b"GDB1" {
            return Err(Error::format("GDB1", "bad magic"));
        }
        let count = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
        let mut db = Self::new(dim);
        let mut buf = vec![0u8; 8 + 4 * dim];
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format("GDB1", format!("truncated at entry {i} of {count}")))?;
            let place = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
            let descriptor = buf[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            db.entries.push(DbEntry {
                place,
                position: [0.0, 0.0],
                descriptor,
            });
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Fills positions from the dataset's place positions.
    pub fn attach_positions(&mut self, dataset: &PlaceDataset) -> Result<()> {
        for e in &mut self.entries {
            let place = dataset
                .places
                .iter()
                .find(|p| p.id == e.place)
                .ok_or_else(|| Error::InvalidInput(format!("place {} is not in the dataset", e.place)))?;
            e.position = place.position;
        }
        Ok(())
    }
}

/// One inference-mode descriptor per scan, in scan order.
pub fn build_db<T: Scalar>(model: &Model<T>, scans: &[ScanRef<'_>]) -> Result<DescriptorDb> {
    let descs = scans
        .par_iter()
        .map(|s| model.descriptor(s.cloud))
        .collect::<Result<Vec<_>>>()?;
    let mut db = DescriptorDb::new(model.config.aggregation.output_dim);
    for (s, d) in scans.iter().zip(descs) {
        db.push(DbEntry {
            place: s.place,
            position: s.position,
            descriptor: d.iter().map(|v| v.as_f64() as f32).collect(),
        })?;
    }
    Ok(db)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    /// `recall_at[n - 1]` is recall@n for `n` in `1..=|db|`.
    pub recall_at: Vec<f64>,
    pub ar_at_1: f64,
    pub ar_at_1pct: f64,
    /// `⌈0.01·|db|⌉`.
    pub one_percent_n: usize,
    pub queries: usize,
    /// Queries without any true positive in the database.
    pub skipped: usize,
}

impl RecallReport {
    pub fn recall(&self, n: usize) -> f64 {
        assert!(n >= 1, "recall@0 is undefined");
        *self.recall_at.get(n - 1).or(self.recall_at.last()).unwrap_or(&0.0)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "queries evaluated  {}", self.queries).expect("string write");
        writeln!(s, "queries skipped    {}", self.skipped).expect("string write");
        writeln!(s, "AR@1               {:.4}", self.ar_at_1).expect("string write");
        writeln!(s, "AR@1% (N={:<3})     {:.4}", self.one_percent_n, self.ar_at_1pct).expect("string write");
        for n in [1usize, 5, 10, 25] {
            if n <= self.recall_at.len() {
                writeln!(s, "recall@{n:<3}         {:.4}", self.recall(n)).expect("string write");
            }
        }
        s
    }

    /// One `N<TAB>recall` line per `N`.
    pub fn records(&self) -> String {
        self.recall_at
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}\t{r:.6}\n", i + 1))
            .collect()
    }
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Ranks database entries by ascending distance, ties broken by place id
/// then entry index, and records the first true-positive rank per query.
pub fn evaluate(db: &DescriptorDb, queries: &[DbEntry], radius: f64) -> Result<RecallReport> {
    if db.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate against an empty database".into()));
    }
    let first_hits: Vec<Option<usize>> = queries
        .par_iter()
        .map(|q| {
            if q.descriptor.len() != db.dim {
                return Err(Error::InvalidInput(format!(
                    "query of dimension {} against a {}-d database",
                    q.descriptor.len(),
                    db.dim
                )));
            }
            let truth: Vec<bool> = db.entries.iter().map(|e| distance2(e.position, q.position) <= radius).collect();
            if !truth.iter().any(|&t| t) {
                return Ok(None);
            }
            let mut ranked: Vec<(f64, u64, usize)> = db
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| (squared_distance(&q.descriptor, &e.descriptor), e.place, i))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            Ok(ranked.iter().position(|&(_, _, i)| truth[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    let hits: Vec<usize> = first_hits.iter().flatten().copied().collect();
    let evaluated = hits.len();
    let mut counts = vec![0usize; db.len()];
    for &r in &hits {
        counts[r] += 1;
    }
    let mut cum = 0;
    let recall_at: Vec<f64> = counts
        .iter()
        .map(|&c| {
            cum += c;
            if evaluated == 0 {
                0.0
            } else {
                cum as f64 / evaluated as f64
            }
        })
        .collect();
    let one_percent_n = ((0.01 * db.len() as f64).ceil() as usize).max(1);
    Ok(RecallReport {
        ar_at_1: recall_at[0],
        ar_at_1pct: recall_at[one_percent_n - 1],
        one_percent_n,
        recall_at,
        queries: evaluated,
        skipped: queries.len() - evaluated,
    })
}

/// Which traversals serve as database, queries and training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub db_traversals: Vec<u32>,
    pub query_traversals: Vec<u32>,
    pub train_traversals: Vec<u32>,
    pub radius: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            db_traversals: vec![0],
            query_traversals: vec![1, 2, 3],
            train_traversals: vec![0, 4, 5],
            radius: TRUE_POSITIVE_RADIUS_M,
        }
    }
}

impl Protocol {
    /// Applies `eval.*` keys.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut p = Self::default();
        if let Some(v) = kv.take_list("eval.db_traversals")? {
            p.db_traversals = v;
        }
        if let Some(v) = kv.take_list("eval.query_traversals")? {
            p.query_traversals = v;
        }
        if let Some(v) = kv.take_list("eval.train_traversals")? {
            p.train_traversals = v;
        }
        kv.take_into("eval.radius", &mut p.radius)?;
        if p.query_traversals.iter().any(|t| p.train_traversals.contains(t)) {
            return Err(Error::Config("query traversals must not be used for training".into()));
        }
        Ok(p)
    }
}

/// Builds the database and query descriptors and evaluates them.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, dataset: &PlaceDataset, protocol: &Protocol) -> Result<RecallReport> {
    let mut db = build_db(model, &dataset.scans(Some(&protocol.db_traversals)))?;
    db.attach_positions(dataset)?;
    let mut queries = build_db(model, &dataset.scans(Some(&protocol.query_traversals)))?;
    queries.attach_positions(dataset)?;
    evaluate(&db, &queries.entries, protocol.radius)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub report: RecallReport,
    pub final_loss: f64,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = String::from("variant\tAR@1\tAR@1%\tfinal_loss\tparameters\n");
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{:.4}\t{:.4}\t{:.6}\t{}",
                r.name, r.report.ar_at_1, r.report.ar_at_1pct, r.final_loss, r.parameters
            )
            .expect("string write");
        }
        s
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Trains and evaluates each named variant from the same seeds.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &PlaceDataset,
    protocol: &Protocol,
    variants: &[String],
    init_seed: u64,
    mut progress: impl FnMut(&str, &crate::training::EpochRecord),
) -> Result<AblationReport> {
    let configs = variants
        .iter()
        .map(|v| base.ablation(v).map(|c| (v.clone(), c)))
        .collect::<Result<Vec<_>>>()?;
    let train_scans = dataset.scans(Some(&protocol.train_traversals));
    let mut report = AblationReport::default();
    for (name, cfg) in configs {
        let mut model = Model::<f64>::new(cfg, init_seed)?;
        let log = train(&mut model, &train_scans, train_cfg, |r| progress(&name, r))?;
        let rec = evaluate_model(&model, dataset, protocol)?;
        report.rows.push(AblationRow {
            name,
            report: rec,
            final_loss: log.log.last().map_or(0.0, |r| r.loss),
            parameters: model.params.trainable_scalars(),
        });
    }
    Ok(report)
}
