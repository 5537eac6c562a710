//! A loaded DAG plus its instance collection, shared by the CLI and server.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use crate::dag::AbstractionDag;
use crate::error::{IngestError, MetricError, SessionError};
use crate::ingest::{
    parse_hierarchy, parse_instances, parse_truth, EvidenceKind, HierarchyFormat, InstanceOptions, InstanceRecord,
    OutputMapping, Truths,
};
use crate::metrics::{
    self, acc_at_k, accuracy_alignment, concept_confusion, group_by_concept, subgraph_preference,
    uncertainty_alignment, ConfusionOptions, ConfusionReport, EntropyBase, LevelSummary, MetricReport,
    PairMode, PairSelection, PreferenceOptions,
};
use crate::propagate::{propagate_all, PropagationMode, WeightedDag};
use crate::query::{filter_instances, FilterResult, PatternQuery, QueryDefaults};
use crate::SubgraphSelector;

#[derive(Clone, Debug, Default)]
pub struct SessionConfig {
    pub dag_path: PathBuf,
    /// Detected from the extension when `None`.
    pub dag_format: Option<HierarchyFormat>,
    pub instances_path: Option<PathBuf>,
    pub kind: Option<EvidenceKind>,
    pub mapping_path: Option<PathBuf>,
    pub truth_path: Option<PathBuf>,
    pub mode: PropagationMode,
    pub normalized: bool,
    /// Directory for persisted weighted DAGs, keyed by input hash.
    pub cache_dir: Option<PathBuf>,
}

pub struct Session {
    dag: AbstractionDag,
    records: Vec<InstanceRecord>,
    truths: Option<Truths>,
    mode: PropagationMode,
    by_id: HashMap<String, usize>,
    cache_file: Option<PathBuf>,
    weighted: OnceLock<Vec<WeightedDag>>,
}

fn read(path: &Path) -> Result<Vec<u8>, SessionError> {
    fs::read(path).map_err(|source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ingest_err(path: &Path) -> impl FnOnce(IngestError) -> SessionError + '_ {
    move |source| SessionError::Ingest {
        path: path.to_path_buf(),
        source,
    }
}

fn utf8<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a str, SessionError> {
    std::str::from_utf8(bytes).map_err(|e| SessionError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

impl Session {
    pub fn load(config: &SessionConfig) -> Result<Self, SessionError> {
        let mut hasher = Sha256::new();
        let dag_bytes = read(&config.dag_path)?;
        hasher.update(&dag_bytes);
        let format = match config.dag_format {
            Some(f) => f,
            None => HierarchyFormat::detect(&config.dag_path).map_err(ingest_err(&config.dag_path))?,
        };
        let dag = parse_hierarchy(utf8(&dag_bytes, &config.dag_path)?, format)
            .and_then(|p| p.build())
            .map_err(ingest_err(&config.dag_path))?;

        let mapping = match &config.mapping_path {
            Some(path) => {
                let bytes = read(path)?;
                hasher.update(b"\0mapping\0");
                hasher.update(&bytes);
                OutputMapping::parse(utf8(&bytes, path)?, &dag).map_err(ingest_err(path))?
            }
            None => OutputMapping::ByName,
        };

        let records = match &config.instances_path {
            Some(path) => {
                let bytes = read(path)?;
                hasher.update(b"\0instances\0");
                hasher.update(&bytes);
                let options = InstanceOptions {
                    kind: config.kind,
                    normalized: config.normalized,
                };
                parse_instances(bytes.as_slice(), &dag, mapping, options).map_err(ingest_err(path))?
            }
            None => Vec::new(),
        };

        let truths = match &config.truth_path {
            Some(path) => {
                let bytes = read(path)?;
                Some(parse_truth(bytes.as_slice(), &dag).map_err(ingest_err(path))?)
            }
            None => None,
        };

        hasher.update(format!("\0{}\0{:?}\0{}", config.mode, config.kind, config.normalized).as_bytes());
        let cache_file = match (&config.cache_dir, &config.instances_path) {
            (Some(dir), Some(_)) => Some(dir.join(format!("{}.jsonl", hex::encode(hasher.finalize())))),
            _ => None,
        };

        let mut session = Session::from_parts(dag, records, truths, config.mode);
        session.cache_file = cache_file;
        Ok(session)
    }

    /// Builds a session from already parsed inputs; truth labels are copied
    /// onto matching records.
    pub fn from_parts(
        dag: AbstractionDag,
        mut records: Vec<InstanceRecord>,
        truths: Option<Truths>,
        mode: PropagationMode,
    ) -> Self {
        if let Some(t) = &truths {
            for r in &mut records {
                if r.truth.is_none() {
                    r.truth = t.get(&r.instance_id);
                }
            }
        }
        let by_id = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.instance_id.clone(), i))
            .collect();
        Session {
            dag,
            records,
            truths,
            mode,
            by_id,
            cache_file: None,
            weighted: OnceLock::new(),
        }
    }

    pub fn dag(&self) -> &AbstractionDag {
        &self.dag
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn record(&self, instance_id: &str) -> Option<&InstanceRecord> {
        self.by_id.get(instance_id).map(|&i| &self.records[i])
    }

    pub fn truths(&self) -> Option<&Truths> {
        self.truths.as_ref()
    }

    pub fn mode(&self) -> PropagationMode {
        self.mode
    }

    /// Evidence kind of the first record, if any.
    pub fn evidence_kind(&self) -> Option<EvidenceKind> {
        self.records.first().map(|r| r.evidence.kind())
    }

    pub fn warnings(&self) -> Vec<String> {
        self.mode.warning(&self.dag).into_iter().collect()
    }

    /// Propagated collection, in input order. Computed once.
    pub fn weighted(&self) -> &[WeightedDag] {
        self.weighted.get_or_init(|| {
            if let Some(path) = &self.cache_file {
                if let Some(cached) = self.read_cache(path) {
                    return cached;
                }
            }
            let wds = propagate_all(&self.dag, &self.records, self.mode);
            if let Some(path) = &self.cache_file {
                // a failed write only costs a recompute next time
                let _ = self.write_cache(path, &wds);
            }
            wds
        })
    }

    pub fn weighted_by_id(&self, instance_id: &str) -> Option<&WeightedDag> {
        self.by_id.get(instance_id).map(|&i| &self.weighted()[i])
    }

    fn read_cache(&self, path: &Path) -> Option<Vec<WeightedDag>> {
        let file = fs::File::open(path).ok()?;
        let mut out = Vec::with_capacity(self.records.len());
        for line in std::io::BufReader::new(file).lines() {
            out.push(WeightedDag::from_json_line(&line.ok()?, &self.dag).ok()?);
        }
        let matches = out.len() == self.records.len()
            && out.iter().zip(&self.records).all(|(w, r)| w.instance_id == r.instance_id);
        matches.then_some(out)
    }

    fn write_cache(&self, path: &Path, wds: &[WeightedDag]) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        for wd in wds {
            writeln!(w, "{}", wd.to_json_line(&self.dag))?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(tmp, path)
    }

    /// Whether a cache file exists for the current inputs.
    pub fn cache_file(&self) -> Option<&Path> {
        self.cache_file.as_deref()
    }

    fn require_truths(&self, what: &str) -> Result<&Truths, SessionError> {
        self.truths
            .as_ref()
            .ok_or_else(|| SessionError::Config(format!("{what} needs ground-truth labels")))
    }

    fn with_groups<F>(&self, mut report: MetricReport, group_by: Option<u32>, metric: F) -> Result<MetricReport, SessionError>
    where
        F: FnMut(&[&WeightedDag]) -> Result<MetricReport, MetricError>,
    {
        if let Some(level) = group_by {
            let truths = self.require_truths("grouping")?;
            let (groups, ungrouped) = group_by_concept(self.weighted(), &self.dag, truths, level, metric)?;
            report.params.insert("group_by".into(), level.to_string());
            if ungrouped > 0 {
                report.flags.push(format!("{ungrouped} instances have no concept at level {level}"));
            }
            report.groups = groups;
        }
        Ok(report)
    }

    pub fn uncertainty(&self, from: u32, to: u32, base: EntropyBase, group_by: Option<u32>) -> Result<MetricReport, SessionError> {
        let report = uncertainty_alignment(self.weighted(), &self.dag, from, to, base)?;
        self.with_groups(report, group_by, |members| {
            uncertainty_alignment(members, &self.dag, from, to, base)
        })
    }

    pub fn accuracy(&self, from: u32, to: u32, group_by: Option<u32>) -> Result<MetricReport, SessionError> {
        let truths = self.require_truths("accuracy")?;
        let report = accuracy_alignment(self.weighted(), &self.dag, truths, from, to)?;
        self.with_groups(report, group_by, |members| {
            accuracy_alignment(members, &self.dag, truths, from, to)
        })
    }

    pub fn preference(
        &self,
        left: &SubgraphSelector,
        right: &SubgraphSelector,
        options: PreferenceOptions,
    ) -> Result<MetricReport, SessionError> {
        Ok(subgraph_preference(self.weighted(), &self.dag, left, right, options, self.truths.as_ref())?)
    }

    pub fn confusion(&self, selection: &PairSelection, options: ConfusionOptions) -> Result<ConfusionReport, SessionError> {
        let mut report = concept_confusion(self.weighted(), &self.dag, selection, options)?;
        if options.pair_mode == PairMode::Raw && self.evidence_kind() == Some(EvidenceKind::Labels) {
            report
                .flags
                .push("raw pair entropy on label counts above 1 can be negative; normalized mode is advised".into());
        }
        Ok(report)
    }

    pub fn acc_at_k(&self, k: usize) -> Result<MetricReport, SessionError> {
        let truths = self.require_truths("acc@k")?;
        Ok(acc_at_k(&self.records, truths, k)?)
    }

    pub fn query(&self, text: &str) -> Result<FilterResult, SessionError> {
        self.query_with(text, QueryDefaults::default())
    }

    pub fn query_with(&self, text: &str, defaults: QueryDefaults) -> Result<FilterResult, SessionError> {
        let query = PatternQuery::parse_with(text, &self.dag, defaults)?;
        Ok(filter_instances(&query, self.weighted(), &self.dag))
    }

    pub fn levels(&self, base: EntropyBase) -> Vec<LevelSummary> {
        metrics::level_summaries(self.weighted(), &self.dag, base)
    }
}
