//! Configuration-driven analysis runs: validation, the full per-depth report
//! and the simulated-dataset round trip.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::did::{
    did_placebo, fit_did, parallel_trends_test, regression_table, trends_table, DidError, DidFit, DidSample, DidSpec,
    SeType, TrendTest,
};
use crate::inference::{
    donor_placebo_fits, in_time_placebo, permutation_envelope, rmspe_ratio_test, InferenceError, PermutationEnvelope,
    PlaceboFit, RatioTest,
};
use crate::panel::{
    descriptive_stats, load_panel, validate_panel_files, IngestConfig, PanelDataset, PanelError, Variable, YearRange,
    Zone,
};
use crate::regions::{
    aggregate_region, build_border_regions, load_adjacency, AggregateSeries, Boundary, RegionError, RegionSet, Side,
};
use crate::report::sig6;
use crate::scm::{
    effect_table, fit_scm, predictor_balance, scg_composition, PredictorSpec, ScmError, ScmFit, ScmOptions,
};
use crate::synthgen::{generate, write_dataset, GeneratorSpec, SynthError, TruthRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("panel: {0}")]
    Panel(#[from] PanelError),
    #[error("regions: {0}")]
    Region(#[from] RegionError),
    #[error("scm: {0}")]
    Scm(#[from] ScmError),
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
    #[error("did: {0}")]
    Did(#[from] DidError),
    #[error("synthgen: {0}")]
    Synth(#[from] SynthError),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// True for failures to read or write files, as opposed to invalid data.
    pub fn is_io(&self) -> bool {
        match self {
            PipelineError::Io { .. } => true,
            PipelineError::Panel(e) => e.is_io(),
            PipelineError::Region(RegionError::Io { .. }) => true,
            PipelineError::Synth(SynthError::Output { .. }) => true,
            PipelineError::Synth(SynthError::Panel(e)) => e.is_io(),
            PipelineError::Synth(SynthError::Region(RegionError::Io { .. })) => true,
            _ => false,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub meta: PathBuf,
    pub outcome: PathBuf,
    pub covariates: Vec<PathBuf>,
    pub adjacency: PathBuf,
    /// Ground truth from `simulate`; when set, `run` writes a recovery diff.
    pub truth: Option<PathBuf>,
}

impl Default for InputPaths {
    fn default() -> Self {
        Self {
            meta: "meta.csv".into(),
            outcome: "outcome.csv".into(),
            covariates: vec!["covariates.csv".into()],
            adjacency: "adjacency.csv".into(),
            truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub boundary: Boundary,
    pub max_depth: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            boundary: Boundary::default(),
            max_depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmConfig {
    pub pre_period: YearRange,
    pub post_period: YearRange,
    pub predictors: PredictorSpec,
    pub options: ScmOptions,
    pub donor_zones: Vec<Zone>,
    /// Drop south-side border members of the same depth from the donor pool.
    pub exclude_border_donors: bool,
    /// Donors at or below this weight are left out of the composition table.
    pub composition_threshold: f64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            pre_period: YearRange::new(2016, 2020),
            post_period: YearRange::new(2021, 2022),
            predictors: PredictorSpec::default(),
            options: ScmOptions::default(),
            donor_zones: vec![Zone::SE3, Zone::SE4],
            exclude_border_donors: false,
            composition_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub placebo_years: Vec<i32>,
    pub ratio_test: bool,
    /// Drop donor placebos whose pre-RMSPE exceeds this multiple of the
    /// treated pre-RMSPE.
    pub max_pre_rmspe_multiple: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            placebo_years: vec![2018],
            ratio_test: true,
            max_pre_rmspe_multiple: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DidConfig {
    pub post_year: i32,
    /// Controls for the second specification; empty runs only the plain one.
    pub controls: Vec<Variable>,
    pub year_fixed_effects: bool,
    pub se_type: SeType,
    pub small_sample_t: bool,
    pub placebo_post_year: Option<i32>,
    /// Regress on the two aggregate series instead of member units.
    pub aggregate_mode: bool,
}

impl Default for DidConfig {
    fn default() -> Self {
        let spec = DidSpec::default();
        Self {
            post_year: spec.post_year,
            controls: vec![
                Variable::DisposableIncome,
                Variable::SmallHouseShare,
                Variable::Unemployment,
            ],
            year_fixed_effects: spec.year_fixed_effects,
            se_type: spec.se_type,
            small_sample_t: spec.small_sample_t,
            placebo_post_year: Some(2018),
            aggregate_mode: false,
        }
    }
}

impl DidConfig {
    pub fn spec(&self, with_controls: bool) -> DidSpec {
        DidSpec {
            post_year: self.post_year,
            controls: if with_controls {
                self.controls.clone()
            } else {
                Vec::new()
            },
            year_fixed_effects: self.year_fixed_effects,
            se_type: self.se_type,
            small_sample_t: self.small_sample_t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; unset uses every core. Not part of the config hash.
    pub threads: Option<usize>,
    pub inputs: InputPaths,
    pub ingest: IngestConfig,
    pub regions: RegionConfig,
    pub scm: ScmConfig,
    pub inference: InferenceConfig,
    pub did: DidConfig,
    /// Directory that relative input paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: ScmOptions::default().seed,
            out_dir: "out".into(),
            threads: None,
            inputs: InputPaths::default(),
            ingest: IngestConfig::default(),
            regions: RegionConfig::default(),
            scm: ScmConfig::default(),
            inference: InferenceConfig::default(),
            did: DidConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    /// Reads a config file. Relative input paths and `out_dir` are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if config.base_dir.as_os_str().is_empty() {
            config.base_dir = PathBuf::from(".");
        }
        config.out_dir = config.base_dir.join(&config.out_dir);
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over every field that affects results.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.semantic_value().to_string().as_bytes()))
    }

    /// The config as JSON without the fields that cannot change results.
    pub fn semantic_value(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
            map.remove("threads");
        }
        value
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        let (pre, post) = (self.scm.pre_period, self.scm.post_period);
        if pre.first > pre.last || post.first > post.last {
            return err(format!("empty period: pre {pre:?}, post {post:?}"));
        }
        if post.first != pre.last + 1 {
            return err(format!(
                "post period must start right after the pre period ({} vs {})",
                post.first, pre.last
            ));
        }
        if self.regions.max_depth == 0 {
            return err("regions.max_depth must be at least 1".into());
        }
        if self.scm.donor_zones.contains(&Zone::Split) {
            return err("SPLIT units cannot be donors".into());
        }
        if self.inputs.covariates.is_empty() {
            return err("inputs.covariates lists no files".into());
        }
        for &y in &self.inference.placebo_years {
            if y < pre.first || y > pre.last {
                return err(format!(
                    "placebo year {y} outside the pre period {}..={}",
                    pre.first, pre.last
                ));
            }
        }
        if self.threads == Some(0) {
            return err("threads must be at least 1".into());
        }
        self.regions.boundary.validate()?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    fn input_files(&self) -> Vec<(String, PathBuf)> {
        let i = &self.inputs;
        let mut files = vec![
            ("meta".to_string(), self.resolve(&i.meta)),
            ("outcome".to_string(), self.resolve(&i.outcome)),
        ];
        for (k, c) in i.covariates.iter().enumerate() {
            files.push((format!("covariates[{k}]"), self.resolve(c)));
        }
        files.push(("adjacency".into(), self.resolve(&i.adjacency)));
        if let Some(t) = &i.truth {
            files.push(("truth".into(), self.resolve(t)));
        }
        files
    }

    fn ingest_config(&self) -> IngestConfig {
        let mut ingest = self.ingest.clone();
        ingest.resolve_paths(&self.base_dir);
        ingest
    }

    fn load_panel(&self) -> Result<PanelDataset, PipelineError> {
        let covariates: Vec<PathBuf> = self.inputs.covariates.iter().map(|c| self.resolve(c)).collect();
        Ok(load_panel(
            &self.resolve(&self.inputs.outcome),
            &covariates,
            &self.resolve(&self.inputs.meta),
            &self.ingest_config(),
        )?)
    }
}

/// Outcome of checking the inputs named by a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub cells: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            return writeln!(f, "balanced: {} cells", self.cells);
        }
        writeln!(f, "{} violation(s):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

/// Checks every input and collects all data violations. Unreadable files
/// are returned as errors.
pub fn validate(config: &RunConfig) -> Result<ValidationReport, PipelineError> {
    let covariates: Vec<PathBuf> = config.inputs.covariates.iter().map(|c| config.resolve(c)).collect();
    let errors = validate_panel_files(
        &config.resolve(&config.inputs.outcome),
        &covariates,
        &config.resolve(&config.inputs.meta),
        &config.ingest_config(),
    );
    if let Some(pos) = errors.iter().position(PanelError::is_io) {
        return Err(errors.into_iter().nth(pos).expect("position is valid").into());
    }
    let mut violations: Vec<String> = errors.iter().map(|e| format!("panel: {e}")).collect();
    if !violations.is_empty() {
        return Ok(ValidationReport { cells: 0, violations });
    }
    let panel = config.load_panel()?;
    let years = panel.years();
    for (name, range) in [("pre", config.scm.pre_period), ("post", config.scm.post_period)] {
        if !years.covers(&range) {
            violations.push(format!(
                "config: {name} period {}..={} outside panel years {}..={}",
                range.first, range.last, years.first, years.last
            ));
        }
    }
    let graph = load_adjacency(&config.resolve(&config.inputs.adjacency))?;
    match build_border_regions(&graph, &panel, config.regions.boundary, config.regions.max_depth) {
        Ok(_) => {}
        Err(e @ RegionError::Io { .. }) => return Err(e.into()),
        Err(e) => violations.push(format!("regions: {e}")),
    }
    if panel.unit_ids_in_zones(&config.scm.donor_zones).is_empty() {
        violations.push("scm: donor pool is empty".into());
    }
    Ok(ValidationReport {
        cells: panel.cell_count(),
        violations,
    })
}

/// Loaded inputs plus the derived regions and donor pool.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub config: RunConfig,
    pub panel: PanelDataset,
    pub regions: RegionSet,
    pub donors: Vec<String>,
}

/// DiD results for one border depth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DidDepth {
    pub plain: DidFit,
    pub with_controls: Option<DidFit>,
    pub placebo: Option<DidFit>,
    pub trends: TrendTest,
}

impl Analysis {
    pub fn prepare(config: RunConfig) -> Result<Self, PipelineError> {
        config.check()?;
        let panel = config.load_panel()?;
        let graph = load_adjacency(&config.resolve(&config.inputs.adjacency))?;
        let regions = build_border_regions(&graph, &panel, config.regions.boundary, config.regions.max_depth)?;
        let donors = panel.unit_ids_in_zones(&config.scm.donor_zones);
        Ok(Self {
            config,
            panel,
            regions,
            donors,
        })
    }

    pub fn depths(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.regions.max_depth()
    }

    fn check_depth(&self, depth: usize) -> Result<(), PipelineError> {
        if depth == 0 || depth > self.regions.max_depth() {
            return Err(PipelineError::Config(format!(
                "depth {depth} outside 1..={}",
                self.regions.max_depth()
            )));
        }
        Ok(())
    }

    pub fn options(&self) -> ScmOptions {
        ScmOptions {
            seed: self.config.seed,
            ..self.config.scm.options
        }
    }

    pub fn region_series(&self, depth: usize, side: Side) -> Result<AggregateSeries, PipelineError> {
        self.check_depth(depth)?;
        Ok(aggregate_region(
            &self.panel,
            self.regions.members(depth, side),
            &RegionSet::label(depth, side),
        )?)
    }

    pub fn donor_pool(&self, depth: usize) -> Vec<String> {
        if !self.config.scm.exclude_border_donors {
            return self.donors.clone();
        }
        let south = self.regions.members(depth, Side::South);
        self.donors.iter().filter(|d| !south.contains(*d)).cloned().collect()
    }

    pub fn fit(&self, depth: usize) -> Result<ScmFit, PipelineError> {
        let treated = self.region_series(depth, Side::North)?;
        let c = &self.config.scm;
        Ok(fit_scm(
            &self.panel,
            &treated,
            &self.donor_pool(depth),
            &c.predictors,
            c.pre_period,
            c.post_period,
            &self.options(),
        )?)
    }

    pub fn placebo(&self, depth: usize, placebo_year: i32) -> Result<PlaceboFit, PipelineError> {
        let treated = self.region_series(depth, Side::North)?;
        let c = &self.config.scm;
        Ok(in_time_placebo(
            &self.panel,
            &treated,
            &self.donor_pool(depth),
            &c.predictors,
            c.pre_period,
            c.post_period,
            placebo_year,
            &self.options(),
        )?)
    }

    /// Every donor in `pool` refitted against the others.
    pub fn donor_placebos(&self, pool: &[String]) -> Result<Vec<ScmFit>, PipelineError> {
        let c = &self.config.scm;
        let series: Vec<AggregateSeries> = pool
            .iter()
            .map(|id| {
                let u = self.panel.unit_index(id).expect("donor ids come from the panel");
                AggregateSeries::from_unit(&self.panel, u)
            })
            .collect();
        Ok(donor_placebo_fits(
            &series,
            &c.predictors,
            c.pre_period,
            c.post_period,
            &self.options(),
        )?)
    }

    pub fn ratio_test(&self, fit: &ScmFit, placebos: &[ScmFit]) -> RatioTest {
        rmspe_ratio_test(fit, placebos, self.config.inference.max_pre_rmspe_multiple)
    }

    pub fn envelope(&self) -> Result<PermutationEnvelope, PipelineError> {
        let overlays = self
            .depths()
            .flat_map(|d| [(d, Side::North), (d, Side::South)])
            .map(|(d, s)| self.region_series(d, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(permutation_envelope(&self.panel, &self.donors)?.with_overlays(&overlays))
    }

    fn did_sample(&self, depth: usize, controls: &[Variable]) -> Result<DidSample, PipelineError> {
        self.check_depth(depth)?;
        let sample = if self.config.did.aggregate_mode {
            DidSample::from_aggregates(
                &self.region_series(depth, Side::North)?,
                &self.region_series(depth, Side::South)?,
                controls,
            )?
        } else {
            DidSample::from_panel(
                &self.panel,
                self.regions.members(depth, Side::North),
                self.regions.members(depth, Side::South),
                controls,
                (
                    &RegionSet::label(depth, Side::North),
                    &RegionSet::label(depth, Side::South),
                ),
            )?
        };
        Ok(sample)
    }

    pub fn did(&self, depth: usize) -> Result<DidDepth, PipelineError> {
        let d = &self.config.did;
        let plain_spec = d.spec(false);
        let sample = self.did_sample(depth, &[])?;
        let plain = fit_did(&sample, &plain_spec)?;
        let with_controls = if d.controls.is_empty() {
            None
        } else {
            Some(fit_did(&self.did_sample(depth, &d.controls)?, &d.spec(true))?)
        };
        let placebo = d
            .placebo_post_year
            .map(|y| did_placebo(&sample, &plain_spec, y))
            .transpose()?;
        let trends = parallel_trends_test(&sample, &plain_spec)?;
        Ok(DidDepth {
            plain,
            with_controls,
            placebo,
            trends,
        })
    }
}

/// Headline numbers of one depth, as printed after a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthSummary {
    pub depth: usize,
    pub treated_label: String,
    pub gaps: BTreeMap<i32, f64>,
    pub rmspe_pre: f64,
    pub pseudo_p: Option<f64>,
    pub atet: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub depths: Vec<DepthSummary>,
    pub files: Vec<String>,
}

/// Output files collected in memory and written in order at the end.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: BTreeMap<String, Vec<u8>>,
}

impl OutputSet {
    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), contents.into());
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
        text.push('\n');
        self.add(name, text);
    }

    pub fn names(&self) -> Vec<String> {
        self.files.keys().cloned().collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        for (name, contents) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
            }
            std::fs::write(&path, contents).map_err(|e| PipelineError::io(&path, e))?;
        }
        Ok(())
    }

    fn digests(&self) -> BTreeMap<String, String> {
        self.files
            .iter()
            .map(|(k, v)| (k.clone(), hex::encode(Sha256::digest(v))))
            .collect()
    }
}

pub fn descriptive_csv(panel: &PanelDataset) -> String {
    let mut out = String::from("variable,count,mean,std,min,max\n");
    for r in descriptive_stats(panel) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variable.name(),
            r.count,
            sig6(r.mean),
            sig6(r.std),
            sig6(r.min),
            sig6(r.max)
        );
    }
    out
}

pub fn balance_csv(fit: &ScmFit) -> String {
    let mut out = String::from("predictor,treated,synthetic,abs_diff,rel_diff_pct\n");
    for r in predictor_balance(fit) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.predictor,
            sig6(r.treated),
            sig6(r.synthetic),
            sig6(r.abs_diff),
            r.rel_diff_pct.map(sig6).unwrap_or_else(|| "NA".into())
        );
    }
    out
}

pub fn composition_csv(fit: &ScmFit, panel: &PanelDataset, threshold: f64) -> String {
    let mut out = String::from("unit_id,name,weight");
    for p in &fit.predictor_names {
        out.push(',');
        out.push_str(p);
    }
    out.push('\n');
    for r in scg_composition(fit, threshold) {
        let name = panel.unit(&r.unit_id).map(|u| u.name.as_str()).unwrap_or("");
        let _ = write!(out, "{},{},{}", r.unit_id, csv_text(name), sig6(r.weight));
        for p in &r.predictors {
            let _ = write!(out, ",{}", sig6(*p));
        }
        out.push('\n');
    }
    out
}

pub fn ratio_csv(test: &RatioTest) -> String {
    let mut out = String::from("unit_id,rmspe_pre,rmspe_post,ratio\n");
    for p in &test.placebos {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.unit_id,
            sig6(p.rmspe_pre),
            sig6(p.rmspe_post),
            sig6(p.ratio)
        );
    }
    out
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Estimated against planted effects for every depth and post year.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryRow {
    pub depth: usize,
    pub year: i32,
    pub truth: f64,
    pub estimate: f64,
    pub error: f64,
    pub relative_error: Option<f64>,
}

fn recovery_rows(truth: &TruthRecord, fits: &[(usize, ScmFit)]) -> Vec<RecoveryRow> {
    let mut rows = Vec::new();
    for (depth, fit) in fits {
        for year in fit.post_period.iter() {
            let t = truth.effects_by_year.get(&year).copied().unwrap_or(0.0);
            let estimate = fit.gap_at(year).unwrap_or(f64::NAN);
            rows.push(RecoveryRow {
                depth: *depth,
                year,
                truth: t,
                estimate,
                error: estimate - t,
                relative_error: (t != 0.0).then(|| (estimate - t) / t.abs()),
            });
        }
    }
    rows
}

/// Runs every analysis and builds the output files without writing them.
pub fn build_outputs(analysis: &Analysis) -> Result<(OutputSet, Vec<DepthSummary>), PipelineError> {
    let config = &analysis.config;
    let mut out = OutputSet::default();
    out.add("descriptive_stats.csv", descriptive_csv(&analysis.panel));
    out.add_json("regions.json", &analysis.regions.records());
    let envelope = analysis.envelope()?;
    out.add("envelope.csv", envelope.to_csv());
    out.add_json("envelope_containment.json", &envelope.containment);

    let mut placebo_cache: BTreeMap<Vec<String>, Vec<ScmFit>> = BTreeMap::new();
    let mut summaries = Vec::new();
    let mut fits = Vec::new();
    let mut did_columns: Vec<(String, DidFit)> = Vec::new();
    let mut placebo_columns: Vec<(String, DidFit)> = Vec::new();
    let mut trend_columns: Vec<(String, TrendTest)> = Vec::new();

    for depth in analysis.depths() {
        let dir = format!("border{depth}");
        let fit = analysis.fit(depth)?;
        out.add_json(format!("{dir}/fit.json"), &fit);
        out.add(format!("{dir}/path.csv"), fit.path_csv());
        out.add(format!("{dir}/effects.csv"), effect_table(&fit).to_csv());
        out.add(format!("{dir}/balance.csv"), balance_csv(&fit));
        out.add(
            format!("{dir}/composition.csv"),
            composition_csv(&fit, &analysis.panel, config.scm.composition_threshold),
        );
        for &year in &config.inference.placebo_years {
            let placebo = analysis.placebo(depth, year)?;
            out.add_json(format!("{dir}/placebo_{year}.json"), &placebo);
            out.add(format!("{dir}/placebo_{year}_path.csv"), placebo.fit.path_csv());
        }
        let mut pseudo_p = None;
        if config.inference.ratio_test {
            let pool = analysis.donor_pool(depth);
            if !placebo_cache.contains_key(&pool) {
                let fits = analysis.donor_placebos(&pool)?;
                placebo_cache.insert(pool.clone(), fits);
            }
            let test = analysis.ratio_test(&fit, &placebo_cache[&pool]);
            pseudo_p = Some(test.pseudo_p);
            out.add_json(format!("{dir}/ratio_test.json"), &test);
            out.add(format!("{dir}/ratio_test.csv"), ratio_csv(&test));
        }

        let did = analysis.did(depth)?;
        out.add_json(format!("{dir}/did.json"), &did);
        let title = format!("Border {depth}");
        did_columns.push((title.clone(), did.plain.clone()));
        if let Some(f) = &did.with_controls {
            did_columns.push((format!("{title} + controls"), f.clone()));
        }
        if let Some(p) = &did.placebo {
            placebo_columns.push((title.clone(), p.clone()));
        }
        trend_columns.push((title, did.trends.clone()));

        summaries.push(DepthSummary {
            depth,
            treated_label: fit.treated_label.clone(),
            gaps: fit
                .post_period
                .iter()
                .filter_map(|y| fit.gap_at(y).map(|g| (y, g)))
                .collect(),
            rmspe_pre: fit.rmspe_pre,
            pseudo_p,
            atet: did.plain.atet,
        });
        fits.push((depth, fit));
    }

    let refs = |cols: &[(String, DidFit)]| -> String {
        let v: Vec<(&str, &DidFit)> = cols.iter().map(|(t, f)| (t.as_str(), f)).collect();
        regression_table(&v)
    };
    out.add("did_table.txt", refs(&did_columns));
    if !placebo_columns.is_empty() {
        out.add("did_placebo_table.txt", refs(&placebo_columns));
    }
    let trends: Vec<(&str, &TrendTest)> = trend_columns.iter().map(|(t, f)| (t.as_str(), f)).collect();
    out.add("trends_table.txt", trends_table(&trends));

    if let Some(path) = &config.inputs.truth {
        let path = config.resolve(path);
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let truth: TruthRecord =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        out.add_json("recovery.json", &recovery_rows(&truth, &fits));
    }
    Ok((out, summaries))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Manifest {
    package: &'static str,
    version: &'static str,
    seed: u64,
    config_hash: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Full analysis: writes every output plus `manifest.json` to the
/// configured output directory.
pub fn run(config: RunConfig) -> Result<RunSummary, PipelineError> {
    let analysis = Analysis::prepare(config)?;
    let (mut out, depths) = build_outputs(&analysis)?;
    let config = &analysis.config;
    let inputs = config
        .input_files()
        .into_iter()
        .map(|(k, p)| Ok((k, file_digest(&p)?)))
        .collect::<Result<BTreeMap<_, _>, PipelineError>>()?;
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_hash: config.config_hash(),
        config: config.semantic_value(),
        inputs,
        outputs: out.digests(),
    };
    out.add_json("manifest.json", &manifest);
    out.write(&config.out_dir)?;
    Ok(RunSummary {
        out_dir: config.out_dir.clone(),
        config_hash: manifest.config_hash,
        depths,
        files: out.names(),
    })
}

/// Config matching the file names that [`simulate`] writes.
pub fn simulated_config(spec: &GeneratorSpec) -> RunConfig {
    let post_first = spec.planted.effects.keys().next().copied().unwrap_or(spec.years.last);
    RunConfig {
        seed: ScmOptions::default().seed,
        inputs: InputPaths {
            truth: Some("truth.json".into()),
            ..InputPaths::default()
        },
        regions: RegionConfig {
            boundary: spec.boundary,
            max_depth: 3,
        },
        scm: ScmConfig {
            pre_period: YearRange::new(spec.years.first, post_first - 1),
            post_period: YearRange::new(post_first, spec.years.last),
            donor_zones: spec.boundary.zones(Side::South),
            ..ScmConfig::default()
        },
        ..RunConfig::default()
    }
}

/// Generates a dataset into `dir` with a matching `config.toml`.
pub fn simulate(spec: &GeneratorSpec, dir: &Path) -> Result<TruthRecord, PipelineError> {
    let data = generate(spec)?;
    let config = simulated_config(spec);
    write_dataset(&data, dir, config.ingest.lag_years)?;
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml()).map_err(|e| PipelineError::io(&path, e))?;
    Ok(data.truth)
}

/// Runs `f` on a pool with `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool builds")
            .install(f),
        None => f(),
    }
}
