//! Run configuration: a flat `key = value` file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use lqhmm::dataset::ColumnMap;
use lqhmm::em::StartConfig;
use lqhmm::inference::DecodeMode;
use lqhmm::kv::KvDocument;
use lqhmm::model::{ModelSpec, PriorMode};
use lqhmm::simulate::{DropoutLaw, ErrorDist, LambdaSet, RandomEffectDist, Scenario, ScenarioConfig, X1Spread};
use lqhmm::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub classification: Option<PathBuf>,
    pub states: Option<PathBuf>,
    pub truth_params: Option<PathBuf>,
    pub out: PathBuf,
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub w: Vec<String>,
    pub taus: Vec<f64>,
    pub n_states: usize,
    /// Unset means 1 for fitting and the scenario's own value for studies.
    pub n_components: Option<usize>,
    pub mode: PriorMode,
    pub eps: f64,
    pub max_iter: usize,
    pub starts: StartConfig,
    pub m_range: Vec<usize>,
    pub g_range: Vec<usize>,
    pub replicates_boot: usize,
    pub level: f64,
    pub bootstrap_multistart: bool,
    pub decode: DecodeMode,
    pub scenario: ScenarioConfig,
    pub study_replicates: usize,
    pub models: Vec<PriorMode>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            params: None,
            truth: None,
            classification: None,
            states: None,
            truth_params: None,
            out: PathBuf::from("lqhmm-out"),
            x: Vec::new(),
            z: Vec::new(),
            w: Vec::new(),
            taus: vec![0.5],
            n_states: 2,
            n_components: None,
            mode: PriorMode::ConstantMixture,
            eps: ModelSpec::DEFAULT_EPS,
            max_iter: ModelSpec::DEFAULT_MAX_ITER,
            starts: StartConfig::default(),
            m_range: vec![1, 2, 3],
            g_range: vec![1, 2, 3],
            replicates_boot: 200,
            level: 0.95,
            bootstrap_multistart: false,
            decode: DecodeMode::Local,
            scenario: ScenarioConfig::new(Scenario::Two, 100, 5),
            study_replicates: 50,
            models: vec![PriorMode::LatentDropOut, PriorMode::ConstantMixture],
            jobs: 0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Parse(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_f64_list(key: &str, items: Vec<String>) -> Result<Vec<f64>> {
    items
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad value `{s}` in `{key}`"))))
        .collect()
}

impl RunConfig {
    /// Reads a configuration file; relative paths resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let doc = KvDocument::read_path(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_document(doc, &base)
    }

    pub fn from_document(mut doc: KvDocument, base: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        let path = |doc: &mut KvDocument, key: &str| doc.get(key).map(|v| base.join(v));
        c.data = path(&mut doc, "data");
        c.params = path(&mut doc, "params");
        c.truth = path(&mut doc, "truth");
        c.classification = path(&mut doc, "classification");
        c.states = path(&mut doc, "states");
        c.truth_params = path(&mut doc, "truth_params");
        if let Some(o) = path(&mut doc, "out") {
            c.out = o;
        }
        if let Some(v) = doc.get_list("x") {
            c.x = v;
        }
        if let Some(v) = doc.get_list("z") {
            c.z = v;
        }
        if let Some(v) = doc.get_list("w") {
            c.w = v;
        }
        if let Some(v) = doc.get_list("tau") {
            c.taus = parse_f64_list("tau", v)?;
        }
        if let Some(v) = doc.get_parsed("m")? {
            c.n_states = v;
        }
        if let Some(v) = doc.get_parsed("G")? {
            c.n_components = Some(v);
        }
        if let Some(v) = doc.get("mode") {
            c.mode = PriorMode::parse(&v)?;
        }
        if let Some(v) = doc.get_parsed("eps")? {
            c.eps = v;
        }
        if let Some(v) = doc.get_parsed("max_iter")? {
            c.max_iter = v;
        }
        if let Some(v) = doc.get_parsed("n_random_starts")? {
            c.starts.n_random_starts = v;
        }
        if let Some(v) = doc.get_parsed("s_diag")? {
            c.starts.s_diag = v;
        }
        if let Some(v) = doc.get_parsed("perturb_scale")? {
            c.starts.perturb_scale = v;
        }
        if let Some(v) = doc.get_parsed("seed")? {
            c.set_seed(v);
        }
        if let Some(v) = doc.get_parsed("jobs")? {
            c.jobs = v;
        }
        if let Some(v) = doc.get_usize_list("m_range")? {
            c.m_range = v;
        }
        if let Some(v) = doc.get_usize_list("G_range")? {
            c.g_range = v;
        }
        if let Some(v) = doc.get_parsed("B")? {
            c.replicates_boot = v;
        }
        if let Some(v) = doc.get_parsed("level")? {
            c.level = v;
        }
        if let Some(v) = doc.get("bootstrap_multistart") {
            c.bootstrap_multistart = parse_bool("bootstrap_multistart", &v)?;
        }
        if let Some(v) = doc.get("decode") {
            c.decode = DecodeMode::parse(&v)?;
        }
        if let Some(v) = doc.get("scenario") {
            c.scenario.scenario = match v.to_ascii_lowercase().as_str() {
                "1" | "one" => Scenario::One,
                "2" | "two" => Scenario::Two,
                other => return Err(Error::Parse(format!("unknown scenario `{other}`"))),
            };
        }
        if let Some(v) = doc.get_parsed("n")? {
            c.scenario.n = v;
        }
        if let Some(v) = doc.get_parsed("T")? {
            c.scenario.t = v;
        }
        if let Some(v) = doc.get("error_dist") {
            c.scenario.error_dist = ErrorDist::parse(&v)?;
        }
        if let Some(v) = doc.get("reffect_dist") {
            c.scenario.reffect_dist = RandomEffectDist::parse(&v)?;
        }
        if let Some(v) = doc.get("lambda_set") {
            c.scenario.lambda_set = LambdaSet::parse(&v)?;
        }
        if let Some(v) = doc.get("dropout_law") {
            c.scenario.dropout = DropoutLaw::parse(&v)?;
        }
        if let Some(v) = doc.get("x1_spread") {
            c.scenario.x1_spread = match v.to_ascii_lowercase().as_str() {
                "variance" | "variance3" => X1Spread::Variance3,
                "sd" | "sd3" => X1Spread::Sd3,
                other => return Err(Error::Parse(format!("unknown x1_spread `{other}`"))),
            };
        }
        if let Some(v) = doc.get_parsed("replicates")? {
            c.study_replicates = v;
        }
        if let Some(v) = doc.get_list("models") {
            c.models = v.iter().map(|s| PriorMode::parse(s)).collect::<Result<_>>()?;
        }
        doc.reject_unknown()?;
        Ok(c)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.starts.rng_seed = seed;
        self.scenario.rng_seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.starts.rng_seed
    }

    pub fn columns(&self) -> ColumnMap {
        ColumnMap::new(&self.x, &self.z, &self.w)
    }

    pub fn spec(&self, tau: f64) -> Result<ModelSpec> {
        Ok(ModelSpec::new(tau, self.n_states, self.n_components.unwrap_or(1), self.mode)?
            .with_eps(self.eps)
            .with_max_iter(self.max_iter))
    }

    pub fn require(&self, what: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let p = p
            .clone()
            .ok_or_else(|| Error::InvalidSpec(format!("no {what} path given")))?;
        if !p.exists() {
            return Err(Error::Io(format!("{what} file {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Checks the column mapping is usable for fitting.
    pub fn check_columns(&self) -> Result<()> {
        if self.z.is_empty() || self.w.is_empty() {
            return Err(Error::InvalidSpec(
                "configuration must name at least one z column and one w column".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let doc = KvDocument::parse(
            "x = x2\nz = x1\nw = one\ntau = 0.25, 0.5\nm = 2\nG = 3\nmode = ldo\nseed = 9\nm_range = 1,2\nscenario = one\n",
        )
        .unwrap();
        let c = RunConfig::from_document(doc, Path::new("")).unwrap();
        assert_eq!(c.taus, vec![0.25, 0.5]);
        assert_eq!(c.mode, PriorMode::LatentDropOut);
        assert_eq!(c.n_components, Some(3));
        assert_eq!(c.seed(), 9);
        assert_eq!(c.scenario.rng_seed, 9);
        assert_eq!(c.m_range, vec![1, 2]);
        assert_eq!(c.scenario.scenario, Scenario::One);
    }

    #[test]
    fn rejects_unknown_keys() {
        let doc = KvDocument::parse("m = 2\ncolour = blue\n").unwrap();
        let err = RunConfig::from_document(doc, Path::new("")).unwrap_err();
        assert!(err.to_string().contains("colour"));
    }
}
