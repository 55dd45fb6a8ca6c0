use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::CostModel;
use crate::codec::{NormKey, DOF};
use crate::error::{Error, Result};
use crate::kinematics::{KfParams, DEFAULT_AC, DEFAULT_PL};
use crate::kv::KvFile;
use crate::simenv::{DraftNoiseModel, TaskKind, TaskParams};
use crate::specdec::{EngineConfig, EngineMode, PSource};
use crate::threshold::{CalibrationGrid, ThresholdMode, ThresholdState};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub name: String,
    pub kind: TaskKind,
    pub trials: usize,
    pub seed_base: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub q_err: f64,
    pub max_offset: u32,
    pub zipf_s: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            q_err: 0.5,
            max_offset: 60,
            zipf_s: 0.75,
        }
    }
}

impl NoiseParams {
    pub fn model(&self, seed: u64) -> Result<DraftNoiseModel> {
        DraftNoiseModel::zipf(self.q_err, self.max_offset, self.zipf_s, seed)
    }
}

/// Everything a run needs, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub key: NormKey,
    pub kf: KfParams,
    pub ac: usize,
    pub pl: usize,
    pub cooldown: usize,
    pub p_source: PSource,
    pub compensation: bool,
    pub depth: usize,
    pub fixed_r: u32,
    pub threshold_mode: ThresholdMode,
    pub adjust: bool,
    /// Calibration table; when absent one is built from a pre-sample.
    pub table: Option<PathBuf>,
    pub grid: CalibrationGrid,
    pub presample_trials: usize,
    pub noise: NoiseParams,
    pub cost: CostModel,
    pub task: TaskParams,
    pub modes: Vec<EngineMode>,
    pub seed: u64,
    pub wallclock: bool,
    pub robot: String,
    pub suites: Vec<SuiteConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let suite = |name: &str, kind, seed_base| SuiteConfig {
            name: name.into(),
            kind,
            trials: 50,
            seed_base,
        };
        RunConfig {
            key: NormKey::default(),
            kf: KfParams::default(),
            ac: DEFAULT_AC,
            pl: DEFAULT_PL,
            cooldown: 4,
            p_source: PSource::Verify,
            compensation: true,
            depth: 4,
            fixed_r: 9,
            threshold_mode: ThresholdMode::Rectified,
            adjust: true,
            table: None,
            grid: CalibrationGrid::default(),
            presample_trials: 20,
            noise: NoiseParams::default(),
            cost: CostModel::default(),
            task: TaskParams::default(),
            modes: EngineMode::ALL.to_vec(),
            seed: 0,
            wallclock: false,
            robot: "sim7dof".into(),
            suites: vec![
                suite("spatial", TaskKind::Reach, 10_000),
                suite("object", TaskKind::PickPlace, 20_000),
                suite("goal", TaskKind::PickPlace, 30_000),
                suite("long", TaskKind::LongHorizon, 40_000),
            ],
        }
    }
}

/// Seed of one trial; shared by every mode so modes see the same tasks and noise.
pub fn episode_seed(run_seed: u64, seed_base: u64, trial: usize) -> u64 {
    seed_base
        .wrapping_add(trial as u64)
        .wrapping_add(run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Reads keys from a `KvFile`, remembering which ones were consumed.
struct Reader<'a> {
    kv: &'a KvFile,
    used: BTreeSet<String>,
}

impl Reader<'_> {
    fn get<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        self.used.insert(key.to_string());
        if let Some(v) = self.kv.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn get_str(&mut self, key: &str) -> Option<&str> {
        self.used.insert(key.to_string());
        self.kv.get_str(key)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut rd = Reader { kv, used: BTreeSet::new() };

        c.key = match rd.get_str("codec.norm_key") {
            Some(p) => NormKey::load(resolve(kv, p))?,
            None => NormKey::from_kv(kv)?,
        };
        for name in ["vocab_size", "codec.vocab_size"] {
            rd.used.insert(name.into());
        }
        for dof in 0..DOF {
            rd.used.insert(format!("dof{dof}"));
            rd.used.insert(format!("codec.dof{dof}"));
        }

        rd.get("kf.process_noise", &mut c.kf.process_noise)?;
        rd.get("kf.measurement_noise", &mut c.kf.measurement_noise)?;
        rd.get("kf.initial_variance", &mut c.kf.initial_variance)?;
        rd.get("kf.dt", &mut c.kf.dt)?;
        rd.get("kf.ac", &mut c.ac)?;
        rd.get("kf.pl", &mut c.pl)?;
        rd.get("comp.n", &mut c.cooldown)?;
        rd.get("comp.p_source", &mut c.p_source)?;
        rd.get("comp.enabled", &mut c.compensation)?;
        rd.get("sd.depth", &mut c.depth)?;
        rd.get("fixed.r", &mut c.fixed_r)?;
        rd.get("threshold.mode", &mut c.threshold_mode)?;
        rd.get("threshold.adjust", &mut c.adjust)?;
        if let Some(p) = rd.get_str("threshold.table") {
            c.table = Some(resolve(kv, p));
        }
        if let Some(p) = rd.get_str("calib.grid") {
            c.grid = CalibrationGrid::load(resolve(kv, p))?;
        }
        rd.get("calib.lambda", &mut c.grid.lambda)?;
        rd.get("calib.trials", &mut c.presample_trials)?;
        rd.get("noise.q_err", &mut c.noise.q_err)?;
        rd.get("noise.max_offset", &mut c.noise.max_offset)?;
        rd.get("noise.zipf_s", &mut c.noise.zipf_s)?;
        rd.get("cost.verify", &mut c.cost.verify)?;
        rd.get("cost.draft", &mut c.cost.draft)?;
        rd.get("cost.kf", &mut c.cost.kf)?;
        rd.get("cost.adjust", &mut c.cost.adjust)?;
        rd.get("cost.transfer", &mut c.cost.transfer)?;
        rd.get("env.budget_frac", &mut c.task.budget_frac)?;
        rd.get("env.tolerance", &mut c.task.tolerance)?;
        rd.get("env.speed", &mut c.task.speed)?;
        rd.get("run.seed", &mut c.seed)?;
        rd.get("run.wallclock", &mut c.wallclock)?;
        rd.get("robot", &mut c.robot)?;
        if let Some(list) = rd.get_str("run.modes") {
            c.modes = list
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<Result<Vec<EngineMode>>>()?;
        }

        let names: BTreeSet<String> = kv
            .keys()
            .filter_map(|k| k.strip_prefix("suite."))
            .filter_map(|rest| rest.rsplit_once('.').map(|(name, _)| name.to_string()))
            .collect();
        if !names.is_empty() {
            c.suites.clear();
        }
        for name in names {
            let mut s = SuiteConfig {
                name: name.clone(),
                kind: TaskKind::Reach,
                trials: 50,
                seed_base: 0,
            };
            let kind_key = format!("suite.{name}.kind");
            match rd.get_str(&kind_key) {
                Some(k) => s.kind = k.parse()?,
                None => return Err(Error::Config(format!("suite `{name}` needs `{kind_key}`"))),
            }
            rd.get(&format!("suite.{name}.trials"), &mut s.trials)?;
            rd.get(&format!("suite.{name}.seed_base"), &mut s.seed_base)?;
            c.suites.push(s);
        }

        let unknown: Vec<&str> = kv.keys().filter(|k| !rd.used.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        self.task.validate()?;
        self.noise.model(0)?;
        if self.modes.is_empty() {
            return Err(Error::Config("run.modes is empty".into()));
        }
        if self.suites.iter().any(|s| s.name.contains(['/', '\\', ',']) || s.name.is_empty()) {
            return Err(Error::Config("suite names must be non-empty without `/`, `\\` or `,`".into()));
        }
        self.engine(EngineMode::Naive, None)?.validate()
    }

    /// Engine settings for one mode; `threshold` is only used by `kerv`.
    pub fn engine(&self, mode: EngineMode, threshold: Option<ThresholdState>) -> Result<EngineConfig> {
        Ok(EngineConfig {
            mode,
            key: self.key,
            depth: self.depth,
            fixed_r: self.fixed_r,
            cooldown: self.cooldown,
            kf: self.kf,
            ac: self.ac,
            pl: self.pl,
            p_source: self.p_source,
            compensation: self.compensation,
            adjust: self.adjust,
            threshold_mode: self.threshold_mode,
            threshold,
        })
    }

    /// Keeps only the named suite.
    pub fn select_suite(&mut self, name: &str) -> Result<()> {
        self.suites.retain(|s| s.name == name);
        if self.suites.is_empty() {
            return Err(Error::Config(format!("no suite named `{name}`")));
        }
        Ok(())
    }
}

/// Paths inside a config file are relative to that file.
fn resolve(kv: &KvFile, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_relative() {
        if let Some(dir) = kv.path().parent() {
            return dir.join(p);
        }
    }
    p.to_path_buf()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let kv = KvFile::parse(
            "comp.n = 2\nkf.pl = 3\nrun.modes = naive, kerv\nsuite.a.kind = reach\nsuite.a.trials = 3\n",
            "c.conf",
        )
        .unwrap();
        let c = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(c.cooldown, 2);
        assert_eq!(c.pl, 3);
        assert_eq!(c.modes, vec![EngineMode::Naive, EngineMode::Kerv]);
        assert_eq!(c.suites.len(), 1);
        assert_eq!((c.suites[0].kind, c.suites[0].trials), (TaskKind::Reach, 3));
        assert_eq!(RunConfig::from_kv(&KvFile::default()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_listed() {
        let kv = KvFile::parse("kf.pll = 1\ncost.verfy = 2\n", "c.conf").unwrap();
        let msg = RunConfig::from_kv(&kv).unwrap_err().to_string();
        assert!(msg.contains("cost.verfy") && msg.contains("kf.pll"), "{msg}");
    }

    #[test]
    fn bad_values() {
        for text in ["suite.a.kind = lift\n", "suite.a.trials = 3\n", "cost.verify = -1\n", "comp.p_source = both\n"] {
            let kv = KvFile::parse(text, "c.conf").unwrap();
            assert!(RunConfig::from_kv(&kv).is_err(), "{text}");
        }
    }
}
