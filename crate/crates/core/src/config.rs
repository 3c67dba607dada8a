//! Experiment configuration (TOML) with dotted-key overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelParams, ShadowModel};
use crate::error::{RemError, Result};
use crate::grid::GridSpec;
use crate::sampling::PlanMethod;
use crate::sbl::SblConfig;

/// Serializes non-finite floats as `null` and reads `null` back as `+∞`.
pub mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub spacing_m: [f64; 3],
    pub origin_m: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { dims: [16, 16, 4], spacing_m: [5.0, 5.0, 10.0], origin_m: [0.0; 3] }
    }
}

impl GridConfig {
    pub fn to_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.dims, self.spacing_m, self.origin_m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub gt: f64,
    pub gr: f64,
    pub fc_hz: f64,
    pub c_light: f64,
    pub eta: f64,
    pub d_ref_m: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let p = ChannelParams::default();
        ChannelConfig {
            gt: p.gt,
            gr: p.gr,
            fc_hz: p.fc,
            c_light: p.c_light,
            eta: p.eta,
            d_ref_m: DEFAULT_D_REF_M,
        }
    }
}

/// Reference distance of the default scenario.
pub const DEFAULT_D_REF_M: f64 = 20.0;

impl ChannelConfig {
    pub fn to_params(&self) -> ChannelParams {
        ChannelParams {
            gt: self.gt,
            gr: self.gr,
            fc: self.fc_hz,
            c_light: self.c_light,
            eta: self.eta,
            d_ref: self.d_ref_m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowConfig {
    pub sigma_db: f64,
    pub rho_m: f64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig { sigma_db: 4.0, rho_m: 50.0 }
    }
}

impl ShadowConfig {
    pub fn to_model(&self) -> ShadowModel {
        ShadowModel::from_sigma_db(self.sigma_db, self.rho_m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    /// Linear voxel index.
    pub voxel: usize,
    pub power_dbm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourcesConfig {
    /// Number of randomly placed sources (ignored when `list` is given).
    pub count: usize,
    pub power_dbm: f64,
    /// Placement seed; defaults to the run seed.
    pub seed: Option<u64>,
    pub list: Vec<SourceEntry>,
}

impl Default for SourcesConfig {
    fn default() -> Self {
        SourcesConfig { count: 3, power_dbm: 20.0, seed: None, list: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Target `10·log10(mean(x_s)/σ0²)`.
    pub snr_db: Option<f64>,
    /// Explicit noise variance (mW²); mutually exclusive with `snr_db`.
    pub sigma0_2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub method: PlanMethod,
    pub per_thr: f64,
    /// Sampling rate `M/N`.
    pub r: Option<f64>,
    /// Sample count; mutually exclusive with `r`.
    pub m: Option<usize>,
    /// Minimum-eigenvalue floor (threshold mode, used when neither `r` nor `m` is set).
    /// With none of the three set the rate defaults to [`DEFAULT_RATE`].
    pub lambda_wcev: Option<f64>,
    /// Row cap in threshold mode; defaults to N.
    pub m_max: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            method: PlanMethod::Snlo,
            per_thr: 0.9,
            r: None,
            m: None,
            lambda_wcev: None,
            m_max: None,
        }
    }
}

pub const DEFAULT_RATE: f64 = 0.1;

/// `round(r·N)`, at least one sample.
pub fn rate_to_count(r: f64, n_voxels: usize) -> usize {
    ((r * n_voxels as f64).round() as usize).clamp(1, n_voxels)
}

/// How many samples to take.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleBudget {
    Fixed(usize),
    Threshold { lambda_wcev: f64, m_max: usize },
}

impl SamplingConfig {
    pub fn budget(&self, n_voxels: usize) -> Result<SampleBudget> {
        match (self.r, self.m) {
            (Some(_), Some(_)) => Err(RemError::InvalidParameter(
                "sampling.r and sampling.m are mutually exclusive".into(),
            )),
            (Some(r), None) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(RemError::InvalidParameter(format!("sampling.r must lie in (0, 1], got {r}")));
                }
                Ok(SampleBudget::Fixed(rate_to_count(r, n_voxels)))
            }
            (None, Some(m)) => {
                if m == 0 || m > n_voxels {
                    return Err(RemError::InvalidParameter(format!(
                        "sampling.m must lie in [1, {n_voxels}], got {m}"
                    )));
                }
                Ok(SampleBudget::Fixed(m))
            }
            (None, None) => {
                let Some(lambda_wcev) = self.lambda_wcev else {
                    return Ok(SampleBudget::Fixed(rate_to_count(DEFAULT_RATE, n_voxels)));
                };
                if !(lambda_wcev > 0.0) {
                    return Err(RemError::InvalidParameter("sampling.lambda_wcev must be > 0".into()));
                }
                if self.method == PlanMethod::Random {
                    return Err(RemError::InvalidParameter(
                        "random sampling needs sampling.r or sampling.m".into(),
                    ));
                }
                let m_max = self.m_max.unwrap_or(n_voxels);
                if m_max > n_voxels {
                    return Err(RemError::InvalidParameter(format!(
                        "sampling.m_max must be <= {n_voxels}, got {m_max}"
                    )));
                }
                Ok(SampleBudget::Threshold { lambda_wcev, m_max })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GprConfig {
    pub enabled: bool,
    pub n_starts: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for GprConfig {
    fn default() -> Self {
        GprConfig { enabled: true, n_starts: 5, seed: 0, max_iter: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub channel: ChannelConfig,
    pub shadow: ShadowConfig,
    pub sources: SourcesConfig,
    pub noise: NoiseConfig,
    pub sampling: SamplingConfig,
    pub sbl: SblConfig,
    pub gpr: GprConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses TOML, applies `key=value` overrides in order, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| RemError::InvalidParameter(format!("config: {e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| RemError::InvalidParameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.to_spec()?;
        self.channel.to_params().validate()?;
        if !(self.shadow.sigma_db >= 0.0 && self.shadow.sigma_db.is_finite()) {
            return Err(RemError::InvalidParameter("shadow.sigma_db must be >= 0".into()));
        }
        self.shadow.to_model().validate()?;
        if !self.sources.power_dbm.is_finite() {
            return Err(RemError::InvalidParameter("sources.power_dbm must be finite".into()));
        }
        let k = if self.sources.list.is_empty() { self.sources.count } else { self.sources.list.len() };
        if k == 0 || k >= grid.len() {
            return Err(RemError::InvalidParameter(format!(
                "need 1 <= K < N sources, got K = {k} for N = {}",
                grid.len()
            )));
        }
        for s in &self.sources.list {
            if s.voxel >= grid.len() || !s.power_dbm.is_finite() {
                return Err(RemError::InvalidParameter(format!("invalid source entry {s:?}")));
            }
        }
        match (self.noise.snr_db, self.noise.sigma0_2) {
            (Some(_), Some(_)) => {
                return Err(RemError::InvalidParameter(
                    "noise.snr_db and noise.sigma0_2 are mutually exclusive".into(),
                ))
            }
            (Some(s), None) if !s.is_finite() => {
                return Err(RemError::InvalidParameter("noise.snr_db must be finite".into()))
            }
            (None, Some(v)) if !(v >= 0.0 && v.is_finite()) => {
                return Err(RemError::InvalidParameter("noise.sigma0_2 must be >= 0".into()))
            }
            _ => {}
        }
        if !(self.sampling.per_thr > 0.0 && self.sampling.per_thr <= 1.0) {
            return Err(RemError::InvalidParameter(format!(
                "sampling.per_thr must lie in (0, 1], got {}",
                self.sampling.per_thr
            )));
        }
        self.sampling.budget(grid.len())?;
        self.sbl.validate()?;
        if self.gpr.n_starts == 0 || self.gpr.max_iter == 0 {
            return Err(RemError::InvalidParameter("gpr.n_starts and gpr.max_iter must be >= 1".into()));
        }
        Ok(())
    }

    /// Source powers in mW, converted from the configured dBm.
    pub fn source_powers_mw(&self) -> Vec<f64> {
        if self.sources.list.is_empty() {
            vec![crate::dbm_to_mw(self.sources.power_dbm); self.sources.count]
        } else {
            self.sources.list.iter().map(|s| crate::dbm_to_mw(s.power_dbm)).collect()
        }
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| RemError::InvalidParameter(format!("override {item:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(RemError::InvalidParameter(format!("override {item:?} has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| RemError::InvalidParameter(format!("override key {key:?}: {part} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
