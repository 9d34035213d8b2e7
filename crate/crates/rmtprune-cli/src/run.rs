//! Run bookkeeping shared by all subcommands: failures with exit codes,
//! the manifest, atomic report writing and config/dataset loading.

use std::fmt;
use std::path::{Path, PathBuf};

use rmtprune::matrixio::{self, LabeledDataset};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub const EXIT_CONTRACT: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, missing seed, unreadable config.
    Usage(String),
    Lib(rmtprune::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Lib(e) if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_CONTRACT,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<rmtprune::Error> for Failure {
    fn from(e: rmtprune::Error) -> Self {
        Failure::Lib(e)
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Written next to the reports of every run, including failed ones. The
/// wall-clock figures live here and never in the reports themselves.
#[derive(Debug, Default, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Headline numbers of the run, subcommand specific.
    pub summary: Value,
    /// Timings of individual stages, in seconds.
    pub timings: Vec<(String, f64)>,
    pub wall_clock_secs: f64,
    pub exit_code: i32,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: Vec<String>) -> Self {
        Self {
            subcommand: subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            argv,
            ..Self::default()
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn config(&mut self, c: &impl Serialize) {
        self.config = serde_json::to_value(c).unwrap_or(Value::Null);
    }

    pub fn write(&self, path: &Path) -> rmtprune::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| rmtprune::Error::Io { path: dir.display().to_string(), source: e })?;
        }
        matrixio::write_atomic(path, &bytes)
    }
}

/// `<path>.manifest.json`, or `<dir>/manifest.json` for a directory.
pub fn manifest_for(primary: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        primary.join("manifest.json")
    } else {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

/// Write and record an output file.
pub fn emit(manifest: &mut RunManifest, path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    matrixio::write_atomic(path, bytes)?;
    manifest.outputs.push(path.display().to_string());
    Ok(())
}

pub fn csv_bytes<R: Serialize>(rows: &[R]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Usage(format!("csv encoding: {e}")))?;
    }
    w.into_inner().map_err(|e| Failure::Usage(format!("csv encoding: {e}")))
}

pub fn json_bytes(v: &impl Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("report serializes");
    b.push(b'\n');
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn report_format(path: &Path) -> CliResult<ReportFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(ReportFormat::Csv),
        Some("json") => Ok(ReportFormat::Json),
        _ => usage(format!("report {} must end in .csv or .json", path.display())),
    }
}

/// Parse a `key = value` config file into `T`; unknown keys are errors.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, manifest: &mut RunManifest) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    manifest.input(path);
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

/// Seeds as `7`, `1,2,5` or the half-open range `0..10`.
pub fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let bad = |e: std::num::ParseIntError| format!("invalid seed list {s:?}: {e}");
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (a.trim().parse::<u64>().map_err(bad)?, b.trim().parse::<u64>().map_err(bad)?);
        (a..b).collect()
    } else {
        s.split(',').map(|t| t.trim().parse::<u64>().map_err(bad)).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("seed list {s:?} is empty"));
    }
    Ok(SeedList(seeds))
}

/// Fractions such as `1/200` or decimals.
pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{s:?}: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?} is not a finite number"))
    }
}

pub fn require_seeds(seeds: &Option<SeedList>, manifest: &mut RunManifest) -> CliResult<Vec<u64>> {
    match seeds {
        Some(SeedList(s)) => {
            manifest.seeds = s.clone();
            Ok(s.clone())
        }
        None => usage("this subcommand is randomized and needs an explicit --seed"),
    }
}

pub fn require_seed(seeds: &Option<SeedList>, manifest: &mut RunManifest) -> CliResult<u64> {
    match require_seeds(seeds, manifest)?.as_slice() {
        [s] => Ok(*s),
        _ => usage("this subcommand takes a single --seed"),
    }
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Load one split of an IDX dataset directory, keeping the first `limit`
/// samples. Pixels are scaled to [0, 1].
pub fn load_split(
    dir: &Path,
    split: Split,
    n_classes: usize,
    limit: Option<usize>,
    manifest: &mut RunManifest,
) -> CliResult<LabeledDataset> {
    let (img, lab) = match split {
        Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
        Split::Test => (TEST_IMAGES, TEST_LABELS),
    };
    let (img, lab) = (dir.join(img), dir.join(lab));
    manifest.input(&img);
    manifest.input(&lab);
    let d = matrixio::load_idx_dataset(&img, &lab, n_classes)?;
    Ok(match limit {
        Some(n) => d.take(n.min(d.len())),
        None => d,
    })
}

pub fn has_split(dir: &Path, split: Split) -> bool {
    let img = match split {
        Split::Train => TRAIN_IMAGES,
        Split::Test => TEST_IMAGES,
    };
    dir.join(img).is_file()
}
