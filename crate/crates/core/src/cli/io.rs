//! File formats: comma-separated response matrices and TOML scenario files.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::integrate::ApproximationMethod;
use crate::model::{default_mask, ItemParams, ModelParams, OrdinalDataset};
use crate::sim::{MardiaConfig, MardiaDiagnostics, ScenarioSpec, StudyReport};

/// Reads a header row of item names followed by one row of integer
/// categories (starting at 1) per observation.
pub fn read_dataset<R: Read>(reader: R, categories: Option<Vec<usize>>) -> Result<OrdinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_owned)
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(Error::Parse {
            line: 1,
            msg: "missing header row".into(),
        });
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .enumerate()
            .map(|(k, field)| match field.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    msg: format!("column {} ('{}'): expected a category >= 1, found '{field}'", k + 1, names[k]),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("data file has no observations".into()));
    }
    OrdinalDataset::new(rows, categories)?.with_item_names(names)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            msg: format!("expected {expected_len} fields, found {len}"),
        },
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

pub fn read_dataset_file(path: &Path, categories: Option<Vec<usize>>) -> Result<OrdinalDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file), categories)
}

pub fn write_dataset<W: Write>(writer: W, data: &OrdinalDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    wtr.write_record(data.item_names()).map_err(io)?;
    for row in data.patterns() {
        wtr.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemSpec {
    pub thresholds: Vec<f64>,
    pub loadings: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MardiaSpec {
    pub points: Option<usize>,
    pub effective_n: Option<f64>,
    pub level: Option<f64>,
}

/// On-disk scenario. Loadings fixed at zero default to the identification
/// mask; `fixed` overrides it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub n: usize,
    pub q: usize,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub methods: Option<Vec<ApproximationMethod>>,
    #[serde(default)]
    pub fixed: Option<Vec<Vec<bool>>>,
    #[serde(default)]
    pub mardia: Option<MardiaSpec>,
    pub items: Vec<ItemSpec>,
}

fn one() -> usize {
    1
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |span| text[..span.start.min(text.len())].lines().count().max(1) as u64);
            Error::Parse {
                line,
                msg: e.message().to_owned(),
            }
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_spec(spec: &ScenarioSpec) -> Self {
        let mask = default_mask(spec.params.p(), spec.params.q);
        Self {
            name: spec.name.clone(),
            n: spec.n,
            q: spec.params.q,
            replicates: spec.replicates,
            seed: spec.seed,
            methods: Some(spec.methods.clone()),
            fixed: (spec.params.fixed != mask).then(|| spec.params.fixed.clone()),
            mardia: None,
            items: spec
                .params
                .items
                .iter()
                .map(|it| ItemSpec {
                    thresholds: it.thresholds.clone(),
                    loadings: it.loadings.clone(),
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn params(&self) -> Result<ModelParams> {
        let items = self
            .items
            .iter()
            .map(|it| ItemParams::new(it.thresholds.clone(), it.loadings.clone()))
            .collect::<Result<Vec<_>>>()?;
        let fixed = self.fixed.clone().unwrap_or_else(|| default_mask(items.len(), self.q));
        ModelParams::with_mask(items, self.q, fixed)
    }

    pub fn spec(&self) -> Result<ScenarioSpec> {
        let spec = ScenarioSpec {
            name: self.name.clone(),
            params: self.params()?,
            n: self.n,
            replicates: self.replicates,
            methods: self.methods.clone().unwrap_or_else(|| {
                vec![
                    ApproximationMethod::Fla,
                    ApproximationMethod::AghMean { points: 5 },
                    ApproximationMethod::AghMode { points: 5 },
                ]
            }),
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mardia_config(&self) -> MardiaConfig {
        let mut cfg = MardiaConfig::default();
        if let Some(m) = &self.mardia {
            cfg.points = m.points.unwrap_or(cfg.points);
            cfg.effective_n = m.effective_n.unwrap_or(cfg.effective_n);
            cfg.level = m.level.unwrap_or(cfg.level);
        }
        cfg
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.3e}"))
}

pub fn format_fit_report(result: &FitResult, data: &OrdinalDataset, method: ApproximationMethod) -> String {
    let params = &result.params;
    let mut s = String::new();
    let _ = writeln!(s, "# fit report");
    let _ = writeln!(s, "method          {method}");
    let _ = writeln!(s, "observations    {}", data.n());
    let _ = writeln!(s, "items           {}", data.p());
    let _ = writeln!(s, "factors         {}", params.q);
    let _ = writeln!(s, "converged       {}", result.converged);
    let _ = writeln!(s, "valid           {}", result.valid);
    let _ = writeln!(s, "iterations      {}", result.iterations);
    let _ = writeln!(s, "log_likelihood  {:.6}", result.log_lik);
    let _ = writeln!(s, "failure         {}", result.failure.as_deref().unwrap_or("-"));
    let _ = writeln!(s);
    let max_t = params.items.iter().map(|it| it.thresholds.len()).max().unwrap_or(0);
    let _ = write!(s, "{:<12}", "item");
    for k in 1..=max_t {
        let _ = write!(s, " {:>12}", format!("tau_{k}"));
    }
    for j in 1..=params.q {
        let _ = write!(s, " {:>12}", format!("alpha_{j}"));
    }
    let _ = writeln!(s);
    for (i, (it, name)) in params.items.iter().zip(data.item_names()).enumerate() {
        let _ = write!(s, "{name:<12}");
        for k in 0..max_t {
            match it.thresholds.get(k) {
                Some(t) => {
                    let _ = write!(s, " {t:>12.6}");
                }
                None => {
                    let _ = write!(s, " {:>12}", "-");
                }
            }
        }
        for (j, a) in it.loadings.iter().enumerate() {
            let cell = if params.fixed[i][j] { "0 (fixed)".to_owned() } else { format!("{a:.6}") };
            let _ = write!(s, " {cell:>12}");
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<10} {:>18} {:>12}", "iteration", "log_likelihood", "max_change");
    for (k, r) in result.trace.iter().enumerate() {
        let _ = writeln!(s, "{:<10} {:>18.9} {:>12}", k + 1, r.log_lik, opt(r.max_change));
    }
    s
}

pub fn format_study_report(report: &StudyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# study {}  n={}  replicates={}  seed={}",
        report.scenario, report.n, report.replicates, report.seed
    );
    for m in &report.methods {
        let _ = writeln!(s);
        let _ = writeln!(s, "## method {}", m.method);
        let _ = writeln!(s, "% valid samples  {:.2}  ({}/{})", m.percent_valid, m.valid, m.replicates);
        let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>10} {:>10}", "parameter", "true", "mean", "bias", "mse");
        for p in m.loadings.iter().chain(&m.thresholds) {
            let _ = writeln!(
                s,
                "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                p.label, p.true_value, p.mean, p.bias, p.mse
            );
        }
        for f in &m.failures {
            let _ = writeln!(s, "invalid replicate {}: {}", f.replicate, f.reason);
        }
    }
    s
}

pub fn format_diagnostics(diag: &MardiaDiagnostics, data: &OrdinalDataset, config: &MardiaConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# posterior shape diagnostics");
    let _ = writeln!(s, "observations        {}", data.n());
    let _ = writeln!(s, "effective_n         {}", config.effective_n);
    let _ = writeln!(s, "level               {}", config.level);
    let _ = writeln!(s, "mean_beta1          {:.6}", diag.mean_beta1);
    let _ = writeln!(s, "max_beta1           {:.6}", diag.max_beta1);
    let _ = writeln!(s, "mean_beta2          {:.6}", diag.mean_beta2);
    let _ = writeln!(s, "skew_flag_rate      {:.2}", diag.skew_rate);
    let _ = writeln!(s, "kurtosis_flag_rate  {:.2}", diag.kurtosis_rate);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<8} {:<16} {:>10} {:>10} {:>5} {:>5}", "obs", "pattern", "beta1", "beta2", "skew", "kurt");
    for l in 0..data.n() {
        let pattern: Vec<String> = data.pattern(l).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "{:<8} {:<16} {:>10.6} {:>10.6} {:>5} {:>5}",
            l + 1,
            pattern.join(""),
            diag.beta1[l],
            diag.beta2[l],
            u8::from(diag.skew_flags[l]),
            u8::from(diag.kurtosis_flags[l])
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_zero_is_a_line_numbered_error() {
        let text = "a,b\n1,2\n2,0\n";
        match read_dataset(text.as_bytes(), None) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("'b'"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_a_line_numbered_error() {
        let text = "a,b\n1,2\n2\n";
        assert!(matches!(read_dataset(text.as_bytes(), None), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let text = "x,y,z\n1,2,3\n3,1,2\n";
        let data = read_dataset(text.as_bytes(), None).unwrap();
        let mut out = Vec::new();
        write_dataset(&mut out, &data).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn scenario_round_trip_and_unknown_keys() {
        let spec = ScenarioSpec::symmetric(50);
        let file = ScenarioFile::from_spec(&spec);
        let parsed = ScenarioFile::parse(&file.to_toml()).unwrap();
        assert_eq!(parsed.spec().unwrap(), spec);
        let bad = format!("{}\ncolour = 3\n", "name = \"x\"\nn = 3\nq = 1\nitems = []");
        assert!(matches!(ScenarioFile::parse(&bad), Err(Error::Parse { .. })));
    }
}
