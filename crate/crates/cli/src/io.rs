//! Schema-versioned file formats. Every text file starts with `# schema=1`
//! and every JSON document carries `"schema": 1`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use icl_ts_core::encoding::TimeSeries;
use icl_ts_core::numerics::DenseMatrix;
use icl_ts_core::synth::{ArParams, ArRanges, Dataset, DatasetMeta, SeasonalitySpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA: u32 = 1;
pub const SCHEMA_LINE: &str = "# schema=1";

/// Writes `# schema=1`, optional extra comment lines, then CSV records.
pub fn write_csv<P: AsRef<Path>>(
    path: P,
    comments: &[String],
    header: &[&str],
    rows: &[Vec<String>],
) -> CliResult<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{SCHEMA_LINE}")?;
    for c in comments {
        writeln!(buf, "# {c}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads the records of a schema-versioned CSV, checking the version line.
pub fn read_csv<P: AsRef<Path>>(path: P) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if text.lines().next() != Some(SCHEMA_LINE) {
        return Err(CliError::Config(format!("{}: missing `{SCHEMA_LINE}`", path.display())));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

/// JSON document with the schema field prepended.
#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema: u32,
    #[serde(flatten)]
    body: T,
}

pub fn to_json_string<T: Serialize>(value: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(&Versioned {
        schema: SCHEMA,
        body: value,
    })?)
}

pub fn write_json<T: Serialize, P: AsRef<Path>>(path: P, value: &T) -> CliResult<()> {
    fs::write(path, to_json_string(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned, P: AsRef<Path>>(path: P) -> CliResult<T> {
    let path = path.as_ref();
    let v: Versioned<T> = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if v.schema != SCHEMA {
        return Err(CliError::Config(format!(
            "{}: schema {} is not supported",
            path.display(),
            v.schema
        )));
    }
    Ok(v.body)
}

/// Reads a plain (unversioned) JSON config, or a versioned one.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_series<P: AsRef<Path>>(path: P, s: &TimeSeries) -> CliResult<()> {
    let rows: Vec<Vec<String>> = (0..s.d())
        .flat_map(|j| (0..s.len()).map(move |t| (j, t)))
        .map(|(j, t)| vec![j.to_string(), t.to_string(), format!("{:?}", s.get(j, t))])
        .collect();
    write_csv(path, &[], &["variate", "t", "value"], &rows)
}

pub fn read_series<P: AsRef<Path>>(path: P) -> CliResult<TimeSeries> {
    let path = path.as_ref();
    let (header, rows) = read_csv(path)?;
    if header != ["variate", "t", "value"] {
        return Err(CliError::Config(format!("{}: unexpected header {header:?}", path.display())));
    }
    let parse = |s: &str| -> CliResult<f64> {
        s.parse().map_err(|_| CliError::Config(format!("{}: bad number {s:?}", path.display())))
    };
    let mut cells = Vec::with_capacity(rows.len());
    let (mut d, mut t) = (0, 0);
    for r in &rows {
        let j = parse(&r[0])? as usize;
        let k = parse(&r[1])? as usize;
        d = d.max(j + 1);
        t = t.max(k + 1);
        cells.push((j, k, parse(&r[2])?));
    }
    if cells.len() != d * t {
        return Err(CliError::Config(format!("{}: incomplete series grid", path.display())));
    }
    let mut m = DenseMatrix::zeros(d, t);
    for (j, k, v) in cells {
        m.set(j, k, v);
    }
    Ok(TimeSeries::new(m)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub seed: u64,
    pub d: usize,
    pub q: usize,
    pub sigma2: f64,
    pub file: String,
    pub params: ArParams,
    pub seasonality: Option<SeasonalitySpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub n: usize,
    pub t: usize,
    pub ranges: ArRanges,
    pub series: Vec<SeriesEntry>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn series_file(i: usize) -> String {
    format!("series_{i:04}.csv")
}

/// Writes `manifest.json` and one CSV per series into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> CliResult<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(data.series.len());
    for (i, (s, p)) in data.series.iter().zip(&data.params).enumerate() {
        let file = series_file(i);
        write_series(dir.join(&file), s)?;
        entries.push(SeriesEntry {
            seed: p.seed,
            d: p.d,
            q: p.q,
            sigma2: p.noise_var,
            file,
            params: p.clone(),
            seasonality: data.seasonality.get(i).copied().flatten(),
        });
    }
    let manifest = DatasetManifest {
        master_seed: data.meta.master_seed,
        n: data.series.len(),
        t: data.meta.t,
        ranges: data.meta.ranges.clone(),
        series: entries,
    };
    write_json(dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> CliResult<Dataset> {
    let m: DatasetManifest = read_json(dir.join(MANIFEST))?;
    let mut series = Vec::with_capacity(m.series.len());
    for e in &m.series {
        series.push(read_series(dir.join(&e.file))?);
    }
    Ok(Dataset {
        series,
        params: m.series.iter().map(|e| e.params.clone()).collect(),
        seasonality: m.series.iter().map(|e| e.seasonality).collect(),
        meta: DatasetMeta {
            ranges: m.ranges,
            master_seed: m.master_seed,
            t: m.t,
        },
    })
}

/// `dir/name`, creating `dir` when needed.
pub fn out_path(dir: &Path, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}
