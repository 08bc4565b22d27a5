//! CSV dataset format.
//!
//! Header `id,time,obs,dose`; vector observations use several columns whose
//! names start with `obs` (`obs1,obs2,...`) between `time` and `dose`. Rows of
//! one subject are contiguous. A row with a nonzero dose and every `obs` field
//! empty is a pure dose record; any other row is an observation time, with
//! empty `obs` fields marking missing components. A row may carry both.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NpagError, Result};
use crate::filtering::{Dose, Subject};

struct Layout {
    id: usize,
    time: usize,
    obs: Vec<usize>,
    dose: usize,
}

fn layout(headers: &csv::StringRecord) -> Result<Layout> {
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let find = |name: &str| names.iter().position(|h| *h == name);
    let missing = |name: &str| NpagError::Data { line: 1, reason: format!("header lacks a `{name}` column") };
    let id = find("id").ok_or_else(|| missing("id"))?;
    let time = find("time").ok_or_else(|| missing("time"))?;
    let dose = find("dose").ok_or_else(|| missing("dose"))?;
    let obs: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with("obs")).collect();
    if obs.is_empty() {
        return Err(missing("obs"));
    }
    if let Some(extra) = (0..names.len()).find(|&i| i != id && i != time && i != dose && !obs.contains(&i)) {
        return Err(NpagError::Data {
            line: 1,
            reason: format!("unknown column `{}`; expected id, time, obs..., dose", names[extra]),
        });
    }
    Ok(Layout { id, time, obs, dose })
}

fn number(field: &str, what: &str, line: usize) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(NpagError::Data { line, reason: format!("{what} `{field}` is not a finite number") }),
    }
}

#[derive(Default)]
struct Pending {
    id: String,
    times: Vec<f64>,
    observations: Vec<Vec<Option<f64>>>,
    doses: Vec<Dose>,
    last_time: f64,
}

impl Pending {
    fn finish(self) -> Result<Subject> {
        Subject::new(self.id, self.times, self.observations, self.doses)
    }
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<Subject>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let layout = layout(reader.headers()?)?;
    let mut subjects = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut current: Option<Pending> = None;

    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| NpagError::Data { line, reason: e.to_string() })?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let id = field(layout.id).trim().to_string();
        if id.is_empty() {
            return Err(NpagError::Data { line, reason: "empty subject id".into() });
        }
        let time = number(field(layout.time), "time", line)?
            .ok_or_else(|| NpagError::Data { line, reason: "empty time".into() })?;
        let obs = layout
            .obs
            .iter()
            .map(|&i| number(field(i), "observation", line))
            .collect::<Result<Vec<_>>>()?;
        let dose = number(field(layout.dose), "dose", line)?.unwrap_or(0.0);

        if current.as_ref().is_none_or(|p| p.id != id) {
            if !seen.insert(id.clone()) {
                return Err(NpagError::Data { line, reason: format!("rows of subject `{id}` are not contiguous") });
            }
            if let Some(done) = current.take() {
                subjects.push(done.finish()?);
            }
            current = Some(Pending { id: id.clone(), last_time: f64::NEG_INFINITY, ..Pending::default() });
        }
        let pending = current.as_mut().expect("set above");
        if time < pending.last_time {
            return Err(NpagError::Subject {
                id,
                reason: format!("time {time} at line {line} precedes the previous row's time {}", pending.last_time),
            });
        }
        pending.last_time = time;
        if dose != 0.0 {
            pending.doses.push(Dose { time, amount: dose });
        }
        if dose == 0.0 || obs.iter().any(Option::is_some) {
            if pending.times.last() == Some(&time) {
                return Err(NpagError::Subject { id, reason: format!("two observation rows at time {time} (line {line})") });
            }
            pending.times.push(time);
            pending.observations.push(obs);
        }
    }
    if let Some(done) = current {
        subjects.push(done.finish()?);
    }
    if subjects.is_empty() {
        return Err(NpagError::Data { line: 1, reason: "no data rows".into() });
    }
    Ok(subjects)
}

pub fn parse_dataset(path: &Path) -> Result<Vec<Subject>> {
    let file = std::fs::File::open(path)
        .map_err(|e| NpagError::Config(format!("cannot open data file {}: {e}", path.display())))?;
    read_dataset(std::io::BufReader::new(file))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes subjects so that [`read_dataset`] returns them unchanged. Dose rows
/// come before observations at the same time.
pub fn write_dataset<W: Write>(out: W, subjects: &[Subject]) -> Result<()> {
    let obs_dim = subjects.iter().flat_map(|s| s.observations.iter().map(Vec::len)).max().unwrap_or(1);
    if subjects.iter().flat_map(|s| &s.observations).any(|o| o.len() != obs_dim) {
        return Err(NpagError::Dimension("every observation needs the same number of components".into()));
    }
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "time".to_string()];
    if obs_dim == 1 {
        header.push("obs".into());
    } else {
        header.extend((1..=obs_dim).map(|j| format!("obs{j}")));
    }
    header.push("dose".into());
    writer.write_record(&header)?;

    for s in subjects {
        let mut doses = s.doses.iter().peekable();
        let emit_dose = |writer: &mut csv::Writer<W>, d: &Dose| -> Result<()> {
            let mut row = vec![s.id.clone(), d.time.to_string()];
            row.extend(std::iter::repeat_n(String::new(), obs_dim));
            row.push(d.amount.to_string());
            writer.write_record(&row)?;
            Ok(())
        };
        for (t, obs) in s.times.iter().zip(&s.observations) {
            while let Some(d) = doses.next_if(|d| d.time <= *t) {
                emit_dose(&mut writer, d)?;
            }
            let mut row = vec![s.id.clone(), t.to_string()];
            row.extend(obs.iter().map(|v| fmt_opt(*v)));
            row.push("0".into());
            writer.write_record(&row)?;
        }
        for d in doses {
            emit_dose(&mut writer, d)?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_dataset_file(path: &Path, subjects: &[Subject]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(file), subjects)
}
