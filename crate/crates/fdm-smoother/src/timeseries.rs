//! Uniformly sampled, named, unit-tagged signal tables and the
//! operations the reconstruction pipeline needs on them: CSV load/store,
//! rate conversion, and landing-window extraction.
//!
//! The canonical interchange format is CSV with one header row, a `t`
//! column in seconds, decimal points, and empty cells for missing
//! values. Header cells may carry a unit annotation as `name [unit]`;
//! when present it is checked against the declared [`SignalSpec`].

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub const FT_TO_M: f64 = 0.3048;

/// Interpolation class of a signal, selected per column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalKind {
    /// Piecewise-linear interpolation.
    Continuous,
    /// Previous-value hold (enumerated or stepped signals).
    Discrete,
    /// Linear interpolation on the unwrapped circle with the given
    /// period (2*pi for radians, 360 for degrees).
    Angular { period: f64 },
}

/// Declared metadata of one recorded or simulated signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub name: String,
    pub unit: String,
    /// Rate the signal was originally sampled at, in Hz.
    pub native_rate_hz: f64,
    pub kind: SignalKind,
    /// Recorded signals must have native rates in [1/4, 16] Hz; simulated
    /// signals may use any positive rate.
    pub recorded: bool,
}

impl SignalSpec {
    pub fn new(name: &str, unit: &str, native_rate_hz: f64) -> Self {
        Self {
            name: name.to_string(),
            unit: unit.to_string(),
            native_rate_hz,
            kind: SignalKind::Continuous,
            recorded: true,
        }
    }

    pub fn simulated(name: &str, unit: &str, native_rate_hz: f64) -> Self {
        Self {
            recorded: false,
            ..Self::new(name, unit, native_rate_hz)
        }
    }

    pub fn discrete(mut self) -> Self {
        self.kind = SignalKind::Discrete;
        self
    }

    pub fn angular(mut self, period: f64) -> Self {
        self.kind = SignalKind::Angular { period };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("signal name must not be empty".into()));
        }
        if !(self.native_rate_hz > 0.0) {
            return Err(Error::Schema(format!(
                "signal {}: native rate must be positive, got {}",
                self.name, self.native_rate_hz
            )));
        }
        if self.recorded && !(0.25..=16.0).contains(&self.native_rate_hz) {
            return Err(Error::Schema(format!(
                "recorded signal {}: native rate {} Hz outside [1/4, 16] Hz",
                self.name, self.native_rate_hz
            )));
        }
        Ok(())
    }
}

/// One signal column: metadata plus values on the table's time grid.
/// `None` marks a missing (unrecorded) cell.
#[derive(Debug, Clone)]
pub struct Column {
    pub spec: SignalSpec,
    pub values: Vec<Option<f64>>,
}

/// Uniformly sampled signal table over a shared time grid
/// `t_k = t0 + k * dt`.
#[derive(Debug, Clone)]
pub struct TimeSeriesTable {
    pub t0: f64,
    pub dt: f64,
    columns: IndexMap<String, Column>,
    n_rows: usize,
}

impl TimeSeriesTable {
    pub fn new(t0: f64, dt: f64, n_rows: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Argument(format!("dt must be positive, got {dt}")));
        }
        if n_rows < 2 {
            return Err(Error::Argument(format!(
                "a table needs at least 2 rows, got {n_rows}"
            )));
        }
        Ok(Self {
            t0,
            dt,
            columns: IndexMap::new(),
            n_rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn rate_hz(&self) -> f64 {
        1.0 / self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_rows).map(|k| self.time(k)).collect()
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(|s| s.as_str())
    }

    pub fn columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.values()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.get(name)
    }

    pub fn require_column(&self, name: &str) -> Result<&Column> {
        self.column(name)
            .ok_or_else(|| Error::Schema(format!("missing column: {name}")))
    }

    pub fn get(&self, name: &str, k: usize) -> Option<f64> {
        self.columns.get(name).and_then(|c| c.values[k])
    }

    pub fn insert_column(&mut self, spec: SignalSpec, values: Vec<Option<f64>>) -> Result<()> {
        spec.validate()?;
        if values.len() != self.n_rows {
            return Err(Error::Schema(format!(
                "column {} has {} rows, table has {}",
                spec.name,
                values.len(),
                self.n_rows
            )));
        }
        if self.columns.contains_key(&spec.name) {
            return Err(Error::Schema(format!("duplicate column: {}", spec.name)));
        }
        self.columns
            .insert(spec.name.clone(), Column { spec, values });
        Ok(())
    }

    /// Copy of the table restricted to `[window.start, window.end]`,
    /// with `t0` rebased onto the window start.
    pub fn slice(&self, window: &FlightWindow) -> Result<TimeSeriesTable> {
        if window.end >= self.n_rows {
            return Err(Error::Argument(format!(
                "window end {} outside table of {} rows",
                window.end, self.n_rows
            )));
        }
        let n = window.end - window.start + 1;
        let mut out = TimeSeriesTable::new(self.time(window.start), self.dt, n)?;
        for col in self.columns.values() {
            out.insert_column(
                col.spec.clone(),
                col.values[window.start..=window.end].to_vec(),
            )?;
        }
        Ok(out)
    }
}

/// Index range of the landing phase inside a table, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlightWindow {
    pub start: usize,
    pub end: usize,
}

fn split_header(cell: &str) -> (String, Option<String>) {
    let cell = cell.trim();
    if let Some(open) = cell.find('[') {
        if let Some(close) = cell.rfind(']') {
            if close > open {
                let name = cell[..open].trim().to_string();
                let unit = cell[open + 1..close].trim().to_string();
                return (name, Some(unit));
            }
        }
    }
    (cell.to_string(), None)
}

/// Load a CSV table containing at least the declared signals.
///
/// The file must have a `t` column in seconds on a uniform, strictly
/// increasing grid. Empty cells become missing values. Unit
/// annotations in headers (`name [unit]`) are checked against the specs.
pub fn load_table(path: &std::path::Path, specs: &[SignalSpec]) -> Result<TimeSeriesTable> {
    for spec in specs {
        spec.validate()?;
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let parsed_headers: Vec<(String, Option<String>)> = headers.iter().map(split_header).collect();

    let find = |name: &str| -> Option<usize> { parsed_headers.iter().position(|(n, _)| n == name) };
    let t_idx = find("t").ok_or_else(|| Error::Schema("missing column: t".into()))?;

    let mut col_idx = Vec::with_capacity(specs.len());
    for spec in specs {
        let idx = find(&spec.name)
            .ok_or_else(|| Error::Schema(format!("missing column: {}", spec.name)))?;
        if let (_, Some(unit)) = &parsed_headers[idx] {
            if unit != &spec.unit {
                return Err(Error::Unit(format!(
                    "column {}: file declares unit '{}', spec expects '{}'",
                    spec.name, unit, spec.unit
                )));
            }
        }
        col_idx.push(idx);
    }

    let mut times: Vec<f64> = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); specs.len()];
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let t_cell = record.get(t_idx).unwrap_or("").trim();
        let t: f64 = t_cell.parse().map_err(|_| {
            Error::Format(format!(
                "row {}: cannot parse time '{}'",
                row_no + 1,
                t_cell
            ))
        })?;
        times.push(t);
        for (j, &idx) in col_idx.iter().enumerate() {
            let cell = record.get(idx).unwrap_or("").trim();
            if cell.is_empty() {
                cells[j].push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Format(format!(
                        "row {}, column {}: cannot parse '{}'",
                        row_no + 1,
                        specs[j].name,
                        cell
                    ))
                })?;
                cells[j].push(Some(v));
            }
        }
    }

    if times.len() < 2 {
        return Err(Error::Format(format!(
            "table needs at least 2 rows, got {}",
            times.len()
        )));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::Format(format!(
            "time grid not strictly increasing: t[1] - t[0] = {dt}"
        )));
    }
    for k in 1..times.len() {
        let step = times[k] - times[k - 1];
        if !(step > 0.0) {
            return Err(Error::Format(format!(
                "time grid not strictly increasing at row {} (t = {})",
                k + 1,
                times[k]
            )));
        }
        if (step - dt).abs() > 1e-6 * dt.max(1.0) {
            return Err(Error::Format(format!(
                "non-uniform time step at row {}: {} vs {}",
                k + 1,
                step,
                dt
            )));
        }
    }

    let mut table = TimeSeriesTable::new(times[0], dt, times.len())?;
    for (spec, values) in specs.iter().zip(cells) {
        table.insert_column(spec.clone(), values)?;
    }
    Ok(table)
}

/// Write a table in the canonical CSV format (`name [unit]` headers,
/// empty cells for missing values).
pub fn save_table(table: &TimeSeriesTable, path: &std::path::Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t [s]".to_string()];
    for col in table.columns() {
        header.push(format!("{} [{}]", col.spec.name, col.spec.unit));
    }
    w.write_record(&header)?;
    for k in 0..table.n_rows() {
        let mut row = vec![format!("{}", table.time(k))];
        for col in table.columns() {
            row.push(match col.values[k] {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Segments of consecutive non-missing samples: (index, value) pairs.
fn valid_points(values: &[Option<f64>]) -> Vec<(usize, f64)> {
    values
        .iter()
        .enumerate()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
}

/// Unwrap a sequence of angles so consecutive samples differ by less
/// than half a period.
fn unwrap_angles(points: &mut [(usize, f64)], period: f64) {
    let half = period / 2.0;
    let mut offset = 0.0;
    let mut prev = match points.first() {
        Some(&(_, v)) => v,
        None => return,
    };
    for p in points.iter_mut().skip(1) {
        let raw = p.1;
        let mut delta = raw - prev;
        while delta > half {
            delta -= period;
        }
        while delta < -half {
            delta += period;
        }
        offset += delta - (raw - prev);
        prev = raw;
        p.1 = raw + offset;
    }
}

fn rewrap(value: f64, period: f64) -> f64 {
    let mut v = value % period;
    if v < 0.0 {
        v += period;
    }
    v
}

/// Resample every column onto a common grid at `target_rate_hz`.
///
/// Continuous columns interpolate linearly, discrete columns hold the
/// previous value, angular columns interpolate on the unwrapped circle.
/// Holes longer than `2 / target_rate_hz` seconds are preserved as
/// missing; shorter holes are bridged. A table already on the target
/// grid is returned unchanged.
pub fn resample(table: &TimeSeriesTable, target_rate_hz: f64) -> Result<TimeSeriesTable> {
    if !(target_rate_hz > 0.0) {
        return Err(Error::Argument(format!(
            "target rate must be positive, got {target_rate_hz}"
        )));
    }
    if table.columns.is_empty() {
        return Err(Error::Argument("cannot resample an empty table".into()));
    }
    let dt_new = 1.0 / target_rate_hz;
    if (dt_new - table.dt).abs() <= 1e-12 * table.dt {
        return Ok(table.clone());
    }

    let span = (table.n_rows - 1) as f64 * table.dt;
    let n_new = (span / dt_new + 1e-9).floor() as usize + 1;
    let n_new = n_new.max(2);
    let max_hole = 2.0 * dt_new;

    let mut out = TimeSeriesTable::new(table.t0, dt_new, n_new)?;
    for col in table.columns.values() {
        let mut points = valid_points(&col.values);
        let angular_period = match col.spec.kind {
            SignalKind::Angular { period } => {
                unwrap_angles(&mut points, period);
                Some(period)
            }
            _ => None,
        };
        let mut values = Vec::with_capacity(n_new);
        let mut seg = 0usize; // index into points of the left bracket
        for k in 0..n_new {
            let t = table.t0 + k as f64 * dt_new;
            if points.is_empty() {
                values.push(None);
                continue;
            }
            while seg + 1 < points.len() && table.time(points[seg + 1].0) <= t + 1e-9 * dt_new {
                seg += 1;
            }
            let (ka, va) = points[seg];
            let ta = table.time(ka);
            // Exact grid hit: copy the source value bit for bit.
            if (t - ta).abs() <= 1e-9 * dt_new {
                values.push(Some(match angular_period {
                    Some(p) => rewrap(va, p),
                    None => va,
                }));
                continue;
            }
            if t < ta {
                values.push(None); // before the first valid sample
                continue;
            }
            if seg + 1 >= points.len() {
                values.push(None); // past the last valid sample
                continue;
            }
            let (kb, vb) = points[seg + 1];
            let tb = table.time(kb);
            let hole = (kb - ka - 1) as f64 * table.dt;
            if hole > max_hole {
                values.push(None);
                continue;
            }
            let v = match col.spec.kind {
                SignalKind::Discrete => va,
                _ => {
                    let alpha = (t - ta) / (tb - ta);
                    va + alpha * (vb - va)
                }
            };
            values.push(Some(match angular_period {
                Some(p) => rewrap(v, p),
                None => v,
            }));
        }
        out.insert_column(col.spec.clone(), values)?;
    }
    Ok(out)
}

/// Column names and thresholds used by [`extract_landing_window`].
#[derive(Debug, Clone)]
pub struct WindowConfig {
    pub ralt_column: String,
    pub gnd_speed_column: String,
    /// Window starts at the last descending crossing of this radio
    /// altitude before touchdown.
    pub ralt_threshold_ft: f64,
    /// Touchdown is the first sample at or below this radio altitude.
    pub touchdown_ralt_ft: f64,
    /// Window ends when ground speed first falls below this floor, m/s.
    pub gnd_speed_floor: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            ralt_column: "h_ralt".into(),
            gnd_speed_column: "v_gnd".into(),
            ralt_threshold_ft: 1000.0,
            touchdown_ralt_ft: 5.0,
            gnd_speed_floor: 15.0,
        }
    }
}

fn ralt_in_meters(col: &Column) -> Result<f64> {
    match col.spec.unit.as_str() {
        "m" => Ok(1.0),
        "ft" => Ok(FT_TO_M),
        other => Err(Error::Unit(format!(
            "radio altitude column {} has unit '{}', expected 'm' or 'ft'",
            col.spec.name, other
        ))),
    }
}

/// Locate the landing phase: from the final descent through the
/// configured radio-altitude threshold until ground speed drops below
/// the taxi floor after touchdown.
pub fn extract_landing_window(table: &TimeSeriesTable, cfg: &WindowConfig) -> Result<FlightWindow> {
    let ralt = table.require_column(&cfg.ralt_column)?;
    let gspd = table.require_column(&cfg.gnd_speed_column)?;
    let scale = ralt_in_meters(ralt)?;
    // Work in meters throughout.
    let ralt_m: Vec<Option<f64>> = ralt.values.iter().map(|v| v.map(|x| x * scale)).collect();
    let thr_m = cfg.ralt_threshold_ft * FT_TO_M;
    let td_m = cfg.touchdown_ralt_ft * FT_TO_M;

    let n = table.n_rows();
    let mut seen_above = false;
    let mut touchdown = None;
    for k in 0..n {
        let Some(h) = ralt_m[k] else { continue };
        if h >= thr_m {
            seen_above = true;
        }
        if seen_above && h <= td_m {
            touchdown = Some(k);
            break;
        }
    }
    let touchdown = touchdown.ok_or_else(|| {
        Error::Window(format!(
            "no touchdown after a descent through {} ft found",
            cfg.ralt_threshold_ft
        ))
    })?;

    // Last descending crossing of the threshold before touchdown.
    let mut crossing = None;
    let mut prev: Option<(usize, f64)> = None;
    for k in 0..=touchdown {
        let Some(h) = ralt_m[k] else { continue };
        if let Some((kp, hp)) = prev {
            if hp >= thr_m && h < thr_m {
                // Interpolate the crossing time and round to the grid.
                let alpha = (hp - thr_m) / (hp - h);
                let t_cross = table.time(kp) + alpha * (table.time(k) - table.time(kp));
                let idx = ((t_cross - table.t0) / table.dt).round() as usize;
                crossing = Some(idx.min(n - 1));
            }
        }
        prev = Some((k, h));
    }
    let start = crossing.ok_or_else(|| {
        Error::Window(format!(
            "no descending crossing of {} ft before touchdown",
            cfg.ralt_threshold_ft
        ))
    })?;

    let mut end = n - 1;
    for k in touchdown..n {
        if let Some(v) = gspd.values[k] {
            if v < cfg.gnd_speed_floor {
                end = k;
                break;
            }
        }
    }
    if start >= end {
        return Err(Error::Window(format!(
            "degenerate window: start {start} >= end {end}"
        )));
    }
    Ok(FlightWindow { start, end })
}
