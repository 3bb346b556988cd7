//! Trajectory file parsing, window construction, centering and
//! rotation, and leave-one-out splits.
//!
//! Input files are plain text, one record per line, whitespace
//! separated, default column order (frame, ped_id, x, y) with
//! coordinates in meters. Frame numbers may be strided (e.g. every
//! 10th video frame); the stride is inferred per file.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// The five ETH/UCY set labels used by the leave-one-out protocol.
pub const SET_LABELS: [&str; 5] = ["ETH", "HOTEL", "UNIV", "ZARA-1", "ZARA-2"];

/// One line of a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    /// Original frame number as read from the file.
    pub frame: i64,
    /// Consecutive step index after stride removal.
    pub step: usize,
    pub ped_id: i64,
    pub x: f64,
    pub y: f64,
}

/// One multi-pedestrian training/evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// [N x (t_obs + t_pred) x 2], meters.
    pub positions: Tensor,
    pub ped_ids: Vec<i64>,
    /// Shift removed by the last centering; zeros if never centered.
    pub centroid: Tensor,
    pub source: String,
    pub t_obs: usize,
    pub t_pred: usize,
}

impl Window {
    pub fn n_peds(&self) -> usize {
        self.ped_ids.len()
    }

    pub fn horizon(&self) -> usize {
        self.t_obs + self.t_pred
    }

    /// Position of pedestrian `i` at step index `t` (0-based).
    pub fn pos(&self, i: usize, t: usize) -> (f64, f64) {
        (self.positions.at3(i, t, 0), self.positions.at3(i, t, 1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_sets: Vec<String>,
    pub test_set: String,
}

/// Which input column holds which field.
#[derive(Debug, Clone, Copy)]
pub struct ColumnMap {
    pub frame: usize,
    pub ped_id: usize,
    pub x: usize,
    pub y: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self { frame: 0, ped_id: 1, x: 2, y: 3 }
    }
}

impl ColumnMap {
    fn width(&self) -> usize {
        1 + self.frame.max(self.ped_id).max(self.x).max(self.y)
    }
}

fn parse_int_field(s: &str, line: usize, what: &str) -> Result<i64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad {what}: {s:?}"),
    })?;
    let r = v.round();
    if (v - r).abs() > 1e-6 || !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{what} is not an integer: {s:?}"),
        });
    }
    Ok(r as i64)
}

/// Parse one trajectory file. Records come back sorted by
/// (frame, ped_id) with frames remapped to consecutive step indices
/// via the inferred constant frame stride.
pub fn parse_dataset(text: &str, columns: ColumnMap) -> Result<Vec<RawRecord>> {
    let mut records: Vec<RawRecord> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < columns.width() {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "expected at least {} fields, found {}",
                    columns.width(),
                    fields.len()
                ),
            });
        }
        let frame = parse_int_field(fields[columns.frame], lineno, "frame")?;
        let ped_id = parse_int_field(fields[columns.ped_id], lineno, "ped_id")?;
        let x: f64 = fields[columns.x].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad x: {:?}", fields[columns.x]),
        })?;
        let y: f64 = fields[columns.y].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad y: {:?}", fields[columns.y]),
        })?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                message: "non-finite coordinate".to_string(),
            });
        }
        records.push(RawRecord { frame, step: 0, ped_id, x, y });
    }
    records.sort_by_key(|r| (r.frame, r.ped_id));
    for pair in records.windows(2) {
        if pair[0].frame == pair[1].frame && pair[0].ped_id == pair[1].ped_id {
            return Err(Error::Format(format!(
                "duplicate record for frame {} ped {}",
                pair[0].frame, pair[0].ped_id
            )));
        }
    }

    // Infer the constant frame stride and remap to step indices.
    let mut frames: Vec<i64> = records.iter().map(|r| r.frame).collect();
    frames.dedup();
    let stride = match frames.len() {
        0 | 1 => 1,
        _ => {
            let diffs: Vec<i64> = frames.windows(2).map(|w| w[1] - w[0]).collect();
            let s = diffs[0];
            if diffs.iter().any(|&d| d != s) {
                return Err(Error::Format(format!(
                    "inconsistent frame strides: found {:?}",
                    {
                        let mut u = diffs.clone();
                        u.sort_unstable();
                        u.dedup();
                        u
                    }
                )));
            }
            s
        }
    };
    let min_frame = frames.first().copied().unwrap_or(0);
    for r in &mut records {
        r.step = ((r.frame - min_frame) / stride) as usize;
    }
    Ok(records)
}

/// Serialize records back to the input format (original frame numbers).
pub fn serialize_records(records: &[RawRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {} {} {}\n", r.frame, r.ped_id, r.x, r.y));
    }
    out
}

/// Sliding-window extraction. A pedestrian joins a window only when
/// present at every one of the t_obs + t_pred consecutive steps.
pub fn build_windows(
    records: &[RawRecord],
    t_obs: usize,
    t_pred: usize,
    stride: usize,
    source: &str,
) -> Result<Vec<Window>> {
    if t_obs < 2 {
        return Err(Error::Config("t_obs must be >= 2".to_string()));
    }
    if t_pred < 1 || stride < 1 {
        return Err(Error::Config("t_pred and stride must be >= 1".to_string()));
    }
    let horizon = t_obs + t_pred;
    let mut tracks: BTreeMap<i64, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
    let mut max_step = 0;
    for r in records {
        tracks.entry(r.ped_id).or_default().insert(r.step, (r.x, r.y));
        max_step = max_step.max(r.step);
    }
    let mut windows = Vec::new();
    if records.is_empty() || max_step + 1 < horizon {
        return Ok(windows);
    }
    let mut start = 0;
    while start + horizon <= max_step + 1 {
        let mut ped_ids = Vec::new();
        let mut coords = Vec::new();
        for (&ped, track) in &tracks {
            if (start..start + horizon).all(|t| track.contains_key(&t)) {
                ped_ids.push(ped);
                for t in start..start + horizon {
                    let (x, y) = track[&t];
                    coords.push(x);
                    coords.push(y);
                }
            }
        }
        if !ped_ids.is_empty() {
            let n = ped_ids.len();
            windows.push(Window {
                positions: Tensor::new(vec![n, horizon, 2], coords)?,
                ped_ids,
                centroid: Tensor::zeros(vec![2]),
                source: format!("{source}@{start}"),
                t_obs,
                t_pred,
            });
        }
        start += stride;
    }
    Ok(windows)
}

/// Subtract the crowd centroid at the last observed step from every
/// coordinate, recording the shift for later de-centering.
pub fn center_window(w: &Window) -> Window {
    let n = w.n_peds();
    let last_obs = w.t_obs - 1;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let (x, y) = w.pos(i, last_obs);
        cx += x;
        cy += y;
    }
    cx /= n as f64;
    cy /= n as f64;
    let mut out = w.clone();
    for i in 0..n {
        for t in 0..w.horizon() {
            out.positions.set3(i, t, 0, w.positions.at3(i, t, 0) - cx);
            out.positions.set3(i, t, 1, w.positions.at3(i, t, 1) - cy);
        }
    }
    out.centroid = Tensor::row(vec![cx, cy]);
    out
}

/// Rotate every coordinate of a centered window by `theta` radians.
pub fn rotate_window(w: &Window, theta: f64) -> Window {
    let (s, c) = theta.sin_cos();
    let mut out = w.clone();
    for i in 0..w.n_peds() {
        for t in 0..w.horizon() {
            let (x, y) = w.pos(i, t);
            out.positions.set3(i, t, 0, c * x - s * y);
            out.positions.set3(i, t, 1, s * x + c * y);
        }
    }
    out
}

/// Random rotation angle for training augmentation.
pub fn random_rotation_angle(rng: &mut impl Rng) -> f64 {
    rng.gen_range(0.0..2.0 * PI)
}

pub fn leave_one_out_split(held_out: &str) -> Result<SplitPlan> {
    if !SET_LABELS.contains(&held_out) {
        return Err(Error::Config(format!(
            "unknown set label {held_out:?}; expected one of {SET_LABELS:?}"
        )));
    }
    Ok(SplitPlan {
        train_sets: SET_LABELS
            .iter()
            .filter(|&&l| l != held_out)
            .map(|&l| l.to_string())
            .collect(),
        test_set: held_out.to_string(),
    })
}

/// Load every .txt file under `root/<label>/` and build windows.
pub fn load_set_windows(
    root: &Path,
    label: &str,
    columns: ColumnMap,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    let dir = root.join(label);
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "dataset directory not found: {}",
            dir.display()
        )));
    }
    let mut files: Vec<_> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
        .collect();
    files.sort();
    let mut windows = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)?;
        let records = parse_dataset(&text, columns)?;
        let source = format!("{}/{}", label, file.file_name().unwrap().to_string_lossy());
        windows.extend(build_windows(&records, t_obs, t_pred, stride, &source)?);
    }
    Ok(windows)
}

/// Synthetic window with N smooth random tracks, for benchmarks and
/// self-tests.
pub fn synthetic_window(
    n: usize,
    t_obs: usize,
    t_pred: usize,
    rng: &mut impl Rng,
) -> Window {
    let horizon = t_obs + t_pred;
    let mut coords = Vec::with_capacity(n * horizon * 2);
    for _ in 0..n {
        let x0 = rng.gen_range(-5.0..5.0);
        let y0 = rng.gen_range(-5.0..5.0);
        let vx = rng.gen_range(-0.5..0.5);
        let vy = rng.gen_range(-0.5..0.5);
        let curve = rng.gen_range(-0.05..0.05);
        for t in 0..horizon {
            let tf = t as f64;
            coords.push(x0 + vx * tf + curve * tf * tf * 0.1);
            coords.push(y0 + vy * tf - curve * tf * tf * 0.1);
        }
    }
    Window {
        positions: Tensor::unchecked(vec![n, horizon, 2], coords),
        ped_ids: (0..n as i64).collect(),
        centroid: Tensor::zeros(vec![2]),
        source: format!("synthetic-n{n}"),
        t_obs,
        t_pred,
    }
}
