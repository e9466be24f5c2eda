//! Sector grid, Voronoi-area weights and heat-map frames.
//!
//! A sector's value is the weighted sum of the readings of the nodes that sit
//! inside it, each weighted by the fraction of the sector covered by that
//! node's Voronoi cell. Sectors without a resident node are zero unless the
//! nearest-node fill is enabled.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::{Error, Result};

/// Tolerance, in sector units, for snapping coordinates that land on a
/// sector boundary up to the next sector despite decimal round-off.
const BOUNDARY_SNAP: f64 = 1e-9;

/// Axis-aligned geographic box split into `rows x cols` sectors.
/// Row 0 is the southern edge, column 0 the western edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lat_min: 23.90,
            lat_max: 24.45,
            lon_min: 120.37,
            lon_max: 121.020,
            rows: 40,
            cols: 40,
        }
    }
}

impl GridSpec {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, rows: usize, cols: usize) -> Result<Self> {
        let g = Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            rows,
            cols,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lat_max <= self.lat_min || self.lon_max <= self.lon_min {
            return Err(Error::invalid(format!("degenerate grid box {self:?}")));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("grid needs at least one row and column"));
        }
        Ok(())
    }

    pub fn dlat(&self) -> f64 {
        (self.lat_max - self.lat_min) / self.rows as f64
    }

    pub fn dlon(&self) -> f64 {
        (self.lon_max - self.lon_min) / self.cols as f64
    }

    pub fn sectors(&self) -> usize {
        self.rows * self.cols
    }

    /// Sector holding `(lat, lon)`, or `None` outside the box. Points on the
    /// northern or eastern edge belong to the last row or column.
    pub fn sector_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        if !(lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max) {
            return None;
        }
        let row = snap_floor((lat - self.lat_min) / self.dlat()).min(self.rows - 1);
        let col = snap_floor((lon - self.lon_min) / self.dlon()).min(self.cols - 1);
        Some((row, col))
    }

    /// Geographic centre of a sector.
    pub fn sector_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lat_min + (row as f64 + 0.5) * self.dlat(),
            self.lon_min + (col as f64 + 0.5) * self.dlon(),
        )
    }
}

fn snap_floor(x: f64) -> usize {
    (x + BOUNDARY_SNAP).floor().max(0.0) as usize
}

/// Per-sector node weights (fraction of the sector area in the node's
/// Voronoi cell), restricted to nodes located inside the sector.
#[derive(Debug, Clone, PartialEq)]
pub struct VoronoiWeightMap {
    pub grid: GridSpec,
    pub subsamples: usize,
    pub node_count: usize,
    /// Row-major, one list per sector.
    pub sectors: Vec<Vec<(usize, f64)>>,
    /// Globally nearest node to every sector centre (used by the fill mode).
    pub nearest_to_center: Vec<usize>,
}

impl VoronoiWeightMap {
    pub fn weights(&self, row: usize, col: usize) -> &[(usize, f64)] {
        &self.sectors[row * self.grid.cols + col]
    }

    /// Per-sector weight sums: a static map of how well each sector is
    /// covered by resident nodes.
    pub fn density_map(&self) -> Vec<f64> {
        self.sectors
            .iter()
            .map(|list| list.iter().map(|(_, w)| w).sum())
            .collect()
    }
}

fn nearest_node(nodes: &[(f64, f64)], lat: f64, lon: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &(nlat, nlon)) in nodes.iter().enumerate() {
        let d = (nlat - lat).powi(2) + (nlon - lon).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Estimates Voronoi-cell areas by assigning an `s x s` lattice of sample
/// points per sector to their globally nearest node (Euclidean in degree
/// space, ties to the lower index). Coincident nodes never win against the
/// first copy, so duplicates collapse onto it.
pub fn compute_voronoi_weights(nodes: &[(f64, f64)], grid: &GridSpec, s: usize) -> Result<VoronoiWeightMap> {
    grid.validate()?;
    if nodes.is_empty() {
        return Err(Error::invalid("at least one node is required"));
    }
    if s == 0 {
        return Err(Error::invalid("subsample count must be >= 1"));
    }
    if let Some(bad) = nodes.iter().find(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::invalid(format!("non-finite node position {bad:?}")));
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); grid.sectors()];
    for (i, &(lat, lon)) in nodes.iter().enumerate() {
        if let Some((r, c)) = grid.sector_of(lat, lon) {
            members[r * grid.cols + c].push(i);
        }
    }

    let (dlat, dlon) = (grid.dlat(), grid.dlon());
    let sectors = members
        .par_iter()
        .enumerate()
        .map(|(idx, resident)| {
            if resident.is_empty() {
                return Vec::new();
            }
            let (r, c) = (idx / grid.cols, idx % grid.cols);
            let mut counts = vec![0usize; resident.len()];
            for i in 0..s {
                let lat = grid.lat_min + (r as f64 + (i as f64 + 0.5) / s as f64) * dlat;
                for j in 0..s {
                    let lon = grid.lon_min + (c as f64 + (j as f64 + 0.5) / s as f64) * dlon;
                    let winner = nearest_node(nodes, lat, lon);
                    if let Some(k) = resident.iter().position(|&m| m == winner) {
                        counts[k] += 1;
                    }
                }
            }
            let area = (s * s) as f64;
            resident
                .iter()
                .zip(counts)
                .map(|(&node, n)| (node, n as f64 / area))
                .collect()
        })
        .collect();

    let nearest_to_center = (0..grid.sectors())
        .map(|idx| {
            let (lat, lon) = grid.sector_center(idx / grid.cols, idx % grid.cols);
            nearest_node(nodes, lat, lon)
        })
        .collect();

    Ok(VoronoiWeightMap {
        grid: *grid,
        subsamples: s,
        node_count: nodes.len(),
        sectors,
        nearest_to_center,
    })
}

/// How sectors without a resident node are valued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillMode {
    /// Zero, exactly as the aggregation rule states.
    #[default]
    Zero,
    /// Reading of the node nearest to the sector centre.
    Nearest,
}

/// One gridded heat map. `values` is row-major with row 0 at the south edge.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMapFrame {
    pub rows: usize,
    pub cols: usize,
    pub bucket: i64,
    pub normalized: bool,
    pub values: Vec<f64>,
}

impl HeatMapFrame {
    pub fn zeros(rows: usize, cols: usize, bucket: i64) -> Self {
        Self {
            rows,
            cols,
            bucket,
            normalized: false,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, bucket: i64, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} frame",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            bucket,
            normalized: false,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn same_shape(&self, other: &HeatMapFrame) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Aggregates one time bucket of readings (indexed like the weight map's
/// nodes, `None` for a missing reading) into a heat map. Missing readings
/// drop their term without renormalizing the others.
pub fn rasterize_frame(
    readings: &[Option<f64>],
    weights: &VoronoiWeightMap,
    bucket: i64,
    fill: FillMode,
) -> Result<HeatMapFrame> {
    if readings.len() != weights.node_count {
        return Err(Error::shape(format!(
            "{} readings for {} nodes",
            readings.len(),
            weights.node_count
        )));
    }
    if let Some((i, v)) = readings
        .iter()
        .enumerate()
        .find_map(|(i, r)| r.filter(|v| !v.is_finite() || *v < 0.0).map(|v| (i, v)))
    {
        return Err(Error::invalid(format!("node {i} has invalid reading {v}")));
    }

    let values = weights
        .sectors
        .iter()
        .zip(&weights.nearest_to_center)
        .map(|(list, &nearest)| {
            if list.is_empty() {
                match fill {
                    FillMode::Zero => 0.0,
                    FillMode::Nearest => readings[nearest].unwrap_or(0.0),
                }
            } else {
                list.iter().filter_map(|&(node, w)| readings[node].map(|x| x * w)).sum()
            }
        })
        .collect();
    Ok(HeatMapFrame {
        rows: weights.grid.rows,
        cols: weights.grid.cols,
        bucket,
        normalized: false,
        values,
    })
}

fn check_theta_max(theta_max: f64) -> Result<()> {
    if !(theta_max.is_finite() && theta_max > 0.0) {
        return Err(Error::invalid(format!("theta_max must be positive, got {theta_max}")));
    }
    Ok(())
}

/// Maps µg/m³ onto `[0, 1]` as `min(theta / theta_max, 1)`.
pub fn normalize_frame(frame: &HeatMapFrame, theta_max: f64) -> Result<HeatMapFrame> {
    check_theta_max(theta_max)?;
    if frame.normalized {
        return Err(Error::invalid("frame is already normalized"));
    }
    Ok(HeatMapFrame {
        values: frame.values.iter().map(|v| (v / theta_max).min(1.0)).collect(),
        normalized: true,
        ..frame.clone()
    })
}

pub fn denormalize_frame(frame: &HeatMapFrame, theta_max: f64) -> Result<HeatMapFrame> {
    check_theta_max(theta_max)?;
    if !frame.normalized {
        return Err(Error::invalid("frame is not normalized"));
    }
    Ok(HeatMapFrame {
        values: frame.values.iter().map(|v| v * theta_max).collect(),
        normalized: false,
        ..frame.clone()
    })
}

/// Text form: `m,n,bucket,normalized_flag` then `m` rows of `n` values,
/// south row first.
pub fn write_frame(frame: &HeatMapFrame) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{},{},{},{}",
        frame.rows,
        frame.cols,
        frame.bucket,
        u8::from(frame.normalized)
    );
    for row in frame.values.chunks(frame.cols) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_frame(text: &str) -> Result<HeatMapFrame> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty frame file".into()))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(Error::Format(format!("bad frame header `{header}`")));
    }
    let bad = |what: &str| Error::Format(format!("bad {what} in frame header `{header}`"));
    let rows: usize = fields[0].parse().map_err(|_| bad("rows"))?;
    let cols: usize = fields[1].parse().map_err(|_| bad("cols"))?;
    let bucket: i64 = fields[2].parse().map_err(|_| bad("timestamp"))?;
    let normalized = match fields[3] {
        "0" => false,
        "1" => true,
        _ => return Err(bad("normalized flag")),
    };

    let mut values = Vec::with_capacity(rows * cols);
    for (r, line) in lines.enumerate() {
        if r >= rows {
            return Err(Error::Format(format!("more than {rows} rows")));
        }
        let before = values.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {r}: `{tok}` is not a number")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Format(format!("row {r}: invalid value {v}")));
            }
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(Error::Format(format!(
                "row {r} has {} values, expected {cols}",
                values.len() - before
            )));
        }
    }
    if values.len() != rows * cols {
        return Err(Error::Format(format!(
            "expected {rows} rows, found {}",
            values.len() / cols.max(1)
        )));
    }
    Ok(HeatMapFrame {
        rows,
        cols,
        bucket,
        normalized,
        values,
    })
}

/// Binary graymap (P5), north edge at the top. Values are clamped to [0, 1].
pub fn write_pgm(frame: &HeatMapFrame) -> Result<Vec<u8>> {
    if !frame.normalized {
        return Err(Error::invalid("graymap export needs a normalized frame"));
    }
    let mut out = format!("P5\n{} {}\n255\n", frame.cols, frame.rows).into_bytes();
    for row in frame.values.chunks(frame.cols).rev() {
        out.extend(row.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    }
    Ok(out)
}

/// Writes `frame_000000.csv`, `frame_000001.csv`, ... into `dir`.
pub fn write_frames_dir(dir: &Path, frames: &[HeatMapFrame]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(format!("frame_{i:06}.csv"));
            fs::write(&path, write_frame(f))?;
            Ok(path)
        })
        .collect()
}

/// Reads every `frame_*.csv` in `dir`, in file-name order.
pub fn read_frames_dir(dir: &Path) -> Result<Vec<HeatMapFrame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no frame files in {}", dir.display())));
    }
    let frames = paths
        .iter()
        .map(|p| parse_frame(&fs::read_to_string(p)?).map_err(|e| Error::Format(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    if frames.iter().any(|f| !f.same_shape(&frames[0])) {
        return Err(Error::shape(format!("frames in {} differ in shape", dir.display())));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sector_examples() {
        let g = GridSpec::default();
        assert_eq!(g.sector_of(23.90, 120.37), Some((0, 0)));
        assert_eq!(g.sector_of(24.177, 120.695), Some((20, 20)));
        assert_eq!(g.sector_of(25.0, 120.5), None);
        assert_eq!(g.sector_of(24.45, 121.02), Some((39, 39)));
        assert!((g.dlat() - 0.01375).abs() < 1e-15);
        assert!((g.dlon() - 0.01625).abs() < 1e-15);
    }

    #[test]
    fn invalid_grid_rejected() {
        assert!(GridSpec::new(1.0, 1.0, 0.0, 1.0, 2, 2).is_err());
        assert!(GridSpec::new(0.0, 1.0, 0.0, 1.0, 0, 2).is_err());
    }

    fn unit_grid(rows: usize, cols: usize) -> GridSpec {
        GridSpec::new(0.0, rows as f64, 0.0, cols as f64, rows, cols).unwrap()
    }

    #[test]
    fn single_node_owns_its_sector_only() {
        let g = unit_grid(10, 10);
        let w = compute_voronoi_weights(&[(5.5, 5.5)], &g, 32).unwrap();
        for r in 0..10 {
            for c in 0..10 {
                if (r, c) == (5, 5) {
                    assert_eq!(w.weights(r, c), &[(0, 1.0)]);
                } else {
                    assert!(w.weights(r, c).is_empty());
                }
            }
        }
    }

    #[test]
    fn mirrored_pair_splits_evenly() {
        let g = unit_grid(3, 3);
        let w = compute_voronoi_weights(&[(1.3, 1.2), (1.3, 1.8)], &g, 32).unwrap();
        assert_eq!(w.weights(1, 1), &[(0, 0.5), (1, 0.5)]);
    }

    #[test]
    fn no_nodes_is_an_error() {
        assert!(compute_voronoi_weights(&[], &GridSpec::default(), 32).is_err());
    }

    #[test]
    fn duplicates_collapse_onto_first() {
        let g = unit_grid(2, 2);
        let w = compute_voronoi_weights(&[(0.5, 0.5), (0.5, 0.5)], &g, 8).unwrap();
        assert_eq!(w.weights(0, 0), &[(0, 1.0), (1, 0.0)]);
    }

    #[test]
    fn rasterize_examples() {
        let g = unit_grid(4, 4);
        let w = compute_voronoi_weights(&[(2.5, 1.5)], &g, 16).unwrap();
        let f = rasterize_frame(&[Some(35.0)], &w, 7, FillMode::Zero).unwrap();
        assert_eq!(f.get(2, 1), 35.0);
        assert_eq!(f.values.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(f.bucket, 7);

        let g = unit_grid(3, 3);
        let w = compute_voronoi_weights(&[(1.3, 1.2), (1.3, 1.8)], &g, 32).unwrap();
        let f = rasterize_frame(&[Some(10.0), Some(30.0)], &w, 0, FillMode::Zero).unwrap();
        assert_eq!(f.get(1, 1), 20.0);

        // missing reading drops its term, no renormalization
        let f = rasterize_frame(&[Some(10.0), None], &w, 0, FillMode::Zero).unwrap();
        assert_eq!(f.get(1, 1), 5.0);

        assert!(rasterize_frame(&[Some(-1.0), None], &w, 0, FillMode::Zero).is_err());
        assert!(rasterize_frame(&[Some(1.0)], &w, 0, FillMode::Zero).is_err());
    }

    #[test]
    fn nearest_fill_covers_empty_sectors() {
        let g = unit_grid(3, 3);
        let w = compute_voronoi_weights(&[(0.5, 0.5), (2.5, 2.5)], &g, 8).unwrap();
        let f = rasterize_frame(&[Some(4.0), Some(9.0)], &w, 0, FillMode::Nearest).unwrap();
        assert_eq!(f.get(0, 1), 4.0);
        assert_eq!(f.get(2, 1), 9.0);
        assert_eq!(f.get(0, 0), 4.0);
        let z = rasterize_frame(&[Some(4.0), Some(9.0)], &w, 0, FillMode::Zero).unwrap();
        assert_eq!(z.get(0, 1), 0.0);
    }

    #[test]
    fn normalization_examples() {
        let f = HeatMapFrame::from_values(1, 3, 0, vec![0.0, 50.0, 18.5]).unwrap();
        let n = normalize_frame(&f, 50.0).unwrap();
        assert!(n.normalized);
        assert_eq!(n.values[0], 0.0);
        assert_eq!(n.values[1], 1.0);
        assert!((n.values[2] - 0.37).abs() < 1e-15);
        let back = denormalize_frame(&n, 50.0).unwrap();
        assert!((back.values[2] - 18.5).abs() < 1e-12);

        let over = HeatMapFrame::from_values(1, 1, 0, vec![80.0]).unwrap();
        assert_eq!(normalize_frame(&over, 50.0).unwrap().values[0], 1.0);

        assert!(normalize_frame(&f, 0.0).is_err());
        assert!(normalize_frame(&f, -3.0).is_err());
        assert!(denormalize_frame(&f, 10.0).is_err());
    }

    #[test]
    fn frame_text_round_trip() {
        let mut f = HeatMapFrame::from_values(2, 3, -4, vec![0.0, 1.5, 2.25, 1e-9, 3.0, 0.1]).unwrap();
        f.normalized = true;
        let text = write_frame(&f);
        assert!(text.starts_with("2,3,-4,1\n"));
        assert_eq!(parse_frame(&text).unwrap(), f);
        assert!(parse_frame("2,3,0,0\n1,2,3\n").is_err());
        assert!(parse_frame("1,2,0,0\n1,x\n").is_err());
    }

    #[test]
    fn pgm_layout() {
        let mut f = HeatMapFrame::from_values(2, 2, 0, vec![0.0, 0.5, 1.0, 0.2]).unwrap();
        assert!(write_pgm(&f).is_err());
        f.normalized = true;
        let bytes = write_pgm(&f).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // north row (row 1) comes first
        assert_eq!(&bytes[header.len()..], &[255, 51, 0, 128]);
    }
}
