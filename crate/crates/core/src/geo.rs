//! Coordinates, periodic input encoding, great-circle distances and raster grids.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sphere radius in kilometres. Half the circumference is 20,037.5 km, the
/// antipodal distance used by the distance-weighted evaluation metric.
pub const EARTH_RADIUS_KM: f64 = 6378.137;

/// Great-circle distance between two antipodal points.
pub const ANTIPODAL_KM: f64 = 20_037.5;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} is not finite")]
    NonFiniteLongitude(f64),
    #[error("range mask has no positive cell")]
    EmptyRange,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid geometry mismatch")]
    GeometryMismatch,
    #[error("payload has {actual} bytes, header requires {expected}")]
    PayloadLengthMismatch { expected: usize, actual: usize },
    #[error("corrupt header: {0}")]
    CorruptHeader(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A point on the sphere in degrees. Longitude is kept in `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        if !lon.is_finite() {
            return Err(GeoError::NonFiniteLongitude(lon));
        }
        Ok(Self { lat, lon: normalize_lon(lon) })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl TryFrom<(f64, f64)> for GeoPoint {
    type Error = GeoError;

    fn try_from((lat, lon): (f64, f64)) -> Result<Self, Self::Error> {
        GeoPoint::new(lat, lon)
    }
}

impl From<GeoPoint> for (f64, f64) {
    fn from(p: GeoPoint) -> Self {
        (p.lat, p.lon)
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// Four-value periodic featurization fed to the location encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedLocation(pub [f64; 4]);

/// `[sin(π·lon/180), cos(π·lon/180), sin(π·lat/90), cos(π·lat/90)]`
pub fn encode_location(p: GeoPoint) -> EncodedLocation {
    let lon = PI * p.lon / 180.0;
    let lat = PI * p.lat / 90.0;
    EncodedLocation([lon.sin(), lon.cos(), lat.sin(), lat.cos()])
}

pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Uniform points on the sphere: longitude uniform, latitude `asin(2u - 1)`.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<GeoPoint> {
    (0..n)
        .map(|_| {
            let lon = rng.random_range(-180.0..180.0);
            let u: f64 = rng.random();
            let lat = (2.0 * u - 1.0).clamp(-1.0, 1.0).asin().to_degrees();
            GeoPoint { lat, lon }
        })
        .collect()
}

/// A regular lat/lon raster. Row 0 is the northernmost row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub res_deg: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl GridSpec {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, res_deg: f64) -> Result<Self, GeoError> {
        let ok = res_deg > 0.0
            && res_deg.is_finite()
            && -90.0 <= lat_min
            && lat_min < lat_max
            && lat_max <= 90.0
            && -180.0 <= lon_min
            && lon_min < lon_max
            && lon_max <= 180.0;
        if !ok {
            return Err(GeoError::InvalidGrid(format!(
                "lat [{lat_min}, {lat_max}], lon [{lon_min}, {lon_max}], res {res_deg}"
            )));
        }
        let n_rows = cell_count(lat_max - lat_min, res_deg);
        let n_cols = cell_count(lon_max - lon_min, res_deg);
        Ok(Self { lat_min, lat_max, lon_min, lon_max, res_deg, n_rows, n_cols })
    }

    pub fn global(res_deg: f64) -> Result<Self, GeoError> {
        Self::new(-90.0, 90.0, -180.0, 180.0, res_deg)
    }

    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, index: usize) -> GeoPoint {
        let (row, col) = (index / self.n_cols, index % self.n_cols);
        let lat = (self.lat_max - (row as f64 + 0.5) * self.res_deg).max(self.lat_min);
        let lon = (self.lon_min + (col as f64 + 0.5) * self.res_deg).min(self.lon_max);
        GeoPoint::new(lat, lon).expect("cell centers lie inside valid bounds")
    }

    pub fn centers(&self) -> Vec<GeoPoint> {
        (0..self.len()).map(|i| self.cell_center(i)).collect()
    }

    /// Index of the cell containing `p`, if any. Lower bounds are inclusive
    /// and the outer edges belong to the last row/column.
    pub fn cell_of(&self, p: GeoPoint) -> Option<usize> {
        if p.lat < self.lat_min || p.lat > self.lat_max || p.lon < self.lon_min || p.lon > self.lon_max {
            return None;
        }
        let row = (((self.lat_max - p.lat) / self.res_deg).floor() as usize).min(self.n_rows - 1);
        let col = (((p.lon - self.lon_min) / self.res_deg).floor() as usize).min(self.n_cols - 1);
        Some(row * self.n_cols + col)
    }

    /// Same geometry up to floating-point noise in the bounds.
    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        const EPS: f64 = 1e-9;
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && (self.lat_min - other.lat_min).abs() < EPS
            && (self.lat_max - other.lat_max).abs() < EPS
            && (self.lon_min - other.lon_min).abs() < EPS
            && (self.lon_max - other.lon_max).abs() < EPS
            && (self.res_deg - other.res_deg).abs() < EPS
    }
}

fn cell_count(extent: f64, res: f64) -> usize {
    // tolerate 60.000000001 / 1.0 style round-off before taking the ceiling
    let n = extent / res;
    let rounded = n.round();
    if (n - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        n.ceil() as usize
    }
}

/// Boolean presence raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMask {
    pub grid: GridSpec,
    pub cells: Vec<bool>,
}

impl RangeMask {
    pub fn new(grid: GridSpec, cells: Vec<bool>) -> Result<Self, GeoError> {
        if cells.len() != grid.len() {
            return Err(GeoError::InvalidGrid(format!("{} cells for a {}x{} grid", cells.len(), grid.n_rows, grid.n_cols)));
        }
        Ok(Self { grid, cells })
    }

    pub fn positive_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn coverage(&self) -> f64 {
        self.positive_count() as f64 / self.cells.len() as f64
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        self.grid.cell_of(p).is_some_and(|i| self.cells[i])
    }

    pub fn save(&self, stem: &Path) -> Result<(), GeoError> {
        let bytes: Vec<u8> = self.cells.iter().map(|&c| c as u8).collect();
        write_raster(stem, "mask", &self.grid, &bytes)
    }

    pub fn load(stem: &Path) -> Result<Self, GeoError> {
        let (grid, bytes) = read_raster(stem, "mask", 1)?;
        Ok(Self { grid, cells: bytes.into_iter().map(|b| b != 0).collect() })
    }
}

/// Per-cell presence probabilities over a raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub grid: GridSpec,
    pub cells: Vec<f32>,
}

impl PredictionGrid {
    pub fn new(grid: GridSpec, cells: Vec<f32>) -> Result<Self, GeoError> {
        if cells.len() != grid.len() {
            return Err(GeoError::InvalidGrid(format!("{} cells for a {}x{} grid", cells.len(), grid.n_rows, grid.n_cols)));
        }
        Ok(Self { grid, cells })
    }

    pub fn save(&self, stem: &Path) -> Result<(), GeoError> {
        let bytes: Vec<u8> = self.cells.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_raster(stem, "grid", &self.grid, &bytes)
    }

    pub fn load(stem: &Path) -> Result<Self, GeoError> {
        let (grid, bytes) = read_raster(stem, "grid", 4)?;
        let cells = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { grid, cells })
    }
}

fn sibling(stem: &Path, kind: &str, ext: &str) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{kind}.{ext}"));
    stem.with_file_name(name)
}

fn write_raster(stem: &Path, kind: &str, grid: &GridSpec, bytes: &[u8]) -> Result<(), GeoError> {
    fs::write(sibling(stem, kind, "json"), serde_json::to_vec_pretty(grid)?)?;
    fs::write(sibling(stem, kind, "bin"), bytes)?;
    Ok(())
}

fn read_raster(stem: &Path, kind: &str, bytes_per_cell: usize) -> Result<(GridSpec, Vec<u8>), GeoError> {
    let header: GridSpec = serde_json::from_slice(&fs::read(sibling(stem, kind, "json"))?)?;
    let checked = GridSpec::new(header.lat_min, header.lat_max, header.lon_min, header.lon_max, header.res_deg)?;
    if checked.n_rows != header.n_rows || checked.n_cols != header.n_cols {
        return Err(GeoError::InvalidGrid(format!(
            "header says {}x{} but bounds give {}x{}",
            header.n_rows, header.n_cols, checked.n_rows, checked.n_cols
        )));
    }
    let bytes = fs::read(sibling(stem, kind, "bin"))?;
    let expected = header.len() * bytes_per_cell;
    if bytes.len() != expected {
        return Err(GeoError::PayloadLengthMismatch { expected, actual: bytes.len() });
    }
    Ok((header, bytes))
}

/// Distance from `p` to the nearest positive cell of `mask`, zero inside.
pub fn distance_to_range_km(p: GeoPoint, mask: &RangeMask) -> Result<f64, GeoError> {
    if mask.contains(p) {
        return Ok(0.0);
    }
    mask.cells
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(i, _)| haversine_km(p, mask.grid.cell_center(i)))
        .min_by(f64::total_cmp)
        .ok_or(GeoError::EmptyRange)
}

/// `distance_to_range_km` for every cell center of the mask's own grid.
pub fn cell_distances_to_range(mask: &RangeMask) -> Result<Vec<f64>, GeoError> {
    let positives: Vec<GeoPoint> = mask
        .cells
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(i, _)| mask.grid.cell_center(i))
        .collect();
    if positives.is_empty() {
        return Err(GeoError::EmptyRange);
    }
    Ok((0..mask.grid.len())
        .map(|i| {
            if mask.cells[i] {
                0.0
            } else {
                let c = mask.grid.cell_center(i);
                positives.iter().map(|&q| haversine_km(c, q)).fold(f64::INFINITY, f64::min)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn assert_close(a: [f64; 4], b: [f64; 4], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn encode_examples() {
        assert_close(encode_location(pt(0.0, 0.0)).0, [0.0, 1.0, 0.0, 1.0], 1e-15);
        assert_close(encode_location(pt(90.0, -90.0)).0, [-1.0, 0.0, 0.0, -1.0], 1e-12);
        let e = encode_location(pt(0.0, 180.0)).0;
        assert!(e[0].abs() <= 1e-12);
        assert_close(e, [0.0, -1.0, 0.0, 1.0], 1e-12);
    }

    #[test]
    fn longitude_normalization() {
        assert_eq!(pt(0.0, 180.0).lon(), -180.0);
        assert_eq!(pt(0.0, 190.0).lon(), -170.0);
        assert_eq!(pt(0.0, -540.0).lon(), -180.0);
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn haversine_examples() {
        assert_eq!(haversine_km(pt(10.0, 20.0), pt(10.0, 20.0)), 0.0);
        assert!((haversine_km(pt(0.0, 0.0), pt(0.0, 180.0)) - 20_037.5).abs() <= 0.1);
        assert!((haversine_km(pt(0.0, 0.0), pt(0.0, 90.0)) - 10_018.75).abs() <= 0.1);
        assert!((haversine_km(pt(90.0, 0.0), pt(-90.0, 0.0)) - ANTIPODAL_KM).abs() <= 0.1);
    }

    #[test]
    fn distance_to_range_examples() {
        let grid = GridSpec::new(-0.5, 0.5, -0.5, 0.5, 1.0).unwrap();
        let mask = RangeMask::new(grid, vec![true]).unwrap();
        assert_eq!(distance_to_range_km(pt(0.2, -0.3), &mask).unwrap(), 0.0);
        let d = distance_to_range_km(pt(0.0, 90.0), &mask).unwrap();
        assert!((d - 10_018.75).abs() <= 0.1, "{d}");

        let global = GridSpec::global(30.0).unwrap();
        let full = RangeMask::new(global, vec![true; global.len()]).unwrap();
        for p in [pt(89.0, 179.0), pt(-90.0, -180.0), pt(0.0, 0.0)] {
            assert_eq!(distance_to_range_km(p, &full).unwrap(), 0.0);
        }
        let empty = RangeMask::new(global, vec![false; global.len()]).unwrap();
        assert!(matches!(distance_to_range_km(pt(0.0, 0.0), &empty), Err(GeoError::EmptyRange)));
    }

    #[test]
    fn cell_distances_match_pointwise() {
        let grid = GridSpec::new(-10.0, 10.0, -20.0, 20.0, 2.0).unwrap();
        let mut cells = vec![false; grid.len()];
        cells[7] = true;
        cells[33] = true;
        let mask = RangeMask::new(grid, cells).unwrap();
        let all = cell_distances_to_range(&mask).unwrap();
        for i in 0..grid.len() {
            let d = distance_to_range_km(grid.cell_center(i), &mask).unwrap();
            assert_eq!(all[i], d);
            assert_eq!(d == 0.0, mask.cells[i]);
        }
    }

    #[test]
    fn sphere_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_uniform_sphere(&mut rng, 0).is_empty());

        let a = sample_uniform_sphere(&mut ChaCha8Rng::seed_from_u64(11), 50);
        let b = sample_uniform_sphere(&mut ChaCha8Rng::seed_from_u64(11), 50);
        assert_eq!(a, b);

        let n = 100_000;
        let pts = sample_uniform_sphere(&mut rng, n);
        let polar = pts.iter().filter(|p| p.lat().abs() > 60.0).count() as f64 / n as f64;
        let expected = 1.0 - 60f64.to_radians().sin();
        assert!((polar - expected).abs() <= 0.01, "{polar} vs {expected}");

        // Kolmogorov distance to the latitude CDF (1 + sin φ) / 2
        let mut lats: Vec<f64> = pts.iter().map(|p| p.lat().to_radians()).collect();
        lats.sort_by(f64::total_cmp);
        let ks = lats
            .iter()
            .enumerate()
            .map(|(i, &phi)| {
                let cdf = (1.0 + phi.sin()) / 2.0;
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (cdf - lo).abs().max((hi - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks <= 0.01, "KS distance {ks}");
    }

    #[test]
    fn grid_geometry() {
        let g = GridSpec::new(-30.0, 30.0, -40.0, 40.0, 1.0).unwrap();
        assert_eq!((g.n_rows, g.n_cols), (60, 80));
        let g2 = GridSpec::new(0.0, 10.0, 0.0, 10.0, 3.0).unwrap();
        assert_eq!((g2.n_rows, g2.n_cols), (4, 4));
        assert_eq!(g.cell_center(0), pt(29.5, -39.5));
        assert_eq!(g.cell_of(pt(29.5, -39.5)), Some(0));
        assert_eq!(g.cell_of(pt(-30.0, 40.0)), Some(g.len() - 1));
        assert_eq!(g.cell_of(pt(31.0, 0.0)), None);
        for i in [0, 17, 1234, g.len() - 1] {
            assert_eq!(g.cell_of(g.cell_center(i)), Some(i));
        }
        assert!(GridSpec::new(10.0, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn mask_and_grid_files() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(-3.0, 3.0, 10.0, 14.0, 1.0).unwrap();
        let mask = RangeMask::new(g, (0..g.len()).map(|i| i % 3 == 0).collect()).unwrap();
        let stem = dir.path().join("sp1");
        mask.save(&stem).unwrap();
        assert!(dir.path().join("sp1.mask.json").exists());
        assert_eq!(fs::read(dir.path().join("sp1.mask.bin")).unwrap().len(), g.len());
        assert_eq!(RangeMask::load(&stem).unwrap(), mask);

        let pred = PredictionGrid::new(g, (0..g.len()).map(|i| i as f32 / 100.0).collect()).unwrap();
        pred.save(&stem).unwrap();
        assert_eq!(PredictionGrid::load(&stem).unwrap(), pred);

        fs::write(dir.path().join("sp1.mask.bin"), [1u8; 3]).unwrap();
        assert!(matches!(RangeMask::load(&stem), Err(GeoError::PayloadLengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn encoding_is_periodic_in_longitude(lat in -90.0f64..=90.0, lon in -180.0f64..180.0) {
            let a = encode_location(pt(lat, lon)).0;
            let b = encode_location(pt(lat, lon - 360.0)).0;
            let c = encode_location(pt(lat, lon + 720.0)).0;
            for i in 0..4 {
                prop_assert!((a[i] - b[i]).abs() <= 1e-12);
                prop_assert!((a[i] - c[i]).abs() <= 1e-12);
            }
            prop_assert!((a[0] * a[0] + a[1] * a[1] - 1.0).abs() <= 1e-6);
            prop_assert!((a[2] * a[2] + a[3] * a[3] - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn haversine_is_a_metric(
            a in (-90.0f64..=90.0, -180.0f64..180.0),
            b in (-90.0f64..=90.0, -180.0f64..180.0),
            c in (-90.0f64..=90.0, -180.0f64..180.0),
        ) {
            let (a, b, c) = (pt(a.0, a.1), pt(b.0, b.1), pt(c.0, c.1));
            let ab = haversine_km(a, b);
            prop_assert!((ab - haversine_km(b, a)).abs() <= 1e-9 * ab.max(1.0));
            let via = haversine_km(a, c) + haversine_km(c, b);
            prop_assert!(ab <= via * (1.0 + 1e-9) + 1e-9);
        }
    }
}
