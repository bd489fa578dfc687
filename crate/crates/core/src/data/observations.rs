use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::geo::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub species_id: u32,
    pub location: GeoPoint,
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    species_id: u32,
    lat: f64,
    lon: f64,
}

/// Presence-only records with a per-species index. Species are registered by
/// their first record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationStore {
    records: Vec<Observation>,
    index: BTreeMap<u32, Vec<usize>>,
}

impl ObservationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = Observation>) -> Self {
        let mut store = Self::new();
        for r in records {
            store.push(r);
        }
        store
    }

    pub fn push(&mut self, obs: Observation) {
        self.index.entry(obs.species_id).or_default().push(self.records.len());
        self.records.push(obs);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn species_ids(&self) -> BTreeSet<u32> {
        self.index.keys().copied().collect()
    }

    pub fn contains_species(&self, id: u32) -> bool {
        self.index.contains_key(&id)
    }

    /// Record indices of one species, in insertion order.
    pub fn indices_of(&self, id: u32) -> &[usize] {
        self.index.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn locations_of(&self, id: u32) -> Vec<GeoPoint> {
        self.indices_of(id).iter().map(|&i| self.records[i].location).collect()
    }

    pub fn all_locations(&self) -> Vec<GeoPoint> {
        self.records.iter().map(|r| r.location).collect()
    }

    /// Copy holding only the listed species.
    pub fn restricted_to(&self, keep: &BTreeSet<u32>) -> Self {
        Self::from_records(self.records.iter().copied().filter(|r| keep.contains(&r.species_id)))
    }

    pub fn without(&self, drop: &BTreeSet<u32>) -> Self {
        Self::from_records(self.records.iter().copied().filter(|r| !drop.contains(&r.species_id)))
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(CsvRow { species_id: r.species_id, lat: r.location.lat(), lon: r.location.lon() })?;
        }
        if self.records.is_empty() {
            w.write_record(["species_id", "lat", "lon"])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `species_id,lat,lon` CSV. Line numbers in errors are 1-based and
/// count the header.
pub fn load_observations(path: &Path) -> Result<ObservationStore, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["species_id", "lat", "lon"] {
        return Err(DataError::Parse { line: 1, message: format!("expected header species_id,lat,lon, found {}", headers.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut store = ObservationStore::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let parsed: CsvRow = row
            .deserialize(Some(&headers))
            .map_err(|e| DataError::Parse { line, message: e.to_string() })?;
        if !(-90.0..=90.0).contains(&parsed.lat) || !(-180.0..=180.0).contains(&parsed.lon) {
            return Err(DataError::OutOfRangeCoordinate { line });
        }
        let location = GeoPoint::new(parsed.lat, parsed.lon).map_err(|_| DataError::OutOfRangeCoordinate { line })?;
        store.push(Observation { species_id: parsed.species_id, location });
    }
    Ok(store)
}
