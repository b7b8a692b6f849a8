use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use geo_types::{Geometry, MultiPolygon};
use geojson::{Feature, FeatureCollection, GeoJson};
use wkt::TryFromWkt;

use super::{MfaError, PersistentMfa, Result};

/// Polygon footprint of each zone, in WGS84.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ZoneGeometries {
    zones: BTreeMap<String, MultiPolygon<f64>>,
}

impl ZoneGeometries {
    pub fn insert(&mut self, zone: impl Into<String>, geometry: Geometry<f64>) -> Result<()> {
        let zone = zone.into();
        let polygons = match geometry {
            Geometry::Polygon(p) => MultiPolygon(vec![p]),
            Geometry::MultiPolygon(m) => m,
            Geometry::Rect(r) => MultiPolygon(vec![r.to_polygon()]),
            _ => return Err(MfaError::BadGeometry { zone, reason: "not a polygon".into() }),
        };
        self.zones.insert(zone, polygons);
        Ok(())
    }

    pub fn get(&self, zone: &str) -> Option<&MultiPolygon<f64>> {
        self.zones.get(zone)
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    /// CSV with `zone_code` and `wkt` columns.
    pub fn read_wkt_csv<R: Read>(reader: R) -> Result<Self> {
        let mut out = Self::default();
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| MfaError::Parse { line: 1, reason: format!("missing column `{name}`") })
        };
        let (zc, wc) = (col("zone_code")?, col("wkt")?);
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let zone = &row[zc];
            let geometry = Geometry::<f64>::try_from_wkt_str(&row[wc])
                .map_err(|e| MfaError::Parse { line, reason: format!("zone {zone}: {e}") })?;
            out.insert(zone, geometry)?;
        }
        Ok(out)
    }

    /// FeatureCollection whose features carry a `zone_code` property (or a
    /// string id).
    pub fn from_geojson_str(text: &str) -> Result<Self> {
        let parsed: GeoJson = text.parse().map_err(|e: geojson::Error| MfaError::Parse { line: 0, reason: e.to_string() })?;
        let GeoJson::FeatureCollection(fc) = parsed else {
            return Err(MfaError::Parse { line: 0, reason: "expected a FeatureCollection".into() });
        };
        let mut out = Self::default();
        for (n, feature) in fc.features.into_iter().enumerate() {
            let zone = match (feature.property("zone_code"), &feature.id) {
                (Some(serde_json::Value::String(s)), _) => s.clone(),
                (_, Some(geojson::feature::Id::String(s))) => s.clone(),
                _ => return Err(MfaError::Parse { line: 0, reason: format!("feature {n} has no zone_code") }),
            };
            let value = feature.geometry.ok_or_else(|| MfaError::BadGeometry { zone: zone.clone(), reason: "no geometry".into() })?.value;
            let geometry = Geometry::<f64>::try_from(&value).map_err(|e| MfaError::BadGeometry { zone: zone.clone(), reason: e.to_string() })?;
            out.insert(zone, geometry)?;
        }
        Ok(out)
    }

    /// Reads a `.geojson`/`.json` zones file or a WKT CSV, by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("geojson" | "json") => Self::from_geojson_str(&text),
            _ => Self::read_wkt_csv(text.as_bytes()),
        }
    }
}

/// One feature per area, its geometry the member polygons gathered into a
/// MultiPolygon (not dissolved).
pub fn export_mfa_geojson(mfas: &[PersistentMfa], geometries: &ZoneGeometries) -> Result<FeatureCollection> {
    let mut missing: Vec<String> = mfas.iter().flat_map(|m| m.zones()).filter(|z| geometries.get(z).is_none()).map(String::from).collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(MfaError::MissingGeometry(missing));
    }
    let features = mfas.iter().map(|m| {
        let polygons: Vec<_> = m.zones().flat_map(|z| geometries.get(z).expect("checked above").0.iter().cloned()).collect();
        let mut feature = Feature::from(geojson::Geometry::from(&MultiPolygon(polygons)));
        feature.set_property("id", m.id);
        feature.set_property("support_days", m.support_days);
        feature.set_property("member_count", m.members.len());
        feature
    });
    Ok(FeatureCollection::from_iter(features))
}
