use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use chrono::NaiveDate;

use super::{DailyMfa, MfaError, PersistentMfa, Result, StabilityPoint};

/// `date,modularity,cluster,zone_code`; clusters are numbered from 1 and
/// singletons have an empty cluster field.
pub fn write_daily_mfa<W: Write>(mfa: &DailyMfa, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "modularity", "cluster", "zone_code"])?;
    let (date, q) = (mfa.day.to_string(), mfa.modularity.to_string());
    for (k, cluster) in mfa.clusters.iter().enumerate() {
        let k = (k + 1).to_string();
        for z in cluster {
            w.write_record([date.as_str(), &q, &k, z])?;
        }
    }
    for z in &mfa.singletons {
        w.write_record([date.as_str(), &q, "", z])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_daily_mfa`]; several days may share a file.
pub fn read_daily_mfas<R: Read>(reader: R) -> Result<Vec<DailyMfa>> {
    type Day = (f64, BTreeMap<u32, Vec<Arc<str>>>, Vec<Arc<str>>);
    let mut days: BTreeMap<NaiveDate, Day> = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |reason: String| MfaError::Parse { line, reason };
        if row.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", row.len())));
        }
        let date: NaiveDate = row[0].parse().map_err(|e| bad(format!("date: {e}")))?;
        let q: f64 = row[1].parse().map_err(|e| bad(format!("modularity: {e}")))?;
        let entry = days.entry(date).or_insert_with(|| (q, BTreeMap::new(), Vec::new()));
        let zone: Arc<str> = Arc::from(&row[3]);
        if row[2].is_empty() {
            entry.2.push(zone);
        } else {
            let k: u32 = row[2].parse().map_err(|e| bad(format!("cluster: {e}")))?;
            entry.1.entry(k).or_default().push(zone);
        }
    }
    Ok(days
        .into_iter()
        .map(|(day, (modularity, clusters, singletons))| DailyMfa { day, clusters: clusters.into_values().collect(), modularity, singletons })
        .collect())
}

/// `mfa_id,zone_code,membership,support_days`
pub fn write_memberships<'a, W: Write>(mfas: impl IntoIterator<Item = &'a PersistentMfa>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["mfa_id", "zone_code", "membership", "support_days"])?;
    for m in mfas {
        let (id, support) = (m.id.to_string(), m.support_days.to_string());
        for (z, s) in &m.members {
            w.write_record([id.as_str(), z, &s.to_string(), &support])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a membership CSV. The file does not record the threshold, so it is
/// supplied by the caller.
pub fn read_memberships<R: Read>(reader: R, alpha: f64) -> Result<Vec<PersistentMfa>> {
    let mut out: BTreeMap<u32, PersistentMfa> = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |reason: String| MfaError::Parse { line, reason };
        if row.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", row.len())));
        }
        let id: u32 = row[0].parse().map_err(|e| bad(format!("mfa_id: {e}")))?;
        let membership: f64 = row[2].parse().map_err(|e| bad(format!("membership: {e}")))?;
        let support_days: u32 = row[3].parse().map_err(|e| bad(format!("support_days: {e}")))?;
        out.entry(id)
            .or_insert_with(|| PersistentMfa { id, members: Vec::new(), alpha, support_days })
            .members
            .push((Arc::from(&row[1]), membership));
    }
    Ok(out.into_values().collect())
}

/// `date,previous,jaccard`
pub fn write_stability<'a, W: Write>(points: impl IntoIterator<Item = &'a StabilityPoint>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "previous", "jaccard"])?;
    for p in points {
        w.write_record([p.day.to_string(), p.previous.to_string(), format!("{:.6}", p.jaccard)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn daily_round_trip() {
        let mfa = DailyMfa {
            day: NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(),
            clusters: vec![vec!["a".into(), "b".into()], vec!["c".into(), "d".into()]],
            modularity: 0.4231,
            singletons: vec!["e".into()],
        };
        let mut buf = Vec::new();
        write_daily_mfa(&mfa, &mut buf).unwrap();
        assert_eq!(read_daily_mfas(buf.as_slice()).unwrap(), vec![mfa]);
    }

    #[test]
    fn membership_round_trip() {
        let m = PersistentMfa { id: 1, members: vec![("a".into(), 0.75), ("b".into(), 2.0 / 3.0)], alpha: 0.5, support_days: 3 };
        let mut buf = Vec::new();
        write_memberships([&m], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("mfa_id,zone_code,membership,support_days\n1,a,0.75,3\n"));
        assert_eq!(read_memberships(buf.as_slice(), 0.5).unwrap(), vec![m]);
    }

    #[test]
    fn bad_rows_report_line() {
        let err = read_daily_mfas("date,modularity,cluster,zone_code\n2020-03-02,x,1,a\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MfaError::Parse { line: 2, .. }), "{err}");
    }
}
