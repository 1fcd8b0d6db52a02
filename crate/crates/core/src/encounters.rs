//! Multi-session binary encounter histories.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrError};
use crate::geometry::TrapArray;

/// One row of the encounter CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncounterRecord {
    pub user_id: String,
    pub trap_id: String,
    pub occasion: usize,
    pub session: usize,
}

/// Detections of the observed individuals within one session.
///
/// Stored sparsely: `captures[i]` holds the sorted, deduplicated
/// `(trap, occasion)` cells (both zero-based) where `y[i][j][k] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionBlock {
    pub session_id: usize,
    pub individual_ids: Vec<String>,
    pub n_traps: usize,
    pub n_occasions: usize,
    captures: Vec<Vec<(usize, usize)>>,
}

impl SessionBlock {
    pub fn new(
        session_id: usize,
        individual_ids: Vec<String>,
        n_traps: usize,
        n_occasions: usize,
        mut captures: Vec<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        if individual_ids.len() != captures.len() {
            return Err(ScrError::InvalidInput(
                "one capture list is required per individual".into(),
            ));
        }
        if individual_ids.iter().collect::<BTreeSet<_>>().len() != individual_ids.len() {
            return Err(ScrError::InvalidInput(format!(
                "duplicate individual id in session {session_id}"
            )));
        }
        for (id, caps) in individual_ids.iter().zip(captures.iter_mut()) {
            caps.sort_unstable();
            caps.dedup();
            if caps.is_empty() {
                return Err(ScrError::InvalidInput(format!(
                    "individual `{id}` in session {session_id} has no detections"
                )));
            }
            if caps.iter().any(|&(j, k)| j >= n_traps || k >= n_occasions) {
                return Err(ScrError::InvalidInput(format!(
                    "individual `{id}` in session {session_id} has a detection outside {n_traps} traps x {n_occasions} occasions"
                )));
            }
        }
        Ok(Self {
            session_id,
            individual_ids,
            n_traps,
            n_occasions,
            captures,
        })
    }

    pub fn empty(session_id: usize, n_traps: usize, n_occasions: usize) -> Self {
        Self {
            session_id,
            individual_ids: Vec::new(),
            n_traps,
            n_occasions,
            captures: Vec::new(),
        }
    }

    /// Number of observed individuals, `n_g`.
    pub fn n_detected(&self) -> usize {
        self.captures.len()
    }

    pub fn captures(&self, individual: usize) -> &[(usize, usize)] {
        &self.captures[individual]
    }

    pub fn all_captures(&self) -> &[Vec<(usize, usize)>] {
        &self.captures
    }

    pub fn y(&self, individual: usize, trap: usize, occasion: usize) -> bool {
        self.captures[individual].binary_search(&(trap, occasion)).is_ok()
    }

    /// Dense `n × J × K` array of 0/1.
    pub fn to_dense(&self) -> Vec<Vec<Vec<u8>>> {
        self.captures
            .iter()
            .map(|caps| {
                let mut y = vec![vec![0u8; self.n_occasions]; self.n_traps];
                for &(j, k) in caps {
                    y[j][k] = 1;
                }
                y
            })
            .collect()
    }

    pub fn total_detections(&self) -> usize {
        self.captures.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterData {
    pub sessions: Vec<SessionBlock>,
}

/// Controls for [`ingest_encounters`]. Unset fields are inferred from the data.
#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub n_occasions: Option<usize>,
    pub n_sessions: Option<usize>,
}

impl EncounterData {
    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn n_occasions(&self) -> usize {
        self.sessions.first().map_or(0, |s| s.n_occasions)
    }

    pub fn n_traps(&self) -> usize {
        self.sessions.first().map_or(0, |s| s.n_traps)
    }

    pub fn n_per_session(&self) -> Vec<usize> {
        self.sessions.iter().map(SessionBlock::n_detected).collect()
    }

    /// Flattens back to records, sorted by session, user, trap, occasion.
    pub fn to_records(&self, traps: &TrapArray) -> Vec<EncounterRecord> {
        let mut out = Vec::new();
        for s in &self.sessions {
            for (i, id) in s.individual_ids.iter().enumerate() {
                for &(j, k) in s.captures(i) {
                    out.push(EncounterRecord {
                        user_id: id.clone(),
                        trap_id: traps.traps()[j].id.clone(),
                        occasion: k + 1,
                        session: s.session_id,
                    });
                }
            }
        }
        out
    }

    /// Writes the `user_id,trap_id,occasion,session` schema read by [`read_encounter_csv`].
    pub fn write_csv<W: Write>(&self, traps: &TrapArray, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for rec in self.to_records(traps) {
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_encounter_csv<R: Read>(reader: R) -> Result<Vec<EncounterRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Builds per-session binary arrays from raw records.
///
/// Sessions are numbered `1..=S` (S from the options or the largest label);
/// a session without records becomes an empty block. Repeated records for the
/// same user, trap and occasion collapse to a single detection. Individuals
/// are indexed per session in sorted id order.
pub fn ingest_encounters(
    records: &[EncounterRecord],
    traps: &TrapArray,
    opts: &IngestOptions,
) -> Result<EncounterData> {
    if records.is_empty() {
        return Err(ScrError::Empty("encounter file has no records".into()));
    }
    let unknown: BTreeSet<&str> = records
        .iter()
        .filter(|r| traps.index_of(&r.trap_id).is_none())
        .map(|r| r.trap_id.as_str())
        .collect();
    if !unknown.is_empty() {
        return Err(ScrError::UnknownTraps(
            unknown.into_iter().map(str::to_string).collect(),
        ));
    }
    let trap_index: BTreeMap<&str, usize> = traps
        .traps()
        .iter()
        .enumerate()
        .map(|(j, t)| (t.id.as_str(), j))
        .collect();

    let max_occ = records.iter().map(|r| r.occasion).max().unwrap_or(0);
    let n_occ = opts.n_occasions.unwrap_or(max_occ);
    if let Some(bad) = records.iter().find(|r| r.occasion == 0 || r.occasion > n_occ) {
        return Err(ScrError::InvalidInput(format!(
            "occasion {} for user `{}` is outside 1..={n_occ}",
            bad.occasion, bad.user_id
        )));
    }
    let max_session = records.iter().map(|r| r.session).max().unwrap_or(0);
    let n_sessions = opts.n_sessions.unwrap_or(max_session);
    if let Some(bad) = records.iter().find(|r| r.session == 0 || r.session > n_sessions) {
        return Err(ScrError::InvalidInput(format!(
            "session {} for user `{}` is outside 1..={n_sessions}",
            bad.session, bad.user_id
        )));
    }

    let mut by_session: Vec<BTreeMap<&str, BTreeSet<(usize, usize)>>> = vec![BTreeMap::new(); n_sessions];
    for r in records {
        by_session[r.session - 1]
            .entry(r.user_id.as_str())
            .or_default()
            .insert((trap_index[r.trap_id.as_str()], r.occasion - 1));
    }
    let sessions = by_session
        .into_iter()
        .enumerate()
        .map(|(g, users)| {
            let (ids, caps): (Vec<String>, Vec<Vec<(usize, usize)>>) = users
                .into_iter()
                .map(|(id, c)| (id.to_string(), c.into_iter().collect()))
                .unzip();
            SessionBlock::new(g + 1, ids, traps.len(), n_occ, caps)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncounterData { sessions })
}

/// Mean maximum distance moved, pooled within sessions.
///
/// Each individual contributes the largest distance between any two traps it
/// was caught in during a session; zero distances are excluded. `None` when no
/// individual was caught at two distinct locations.
pub fn mmdm(data: &EncounterData, traps: &TrapArray) -> Option<f64> {
    let pts = traps.points();
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &data.sessions {
        for caps in s.all_captures() {
            let locs: BTreeSet<usize> = caps.iter().map(|&(j, _)| j).collect();
            let locs: Vec<usize> = locs.into_iter().collect();
            let mut max_d = 0.0f64;
            for (a, &ja) in locs.iter().enumerate() {
                for &jb in &locs[a + 1..] {
                    max_d = max_d.max(pts[ja].dist(&pts[jb]));
                }
            }
            if max_d > 0.0 {
                total += max_d;
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub n_per_session: Vec<usize>,
    pub total_detections: usize,
    /// Detections per trap, summed over sessions and occasions.
    pub per_trap: Vec<usize>,
    /// `None` when no individual moved between distinct traps.
    pub mmdm_metres: Option<f64>,
}

pub fn summarize(data: &EncounterData, traps: &TrapArray) -> CaptureSummary {
    let mut per_trap = vec![0usize; traps.len()];
    for s in &data.sessions {
        for caps in s.all_captures() {
            for &(j, _) in caps {
                per_trap[j] += 1;
            }
        }
    }
    let summary = CaptureSummary {
        n_per_session: data.n_per_session(),
        total_detections: data.sessions.iter().map(SessionBlock::total_detections).sum(),
        per_trap,
        mmdm_metres: mmdm(data, traps),
    };
    if summary.mmdm_metres.is_none() {
        log::warn!("MMDM undefined: no individual was detected at two distinct traps");
    }
    summary
}
