//! Embedding extraction and retrieval protocols: rank-k accuracy overall,
//! per condition, and across view pairs, in any probe/gallery modality
//! combination.

use std::fs;
use std::path::Path;

use crate::graph::Graph;
use crate::model::{forward_sequence, ModelParams};
use crate::synthgen::ConditionKind;
use crate::trainer::SequenceRecord;
use crate::{Error, Result};

pub const EMB_MAGIC: &[u8; 6] = b"CGEMB1";
pub const EMB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub sequence_id: String,
    pub identity: u32,
    pub condition: u8,
    pub view: u16,
    pub modality: u8,
    pub vector: Vec<f32>,
}

/// Aligned-stage embeddings of a set of sequences. `parts` carries the
/// part structure used by the training-consistent distance; it is not part
/// of the on-disk format, so file readers take it from the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vec_len: usize,
    pub parts: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.rows {
            if r.vector.len() != self.vec_len {
                return Err(Error::Dim {
                    op: "EmbeddingSet",
                    lhs: vec![self.vec_len],
                    rhs: vec![r.vector.len()],
                });
            }
            if !seen.insert(&r.sequence_id) {
                return Err(Error::Contract(format!(
                    "duplicate sequence id {}",
                    r.sequence_id
                )));
            }
        }
        if self.parts == 0 || self.vec_len % self.parts != 0 {
            return Err(Error::Contract(format!(
                "parts ({}) must divide vector length ({})",
                self.parts, self.vec_len
            )));
        }
        Ok(())
    }
}

/// Aligned-stage embeddings for every record, deterministic in record order.
pub fn extract_embeddings(
    params: &ModelParams<f32>,
    records: &[&SequenceRecord],
    pool: Option<&rayon::ThreadPool>,
) -> Result<EmbeddingSet> {
    if records.is_empty() {
        return Err(Error::Protocol("empty split: no sequences to embed".into()));
    }
    let embed_one = |rec: &&SequenceRecord| -> Result<EmbeddingRow> {
        let mut g: Graph<f32> = Graph::new();
        let frames = g.leaf(&rec.frames, false);
        let fwd = forward_sequence(&mut g, frames, rec.branch, params, false)?;
        let t = g.to_tensor(fwd.aligned);
        t.validate_finite("aligned embedding")?;
        Ok(EmbeddingRow {
            sequence_id: rec.row.sequence_id(),
            identity: rec.row.id,
            condition: rec.row.condition.code(),
            view: rec.row.view,
            modality: rec.row.modality.code(),
            vector: t.data,
        })
    };
    let rows: Result<Vec<EmbeddingRow>> = match pool {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            records.par_iter().map(embed_one).collect()
        }),
        None => records.iter().map(embed_one).collect(),
    };
    let rows = rows?;
    let set = EmbeddingSet {
        vec_len: rows[0].vector.len(),
        parts: params.cfg.total_parts(),
        rows,
    };
    set.validate()?;
    Ok(set)
}

// ── distances and ranking ────────────────────────────────────────────

/// Mean over parts of per-part Euclidean distances, the same metric the
/// losses use. Row-major |probe| x |gallery|.
pub fn pairwise_distances(probe: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<f64>> {
    if probe.vec_len != gallery.vec_len || probe.parts != gallery.parts {
        return Err(Error::Dim {
            op: "pairwise_distances",
            lhs: vec![probe.vec_len, probe.parts],
            rhs: vec![gallery.vec_len, gallery.parts],
        });
    }
    let parts = probe.parts;
    let chans = probe.vec_len / parts;
    let mut out = vec![0.0f64; probe.rows.len() * gallery.rows.len()];
    for (i, p) in probe.rows.iter().enumerate() {
        for (j, g) in gallery.rows.iter().enumerate() {
            let mut total = 0.0f64;
            for part in 0..parts {
                let mut ss = 0.0f64;
                for c in 0..chans {
                    let d = (p.vector[part * chans + c] - g.vector[part * chans + c]) as f64;
                    ss += d * d;
                }
                total += ss.sqrt();
            }
            out[i * gallery.rows.len() + j] = total / parts as f64;
        }
    }
    Ok(out)
}

/// Rank-k accuracy (percent) over row-major distances. Ties order by
/// gallery index; `exclude` marks (probe, gallery) pairs to skip.
pub fn rank_k(
    distances: &[f64],
    probe_labels: &[u32],
    gallery_labels: &[u32],
    k: usize,
    exclude: Option<&dyn Fn(usize, usize) -> bool>,
) -> Result<f64> {
    let np = probe_labels.len();
    let ng = gallery_labels.len();
    if distances.len() != np * ng {
        return Err(Error::Dim {
            op: "rank_k",
            lhs: vec![distances.len()],
            rhs: vec![np, ng],
        });
    }
    if np == 0 {
        return Err(Error::Protocol("rank_k: empty probe set".into()));
    }
    let mut hits = 0usize;
    for i in 0..np {
        let mut order: Vec<usize> = (0..ng)
            .filter(|&j| exclude.map_or(true, |f| !f(i, j)))
            .collect();
        if !order.iter().any(|&j| gallery_labels[j] == probe_labels[i]) {
            return Err(Error::Protocol(format!(
                "probe identity {} absent from gallery",
                probe_labels[i]
            )));
        }
        order.sort_by(|&a, &b| {
            distances[i * ng + a]
                .partial_cmp(&distances[i * ng + b])
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        if order
            .iter()
            .take(k)
            .any(|&j| gallery_labels[j] == probe_labels[i])
        {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / np as f64)
}

// ── protocols ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    /// Display name, e.g. "LiDAR->Camera".
    pub name: String,
    /// Exclude the probe's own sequence id from its gallery (same-modality
    /// self retrieval).
    pub self_exclude: bool,
    /// Emit the view x view rank-1 matrix.
    pub cross_view: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossViewCell {
    pub view_probe: u16,
    pub view_gallery: u16,
    pub rank1: f64,
    /// Identical-view cell, reported but flagged.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub protocol: String,
    pub rank1: f64,
    pub rank5: f64,
    /// (condition name, probe count, rank-1) with the full gallery.
    pub per_condition: Vec<(String, usize, f64)>,
    pub cross_view: Vec<CrossViewCell>,
}

fn condition_name(code: u8) -> &'static str {
    match code {
        0 => ConditionKind::Normal.name(),
        1 => ConditionKind::Clothing.name(),
        2 => ConditionKind::Carrying.name(),
        3 => ConditionKind::Night.name(),
        _ => "unknown",
    }
}

/// Rank accuracies for probe/gallery subsets of a precomputed matrix.
fn rank_on_subset(
    distances: &[f64],
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    probe_idx: &[usize],
    gallery_idx: &[usize],
    k: usize,
    self_exclude: bool,
) -> Result<f64> {
    if probe_idx.is_empty() || gallery_idx.is_empty() {
        return Err(Error::Protocol("empty probe or gallery subset".into()));
    }
    let ng = gallery.rows.len();
    let sub: Vec<f64> = probe_idx
        .iter()
        .flat_map(|&i| gallery_idx.iter().map(move |&j| distances[i * ng + j]))
        .collect();
    let plabels: Vec<u32> = probe_idx.iter().map(|&i| probe.rows[i].identity).collect();
    let glabels: Vec<u32> = gallery_idx
        .iter()
        .map(|&j| gallery.rows[j].identity)
        .collect();
    if self_exclude {
        let same: Vec<Vec<bool>> = probe_idx
            .iter()
            .map(|&i| {
                gallery_idx
                    .iter()
                    .map(|&j| probe.rows[i].sequence_id == gallery.rows[j].sequence_id)
                    .collect()
            })
            .collect();
        let f = |i: usize, j: usize| same[i][j];
        rank_k(&sub, &plabels, &glabels, k, Some(&f))
    } else {
        rank_k(&sub, &plabels, &glabels, k, None)
    }
}

/// Full protocol evaluation: overall rank-1/rank-5, per-condition rank-1
/// with the full gallery, and optionally the cross-view rank-1 matrix.
pub fn evaluate_protocol(
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    opts: &ProtocolOptions,
) -> Result<ProtocolReport> {
    if probe.rows.is_empty() {
        return Err(Error::Protocol(format!("{}: empty probe role", opts.name)));
    }
    if gallery.rows.is_empty() {
        return Err(Error::Protocol(format!("{}: empty gallery role", opts.name)));
    }
    let distances = pairwise_distances(probe, gallery)?;
    let all_p: Vec<usize> = (0..probe.rows.len()).collect();
    let all_g: Vec<usize> = (0..gallery.rows.len()).collect();
    let rank1 = rank_on_subset(&distances, probe, gallery, &all_p, &all_g, 1, opts.self_exclude)?;
    let rank5 = rank_on_subset(&distances, probe, gallery, &all_p, &all_g, 5, opts.self_exclude)?;

    let mut conditions: Vec<u8> = probe.rows.iter().map(|r| r.condition).collect();
    conditions.sort_unstable();
    conditions.dedup();
    let mut per_condition = Vec::new();
    for cond in conditions {
        let idx: Vec<usize> = (0..probe.rows.len())
            .filter(|&i| probe.rows[i].condition == cond)
            .collect();
        let r1 = rank_on_subset(&distances, probe, gallery, &idx, &all_g, 1, opts.self_exclude)?;
        per_condition.push((condition_name(cond).to_string(), idx.len(), r1));
    }

    let mut cross_view = Vec::new();
    if opts.cross_view {
        let mut pviews: Vec<u16> = probe.rows.iter().map(|r| r.view).collect();
        pviews.sort_unstable();
        pviews.dedup();
        let mut gviews: Vec<u16> = gallery.rows.iter().map(|r| r.view).collect();
        gviews.sort_unstable();
        gviews.dedup();
        for &u in &pviews {
            let pi: Vec<usize> = (0..probe.rows.len())
                .filter(|&i| probe.rows[i].view == u)
                .collect();
            for &v in &gviews {
                let gi: Vec<usize> = (0..gallery.rows.len())
                    .filter(|&j| gallery.rows[j].view == v)
                    .collect();
                let r1 =
                    rank_on_subset(&distances, probe, gallery, &pi, &gi, 1, opts.self_exclude)?;
                cross_view.push(CrossViewCell {
                    view_probe: u,
                    view_gallery: v,
                    rank1: r1,
                    identical: u == v,
                });
            }
        }
    }

    let report = ProtocolReport {
        protocol: opts.name.clone(),
        rank1,
        rank5,
        per_condition,
        cross_view,
    };
    debug_assert!(report.rank5 >= report.rank1);
    Ok(report)
}

// ── report files ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_CSV_HEADER: &str = "protocol,metric,condition,view_probe,view_gallery,value";

impl ProtocolReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        let p = &self.protocol;
        out.push_str(&format!("{p},rank1,overall,,,{:.2}\n", self.rank1));
        out.push_str(&format!("{p},rank5,overall,,,{:.2}\n", self.rank5));
        for (cond, _count, r1) in &self.per_condition {
            out.push_str(&format!("{p},rank1,{cond},,,{r1:.2}\n"));
        }
        for cell in &self.cross_view {
            let metric = if cell.identical {
                "rank1_identical_view"
            } else {
                "rank1"
            };
            out.push_str(&format!(
                "{p},{metric},overall,{:03},{:03},{:.2}\n",
                cell.view_probe, cell.view_gallery, cell.rank1
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "protocol": self.protocol,
            "rank1": format!("{:.2}", self.rank1).parse::<f64>().expect("valid"),
            "rank5": format!("{:.2}", self.rank5).parse::<f64>().expect("valid"),
            "per_condition": self.per_condition.iter().map(|(c, n, r)| {
                serde_json::json!({
                    "condition": c,
                    "probes": n,
                    "rank1": format!("{r:.2}").parse::<f64>().expect("valid"),
                })
            }).collect::<Vec<_>>(),
            "cross_view": self.cross_view.iter().map(|cell| {
                serde_json::json!({
                    "view_probe": cell.view_probe,
                    "view_gallery": cell.view_gallery,
                    "rank1": format!("{:.2}", cell.rank1).parse::<f64>().expect("valid"),
                    "identical_view": cell.identical,
                })
            }).collect::<Vec<_>>(),
        })
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let text = match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => format!("{:#}\n", self.to_json()),
        };
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

// ── embedding files (CGEMB1) ─────────────────────────────────────────

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.vec_len as u32).to_le_bytes());
    for r in &set.rows {
        out.extend_from_slice(&(r.sequence_id.len() as u16).to_le_bytes());
        out.extend_from_slice(r.sequence_id.as_bytes());
        out.extend_from_slice(&r.identity.to_le_bytes());
        out.push(r.condition);
        out.extend_from_slice(&r.view.to_le_bytes());
        out.push(r.modality);
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a CGEMB1 file. The on-disk format does not carry the part count,
/// so the caller supplies it (1 = plain Euclidean distance).
pub fn read_embeddings(path: &Path, parts: usize) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |offset: usize, detail: String| Error::Format {
        what: "embedding file",
        offset: offset as u64,
        detail: format!("{}: {detail}", path.display()),
    };
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > bytes.len() {
            Err(fail(
                bytes.len(),
                format!("truncated: need {n} bytes at offset {pos}"),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 6 + 4 + 8 + 4)?;
    if &bytes[..6] != EMB_MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4"));
    if version != EMB_VERSION {
        return Err(fail(6, format!("version mismatch: {version} != {EMB_VERSION}")));
    }
    let row_count = u64::from_le_bytes(bytes[10..18].try_into().expect("8")) as usize;
    let vec_len = u32::from_le_bytes(bytes[18..22].try_into().expect("4")) as usize;
    let mut pos = 22usize;
    let mut rows = Vec::with_capacity(row_count);
    for _ in 0..row_count {
        need(pos, 2)?;
        let id_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().expect("2")) as usize;
        pos += 2;
        need(pos, id_len + 4 + 1 + 2 + 1)?;
        let sequence_id = String::from_utf8(bytes[pos..pos + id_len].to_vec())
            .map_err(|e| fail(pos, format!("bad sequence id: {e}")))?;
        pos += id_len;
        let identity = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4"));
        pos += 4;
        let condition = bytes[pos];
        pos += 1;
        let view = u16::from_le_bytes(bytes[pos..pos + 2].try_into().expect("2"));
        pos += 2;
        let modality = bytes[pos];
        pos += 1;
        need(pos, vec_len * 4)?;
        let mut vector = Vec::with_capacity(vec_len);
        for i in 0..vec_len {
            vector.push(f32::from_le_bytes(
                bytes[pos + i * 4..pos + i * 4 + 4].try_into().expect("4"),
            ));
        }
        pos += vec_len * 4;
        rows.push(EmbeddingRow {
            sequence_id,
            identity,
            condition,
            view,
            modality,
            vector,
        });
    }
    if pos != bytes.len() {
        return Err(fail(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let set = EmbeddingSet {
        vec_len,
        parts,
        rows,
    };
    set.validate()?;
    Ok(set)
}
