//! Session state as a replay of an event log.
//!
//! `clicks.json` is the source of truth. Everything else under a session
//! directory (mask PNGs, propagated masks) is a cache that replay rewrites
//! with identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::ApiError;
use crate::clicks::{Click, Polarity};
use crate::error::Error;
use crate::mask::{iou, GrayF64, Mask2D};
use crate::model::{predict_padded, Weights};
use crate::propagation::{propagate_volume, slice_file_name, PropagationConfig, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Image,
    Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub kind: SessionKind,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub weights_ref: String,
    pub propagation: PropagationConfig,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Click {
        slice: usize,
        row: usize,
        col: usize,
        polarity: Polarity,
    },
    Undo {
        slice: usize,
    },
    Propagate {
        seed_slices: Vec<usize>,
    },
}

#[derive(Clone, Debug, Default)]
struct SliceState {
    clicks: Vec<Click>,
    version: u64,
    mask: Option<Mask2D>,
    /// PNG bytes of every version of this slice's mask, version 0 empty.
    versions: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropagationSummary {
    pub status: &'static str,
    pub seed_slices: Vec<usize>,
    pub provenance: BTreeMap<usize, usize>,
    /// Clicks were placed after the last propagation.
    pub stale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SliceSummary {
    pub slice: usize,
    pub clicks: Vec<Click>,
    pub mask_version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionSummary {
    #[serde(flatten)]
    pub meta: SessionMeta,
    pub active_slice: usize,
    pub events: usize,
    pub slices: Vec<SliceSummary>,
    pub propagation: PropagationSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Applied {
    Mask {
        slice: usize,
        mask_version: u64,
        iou_hint: f64,
    },
    Propagated {
        job_status: &'static str,
        provenance: BTreeMap<usize, usize>,
    },
}

struct Propagated {
    seeds: Vec<usize>,
    masks: Vec<Mask2D>,
    provenance: Vec<usize>,
    stale: bool,
}

pub struct Session {
    pub meta: SessionMeta,
    dir: PathBuf,
    images: Vec<GrayF64>,
    slices: Vec<SliceState>,
    log: Vec<Event>,
    propagated: Option<Propagated>,
    active_slice: usize,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn io_err(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::Internal(format!("{}: {e}", path.display()))
}

/// Writes through a temporary file so readers never see a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn ensure_dir(path: &Path) -> Result<(), ApiError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::OutOfBoundsClick { .. } | Error::DimMismatch(_) | Error::InvalidConfig(_) => {
                ApiError::Unprocessable(e.to_string())
            }
            Error::EmptyInput(_) => ApiError::Conflict(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl Session {
    pub fn create(
        dir: PathBuf,
        session_id: String,
        kind: SessionKind,
        images: Vec<GrayF64>,
        weights_ref: String,
        propagation: PropagationConfig,
    ) -> Result<Self, ApiError> {
        let vol = Volume3D::new(images).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        propagation
            .validate()
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let t = now();
        let meta = SessionMeta {
            session_id,
            kind,
            depth: vol.depth,
            height: vol.height,
            width: vol.width,
            weights_ref,
            propagation,
            created_at: t,
            updated_at: t,
        };
        let slices_dir = dir.join("slices");
        ensure_dir(&slices_dir)?;
        // Keep what a reload will read back, so replay after restart sees
        // the same 8-bit pixels.
        let mut stored = Vec::with_capacity(vol.depth);
        for (k, s) in vol.slices.iter().enumerate() {
            let png = s.to_png_bytes();
            write_atomic(&slices_dir.join(slice_file_name(k)), &png)?;
            stored.push(GrayF64::from_png_bytes(&png)?);
        }
        let session = Session::fresh(dir, meta, stored);
        session.write_meta()?;
        session.write_log()?;
        Ok(session)
    }

    fn fresh(dir: PathBuf, meta: SessionMeta, images: Vec<GrayF64>) -> Self {
        let empty = Mask2D::new(meta.height, meta.width).to_png_bytes();
        let slices = (0..meta.depth)
            .map(|_| SliceState {
                versions: vec![empty.clone()],
                ..SliceState::default()
            })
            .collect();
        Session {
            meta,
            dir,
            images,
            slices,
            log: Vec::new(),
            propagated: None,
            active_slice: 0,
        }
    }

    /// Rebuilds a session from its directory by replaying `clicks.json`.
    pub fn load(dir: PathBuf, weights: &Weights) -> Result<Self, ApiError> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let meta: SessionMeta = serde_json::from_str(&text).map_err(|e| ApiError::Internal(e.to_string()))?;
        let images = (0..meta.depth)
            .map(|k| {
                let p = dir.join("slices").join(slice_file_name(k));
                GrayF64::load(&p).map_err(ApiError::from)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let log_path = dir.join("clicks.json");
        let text = fs::read_to_string(&log_path).map_err(|e| io_err(&log_path, e))?;
        let events: Vec<Event> = serde_json::from_str(&text).map_err(|e| ApiError::Internal(e.to_string()))?;
        let mut s = Session::fresh(dir, meta, images);
        for ev in events {
            s.apply(ev, weights)?;
        }
        Ok(s)
    }

    fn write_meta(&self) -> Result<(), ApiError> {
        let bytes = serde_json::to_vec_pretty(&self.meta).map_err(|e| ApiError::Internal(e.to_string()))?;
        write_atomic(&self.dir.join("meta.json"), &bytes)
    }

    fn write_log(&self) -> Result<(), ApiError> {
        let bytes = serde_json::to_vec_pretty(&self.log).map_err(|e| ApiError::Internal(e.to_string()))?;
        write_atomic(&self.dir.join("clicks.json"), &bytes)
    }

    /// Applies and persists one event. Rejected events leave no trace.
    pub fn record(&mut self, event: Event, weights: &Weights) -> Result<Applied, ApiError> {
        let applied = self.apply(event, weights)?;
        self.meta.updated_at = now();
        self.write_log()?;
        self.write_meta()?;
        Ok(applied)
    }

    fn check_slice(&self, slice: usize) -> Result<(), ApiError> {
        if slice >= self.meta.depth {
            return Err(ApiError::Unprocessable(format!(
                "slice {slice} outside depth {}",
                self.meta.depth
            )));
        }
        Ok(())
    }

    fn apply(&mut self, event: Event, weights: &Weights) -> Result<Applied, ApiError> {
        let applied = match &event {
            Event::Click {
                slice,
                row,
                col,
                polarity,
            } => {
                self.check_slice(*slice)?;
                let click = Click {
                    row: *row,
                    col: *col,
                    polarity: *polarity,
                    ordinal: self.slices[*slice].clicks.len(),
                };
                click.check_bounds(self.meta.height, self.meta.width)?;
                let mut clicks = self.slices[*slice].clicks.clone();
                clicks.push(click);
                self.set_clicks(*slice, clicks, weights)?
            }
            Event::Undo { slice } => {
                self.check_slice(*slice)?;
                let mut clicks = self.slices[*slice].clicks.clone();
                if clicks.pop().is_none() {
                    return Err(ApiError::Conflict(format!("no clicks to undo on slice {slice}")));
                }
                self.set_clicks(*slice, clicks, weights)?
            }
            Event::Propagate { seed_slices } => self.propagate(seed_slices, weights)?,
        };
        self.log.push(event);
        Ok(applied)
    }

    /// Recomputes the slice mask from scratch for the given click list.
    fn set_clicks(&mut self, slice: usize, clicks: Vec<Click>, weights: &Weights) -> Result<Applied, ApiError> {
        let (h, w) = (self.meta.height, self.meta.width);
        let mask = if clicks.is_empty() {
            None
        } else {
            let probs = predict_padded(weights, &self.images[slice], &clicks)?;
            Some(Mask2D::threshold(h, w, &probs, 0.5)?)
        };
        let empty = Mask2D::new(h, w);
        let state = &mut self.slices[slice];
        let before = state.mask.as_ref().unwrap_or(&empty);
        let after = mask.as_ref().unwrap_or(&empty);
        let iou_hint = iou(after, before)?;
        let png = after.to_png_bytes();
        let version = state.version + 1;
        let dir = self.dir.join("masks").join(format!("{slice:04}"));
        ensure_dir(&dir)?;
        write_atomic(&dir.join(format!("v{version:06}.png")), &png)?;
        state.clicks = clicks;
        state.mask = mask;
        state.version = version;
        state.versions.push(png);
        self.active_slice = slice;
        if let Some(p) = &mut self.propagated {
            p.stale = true;
        }
        Ok(Applied::Mask {
            slice,
            mask_version: version,
            iou_hint,
        })
    }

    fn propagate(&mut self, seed_slices: &[usize], weights: &Weights) -> Result<Applied, ApiError> {
        if self.meta.kind != SessionKind::Volume {
            return Err(ApiError::Unprocessable("propagation needs a volume session".into()));
        }
        let mut seeds = Vec::with_capacity(seed_slices.len());
        for &k in seed_slices {
            self.check_slice(k)?;
            match &self.slices[k].mask {
                Some(m) => seeds.push((k, m.clone())),
                None => return Err(ApiError::Conflict(format!("slice {k} has no mask to seed from"))),
            }
        }
        if seeds.is_empty() {
            return Err(ApiError::Conflict("no seed masks".into()));
        }
        let vol = Volume3D::new(self.images.clone())?;
        let out = propagate_volume(&vol, &seeds, &self.meta.propagation, Some(weights))?;
        let dir = self.dir.join("masks").join("propagated");
        ensure_dir(&dir)?;
        for (k, m) in out.masks.iter().enumerate() {
            write_atomic(&dir.join(slice_file_name(k)), &m.to_png_bytes())?;
        }
        let provenance = out.provenance_map();
        let bytes = serde_json::to_vec_pretty(&provenance).map_err(|e| ApiError::Internal(e.to_string()))?;
        write_atomic(&self.dir.join("masks").join("provenance.json"), &bytes)?;
        self.propagated = Some(Propagated {
            seeds: seed_slices.to_vec(),
            masks: out.masks,
            provenance: out.provenance,
            stale: false,
        });
        Ok(Applied::Propagated {
            job_status: "done",
            provenance,
        })
    }

    /// Slices that currently have at least one click.
    pub fn clicked_slices(&self) -> Vec<usize> {
        (0..self.meta.depth)
            .filter(|&k| !self.slices[k].clicks.is_empty())
            .collect()
    }

    pub fn mask_png(&self, slice: usize, version: Option<u64>) -> Result<(u64, Vec<u8>), ApiError> {
        let state = self
            .slices
            .get(slice)
            .ok_or_else(|| ApiError::NotFound(format!("slice {slice}")))?;
        let v = version.unwrap_or(state.version);
        state
            .versions
            .get(v as usize)
            .map(|png| (v, png.clone()))
            .ok_or_else(|| ApiError::NotFound(format!("slice {slice} has no mask version {v}")))
    }

    pub fn slice_png(&self, slice: usize) -> Result<Vec<u8>, ApiError> {
        self.images
            .get(slice)
            .map(GrayF64::to_png_bytes)
            .ok_or_else(|| ApiError::NotFound(format!("slice {slice}")))
    }

    pub fn propagated_png(&self, slice: usize) -> Result<Vec<u8>, ApiError> {
        self.propagated
            .as_ref()
            .and_then(|p| p.masks.get(slice))
            .map(Mask2D::to_png_bytes)
            .ok_or_else(|| ApiError::NotFound(format!("no propagated mask for slice {slice}")))
    }

    pub fn events(&self) -> &[Event] {
        &self.log
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            meta: self.meta.clone(),
            active_slice: self.active_slice,
            events: self.log.len(),
            slices: self
                .slices
                .iter()
                .enumerate()
                .map(|(k, s)| SliceSummary {
                    slice: k,
                    clicks: s.clicks.clone(),
                    mask_version: s.version,
                })
                .collect(),
            propagation: match &self.propagated {
                None => PropagationSummary {
                    status: "none",
                    seed_slices: Vec::new(),
                    provenance: BTreeMap::new(),
                    stale: false,
                },
                Some(p) => PropagationSummary {
                    status: "done",
                    seed_slices: p.seeds.clone(),
                    provenance: p.provenance.iter().copied().enumerate().collect(),
                    stale: p.stale,
                },
            },
        }
    }
}
