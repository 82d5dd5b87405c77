//! Detection / ground-truth JSON:
//! `{"images":[{"id":"...","gt":[[x1,y1,x2,y2],...],"det":[[x1,y1,x2,y2,score],...]}]}`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use amam_core::eval::DetectionRecord;
use amam_core::{BBox, Detection, ImageRecord};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DetectionsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: image {id:?}: {message}")]
    Invalid {
        path: PathBuf,
        id: String,
        message: String,
    },
    #[error("{path}: duplicate image id {id:?}")]
    DuplicateId { path: PathBuf, id: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    #[serde(default)]
    pub gt: Vec<[f64; 4]>,
    #[serde(default)]
    pub det: Vec<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFile {
    pub images: Vec<ImageEntry>,
}

impl DetectionFile {
    pub fn from_records(images: &[ImageRecord]) -> Self {
        DetectionFile {
            images: images
                .iter()
                .map(|im| ImageEntry {
                    id: im.id.clone(),
                    gt: im
                        .gts
                        .iter()
                        .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
                        .collect(),
                    det: im
                        .dets
                        .iter()
                        .map(|d| {
                            [
                                d.bbox.x_min,
                                d.bbox.y_min,
                                d.bbox.x_max,
                                d.bbox.y_max,
                                d.score,
                            ]
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Validated records; `path` only labels errors.
    pub fn to_records(&self, path: &Path) -> Result<Vec<ImageRecord>, DetectionsError> {
        let mut seen = HashMap::new();
        self.images
            .iter()
            .map(|e| {
                if seen.insert(e.id.as_str(), ()).is_some() {
                    return Err(DetectionsError::DuplicateId {
                        path: path.to_path_buf(),
                        id: e.id.clone(),
                    });
                }
                let invalid = |message: String| DetectionsError::Invalid {
                    path: path.to_path_buf(),
                    id: e.id.clone(),
                    message,
                };
                let gts =
                    e.gt.iter()
                        .enumerate()
                        .map(|(k, g)| {
                            BBox::new(g[0], g[1], g[2], g[3])
                                .map_err(|err| invalid(format!("gt {k}: {err}")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                let dets = e
                    .det
                    .iter()
                    .enumerate()
                    .map(|(k, d)| {
                        let rec = DetectionRecord {
                            image_id: e.id.clone(),
                            bbox: BBox {
                                x_min: d[0],
                                y_min: d[1],
                                x_max: d[2],
                                y_max: d[3],
                            },
                            score: d[4],
                        };
                        rec.validate()
                            .map_err(|err| invalid(format!("det {k}: {err}")))?;
                        Ok(Detection {
                            bbox: rec.bbox,
                            score: rec.score,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ImageRecord {
                    id: e.id.clone(),
                    gts,
                    dets,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("detections serialize")
    }
}

pub fn parse(text: &str, path: &Path) -> Result<DetectionFile, DetectionsError> {
    serde_json::from_str(text).map_err(|source| DetectionsError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<DetectionFile, DetectionsError> {
    let text = fs::read_to_string(path).map_err(|source| DetectionsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text, path)
}

/// Ground truth from `gt`, detections from `pred`, joined on image id.
/// Images follow `gt` order; prediction-only images are appended in `pred`
/// order.
pub fn merge(pred: &[ImageRecord], gt: &[ImageRecord]) -> Vec<ImageRecord> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<ImageRecord> = gt
        .iter()
        .enumerate()
        .map(|(i, g)| {
            index.insert(g.id.as_str(), i);
            ImageRecord {
                id: g.id.clone(),
                gts: g.gts.clone(),
                dets: Vec::new(),
            }
        })
        .collect();
    for p in pred {
        match index.get(p.id.as_str()) {
            Some(&i) => out[i].dets = p.dets.clone(),
            None => out.push(ImageRecord {
                id: p.id.clone(),
                gts: Vec::new(),
                dets: p.dets.clone(),
            }),
        }
    }
    out
}
