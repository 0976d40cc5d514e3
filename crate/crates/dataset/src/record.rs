//! The manifest record: one JSON object per line, file paths relative to
//! the manifest directory.

use std::fmt;

use layered_core::augment::AugmentRecord;
use layered_core::compositor::Stroke;
use layered_core::edges::CannyParams;
use layered_core::mask::MaskParams;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Content,
    Structural,
    Color,
    Spatial,
    Removal,
}

impl Pipeline {
    pub const ALL: [Pipeline; 5] =
        [Pipeline::Content, Pipeline::Structural, Pipeline::Color, Pipeline::Spatial, Pipeline::Removal];

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Content => "content",
            Pipeline::Structural => "structural",
            Pipeline::Color => "color",
            Pipeline::Spatial => "spatial",
            Pipeline::Removal => "removal",
        }
    }

    /// Whether records of this pipeline carry a context image `y`.
    pub fn has_input(self) -> bool {
        !matches!(self, Pipeline::Structural | Pipeline::Color)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown pipeline `{s}`"))
    }
}

/// Everything needed to re-render a record's derived files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pipeline", rename_all = "lowercase")]
pub enum Params {
    Content {
        augmentation: AugmentRecord,
        background_strokes: Vec<Stroke>,
        bbox_margin: usize,
        background_fill: f64,
    },
    Structural {
        extractor: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        canny: Option<CannyParams>,
    },
    Color {
        cue_width: usize,
        cue_height: usize,
    },
    Spatial {
        mask_params: MaskParams,
        /// Hull area over image area of the accepted mask.
        mask_ratio: f64,
    },
    Removal {
        offset: [usize; 2],
    },
}

impl Params {
    pub fn pipeline(&self) -> Pipeline {
        match self {
            Params::Content { .. } => Pipeline::Content,
            Params::Structural { .. } => Pipeline::Structural,
            Params::Color { .. } => Pipeline::Color,
            Params::Spatial { .. } => Pipeline::Spatial,
            Params::Removal { .. } => Pipeline::Removal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Stem of the input file this record came from.
    pub source: String,
    pub seed: u64,
    /// Index of the sample within its build; selects the RNG stream.
    pub index: u64,
    #[serde(default)]
    pub caption: String,
    /// The target image `x`.
    pub target: String,
    /// The context image `y`; absent for structural and color records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fg_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_mask: Option<String>,
    /// Spatial edit mask `M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Edge or color cue map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue: Option<String>,
    #[serde(flatten)]
    pub params: Params,
}

impl ManifestRecord {
    pub fn pipeline(&self) -> Pipeline {
        self.params.pipeline()
    }

    /// All referenced file paths with their field names.
    pub fn files(&self) -> Vec<(&'static str, &str)> {
        let mut out = vec![("target", self.target.as_str())];
        let optional = [
            ("input", &self.input),
            ("fg_mask", &self.fg_mask),
            ("background_mask", &self.background_mask),
            ("mask", &self.mask),
            ("cue", &self.cue),
        ];
        out.extend(optional.into_iter().filter_map(|(k, v)| v.as_deref().map(|p| (k, p))));
        out
    }

    /// Per-pipeline field requirements beyond what serde enforces.
    pub fn schema_errors(&self) -> Vec<String> {
        let p = self.pipeline();
        let mut errs = Vec::new();
        let mut need = |field: &str, present: bool, wanted: bool| {
            if present != wanted {
                let what = if wanted { "requires" } else { "must not carry" };
                errs.push(format!("{p} record {what} `{field}`"));
            }
        };
        need("input", self.input.is_some(), p.has_input());
        need("fg_mask", self.fg_mask.is_some(), matches!(p, Pipeline::Content | Pipeline::Removal));
        need("background_mask", self.background_mask.is_some(), p == Pipeline::Content);
        need("mask", self.mask.is_some(), matches!(p, Pipeline::Spatial | Pipeline::Removal));
        need("cue", self.cue.is_some(), matches!(p, Pipeline::Structural | Pipeline::Color));
        if self.id.is_empty() {
            errs.push("empty id".into());
        }
        for (field, path) in self.files() {
            let bad = path.is_empty()
                || std::path::Path::new(path).is_absolute()
                || path.split(['/', '\\']).any(|c| c == "..");
            if bad {
                errs.push(format!("`{field}` path `{path}` is not a plain relative path"));
            }
        }
        errs
    }
}
