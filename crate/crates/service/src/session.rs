//! Session state and its mutations, independent of HTTP.

use std::collections::BTreeMap;
use std::sync::Arc;

use layered_core::compositor::{flatten, CueKind, Flattened, Layer, LayerKind, LayerStack, PaintStroke, Placement, Stroke};
use layered_core::raster::quantize;
use layered_core::Raster;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ApiResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hashes of the flattened condition maps; `None` for absent maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digests {
    pub y: String,
    pub mask: Option<String>,
    pub edges: Option<String>,
    pub colors: Option<String>,
}

/// A flattened stack with its maps already encoded.
#[derive(Clone, Debug)]
pub struct Composite {
    pub revision: u64,
    pub flattened: Flattened,
    pub y: Vec<u8>,
    pub mask: Option<Vec<u8>>,
    pub edges: Option<Vec<u8>>,
    pub colors: Option<Vec<u8>>,
    pub digests: Digests,
}

impl Composite {
    pub fn build(base: &Raster, stack: &LayerStack, revision: u64) -> layered_core::Result<Self> {
        let flattened = flatten(base, stack)?;
        let y = flattened.image.to_png_bytes()?;
        let mask = flattened.mask.as_ref().map(|m| m.to_png_bytes()).transpose()?;
        let edges = flattened.edges.as_ref().map(|e| e.to_png_bytes()).transpose()?;
        let colors = flattened.colors.as_ref().map(|c| c.to_png_bytes()).transpose()?;
        let digests = Digests {
            y: sha256_hex(&y),
            mask: mask.as_deref().map(sha256_hex),
            edges: edges.as_deref().map(sha256_hex),
            colors: colors.as_deref().map(sha256_hex),
        };
        Ok(Self { revision, flattened, y, mask, edges, colors, digests })
    }

    pub fn map(&self, name: &str) -> Option<&[u8]> {
        match name {
            "y" => Some(&self.y),
            "mask" => self.mask.as_deref(),
            "edges" => self.edges.as_deref(),
            "colors" => self.colors.as_deref(),
            _ => None,
        }
    }

    pub fn strengths(&self) -> BTreeMap<String, f64> {
        self.flattened.strengths.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

/// The immutable inputs of a composite at one revision.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub revision: u64,
    pub base: Arc<Raster>,
    pub stack: Arc<LayerStack>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Generation {
    pub revision: u64,
    pub seed: u64,
    pub steps: usize,
    pub sigmas: BTreeMap<String, f64>,
    pub checkpoint: String,
    pub strict_sigma_zero: bool,
    pub digest: String,
    #[serde(skip)]
    pub png: Vec<u8>,
}

/// A layer as posted by a client; the server assigns an id when none is given.
#[derive(Clone, Debug, Deserialize)]
pub struct NewLayer {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub visible: Option<bool>,
}

/// A partial layer update. Stroke lists are appended, never replaced.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPatch {
    pub sigma: Option<f64>,
    pub visible: Option<bool>,
    pub placement: Option<Placement>,
    /// New position in the z-order (0 = bottom).
    pub index: Option<usize>,
    /// Spatial strokes or color paint strokes, depending on the layer kind.
    pub strokes: Option<Vec<serde_json::Value>>,
    pub add: Option<Vec<Stroke>>,
    pub subtract: Option<Vec<Stroke>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionExport {
    pub format: String,
    pub revision: u64,
    pub next_layer: u64,
    #[serde(with = "layered_core::raster::png_b64::raster")]
    pub base: Raster,
    pub stack: LayerStack,
}

pub const EXPORT_FORMAT: &str = "layered-session/1";

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    base: Arc<Raster>,
    stack: Arc<LayerStack>,
    revision: u64,
    next_layer: u64,
    pub last_generation: Option<Arc<Generation>>,
    cache: Option<Arc<Composite>>,
}

/// RGB at 8-bit precision, so a base survives PNG export unchanged.
fn canonical(base: &Raster) -> Raster {
    base.to_rgb().map(|v| f64::from(quantize(v)) / 255.0)
}

fn parse_strokes<T: serde::de::DeserializeOwned>(values: Vec<serde_json::Value>) -> ApiResult<Vec<T>> {
    values
        .into_iter()
        .map(|v| serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("stroke: {e}"))))
        .collect()
}

impl Session {
    pub fn new(id: String, base: Raster) -> Self {
        let stack = LayerStack::new(base.width(), base.height());
        Self { id, base: Arc::new(canonical(&base)), stack: Arc::new(stack), revision: 0, next_layer: 0, last_generation: None, cache: None }
    }

    pub fn from_export(id: String, export: SessionExport) -> ApiResult<Self> {
        if export.format != EXPORT_FORMAT {
            return Err(ApiError::bad_request(format!("unsupported export format `{}`", export.format)));
        }
        if export.base.size() != (export.stack.width, export.stack.height) {
            return Err(ApiError::unprocessable("base image and stack sizes differ"));
        }
        export.stack.validate()?;
        Ok(Self {
            id,
            base: Arc::new(canonical(&export.base)),
            stack: Arc::new(export.stack),
            revision: export.revision,
            next_layer: export.next_layer,
            last_generation: None,
            cache: None,
        })
    }

    pub fn export(&self) -> SessionExport {
        SessionExport {
            format: EXPORT_FORMAT.into(),
            revision: self.revision,
            next_layer: self.next_layer,
            base: (*self.base).clone(),
            stack: (*self.stack).clone(),
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn base(&self) -> &Raster {
        &self.base
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { revision: self.revision, base: self.base.clone(), stack: self.stack.clone() }
    }

    pub fn cached_composite(&self) -> Option<Arc<Composite>> {
        self.cache.clone().filter(|c| c.revision == self.revision)
    }

    pub fn store_composite(&mut self, c: Arc<Composite>) {
        if c.revision == self.revision {
            self.cache = Some(c);
        }
    }

    /// Fails with 409 when `expected` names a revision other than the current one.
    pub fn check_revision(&self, expected: Option<u64>) -> ApiResult<()> {
        match expected {
            Some(e) if e != self.revision => Err(ApiError::conflict(self.revision, e)),
            _ => Ok(()),
        }
    }

    /// Applies `f` to a copy of the stack; the copy replaces the stack only
    /// if it validates, and only then does the revision move.
    fn mutate<R>(&mut self, f: impl FnOnce(&mut LayerStack) -> ApiResult<R>) -> ApiResult<R> {
        let mut next = (*self.stack).clone();
        let out = f(&mut next)?;
        next.validate()?;
        self.stack = Arc::new(next);
        self.revision += 1;
        Ok(out)
    }

    pub fn add_layer(&mut self, new: NewLayer) -> ApiResult<String> {
        let id = match new.id {
            Some(id) if !id.is_empty() => id,
            Some(_) => return Err(ApiError::bad_request("layer id must not be empty")),
            None => {
                let mut n = self.next_layer;
                while self.stack.layer(&format!("layer-{n}")).is_some() {
                    n += 1;
                }
                format!("layer-{n}")
            }
        };
        if self.stack.layer(&id).is_some() {
            return Err(ApiError::bad_request(format!("layer `{id}` already exists")));
        }
        let mut layer = Layer::new(id.clone(), new.kind);
        if let Some(s) = new.sigma {
            layer.sigma = s;
        }
        if let Some(v) = new.visible {
            layer.visible = v;
        }
        self.mutate(|stack| {
            stack.push(layer);
            Ok(())
        })?;
        self.next_layer += 1;
        Ok(id)
    }

    pub fn update_layer(&mut self, id: &str, patch: LayerPatch) -> ApiResult<()> {
        if self.stack.layer(id).is_none() {
            return Err(ApiError::not_found(format!("layer `{id}`")));
        }
        self.mutate(|stack| {
            let layer = stack.layer_mut(id).expect("checked above");
            if let Some(s) = patch.sigma {
                layer.sigma = s;
            }
            if let Some(v) = patch.visible {
                layer.visible = v;
            }
            match &mut layer.kind {
                LayerKind::Content { placement, .. } => {
                    if let Some(p) = patch.placement {
                        *placement = p;
                    }
                    if patch.strokes.is_some() || patch.add.is_some() || patch.subtract.is_some() {
                        return Err(ApiError::bad_request("content layers take no strokes"));
                    }
                }
                LayerKind::Spatial { strokes, .. } => {
                    if patch.placement.is_some() || patch.add.is_some() || patch.subtract.is_some() {
                        return Err(ApiError::bad_request("spatial layers accept `strokes` only"));
                    }
                    strokes.extend(parse_strokes::<Stroke>(patch.strokes.unwrap_or_default())?);
                }
                LayerKind::Structural { add, subtract, .. } => {
                    if patch.placement.is_some() || patch.strokes.is_some() {
                        return Err(ApiError::bad_request("structural layers accept `add` and `subtract`"));
                    }
                    add.extend(patch.add.unwrap_or_default());
                    subtract.extend(patch.subtract.unwrap_or_default());
                }
                LayerKind::Color { strokes, .. } => {
                    if patch.placement.is_some() || patch.add.is_some() || patch.subtract.is_some() {
                        return Err(ApiError::bad_request("color layers accept `strokes` only"));
                    }
                    strokes.extend(parse_strokes::<PaintStroke>(patch.strokes.unwrap_or_default())?);
                }
            }
            if let Some(to) = patch.index {
                if to >= stack.layers.len() {
                    return Err(ApiError::bad_request(format!("index {to} outside 0..{}", stack.layers.len())));
                }
                let from = stack.layers.iter().position(|l| l.id == id).expect("present");
                let l = stack.layers.remove(from);
                stack.layers.insert(to, l);
            }
            Ok(())
        })
    }

    pub fn delete_layer(&mut self, id: &str) -> ApiResult<()> {
        if self.stack.layer(id).is_none() {
            return Err(ApiError::not_found(format!("layer `{id}`")));
        }
        self.mutate(|stack| {
            stack.layers.retain(|l| l.id != id);
            Ok(())
        })
    }

    /// Replaces the base image. Layers stay; the canvas size must match.
    pub fn set_base(&mut self, base: Raster) -> ApiResult<()> {
        if base.size() != self.base.size() {
            return Err(ApiError::unprocessable(format!(
                "new base is {}x{}, canvas is {}x{}",
                base.width(),
                base.height(),
                self.base.width(),
                self.base.height()
            )));
        }
        self.base = Arc::new(canonical(&base));
        self.revision += 1;
        Ok(())
    }

    pub fn cue_kinds(&self) -> Vec<CueKind> {
        self.stack.layers.iter().filter_map(|l| l.kind.cue_kind()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use layered_core::compositor::Stroke;

    fn session() -> Session {
        Session::new("s".into(), Raster::from_fn(24, 20, 3, |x, y, c| ((x + 2 * y + c) % 9) as f64 / 8.0))
    }

    fn spatial() -> NewLayer {
        NewLayer { id: None, kind: LayerKind::Spatial { mask: None, strokes: vec![] }, sigma: None, visible: None }
    }

    #[test]
    fn revisions_move_only_on_successful_mutation() {
        let mut s = session();
        let id = s.add_layer(spatial()).unwrap();
        assert_eq!((id.as_str(), s.revision()), ("layer-0", 1));
        let bad = LayerPatch { sigma: Some(-1.0), ..Default::default() };
        assert!(s.update_layer(&id, bad).is_err());
        assert_eq!(s.revision(), 1);
        assert_eq!(s.stack().layers[0].sigma, 1.0);
        assert!(s.check_revision(Some(0)).is_err());
        assert!(s.check_revision(Some(1)).is_ok());
        assert!(s.check_revision(None).is_ok());
    }

    #[test]
    fn strokes_append() {
        let mut s = session();
        let id = s.add_layer(spatial()).unwrap();
        let stroke = serde_json::json!({"points": [[3.0, 3.0]], "radius": 2.0});
        for _ in 0..2 {
            s.update_layer(&id, LayerPatch { strokes: Some(vec![stroke.clone()]), ..Default::default() }).unwrap();
        }
        match &s.stack().layers[0].kind {
            LayerKind::Spatial { strokes, .. } => assert_eq!(strokes, &vec![Stroke { points: vec![[3.0, 3.0]], radius: 2.0 }; 2]),
            _ => unreachable!(),
        }
        let wrong = LayerPatch { add: Some(vec![]), ..Default::default() };
        assert!(s.update_layer(&id, wrong).is_err());
    }

    #[test]
    fn reorder_and_delete() {
        let mut s = session();
        let a = s.add_layer(spatial()).unwrap();
        let b = s.add_layer(NewLayer { id: Some("edges".into()), kind: LayerKind::Structural { edges: None, add: vec![], subtract: vec![] }, sigma: Some(2.0), visible: None }).unwrap();
        s.update_layer(&b, LayerPatch { index: Some(0), ..Default::default() }).unwrap();
        assert_eq!(s.stack().layers[0].id, "edges");
        assert!(s.update_layer(&a, LayerPatch { index: Some(5), ..Default::default() }).is_err());
        s.delete_layer(&a).unwrap();
        assert!(s.delete_layer(&a).is_err());
        assert_eq!(s.revision(), 4);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut s = session();
        let mut l = spatial();
        l.id = Some("x".into());
        s.add_layer(l.clone()).unwrap();
        assert!(s.add_layer(l).is_err());
    }

    #[test]
    fn empty_stack_composite_is_the_base() {
        let s = session();
        let c = Composite::build(s.base(), s.stack(), 0).unwrap();
        assert_eq!(c.y, s.base().to_png_bytes().unwrap());
        assert!(c.digests.mask.is_none() && c.digests.edges.is_none() && c.digests.colors.is_none());
    }

    #[test]
    fn export_round_trip_keeps_digests() {
        let mut s = session();
        let id = s.add_layer(NewLayer { id: None, kind: LayerKind::Color { base: None, strokes: vec![] }, sigma: None, visible: None }).unwrap();
        let paint = serde_json::json!({"points": [[5.0, 5.0], [15.0, 9.0]], "radius": 3.0, "color": "#ff0000"});
        s.update_layer(&id, LayerPatch { strokes: Some(vec![paint]), ..Default::default() }).unwrap();
        let json = serde_json::to_string(&s.export()).unwrap();
        let back = Session::from_export("t".into(), serde_json::from_str(&json).unwrap()).unwrap();
        let d1 = Composite::build(s.base(), s.stack(), 0).unwrap().digests;
        let d2 = Composite::build(back.base(), back.stack(), 0).unwrap().digests;
        assert_eq!(d1, d2);
        assert_eq!(back.revision(), s.revision());
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
