//! wasm-bindgen exports behind `www/index.html`.
//!
//! The plain functions do the work and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use std::collections::BTreeMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use hdyolo_core::data::{generate_image, Regime, Shape, SynthSpec};
use hdyolo_core::hganet::dba_attention;
use hdyolo_core::hypergraph::{construct_hypergraph, pairwise_distance, VertexSet};
use hdyolo_core::HdError;

#[derive(Debug, Serialize)]
pub struct HypergraphView {
    pub n_vertices: usize,
    pub n_hyperedges: usize,
    pub degree_histogram: BTreeMap<usize, usize>,
    pub epsilon: f64,
    pub vertex_degrees: Vec<usize>,
    /// Members of the hyperedge centred on each vertex.
    pub edges: Vec<Vec<usize>>,
}

fn points(xy: &[f64]) -> Result<VertexSet, HdError> {
    if xy.len() % 2 != 0 {
        return Err(HdError::Shape(format!("expected x,y pairs, got {} numbers", xy.len())));
    }
    VertexSet::new(xy.len() / 2, 2, xy.to_vec())
}

pub fn hypergraph_view(xy: &[f64], epsilon: f64) -> Result<HypergraphView, HdError> {
    let vs = points(xy)?;
    let hg = construct_hypergraph(&vs, epsilon)?;
    Ok(HypergraphView {
        n_vertices: hg.n_vertices(),
        n_hyperedges: hg.n_edges(),
        degree_histogram: hg.degree_histogram(),
        epsilon,
        vertex_degrees: hg.vertex_degrees().to_vec(),
        edges: (0..hg.n_edges()).map(|e| hg.edge_members(e).collect()).collect(),
    })
}

/// Row-major `n × n` attention of 2-D points.
pub fn attention_matrix(xy: &[f64], scale: f64) -> Result<Vec<f64>, HdError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(HdError::config("dba_scale", format!("must be finite and positive, got {scale}")));
    }
    Ok(dba_attention(&pairwise_distance(&points(xy)?)?, scale))
}

#[derive(Debug, Serialize)]
pub struct PreviewBox {
    pub class_id: usize,
    pub shape: Shape,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub area_fraction: f64,
}

#[wasm_bindgen]
pub struct SynthPreview {
    size: usize,
    rgba: Vec<u8>,
    boxes: Vec<PreviewBox>,
}

#[wasm_bindgen]
impl SynthPreview {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// `size × size × 4` bytes for an `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn boxes_json(&self) -> String {
        serde_json::to_string(&self.boxes).unwrap_or_default()
    }
}

impl SynthPreview {
    pub fn boxes(&self) -> &[PreviewBox] {
        &self.boxes
    }

    pub fn rgba_bytes(&self) -> &[u8] {
        &self.rgba
    }
}

pub fn synth_preview_image(regime: &str, size: usize, seed: u64) -> Result<SynthPreview, HdError> {
    let regime: Regime = regime.parse()?;
    let spec = SynthSpec::new(regime, 1, size, seed);
    let img = generate_image(&spec, 0)?;
    let rgba = img.to_rgb8().pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect();
    let n2 = (size * size) as f64;
    let boxes = img
        .defects
        .iter()
        .map(|d| PreviewBox {
            class_id: d.class_id,
            shape: d.shape,
            x0: d.x0,
            y0: d.y0,
            w: d.w,
            h: d.h,
            area_fraction: (d.w * d.h) as f64 / n2,
        })
        .collect();
    Ok(SynthPreview { size, rgba, boxes })
}

fn js(e: HdError) -> JsError {
    JsError::new(&e.to_string())
}

/// JSON [`HypergraphView`] of flat `x0, y0, x1, y1, …` points.
#[wasm_bindgen]
pub fn hypergraph(xy: &[f64], epsilon: f64) -> Result<String, JsError> {
    let view = hypergraph_view(xy, epsilon).map_err(js)?;
    serde_json::to_string(&view).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn attention(xy: &[f64], scale: f64) -> Result<Vec<f64>, JsError> {
    attention_matrix(xy, scale).map_err(js)
}

#[wasm_bindgen]
pub fn synth_preview(regime: &str, size: usize, seed: u32) -> Result<SynthPreview, JsError> {
    synth_preview_image(regime, size, seed as u64).map_err(js)
}
