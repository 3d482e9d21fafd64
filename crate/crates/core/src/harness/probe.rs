//! Per-ray introspection: sampling densities and attention maps.

use std::fmt::Write as _;

use nrt_kernel::Graph;

use crate::adaptive_sampling::SamplePdf;
use crate::error::Result;
use crate::geometry::{generate_rays, Camera};
use crate::pipeline::{Model, SceneState, SourceSet};

/// Everything recorded for one probed pixel.
#[derive(Debug, Clone)]
pub struct Probe {
    pub pixel: (f64, f64),
    pub pdf: SamplePdf,
    pub depths: Vec<f64>,
    /// Ray-transformer aggregation weights over `depths`.
    pub weights: Vec<f64>,
    /// Decoder attention per layer, averaged over heads, one entry per token.
    pub decoder: Vec<Vec<f64>>,
    pub color: [f64; 3],
}

/// Rays per inference graph.
const CHUNK: usize = 64;

/// Renders `pixels` of `camera` in evaluation mode and keeps the internals.
pub fn probe(model: &Model, sources: &SourceSet, camera: &Camera, pixels: &[(f64, f64)]) -> Result<Vec<Probe>> {
    let state = model.scene_state(sources)?;
    let mut out = Vec::with_capacity(pixels.len());
    for part in pixels.chunks(CHUNK) {
        out.extend(probe_chunk(model, &state, camera, part)?);
    }
    Ok(out)
}

fn probe_chunk(model: &Model, state: &SceneState, camera: &Camera, pixels: &[(f64, f64)]) -> Result<Vec<Probe>> {
    let rays = generate_rays(camera, pixels)?.rays;
    let mut g = Graph::inference();
    let vars = state.vars(&mut g);
    let cfg = model.config();
    let batch = model
        .net
        .render_rays(&mut g, &model.store, &vars, &rays, &cfg.sampling(false, cfg.seed, 0))?;
    let emb = model.net.global.embed_rays(&mut g, &model.store, &rays)?;
    let (_, layers) = model.net.global.decode_global(&mut g, &model.store, emb, &vars.scene)?;
    let colors = g.value(batch.colors).data();
    let mut out = Vec::with_capacity(rays.len());
    for (i, &pixel) in pixels.iter().enumerate() {
        let decoder = layers
            .iter()
            .map(|w| {
                // [1, heads, R, T]
                let (heads, r, t) = (w.shape()[1], w.shape()[2], w.shape()[3]);
                let d = w.data();
                (0..t)
                    .map(|j| (0..heads).map(|h| d[(h * r + i) * t + j]).sum::<f64>() / heads as f64)
                    .collect()
            })
            .collect();
        out.push(Probe {
            pixel,
            pdf: batch.pdfs[i].clone(),
            depths: batch.depths[i].clone(),
            weights: batch.weights[i].clone(),
            decoder,
            color: [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]],
        });
    }
    Ok(out)
}

/// `ray,row,col,series,index,depth,value` with series `density` (cell
/// centres), `cdf` (cell edges) and `weight` (first-stage samples).
pub fn pdf_csv(probes: &[Probe]) -> String {
    let mut s = String::from("ray,row,col,series,index,depth,value\n");
    for (r, p) in probes.iter().enumerate() {
        let (row, col) = p.pixel;
        for (j, (d, v)) in p.pdf.grid.iter().zip(&p.pdf.density).enumerate() {
            let _ = writeln!(s, "{r},{row},{col},density,{j},{d},{v}");
        }
        for (j, v) in p.pdf.cdf.iter().enumerate() {
            let _ = writeln!(s, "{r},{row},{col},cdf,{j},{},{v}", p.pdf.edge(j));
        }
        for (j, (d, v)) in p.pdf.depths.iter().zip(&p.pdf.weights).enumerate() {
            let _ = writeln!(s, "{r},{row},{col},weight,{j},{d},{v}");
        }
    }
    s
}

/// `ray,row,col,series,index,position,weight`: series `samples` has depths
/// as positions, `decoder{l}` has token indices.
pub fn attention_csv(probes: &[Probe]) -> String {
    let mut s = String::from("ray,row,col,series,index,position,weight\n");
    for (r, p) in probes.iter().enumerate() {
        let (row, col) = p.pixel;
        for (j, (d, w)) in p.depths.iter().zip(&p.weights).enumerate() {
            let _ = writeln!(s, "{r},{row},{col},samples,{j},{d},{w}");
        }
        for (l, layer) in p.decoder.iter().enumerate() {
            for (j, w) in layer.iter().enumerate() {
                let _ = writeln!(s, "{r},{row},{col},decoder{l},{j},{j},{w}");
            }
        }
    }
    s
}
