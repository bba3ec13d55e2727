//! Coating map rendering for the operator view.

use std::io::Cursor;

use base64::Engine;
use image::{GrayImage, ImageFormat, Luma};
use sandbot_core::session::{GridPointView, Session};
use sandbot_core::task::{MarkerSet, SegmentStatus, SurfaceQuad};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SegmentOverlay {
    pub id: usize,
    pub pass: u32,
    pub lane: usize,
    pub status: SegmentStatus,
    pub color: String,
    /// Surface coordinates, meters.
    pub polyline_uv: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Overlay {
    pub markers: Option<MarkerSet>,
    pub quad: Option<SurfaceQuad>,
    pub reachability: Vec<GridPointView>,
    pub segments: Vec<SegmentOverlay>,
    pub tool_uv: Option<[f64; 2]>,
}

/// Orthographic coating map: one pixel per cell, column = u index,
/// row 0 = largest v. Intensity is coating thickness over `coating_scale_um`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ViewFrame {
    pub width: u32,
    pub height: u32,
    pub png_base64: String,
    /// `[u_min, u_max, v_min, v_max]` of the image, meters.
    pub uv_extent: [f64; 4],
    pub coating_scale_um: f64,
    pub overlay: Overlay,
}

fn intensity(coating_um: f64, scale: f64) -> u8 {
    (255.0 * (coating_um / scale).clamp(0.0, 1.0)).round() as u8
}

pub fn coating_image(session: &Session) -> GrayImage {
    let g = &session.grid;
    let scale = session.scenario.calibration.coating_um;
    GrayImage::from_fn(g.nu as u32, g.nv as u32, |x, y| {
        let j = g.nv - 1 - y as usize;
        Luma([intensity(g.coating_um[g.index(x as usize, j)], scale)])
    })
}

pub fn render_view(session: &Session) -> ViewFrame {
    let img = coating_image(session);
    let mut png = Vec::new();
    img.write_to(&mut Cursor::new(&mut png), ImageFormat::Png).expect("in-memory png encode");
    let [hu, hv] = session.grid.geometry.half_extent();
    let reachability = session
        .reach_preview
        .iter()
        .map(|(uv, st)| GridPointView { uv: *uv, status: *st, color: st.color().into() })
        .collect();
    let segments = session
        .program
        .iter()
        .flat_map(|p| &p.segments)
        .map(|s| SegmentOverlay {
            id: s.id,
            pass: s.pass,
            lane: s.lane,
            status: s.status,
            color: s.status.color().into(),
            polyline_uv: s.waypoints.iter().map(|w| w.uv).collect(),
        })
        .collect();
    ViewFrame {
        width: img.width(),
        height: img.height(),
        png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        uv_extent: [-hu, hu, -hv, hv],
        coating_scale_um: session.scenario.calibration.coating_um,
        overlay: Overlay {
            markers: session.markers,
            quad: session.quad,
            reachability,
            segments,
            tool_uv: session.tool_uv,
        },
    }
}

pub fn decode_png(frame: &ViewFrame) -> Result<GrayImage, String> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(&frame.png_base64).map_err(|e| e.to_string())?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(img.to_luma8())
}
