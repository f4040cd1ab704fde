//! Procedural stand-ins for pristine laparoscopic footage.
//!
//! The generated scene has reddish tissue with low-frequency shading, fine
//! surface texture, vessels, specular glints and a metallic instrument
//! shaft, viewed by a slowly panning camera. It exists so the whole
//! pipeline can run without access to recorded surgery.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Frame, VideoClip, DEFAULT_FPS};
use crate::error::Result;
use crate::noise::{fractal_noise, lattice, value_noise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(id: impl Into<String>, width: usize, height: usize, frames: usize, seed: u64) -> Self {
        SceneSpec {
            id: id.into(),
            width,
            height,
            frames,
            seed,
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

pub fn synthetic_reference(spec: &SceneSpec) -> Result<VideoClip> {
    let s = spec.seed;
    let r = |k: i64| lattice(s, k, 7919);
    let tissue = [0.70 + 0.12 * r(0), 0.26 + 0.10 * r(1), 0.24 + 0.08 * r(2)];
    let fat = [0.88, 0.74, 0.46];
    let vessel = [0.42, 0.07, 0.09];
    let metal = [0.62, 0.64, 0.68];
    let pan = (0.4 + 0.6 * r(3), 0.2 + 0.4 * r(4));
    let vessel_freq = 0.10 + 0.08 * r(5);
    let tool_angle = PI * (0.15 + 0.2 * r(6));
    let tool_speed = 0.5 + 0.5 * r(7);
    let (w, h) = (spec.width, spec.height);
    let diag = ((w * w + h * h) as f64).sqrt();

    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let tf = t as f64;
        let ox = pan.0 * tf + 3.0 * (0.07 * tf).sin();
        let oy = pan.1 * tf + 2.0 * (0.05 * tf).cos();
        // instrument shaft: a band entering from the lower-right edge
        let (ca, sa) = (tool_angle.cos(), tool_angle.sin());
        let tip = 0.55 * diag - tool_speed * tf * 0.6;
        let mut data = vec![0.0f32; w * h * 3];
        let n = w * h;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 + ox, y as f64 + oy);
                let shade = fractal_noise(s ^ 0x11, u, v, 28.0, 2);
                let mut c = mix(tissue, fat, ((fractal_noise(s ^ 0x22, u, v, 22.0, 2) - 0.6) * 4.0).clamp(0.0, 1.0));
                let bright = 0.75 + 0.45 * shade;
                c = [c[0] * bright, c[1] * bright, c[2] * bright];
                let grain = fractal_noise(s ^ 0x33, u, v, 4.0, 2) - 0.5;
                let fine = value_noise(s ^ 0x44, u, v, 1.5) - 0.5;
                let tex = 0.22 * grain + 0.12 * fine;
                c = [c[0] + tex, c[1] + 0.7 * tex, c[2] + 0.6 * tex];
                let warp = 6.0 * fractal_noise(s ^ 0x55, u, v, 18.0, 2);
                let band = ((u * vessel_freq + v * 0.3 * vessel_freq + warp).sin()).abs();
                if band < 0.12 {
                    c = mix(c, vessel, 1.0 - band / 0.12);
                }
                if value_noise(s ^ 0x66, u, v, 5.0) > 0.88 {
                    c = mix(c, [1.0, 1.0, 1.0], 0.7);
                }
                // distance along / across the shaft axis, measured from the bottom-right corner
                let (px, py) = ((w - 1 - x) as f64, (h - 1 - y) as f64);
                let along = px * ca + py * sa;
                let across = (-px * sa + py * ca).abs();
                if along < tip && across < 0.09 * diag {
                    let k = 1.0 - across / (0.09 * diag);
                    let stripe = if ((along * 0.5).sin()) > 0.92 { 0.6 } else { 1.0 };
                    let m = 0.55 + 0.45 * k;
                    c = [metal[0] * m * stripe, metal[1] * m * stripe, metal[2] * m * stripe];
                }
                let dx = (x as f64 - 0.5 * w as f64) / (0.5 * diag);
                let dy = (y as f64 - 0.5 * h as f64) / (0.5 * diag);
                let vignette = 1.0 - 0.15 * (dx * dx + dy * dy);
                for (ch, val) in c.iter().enumerate() {
                    data[ch * n + y * w + x] = (val * vignette) as f32;
                }
            }
        }
        frames.push(Frame::from_clamped(w, h, data));
    }
    VideoClip::new(spec.id.clone(), frames, DEFAULT_FPS, spec.id.clone())
}
