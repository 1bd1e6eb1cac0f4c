//! Line-oriented scene description.
//!
//! ```text
//! # comment
//! ground 20          required, depth of the ground plane
//! slope 0.3 0.2      oblique depth tilt per pixel along x and y
//! noise 0.02         Gaussian depth noise sigma
//! seed 7             noise seed
//! raster 64 64       H W (defaults to 64 64)
//! box 4 4 12 8 3.5   x y w h height, any number of times
//! ```
//!
//! Every keyword except `box` may appear at most once.

use std::fmt::Write as _;
use std::path::Path;

use geoalign_core::scene::{BoxSpec, SceneSpec};

use crate::error::CliError;

pub fn parse(text: &str, path: &Path) -> Result<SceneSpec, CliError> {
    let mut spec = SceneSpec::default();
    let mut seen: Vec<&str> = Vec::new();
    let mut has_ground = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |msg: String| CliError::Spec {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut words = content.split_whitespace();
        let key = words.next().expect("non-empty line");
        let args: Vec<&str> = words.collect();
        let arity = match key {
            "ground" | "noise" | "seed" => 1,
            "slope" | "raster" => 2,
            "box" => 5,
            other => return Err(err(format!("unknown keyword {other:?}"))),
        };
        if args.len() != arity {
            return Err(err(format!("{key} takes {arity} value(s), got {}", args.len())));
        }
        if key != "box" {
            if seen.contains(&key) {
                return Err(err(format!("duplicate {key} line")));
            }
            seen.push(key);
        }
        let float = |s: &str| match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(err(format!("{key}: {s:?} is not a finite number"))),
        };
        let uint = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(format!("{key}: {s:?} is not a non-negative integer")))
        };
        match key {
            "ground" => {
                spec.ground_depth = float(args[0])?;
                has_ground = true;
            }
            "slope" => spec.oblique_slope = (float(args[0])?, float(args[1])?),
            "noise" => {
                let s = float(args[0])?;
                if s < 0.0 {
                    return Err(err("noise sigma must be non-negative".into()));
                }
                spec.noise_sigma = s;
            }
            "seed" => spec.rng_seed = args[0].parse().map_err(|_| err(format!("seed: {:?} is not a u64", args[0])))?,
            "raster" => spec.raster = (uint(args[0])?, uint(args[1])?),
            _ => {
                let height = float(args[4])?;
                if height <= 0.0 {
                    return Err(err("box height must be positive".into()));
                }
                spec.boxes.push(BoxSpec {
                    x: uint(args[0])?,
                    y: uint(args[1])?,
                    w: uint(args[2])?,
                    h: uint(args[3])?,
                    height,
                });
            }
        }
    }
    if !has_ground {
        return Err(CliError::Spec {
            path: path.to_path_buf(),
            line: text.lines().count().max(1),
            msg: "missing ground line".into(),
        });
    }
    spec.validate()?;
    Ok(spec)
}

/// Text form that [`parse`] reads back to an equal spec.
pub fn to_text(spec: &SceneSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ground {:?}", spec.ground_depth);
    let _ = writeln!(s, "slope {:?} {:?}", spec.oblique_slope.0, spec.oblique_slope.1);
    let _ = writeln!(s, "noise {:?}", spec.noise_sigma);
    let _ = writeln!(s, "seed {}", spec.rng_seed);
    let _ = writeln!(s, "raster {} {}", spec.raster.0, spec.raster.1);
    for b in &spec.boxes {
        let _ = writeln!(s, "box {} {} {} {} {:?}", b.x, b.y, b.w, b.h, b.height);
    }
    s
}
