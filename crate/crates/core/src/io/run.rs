//! Run directories: manifests, parameter checkpoints and overlay images.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::array::{read_array, write_array, ArrayData, ArrayValues};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::heads::UgcpParams;
use crate::metrics::BinaryMask;

/// Environment variable selecting the worker thread count.
pub const THREADS_ENV: &str = "UGCP_THREADS";

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Hex SHA-256 of the compact JSON serialisation.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub array_format_version: u16,
    pub threads: usize,
    /// Input files, relative or absolute as given.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, config: &T, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            array_format_version: super::array::FORMAT_VERSION,
            threads: rayon::current_num_threads(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_json(dir.as_ref().join("manifest.json"), self)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        read_json(dir.as_ref().join("manifest.json"))
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamsSidecar {
    feature_channels: usize,
    edge_channels: usize,
    classes: usize,
}

/// Weight matrix with the bias appended as a final row.
fn stack(weight: &[f64], bias: &[f64], rows: usize, cols: usize) -> ArrayData {
    let mut v = weight.to_vec();
    v.extend_from_slice(bias);
    ArrayData {
        shape: vec![rows + 1, cols],
        values: ArrayValues::F64(v),
    }
}

fn unstack(arr: ArrayData, rows: usize, cols: usize, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    if arr.shape != [rows + 1, cols] {
        return Err(Error::Domain(format!(
            "{name} has shape {:?}, expected [{}, {cols}]",
            arr.shape,
            rows + 1
        )));
    }
    match arr.values {
        ArrayValues::F64(mut v) => {
            let bias = v.split_off(rows * cols);
            Ok((v, bias))
        }
        other => Err(Error::Format {
            offset: 10,
            reason: format!("{name}: parameters are f64, found {:?}", other.dtype()),
        }),
    }
}

/// Writes `ws.arr`, `wf.arr`, `w.arr` and `params.json` into `dir`.
pub fn save_params(dir: impl AsRef<Path>, p: &UgcpParams) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (ch, cf, k) = (p.feature_channels, p.edge_channels, p.classes);
    write_array(dir.join("ws.arr"), &stack(&p.logit_weight, &p.logit_bias, ch, k))?;
    write_array(dir.join("wf.arr"), &stack(&p.feature_weight, &p.feature_bias, ch, cf))?;
    write_array(
        dir.join("w.arr"),
        &ArrayData { shape: vec![cf], values: ArrayValues::F64(p.edge_weight.clone()) },
    )?;
    write_json(
        dir.join("params.json"),
        &ParamsSidecar { feature_channels: ch, edge_channels: cf, classes: k },
    )
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<UgcpParams> {
    let dir = dir.as_ref();
    let side: ParamsSidecar = read_json(dir.join("params.json"))?;
    let (ch, cf, k) = (side.feature_channels, side.edge_channels, side.classes);
    let (logit_weight, logit_bias) = unstack(read_array(dir.join("ws.arr"))?, ch, k, "ws.arr")?;
    let (feature_weight, feature_bias) = unstack(read_array(dir.join("wf.arr"))?, ch, cf, "wf.arr")?;
    let w = read_array(dir.join("w.arr"))?;
    let edge_weight = match (w.shape.as_slice(), w.values) {
        ([n], ArrayValues::F64(v)) if *n == cf => v,
        (shape, _) => {
            return Err(Error::Domain(format!("w.arr has shape {shape:?}, expected [{cf}] f64")))
        }
    };
    let p = UgcpParams {
        feature_channels: ch,
        edge_channels: cf,
        classes: k,
        logit_weight,
        logit_bias,
        feature_weight,
        feature_bias,
        edge_weight,
    };
    p.check_shapes()?;
    Ok(p)
}

/// Middle slice along the first axis for 3D fields; 2D fields pass through.
/// Returns `(height, width, values)` of channel `c`.
pub fn display_plane(field: &GridField<f64>, c: usize) -> (usize, usize, Vec<f64>) {
    let ext = field.shape().extents();
    let (h, w, offset) = if ext.len() == 3 {
        (ext[1], ext[2], (ext[0] / 2) * ext[1] * ext[2])
    } else {
        (ext[0], ext[1], 0)
    };
    let v = (0..h * w).map(|i| field.get(offset + i, c)).collect();
    (h, w, v)
}

/// RGB overlay: grey observation, predicted mask tinted red.
pub fn overlay_rgb(observation: &GridField<f64>, pred: &BinaryMask) -> (usize, usize, Vec<u8>) {
    let (h, w, obs) = display_plane(observation, 0);
    let (_, _, mask) = display_plane(&pred.to_field(), 0);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (o, m) in obs.iter().zip(&mask) {
        let g = (o.clamp(0.0, 1.0) * 255.0).round() as u8;
        if *m > 0.5 {
            rgb.extend_from_slice(&[255, g / 2, g / 2]);
        } else {
            rgb.extend_from_slice(&[g, g, g]);
        }
    }
    (h, w, rgb)
}

/// Heatmap of a `[0, 1]` scalar: black → red → yellow → white.
pub fn heatmap_rgb(values: &GridField<f64>) -> (usize, usize, Vec<u8>) {
    let (h, w, v) = display_plane(values, 0);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for x in v {
        let t = x.clamp(0.0, 1.0) * 3.0;
        let ch = |a: f64| (a.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgb.extend_from_slice(&[ch(t), ch(t - 1.0), ch(t - 2.0)]);
    }
    (h, w, rgb)
}

/// Binary PGM (P5) of `[0, 1]` values.
pub fn write_pgm(path: impl AsRef<Path>, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Binary PPM (P6) of interleaved RGB bytes.
pub fn write_ppm(path: impl AsRef<Path>, h: usize, w: usize, rgb: &[u8]) -> Result<()> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::UgcpConfig;
    use crate::field::GridShape;
    use crate::heads::init_params;

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = init_params(3, 4, 8, 2).unwrap();
        p.logit_bias = vec![0.25, -1.5];
        save_params(dir.path(), &p).unwrap();
        assert_eq!(load_params(dir.path()).unwrap(), p);
        let ws = read_array(dir.path().join("ws.arr")).unwrap();
        assert_eq!(ws.shape, vec![5, 2]);
    }

    #[test]
    fn manifest_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = UgcpConfig::defaults_3d();
        let m = RunManifest::new("refine", &cfg, 7).unwrap();
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        let cfg_back: UgcpConfig = serde_json::from_value(back.config).unwrap();
        assert_eq!(cfg_back, cfg);
        assert_eq!(config_hash(&cfg_back).unwrap(), m.config_hash);
        assert_eq!(m.config_hash.len(), 64);
        assert_ne!(config_hash(&UgcpConfig::defaults_2d()).unwrap(), m.config_hash);
    }

    #[test]
    fn images_have_expected_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let shape = GridShape::new(&[4, 6]).unwrap();
        let obs = GridField::from_fn(shape.clone(), 1, |p, _| p as f64 / 24.0).unwrap();
        let mask = BinaryMask::from_fn(shape, |p| p % 5 == 0);
        let (h, w, rgb) = overlay_rgb(&obs, &mask);
        assert_eq!((h, w, rgb.len()), (4, 6, 72));
        write_ppm(dir.path().join("o.ppm"), h, w, &rgb).unwrap();
        let (h, w, v) = display_plane(&obs, 0);
        write_pgm(dir.path().join("o.pgm"), h, w, &v).unwrap();
        let bytes = fs::read(dir.path().join("o.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 24);
        let (_, _, heat) = heatmap_rgb(&obs);
        assert_eq!(&heat[..3], &[0, 0, 0]);
    }
}
