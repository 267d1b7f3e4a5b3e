use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::network::{decode_checkpoint, CheckpointError, Layer, Network};
use crate::optim::EpochRecord;
use crate::tensor::Scalar;
use crate::transfer::{curves_to_csv, GeneralityCurve, SubsampleTable};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("no results at {0}")]
    MissingResults(PathBuf),
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("layer {index} ({name}) is not a convolution")]
    NotConv { index: usize, name: String },
    #[error("layer index {index} out of range for {layers} layers")]
    LayerIndex { index: usize, layers: usize },
}

/// Which plot table to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// `base,retrain,k,g_mean,g_min,g_max,psi_reference`
    Curve,
    /// `run_id,epoch,valid_error`
    Errors,
    /// `p,init,k,accuracy`
    Subsample,
}

impl std::str::FromStr for PlotKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "curve" => Ok(PlotKind::Curve),
            "errors" | "errors-vs-epoch" => Ok(PlotKind::Errors),
            "subsample" => Ok(PlotKind::Subsample),
            _ => Err(format!("unknown export `{s}`, expected curve, errors or subsample")),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, ExportError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ExportError::MissingResults(path.to_path_buf()),
        _ => ExportError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, ExportError> {
    serde_json::from_slice(&read(path)?).map_err(|e| ExportError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write(path: &Path, text: &str) -> Result<(), ExportError> {
    let io = |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}

/// Writes `plots/<kind>.csv` under `results_dir` and returns its path.
pub fn export_plot_data(results_dir: &Path, what: PlotKind) -> Result<PathBuf, ExportError> {
    let (name, csv) = match what {
        PlotKind::Curve => {
            let curves: Vec<GeneralityCurve> = read_json(&results_dir.join("results/curves.json"))?;
            ("curve.csv", curves_to_csv(&curves))
        }
        PlotKind::Subsample => {
            let table: SubsampleTable = read_json(&results_dir.join("results/subsample.json"))?;
            ("subsample.csv", table.to_csv())
        }
        PlotKind::Errors => ("errors.csv", errors_csv(&results_dir.join("store/histories"))?),
    };
    let path = results_dir.join("plots").join(name);
    write(&path, &csv)?;
    Ok(path)
}

fn errors_csv(dir: &Path) -> Result<String, ExportError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ExportError::MissingResults(dir.to_path_buf()))
        }
        Err(source) => {
            return Err(ExportError::Io {
                path: dir.to_path_buf(),
                source,
            })
        }
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ExportError::MissingResults(dir.to_path_buf()));
    }
    let mut out = String::from("run_id,epoch,valid_error\n");
    for f in files {
        let run_id = f.file_stem().expect("file name").to_string_lossy().to_string();
        let text = String::from_utf8_lossy(&read(&f)?).to_string();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(ExportError::Malformed {
                    path: f.clone(),
                    message: format!("expected 6 columns, found {}", cols.len()),
                });
            }
            writeln!(out, "{run_id},{},{}", cols[0], cols[4]).expect("write to string");
        }
    }
    Ok(out)
}

/// Errors-vs-epoch rows for one history, for callers holding records.
pub fn error_rows(run_id: &str, records: &[EpochRecord]) -> Vec<(String, usize, f64)> {
    records
        .iter()
        .map(|r| (run_id.to_string(), r.epoch, r.valid_error))
        .collect()
}

/// Kernels of one conv layer laid out as grayscale tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrid {
    pub tiles: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub cols: usize,
    pub rows: usize,
    /// Per-tile values in `[0, 1]`, tile-major then row-major.
    pub values: Vec<f64>,
}

const GAP: usize = 1;

impl FilterGrid {
    /// Each `(kernel, channel)` slice becomes one tile, scaled so its min
    /// maps to 0 and its max to 1; a constant tile maps to 0.5.
    pub fn from_kernels<S: Scalar>(shape: &[usize], data: &[S]) -> Self {
        let (k, c, r, s) = (shape[0], shape[1], shape[2], shape[3]);
        let tiles = k * c;
        let mut values = Vec::with_capacity(tiles * r * s);
        for tile in data.chunks(r * s) {
            let v: Vec<f64> = tile.iter().map(|x| x.to_f64_lossy()).collect();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                values.extend(v.iter().map(|x| (x - lo) / (hi - lo)));
            } else {
                values.extend(std::iter::repeat_n(0.5, v.len()));
            }
        }
        let cols = (tiles as f64).sqrt().ceil().max(1.0) as usize;
        let rows = tiles.div_ceil(cols);
        FilterGrid {
            tiles,
            tile_h: r,
            tile_w: s,
            cols,
            rows,
            values,
        }
    }

    pub fn tile(&self, i: usize) -> &[f64] {
        let n = self.tile_h * self.tile_w;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn width(&self) -> usize {
        self.cols * (self.tile_w + GAP) + GAP
    }

    pub fn height(&self) -> usize {
        self.rows * (self.tile_h + GAP) + GAP
    }

    /// Binary PGM (`P5`, maxval 255); gaps between tiles are black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let mut px = vec![0u8; w * h];
        for t in 0..self.tiles {
            let (ty, tx) = (t / self.cols, t % self.cols);
            let (oy, ox) = (GAP + ty * (self.tile_h + GAP), GAP + tx * (self.tile_w + GAP));
            for (j, v) in self.tile(t).iter().enumerate() {
                let (y, x) = (j / self.tile_w, j % self.tile_w);
                px[(oy + y) * w + ox + x] = (v * 255.0).round() as u8;
            }
        }
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(px);
        out
    }
}

fn grid_of<S: Scalar>(net: &Network<S>, layer: usize) -> Result<FilterGrid, ExportError> {
    match net.layers().get(layer) {
        None => Err(ExportError::LayerIndex {
            index: layer,
            layers: net.layers().len(),
        }),
        Some(Layer::Conv { kernels, .. }) => Ok(FilterGrid::from_kernels(kernels.shape(), kernels.data())),
        Some(_) => Err(ExportError::NotConv {
            index: layer,
            name: net.layer_name(layer).to_string(),
        }),
    }
}

/// Writes the kernels of conv layer `layer` of a checkpoint as a PGM grid.
pub fn export_filters(checkpoint: &Path, layer: usize, out: &Path) -> Result<FilterGrid, ExportError> {
    let bytes = read(checkpoint)?;
    let grid = match decode_checkpoint::<f32>(&bytes, None) {
        Ok(c) => grid_of(&c.network, layer)?,
        Err(CheckpointError::DType { found, .. }) if found == "8-byte" => {
            grid_of(&decode_checkpoint::<f64>(&bytes, None)?.network, layer)?
        }
        Err(e) => return Err(e.into()),
    };
    let io = |source| ExportError::Io {
        path: out.to_path_buf(),
        source,
    };
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(out, grid.to_pgm()).map_err(io)?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{encode_checkpoint, ArchId, Checkpoint, NetworkSpec};

    #[test]
    fn tile_normalization() {
        let data = [1.0f64, 3.0, 2.0, 5.0, 7.0, 7.0, 7.0, 7.0];
        let g = FilterGrid::from_kernels(&[2, 1, 2, 2], &data);
        assert_eq!(g.tile(0), &[0.0, 0.5, 0.25, 1.0]);
        assert_eq!(g.tile(1), &[0.5; 4]);
        assert_eq!((g.cols, g.rows), (2, 1));
    }

    #[test]
    fn char_first_layer_grid() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::<f32>::build(NetworkSpec::preset(ArchId::Char3conv, 10, [1, 28, 28]), 1).unwrap();
        let ckpt = dir.path().join("n.ckpt");
        fs::write(&ckpt, encode_checkpoint(&Checkpoint::new(net))).unwrap();
        let out = dir.path().join("f.pgm");
        let g = export_filters(&ckpt, 0, &out).unwrap();
        assert_eq!((g.tiles, g.tile_h, g.tile_w), (20, 5, 5));
        let bytes = fs::read(&out).unwrap();
        let header = format!("P5\n{} {}\n255\n", g.width(), g.height());
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + g.width() * g.height());
        assert!(matches!(
            export_filters(&ckpt, 1, &out),
            Err(ExportError::NotConv { index: 1, .. })
        ));
        assert!(matches!(
            export_filters(&ckpt, 99, &out),
            Err(ExportError::LayerIndex { .. })
        ));
    }

    #[test]
    fn missing_results_reported() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [PlotKind::Curve, PlotKind::Errors, PlotKind::Subsample] {
            assert!(matches!(
                export_plot_data(dir.path(), kind),
                Err(ExportError::MissingResults(_))
            ));
        }
    }
}
