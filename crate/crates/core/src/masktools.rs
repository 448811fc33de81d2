//! Operations on a learned mask outside training: thresholding, temporal
//! resampling, window baselines, statistics and export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::config::Grid;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Logit magnitude used when converting activations back to pre-activations.
const LOGIT_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeuristicKind {
    SpatialWindow,
    TemporalWindow,
}

impl HeuristicKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeuristicKind::SpatialWindow => "spatial-window",
            HeuristicKind::TemporalWindow => "temporal-window",
        }
    }
}

impl FromStr for HeuristicKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial-window" => Ok(HeuristicKind::SpatialWindow),
            "temporal-window" => Ok(HeuristicKind::TemporalWindow),
            other => Err(Error::Config(format!("unknown heuristic `{other}`"))),
        }
    }
}

/// Post-sigmoid mask over a token grid, row-major `M×M`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub grid: Grid,
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityStats {
    pub mean_activation: f64,
    pub frac_below_zero: f64,
    pub frac_below_half: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MaskGrid {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let m = grid.len();
        if m == 0 || values.len() != m * m {
            return Err(Error::Dimension(format!(
                "mask has {} entries, grid {}x{}x{} needs {}",
                values.len(),
                grid.t,
                grid.h,
                grid.w,
                m * m
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("mask activation {v} outside [0, 1]")));
        }
        Ok(Self { grid, values })
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len() * grid.len()])
    }

    /// Sigmoid of an `M×M` pre-activation tensor.
    pub fn from_logits<F: Real>(logits: &Tensor<F>, grid: Grid) -> Result<Self> {
        let m = grid.len();
        if logits.shape() != [m, m] {
            return Err(Error::Dimension(format!(
                "mask logits {:?} do not match {m} grid tokens",
                logits.shape()
            )));
        }
        Self::new(
            grid,
            logits.data().iter().map(|v| sigmoid(v.as_f64())).collect(),
        )
    }

    /// Pre-activations reproducing these activations, clamped to ±20 so
    /// exact 0 and 1 stay finite.
    pub fn to_logits<F: Real>(&self) -> Tensor<F> {
        let m = self.len();
        let data = self
            .values
            .iter()
            .map(|&v| {
                let l = if v <= 0.0 {
                    -LOGIT_CLAMP
                } else if v >= 1.0 {
                    LOGIT_CLAMP
                } else {
                    (v / (1.0 - v)).ln().clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
                };
                F::of(l)
            })
            .collect();
        Tensor::from_parts_unchecked(vec![m, m], data)
    }

    /// Token count `M`.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, query: usize, key: usize) -> f64 {
        self.values[query * self.len() + key]
    }

    /// 1 where activation ≥ `threshold`, else 0.
    pub fn binarize(&self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {threshold} outside (0, 1)"
            )));
        }
        let values = self
            .values
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            grid: self.grid,
            values,
        })
    }

    pub fn sparsity_stats(&self, zero_threshold: f64) -> SparsityStats {
        let n = self.values.len() as f64;
        let below = |th: f64| self.values.iter().filter(|&&v| v < th).count() as f64 / n;
        SparsityStats {
            mean_activation: self.values.iter().sum::<f64>() / n,
            frac_below_zero: below(zero_threshold),
            frac_below_half: below(0.5),
        }
    }

    /// Resamples both temporal axes to `t_new` blocks with endpoint-aligned
    /// linear interpolation.
    pub fn interpolate_temporal(&self, t_new: usize) -> Result<Self> {
        let weights = temporal_weights(self.grid.t, t_new)?;
        let s = self.grid.spatial();
        let (t, m) = (self.grid.t, self.len());
        let grid = Grid {
            t: t_new,
            ..self.grid
        };
        let m_new = grid.len();

        // Resample the key axis first: [t·s, t, s] → [t·s, t_new, s].
        let mut half = vec![0.0; m * m_new];
        for row in 0..m {
            for (j, wj) in weights.iter().enumerate() {
                for sk in 0..s {
                    half[row * m_new + j * s + sk] =
                        blend(wj, |b| self.values[row * m + b * s + sk]);
                }
            }
        }
        let mut values = vec![0.0; m_new * m_new];
        for (i, wi) in weights.iter().enumerate() {
            for sq in 0..s {
                for col in 0..m_new {
                    values[(i * s + sq) * m_new + col] =
                        blend(wi, |a| half[(a * s + sq) * m_new + col]);
                }
            }
        }
        debug_assert!(t > 0);
        for v in &mut values {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(grid, values)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let m = self.len();
        let mut out = format!("P5\n{m} {m}\n255\n").into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let g = self.grid;
        let mut s = format!("# grid {},{},{}\n", g.t, g.h, g.w);
        for row in self.values.chunks(self.len()) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let dims: Vec<usize> = header
            .strip_prefix("# grid ")
            .ok_or_else(|| Error::Data("mask csv must start with `# grid t,h,w`".into()))?
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Data(format!("bad mask csv header `{header}`")))?;
        let [t, h, w] = dims[..] else {
            return Err(Error::Data(format!("bad mask csv header `{header}`")));
        };
        let mut values = Vec::new();
        for (n, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            for cell in line.split(',') {
                let v = cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("mask csv row {}: bad value `{cell}`", n + 1))
                })?;
                values.push(v);
            }
        }
        Self::new(Grid { t, h, w }, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Pgm,
    Csv,
}

impl FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(ExportFormat::Pgm),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::Config(format!("unknown export format `{other}`"))),
        }
    }
}

pub fn export_mask(mask: &MaskGrid, path: &Path, format: ExportFormat) -> Result<()> {
    let bytes = match format {
        ExportFormat::Pgm => mask.to_pgm(),
        ExportFormat::Csv => mask.to_csv().into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Convex combination written as the first source plus weighted
/// differences, so equal sources reproduce their value exactly.
fn blend<F: Real>(sources: &[(usize, f64)], value: impl Fn(usize) -> F) -> F {
    let base = value(sources[0].0);
    sources[1..]
        .iter()
        .fold(base, |acc, &(i, w)| acc + F::of(w) * (value(i) - base))
}

/// Per output block, the source blocks and their weights.
fn temporal_weights(t: usize, t_new: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if t_new < 1 {
        return Err(Error::Config("temporal length must be ≥ 1".into()));
    }
    if t == 0 {
        return Err(Error::Dimension(
            "cannot resample an empty temporal axis".into(),
        ));
    }
    if t_new == 1 {
        let w = 1.0 / t as f64;
        return Ok(vec![(0..t).map(|a| (a, w)).collect()]);
    }
    Ok((0..t_new)
        .map(|i| {
            let q = (i * (t - 1)) as f64 / (t_new - 1) as f64;
            let lo = (q.floor() as usize).min(t - 1);
            let frac = q - lo as f64;
            if frac == 0.0 || lo + 1 >= t {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - frac), (lo + 1, frac)]
            }
        })
        .collect())
}

/// Resamples per-token rows `[t·s, d]` along time, with the same weights as
/// [`MaskGrid::interpolate_temporal`].
pub fn interpolate_rows_temporal<F: Real>(
    rows: &Tensor<F>,
    grid: Grid,
    t_new: usize,
) -> Result<Tensor<F>> {
    if rows.rank() != 2 || rows.rows() != grid.len() {
        return Err(Error::Dimension(format!(
            "rows {:?} do not match {} grid tokens",
            rows.shape(),
            grid.len()
        )));
    }
    let weights = temporal_weights(grid.t, t_new)?;
    let (s, d) = (grid.spatial(), rows.cols());
    let mut out = Tensor::zeros(&[t_new * s, d]);
    let src = rows.data();
    for (i, wi) in weights.iter().enumerate() {
        for sp in 0..s {
            for c in 0..d {
                out.data_mut()[(i * s + sp) * d + c] = blend(wi, |a| src[(a * s + sp) * d + c]);
            }
        }
    }
    Ok(out)
}

/// Binary sliding-window mask.
pub fn heuristic_mask(kind: HeuristicKind, width: usize, grid: Grid) -> Result<MaskGrid> {
    if width < 1 {
        return Err(Error::Config("window width must be ≥ 1".into()));
    }
    let m = grid.len();
    let s = grid.spatial();
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        let (ti, si) = (i / s, i % s);
        for j in 0..m {
            let (tj, sj) = (j / s, j % s);
            let open = match kind {
                HeuristicKind::SpatialWindow => ti == tj && si.abs_diff(sj) <= width,
                HeuristicKind::TemporalWindow => si == sj && ti.abs_diff(tj) <= width,
            };
            if open {
                values[i * m + j] = 1.0;
            }
        }
    }
    MaskGrid::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(t: usize, h: usize, w: usize) -> Grid {
        Grid { t, h, w }
    }

    #[test]
    fn binarize_examples() {
        let g = grid(1, 1, 2);
        let m = MaskGrid::new(g, vec![0.7, 0.3, 0.5, 0.4999]).unwrap();
        let b = m.binarize(0.5).unwrap();
        assert_eq!(b.values(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(b.binarize(0.5).unwrap(), b);
        assert!(m.binarize(0.0).is_err());
        assert!(m.binarize(1.0).is_err());
    }

    #[test]
    fn interpolation_midpoint_and_identity() {
        let g = grid(2, 1, 2);
        // Blocks: a for (t=0, t'=0), b for everything touching t=1.
        let (a, b) = (0.2, 0.8);
        let mut v = vec![b; 16];
        for q in 0..2 {
            for k in 0..2 {
                v[q * 4 + k] = a;
            }
        }
        let m = MaskGrid::new(g, v).unwrap();
        assert_eq!(m.interpolate_temporal(2).unwrap(), m);

        let up = m.interpolate_temporal(3).unwrap();
        assert_eq!(up.grid, grid(3, 1, 2));
        // Query block 1 / key block 1 sits at (0.5, 0.5): bilinear mean of the
        // four source blocks.
        let mid = (a + b + b + b) / 4.0;
        assert!((up.get(2, 2) - mid).abs() < 1e-12);
        // Query block 0, key block 1: halfway between a and b.
        assert!((up.get(0, 2) - (a + b) / 2.0).abs() < 1e-12);
        assert!((up.get(0, 0) - a).abs() < 1e-12);
        assert!((up.get(5, 5) - b).abs() < 1e-12);

        let mean = m.interpolate_temporal(1).unwrap();
        assert!((mean.get(0, 0) - (a + 3.0 * b) / 4.0).abs() < 1e-12);
        assert!(m.interpolate_temporal(0).is_err());
    }

    #[test]
    fn heuristic_examples() {
        let g = grid(4, 1, 2);
        let m = heuristic_mask(HeuristicKind::TemporalWindow, 1, g).unwrap();
        let open: Vec<usize> = (0..8)
            .filter(|&j| m.get(g.index(2, 0, 1), j) == 1.0)
            .collect();
        assert_eq!(
            open,
            vec![g.index(1, 0, 1), g.index(2, 0, 1), g.index(3, 0, 1)]
        );

        let full_t = heuristic_mask(HeuristicKind::TemporalWindow, 4, g).unwrap();
        let full_s = heuristic_mask(HeuristicKind::SpatialWindow, 8, g).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(full_t.get(i, j) == 1.0, i % 2 == j % 2);
                assert_eq!(full_s.get(i, j) == 1.0, i / 2 == j / 2);
            }
        }
        assert!(heuristic_mask(HeuristicKind::SpatialWindow, 0, g).is_err());
    }

    #[test]
    fn stats_examples() {
        let z = MaskGrid::filled(grid(1, 1, 2), 0.0).unwrap();
        let s = z.sparsity_stats(0.01);
        assert_eq!(
            (s.mean_activation, s.frac_below_zero, s.frac_below_half),
            (0.0, 1.0, 1.0)
        );
        let h = MaskGrid::new(grid(1, 1, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = h.sparsity_stats(0.01);
        assert_eq!((s.mean_activation, s.frac_below_zero), (0.5, 0.5));
    }

    #[test]
    fn pgm_and_csv() {
        let m = MaskGrid::new(grid(2, 2, 1), (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let pgm = m.to_pgm();
        assert_eq!(&pgm[..11], b"P5\n4 4\n255\n");
        assert_eq!(pgm.len(), 11 + 16);
        assert_eq!(pgm[11], 0);
        assert_eq!(pgm[26], 255);

        let csv = m.to_csv();
        assert!(csv.starts_with("# grid 2,2,1\n"));
        let back = MaskGrid::from_csv(&csv).unwrap();
        assert_eq!(back.grid, m.grid);
        for (a, b) in back.values().iter().zip(m.values()) {
            assert!((a - b).abs() <= 5e-7);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        export_mask(&m, &path, ExportFormat::Pgm).unwrap();
        assert_eq!(fs::read(&path).unwrap(), pgm);
        let err =
            export_mask(&m, &dir.path().join("no/such/m.csv"), ExportFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("no/such"));
    }

    #[test]
    fn logits_round_trip() {
        let g = grid(1, 1, 2);
        let logits = Tensor::new(vec![2, 2], vec![-3.0f64, 0.0, 1.5, 2.0]).unwrap();
        let m = MaskGrid::from_logits(&logits, g).unwrap();
        assert!(m.to_logits::<f64>().max_abs_diff(&logits) < 1e-12);
    }

    #[test]
    fn rows_interpolation_matches_mask_weights() {
        let g = grid(2, 1, 1);
        let rows = Tensor::new(vec![2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let up = interpolate_rows_temporal(&rows, g, 3).unwrap();
        assert_eq!(up.data(), &[0.0, 1.0, 1.0, 2.0, 2.0, 3.0]);
        assert_eq!(interpolate_rows_temporal(&rows, g, 2).unwrap(), rows);
    }

    fn arb_mask() -> impl Strategy<Value = MaskGrid> {
        (1usize..4, 1usize..3, 1usize..3).prop_flat_map(|(t, h, w)| {
            let m = t * h * w;
            prop::collection::vec(0.0f64..=1.0, m * m)
                .prop_map(move |v| MaskGrid::new(Grid { t, h, w }, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn interpolation_is_convex(m in arb_mask(), t_new in 1usize..6) {
            let out = m.interpolate_temporal(t_new).unwrap();
            let lo = m.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = m.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in out.values() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
            prop_assert_eq!(m.interpolate_temporal(m.grid.t).unwrap(), m.clone());
        }

        #[test]
        fn constant_masks_are_fixed_points(c in 0.0f64..=1.0, t in 1usize..4, t_new in 1usize..7) {
            let m = MaskGrid::filled(Grid { t, h: 2, w: 1 }, c).unwrap();
            let out = m.interpolate_temporal(t_new).unwrap();
            prop_assert!(out.values().iter().all(|&v| v == c));
        }

        #[test]
        fn binarize_is_idempotent(m in arb_mask(), th in 0.01f64..0.99) {
            let b = m.binarize(th).unwrap();
            prop_assert!(b.values().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(b.binarize(th).unwrap(), b);
        }

        #[test]
        fn stats_monotone_in_threshold(m in arb_mask(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(m.sparsity_stats(lo).frac_below_zero <= m.sparsity_stats(hi).frac_below_zero);
        }

        #[test]
        fn heuristics_are_symmetric(kind in prop_oneof![Just(HeuristicKind::SpatialWindow),
                                                        Just(HeuristicKind::TemporalWindow)],
                                    w in 1usize..5, t in 1usize..5, h in 1usize..3, ww in 1usize..3) {
            let m = heuristic_mask(kind, w, Grid { t, h, w: ww }).unwrap();
            for i in 0..m.len() {
                for j in 0..m.len() {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                }
            }
        }
    }
}
