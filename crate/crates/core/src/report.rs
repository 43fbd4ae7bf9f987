//! Explanation reports: the retained ridge functions and projection indexes
//! of a fitted model, as JSON and as SVG figures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XnnError};
use crate::model::{normalize, project, subnet_eval, XnnModel};

pub const REPORT_FORMAT: &str = "xnn-report/1";
pub const GRID_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentReport {
    /// Position of the subnetwork in the model.
    pub index: usize,
    pub importance_ratio: f64,
    pub beta: f64,
    pub projection: Vec<f64>,
    pub grid: Vec<f64>,
    /// Normalized ridge function at each grid point.
    pub ridge: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainReport {
    pub format: String,
    pub mu: f64,
    pub feature_names: Vec<String>,
    /// Retained subnetworks, most important first.
    pub components: Vec<ComponentReport>,
}

/// `n` equally spaced points from `lo` to `hi` inclusive. A collapsed range
/// is widened by one unit on each side so the grid stays strictly increasing.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { hi } else { lo + step * i as f64 }).collect()
}

impl ExplainReport {
    /// Builds the report for `model` with projection ranges taken from
    /// `x_train`. Signs are canonicalized on a copy first.
    pub fn build(model: &XnnModel, x_train: &DMatrix<f64>, feature_names: &[String]) -> Result<Self> {
        if x_train.nrows() == 0 {
            return Err(XnnError::Config("explaining a model needs at least one training row".into()));
        }
        let mut m = model.clone();
        m.canonicalize_signs();
        let ir = m.importance_ratios()?;
        let z = project(&m, x_train)?;
        let names = if feature_names.is_empty() {
            (1..=m.p()).map(|i| format!("X{i}")).collect()
        } else if feature_names.len() == m.p() {
            feature_names.to_vec()
        } else {
            return Err(XnnError::Shape(format!("{} feature names for p = {}", feature_names.len(), m.p())));
        };

        let mut order: Vec<usize> = (0..m.k()).filter(|&j| m.beta[j] != 0.0).collect();
        order.sort_by(|&a, &b| ir[b].total_cmp(&ir[a]).then(a.cmp(&b)));
        let components = order
            .into_iter()
            .map(|j| {
                let col = z.column(j);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let grid = linspace(lo, hi, GRID_POINTS);
                let h = subnet_eval(&m.subnets[j], &grid);
                let ridge = normalize(h.as_slice(), &m.norm[j]).iter().copied().collect();
                ComponentReport {
                    index: j,
                    importance_ratio: ir[j],
                    beta: m.beta[j],
                    projection: m.w.column(j).iter().copied().collect(),
                    grid,
                    ridge,
                }
            })
            .collect();
        Ok(Self { format: REPORT_FORMAT.into(), mu: m.mu, feature_names: names, components })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.format != REPORT_FORMAT {
            return Err(XnnError::Data(format!("unsupported report format '{}' (expected {REPORT_FORMAT})", r.format)));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Writes one SVG per component into `dir` and returns the paths.
    pub fn write_svgs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::with_capacity(self.components.len());
        for (rank, c) in self.components.iter().enumerate() {
            let path = dir.join(format!("component_{}.svg", rank + 1));
            std::fs::write(&path, component_svg(c, rank + 1, &self.feature_names))?;
            out.push(path);
        }
        Ok(out)
    }
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;
const TOP: f64 = 50.0;

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

fn span(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Ridge curve on the left, projection weights as horizontal bars on the
/// right.
pub fn component_svg(c: &ComponentReport, rank: usize, names: &[String]) -> String {
    let width = 2.0 * PANEL_W + 3.0 * MARGIN;
    let height = PANEL_H + TOP + MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">Component {rank} (subnetwork {}): IR = {:.1}%</text>"#,
        width / 2.0,
        c.index + 1,
        100.0 * c.importance_ratio
    );

    // Left panel: ridge curve.
    let (x0, x1) = (MARGIN, MARGIN + PANEL_W);
    let (y0, y1) = (TOP + PANEL_H, TOP);
    let (glo, ghi) = span(&c.grid);
    let (rlo, rhi) = span(&c.ridge);
    let _ = writeln!(s, r##"<rect x="{x0}" y="{y1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##);
    let points: Vec<String> = c
        .grid
        .iter()
        .zip(&c.ridge)
        .map(|(&g, &r)| format!("{:.2},{:.2}", scale(g, glo, ghi, x0, x1), scale(r, rlo, rhi, y0, y1)))
        .collect();
    let _ = writeln!(s, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##, points.join(" "));
    let _ = writeln!(s, r#"<text x="{x0}" y="{}">{glo:.3}</text>"#, y0 + 14.0);
    let _ = writeln!(s, r#"<text x="{x1}" y="{}" text-anchor="end">{ghi:.3}</text>"#, y0 + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{rhi:.2}</text>"#, x0 - 3.0, y1 + 10.0);
    let _ = writeln!(s, r#"<text x="{}" y="{y0}" text-anchor="end">{rlo:.2}</text>"#, x0 - 3.0);

    // Right panel: projection bars around a zero axis.
    let (bx0, bx1) = (2.0 * MARGIN + PANEL_W, 2.0 * MARGIN + 2.0 * PANEL_W);
    let _ = writeln!(s, r##"<rect x="{bx0}" y="{y1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##);
    let label_w = 50.0;
    let mid = (bx0 + label_w + bx1) / 2.0;
    let half = (bx1 - bx0 - label_w) / 2.0 - 4.0;
    let row_h = PANEL_H / c.projection.len().max(1) as f64;
    let _ = writeln!(s, r##"<line x1="{mid}" y1="{y1}" x2="{mid}" y2="{y0}" stroke="#444"/>"##);
    for (i, &v) in c.projection.iter().enumerate() {
        let y = y1 + row_h * i as f64;
        let len = v.clamp(-1.0, 1.0) * half;
        let (x, w) = if len >= 0.0 { (mid, len) } else { (mid + len, -len) };
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{:.2}" fill="#ff7f0e"/>"##,
            y + 0.15 * row_h,
            0.7 * row_h
        );
        let name = names.get(i).map_or_else(|| format!("X{}", i + 1), |n| escape(n));
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}">{name}</text>"#, bx0 + 4.0, y + 0.65 * row_h);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActivationKind, DenseLayer, NormState, Subnetwork, XnnModel};
    use crate::model::LinkKind;
    use nalgebra::{DMatrix, DVector};

    fn linear_subnet(slope: f64, bias: f64) -> Subnetwork {
        let layer = DenseLayer { weights: DMatrix::from_element(1, 1, slope), biases: DVector::from_element(1, bias) };
        Subnetwork::new(vec![layer], ActivationKind::Linear).unwrap()
    }

    fn fixture(beta: &[f64]) -> XnnModel {
        let k = beta.len();
        XnnModel {
            mu: 0.5,
            beta: DVector::from_column_slice(beta),
            w: DMatrix::identity(4, k),
            subnets: (0..k).map(|j| linear_subnet(1.0 + j as f64, 0.1)).collect(),
            norm: vec![NormState { mean: 0.2, std: 1.5, epsilon: 1e-5 }; k],
            link: LinkKind::Identity,
        }
    }

    fn x() -> DMatrix<f64> {
        DMatrix::from_fn(30, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn importance_ratios_and_signs() {
        let r = ExplainReport::build(&fixture(&[2.0, -1.0, 1.0]), &x(), &[]).unwrap();
        let ir: Vec<f64> = r.components.iter().map(|c| c.importance_ratio).collect();
        assert_eq!(ir, vec![0.5, 0.25, 0.25]);
        assert_eq!(r.components.iter().map(|c| c.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(r.components.iter().all(|c| c.beta >= 0.0));
        assert_eq!(r.feature_names[3], "X4");
    }

    #[test]
    fn pruned_components_are_absent() {
        let r = ExplainReport::build(&fixture(&[0.0, 3.0, 0.0, 1.0]), &x(), &[]).unwrap();
        assert_eq!(r.components.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 3]);
        let total: f64 = r.components.iter().map(|c| c.importance_ratio).sum();
        assert!((total - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn linear_ridge_is_a_straight_line() {
        let r = ExplainReport::build(&fixture(&[1.0, 2.0]), &x(), &[]).unwrap();
        for c in &r.components {
            assert_eq!(c.grid.len(), GRID_POINTS);
            assert!(c.grid.windows(2).all(|w| w[1] > w[0]));
            let (g0, g1) = (c.grid[0], c.grid[GRID_POINTS - 1]);
            let (r0, r1) = (c.ridge[0], c.ridge[GRID_POINTS - 1]);
            for (g, v) in c.grid.iter().zip(&c.ridge) {
                let secant = r0 + (g - g0) / (g1 - g0) * (r1 - r0);
                assert!((v - secant).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn grid_spans_training_projections() {
        let xs = x();
        let r = ExplainReport::build(&fixture(&[1.0]), &xs, &[]).unwrap();
        let col = xs.column(0);
        assert_eq!(r.components[0].grid[0], col.min());
        assert_eq!(r.components[0].grid[GRID_POINTS - 1], col.max());
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let r = ExplainReport::build(&fixture(&[0.3, -0.7]), &x(), &names).unwrap();
        let text = r.to_json().unwrap();
        let again = ExplainReport::from_json(&text).unwrap().to_json().unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn svg_has_curve_and_bars() {
        let r = ExplainReport::build(&fixture(&[2.0, -1.0]), &x(), &[]).unwrap();
        let svg = component_svg(&r.components[0], 1, &r.feature_names);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("IR = 66.7%"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches(r##"fill="#ff7f0e""##).count(), 4);
    }

    #[test]
    fn degenerate_grid_is_still_increasing() {
        let g = linspace(0.3, 0.3, 5);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
