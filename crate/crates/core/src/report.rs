//! Human-readable tables and plot artifacts.
//!
//! Tables print with four decimal places; machine artifacts (JSON) keep full
//! precision. CSV artifacts carry their units in the column headers (score
//! points for effects, squared score points for variances).

use std::fmt::Write as _;

use crate::eb::{AreaSummary, CaterpillarRow, QqRow};
use crate::fit::DecompositionReport;
use crate::mi::MiFitResult;

fn fmt(x: f64) -> String {
    format!("{x:.4}")
}

/// Correlation decomposition table: within/between/total correlations plus
/// the percent-between matrix and per-outcome ICC.
pub fn render_decomposition(d: &DecompositionReport<f64>) -> String {
    let m = d.outcomes.len();
    let mut out = String::new();
    let _ = writeln!(out, "Correlation decomposition (correlations unitless; ICC in percent)");
    let header = |title: &str| {
        let mut line = format!("{title:<28}");
        for o in &d.outcomes {
            line.push_str(&format!("{o:>12}"));
        }
        line
    };
    for (title, mat) in [
        ("Within-class correlation", &d.within_corr),
        ("Between-class correlation", &d.between_corr),
        ("Total correlation", &d.total_corr),
        ("% between class", &d.pct_between),
    ] {
        let _ = writeln!(out, "{}", header(title));
        for i in 0..m {
            let mut line = format!("  {:<26}", d.outcomes[i]);
            for j in 0..m {
                if j <= i {
                    line.push_str(&format!("{:>12}", fmt(mat[(i, j)])));
                } else {
                    line.push_str(&format!("{:>12}", ""));
                }
            }
            let _ = writeln!(out, "{line}");
        }
    }
    let mut line = String::from("ICC (% of total variance)  ");
    for i in 0..m {
        line.push_str(&format!("{:>12}", fmt(d.icc[i])));
    }
    let _ = writeln!(out, "{line}");
    out
}

/// Coefficient table: one row per term, estimate and standard error per
/// outcome, equality-test p-value in the last column. Covariance parameters
/// follow with their pooled standard errors.
pub fn render_coefficient_table(mi: &MiFitResult<f64>) -> String {
    let first = &mi.fits[0];
    let outcomes = &first.outcomes;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Pooled estimates over {} plausible values (score points; variances in score points^2)",
        mi.n_imputations
    );
    let mut header = format!("{:<26}", "Term");
    for o in outcomes {
        header.push_str(&format!("{:>12}{:>10}", o, "s.e."));
    }
    header.push_str(&format!("{:>12}", "p-equal"));
    let _ = writeln!(out, "{header}");

    let mut seen: Vec<&str> = Vec::new();
    for info in &first.coef {
        if seen.contains(&info.term.as_str()) {
            continue;
        }
        seen.push(&info.term);
        let mut line = format!("{:<26}", info.term);
        if info.outcome.is_some() {
            for o in outcomes {
                let name = format!("{o}:{}", info.term);
                match mi.coefficients.iter().find(|c| c.name == name) {
                    Some(c) => {
                        line.push_str(&format!("{:>12}{:>10}", fmt(c.estimate), fmt(c.se)))
                    }
                    None => line.push_str(&format!("{:>12}{:>10}", "-", "-")),
                }
            }
        } else {
            let name = format!("shared:{}", info.term);
            if let Some(c) = mi.coefficients.iter().find(|c| c.name == name) {
                line.push_str(&format!("{:>12}{:>10}", fmt(c.estimate), fmt(c.se)));
                for _ in 1..outcomes.len() {
                    line.push_str(&format!("{:>12}{:>10}", "(shared)", ""));
                }
            }
        }
        match mi.tests.iter().find(|t| t.term == info.term) {
            Some(test) => line.push_str(&format!("{:>12}", fmt(test.p_value))),
            None => line.push_str(&format!("{:>12}", "-")),
        }
        let _ = writeln!(out, "{line}");
    }

    let _ = writeln!(out, "Covariance parameters (score points^2)");
    for c in &mi.cov_params {
        let _ = writeln!(out, "  {:<26}{:>14}{:>12}", c.name, fmt(c.estimate), fmt(c.se));
    }
    if !mi.warnings.is_empty() {
        let _ = writeln!(out, "Warnings:");
        for w in &mi.warnings {
            let _ = writeln!(out, "  - {w}");
        }
    }
    out
}

/// Good/poor proportions by area.
pub fn render_territorial(rows: &[AreaSummary], outcome: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Good/poor class proportions for `{outcome}` (95% comparative intervals)");
    let _ = writeln!(
        out,
        "{:<18}{:>10}{:>12}{:>12}",
        "Area", "Classes", "prop. good", "prop. poor"
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{:<18}{:>10}{:>12}{:>12}",
            row.area,
            row.n_classes,
            fmt(row.prop_good),
            fmt(row.prop_poor)
        );
    }
    out
}

/// Caterpillar rows as CSV, ordered by rank.
pub fn caterpillar_csv(rows: &[CaterpillarRow<f64>]) -> String {
    let mut out = String::from(
        "rank,class_id,u_hat[score_points],lower[score_points],upper[score_points],label\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.rank, r.class_id, r.u_hat, r.lower, r.upper, r.label
        );
    }
    out
}

/// Normal-probability rows as CSV.
pub fn qq_csv(rows: &[QqRow<f64>]) -> String {
    let mut out = String::from(
        "theoretical_quantile[unitless],standardized_residual[unitless],class_id,outlier\n",
    );
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.theoretical, r.standardized, r.class_id, r.outlier);
    }
    out
}

struct Frame {
    width: f64,
    height: f64,
    margin: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.margin + (v - self.x_min) / (self.x_max - self.x_min) * (self.width - 2.0 * self.margin)
    }
    fn y(&self, v: f64) -> f64 {
        // SVG y grows downward.
        self.height
            - self.margin
            - (v - self.y_min) / (self.y_max - self.y_min) * (self.height - 2.0 * self.margin)
    }

    fn open(&self, title: &str) -> String {
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
                "viewBox=\"0 0 {w} {h}\">\n",
                "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
                "<text x=\"{tx}\" y=\"16\" font-family=\"sans-serif\" font-size=\"13\" ",
                "text-anchor=\"middle\">{title}</text>\n"
            ),
            w = self.width,
            h = self.height,
            tx = self.width / 2.0,
            title = title
        )
    }

    fn axes(&self, x_label: &str, y_label: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n",
            x0 = self.x(self.x_min),
            y0 = self.y(self.y_min),
            x1 = self.x(self.x_max),
            y1 = self.y(self.y_max),
        );
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{x_label}</text>\n",
            self.width / 2.0,
            self.height - 4.0
        );
        let _ = write!(
            s,
            "<text x=\"12\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\" transform=\"rotate(-90 12 {m})\">{y_label}</text>\n",
            self.height / 2.0,
            m = self.height / 2.0
        );
        for (v, label_y) in [(self.y_min, true), (self.y_max, true)] {
            let _ = label_y;
            let _ = write!(
                s,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{v:.1}</text>\n",
                4.0,
                self.y(v) + 3.0
            );
        }
        s
    }
}

fn label_color(label: crate::eb::Label) -> &'static str {
    match label {
        crate::eb::Label::Good => "#2a9d2a",
        crate::eb::Label::Poor => "#d43d3d",
        crate::eb::Label::NotSignificant => "#9a9a9a",
    }
}

/// Self-contained caterpillar plot: predictions in increasing order with
/// comparative confidence intervals.
pub fn caterpillar_svg(rows: &[CaterpillarRow<f64>], outcome: &str) -> String {
    let y_min = rows.iter().map(|r| r.lower).fold(f64::MAX, f64::min).min(0.0);
    let y_max = rows.iter().map(|r| r.upper).fold(f64::MIN, f64::max).max(0.0);
    let pad = 0.05 * (y_max - y_min).max(1.0);
    let frame = Frame {
        width: 900.0,
        height: 420.0,
        margin: 40.0,
        x_min: 0.0,
        x_max: rows.len() as f64 + 1.0,
        y_min: y_min - pad,
        y_max: y_max + pad,
    };
    let mut svg = frame.open(&format!("Class effects for {outcome} (95% comparative intervals)"));
    svg.push_str(&frame.axes("rank", "effect (score points)"));
    let _ = write!(
        svg,
        "<line x1=\"{}\" y1=\"{z}\" x2=\"{}\" y2=\"{z}\" stroke=\"#555\" stroke-dasharray=\"4 3\"/>\n",
        frame.x(frame.x_min),
        frame.x(frame.x_max),
        z = frame.y(0.0)
    );
    for r in rows {
        let x = frame.x(r.rank as f64);
        let color = label_color(r.label);
        let _ = write!(
            svg,
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1\"/>\n\
             <circle cx=\"{x}\" cy=\"{}\" r=\"1.8\" fill=\"{color}\"/>\n",
            frame.y(r.lower),
            frame.y(r.upper),
            frame.y(r.u_hat)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Self-contained normal probability plot of standardized residuals.
pub fn qq_svg(rows: &[QqRow<f64>], outcome: &str) -> String {
    let lo = rows
        .iter()
        .flat_map(|r| [r.theoretical, r.standardized])
        .fold(f64::MAX, f64::min);
    let hi = rows
        .iter()
        .flat_map(|r| [r.theoretical, r.standardized])
        .fold(f64::MIN, f64::max);
    let pad = 0.05 * (hi - lo).max(1.0);
    let frame = Frame {
        width: 480.0,
        height: 480.0,
        margin: 40.0,
        x_min: lo - pad,
        x_max: hi + pad,
        y_min: lo - pad,
        y_max: hi + pad,
    };
    let mut svg = frame.open(&format!("Normal probability plot for {outcome}"));
    svg.push_str(&frame.axes("theoretical quantile", "standardized residual"));
    let _ = write!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n",
        frame.x(lo),
        frame.y(lo),
        frame.x(hi),
        frame.y(hi)
    );
    for r in rows {
        let color = if r.outlier { "#d43d3d" } else { "#3366cc" };
        let _ = write!(
            svg,
            "<circle cx=\"{}\" cy=\"{}\" r=\"2.2\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n",
            frame.x(r.theoretical),
            frame.y(r.standardized)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
