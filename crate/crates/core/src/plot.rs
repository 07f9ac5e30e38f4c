//! Static SVG and CSV renderings of forecast bands against allocation
//! thresholds.

use std::fmt::Write as _;
use std::io::Write;

/// Aligned per-step series for one beam.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BandSeries {
    pub title: String,
    pub truth: Vec<f64>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub threshold: Vec<f64>,
    pub static_max: f64,
    /// Central-interval mass shown by `lower`/`upper`, e.g. 0.9.
    pub interval: f64,
}

impl BandSeries {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,truth,median,lower,upper,threshold,static_max")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{i},{},{},{},{},{},{}",
                self.truth[i], self.median[i], self.lower[i], self.upper[i], self.threshold[i], self.static_max
            )?;
        }
        Ok(())
    }

    pub fn to_svg(&self) -> String {
        const W: f64 = 960.0;
        const H: f64 = 360.0;
        const PAD: f64 = 48.0;
        let n = self.len().max(2);
        let ymax = self
            .truth
            .iter()
            .chain(&self.upper)
            .chain(&self.threshold)
            .copied()
            .chain([self.static_max])
            .filter(|v| v.is_finite())
            .fold(1.0, f64::max)
            * 1.05;
        let sx = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
        let sy = |v: f64| H - PAD - (H - 2.0 * PAD) * (v.clamp(0.0, ymax) / ymax);
        let path = |vals: &[f64]| {
            let mut s = String::new();
            for (i, &v) in vals.iter().enumerate() {
                let _ = write!(s, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, sx(i), sy(v));
            }
            s
        };

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="{PAD}" y="24">{}</text>"#, escape(&self.title));

        let mut band = String::new();
        for (i, &v) in self.upper.iter().enumerate() {
            let _ = write!(band, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, sx(i), sy(v));
        }
        for (i, &v) in self.lower.iter().enumerate().rev() {
            let _ = write!(band, " L{:.2},{:.2}", sx(i), sy(v));
        }
        if !band.is_empty() {
            let _ = writeln!(svg, r##"<path d="{band} Z" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##);
        }
        let sm = sy(self.static_max);
        let _ = writeln!(
            svg,
            r##"<line x1="{PAD}" y1="{sm:.2}" x2="{:.2}" y2="{sm:.2}" stroke="#636363" stroke-dasharray="6 4"/>"##,
            W - PAD
        );
        for (vals, colour, width) in [
            (&self.threshold, "#d62728", 1.5),
            (&self.median, "#1f77b4", 1.5),
            (&self.truth, "#000000", 1.0),
        ] {
            if !vals.is_empty() {
                let _ = writeln!(
                    svg,
                    r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="{width}"/>"#,
                    path(vals)
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{0}" stroke="black"/>"#,
            H - PAD,
            W - PAD
        );
        let _ = writeln!(svg, r#"<text x="6" y="{:.2}">{ymax:.0}</text>"#, PAD + 4.0);
        let _ = writeln!(svg, r#"<text x="6" y="{:.2}">0</text>"#, H - PAD);
        let legend = [
            ("#000000", "demand".to_string()),
            ("#1f77b4", "median".to_string()),
            ("#9ecae1", format!("{:.0}% interval", self.interval * 100.0)),
            ("#d62728", "threshold".to_string()),
            ("#636363", "static max".to_string()),
        ];
        for (i, (colour, label)) in legend.iter().enumerate() {
            let x = PAD + 150.0 * i as f64;
            let y = H - 14.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{:.2}" width="12" height="12" fill="{colour}"/><text x="{:.2}" y="{y}">{label}</text>"#,
                y - 10.0,
                x + 16.0
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
