use adps_core::{ImageTensor, Tensor};

/// Viridis anchors at steps of 1/8.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Piecewise-linear viridis; input is clamped to `[0, 1]`, output in `[0, 1]`.
pub fn viridis(v: f64) -> [f64; 3] {
    let t = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) } * 8.0;
    let i = (t.floor() as usize).min(7);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + f * (b[c] - a[c])) / 255.0)
}

/// Colors a `1×H×W×1` probability map.
pub fn heatmap(map: &Tensor) -> ImageTensor {
    Tensor::from_fn(map.h(), map.w(), 3, |y, x, c| viridis(map.at(0, y, x, 0))[c])
}

pub fn threshold_mask(map: &Tensor, threshold: f64) -> Tensor {
    map.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

pub fn grayscale(map: &Tensor) -> Tensor {
    map.map(|v| v.clamp(0.0, 1.0))
}

/// One bar group per configuration, one bar per metric.
pub fn bar_chart_svg(rows: &[(String, Vec<(&str, f64)>)]) -> String {
    const COLORS: [&str; 4] = ["#440154", "#31688e", "#35b779", "#fde725"];
    let metrics: Vec<&str> = rows.first().map(|r| r.1.iter().map(|m| m.0).collect()).unwrap_or_default();
    let (bar, gap, plot_h, left, top) = (14.0, 18.0, 240.0, 50.0, 30.0);
    let group_w = bar * metrics.len() as f64 + gap;
    let width = left + group_w * rows.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 130.0;
    let base = top + plot_h;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s += &format!("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = base - v * plot_h;
        s += &format!(
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
            width - 10.0,
            left - 6.0,
            y + 4.0
        );
    }
    for (g, (label, values)) in rows.iter().enumerate() {
        let x0 = left + gap / 2.0 + g as f64 * group_w;
        for (m, (_, v)) in values.iter().enumerate() {
            let h = if v.is_finite() { v.clamp(0.0, 1.0) * plot_h } else { 0.0 };
            s += &format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                x0 + m as f64 * bar,
                base - h,
                COLORS[m % COLORS.len()]
            );
        }
        let cx = x0 + bar * values.len() as f64 / 2.0;
        s += &format!(
            "<text x=\"{cx:.1}\" y=\"{:.1}\" transform=\"rotate(-45 {cx:.1} {:.1})\" text-anchor=\"end\">{}</text>\n",
            base + 14.0,
            base + 14.0,
            escape(label)
        );
    }
    for (m, name) in metrics.iter().enumerate() {
        let x = left + m as f64 * 90.0;
        s += &format!(
            "<rect x=\"{x:.1}\" y=\"8\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"17\">{name}</text>\n",
            COLORS[m % COLORS.len()],
            x + 14.0
        );
    }
    s += "</svg>\n";
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
