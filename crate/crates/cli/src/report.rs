//! Text and JSON renderings of FLOPs reports.

use serde_json::json;
use tcc_core::flops::{Comparison, FlopsReport, PyramidArch, RefinementSummary};

fn shape(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// One line per layer, then per-group and overall totals.
pub fn render_report(title: &str, r: &FlopsReport) -> String {
    let mut s = format!("# flops report: {title}\n");
    s.push_str(&format!("{:<32} {:<10} {:>16} {:>12}  {}\n", "layer", "group", "flops", "params", "output"));
    for l in &r.layers {
        s.push_str(&format!(
            "{:<32} {:<10} {:>16} {:>12}  {}\n",
            l.name,
            l.group,
            l.flops,
            l.params,
            shape(&l.output_shape)
        ));
    }
    s.push_str("\n# groups\n");
    for (g, f, p) in r.groups() {
        s.push_str(&format!("{g:<43} {f:>16} {p:>12}\n"));
    }
    s.push_str(&format!("{:<43} {:>16} {:>12}\n", "total", r.total_flops, r.total_params));
    s
}

pub fn render_comparison(base: &str, variant: &str, c: &Comparison) -> String {
    let mut s = format!("# compare: {variant} vs {base}\n");
    s.push_str(&format!(
        "{:<12} {:>16} {:>16} {:>16} {:>10} {:>12}\n",
        "group", "base", "variant", "delta", "relative", "params"
    ));
    for g in &c.groups {
        s.push_str(&format!(
            "{:<12} {:>16} {:>16} {:>16} {:>10.4} {:>12}\n",
            g.group, g.base_flops, g.variant_flops, g.delta_flops, g.relative, g.delta_params
        ));
    }
    s.push_str(&format!("refinement delta flops {}\n", c.refinement_delta_flops));
    s.push_str(&format!("refinement delta params {}\n", c.refinement_delta_params));
    s.push_str(&format!("total delta flops {}\n", c.total_delta_flops));
    s
}

pub fn summary_json(arch: &PyramidArch, s: &RefinementSummary) -> serde_json::Value {
    json!({
        "width": arch.backbone.width,
        "image_height": arch.image_height,
        "image_width": arch.image_width,
        "n_keys": arch.tcc.n_keys,
        "stack_depth": arch.tcc.stack_depth,
        "before_fusion": arch.tcc.placement.before_fusion,
        "after_fusion": arch.tcc.placement.after_fusion,
        "total_flops": {
            "none": s.none.total_flops,
            "conv3x3": s.conv3x3.total_flops,
            "tcc": s.tcc.total_flops,
        },
        "refinement_delta_flops": {
            "conv3x3": s.conv_delta as i64,
            "tcc": s.tcc_delta as i64,
        },
        "delta_ratio": s.ratio,
    })
}
