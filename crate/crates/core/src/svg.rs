//! Static SVG of a plan projected onto two position coordinates.

use std::fmt::Write;

use nalgebra::DVector;
use thiserror::Error;

use crate::planner::Plan;
use crate::steering::{Steerer, SteeringResult};
use crate::world::{Aabb, ProblemInstance};

/// Points per drawn connection.
pub const SEGMENT_POINTS: usize = 32;

const WIDTH: f64 = 800.0;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot draw dimensions {dims:?}: {reason}")]
pub struct DimensionError {
    pub dims: [usize; 2],
    pub reason: String,
}

struct Frame {
    dims: [usize; 2],
    lo: [f64; 2],
    scale: f64,
    height: f64,
}

impl Frame {
    fn point(&self, x: &[f64]) -> (f64, f64) {
        let px = (x[self.dims[0]] - self.lo[0]) * self.scale;
        let py = self.height - (x[self.dims[1]] - self.lo[1]) * self.scale;
        (px, py)
    }

    fn rect(&self, b: &Aabb, class: &str) -> String {
        let (x0, y1) = self.point(&b.lo);
        let (x1, y0) = self.point(&b.hi);
        format!(
            r#"<rect class="{class}" x="{x0:.3}" y="{y0:.3}" width="{:.3}" height="{:.3}"/>"#,
            x1 - x0,
            y1 - y0
        )
    }

    fn polyline(&self, pts: &[Vec<f64>], class: &str) -> String {
        let mut s = format!(r#"<polyline class="{class}" points=""#);
        for (i, p) in pts.iter().enumerate() {
            let (x, y) = self.point(p);
            let sep = if i == 0 { "" } else { " " };
            let _ = write!(s, "{sep}{x:.3},{y:.3}");
        }
        s.push_str(r#""/>"#);
        s
    }

    fn circle(&self, x: &[f64], class: &str) -> String {
        let (cx, cy) = self.point(x);
        format!(r#"<circle class="{class}" cx="{cx:.3}" cy="{cy:.3}" r="6"/>"#)
    }
}

/// States along `seg` at `SEGMENT_POINTS` evenly spaced times.
fn sample(steerer: &Steerer, seg: &SteeringResult) -> Vec<Vec<f64>> {
    let mut sampler = steerer.sampler(seg);
    (0..SEGMENT_POINTS)
        .map(|i| {
            let t = seg.tau_star * i as f64 / (SEGMENT_POINTS - 1) as f64;
            match sampler.state(t) {
                Ok(x) => x.to_vec(),
                Err(_) => if i == 0 { seg.x0.clone() } else { seg.x1.clone() },
            }
        })
        .collect()
}

/// Draws the bounds, obstacles, goal region, search tree, solution and
/// start/goal markers. `steerer` must be the one the plan was made with.
pub fn emit_svg(plan: &Plan, p: &ProblemInstance, steerer: &Steerer, dims: [usize; 2]) -> Result<String, DimensionError> {
    let err = |reason: &str| DimensionError { dims, reason: reason.to_string() };
    let n = p.system().n();
    if p.position_dims().len() < 2 {
        return Err(err("the system has fewer than two position coordinates"));
    }
    if dims[0] == dims[1] {
        return Err(err("the coordinates must differ"));
    }
    if dims.iter().any(|&d| d >= n) {
        return Err(err(&format!("the state has {n} coordinates")));
    }
    let b = p.bounds();
    let lo = [b.lo[dims[0]], b.lo[dims[1]]];
    let ext = [b.hi[dims[0]] - lo[0], b.hi[dims[1]] - lo[1]];
    if !(ext[0] > 0.0 && ext[1] > 0.0 && ext[0].is_finite() && ext[1].is_finite()) {
        return Err(err("the bounds are degenerate in these coordinates"));
    }
    let scale = WIDTH / ext[0];
    let f = Frame { dims, lo, scale, height: ext[1] * scale };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{:.0}" viewBox="-10 -10 {:.3} {:.3}">"#,
        f.height,
        WIDTH + 20.0,
        f.height + 20.0
    );
    out.push_str(concat!(
        "<style>",
        ".bounds{fill:white;stroke:black;stroke-width:2}",
        ".obstacle{fill:#555}",
        ".goal{fill:#9c9;fill-opacity:0.5}",
        ".tree{fill:none;stroke:#88a;stroke-width:0.6}",
        ".solution{fill:none;stroke:#c22;stroke-width:2.5}",
        ".start{fill:#27c}",
        ".end{fill:#c22}",
        "</style>\n"
    ));
    let _ = writeln!(out, "{}", f.rect(b, "bounds"));
    out.push_str("<g id=\"obstacles\">\n");
    for o in p.obstacles() {
        let _ = writeln!(out, "{}", f.rect(o, "obstacle"));
    }
    out.push_str("</g>\n");
    let _ = writeln!(out, "{}", f.rect(p.goal(), "goal"));

    let v = &plan.graph.vertices;
    if !plan.graph.edges.is_empty() {
        out.push_str("<g id=\"tree\">\n");
        for e in &plan.graph.edges {
            let (Some(a), Some(z)) = (v.get(e.from), v.get(e.to)) else { continue };
            let seg = steerer.steer(&DVector::from_column_slice(a), &DVector::from_column_slice(z));
            if let Ok(seg) = seg {
                let _ = writeln!(out, "{}", f.polyline(&sample(steerer, &seg), "tree"));
            }
        }
        out.push_str("</g>\n");
    }
    let segs = &plan.trajectory.segments;
    if plan.success && !segs.is_empty() {
        let mut pts: Vec<Vec<f64>> = Vec::new();
        for s in segs {
            let mut part = sample(steerer, s);
            if !pts.is_empty() {
                part.remove(0);
            }
            pts.extend(part);
        }
        let _ = writeln!(out, "{}", f.polyline(&pts, "solution"));
    }
    let _ = writeln!(out, "{}", f.circle(p.x_init(), "start"));
    let end = match segs.last() {
        Some(s) if plan.success => s.x1.clone(),
        _ => p.goal().center(),
    };
    let _ = writeln!(out, "{}", f.circle(&end, "end"));
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{PlannerConfig, PlanningInstance};
    use crate::scenario::bundled;

    fn points(doc: &roxmltree::Document<'_>, class: &str) -> Vec<Vec<(f64, f64)>> {
        doc.descendants()
            .filter(|n| n.attribute("class") == Some(class) && n.has_tag_name("polyline"))
            .map(|n| {
                n.attribute("points")
                    .unwrap()
                    .split(' ')
                    .map(|p| {
                        let (x, y) = p.split_once(',').unwrap();
                        (x.parse().unwrap(), y.parse().unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    fn count(doc: &roxmltree::Document<'_>, class: &str) -> usize {
        doc.descendants().filter(|n| n.attribute("class") == Some(class)).count()
    }

    #[test]
    fn maze_plan_is_well_formed() {
        let inst = PlanningInstance::new(bundled("maze").unwrap(), PlannerConfig { n_samples: 300, ..Default::default() }, 1).unwrap();
        let plan = inst.dfmt(None).unwrap();
        let text = emit_svg(&plan, inst.problem(), inst.steerer(), [0, 1]).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert_eq!(count(&doc, "obstacle"), inst.problem().obstacles().len());
        let tree = points(&doc, "tree");
        assert_eq!(tree.len(), plan.graph.edges.len());
        assert!(tree.iter().all(|t| t.len() == SEGMENT_POINTS));
        if plan.success {
            let sol = points(&doc, "solution");
            assert_eq!(sol[0].len(), plan.trajectory.segments.len() * (SEGMENT_POINTS - 1) + 1);
        }
    }

    #[test]
    fn empty_tree_draws_only_the_world() {
        let inst = PlanningInstance::new(
            bundled("single_wall").unwrap(),
            PlannerConfig { n_samples: 50, radius_override: Some(1e-4), ..Default::default() },
            0,
        )
        .unwrap();
        let plan = inst.dfmt(None).unwrap();
        assert!(plan.graph.edges.is_empty());
        let text = emit_svg(&plan, inst.problem(), inst.steerer(), [0, 1]).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 0);
        assert_eq!(count(&doc, "bounds"), 1);
        assert_eq!(count(&doc, "obstacle"), 1);
        assert_eq!(count(&doc, "start") + count(&doc, "end"), 2);
    }

    #[test]
    fn one_segment_plan_endpoints() {
        let p = bundled("free").unwrap();
        let cfg = PlannerConfig { n_samples: 20, radius_override: Some(f64::INFINITY), ..Default::default() };
        let inst = PlanningInstance::new(p, cfg, 3).unwrap();
        let plan = inst.dprm(None).unwrap();
        assert_eq!(plan.trajectory.segments.len(), 1);
        let text = emit_svg(&plan, inst.problem(), inst.steerer(), [0, 1]).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let sol = &points(&doc, "solution")[0];
        // 800 px per unit, y flipped
        let px = |x: &[f64]| (x[0] * 800.0, 800.0 - x[1] * 800.0);
        let goal = &plan.trajectory.segments[0].x1;
        for (got, want) in [(sol[0], px(inst.problem().x_init())), (*sol.last().unwrap(), px(goal))] {
            assert!((got.0 - want.0).abs() < 2e-3 && (got.1 - want.1).abs() < 2e-3, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn bad_dimensions() {
        let inst = PlanningInstance::new(bundled("free").unwrap(), PlannerConfig { n_samples: 20, ..Default::default() }, 0).unwrap();
        let plan = inst.dfmt(None).unwrap();
        for dims in [[0, 0], [0, 4], [7, 1]] {
            assert!(emit_svg(&plan, inst.problem(), inst.steerer(), dims).is_err());
        }
        let sys = crate::system::LinearAffineSystem::double_integrator(1, 1.0);
        let line = ProblemInstance::new(
            sys,
            Aabb::new(vec![0.0, -1.0], vec![1.0, 1.0]),
            vec![0],
            vec![],
            vec![0.1, 0.0],
            Aabb::new(vec![0.8, -1.0], vec![0.9, 1.0]),
        )
        .unwrap();
        let steerer = Steerer::new(line.system().clone(), Default::default()).unwrap();
        assert!(emit_svg(&plan, &line, &steerer, [0, 1]).is_err());
    }
}
