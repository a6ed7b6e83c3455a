use cctmpc::scenario::ScenarioFile;
use nalgebra::{DMatrix, DVector};
use std::path::PathBuf;

#[test]
fn probe_extreme_step8() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/illustrative.scn");
    let mut sc = ScenarioFile::load(&path).unwrap().assemble().unwrap();
    sc.options.steps = 8;
    sc.options.seed = 0;
    sc.options.disturbance_policy = "extreme-cycle".into();
    let mut sim = sc.into_simulator().unwrap();
    let report = sim.run().unwrap();
    let rec = report.records.last().unwrap();
    let x8 = &rec.realized_a * &rec.x + &rec.realized_b * &rec.input + &rec.disturbance;

    let sc2 = ScenarioFile::load(&path).unwrap().assemble().unwrap();
    let r = nalgebra::dvector![5.0];
    let sol = sc2.context.solve(&x8, &r, None).unwrap();
    let tpl = sc2.context.template();
    let y = &sol.y[0];
    let f: &DMatrix<f64> = tpl.facets();
    let m = tpl.num_facets();

    let cone_resid = tpl.cone() * y;
    println!("cone residual max {:.3e}", cone_resid.max());

    // Per-vertex: which facets are active, worst containment.
    let points = tpl.vertex_points(y);
    for (j, pt) in points.iter().enumerate() {
        let resid = f * pt - y;
        let active: Vec<usize> = (0..m).filter(|&i| resid[i].abs() < 1e-7).collect();
        println!(
            "vertex {j}: [{:+.9e}, {:+.9e}] worst containment {:+.3e} active {:?}",
            pt[0],
            pt[1],
            resid.max(),
            active
        );
    }

    // Brute-force polygon vertices: all facet-pair intersections inside P.
    println!("brute-force vertices of {{Fx <= y}}:");
    let mut brute: Vec<DVector<f64>> = Vec::new();
    for a in 0..m {
        for b in (a + 1)..m {
            let mat = DMatrix::from_row_slice(
                2,
                2,
                &[f[(a, 0)], f[(a, 1)], f[(b, 0)], f[(b, 1)]],
            );
            let rhs = nalgebra::dvector![y[a], y[b]];
            if let Some(inv) = mat.try_inverse() {
                let p = inv * rhs;
                let resid = f * &p - y;
                if resid.max() <= 1e-9 {
                    if !brute.iter().any(|q| (q - &p).amax() < 1e-9) {
                        println!(
                            "  facets ({a},{b}): [{:+.9e}, {:+.9e}]",
                            p[0], p[1]
                        );
                        brute.push(p);
                    }
                }
            }
        }
    }

    // Distance from x8 to each template vertex and to the segment hull gap.
    let fx = f * &x8 - y;
    let active: Vec<usize> = (0..m).filter(|&i| fx[i].abs() < 1e-9).collect();
    println!("x8 = [{:+.9e}, {:+.9e}], active facets {:?}", x8[0], x8[1], active);
}
