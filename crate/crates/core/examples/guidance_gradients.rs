//! The guidance gradients against a history, checked against finite
//! differences of the loss they descend, and one descent step.
//!
//! cargo run --example guidance_gradients

use sparke::entropy::{cond_irke_loss, irke_loss};
use sparke::guidance::{
    apply_guidance, cond_irke_gradient, irke_gradient, GenerationHistory, GradientScaling, GuidanceConfig,
};
use sparke::kernel::{ConditionVector, LatentPoint};

fn main() -> sparke::Result<()> {
    let history = [([0.0, 0.0], [1.0, 0.0]), ([0.5, 0.2], [1.0, 0.0]), ([-0.3, 0.8], [0.0, 1.0]), ([1.2, -0.4], [0.0, 1.0])];
    let mut h = GenerationHistory::new(2, 2);
    for (z, y) in &history {
        h.push(&LatentPoint(z.to_vec()), &ConditionVector(y.to_vec()))?;
    }
    let z = LatentPoint(vec![0.3, 0.1]);
    let y = ConditionVector(vec![1.0, 0.0]);
    let cfg = GuidanceConfig { scaling: GradientScaling::Exact, ..GuidanceConfig::default() };

    let mut pts: Vec<Vec<f64>> = history.iter().map(|(p, _)| p.to_vec()).collect();
    let conds: Vec<Vec<f64>> = history.iter().map(|(_, c)| c.to_vec()).chain([y.0.clone()]).collect();
    pts.push(z.0.clone());
    let loss_u = |p: &[Vec<f64>]| irke_loss(p, &cfg.kernel_z).unwrap();
    let loss_c = |p: &[Vec<f64>]| cond_irke_loss(p, &conds, &cfg.kernel_z, &cfg.kernel_y).unwrap();

    let g_u = irke_gradient(&h, &z, &cfg)?;
    let g_c = cond_irke_gradient(&h, &z, &y, &cfg)?;
    for (name, g, loss) in [("irke", &g_u, &loss_u as &dyn Fn(&[Vec<f64>]) -> f64), ("cond_irke", &g_c, &loss_c)] {
        let fd: Vec<f64> = (0..2)
            .map(|j| {
                let (mut p, mut m) = (pts.clone(), pts.clone());
                p[4][j] += 1e-6;
                m[4][j] -= 1e-6;
                (loss(&p) - loss(&m)) / 2e-6
            })
            .collect();
        println!("{name:<10} analytic {:>12.6e} {:>12.6e}   finite diff {:>12.6e} {:>12.6e}", g.grad[0], g.grad[1], fd[0], fd[1]);
    }

    let eta = 0.5 / g_u.norm();
    let moved = apply_guidance(&z, &g_u, eta)?;
    let mut after = pts.clone();
    after[4] = moved.0.clone();
    println!("step of length 0.5 along -grad: loss {:.6} -> {:.6}, z {:?} -> {:?}", loss_u(&pts), loss_u(&after), z.0, moved.0);
    Ok(())
}
