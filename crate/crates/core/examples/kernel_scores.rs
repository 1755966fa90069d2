//! Diversity scores of a point set: Vendi, RKE, their order-alpha family and
//! the prompt-conditioned variants.
//!
//! cargo run --example kernel_scores

use sparke::entropy::{cond_rke_score, cond_vendi_score, order_alpha_score, rke_score, vendi_score, EntropyOrder};
use sparke::kernel::{build_kernel_matrix, KernelSpec};

fn main() -> sparke::Result<()> {
    let clustered = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.1], vec![3.0, 3.0], vec![3.1, 3.0]];
    let spread = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0], vec![-2.0, 1.0]];
    let prompts = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];

    let kz = KernelSpec::gaussian(0.8);
    let ky = KernelSpec::gaussian(0.3);
    let k_y = build_kernel_matrix(&ky, &prompts)?;
    for (name, pts) in [("clustered", &clustered), ("spread", &spread)] {
        let k = build_kernel_matrix(&kz, pts)?;
        println!("{name}:");
        println!("  vendi {:.4}  rke {:.4}", vendi_score(&k)?.value, rke_score(&k)?.value);
        for alpha in [0.5, 1.0, 2.0, 4.0] {
            println!("  order {alpha:<3} score {:.4}", order_alpha_score(&k, EntropyOrder::new(alpha)?)?.value);
        }
        println!("  cond_vendi {:.4}  cond_rke {:.4}", cond_vendi_score(&k, &k_y)?.value, cond_rke_score(&k, &k_y)?.value);
    }

    let cos = build_kernel_matrix(&KernelSpec::Cosine, &spread[1..])?;
    println!("spread under the cosine kernel (origin dropped): rke {:.4}", rke_score(&cos)?.value);
    Ok(())
}
