//! Verifies reverse-mode gradients against f64 central differences on a
//! small ViT + projection head, parameter block by parameter block.
//!
//! The parameters are offset to O(1) magnitudes first; near the tiny
//! init, the normalized bottleneck makes finite differences themselves
//! ill-conditioned at any usable step size.
//!
//!     cargo run --release --example gradient_check

use dinomask::config::RunConfig;
use dinomask::error::Result;
use dinomask::gradcheck::{central_diff, max_rel_error};
use dinomask::rng::rng_from_seed;
use dinomask::tensor::tape::Tape;
use dinomask::tensor::Tensor;
use dinomask::vit::{backbone_forward, collect_grads, head_forward, stage_model, DinoParams};

fn main() -> Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.img_size_global = 16;
    cfg.img_size_local = 8;
    cfg.embed_dim = 16;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 1.0;
    cfg.head_hidden_dim = 16;
    cfg.head_bottleneck_dim = 8;
    cfg.head_out_dim = 8;
    let vit_cfg = cfg.vit();

    let mut params = DinoParams::<f64>::init(&vit_cfg, &mut rng_from_seed(3))?;
    params.set_requires_grad(true);
    let sizes: Vec<(String, usize)> = params
        .named()
        .iter()
        .map(|(n, t)| (n.clone(), t.numel()))
        .collect();
    let n: usize = sizes.iter().map(|(_, s)| s).sum();
    println!("model: {n} parameters in {} tensors", sizes.len());

    let mut theta: Vec<f64> = params
        .named()
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect();
    let noise = Tensor::<f64>::randn(vec![n], 0.3, &mut rng_from_seed(4));
    for (v, z) in theta.iter_mut().zip(noise.data()) {
        *v += z;
    }

    let input = Tensor::<f64>::randn(vec![2, 3, 16, 16], 0.5, &mut rng_from_seed(5));
    let coeff = Tensor::<f64>::randn(vec![2, 8], 1.0, &mut rng_from_seed(6));

    let mut eval = |th: &[f64], want_grad: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut off = 0;
        for (_, t) in params.named_mut() {
            let k = t.numel();
            t.data_mut().copy_from_slice(&th[off..off + k]);
            off += k;
        }
        let mut tape = Tape::<f64>::new();
        let staged = stage_model(&mut tape, &params);
        let out = backbone_forward(&mut tape, &staged, &vit_cfg, &input).expect("backbone");
        let logits = head_forward(&mut tape, &staged, out.cls).expect("head");
        let cnode = tape.constant(&coeff);
        let prod = tape.mul(logits, cnode).expect("mul");
        let loss = tape.sum_all(prod).expect("sum");
        let value = tape.value(loss)[0];
        let grads = want_grad.then(|| {
            tape.backward(loss).expect("backward");
            collect_grads(&tape, &staged)
        });
        (value, grads)
    };

    let analytic = eval(&theta, true).1.expect("grads");
    println!("running {} central differences at h = 1e-5...", 2 * n);
    let numeric = central_diff(|th| eval(th, false).0, &theta, 1e-5);

    println!("\n{:<18} {:>8} {:>12}", "parameter", "size", "max rel err");
    let mut off = 0;
    let mut worst = 0.0f64;
    for ((name, size), a) in sizes.iter().zip(&analytic) {
        let err = max_rel_error(a, &numeric[off..off + size], 1e-3);
        worst = worst.max(err);
        println!("{name:<18} {size:>8} {err:>12.2e}");
        off += size;
    }
    println!("\nworst block: {worst:.2e} (tolerance 1e-4)");
    assert!(worst <= 1e-4);
    Ok(())
}
