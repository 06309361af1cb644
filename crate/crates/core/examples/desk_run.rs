//! Source → DMA → CWI → CAI on freshly generated synthetic regions,
//! printing target-test MRE after every stage.
//!
//! usage: desk_run [n_per_domain] [source_epochs] [adapt_epochs] [seed]

use std::time::Instant;

use countshift_core::dataio::{generate_scene, Domain, SceneConfig, Split};
use countshift_core::eval::evaluate_mre;
use countshift_core::trainer::{adapt, train_source, AdaptConfig};
use countshift_core::{compute_omega, Dataset, Model, Stage};

fn synth(domain: Domain, n: usize, seed: u64, split: Split) -> Dataset {
    let items = (0..n as u64)
        .map(|i| generate_scene(&SceneConfig::for_domain(domain, seed * 1_000_003 + i)))
        .collect();
    Dataset::new(domain, split, items)
}

fn main() -> countshift_core::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, d: u64| args.get(i).copied().unwrap_or(d);
    let (n, src_ep, ad_ep, seed) = (arg(0, 200) as usize, arg(1, 30) as usize, arg(2, 15) as usize, arg(3, 0));
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);

    let source = synth(Domain::Source, n, 10 + seed, Split::Train);
    let target = synth(Domain::Target, n, 20 + seed, Split::Train);
    let test = synth(Domain::Target, (n / 2).max(20), 30 + seed, Split::Test);
    let source_test = synth(Domain::Source, (n / 2).max(20), 40 + seed, Split::Test);
    let cfg = AdaptConfig {
        source_epochs: src_ep,
        adapt_epochs: ad_ep,
        source_lr: env("SRC_LR", 1e-3),
        adapt_lr: env("ADAPT_LR", 1e-4),
        disc_lr: env("DISC_LR", 1e-3),
        alpha: env("ALPHA", 0.1),
        lambda1: env("LAMBDA1", 45.0),
        lambda2: env("LAMBDA2", 1.0 / 26.0),
        batch_size: env("BATCH", 16.0) as usize,
        seed,
        ..AdaptConfig::default()
    };
    let t = Instant::now();
    let cache = std::env::var("SRC_CACHE").ok().map(std::path::PathBuf::from);
    let (src, last) = match &cache {
        Some(p) if p.exists() => (Model::load(p)?, f64::NAN),
        _ => {
            let (src, log) = train_source(&source, None, &cfg)?;
            for e in &log.epochs {
                eprintln!("  epoch {} mse {:.4e}", e.epoch, e.loss.mse);
            }
            if let Some(p) = &cache {
                src.save(p)?;
            }
            (src, log.epochs.last().map(|e| e.loss.mse).unwrap_or(0.0))
        }
    };
    let mre_of = |m: &Model| -> countshift_core::Result<String> {
        let r = evaluate_mre(&m.params, &test)?;
        let bias = r.rows.iter().map(|r| (r.pred_count - r.gt_count as f64) / r.gt_count.max(1) as f64).sum::<f64>()
            / r.rows.len() as f64;
        let omega = compute_omega(&m.params, &target, 0.8, 0.0)?;
        Ok(format!("{:.2} bias {:+.1}% omega {omega}/{}", r.mre.unwrap_or(f64::NAN), 100.0 * bias, target.len()))
    };
    println!(
        "source  mse {last:.3e}  mre {}  (source-domain mre {:.2})  [{:.0}s]",
        mre_of(&src)?,
        evaluate_mre(&src.params, &source_test)?.mre.unwrap_or(f64::NAN),
        t.elapsed().as_secs_f64()
    );
    let mut current = src.clone();
    for stage in [Stage::Dma, Stage::Cwi, Stage::Cai] {
        let t = Instant::now();
        let c = AdaptConfig { stage, ..cfg.clone() };
        let (m, log) = adapt(current.clone(), &source, &target, None, &c)?;
        let Some(e) = log.epochs.last() else { continue };
        println!(
            "{stage:<7} mse {:.3e} bce {:.3} wi {:.3} ai {:.3}  mre {}  [{:.0}s]",
            e.loss.mse, e.loss.bce, e.loss.wi, e.loss.ai, mre_of(&m)?, t.elapsed().as_secs_f64()
        );
        current = m;
    }
    Ok(())
}
