use dropcompact::data::load_mnist;
use dropcompact::trainer::*;
use std::path::Path;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let regime = Regime::parse(&a[1]).unwrap();
    let hidden: usize = a[2].parse().unwrap();
    let ds = load_mnist(Path::new("/root/data/mnist"), 10000, 1).unwrap();
    let mut cfg = TrainConfig::mnist(regime, vec![hidden, hidden], 50000);
    for kv in &a[3..] {
        let (k, v) = kv.split_once('=').unwrap();
        match k {
            "lr" => cfg.learning_rate = v.parse().unwrap(),
            "rlr" => cfg.retention.learning_rate = v.parse().unwrap(),
            "alpha" => { cfg.prior.alpha = v.parse().unwrap(); cfg.prior.beta = cfg.prior.alpha }
            "gamma" => cfg.prior.gamma = v.parse().unwrap(),
            "epochs" => cfg.epochs = v.parse().unwrap(),
            "red" => cfg.reduction = Reduction::parse(v).unwrap(),
            "plateau" => cfg.plateau_halving = v == "1",
            "l2" => cfg.l2 = v.parse().unwrap(),
            "seed" => cfg.seed = v.parse().unwrap(),
            "src" => cfg.retention_source = if v == "dev" { RetentionSource::Dev } else { RetentionSource::Train },
            _ => panic!("{k}"),
        }
    }
    let t = std::time::Instant::now();
    let out = run_training(&ds, &cfg, None, &mut |r| {
        let d = r.dev.unwrap();
        let te = r.test.unwrap();
        println!(
            "{:3} {:6.1}s lr={:.2e} tr={:.4} dev={:.2}/{:.4} test={:.2}/{:.4} w={} u={:?} tu={:?} conv={:.3} cl={} h={:?}",
            r.epoch, t.elapsed().as_secs_f64(), r.learning_rate, r.train_loss, d.error, d.loss, te.error, te.loss,
            r.n_weights, r.units, r.train_units, r.converged, r.clamped, r.histogram
        );
    })
    .unwrap();
    println!("best epoch {}", out.best_epoch);
}
