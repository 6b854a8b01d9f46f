use ildr_cli::checkpoint;
use ildr_core::memory::fit_subspace;
use ildr_core::trainer::encode_features;
use ildr_core::evalkit::evaluate_features;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let ckpt = checkpoint::load(std::path::Path::new(&path)).unwrap();
    let (train, eval) = ckpt.config.load_dataset().unwrap();
    let cfg = ckpt.config.train_config();
    let ids = ckpt.run.store.class_ids();
    let eval = eval.filter_classes(&ids);
    let feats = encode_features(&ckpt.encoder, &eval.data, &cfg.rate).unwrap();
    let stored = evaluate_features(&feats, &eval.labels, &ckpt.run.store.models()).unwrap();
    let fresh_models: Vec<_> = ids.iter().map(|&c| {
        let f = encode_features(&ckpt.encoder, &train.class_block(c), &cfg.rate).unwrap();
        fit_subspace(c, &f, cfg.dim_rule).unwrap().model
    }).collect();
    let refs: Vec<&_> = fresh_models.iter().collect();
    let fresh = evaluate_features(&feats, &eval.labels, &refs).unwrap();
    println!("stored overall {:.3} | fresh overall {:.3}", stored.overall_accuracy, fresh.overall_accuracy);
    println!("stored per-class {:?}", stored.per_class.iter().map(|(k,v)| (*k,(v.accuracy()*100.0) as i32)).collect::<Vec<_>>());
    println!("fresh  per-class {:?}", fresh.per_class.iter().map(|(k,v)| (*k,(v.accuracy()*100.0) as i32)).collect::<Vec<_>>());
    for (c, fresh_m) in ids.iter().zip(fresh_models.iter()) {
        let stored_m = &ckpt.run.store.get(*c).unwrap().model;
        let aff = ildr_core::evalkit::affinity(&stored_m.basis, &fresh_m.basis).unwrap();
        let dmean: f64 = stored_m.mean.iter().zip(fresh_m.mean.iter()).map(|(a,b)| (a-b)*(a-b)).sum::<f64>();
        let mnorm: f64 = fresh_m.mean.iter().map(|v| v*v).sum::<f64>();
        println!("class {c}: stored-vs-fresh affinity {:.4}, mean shift {:.3}", aff, (dmean/mnorm).sqrt());
    }
}
