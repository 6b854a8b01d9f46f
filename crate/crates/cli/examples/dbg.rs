use ildr_core::trainer::encode_features;
fn main() {
    let a = ildr_cli::checkpoint::load(std::path::Path::new("/tmp/runs/dr_fx12/checkpoint_task0.ckpt")).unwrap();
    let b = ildr_cli::checkpoint::load(std::path::Path::new("/tmp/runs/dr_fx12/checkpoint.ckpt")).unwrap();
    let (train, _) = b.config.load_dataset().unwrap();
    let cfg = b.config.train_config();
    // weight displacement
    let ta = a.encoder.trainable_tensors();
    let tb = b.encoder.trainable_tensors();
    for (i, (x, y)) in ta.iter().zip(tb.iter()).enumerate() {
        let d: f64 = x.iter().zip(y.iter()).map(|(p,q)| (p-q)*(p-q)).sum::<f64>().sqrt();
        let n: f64 = x.iter().map(|p| p*p).sum::<f64>().sqrt();
        println!("enc tensor {i}: rel weight change {:.4}", d/n);
    }
    // feature displacement for class 0
    let x0 = train.class_block(0);
    let za = encode_features(&a.encoder, &x0, &cfg.rate).unwrap();
    let zb = encode_features(&b.encoder, &x0, &cfg.rate).unwrap();
    let mut d = za.clone(); d.axpy(-1.0, &zb);
    println!("class0 feature displacement rel {:.4}", d.frobenius_norm()/za.frobenius_norm());
    // mean norms
    let ma = za.column_mean(); let mb = zb.column_mean();
    let na: f64 = ma.iter().map(|v| v*v).sum::<f64>().sqrt();
    let nb: f64 = mb.iter().map(|v| v*v).sum::<f64>().sqrt();
    let dm: f64 = ma.iter().zip(mb.iter()).map(|(p,q)| (p-q)*(p-q)).sum::<f64>().sqrt();
    println!("class0 mean norms: task0 {:.3} final {:.3}, shift {:.3}", na, nb, dm);
}
