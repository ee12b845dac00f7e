use std::time::Instant;
use ugconv::config::preset;
use ugconv::data::synthetic_dataset;
use ugconv::workflows::run_train_on;

fn main() {
    let train = synthetic_dataset(8000, 1);
    let test = synthetic_dataset(2000, 2);
    let mut cfg = preset("table2-row4-ortho-pq").unwrap();
    cfg.seeds = vec![1];
    if let Some(t) = cfg.train.as_mut() {
        t.epochs = 2;
        t.train_subset = Some(8000);
        t.eval_subset = Some(2000);
    }
    let dir = std::env::temp_dir().join("ugconv-bench");
    let start = Instant::now();
    let summary = run_train_on(&cfg, &train, &test, &dir).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("2 epochs on 8000 samples: {secs:.1}s ({:.2}s/epoch incl eval)", secs / 2.0);
    println!("final err {:.3}", summary.per_seed[0].final_test_error);
}
