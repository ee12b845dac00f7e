use std::path::Path;
use ugconv::config::preset;
use ugconv::workflows::{load_mnist_dir, run_train_on};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let subset: usize = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let seeds: Vec<u64> = args[3].split(',').map(|x| x.parse().unwrap()).collect();
    let names: Vec<&str> = args[4].split(';').collect();
    let data_dir = std::env::var("UGCONV_DATA_DIR").unwrap_or_else(|_| "data".into());
    let (train, test) = load_mnist_dir(Path::new(&data_dir)).unwrap();
    for name in names {
        let mut cfg = preset(name).unwrap();
        cfg.seeds = seeds.clone();
        if let Some(t) = cfg.train.as_mut() {
            t.epochs = epochs;
            t.train_subset = Some(subset);
            t.eval_subset = Some(2000);
            let d1 = (epochs as f64 * 0.6) as usize;
            let d2 = (epochs as f64 * 0.85) as usize;
            t.schedule = vec![(0, 0.1), (d1, 0.01), (d2, 0.001)];
        }
        let dir = std::env::temp_dir().join("ugconv-probe").join(name);
        let start = std::time::Instant::now();
        let summary = run_train_on(&cfg, &train, &test, &dir).unwrap();
        let errs: Vec<String> =
            summary.per_seed.iter().map(|o| format!("{:.3}", o.final_test_error)).collect();
        println!(
            "{name}: mean {:.3} std {:.3} [{}] ({:.0}s)",
            summary.mean_error,
            summary.std_error,
            errs.join(", "),
            start.elapsed().as_secs_f64()
        );
    }
}
