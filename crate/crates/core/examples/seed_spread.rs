use std::path::Path;
use ugconv::config::preset;
use ugconv::workflows::{load_mnist_dir, run_train_on};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(|s| s.as_str()).unwrap_or("table2-row4-none");
    let seeds: Vec<u64> = args.get(2).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![1, 2, 3]);
    let data_dir = std::env::var("UGCONV_DATA_DIR").unwrap_or_else(|_| "data".into());
    let (train, test) = load_mnist_dir(Path::new(&data_dir)).unwrap();
    let mut cfg = preset(name).unwrap();
    cfg.seeds = seeds;
    let dir = std::env::temp_dir().join("ugconv-spread").join(name);
    let summary = run_train_on(&cfg, &train, &test, &dir).unwrap();
    for o in &summary.per_seed {
        println!("{name} seed {}: {:.3}", o.seed, o.final_test_error);
    }
    println!("{name}: mean {:.3} std {:.3}", summary.mean_error, summary.std_error);
}
