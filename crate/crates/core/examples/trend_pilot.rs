use std::path::Path;
use ugconv::config::preset;
use ugconv::workflows::{load_mnist_dir, run_train_on};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let presets: Vec<&str> = if args.len() > 1 {
        args[1..].iter().map(|s| s.as_str()).collect()
    } else {
        vec![
            "table2-row1-none",
            "table2-row4-none",
            "table2-row4-ortho-pq",
            "table2-row4-perm-pq",
            "table2-row4-hada-pq",
        ]
    };
    let data_dir = std::env::var("UGCONV_DATA_DIR").unwrap_or_else(|_| "data".into());
    let (train, test) = load_mnist_dir(Path::new(&data_dir)).unwrap();
    for name in presets {
        let mut cfg = preset(name).unwrap();
        cfg.seeds = vec![1];
        let dir = std::env::temp_dir().join("ugconv-pilot").join(name);
        let start = std::time::Instant::now();
        let summary = run_train_on(&cfg, &train, &test, &dir).unwrap();
        println!(
            "{name}: err {:.3} ({:.0}s)",
            summary.per_seed[0].final_test_error,
            start.elapsed().as_secs_f64()
        );
    }
}
