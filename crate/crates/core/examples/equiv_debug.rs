use ugconv::data::synthetic_dataset;
use ugconv::nn::{build_mnist_toy, LayerNode, Table2RowSpec};
use ugconv::transforms::{random_permutation, TransformKind};
use ugconv::ugconv::{BlockParams, Sidedness};

fn main() {
    let seed = 1u64;
    let row_none = Table2RowSpec::row(4, TransformKind::Identity, Sidedness::None).unwrap();
    let row_perm = Table2RowSpec::row(4, TransformKind::RandomPerm, Sidedness::TwoSided).unwrap();
    let mut net_none = build_mnist_toy::<f64>(&row_none, seed).unwrap();
    let mut net_perm = build_mnist_toy::<f64>(&row_perm, seed).unwrap();

    // Locate L3 in both nets and compare weights.
    let (mut perm_seed, mut w_perm) = (0, vec![]);
    for n in &net_perm.nodes {
        if let LayerNode::UGConv(b) = n {
            perm_seed = b.p_spec.seed;
            w_perm = b.weights().data().to_vec();
        }
    }
    let mut w_none = vec![];
    for n in &net_none.nodes {
        if let LayerNode::UGConv(b) = n {
            w_none = b.weights().data().to_vec();
        }
    }
    println!("weights equal: {}", w_perm == w_none);
    let sigma = random_permutation(20, perm_seed);
    println!("sigma: {:?}", sigma.mapping());

    // Overwrite the none-net's L3 weights with the permuted values so the
    // two nets should compute identical functions.
    for n in &mut net_none.nodes {
        if let LayerNode::UGConv(b) = n {
            if let BlockParams::Grouped(g) = &mut b.params {
                // effective diag of perm net at position c = w[inv(c)]
                let inv = sigma.inverse();
                for c in 0..20 {
                    g.weights.data_mut()[c] = w_perm[inv.mapping()[c]];
                }
            }
        }
    }
    let ds = synthetic_dataset(4, 9);
    let ya = net_none.forward_eval(&ds.images).unwrap();
    let yb = net_perm.forward_eval(&ds.images).unwrap();
    let diff = ya.max_abs_diff(&yb).unwrap();
    println!("max output diff after weight relabel: {diff:.3e}");
}
