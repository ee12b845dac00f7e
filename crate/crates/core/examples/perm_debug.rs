use ugconv::layers::ConvGeometry;
use ugconv::transforms::TransformKind;
use ugconv::ugconv::{effective_matrix, make_block, Sidedness};

fn main() {
    let geo = ConvGeometry::new(20, 20, 20, (1, 1), 1, 0).unwrap();
    let block =
        make_block::<f64>(TransformKind::RandomPerm, Sidedness::TwoSided, geo, None, 42).unwrap();
    let e = effective_matrix(&block, (0, 0)).unwrap();
    let mut off_diag: f64 = 0.0;
    let mut on_diag: f64 = 0.0;
    for r in 0..20 {
        for c in 0..20 {
            if r == c {
                on_diag += e.at2(r, c).abs();
            } else {
                off_diag = off_diag.max(e.at2(r, c).abs());
            }
        }
    }
    println!("p_spec: {:?}", block.p_spec);
    println!("q_spec: {:?}", block.q_spec);
    println!("diag mass {on_diag:.3}, max off-diag {off_diag:.3e}");
}
