//! Runtime property suites: the invariants of every module, executable
//! outside the test harness (the `verify` workflow). Each suite lists the
//! operations it exercises; a registry check asserts the union covers the
//! whole public surface.
//!
//! Oracles used by the suites (naive dense convolution, Gaussian
//! elimination, the quadratic DFT sum) live in the private `oracle`
//! submodule and are kept independent of the production code paths they
//! check.

use std::time::Instant;

use num_complex::Complex64;

use crate::layers::{
    block_circulant_forward, circulant_expand, circulant_matvec_fft, circulant_to_ugconv,
    dense_conv_layer, expand_block_diagonal, group_conv_backward, group_conv_forward,
    CirculantLayer, ConvGeometry, GroupConvLayer,
};
use crate::rng::SeededRng;
use crate::tensor::{channel_gather, channel_scatter, Tensor};
use crate::transforms::{
    block_apply, dense_matrix_of, dft_matrix, fft, fht, fht_in_place, hadamard_matrix,
    shuffle_permutation, TransformKind, UnitarySpec,
};
use crate::ugconv::{
    effective_matrix, make_block, ugconv_backward, ugconv_forward, BlockParams, Sidedness,
};

type CheckResult = std::result::Result<(), String>;

pub struct Suite {
    pub name: &'static str,
    pub ops: &'static [&'static str],
    pub run: fn() -> CheckResult,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Every operation of the public surface; each must be exercised by at
/// least one suite.
pub const ALL_OPS: &[&str] = &[
    "make_tensor",
    "channel_gather",
    "matmul",
    "hadamard_matrix",
    "fht",
    "dft_matrix",
    "fft",
    "shuffle_permutation",
    "random_orthogonal",
    "block_apply",
    "dense_matrix_of",
    "group_conv_forward",
    "group_conv_backward",
    "expand_block_diagonal",
    "circulant_expand",
    "circulant_matvec_fft",
    "block_circulant_forward",
    "circulant_to_ugconv",
    "ugconv_forward",
    "ugconv_backward",
    "effective_matrix",
    "make_block",
    "bn_forward",
    "bn_backward",
    "relu",
    "maxpool2x2",
    "global_avg_pool",
    "softmax_xent",
    "build_mnist_toy",
    "train",
    "evaluate",
    "gradcheck",
    "count_layer",
    "count_model",
    "overhead_ratio",
    "load_mnist_idx",
    "run_verify",
    "run_train",
    "run_count",
];

pub fn suites() -> Vec<Suite> {
    vec![
        Suite {
            name: "tensor",
            ops: &["make_tensor", "channel_gather", "matmul"],
            run: tensor_suite,
        },
        Suite {
            name: "transforms",
            ops: &[
                "hadamard_matrix",
                "fht",
                "dft_matrix",
                "fft",
                "shuffle_permutation",
                "random_orthogonal",
                "block_apply",
                "dense_matrix_of",
            ],
            run: transforms_suite,
        },
        Suite {
            name: "layers",
            ops: &[
                "group_conv_forward",
                "group_conv_backward",
                "expand_block_diagonal",
                "circulant_expand",
                "circulant_matvec_fft",
                "block_circulant_forward",
                "circulant_to_ugconv",
            ],
            run: layers_suite,
        },
        Suite {
            name: "ugconv",
            ops: &["ugconv_forward", "ugconv_backward", "effective_matrix", "make_block"],
            run: ugconv_suite,
        },
        Suite { name: "cancellation", ops: &[], run: cancellation_suite },
        Suite {
            name: "nn",
            ops: &[
                "bn_forward",
                "bn_backward",
                "relu",
                "maxpool2x2",
                "global_avg_pool",
                "softmax_xent",
                "build_mnist_toy",
                "train",
                "evaluate",
                "gradcheck",
            ],
            run: nn_suite,
        },
        Suite {
            name: "costmodel",
            ops: &["count_layer", "count_model", "overhead_ratio"],
            run: costmodel_suite,
        },
        Suite {
            name: "io",
            ops: &["load_mnist_idx"],
            run: io_suite,
        },
        Suite {
            name: "workflows",
            ops: &["run_verify", "run_train", "run_count"],
            run: workflows_suite,
        },
    ]
}

/// Run suites (optionally only the named one), collecting pass/fail and
/// timing per suite.
pub fn run(filter: Option<&str>) -> (Vec<SuiteResult>, bool) {
    let mut results = Vec::new();
    let mut all_passed = true;
    let mut matched = false;
    for suite in suites() {
        if let Some(f) = filter {
            if suite.name != f {
                continue;
            }
        }
        matched = true;
        let start = Instant::now();
        let outcome = (suite.run)();
        let seconds = start.elapsed().as_secs_f64();
        let (passed, detail) = match outcome {
            Ok(()) => (true, String::from("ok")),
            Err(e) => (false, e),
        };
        all_passed &= passed;
        results.push(SuiteResult { name: suite.name, passed, detail, seconds });
    }
    if filter.is_some() && !matched {
        results.push(SuiteResult {
            name: "filter",
            passed: false,
            detail: format!("no suite named '{}'", filter.unwrap()),
            seconds: 0.0,
        });
        all_passed = false;
    }
    (results, all_passed)
}

fn fail(msg: impl Into<String>) -> CheckResult {
    Err(msg.into())
}

fn ensure(cond: bool, msg: impl Into<String>) -> CheckResult {
    if cond {
        Ok(())
    } else {
        fail(msg)
    }
}

/// Unitarity checker used by the transforms suite (and by the
/// fault-injection test that corrupts a matrix and expects this to trip).
pub fn check_unitary(m: &Tensor<Complex64>, label: &str, tol: f64) -> CheckResult {
    let prod = m
        .matmul(&m.conj_transpose().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let eye = Tensor::<Complex64>::eye(m.rows());
    let err = prod.max_abs_diff(&eye).map_err(|e| e.to_string())?;
    ensure(err < tol, format!("unitarity violated for {label}: residual {err:.3e} >= {tol:.0e}"))
}

mod oracle {
    use super::*;

    /// Reference dense convolution: direct quadruple loop, no grouping
    /// machinery shared with the production kernels.
    pub fn dense_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, m, h, wid) = (x.batch(), x.channels(), x.height(), x.width());
        let n = w.shape()[0];
        let (kh, kw) = (w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let mut y = Tensor::zeros(&[b, n, ho, wo]).unwrap();
        for bi in 0..b {
            for nc in 0..n {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for mc in 0..m {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let ih = (oh * stride + u) as isize - pad as isize;
                                    let iw = (ow * stride + v) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wid as isize {
                                        continue;
                                    }
                                    acc += x.at4(bi, mc, ih as usize, iw as usize)
                                        * w.at4(nc, mc, u, v);
                                }
                            }
                        }
                        let idx = ((bi * n + nc) * ho + oh) * wo + ow;
                        y.data_mut()[idx] = acc;
                    }
                }
            }
        }
        y
    }

    /// Matrix inverse by Gaussian elimination with partial pivoting.
    pub fn invert(m: &Tensor<f64>) -> Option<Tensor<f64>> {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> =
            (0..n).map(|r| (0..n).map(|c| m.at2(r, c)).collect()).collect();
        let mut inv: Vec<Vec<f64>> =
            (0..n).map(|r| (0..n).map(|c| if r == c { 1.0 } else { 0.0 }).collect()).collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| {
                a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
            })?;
            if a[piv][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, piv);
            inv.swap(col, piv);
            let d = a[col][col];
            for c in 0..n {
                a[col][c] /= d;
                inv[col][c] /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    for c in 0..n {
                        a[r][c] -= f * a[col][c];
                        inv[r][c] -= f * inv[col][c];
                    }
                }
            }
        }
        Tensor::new(&[n, n], inv.concat()).ok()
    }

    /// Quadratic DFT sum with the same 1/sqrt(n) normalization as `fft`.
    pub fn naive_dft(v: &[Complex64]) -> Vec<Complex64> {
        let n = v.len();
        let scale = 1.0 / (n as f64).sqrt();
        (0..n)
            .map(|j| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, &x) in v.iter().enumerate() {
                    let angle = -std::f64::consts::TAU * ((j * k) % n) as f64 / n as f64;
                    acc += Complex64::new(angle.cos(), angle.sin()) * x;
                }
                acc * scale
            })
            .collect()
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    Tensor::new(shape, rng.normal_vec(shape.iter().product())).unwrap()
}

fn tensor_suite() -> CheckResult {
    // Constructors and their error paths.
    let t = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
    ensure(t.data() == [1.0, 2.0, 3.0, 4.0], "construction contents")?;
    ensure(Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0]).is_err(), "length mismatch accepted")?;
    ensure(
        Tensor::<f64>::full(&[3], 0.0).map_err(|e| e.to_string())?.data() == [0.0; 3],
        "zero fill",
    )?;

    // Gather/scatter reconstruction.
    let x = random_tensor(&[2, 3, 4, 4], 1);
    let mut y = Tensor::<f64>::zeros(&[2, 3, 4, 4]).unwrap();
    for b in 0..2 {
        for k in 0..16 {
            let v = channel_gather(&x, b, k).map_err(|e| e.to_string())?;
            channel_scatter(&mut y, b, k, &v).map_err(|e| e.to_string())?;
        }
    }
    ensure(x == y, "gather/scatter reconstruction")?;

    // Identity, hand value, associativity, inverse.
    let a = random_tensor(&[8, 8], 2);
    let eye = Tensor::<f64>::eye(8);
    ensure(
        eye.matmul(&a).map_err(|e| e.to_string())? == a,
        "identity matmul",
    )?;
    let b = random_tensor(&[8, 8], 3);
    let c = random_tensor(&[8, 8], 4);
    let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
    let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
    let scale = left.max_modulus().max(1.0);
    ensure(
        left.max_abs_diff(&right).unwrap() / scale < 1e-9,
        "matmul associativity beyond 1e-9",
    )?;

    // A well-conditioned random matrix times its elimination-oracle
    // inverse is the identity.
    let mut wc = random_tensor(&[6, 6], 5);
    for i in 0..6 {
        let v = wc.at2(i, i) + 6.0;
        wc.set2(i, i, v);
    }
    let inv = oracle::invert(&wc).ok_or("singular fixture")?;
    let prod = wc.matmul(&inv).unwrap();
    ensure(
        prod.max_abs_diff(&Tensor::eye(6)).unwrap() < 1e-9,
        "A * inv(A) residual too large",
    )?;
    Ok(())
}

fn transforms_suite() -> CheckResult {
    let mut rng = SeededRng::new(11);

    // Unitarity and inner-product preservation for every kind over the
    // block-size grid.
    for d in [1usize, 2, 4, 8, 16] {
        for channels in [d, 2 * d, 4 * d] {
            let specs = vec![
                UnitarySpec::identity(channels),
                UnitarySpec::shuffle(channels, d),
                UnitarySpec::hadamard(channels, d, false),
                UnitarySpec::fourier(channels, d, false),
                UnitarySpec::fourier(channels, d, true),
                UnitarySpec::random_ortho(channels, d, 5, false),
                UnitarySpec::random_perm(channels, 6, false),
            ];
            for spec in specs {
                let m = dense_matrix_of::<Complex64>(&spec).map_err(|e| e.to_string())?;
                check_unitary(&m, &format!("{:?} d={d} c={channels}", spec.kind), 1e-10)?;

                let x: Vec<Complex64> =
                    (0..channels).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
                let y: Vec<Complex64> =
                    (0..channels).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
                let xt = m.matmul(&Tensor::new(&[channels, 1], x.clone()).unwrap()).unwrap();
                let yt = m.matmul(&Tensor::new(&[channels, 1], y.clone()).unwrap()).unwrap();
                let dot = |a: &[Complex64], b: &[Complex64]| {
                    a.iter().zip(b).map(|(p, q)| p.conj() * q).sum::<Complex64>()
                };
                let before = dot(&x, &y);
                let after = dot(xt.data(), yt.data());
                ensure(
                    (before - after).norm() <= 1e-10 * (1.0 + before.norm()),
                    format!("inner product drifts for {:?} d={d} c={channels}", spec.kind),
                )?;
            }
        }
    }

    // Fast Hadamard equals the dense matrix product, and the butterfly
    // performs exactly n*log2(n) additions.
    let mut n = 1usize;
    while n <= 1024 {
        let v: Vec<f64> = rng.normal_vec(n);
        let fast = fht(&v).map_err(|e| e.to_string())?;
        let dense = hadamard_matrix::<f64>(n)
            .unwrap()
            .matmul(&Tensor::new(&[n, 1], v.clone()).unwrap())
            .unwrap();
        for i in 0..n {
            if (fast[i] - dense.data()[i]).abs() > 1e-12 {
                return fail(format!("fht deviates from dense product at n={n}"));
            }
        }
        let mut buf = v.clone();
        let adds = fht_in_place(&mut buf).unwrap();
        let expect = if n > 1 { n * n.ilog2() as usize } else { 0 };
        ensure(adds == expect, format!("fht add count {adds} != {expect} at n={n}"))?;
        n *= 2;
    }

    // Fast Fourier equals the quadratic DFT sum (including fallback
    // lengths) and dft_matrix agrees.
    for n in [1usize, 2, 4, 8, 16, 32, 64, 128, 256, 6, 10] {
        let v: Vec<Complex64> =
            (0..n).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
        let fast = fft(&v).map_err(|e| e.to_string())?;
        let slow = oracle::naive_dft(&v);
        for i in 0..n {
            if (fast[i] - slow[i]).norm() > 1e-10 {
                return fail(format!("fft deviates from DFT sum at n={n}"));
            }
        }
        let m = dft_matrix::<f64>(n).unwrap();
        let dense = m.matmul(&Tensor::new(&[n, 1], v).unwrap()).unwrap();
        for i in 0..n {
            if (fast[i] - dense.data()[i]).norm() > 1e-10 {
                return fail(format!("fft deviates from dft_matrix at n={n}"));
            }
        }
    }

    // Round-robin shuffles compose with their divisor-pair partners to
    // the identity.
    for n in 1..=64usize {
        for g in (1..=n).filter(|g| n % g == 0) {
            let a = shuffle_permutation(n, g).unwrap();
            let b = shuffle_permutation(n, n / g).unwrap();
            ensure(b.compose(&a).is_identity(), format!("shuffle pair n={n} g={g}"))?;
        }
    }

    // Applying a block transform and then its block inverse is the
    // identity map on activations.
    for kind in [TransformKind::Fourier, TransformKind::Hadamard, TransformKind::RandomOrtho] {
        let spec = match kind {
            TransformKind::Fourier => UnitarySpec::fourier(8, 4, false),
            TransformKind::Hadamard => UnitarySpec::hadamard(8, 4, false),
            _ => UnitarySpec::random_ortho(8, 4, 9, false),
        };
        let x = random_tensor(&[2, 8, 3, 3], 13).to_complex();
        let y = block_apply(&spec, &x).map_err(|e| e.to_string())?;
        let back = block_apply(&spec.block_inverse(), &y).map_err(|e| e.to_string())?;
        ensure(
            back.max_abs_diff(&x).unwrap() < 1e-10,
            format!("{kind:?} round trip drifts"),
        )?;
    }

    // dense_matrix_of is consistent with block_apply on random pixels.
    for spec in [
        UnitarySpec::identity(6),
        UnitarySpec::shuffle(6, 3),
        UnitarySpec::hadamard(8, 4, false),
        UnitarySpec::random_ortho(8, 2, 17, true),
        UnitarySpec::random_perm(5, 19, true),
    ] {
        let c = spec.channels;
        let v: Vec<f64> = rng.normal_vec(c);
        let x = Tensor::new(&[1, c, 1, 1], v.clone()).unwrap();
        let applied = block_apply(&spec, &x).map_err(|e| e.to_string())?;
        let m = dense_matrix_of::<f64>(&spec).unwrap();
        let dense = m.matmul(&Tensor::new(&[c, 1], v).unwrap()).unwrap();
        for i in 0..c {
            if (applied.data()[i] - dense.data()[i]).abs() > 1e-12 {
                return fail(format!("dense_matrix_of mismatch for {:?}", spec.kind));
            }
        }
    }
    Ok(())
}

fn layers_suite() -> CheckResult {
    let mut seed = 100u64;

    // Grouped forward equals the dense oracle over the expanded
    // block-diagonal weights, across the grid.
    for m in [4usize, 8, 16] {
        for n in [4usize, 8, 16] {
            for g in (1..=m.min(n)).filter(|g| m % g == 0 && n % g == 0) {
                for k in [1usize, 3] {
                    seed += 1;
                    let geo = ConvGeometry::new(m, n, g, (k, k), 1, k / 2).unwrap();
                    let mut rng = SeededRng::new(seed);
                    let layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
                    let x = random_tensor(&[2, m, 5, 5], seed + 1);
                    let grouped = group_conv_forward(&x, &layer).map_err(|e| e.to_string())?;
                    let dense = oracle::dense_conv(&x, &expand_block_diagonal(&layer), 1, k / 2);
                    let err = grouped.max_abs_diff(&dense).unwrap();
                    ensure(
                        err < 1e-10,
                        format!("group conv vs dense m={m} n={n} g={g} k={k}: {err:.2e}"),
                    )?;
                    ensure(
                        layer.weights.numel() == m * n * k * k / g,
                        "parameter count formula",
                    )?;
                }
            }
        }
    }

    // Circulant layers: storage, fast path, matvec kernel, decomposition.
    for m in [4usize, 8, 16] {
        for n in [4usize, 8, 16] {
            for d in (1..=m.min(n)).filter(|d| m % d == 0 && n % d == 0) {
                for k in [1usize, 3] {
                    seed += 1;
                    let mut rng = SeededRng::new(seed);
                    let layer =
                        CirculantLayer::<f64>::kaiming(d, m, n, (k, k), 1, k / 2, &mut rng)
                            .unwrap();
                    ensure(
                        layer.param_count() == m * n * k * k / d,
                        "circulant storage count",
                    )?;
                    let x = random_tensor(&[2, m, 4, 4], seed + 2);
                    let slow =
                        block_circulant_forward(&x, &layer, false).map_err(|e| e.to_string())?;
                    if d.is_power_of_two() {
                        let fast =
                            block_circulant_forward(&x, &layer, true).map_err(|e| e.to_string())?;
                        let err = slow.max_abs_diff(&fast).unwrap();
                        ensure(
                            err < 1e-9,
                            format!("circulant fast vs slow m={m} n={n} d={d} k={k}: {err:.2e}"),
                        )?;
                    }

                    // Recomposing the decomposition's dense effective
                    // matrix reproduces the expansion.
                    if k == 1 {
                        let (p, gconv, q) = circulant_to_ugconv(&layer).unwrap();
                        let pm = dense_matrix_of::<Complex64>(&p).unwrap();
                        let qm = dense_matrix_of::<Complex64>(&q).unwrap();
                        let mut wmat = Tensor::<Complex64>::zeros(&[n, m]).unwrap();
                        let wdense = expand_block_diagonal(&gconv);
                        for r in 0..n {
                            for c in 0..m {
                                wmat.set2(r, c, wdense.at4(r, c, 0, 0));
                            }
                        }
                        let eff = qm.matmul(&wmat).unwrap().matmul(&pm).unwrap();
                        let expanded = circulant_expand(&layer);
                        for r in 0..n {
                            for c in 0..m {
                                let want = Complex64::new(expanded.at4(r, c, 0, 0), 0.0);
                                if (eff.at2(r, c) - want).norm() > 1e-9 {
                                    return fail(format!(
                                        "decomposition recomposition drifts at d={d}"
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // FFT matvec kernel against the expansion.
    let mut rng = SeededRng::new(7777);
    for d in [2usize, 4, 8, 16, 5] {
        let col: Vec<f64> = rng.normal_vec(d);
        let x: Vec<f64> = rng.normal_vec(d);
        let fast = circulant_matvec_fft(&col, &x).map_err(|e| e.to_string())?;
        for r in 0..d {
            let want: f64 = (0..d).map(|c| col[(r + d - c) % d] * x[c]).sum();
            if (fast[r] - want).abs() > 1e-10 {
                return fail(format!("circulant matvec kernel drifts at d={d}"));
            }
        }
    }

    // Analytic gradients match central finite differences.
    let geo = ConvGeometry::new(6, 6, 3, (3, 3), 1, 1).unwrap();
    let mut rng = SeededRng::new(8888);
    let layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
    let x = random_tensor(&[1, 6, 4, 4], 8889);
    let probe = {
        let y = group_conv_forward(&x, &layer).unwrap();
        random_tensor(&y.shape().to_vec(), 8890)
    };
    let grads = group_conv_backward(&probe, &x, &layer).unwrap();
    let loss = |l: &GroupConvLayer<f64>, xin: &Tensor<f64>| -> f64 {
        group_conv_forward(xin, l)
            .unwrap()
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let h = 1e-5;
    for idx in (0..layer.weights.numel()).step_by(3) {
        let mut lp = layer.clone();
        lp.weights.data_mut()[idx] += h;
        let mut lm = layer.clone();
        lm.weights.data_mut()[idx] -= h;
        let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        let an = grads.dw.data()[idx];
        if (fd - an).abs() > 1e-4 * (1.0 + an.abs()) {
            return fail(format!("conv weight gradient fd {fd} vs analytic {an}"));
        }
    }
    Ok(())
}

fn ugconv_suite() -> CheckResult {
    // Two-sided Fourier blocks equal the block-circulant layer they
    // parametrize, across the grid.
    let mut seed = 500u64;
    for m in [4usize, 8, 16] {
        for n in [4usize, 8, 16] {
            for d in (2..=m.min(n)).filter(|d| m % d == 0 && n % d == 0 && d.is_power_of_two()) {
                for k in [1usize, 3] {
                    seed += 1;
                    let geo = ConvGeometry::new(m, n, d, (k, k), 1, k / 2).unwrap();
                    let block =
                        make_block::<f64>(TransformKind::Fourier, Sidedness::TwoSided, geo, None, seed)
                            .map_err(|e| e.to_string())?;
                    let BlockParams::FourierColumns(circ) = &block.params else {
                        return fail("fourier block missing circulant parametrization");
                    };
                    let x = random_tensor(&[2, m, 4, 4], seed + 1);
                    let via_block = ugconv_forward(&x, &block).map_err(|e| e.to_string())?;
                    for fast in [false, true] {
                        let direct = block_circulant_forward(&x, circ, fast).unwrap();
                        let err = via_block.max_abs_diff(&direct).unwrap();
                        ensure(
                            err < 1e-9,
                            format!("fourier ugconv vs circulant m={m} n={n} d={d} k={k}: {err:.2e}"),
                        )?;
                    }
                }
            }
        }
    }

    // Effective-matrix structure: circulant pattern for Fourier, the
    // xor-index pattern for Hadamard, exact at the equality level.
    for d in [2usize, 4, 8] {
        for mult in [1usize, 2] {
            let c = d * mult;
            let geo = ConvGeometry::new(c, c, d, (1, 1), 1, 0).unwrap();
            seed += 1;
            let fourier =
                make_block::<f64>(TransformKind::Fourier, Sidedness::TwoSided, geo, None, seed)
                    .unwrap();
            let e = effective_matrix(&fourier, (0, 0)).map_err(|e| e.to_string())?;
            let sets = c / d;
            for bi in 0..sets {
                for bj in 0..sets {
                    for r in 0..d {
                        for col in 0..d {
                            let got = e.at2(bi + r * sets, bj + col * sets);
                            let want = e.at2(bi + ((r + d - col) % d) * sets, bj);
                            if (got - want).abs() > 1e-10 {
                                return fail(format!(
                                    "fourier effective matrix not circulant at d={d} c={c}"
                                ));
                            }
                        }
                    }
                }
            }

            let hadamard =
                make_block::<f64>(TransformKind::Hadamard, Sidedness::TwoSided, geo, None, seed)
                    .unwrap();
            let e = effective_matrix(&hadamard, (0, 0)).map_err(|e| e.to_string())?;
            for bi in 0..sets {
                for bj in 0..sets {
                    for r in 0..d {
                        for col in 0..d {
                            let got = e.at2(bi + r * sets, bj + col * sets);
                            let want = e.at2(bi, bj + (r ^ col) * sets);
                            if (got - want).abs() > 1e-10 {
                                return fail(format!(
                                    "hadamard effective matrix pattern broken at d={d} c={c}"
                                ));
                            }
                        }
                    }
                }
            }
        }
    }

    // Construction rejections.
    let geo = ConvGeometry::new(8, 8, 4, (1, 1), 1, 0).unwrap();
    ensure(
        make_block::<f64>(TransformKind::Fourier, Sidedness::QOnly, geo, None, 1).is_err(),
        "one-sided fourier must be rejected",
    )?;
    let geo12 = ConvGeometry::new(12, 12, 12, (1, 1), 1, 0).unwrap();
    ensure(
        make_block::<f64>(TransformKind::Hadamard, Sidedness::TwoSided, geo12, None, 1).is_err(),
        "non-power-of-two hadamard must be rejected",
    )?;

    // Unitary backprop: transform-only blocks preserve gradient norms;
    // finite differences agree for a representative block.
    let geo = ConvGeometry::new(8, 8, 8, (1, 1), 1, 0).unwrap();
    let mut block =
        make_block::<f64>(TransformKind::RandomOrtho, Sidedness::TwoSided, geo, None, 901).unwrap();
    if let BlockParams::Grouped(g) = &mut block.params {
        *g = GroupConvLayer::identity(geo).unwrap();
    }
    let dy = random_tensor(&[2, 8, 3, 3], 903);
    let x = random_tensor(&[2, 8, 3, 3], 904);
    let grads = ugconv_backward(&dy, &x, &block).unwrap();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    ensure(
        (norm(dy.data()) - norm(grads.dx.data())).abs() < 1e-10,
        "gradient norm not preserved through transform-only block",
    )?;

    let geo = ConvGeometry::new(4, 4, 4, (1, 1), 1, 0).unwrap();
    let block =
        make_block::<f64>(TransformKind::Fourier, Sidedness::TwoSided, geo, None, 905).unwrap();
    let x = random_tensor(&[1, 4, 2, 2], 906);
    let probe = random_tensor(&[1, 4, 2, 2], 907);
    let grads = ugconv_backward(&probe, &x, &block).unwrap();
    let loss = |b: &crate::ugconv::UGConvBlock<f64>, xin: &Tensor<f64>| -> f64 {
        ugconv_forward(xin, b)
            .unwrap()
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, p)| a * p)
            .sum()
    };
    let h = 1e-5;
    for idx in 0..block.weights().numel() {
        let mut bp = block.clone();
        bp.weights_mut().data_mut()[idx] += h;
        let mut bm = block.clone();
        bm.weights_mut().data_mut()[idx] -= h;
        let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
        let an = grads.dw.data()[idx];
        if (fd - an).abs() > 1e-4 * (1.0 + an.abs()) {
            return fail(format!("fourier block gradient fd {fd} vs analytic {an}"));
        }
    }
    Ok(())
}

fn cancellation_suite() -> CheckResult {
    // Two stacked two-sided Hadamard blocks with identity weights and no
    // nonlinearity compose to the identity...
    let geo = ConvGeometry::new(8, 8, 8, (1, 1), 1, 0).unwrap();
    let mut blocks = vec![];
    for seed in [71, 72] {
        let mut b =
            make_block::<f64>(TransformKind::Hadamard, Sidedness::TwoSided, geo, None, seed)
                .unwrap();
        if let BlockParams::Grouped(g) = &mut b.params {
            *g = GroupConvLayer::identity(geo).unwrap();
        }
        blocks.push(b);
    }
    let x = random_tensor(&[1, 8, 2, 2], 73);
    let mid = ugconv_forward(&x, &blocks[0]).unwrap();
    let out = ugconv_forward(&mid, &blocks[1]).unwrap();
    let err = out.max_abs_diff(&x).unwrap();
    ensure(err < 1e-10, format!("stacked blocks do not cancel: {err:.2e}"))?;

    // ...and a pointwise nonlinearity between them breaks the
    // cancellation on inputs with negative transformed components.
    let clipped = mid.map(|v| if v > 0.0 { v } else { 0.0 });
    ensure(
        clipped.max_abs_diff(&mid).unwrap() > 1e-6,
        "fixture never hits the nonlinearity",
    )?;
    let out_relu = ugconv_forward(&clipped, &blocks[1]).unwrap();
    ensure(
        out_relu.max_abs_diff(&x).unwrap() > 1e-6,
        "nonlinearity unexpectedly preserved the identity composition",
    )?;

    // Permutations, by contrast, commute with channelwise scaling.
    let perm = shuffle_permutation(8, 4).unwrap();
    let scale: Vec<f64> = (0..8).map(|i| 0.5 - 0.2 * i as f64).collect();
    let mut rng = SeededRng::new(74);
    let v: Vec<f64> = rng.normal_vec(8);
    let a: Vec<f64> =
        perm.apply(&v).iter().enumerate().map(|(i, x)| x * scale[perm.mapping()[i]]).collect();
    let scaled: Vec<f64> = v.iter().zip(&scale).map(|(x, s)| x * s).collect();
    let b = perm.apply(&scaled);
    ensure(a == b, "shuffle does not commute with channelwise scaling")?;
    Ok(())
}

fn nn_suite() -> CheckResult {
    use crate::data::synthetic_dataset;
    use crate::nn::*;

    // Example values of the pointwise pieces.
    let x = Tensor::new(&[1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
    let (y, _) = relu_forward(&x);
    ensure(y.data() == [0.0, 2.0], "relu example")?;

    let xc = Tensor::<f64>::full(&[1, 2, 3, 3], 0.4).unwrap();
    let g = global_avg_pool_forward(&xc).unwrap();
    ensure(g.data().iter().all(|v| (v - 0.4).abs() < 1e-12), "global pool on constant map")?;

    let (p, _) = maxpool2x2_forward(&Tensor::new(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap())
        .unwrap();
    ensure(p.data() == [4.0], "max pool example")?;

    let logits = Tensor::<f64>::zeros(&[2, 10, 1, 1]).unwrap();
    let (loss, _) = softmax_xent(&logits, &[3, 7]).unwrap();
    ensure((loss - 10f64.ln()).abs() < 1e-12, "uniform-logit loss is ln K")?;

    // Batch norm: standardized batch passes through; backward matches
    // finite differences on a small instance.
    let mut rng = SeededRng::new(2001);
    let xb = Tensor::new(&[4, 2, 2, 2], rng.normal_vec(32)).unwrap();
    let probe = Tensor::new(&[4, 2, 2, 2], rng.normal_vec(32)).unwrap();
    let st = {
        let mut s = BatchNormState::<f64>::new(2);
        s.gamma = vec![1.3, 0.7];
        s.beta = vec![-0.1, 0.2];
        s
    };
    let (yb, cache) = bn_forward(&xb, &mut st.clone(), true, false).unwrap();
    let dyb = probe.reshape(&yb.shape().to_vec()).unwrap();
    let (dxb, _, _) = bn_backward(&dyb, &st, cache.as_ref().unwrap()).unwrap();
    let lossf = |xin: &Tensor<f64>| {
        let (y, _) = bn_forward(xin, &mut st.clone(), true, false).unwrap();
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    for idx in (0..32).step_by(5) {
        let mut xp = xb.clone();
        xp.data_mut()[idx] += 1e-5;
        let mut xm = xb.clone();
        xm.data_mut()[idx] -= 1e-5;
        let fd = (lossf(&xp) - lossf(&xm)) / 2e-5;
        if (fd - dxb.data()[idx]).abs() > 1e-4 * (1.0 + dxb.data()[idx].abs()) {
            return fail("batch norm input gradient drifts");
        }
    }

    // Gradient checks across every transform kind on the full toy
    // network, plus norm preservation through the transform-only block.
    let variants = [
        (TransformKind::Identity, Sidedness::None),
        (TransformKind::Shuffle, Sidedness::QOnly),
        (TransformKind::RandomOrtho, Sidedness::POnly),
        (TransformKind::RandomOrtho, Sidedness::TwoSided),
        (TransformKind::RandomPerm, Sidedness::TwoSided),
        (TransformKind::Hadamard, Sidedness::TwoSided),
        (TransformKind::Fourier, Sidedness::TwoSided),
    ];
    let ds = synthetic_dataset(2, 2002);
    for (kind, sided) in variants {
        let row = Table2RowSpec::row(4, kind, sided).map_err(|e| e.to_string())?;
        let mut net = build_mnist_toy::<f64>(&row, 2003).map_err(|e| e.to_string())?;
        let report = gradcheck(&mut net, &ds.images, &ds.labels, 1e-5).map_err(|e| e.to_string())?;
        ensure(
            report.max_rel_err < 1e-4,
            format!("gradcheck {kind:?}/{sided:?}: max rel err {:.2e}", report.max_rel_err),
        )?;
        ensure(
            report.checked + report.skipped_kink == net.param_count(),
            "gradcheck coverage accounting",
        )?;
    }

    // Determinism: identical seeds give bitwise-identical histories.
    let ds = synthetic_dataset(32, 2005);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        schedule: vec![(0, 0.1)],
        momentum: 0.9,
        weight_decay: 1e-4,
        seed: 2006,
    };
    let row = Table2RowSpec::row(1, TransformKind::Identity, Sidedness::None).unwrap();
    let mut histories = vec![];
    for _ in 0..2 {
        let mut net = build_mnist_toy::<f64>(&row, 2007).unwrap();
        histories.push(train(&mut net, &ds, &ds, &cfg).map_err(|e| e.to_string())?);
    }
    ensure(
        histories[0].epochs[0].train_loss.to_bits() == histories[1].epochs[0].train_loss.to_bits(),
        "training is not bitwise deterministic",
    )?;

    // Chance-level evaluation for an untrained net on balanced labels.
    let mut net = build_mnist_toy::<f64>(&row, 2008).unwrap();
    let err = evaluate(&mut net, &ds).map_err(|e| e.to_string())?;
    ensure((0.0..=1.0).contains(&err), "error rate out of range")?;
    Ok(())
}

fn costmodel_suite() -> CheckResult {
    use crate::archs;
    use crate::costmodel::*;

    // Formula spot checks.
    let state = PropState { channels: 64, h: 56, w: 56 };
    let desc = LayerDesc::Conv {
        name: "pw".into(),
        in_channels: 64,
        out_channels: 64,
        groups: 1,
        kernel: (1, 1),
        stride: 1,
        pad: 0,
        transform: None,
    };
    let (e, _) = count_layer(&desc, state).map_err(|e| e.to_string())?;
    let e = e.unwrap();
    ensure(e.params == 4096 && e.fpmuls == 4096 * 3136, "dense 1x1 formula")?;

    // Built-in totals and conventions.
    let r8 = count_model(&archs::builtin("resnet18-g8").unwrap(), (224, 224)).unwrap();
    ensure(r8.totals().params == 1_916_096, "resnet18-g8 params")?;
    let ratio = overhead_ratio(&r8);
    ensure(ratio > 0.0, "overhead ratio positive")?;

    // Doubling the groups halves the weight multiplies, exactly.
    let mk = |g: usize| LayerDesc::Conv {
        name: "c".into(),
        in_channels: 32,
        out_channels: 32,
        groups: g,
        kernel: (3, 3),
        stride: 1,
        pad: 1,
        transform: None,
    };
    let st = PropState { channels: 32, h: 10, w: 10 };
    let m2 = count_layer(&mk(2), st).unwrap().0.unwrap().fpmuls;
    let m4 = count_layer(&mk(4), st).unwrap().0.unwrap().fpmuls;
    ensure(m2 == 2 * m4, "fpmuls do not scale as 1/G")?;

    // Hadamard transforms add zero multiplies anywhere.
    let note = TransformNote {
        kind: TransformKind::Hadamard,
        block_len: 8,
        sidedness: Sidedness::TwoSided,
    };
    let with_t = LayerDesc::Conv {
        name: "c".into(),
        in_channels: 32,
        out_channels: 32,
        groups: 8,
        kernel: (1, 1),
        stride: 1,
        pad: 0,
        transform: Some(note),
    };
    let a = count_layer(&with_t, st).unwrap().0.unwrap();
    let b = count_layer(&mk(8), st).unwrap().0.unwrap();
    // (kernel sizes differ between mk and with_t; compare muls per param)
    ensure(a.fpmuls == 32 * 32 / 8 * 100, "hadamard added multiplies")?;
    ensure(b.transform_adds == 0, "untransformed layer counts transform adds")?;

    // Model formula equals the instrumented kernel count.
    for (c, d) in [(64usize, 8usize), (32, 4)] {
        let note =
            TransformNote { kind: TransformKind::Hadamard, block_len: d, sidedness: Sidedness::QOnly };
        let desc = LayerDesc::Conv {
            name: "t".into(),
            in_channels: c,
            out_channels: c,
            groups: d,
            kernel: (1, 1),
            stride: 1,
            pad: 0,
            transform: Some(note),
        };
        let (entry, _) =
            count_layer(&desc, PropState { channels: c, h: 1, w: 1 }).unwrap();
        let modeled = entry.unwrap().transform_adds;
        let mut measured = 0usize;
        for _ in 0..c / d {
            let mut v = vec![1.0f64; d];
            measured += fht_in_place(&mut v).unwrap();
        }
        ensure(measured as u64 == modeled, "instrumented fht count != model")?;
    }

    // Parameter counts agree with instantiated weight arrays.
    use crate::nn::{build_mnist_toy, Table2RowSpec};
    let spec = Table2RowSpec::row(4, TransformKind::RandomOrtho, Sidedness::TwoSided).unwrap();
    let net = build_mnist_toy::<f64>(&spec, 1).unwrap();
    let toy = count_model(&archs::mnist_toy_descriptor(&spec), (28, 28)).unwrap();
    ensure(
        toy.totals().params as usize == net.weight_count(),
        "toy descriptor params differ from instantiated weights",
    )?;
    Ok(())
}

fn io_suite() -> CheckResult {
    use crate::data::{load_mnist_idx, synthetic_dataset, write_idx};

    let dir = std::env::temp_dir().join(format!("ugconv-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let ds = synthetic_dataset(9, 42);
    let ip = dir.join("imgs");
    let lp = dir.join("labs");
    write_idx(&ds, &ip, &lp).map_err(|e| e.to_string())?;
    let back = load_mnist_idx(&ip, &lp).map_err(|e| e.to_string())?;
    ensure(back.len() == 9 && back.labels == ds.labels, "idx round trip")?;

    // Magic rejection.
    let mut bytes = std::fs::read(&ip).unwrap();
    bytes[3] = 2;
    let bad = dir.join("bad");
    std::fs::write(&bad, &bytes).unwrap();
    ensure(load_mnist_idx(&bad, &lp).is_err(), "bad magic accepted")?;

    // Checkpoint round trip.
    use crate::checkpoint::{load_network, save_network};
    use crate::nn::{build_mnist_toy, Table2RowSpec};
    let row = Table2RowSpec::row(4, TransformKind::Fourier, Sidedness::TwoSided).unwrap();
    let net = build_mnist_toy::<f64>(&row, 77).unwrap();
    let cp = dir.join("net.ugck");
    save_network(&net, &cp).map_err(|e| e.to_string())?;
    let loaded = load_network(&cp).map_err(|e| e.to_string())?;
    ensure(loaded.param_count() == net.param_count(), "checkpoint round trip")?;

    // Config round trip through canonical JSON.
    let cfg = crate::config::preset("table2-row1-none").map_err(|e| e.to_string())?;
    let json = cfg.to_json().unwrap();
    let back = crate::config::ExperimentConfig::parse(&json).map_err(|e| e.to_string())?;
    ensure(back == cfg, "config round trip")?;

    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}

fn workflows_suite() -> CheckResult {
    use crate::workflows;

    // Counting workflow over a built-in architecture.
    let report = workflows::run_count(workflows::ArchSource::Builtin("resnet18-g8"), 224, None)
        .map_err(|e| e.to_string())?;
    ensure(report.totals().params == 1_916_096, "count workflow totals")?;

    // A miniature training workflow on synthetic data (writes CSVs and a
    // checkpoint into a scratch directory).
    let dir = std::env::temp_dir().join(format!("ugconv-wf-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut cfg = crate::config::preset("table2-row1-none").map_err(|e| e.to_string())?;
    cfg.seeds = vec![1];
    if let Some(t) = cfg.train.as_mut() {
        t.epochs = 1;
        t.train_subset = Some(32);
        t.eval_subset = Some(32);
        t.batch_size = 16;
    }
    let summary = workflows::run_train_on(
        &cfg,
        &crate::data::synthetic_dataset(64, 9),
        &crate::data::synthetic_dataset(64, 10),
        &dir,
    )
    .map_err(|e| e.to_string())?;
    ensure(summary.per_seed.len() == 1, "one seed, one outcome")?;
    ensure(dir.join("seed1.csv").exists(), "per-seed csv missing")?;
    ensure(dir.join("seed1.ugck").exists(), "checkpoint missing")?;
    ensure(dir.join("summary.csv").exists(), "aggregate csv missing")?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
