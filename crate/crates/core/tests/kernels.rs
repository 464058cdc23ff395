//! Layer forward passes against direct loop implementations.

use proptest::prelude::*;
use retina_forge::nn::{Mode, ParamStore, Shape, Tape, Tensor};

fn tensor(shape: Shape, seed: &[f32]) -> Tensor {
    let data = (0..shape.numel()).map(|i| seed[i % seed.len()] * (1.0 + (i % 7) as f32 * 0.1)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let r = (ws.h / 2) as isize;
    let mut out = Vec::new();
    for n in 0..xs.n {
        for o in 0..ws.n {
            for i in 0..xs.h {
                for j in 0..xs.w {
                    let mut acc = f64::from(b.data()[o]);
                    for c in 0..xs.c {
                        for a in 0..ws.h {
                            for bb in 0..ws.w {
                                let (y, z) = (i as isize + a as isize - r, j as isize + bb as isize - r);
                                if y >= 0 && z >= 0 && (y as usize) < xs.h && (z as usize) < xs.w {
                                    acc += f64::from(x.at(n, c, y as usize, z as usize)) * f64::from(w.at(o, c, a, bb));
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn direct_tconv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let mut out = vec![0.0; xs.n * ws.c * 4 * xs.h * xs.w];
    let (oh, ow) = (2 * xs.h, 2 * xs.w);
    for n in 0..xs.n {
        for o in 0..ws.c {
            for y in 0..oh {
                for z in 0..ow {
                    let mut acc = f64::from(b.data()[o]);
                    for c in 0..xs.c {
                        acc += f64::from(x.at(n, c, y / 2, z / 2)) * f64::from(w.at(c, o, y % 2, z % 2));
                    }
                    out[((n * ws.c + o) * oh + y) * ow + z] = acc;
                }
            }
        }
    }
    out
}

fn close(got: &[f32], want: &[f64]) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(&g, &w)| (f64::from(g) - w).abs() <= 1e-4 * (1.0 + w.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_direct_loops(
        n in 1usize..3, c_in in 1usize..5, c_out in 1usize..5, h in 1usize..13, w in 1usize..13,
        k in prop::sample::select(vec![1usize, 3, 5]),
        vals in prop::collection::vec(-1.0f32..1.0, 16..64),
    ) {
        let x = tensor(Shape::new(n, c_in, h, w), &vals);
        let wt = tensor(Shape::new(c_out, c_in, k, k), &vals[3..]);
        let b = tensor(Shape::new(1, c_out, 1, 1), &vals[5..]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(x.clone(), false), tape.input(wt.clone(), false), tape.input(b.clone(), false));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        prop_assert_eq!(tape.shape(y), Shape::new(n, c_out, h, w));
        prop_assert!(close(tape.value(y).data(), &direct_conv(&x, &wt, &b)));
    }

    #[test]
    fn conv_transpose_matches_direct_loops(
        n in 1usize..3, c_in in 1usize..5, c_out in 1usize..5, h in 1usize..9, w in 1usize..9,
        vals in prop::collection::vec(-1.0f32..1.0, 16..64),
    ) {
        let x = tensor(Shape::new(n, c_in, h, w), &vals);
        let wt = tensor(Shape::new(c_in, c_out, 2, 2), &vals[2..]);
        let b = tensor(Shape::new(1, c_out, 1, 1), &vals[7..]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(x.clone(), false), tape.input(wt.clone(), false), tape.input(b.clone(), false));
        let y = tape.conv_transpose2d(xv, wv, bv).unwrap();
        prop_assert_eq!(tape.shape(y), Shape::new(n, c_out, 2 * h, 2 * w));
        prop_assert!(close(tape.value(y).data(), &direct_tconv(&x, &wt, &b)));
    }

    #[test]
    fn pool_then_upsample_restores_the_spatial_shape(
        n in 1usize..3, c in 1usize..5, h in 1usize..8, w in 1usize..8, c_out in 1usize..4,
    ) {
        let x = Tensor::full(Shape::new(n, c, 2 * h, 2 * w), 0.25);
        let mut tape = Tape::new();
        let xv = tape.input(x, false);
        let p = tape.max_pool2d(xv).unwrap();
        prop_assert_eq!(tape.shape(p), Shape::new(n, c, h, w));
        let wv = tape.input(Tensor::full(Shape::new(c, c_out, 2, 2), 0.1), false);
        let bv = tape.input(Tensor::zeros(Shape::new(1, c_out, 1, 1)), false);
        let u = tape.conv_transpose2d(p, wv, bv).unwrap();
        prop_assert_eq!(tape.shape(u), Shape::new(n, c_out, 2 * h, 2 * w));
        let cat = tape.concat_channels(u, xv).unwrap();
        prop_assert_eq!(tape.shape(cat), Shape::new(n, c_out + c, 2 * h, 2 * w));
    }

    #[test]
    fn max_pool_takes_window_maxima(
        h in 1usize..6, w in 1usize..6, vals in prop::collection::vec(-5.0f32..5.0, 4..80),
    ) {
        let x = tensor(Shape::new(1, 2, 2 * h, 2 * w), &vals);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone(), false);
        let p = tape.max_pool2d(xv).unwrap();
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| x.at(0, c, 2 * i + a, 2 * j + b))
                        .fold(f32::NEG_INFINITY, f32::max);
                    prop_assert_eq!(tape.value(p).at(0, c, i, j), m);
                }
            }
        }
    }
}

#[test]
fn odd_pool_input_is_a_shape_error() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(Shape::new(1, 1, 3, 4)), false);
    assert!(tape.max_pool2d(x).is_err());
}

#[test]
fn bias_gradient_counts_output_positions() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(Shape::new(2, 1, 3, 3), 0.1));
    let b = store.add("b", Tensor::zeros(Shape::new(1, 2, 1, 1)));
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(Shape::new(3, 1, 4, 5), 1.0), false);
    let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
    let y = tape.conv2d(x, wv, bv).unwrap();
    let loss = tape.sum(y, None).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(b).data(), &[60.0, 60.0]);
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut tape = Tape::new();
    let t = Tensor::full(Shape::new(2, 3, 4, 4), 0.7);
    let x = tape.input(t.clone(), false);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let y = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(tape.value(y), &t);
}
