use botsai::losses::{cmd_value, decoder_prefix, diff_loss, init_decoders, recon_loss, sim_loss, task_loss, total_loss, LossParts, LossWeights};
use botsai::numerics::{Activation, Matrix, ParamStore, Tape, Var};
use botsai::subspace::{detect, fuse, init_detector, init_fusion, init_projectors, project, specific_prefix, Mode, SubspaceBundle, INVARIANT_PREFIX};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        for x in store.value_mut(&n).unwrap().data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
}

fn row_affine(x: &[f64], w: &Matrix<f64>, b: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b[j] + x.iter().enumerate().map(|(k, &xk)| xk * w.get(k, j)).sum::<f64>())
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn projection_matches_hand_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    init_projectors(&mut store, 3, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let xs = [random(&mut rng, 2, 3), random(&mut rng, 2, 3), random(&mut rng, 2, 3)];
    let mut tape = Tape::new();
    let vars = [0, 1, 2].map(|m| tape.constant(xs[m].clone()));
    let b = project(&mut tape, &store, vars, Activation::Relu).unwrap();
    for m in Mode::ALL {
        for (space, prefix, var) in [("spec", specific_prefix(m), b.spec(m)), ("inv", INVARIANT_PREFIX.to_string(), b.inv(m))] {
            let w = store.value(&format!("{prefix}.w")).unwrap();
            let bias = store.value(&format!("{prefix}.b")).unwrap().data().to_vec();
            for r in 0..2 {
                let want: Vec<f64> = row_affine(xs[m.index()].row(r), w, &bias).into_iter().map(|v| v.max(0.0)).collect();
                close(tape.value(var).row(r), &want, 1e-14);
                let _ = space;
            }
        }
    }
}

#[test]
fn zero_inputs_and_biases_give_activation_of_zero() {
    let mut store = ParamStore::<f64>::new();
    init_projectors(&mut store, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(Matrix::zeros(2, 3));
    for act in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        let b = project(&mut tape, &store, [z, z, z], act).unwrap();
        let expect = if act == Activation::Sigmoid { 0.5 } else { 0.0 };
        for v in b.tokens() {
            assert!(tape.value(v).data().iter().all(|&x| x == expect));
        }
    }
}

/// Explicit-loop multi-head attention over the tokens of one user.
fn fusion_oracle(store: &ParamStore<f64>, heads: usize, tokens: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let p = tokens.len();
    let d = tokens[0].len();
    let dk = d / heads;
    let mut z = vec![vec![0.0; d]; p];
    let mut alphas = Vec::new();
    for i in 0..heads {
        let proj = |part: &str, t: &[f64]| {
            let pre = format!("fuse.head{i}.{part}");
            row_affine(t, store.value(&format!("{pre}.w")).unwrap(), store.value(&format!("{pre}.b")).unwrap().data())
        };
        let mut head_alpha = Vec::new();
        for a in 0..p {
            let q = proj("q", &tokens[a]);
            let s: Vec<f64> = (0..p)
                .map(|b| q.iter().zip(proj("k", &tokens[b])).map(|(x, y)| x * y).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            let alpha: Vec<f64> = e.iter().map(|x| x / tot).collect();
            for b in 0..p {
                let v = proj("v", &tokens[b]);
                for c in 0..dk {
                    z[a][i * dk + c] += alpha[b] * v[c];
                }
            }
            head_alpha.push(alpha);
        }
        alphas.push(head_alpha);
    }
    let wo = store.value("fuse.out.w").unwrap();
    let zero = vec![0.0; d];
    let out = z.iter().flat_map(|row| row_affine(row, wo, &zero)).collect();
    (out, alphas)
}

#[test]
fn fusion_matches_explicit_attention_oracle() {
    let (d, heads, n) = (4, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    init_fusion(&mut store, d, heads, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let toks: Vec<Matrix<f64>> = (0..6).map(|_| random(&mut rng, n, d)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = toks.iter().map(|t| tape.constant(t.clone())).collect();
    let f = fuse(&mut tape, &store, heads, &vars).unwrap();
    assert_eq!(tape.shape(f.h_out), (n, 6 * d));
    for u in 0..n {
        let user_tokens: Vec<Vec<f64>> = toks.iter().map(|t| t.row(u).to_vec()).collect();
        let (want, alphas) = fusion_oracle(&store, heads, &user_tokens);
        close(tape.value(f.h_out).row(u), &want, 1e-10);
        // pairs are ordered (position, user, key position)
        for (h, a) in f.alpha.iter().enumerate() {
            for pos in 0..6 {
                for k in 0..6 {
                    let got = tape.value(*a).data()[(pos * n + u) * 6 + k];
                    assert!((got - alphas[h][pos][k]).abs() < 1e-12);
                }
                let row: f64 = (0..6).map(|k| tape.value(*a).data()[(pos * n + u) * 6 + k]).sum();
                assert!((row - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn fusion_is_equivariant_to_token_order() {
    let (d, heads, n) = (4, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    init_fusion(&mut store, d, heads, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let toks: Vec<Matrix<f64>> = (0..6).map(|_| random(&mut rng, n, d)).collect();
    let perm = [4usize, 2, 0, 5, 1, 3];
    let mut tape = Tape::new();
    let vars: Vec<Var> = toks.iter().map(|t| tape.constant(t.clone())).collect();
    let permuted: Vec<Var> = perm.iter().map(|&i| vars[i]).collect();
    let a = fuse(&mut tape, &store, heads, &vars).unwrap().h_out;
    let b = fuse(&mut tape, &store, heads, &permuted).unwrap().h_out;
    for u in 0..n {
        for (slot, &orig) in perm.iter().enumerate() {
            close(&tape.value(b).row(u)[slot * d..(slot + 1) * d], &tape.value(a).row(u)[orig * d..(orig + 1) * d], 1e-12);
        }
    }
}

#[test]
fn detector_saturates_and_is_monotone() {
    let mut store = ParamStore::new();
    init_detector(&mut store, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let h = Matrix::from_f64_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
    let prob = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(h.clone());
        let y = detect(&mut tape, store, v).unwrap();
        tape.value(y).item()
    };
    let mut last = prob(&store);
    for _ in 0..5 {
        // raise the weight aligned with a positive feature
        store.value_mut("detect.w").unwrap().data_mut()[2] += 0.3;
        let p = prob(&store);
        assert!(p > last);
        last = p;
    }
    store.value_mut("detect.b").unwrap().data_mut()[0] = 1e4;
    assert_eq!(prob(&store), 1.0);
}

/// Brute-force coordinatewise moments.
fn cmd_oracle(x: &[Vec<f64>], y: &[Vec<f64>], k: usize) -> f64 {
    let all = x.iter().chain(y).flatten();
    let hi = all.clone().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = all.cloned().fold(f64::INFINITY, f64::min);
    if hi == lo {
        return 0.0;
    }
    let range = hi - lo;
    let d = x[0].len();
    let mean = |s: &[Vec<f64>], c: usize| s.iter().map(|r| r[c]).sum::<f64>() / s.len() as f64;
    let moment = |s: &[Vec<f64>], c: usize, o: i32| {
        let m = mean(s, c);
        s.iter().map(|r| (r[c] - m).powi(o)).sum::<f64>() / s.len() as f64
    };
    let norm = |f: &dyn Fn(usize) -> f64| (0..d).map(|c| f(c).powi(2)).sum::<f64>().sqrt();
    let mut total = norm(&|c| mean(x, c) - mean(y, c)) / range;
    for o in 2..=k as i32 {
        total += norm(&|c| moment(x, c, o) - moment(y, c, o)) / range.powi(o);
    }
    total
}

#[test]
fn cmd_matches_brute_force_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (n, m, d, k) = (rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..4), rng.gen_range(1..6));
        let x = random(&mut rng, n, d);
        let y = random(&mut rng, m, d);
        let got = cmd_value(&x, &y, k).unwrap();
        let want = cmd_oracle(&x.to_f64_rows(), &y.to_f64_rows(), k);
        assert!((got - want).abs() < 1e-12 * (1.0 + want), "{got} vs {want}");
    }
    let same = Matrix::<f64>::from_f64_rows(&[vec![0.0], vec![1.0]]).unwrap();
    assert_eq!(cmd_value(&same, &same, 2).unwrap(), 0.0);
    assert!(cmd_value(&Matrix::<f64>::zeros(0, 2), &Matrix::zeros(1, 2), 2).is_err());
}

fn bundle_of(tape: &mut Tape<f64>, inv: [&Matrix<f64>; 3], spec: [&Matrix<f64>; 3]) -> SubspaceBundle {
    SubspaceBundle {
        invariant: inv.map(|m| tape.constant(m.clone())),
        specific: spec.map(|m| tape.constant(m.clone())),
    }
}

#[test]
fn sim_loss_two_identical_one_different() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, 5, 3);
    let b = random(&mut rng, 5, 3);
    let c = cmd_value(&a, &b, 5).unwrap();
    let mut tape = Tape::new();
    let bundle = bundle_of(&mut tape, [&a, &a, &b], [&a, &a, &a]);
    let s = sim_loss(&mut tape, &bundle, 5).unwrap();
    assert!((tape.value(s).item() - 2.0 * c / 3.0).abs() < 1e-14);
    let bundle = bundle_of(&mut tape, [&a, &a, &a], [&b, &b, &b]);
    let s = sim_loss(&mut tape, &bundle, 5).unwrap();
    assert_eq!(tape.value(s).item(), 0.0);
}

#[test]
fn diff_loss_hand_case() {
    // Centered and row-normalized: Ĥi = ±[1, -1]/√2, Ĥs = ±[2, 3]/√13, so
    // ‖ĤiᵀĤs‖²_F = 4·26/26 = 4 for each of the six terms.
    let hi = Matrix::<f64>::from_f64_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let hs = Matrix::<f64>::from_f64_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap();
    let mut tape = Tape::new();
    let b = bundle_of(&mut tape, [&hi, &hi, &hi], [&hs, &hs, &hs]);
    let d = diff_loss(&mut tape, &b).unwrap();
    assert!((tape.value(d).item() - 24.0).abs() < 1e-12);

    // orthogonal construction: every term vanishes
    let e1 = Matrix::<f64>::from_f64_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let e2 = Matrix::<f64>::from_f64_rows(&[vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, -1.0]]).unwrap();
    let b = bundle_of(&mut tape, [&e1, &e1, &e1], [&e2, &e2, &e2]);
    let d = diff_loss(&mut tape, &b).unwrap();
    assert_eq!(tape.value(d).item(), 0.0);

    let one = Matrix::<f64>::zeros(1, 2);
    let b = bundle_of(&mut tape, [&one, &one, &one], [&one, &one, &one]);
    assert!(diff_loss(&mut tape, &b).is_err());
}

#[test]
fn recon_loss_of_uniform_offset_is_epsilon_squared() {
    let d = 4;
    let eps = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    init_decoders(&mut store, d, &mut rng).unwrap();
    for m in Mode::ALL {
        *store.value_mut(&format!("{}.w", decoder_prefix(m))).unwrap() = Matrix::identity(d);
        *store.value_mut(&format!("{}.b", decoder_prefix(m))).unwrap() = Matrix::filled(1, d, eps);
    }
    let x = [random(&mut rng, 5, d), random(&mut rng, 5, d), random(&mut rng, 5, d)];
    let half: Vec<Matrix<f64>> = x.iter().map(|m| m.scale(0.5)).collect();
    let mut tape = Tape::new();
    let b = bundle_of(&mut tape, [&half[0], &half[1], &half[2]], [&half[0], &half[1], &half[2]]);
    let targets = [0, 1, 2].map(|m| tape.constant(x[m].clone()));
    let r = recon_loss(&mut tape, &store, &b, targets).unwrap();
    assert!((tape.value(r).item() - eps * eps).abs() < 1e-14);

    for m in Mode::ALL {
        *store.value_mut(&format!("{}.b", decoder_prefix(m))).unwrap() = Matrix::zeros(1, d);
    }
    // parameters are bound once per tape
    let mut tape = Tape::new();
    let b = bundle_of(&mut tape, [&half[0], &half[1], &half[2]], [&half[0], &half[1], &half[2]]);
    let targets = [0, 1, 2].map(|m| tape.constant(x[m].clone()));
    let r = recon_loss(&mut tape, &store, &b, targets).unwrap();
    assert!(tape.value(r).item().abs() < 1e-28, "{}", tape.value(r).item());
}

#[test]
fn task_and_total_loss_arithmetic() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let p = tape.constant(Matrix::filled(6, 1, 0.5));
    let t = task_loss(&mut tape, &store, p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 0.0).unwrap();
    assert!((tape.value(t).item() - 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!(task_loss(&mut tape, &store, p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.5], 0.0).is_err());

    let one = tape.constant(Matrix::scalar(1.0));
    let parts = LossParts {
        task: one,
        sim: Some(one),
        diff: Some(one),
        recon: Some(one),
    };
    let w = LossWeights {
        alpha: 0.7,
        beta_w: 0.3,
        gamma: 1.0,
        lambda: 0.0,
        cmd_order: 5,
    };
    let total = total_loss(&mut tape, &parts, &w).unwrap();
    assert!((tape.value(total).item() - 3.0).abs() < 1e-15);
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..7, 1usize..4).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n))
}

proptest! {
    #[test]
    fn cmd_is_a_symmetric_nonnegative_discrepancy(x in rows_strategy(), seed in any::<u64>(), k in 1usize..6) {
        let d = x[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..6);
        let y = random(&mut rng, m, d);
        let x = Matrix::<f64>::from_f64_rows(&x).unwrap();
        let xy = cmd_value(&x, &y, k).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert_eq!(xy.to_bits(), cmd_value(&y, &x, k).unwrap().to_bits());
        prop_assert_eq!(cmd_value(&x, &x, k).unwrap(), 0.0);
    }

    #[test]
    fn diff_loss_ignores_joint_row_order(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats: Vec<Matrix<f64>> = (0..6).map(|_| random(&mut rng, n, 3)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(0, n / 2);
        let permuted: Vec<Matrix<f64>> = mats.iter().map(|m| m.select_rows(&perm)).collect();
        let mut tape = Tape::new();
        let a = bundle_of(&mut tape, [&mats[0], &mats[1], &mats[2]], [&mats[3], &mats[4], &mats[5]]);
        let b = bundle_of(&mut tape, [&permuted[0], &permuted[1], &permuted[2]], [&permuted[3], &permuted[4], &permuted[5]]);
        let da = diff_loss(&mut tape, &a).unwrap();
        let db = diff_loss(&mut tape, &b).unwrap();
        let (va, vb) = (tape.value(da).item(), tape.value(db).item());
        prop_assert!((va - vb).abs() <= 1e-12 * (1.0 + va));
    }

    #[test]
    fn recon_loss_is_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_decoders(&mut store, 3, &mut rng).unwrap();
        let mats: Vec<Matrix<f64>> = (0..9).map(|_| random(&mut rng, 4, 3)).collect();
        let mut tape = Tape::new();
        let b = bundle_of(&mut tape, [&mats[0], &mats[1], &mats[2]], [&mats[3], &mats[4], &mats[5]]);
        let targets = [6, 7, 8].map(|i| tape.constant(mats[i].clone()));
        let r = recon_loss(&mut tape, &store, &b, targets).unwrap();
        prop_assert!(tape.value(r).item() >= 0.0);
    }

    #[test]
    fn equal_modal_inputs_share_invariant_projection(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_projectors(&mut store, 4, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let x = random(&mut rng, 3, 4);
        let other = random(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let (a, o) = (tape.constant(x.clone()), tape.constant(other));
        let b = project(&mut tape, &store, [a, o, a], Activation::Relu).unwrap();
        prop_assert_eq!(tape.value(b.inv(Mode::G)), tape.value(b.inv(Mode::M)));
    }
}
