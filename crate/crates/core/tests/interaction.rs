use piip::config::{preset, AttentionKind, Direction, PiipConfig};
use piip::interaction::{
    deformable_cross_attention, reference_points, regular_cross_attention, schedule_in_order,
    schedule_interactions, unit_plan, DeformableWeights, RegularWeights,
};
use piip::model::Model;
use piip::numerics::gradcheck::{grad_check, GradCheckOptions};
use piip::numerics::{Tape, Tensor, Var, NORM_EPS};
use piip::params::{Bound, ParamStore};
use piip::vit::BranchFeature;
use piip::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

fn get(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.get(store.id(name).unwrap_or_else(|| panic!("no {name}"))).unwrap().clone()
}

fn randomize(store: &mut ParamStore<f64>, prefix: &str, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        for v in store.get_mut(id).unwrap().data_mut() {
            *v = rng.gen_range(-std..std) * 1.7;
        }
    }
}

fn micro(attention: AttentionKind, direction: Direction) -> PiipConfig {
    let mut cfg = preset("piip-micro").unwrap();
    cfg.interactions.attention = attention;
    cfg.interactions.direction = direction;
    cfg
}

fn micro_features(cfg: &PiipConfig, seed: u64) -> Vec<BranchFeature<f64>> {
    cfg.branches
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let g = b.grid();
            let t = rand_tensor(&[g * g, b.dim], seed + j as u64);
            BranchFeature::new(Var::constant(t), (g, g), false).unwrap()
        })
        .collect()
}

// --- regular cross-attention --------------------------------------------------

fn regular(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, RegularWeights) {
    let mut store = ParamStore::new(seed);
    let w = RegularWeights::register(&mut store, "x", dim, heads);
    randomize(&mut store, "x", 0.5, seed + 1);
    (store, w)
}

#[test]
fn regular_attention_over_one_token_routes_its_value() {
    let (store, w) = regular(6, 2, 1);
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let q = rand_tensor(&[4, 6], 2);
    let kv = rand_tensor(&[1, 6], 3);
    let out = regular_cross_attention(&tape, &p, &w, &Var::constant(q), &Var::constant(kv.clone()), false).unwrap();
    let v = linear_ref(kv.data(), &get(&store, "x.v.weight"), &get(&store, "x.v.bias"));
    let o = linear_ref(&v, &get(&store, "x.o.weight"), &get(&store, "x.o.bias"));
    for row in out.out.value().data().chunks(6) {
        assert_close(row, &o, 1e-12, "single key");
    }
}

#[test]
fn regular_attention_ignores_duplicate_keys() {
    let (store, w) = regular(6, 3, 4);
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let q = Var::constant(rand_tensor(&[5, 6], 5));
    let kv = rand_tensor(&[2, 6], 6);
    let mut dup = kv.data().to_vec();
    dup.extend_from_slice(kv.data());
    dup.extend_from_slice(&kv.data()[..6]);
    let once = regular_cross_attention(&tape, &p, &w, &q, &Var::constant(kv.clone()), false).unwrap();
    // token 0 three times and token 1 twice is not a pure duplication; use
    // an exact doubling instead
    let twice = Tensor::new([4, 6], [kv.data(), kv.data()].concat()).unwrap();
    let doubled = regular_cross_attention(&tape, &p, &w, &q, &Var::constant(twice), false).unwrap();
    assert_close(once.out.value().data(), doubled.out.value().data(), 1e-12, "duplicates");
    let skewed = Tensor::new([5, 6], dup).unwrap();
    let other = regular_cross_attention(&tape, &p, &w, &q, &Var::constant(skewed), false).unwrap();
    assert!(other.out.value().max_abs_diff(once.out.value()).unwrap() > 1e-9);
}

#[test]
fn regular_attention_matches_head_by_head_reference() {
    let (d, heads, nq, nk) = (6, 2, 3, 5);
    let (store, w) = regular(d, heads, 7);
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let qx = rand_tensor(&[nq, d], 8);
    let kx = rand_tensor(&[nk, d], 9);
    let out = regular_cross_attention(&tape, &p, &w, &Var::constant(qx.clone()), &Var::constant(kx.clone()), true)
        .unwrap();

    let lin = |x: &Tensor<f64>, n: &str| linear_ref(x.data(), &get(&store, &format!("x.{n}.weight")), &get(&store, &format!("x.{n}.bias")));
    let (q, k, v) = (lin(&qx, "q"), lin(&kx, "k"), lin(&kx, "v"));
    let hd = d / heads;
    let mut cat = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let scores: Vec<f64> = (0..nk)
                .map(|j| (0..hd).map(|c| q[i * d + h * hd + c] * k[j * d + h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let a = softmax_ref(&scores);
            let got = &out.weights[0].value().data()[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            assert_close(got, &a, 1e-12, "probabilities");
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..hd {
                cat[i * d + h * hd + c] = (0..nk).map(|j| a[j] * v[j * d + h * hd + c]).sum();
            }
        }
    }
    let want = linear_ref(&cat, &get(&store, "x.o.weight"), &get(&store, "x.o.bias"));
    assert_close(out.out.value().data(), &want, 1e-12, "output");
}

#[test]
fn regular_attention_rejects_bad_head_count() {
    let (store, mut w) = regular(6, 2, 10);
    w.heads = 4;
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let x = Var::constant(rand_tensor(&[2, 6], 11));
    assert!(matches!(regular_cross_attention(&tape, &p, &w, &x, &x, false), Err(Error::Config(_))));
}

// --- deformable cross-attention -----------------------------------------------

fn deformable(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, DeformableWeights) {
    let mut store = ParamStore::new(seed);
    let w = DeformableWeights::register(&mut store, "d", dim, heads, 4);
    randomize(&mut store, "d.value", 0.5, seed + 1);
    randomize(&mut store, "d.output", 0.5, seed + 2);
    (store, w)
}

fn project_value(store: &ParamStore<f64>, src: &Tensor<f64>, g: (usize, usize)) -> Tensor<f64> {
    let d = src.shape()[1];
    let v = linear_ref(src.data(), &get(store, "d.value.weight"), &get(store, "d.value.bias"));
    let n = g.0 * g.1;
    Tensor::from_fn([d, g.0, g.1], |i| v[(i % n) * d + i / n])
}

#[test]
fn zero_offsets_collapse_to_sampling_at_the_reference_point() {
    let (d, heads) = (6, 2);
    let (store, w) = deformable(d, heads, 12);
    let (qg, sg) = ((3, 3), (5, 5));
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let q = rand_tensor(&[9, d], 13);
    let s = rand_tensor(&[25, d], 14);
    let out = deformable_cross_attention(&tape, &p, &w, &Var::constant(q), qg, &Var::constant(s.clone()), sg, true)
        .unwrap();

    let map = project_value(&store, &s, sg);
    let refs = reference_points::<f64>(qg);
    let mut cat = Vec::new();
    for r in refs.data().chunks(2) {
        cat.extend(sample_ref(&map, r[0], r[1]));
    }
    let want = linear_ref(&cat, &get(&store, "d.output.weight"), &get(&store, "d.output.bias"));
    assert_close(out.out.value().data(), &want, 1e-6, "collapse");
    assert_eq!(out.weights.len(), heads);
    for wts in &out.weights {
        for row in wts.value().data().chunks(4) {
            assert!(row.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }
}

#[test]
fn aligned_grids_read_the_colocated_token() {
    let d = 4;
    let (store, w) = deformable(d, 1, 15);
    let g = (4, 4);
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let s = rand_tensor(&[16, d], 16);
    let out = deformable_cross_attention(&tape, &p, &w, &Var::constant(rand_tensor(&[16, d], 17)), g, &Var::constant(s.clone()), g, false)
        .unwrap();
    let v = linear_ref(s.data(), &get(&store, "d.value.weight"), &get(&store, "d.value.bias"));
    let want = linear_ref(&v, &get(&store, "d.output.weight"), &get(&store, "d.output.bias"));
    assert_close(out.out.value().data(), &want, 1e-12, "aligned");
}

#[test]
fn deformable_weights_sum_to_one_with_learned_logits() {
    let (mut store, w) = deformable(8, 2, 18);
    randomize(&mut store, "d.logit", 1.0, 19);
    randomize(&mut store, "d.offset", 0.5, 20);
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let out = deformable_cross_attention(
        &tape,
        &p,
        &w,
        &Var::constant(rand_tensor(&[16, 8], 21)),
        (4, 4),
        &Var::constant(rand_tensor(&[64, 8], 22)),
        (8, 8),
        true,
    )
    .unwrap();
    for wts in &out.weights {
        for row in wts.value().data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn deformable_sampling_is_translation_consistent() {
    let (d, g) = (4, 10);
    let (mut store, w) = deformable(d, 2, 23);
    randomize(&mut store, "d.offset", 0.3, 24);
    randomize(&mut store, "d.logit", 1.0, 25);
    let q = rand_tensor(&[g * g, d], 26);
    let s = rand_tensor(&[g * g, d], 27);
    // shift both maps one column to the right
    let shift = |t: &Tensor<f64>, seed: u64| {
        let fill = rand_tensor(&[g * g, d], seed);
        Tensor::from_fn([g * g, d], |i| {
            let (tok, ch) = (i / d, i % d);
            let (r, c) = (tok / g, tok % g);
            if c == 0 {
                fill.data()[i]
            } else {
                t.data()[(r * g + c - 1) * d + ch]
            }
        })
    };
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let run = |q: &Tensor<f64>, s: &Tensor<f64>| {
        deformable_cross_attention(&tape, &p, &w, &Var::constant(q.clone()), (g, g), &Var::constant(s.clone()), (g, g), false)
            .unwrap()
            .out
            .into_value()
    };
    let offs = linear_ref(q.data(), &get(&store, "d.offset.weight"), &get(&store, "d.offset.bias"));
    assert!(offs.iter().all(|o| o.abs() < 2.0), "offsets must stay within the interior margin");
    let base = run(&q, &s);
    let moved = run(&shift(&q, 28), &shift(&s, 29));
    for r in 0..g {
        for c in 3..g - 2 {
            let a = &moved.data()[(r * g + c) * d..(r * g + c + 1) * d];
            let b = &base.data()[(r * g + c - 1) * d..(r * g + c) * d];
            assert_close(a, b, 1e-10, "translated output");
        }
    }
}

#[test]
fn class_tokens_cannot_be_sampled() {
    let (store, w) = deformable(4, 1, 30);
    let tape = Tape::inference();
    let p = store.bind(&tape).unwrap();
    let with_cls = Var::constant(rand_tensor(&[17, 4], 31));
    let plain = Var::constant(rand_tensor(&[16, 4], 32));
    let r = deformable_cross_attention(&tape, &p, &w, &with_cls, (4, 4), &plain, (4, 4), false);
    assert!(matches!(r, Err(Error::Contract(_))));
}

// --- units and scheduling -------------------------------------------------------

#[test]
fn zero_gates_make_every_scheme_the_identity() {
    for attention in [AttentionKind::Deformable, AttentionKind::Regular] {
        for direction in Direction::ALL {
            let cfg = micro(attention, direction);
            let model = Model::<f64>::build(&cfg, 40).unwrap();
            let tape = Tape::inference();
            let p = model.bind(&tape).unwrap();
            let feats = micro_features(&cfg, 41);
            let out = schedule_interactions(&tape, &p, model.units(0), &cfg.interactions, &feats).unwrap();
            for (a, b) in out.iter().zip(&feats) {
                assert!(a.tokens.value().bit_eq(b.tokens.value()), "{attention:?} {direction:?}");
            }
        }
    }
}

#[test]
fn ffn_gate_alone_adds_only_the_ffn_term() {
    let cfg = micro(AttentionKind::Deformable, Direction::AdjacentUpOnly);
    let mut model = Model::<f64>::build(&cfg, 42).unwrap();
    let tau = model.params().id("interaction0.unit1_2.b1_from_b2.tau").unwrap();
    model.params_mut().set(tau, rand_tensor(&[16], 43)).unwrap();
    let store = model.params();
    let tape = Tape::inference();
    let p = model.bind(&tape).unwrap();
    let feats = micro_features(&cfg, 44);
    let out = schedule_interactions(&tape, &p, model.units(0), &cfg.interactions, &feats).unwrap();

    let pre = "interaction0.unit1_2.b1_from_b2";
    let f = feats[0].tokens.value();
    let h = layer_norm_ref(f.data(), 16, get(store, &format!("{pre}.ffn_norm.gain")).data(), get(store, &format!("{pre}.ffn_norm.bias")).data(), NORM_EPS);
    let h: Vec<f64> = linear_ref(&h, &get(store, &format!("{pre}.ffn.fc1.weight")), &get(store, &format!("{pre}.ffn.fc1.bias")))
        .into_iter()
        .map(gelu_ref)
        .collect();
    let h = linear_ref(&h, &get(store, &format!("{pre}.ffn.fc2.weight")), &get(store, &format!("{pre}.ffn.fc2.bias")));
    let t = get(store, &format!("{pre}.tau"));
    let want: Vec<f64> = f.data().iter().enumerate().map(|(i, &x)| x + t.data()[i % 16] * h[i]).collect();
    assert_close(out[0].tokens.value().data(), &want, 1e-12, "ffn-only update");
    assert!(out[0].tokens.value().max_abs_diff(f).unwrap() > 0.0);
    assert!(out[1].tokens.value().bit_eq(feats[1].tokens.value()));
}

#[test]
fn unit_gradients_reach_every_component() {
    for attention in [AttentionKind::Deformable, AttentionKind::Regular] {
        let cfg = micro(attention, Direction::AdjacentBidirectional);
        let mut model = Model::<f64>::build(&cfg, 45).unwrap();
        model.perturb_zero_init(46, 0.3).unwrap();
        let prefix = "interaction0.unit1_2.";
        let all = model.params().tensors().unwrap();
        let ids: Vec<usize> = (0..all.len()).filter(|&i| all[i].0.starts_with(prefix)).collect();
        let params: Vec<(String, Tensor<f64>)> = ids.iter().map(|&i| all[i].clone()).collect();
        let feats = micro_features(&cfg, 47);
        let units = &model.units(0)[..1];
        let loss = |tape: &Tape<f64>, vars: &[Var<f64>]| {
            let mut bound: Vec<Var<f64>> = all.iter().map(|(_, t)| Var::constant(t.clone())).collect();
            for (&i, v) in ids.iter().zip(vars) {
                bound[i] = v.clone();
            }
            let p = Bound::from_vars(bound);
            let out = schedule_interactions(tape, &p, units, &cfg.interactions, &feats)?;
            let a = out[0].tokens.clone();
            let b = out[1].tokens.clone();
            let ra = Var::constant(rand_tensor(a.shape(), 48));
            let rb = Var::constant(rand_tensor(b.shape(), 49));
            let sa = tape.sum(&tape.mul(&a, &ra)?);
            let sb = tape.sum(&tape.mul(&b, &rb)?);
            tape.add(&sa, &sb)
        };
        let report = grad_check(&params, loss, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-4, "{attention:?}: {report:?}");

        let tape = Tape::new();
        let vars: Vec<Var<f64>> = params.iter().map(|(_, t)| tape.leaf_tensor(t.clone())).collect();
        let l = loss(&tape, &vars).unwrap();
        let grads = tape.backward(&l).unwrap();
        for part in ["fc.weight", "attn.", "ffn.fc1.weight", "gamma", "tau"] {
            let live = params
                .iter()
                .zip(&vars)
                .filter(|((n, _), _)| n.contains(part))
                .any(|(_, v)| grads.get(v).is_some_and(|g| g.data().iter().any(|&x| x != 0.0)));
            assert!(live, "{attention:?}: no gradient reaches {part}");
        }
    }
}

#[test]
fn unit_counts_per_interaction_point() {
    let count = |d: Direction, m: usize| unit_plan(d, m).len();
    assert_eq!(count(Direction::AdjacentBidirectional, 3), 2);
    assert_eq!(count(Direction::AdjacentBidirectional, 4), 3);
    assert_eq!(count(Direction::AllPairsBidirectional, 3), 3);
    let halves = |d: Direction| unit_plan(d, 3).iter().map(|(_, h)| h.len()).sum::<usize>();
    assert_eq!(halves(Direction::AdjacentBidirectional), 4);
    assert_eq!(halves(Direction::AdjacentDownOnly), 2);
    assert_eq!(halves(Direction::AdjacentUpOnly), 2);
    assert_eq!(halves(Direction::ChainOneWay), 2);
    assert_eq!(halves(Direction::AllPairsBidirectional), 6);

    let model = Model::<f32>::layout(&preset("piip-tsbl").unwrap()).unwrap();
    assert_eq!(model.units(0).len(), 3);
}

#[test]
fn non_adjacent_pairs_are_rejected_under_adjacent_schemes() {
    let cfg = micro(AttentionKind::Regular, Direction::AllPairsBidirectional);
    let model = Model::<f64>::build(&cfg, 50).unwrap();
    let tape = Tape::inference();
    let p = model.bind(&tape).unwrap();
    let feats = micro_features(&cfg, 51);
    let mut spec = cfg.interactions.clone();
    spec.direction = Direction::AdjacentBidirectional;
    let r = schedule_interactions(&tape, &p, model.units(0), &spec, &feats);
    assert!(matches!(r, Err(Error::Schedule(_))));
}

#[test]
fn unit_order_does_not_change_the_result() {
    for direction in [Direction::AdjacentBidirectional, Direction::AllPairsBidirectional] {
        let cfg = micro(AttentionKind::Deformable, direction);
        let mut model = Model::<f64>::build(&cfg, 52).unwrap();
        model.perturb_zero_init(53, 0.3).unwrap();
        let tape = Tape::inference();
        let p = model.bind(&tape).unwrap();
        let feats = micro_features(&cfg, 54);
        let units = model.units(0);
        let forward: Vec<usize> = (0..units.len()).collect();
        let backward: Vec<usize> = forward.iter().rev().copied().collect();
        let a = schedule_in_order(&tape, &p, units, &cfg.interactions, &feats, &forward).unwrap();
        let b = schedule_in_order(&tape, &p, units, &cfg.interactions, &feats, &backward).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.tokens.value().bit_eq(y.tokens.value()), "{direction:?}");
        }
        assert!(a[1].tokens.value().max_abs_diff(feats[1].tokens.value()).unwrap() > 0.0);
    }
}

#[test]
fn chain_reads_the_updated_neighbour() {
    let cfg = micro(AttentionKind::Deformable, Direction::ChainOneWay);
    let mut model = Model::<f64>::build(&cfg, 55).unwrap();
    model.perturb_zero_init(56, 0.3).unwrap();
    let tape = Tape::inference();
    let p = model.bind(&tape).unwrap();
    let feats = micro_features(&cfg, 57);
    let units = model.units(0);
    assert_eq!(units[0].pair, (1, 2));
    let chained = schedule_interactions(&tape, &p, units, &cfg.interactions, &feats).unwrap();
    // branch 1 must see branch 2 after branch 2 read branch 3
    let step1 = schedule_in_order(&tape, &p, &units[..1], &cfg.interactions, &feats, &[0]).unwrap();
    let step2 = schedule_in_order(&tape, &p, &units[1..], &cfg.interactions, &step1, &[0]).unwrap();
    for (x, y) in chained.iter().zip(&step2) {
        assert!(x.tokens.value().bit_eq(y.tokens.value()));
    }
    let stale = schedule_in_order(&tape, &p, &units[1..], &cfg.interactions, &feats, &[0]).unwrap();
    assert!(stale[0].tokens.value().max_abs_diff(chained[0].tokens.value()).unwrap() > 0.0);
    assert!(chained[2].tokens.value().bit_eq(feats[2].tokens.value()));
}

#[test]
fn ffn_hidden_width_rounds_up() {
    let cfg = preset("piip-micro").unwrap();
    let model = Model::<f32>::layout(&cfg).unwrap();
    let shape = |n: &str| model.params().shape(model.params().id(n).unwrap()).to_vec();
    assert_eq!(shape("interaction0.unit2_3.b3_from_b2.ffn.fc1.weight"), vec![4, 1]);
    assert_eq!(shape("interaction0.unit1_2.b1_from_b2.ffn.fc1.weight"), vec![16, 4]);
    assert_eq!(shape("interaction0.unit1_2.b1_from_b2.fc.weight"), vec![8, 16]);
}
