use piip::config::BranchConfig;
use piip::numerics::{Tape, Tensor, Var, NORM_EPS};
use piip::params::ParamStore;
use piip::vit::{interpolate_pos_embed, vit_layer, BranchFeature, BranchWeights};
use piip::Error;

mod common;
use common::*;

fn small(depth: usize, dim: usize, heads: usize, patch: usize, res: usize, cls: bool) -> BranchConfig {
    BranchConfig {
        patch,
        use_cls_token: cls,
        ..BranchConfig::new(depth, dim, heads, res)
    }
}

fn branch(cfg: &BranchConfig, blocks: usize, seed: u64) -> (ParamStore<f64>, BranchWeights) {
    let mut store = ParamStore::new(seed);
    let w = BranchWeights::register(&mut store, 1, cfg, blocks);
    (store, w)
}

fn set(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.set(id, t).unwrap();
}

fn zero(store: &mut ParamStore<f64>, name: &str) {
    let id = store.id(name).unwrap();
    let shape = store.shape(id).to_vec();
    store.set(id, Tensor::zeros(shape)).unwrap();
}

fn feature(tokens: Tensor<f64>, grid: (usize, usize), cls: bool) -> BranchFeature<f64> {
    BranchFeature::new(Var::constant(tokens), grid, cls).unwrap()
}

#[test]
fn patch_embed_token_counts() {
    let tape = Tape::inference();
    for cls in [false, true] {
        let cfg = small(1, 8, 2, 16, 224, cls);
        let (store, w) = branch(&cfg, 1, 0);
        let p = store.bind(&tape).unwrap();
        let img = tape.constant(rand_tensor(&[3, 224, 224], 1));
        let f = w.patch_embed(&tape, &p, &img).unwrap();
        assert_eq!(f.tokens.shape(), &[196 + usize::from(cls), 8]);
        assert_eq!(f.grid, (14, 14));
        assert_eq!(f.has_cls, cls);
    }
}

#[test]
fn patch_embed_rejects_wrong_resolution() {
    let tape = Tape::inference();
    let (store, w) = branch(&small(1, 8, 2, 4, 16, false), 1, 0);
    let p = store.bind(&tape).unwrap();
    let img = tape.constant(Tensor::zeros([3, 20, 20]));
    assert!(matches!(w.patch_embed(&tape, &p, &img), Err(Error::Config(_))));
}

#[test]
fn zero_image_gives_zero_tokens_except_cls() {
    let tape = Tape::inference();
    let (mut store, w) = branch(&small(1, 6, 2, 4, 16, true), 1, 3);
    zero(&mut store, "branch1.pos_embed");
    let cls = store.get(store.id("branch1.cls_token").unwrap()).unwrap().clone();
    let p = store.bind(&tape).unwrap();
    let f = w.patch_embed(&tape, &p, &tape.constant(Tensor::zeros([3, 16, 16]))).unwrap();
    let data = f.tokens.value().data();
    assert_eq!(&data[..6], cls.data());
    assert!(data[6..].iter().all(|&v| v == 0.0));
}

#[test]
fn one_hot_pixel_touches_only_its_patch() {
    let tape = Tape::inference();
    let cfg = small(1, 5, 1, 4, 16, false);
    let (store, w) = branch(&cfg, 1, 4);
    let p = store.bind(&tape).unwrap();
    let base = w.patch_embed(&tape, &p, &tape.constant(Tensor::zeros([3, 16, 16]))).unwrap();
    let mut img = Tensor::zeros([3, 16, 16]);
    // channel 1, row 9, column 6 lies in patch (2, 1)
    img.data_mut()[(16 + 9) * 16 + 6] = 1.0;
    let f = w.patch_embed(&tape, &p, &tape.constant(img)).unwrap();
    let hit = 2 * 4 + 1;
    for t in 0..16 {
        let a = &f.tokens.value().data()[t * 5..(t + 1) * 5];
        let b = &base.tokens.value().data()[t * 5..(t + 1) * 5];
        if t == hit {
            assert!(a.iter().zip(b).any(|(x, y)| x != y));
        } else {
            assert_eq!(a, b, "token {t}");
        }
    }
}

#[test]
fn pos_embed_interpolation() {
    let tape = Tape::<f64>::inference();
    let pos = rand_tensor(&[1 + 9, 4], 5);
    let v = tape.constant(pos.clone());
    let same = interpolate_pos_embed(&tape, &v, true, (3, 3)).unwrap();
    assert!(same.value().bit_eq(&pos));

    let c = tape.constant(Tensor::full([16, 3], 0.375));
    let up = interpolate_pos_embed(&tape, &c, false, (7, 7)).unwrap();
    assert!(up.value().data().iter().all(|&x| x == 0.375));

    let src = rand_tensor(&[4, 3], 6);
    let up = interpolate_pos_embed(&tape, &tape.constant(src.clone()), false, (4, 4)).unwrap();
    for ch in 0..3 {
        let plane: Vec<f64> = (0..4).map(|i| src.data()[i * 3 + ch]).collect();
        for oy in 0..4 {
            for ox in 0..4 {
                let want = resize_ref(&plane, 2, 2, 4, 4, oy, ox);
                let got = up.value().data()[(oy * 4 + ox) * 3 + ch];
                assert!((want - got).abs() < 1e-15);
            }
        }
    }

    let cls_row = interpolate_pos_embed(&tape, &v, true, (5, 5)).unwrap();
    assert_eq!(cls_row.shape(), &[26, 4]);
    assert_eq!(&cls_row.value().data()[..4], &pos.data()[..4]);

    let bad = tape.constant(Tensor::zeros([6, 2]));
    assert!(matches!(interpolate_pos_embed(&tape, &bad, false, (2, 2)), Err(Error::Config(_))));
}

fn zero_layer(store: &mut ParamStore<f64>, l: usize) {
    for part in ["attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"] {
        zero(store, &format!("branch1.layer{l}.{part}.weight"));
        zero(store, &format!("branch1.layer{l}.{part}.bias"));
    }
}

#[test]
fn zero_weight_layer_is_identity() {
    let tape = Tape::inference();
    let cfg = small(1, 8, 2, 4, 16, true);
    let (mut store, w) = branch(&cfg, 1, 7);
    zero_layer(&mut store, 0);
    let p = store.bind(&tape).unwrap();
    let x = feature(rand_tensor(&[17, 8], 8), (4, 4), true);
    let y = vit_layer(&tape, &p, &w.layers[0], 2, &x, false).unwrap().feature;
    assert!(y.tokens.value().bit_eq(x.tokens.value()));
}

#[test]
fn single_token_layer_matches_closed_form() {
    let tape = Tape::inference();
    let d = 6;
    let cfg = small(1, d, 2, 4, 4, false);
    let (mut store, w) = branch(&cfg, 1, 9);
    for (i, name) in ["branch1.layer0.norm1.gain", "branch1.layer0.norm2.bias", "branch1.layer0.attn.qkv.bias"]
        .iter()
        .enumerate()
    {
        let id = store.id(name).unwrap();
        let shape = store.shape(id).to_vec();
        set(&mut store, name, rand_tensor(&shape, 20 + i as u64));
    }
    let get = |n: &str| store.get(store.id(&format!("branch1.layer0.{n}")).unwrap()).unwrap().clone();
    let x = rand_tensor(&[1, d], 10);

    // softmax over one key is 1, so attention returns v
    let h = layer_norm_ref(x.data(), d, get("norm1.gain").data(), get("norm1.bias").data(), NORM_EPS);
    let qkv = linear_ref(&h, &get("attn.qkv.weight"), &get("attn.qkv.bias"));
    let a = linear_ref(&qkv[2 * d..], &get("attn.proj.weight"), &get("attn.proj.bias"));
    let x1: Vec<f64> = x.data().iter().zip(&a).map(|(u, v)| u + v).collect();
    let h = layer_norm_ref(&x1, d, get("norm2.gain").data(), get("norm2.bias").data(), NORM_EPS);
    let h: Vec<f64> = linear_ref(&h, &get("mlp.fc1.weight"), &get("mlp.fc1.bias")).into_iter().map(gelu_ref).collect();
    let m = linear_ref(&h, &get("mlp.fc2.weight"), &get("mlp.fc2.bias"));
    let want: Vec<f64> = x1.iter().zip(&m).map(|(u, v)| u + v).collect();

    let p = store.bind(&tape).unwrap();
    let out = vit_layer(&tape, &p, &w.layers[0], 2, &feature(x, (1, 1), false), true).unwrap();
    assert_close(out.feature.tokens.value().data(), &want, 1e-12, "single token");
    assert!(out.attention.unwrap().value().data().iter().all(|&v| v == 1.0));
}

#[test]
fn attention_rows_sum_to_one() {
    let tape = Tape::inference();
    let cfg = small(1, 12, 3, 4, 16, true);
    let (store, w) = branch(&cfg, 1, 11);
    let p = store.bind(&tape).unwrap();
    let x = feature(rand_tensor(&[17, 12], 12), (4, 4), true);
    let probs = vit_layer(&tape, &p, &w.layers[0], 3, &x, true).unwrap().attention.unwrap();
    assert_eq!(probs.shape(), &[3, 17, 17]);
    for row in probs.value().data().chunks(17) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn segments_compose_to_the_full_stack() {
    let tape = Tape::inference();
    let cfg = small(4, 8, 2, 4, 16, false);
    let x = feature(rand_tensor(&[16, 8], 13), (4, 4), false);
    for blocks in [1, 2, 4] {
        let (store, w) = branch(&cfg, blocks, 14);
        assert_eq!(w.layers_per_block(), 4 / blocks);
        let p = store.bind(&tape).unwrap();
        let mut by_segment = x.clone();
        for b in 0..blocks {
            by_segment = w.segment(&tape, &p, &by_segment, b).unwrap();
        }
        let mut by_layer = x.clone();
        for l in &w.layers {
            by_layer = vit_layer(&tape, &p, l, 2, &by_layer, false).unwrap().feature;
        }
        assert!(by_segment.tokens.value().bit_eq(by_layer.tokens.value()));
        assert!(matches!(w.segment(&tape, &p, &x, blocks), Err(Error::Config(_))));
    }
}

#[test]
fn deep_branch_groups_two_layers_per_block() {
    let mut store = ParamStore::<f32>::shapes_only();
    let w = BranchWeights::register(&mut store, 1, &piip::config::templates::vit_l(), 12);
    assert_eq!(w.layers.len(), 24);
    assert_eq!(w.layers_per_block(), 2);
}

#[test]
fn branch_forward_is_deterministic_and_conserves_tokens() {
    let cfg = small(2, 8, 2, 4, 16, true);
    let run = || {
        let tape = Tape::<f32>::inference();
        let mut store = ParamStore::new(21);
        let w = BranchWeights::register(&mut store, 1, &cfg, 2);
        let p = store.bind(&tape).unwrap();
        let img = tape.constant(rand_tensor(&[3, 32, 32], 22).cast::<f32>());
        w.run(&tape, &p, &img).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.tokens.shape(), &[17, 8]);
    assert!(a.tokens.value().bit_eq(b.tokens.value()));
}

#[test]
fn non_finite_activations_name_the_layer() {
    let tape = Tape::inference();
    let cfg = small(2, 8, 2, 4, 16, false);
    let (mut store, w) = branch(&cfg, 1, 23);
    set(&mut store, "branch1.layer1.mlp.fc2.bias", Tensor::full([8], f64::INFINITY));
    let p = store.bind(&tape).unwrap();
    let x = feature(rand_tensor(&[16, 8], 24), (4, 4), false);
    match w.segment(&tape, &p, &x, 0) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("layer 1"), "{msg}"),
        other => panic!("expected a numeric error, got {:?}", other.map(|_| ())),
    }
}
