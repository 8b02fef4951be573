use candle_core::{DType, Tensor, D};
use vtg_core::backbone::{Backbone, BackboneConfig, TokenStream};
use vtg_core::nn::{Init, ParamStore};

fn setup() -> (Backbone, ParamStore) {
    let cfg = BackboneConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        mlp_hidden: 64,
        context: 128,
        feat_dim: 8,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let bb = Backbone::init(&cfg, 24, &mut store, DType::F64).unwrap();
    let mut init = Init::new(3, DType::F64);
    let lora: Vec<(String, Vec<usize>)> = store
        .trainable()
        .filter(|(n, _)| n.contains(".lora_"))
        .map(|(n, v)| (n.clone(), v.dims().to_vec()))
        .collect();
    for (n, d) in lora {
        store.set(&n, &init.normal(&d, 0.3).unwrap()).unwrap();
    }
    let loc = store.get("embed.tok").unwrap().get(5).unwrap().affine(3.0, 0.0).unwrap();
    store.set("embed.loc", &loc.unsqueeze(0).unwrap()).unwrap();
    (bb, store)
}

fn stream(bb: &Backbone, store: &ParamStore, seed: u64) -> TokenStream {
    let mut init = Init::new(seed, DType::F64);
    let t = init.normal(&[7, 8], 1.0).unwrap();
    let s = init.normal(&[3, 8], 1.0).unwrap();
    bb.stream(store, &t, &s, vec![1, 7, 9, 2]).unwrap()
}

/// Re-runs the full causal pass over the growing prefix at every step.
fn reference_greedy(bb: &Backbone, store: &ParamStore, s: &TokenStream, max: usize) -> (Vec<u32>, Vec<Tensor>) {
    let loc = bb.loc_id();
    let mut out = Vec::new();
    let mut loc_hidden = Vec::new();
    let mut text = s.text.clone();
    for _ in 0..max {
        let h = bb.forward(store, &[s.with_text(text.clone())]).unwrap().get(0).unwrap();
        let last = h.get(h.dim(0).unwrap() - 1).unwrap();
        if out.last() == Some(&loc) {
            loc_hidden.push(last.clone());
        }
        let next = bb.logits(store, &last.unsqueeze(0).unwrap()).unwrap().argmax(D::Minus1).unwrap();
        let next = next.flatten_all().unwrap().to_vec1::<u32>().unwrap()[0];
        if next == vtg_core::backbone::tokenizer::EOS {
            break;
        }
        out.push(next);
        text.push(next);
    }
    if out.last() == Some(&loc) {
        let h = bb.forward(store, &[s.with_text(text)]).unwrap().get(0).unwrap();
        loc_hidden.push(h.get(h.dim(0).unwrap() - 1).unwrap());
    }
    (out, loc_hidden)
}

#[test]
fn cached_greedy_decoding_matches_full_recompute() {
    let (bb, store) = setup();
    let mut saw_loc = false;
    for seed in 0..6 {
        let s = stream(&bb, &store, seed);
        let g = bb.generate(&store, std::slice::from_ref(&s), 12, None).unwrap().remove(0);
        let (tokens, hidden) = reference_greedy(&bb, &store, &s, 12);
        assert_eq!(g.tokens, tokens, "seed {seed}");
        assert_eq!(g.loc_hidden.len(), hidden.len());
        saw_loc |= !hidden.is_empty();
        for (a, b) in g.loc_hidden.iter().zip(&hidden) {
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-9, "seed {seed}: {d}");
        }
        let vis = g.visual_hidden.dims().to_vec();
        assert_eq!(vis, vec![7, 32]);
    }
    assert!(saw_loc, "no fixture emitted <LOC>");
}

#[test]
fn batched_generation_matches_single() {
    let (bb, store) = setup();
    let streams: Vec<TokenStream> = (0..3).map(|s| stream(&bb, &store, 10 + s)).collect();
    let batch = bb.generate(&store, &streams, 10, None).unwrap();
    for (s, g) in streams.iter().zip(&batch) {
        let one = bb.generate(&store, std::slice::from_ref(s), 10, None).unwrap().remove(0);
        assert_eq!(one.tokens, g.tokens);
    }
}
