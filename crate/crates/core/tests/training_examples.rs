use std::collections::BTreeMap;

use typerank_core::import_analysis::{Provenance, VisibleTypeSet};
use typerank_core::seq_model::{greedy, infonce_loss, Dims, SeqModelParams, Vocab};
use typerank_core::source_model::{extract_functions, PythonFunction};
use typerank_core::synthetic::{self, SyntheticConfig};
use typerank_core::training::{
    build_contrastive_dataset, build_generation_dataset, canonical_type_text, train_contrastive, train_generative,
    Hyperparams,
};
use typerank_core::type_lang::TypeCategory;

const FIXTURE: &str = r#"
from .models import Widget

def area(w: int, h: int) -> int:
    return w * h

def names(ws: List[Widget]) -> Dict[str, Widget]:
    out: Dict[str, Widget] = {}
    return out

def first(ws) -> Optional[Widget]:
    return ws[0] if ws else None

class Shop:
    def label(self, w: Widget, prefix="") -> str:
        text: str = prefix + w.name
        return text
"#;

fn functions(src: &str) -> Vec<PythonFunction> {
    let ex = extract_functions(src, "pkg/shop.py");
    assert!(ex.diagnostics.is_empty(), "{:?}", ex.diagnostics);
    ex.functions
}

#[test]
fn infonce_matches_high_precision_value() {
    // -log(e^0.9 / (e^0.9 + e^0.1 + e^0.2 + e^0.3)) evaluated at 50 digits
    // is 0.91417886505346994615007806157487...
    let want = 0.914_178_865_053_47;
    let got = infonce_loss(0.9, &[0.1, 0.2, 0.3]).unwrap();
    assert!((got - want).abs() < 1e-14, "{got}");
}

#[test]
fn one_annotation_gives_one_pair() {
    let pairs = build_generation_dataset(&functions("def f(x: int):\n    return x\n"));
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].expected_type, "int");
}

#[test]
fn fixture_annotations_and_categories() {
    let funcs = functions(FIXTURE);
    assert_eq!(funcs.len(), 4);
    let pairs = build_generation_dataset(&funcs);
    assert_eq!(pairs.len(), 10);
    let mut tally: BTreeMap<TypeCategory, usize> = BTreeMap::new();
    for p in &pairs {
        *tally.entry(p.category).or_default() += 1;
    }
    // int x3, str x2 / List, Dict x2, Optional / Widget
    assert_eq!(tally[&TypeCategory::Elementary], 5);
    assert_eq!(tally[&TypeCategory::Generic], 4);
    assert_eq!(tally[&TypeCategory::UserDefined], 1);
}

fn tiny_dims() -> Dims {
    Dims { d_model: 32, n_layers: 1, n_heads: 4, d_ff: 64, max_seq_len: 128 }
}

fn model_for(funcs: &[PythonFunction], dims: Dims, seed: u64) -> SeqModelParams {
    let vocab = Vocab::build(funcs.iter().map(|f| f.source_text.as_str()), 1, 16);
    SeqModelParams::init(vocab, dims, seed)
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let funcs = functions(FIXTURE);
    let pairs = build_generation_dataset(&funcs);
    let p = model_for(&funcs, tiny_dims(), 3);
    let hyper = Hyperparams { epochs: 0, ..Hyperparams::default() };
    let trained = train_generative(&p, &pairs, &hyper).unwrap();
    assert_eq!(trained.params, p);
    assert!(trained.epoch_losses.is_empty());

    let vis: BTreeMap<String, VisibleTypeSet> =
        BTreeMap::from([("pkg/shop.py".to_string(), [("Widget", Provenance::Imported)].into_iter().collect())]);
    let instances = build_contrastive_dataset(&pairs, &p, &vis, 5, 0).unwrap();
    assert_eq!(train_contrastive(&p, &instances, &hyper).unwrap().params, p);
}

#[test]
fn single_pair_overfits_in_200_steps() {
    let funcs = functions(FIXTURE);
    let pairs = build_generation_dataset(&funcs);
    let pair = pairs.iter().find(|p| p.expected_type == "Dict[str, Widget]").unwrap().clone();
    let p = model_for(&funcs, Dims::default(), 1);
    let hyper = Hyperparams { epochs: 200, learning_rate: 1e-3, batch_size: 1, beam_k: 5, seed: 1, dropout: 0.0 };
    let trained = train_generative(&p, std::slice::from_ref(&pair), &hyper).unwrap();
    let m = &trained.params;
    let hidden = m.encode(&m.tokenize(pair.input.text())).unwrap();
    let out = greedy(m, &hidden, 32).unwrap();
    assert!(out.finished);
    assert_eq!(m.vocab.detokenize(&out.tokens), canonical_type_text(&pair.expected_type));
}

#[test]
fn generative_loss_does_not_increase_over_first_epochs() {
    let corpus = synthetic::generate(&SyntheticConfig::small());
    let funcs: Vec<PythonFunction> =
        corpus.files.iter().flat_map(|f| extract_functions(&f.source, &f.qualified_path()).functions).collect();
    let pairs = build_generation_dataset(&funcs);
    assert!(pairs.len() > 100);
    let p = model_for(&funcs, tiny_dims(), 0);
    let hyper = Hyperparams { epochs: 3, learning_rate: 1e-3, batch_size: 8, beam_k: 5, seed: 0, dropout: 0.0 };
    let losses = train_generative(&p, &pairs, &hyper).unwrap().epoch_losses;
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn contrastive_loss_descends_on_one_instance() {
    let funcs = functions(FIXTURE);
    let pairs = build_generation_dataset(&funcs);
    let pair = pairs.iter().find(|p| p.expected_type == "Widget").unwrap().clone();
    let p = model_for(&funcs, tiny_dims(), 2);
    let vis: BTreeMap<String, VisibleTypeSet> = BTreeMap::from([(
        "pkg/shop.py".to_string(),
        [("Widget", Provenance::Imported), ("Shop", Provenance::SameFile)].into_iter().collect(),
    )]);
    let instances = build_contrastive_dataset(std::slice::from_ref(&pair), &p, &vis, 5, 0).unwrap();
    assert!(!instances[0].negatives.is_empty());
    let inst = &instances[0];
    let x = p.tokenize(inst.anchor.text());
    let pos = p.vocab.encode_pieces(&inst.positive);
    let negs: Vec<Vec<usize>> = inst.negatives.iter().map(|n| p.vocab.encode_pieces(n)).collect();

    let mut model = p.clone();
    let mut prev = model.contrastive_loss(&x, &pos, &negs).unwrap();
    let hyper = Hyperparams { epochs: 1, learning_rate: 1e-4, batch_size: 1, beam_k: 5, seed: 0, dropout: 0.0 };
    for step in 0..20 {
        model = train_contrastive(&model, instances.as_slice(), &hyper).unwrap().params;
        let loss = model.contrastive_loss(&x, &pos, &negs).unwrap();
        assert!(loss < prev, "step {step}: {loss} >= {prev}");
        prev = loss;
    }
}
