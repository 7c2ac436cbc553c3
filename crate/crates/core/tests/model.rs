use xgap::corpus::{generate_corpus, CorpusSpec, Split};
use xgap::model::{
    encode_image, encode_image_from_patch_embeddings, encode_text, encode_text_from_embeddings,
    image_features_from_patch_embeddings, load_checkpoint, save_checkpoint,
    text_features_from_embeddings, Binding, ModelConfig, VLModel,
};
use xgap::rng;
use xgap::tensor::{grad_check, Graph, Tensor};
use xgap::Error;

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        width: 8,
        hidden_dim: 16,
        layers: 1,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn corpus() -> xgap::corpus::Corpus {
    generate_corpus(&CorpusSpec {
        samples_per_class: 4,
        ..CorpusSpec::default()
    })
    .unwrap()
}

#[test]
fn text_factorization_is_exact() {
    let model = VLModel::init(ModelConfig::default()).unwrap();
    let c = corpus();
    for s in c.samples.iter().take(5) {
        let tokens = &s.captions[0];
        let direct = encode_text(&model, tokens).unwrap();
        let via = encode_text_from_embeddings(&model, &model.embed_tokens(tokens).unwrap()).unwrap();
        assert_eq!(direct, via);
        assert_eq!(direct.len(), model.config.d);
    }
}

#[test]
fn image_factorization_is_exact() {
    let model = VLModel::init(ModelConfig::default()).unwrap();
    let c = corpus();
    for s in c.samples.iter().take(5) {
        let direct = encode_image(&model, &s.image).unwrap();
        let via =
            encode_image_from_patch_embeddings(&model, &model.embed_patches(&s.image).unwrap()).unwrap();
        assert_eq!(direct, via);
        assert_eq!(direct.len(), model.config.d);
    }
}

#[test]
fn batch_encoding_matches_single_items() {
    let model = VLModel::init(ModelConfig::default()).unwrap();
    let c = corpus();
    let train = c.split(Split::Train);
    let images: Vec<_> = train.iter().take(4).map(|s| &s.image).collect();
    let batch = xgap::model::encode_images(&model, &images).unwrap();
    for (i, img) in images.iter().enumerate() {
        let one = encode_image(&model, img).unwrap();
        for (a, b) in batch.row(i).iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // Padding must not leak into shorter captions.
    let texts = vec![c.samples[0].captions[0].clone(), vec![c.samples[0].captions[0][0]]];
    let batch = xgap::model::encode_texts(&model, &texts).unwrap();
    let one = encode_text(&model, &texts[1]).unwrap();
    for (a, b) in batch.row(1).iter().zip(&one) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoding_is_deterministic_and_leaves_digest_alone() {
    let model = VLModel::init(ModelConfig::default()).unwrap();
    let before = model.digest();
    let c = corpus();
    let a = encode_image(&model, &c.samples[0].image).unwrap();
    let b = encode_image(&model, &c.samples[0].image).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.digest(), before);
    assert_eq!(VLModel::init(ModelConfig::default()).unwrap().digest(), before);
    let other = VLModel::init(ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
    assert_ne!(other.digest(), before);
}

#[test]
fn unknown_or_oversized_tokens_fail() {
    let model = VLModel::init(small_config()).unwrap();
    assert!(encode_text(&model, &[model.config.vocab_size]).is_err());
    assert!(encode_text(&model, &[]).is_err());
    assert!(encode_text(&model, &vec![1; model.config.text_context_len + 1]).is_err());
}

#[test]
fn pseudo_token_gradient_passes_grad_check() {
    let model = VLModel::init(small_config()).unwrap();
    let w = model.config.width;
    let template = model.embed_tokens(&[3, 4]).unwrap();
    let target = Tensor::randn(&[1, model.config.d], 1.0, &mut rng::rng(7));
    let pseudo = Tensor::randn(&[1, w], 0.5, &mut rng::rng(8));
    let err = grad_check(
        |g, xs| {
            let mut b = Binding::frozen(&model);
            let t = g.constant(template.clone().reshape(&[1, 2, w])?)?;
            let p = g.reshape(xs[0], &[1, 1, w])?;
            let seq = g.concat(t, p, 1)?;
            let f = text_features_from_embeddings(g, &mut b, seq, &[3])?;
            let tgt = g.constant(target.clone())?;
            let cos = g.cosine_rows(f, tgt)?;
            let neg = g.scale(cos, -1.0)?;
            let loss = g.add_scalar(neg, 1.0)?;
            g.sum(loss)
        },
        &[pseudo],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn pseudo_patch_gradient_passes_grad_check() {
    let model = VLModel::init(small_config()).unwrap();
    let (u, w) = (model.config.num_patches, model.config.width);
    let target = Tensor::randn(&[1, model.config.d], 1.0, &mut rng::rng(9));
    let pseudo = Tensor::randn(&[2, w], 0.5, &mut rng::rng(10));
    let map: Vec<usize> = (0..u).map(|j| j * 2 / u).collect();
    let err = grad_check(
        |g, xs| {
            let mut b = Binding::frozen(&model);
            let slots = g.gather_rows(xs[0], &map, &[1, u, w])?;
            let f = image_features_from_patch_embeddings(g, &mut b, slots)?;
            let tgt = g.constant(target.clone())?;
            let cos = g.cosine_rows(f, tgt)?;
            let neg = g.scale(cos, -1.0)?;
            let loss = g.add_scalar(neg, 1.0)?;
            g.sum(loss)
        },
        &[pseudo],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn trainable_binding_produces_parameter_gradients() {
    let model = VLModel::init(small_config()).unwrap();
    let c = corpus();
    let mut g = Graph::new();
    let mut b = Binding::trainable_where(&model, xgap::model::is_projection);
    let f = xgap::model::image_features(&mut g, &mut b, &[&c.samples[0].image]).unwrap();
    let loss = g.sum(f).unwrap();
    let grads = g.backward(loss).unwrap();
    let vars = b.trainable_vars();
    assert_eq!(vars.len(), 1);
    assert!(grads.get(vars[0].1).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn checkpoint_round_trip() {
    let mut model = VLModel::init(small_config()).unwrap();
    model.temperature = 0.5;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.digest(), model.digest());
    assert_eq!(back.config, model.config);
    assert_eq!(back.temperature, 0.5);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = VLModel::init(small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'Y';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}
