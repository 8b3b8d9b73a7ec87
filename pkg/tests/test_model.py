"""Network behaviour: embeddings, attention vs a naive loop oracle, stream
isolation, masking/padding invariance, and the full-model gradient check."""

import math

import numpy as np
import pytest

import interbert.numerics as nt
from interbert.data import make_batch, synth_corpus
from interbert.masking import MaskingConfig, mask_pair
from interbert.model import (
    InterBert,
    ModelConfig,
    VARIANT_SINGLE_STREAM,
    build_layout,
    count_parameters,
    init_parameters,
    parameter_spec,
)
from interbert.numerics import ParameterSet, Tensor, backward, finite_diff_check


def tiny_config(**overrides):
    base = dict(
        hidden_size=8,
        num_heads=2,
        ffn_size=16,
        num_interaction_layers=2,
        num_extraction_layers=1,
        vocab_size=50,
        object_feature_dim=6,
        max_text_len=12,
        max_objects=6,
        num_object_classes=5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_inputs(rng, m=4, n_tokens=6, config=None):
    config = config or tiny_config()
    tokens = np.concatenate([[1], rng.integers(4, config.vocab_size, size=n_tokens - 2), [2]])
    features = rng.normal(size=(m, config.object_feature_dim))
    x1 = rng.uniform(0, 50, size=m)
    y1 = rng.uniform(0, 50, size=m)
    bboxes = np.stack([x1, y1, x1 + rng.uniform(5, 40, size=m), y1 + rng.uniform(5, 40, size=m)], axis=1)
    return dict(tokens=tokens, features=features, bboxes=bboxes, width=100, height=100)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def test_init_deterministic():
    cfg = tiny_config()
    a = init_parameters(cfg, seed=42)
    b = init_parameters(cfg, seed=42)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].values, b[name].values)


def test_init_weight_std_monte_carlo():
    cfg = tiny_config(hidden_size=768, num_heads=12, ffn_size=128, vocab_size=100,
                      num_interaction_layers=1, num_extraction_layers=1)
    params = init_parameters(cfg, seed=0)
    w = params["interaction.layer0.attn.wq"].values  # 768 x 768 draw
    assert abs(w.std() - 0.02) < 0.002
    assert abs(w.mean()) < 0.001


def test_init_ln_gains_ones_biases_zero():
    params = init_parameters(tiny_config(), seed=1)
    assert np.all(params["interaction.layer0.ln1.gain"].values == 1.0)
    assert np.all(params["interaction.layer0.ln1.bias"].values == 0.0)
    assert np.all(params["embed.feature_proj.b"].values == 0.0)


def test_parameter_count_stable_and_consistent():
    cfg = tiny_config()
    count = count_parameters(cfg)
    assert count == count_parameters(cfg)
    assert count == init_parameters(cfg, seed=0).num_values()


def test_parameter_count_full_scale_logged():
    # full-scale configuration; counted from shapes without allocating
    count = count_parameters(ModelConfig())
    assert count > 100_000_000
    print(f"full-scale parameter count: {count}")


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(hidden_size=10, num_heads=4).validate()
    with pytest.raises(ValueError):
        tiny_config(num_extraction_layers=0).validate()
    tiny_config(num_extraction_layers=0, architecture_variant=VARIANT_SINGLE_STREAM).validate()
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"hidden": 4})


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def test_embed_text_shape_and_position_effect(rng):
    model = InterBert.create(tiny_config(), seed=0)
    out = model.embed_text([1, 7, 7, 2])
    assert out.shape == (4, 8)
    # same token at different positions embeds differently
    assert not np.allclose(out.values[1], out.values[2])


def test_embed_text_zeroed_tables_yield_bias_rows():
    model = InterBert.create(tiny_config(), seed=0)
    for name in ("embed.token_table", "embed.position_table", "embed.segment_table"):
        model.params[name].values[...] = 0.0
    bias = model.params["embed.text_ln.bias"].values
    out = model.embed_text([1, 5, 2]).values
    for row in out:
        np.testing.assert_allclose(row, bias, atol=1e-5)


def test_embed_text_length_limit():
    model = InterBert.create(tiny_config(max_text_len=4), seed=0)
    with pytest.raises(ValueError):
        model.embed_text([1, 5, 5, 5, 2])


def test_embed_image_shapes(rng):
    model = InterBert.create(tiny_config(), seed=0)
    inputs = tiny_inputs(rng, m=3)
    out = model.embed_image(inputs["features"], inputs["bboxes"], 100, 100)
    assert out.shape == (4, 8)


def test_embed_image_summary_is_feature_space_mean(rng):
    # opposite features cancel: the summary row depends only on the mean,
    # so f,-f and g,-g give identical summary rows
    model = InterBert.create(tiny_config(), seed=0)
    boxes = np.array([[0.0, 0.0, 100.0, 100.0], [0.0, 0.0, 100.0, 100.0]])
    f = rng.normal(size=6)
    g = rng.normal(size=6)
    row_f = model.embed_image(np.stack([f, -f]), boxes, 100, 100).values[0]
    row_g = model.embed_image(np.stack([g, -g]), boxes, 100, 100).values[0]
    np.testing.assert_allclose(row_f, row_g, atol=1e-12)


def test_embed_image_single_object_summary_equals_object(rng):
    # with one object whose box is the whole image, the summary row sees the
    # same feature vector and the same geometry, so the rows coincide
    model = InterBert.create(tiny_config(), seed=0)
    f = rng.normal(size=(1, 6))
    box = np.array([[0.0, 0.0, 100.0, 100.0]])
    out = model.embed_image(f, box, 100, 100).values
    np.testing.assert_allclose(out[0], out[1], atol=1e-12)


def test_embed_image_errors(rng):
    model = InterBert.create(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        model.embed_image(np.zeros((0, 6)), np.zeros((0, 4)), 100, 100)
    with pytest.raises(ValueError):
        model.embed_image(np.zeros((1, 6)), np.array([[0.0, 0.0, 120.0, 50.0]]), 100, 100)


# ---------------------------------------------------------------------------
# interaction stack vs naive oracle
# ---------------------------------------------------------------------------

def naive_encoder_layer(x, p, prefix, key_bias, num_heads, eps):
    """Per-position attention loop plus FFN, written independently of the
    tensor engine (plain numpy, explicit loops)."""
    length, hidden = x.shape
    head_dim = hidden // num_heads
    q = x @ p[prefix + "attn.wq"].values + p[prefix + "attn.bq"].values
    k = x @ p[prefix + "attn.wk"].values
    v = x @ p[prefix + "attn.wv"].values + p[prefix + "attn.bv"].values
    attended = np.zeros_like(x)
    for h in range(num_heads):
        s = slice(h * head_dim, (h + 1) * head_dim)
        for i in range(length):
            scores = np.empty(length)
            for j in range(length):
                scores[j] = float(q[i, s] @ k[j, s]) / math.sqrt(head_dim) + key_bias[j]
            scores -= scores.max()
            weights = np.exp(scores)
            weights /= weights.sum()
            for j in range(length):
                attended[i, s] += weights[j] * v[j, s]
    attended = attended @ p[prefix + "attn.wo"].values + p[prefix + "attn.bo"].values

    def ln(rows, gain, bias):
        mu = rows.mean(axis=-1, keepdims=True)
        var = ((rows - mu) ** 2).mean(axis=-1, keepdims=True)
        return (rows - mu) / np.sqrt(var + eps) * gain + bias

    mid = ln(x + attended, p[prefix + "ln1.gain"].values, p[prefix + "ln1.bias"].values)
    inner = mid @ p[prefix + "ffn.w1"].values + p[prefix + "ffn.b1"].values
    from scipy.special import erf

    inner = inner * 0.5 * (1.0 + erf(inner / math.sqrt(2.0)))
    ff = inner @ p[prefix + "ffn.w2"].values + p[prefix + "ffn.b2"].values
    return ln(mid + ff, p[prefix + "ln2.gain"].values, p[prefix + "ln2.bias"].values)


def test_single_layer_matches_naive_attention_oracle():
    cfg = tiny_config(num_interaction_layers=1)
    rng = np.random.default_rng(0)
    for trial in range(20):
        model = InterBert.create(cfg, seed=trial)
        x = rng.normal(size=(7, cfg.hidden_size))
        layout = build_layout(2, 4)  # 3 image + 4 text positions
        got = model.interaction_forward(Tensor(x), layout).values
        want = naive_encoder_layer(x, model.params, "interaction.layer0.",
                                   layout.key_bias(), cfg.num_heads, cfg.ln_eps)
        assert np.max(np.abs(got - want)) < 1e-10


def test_single_layer_one_head_hand_weights():
    cfg = tiny_config(hidden_size=4, num_heads=1, ffn_size=4, num_interaction_layers=1)
    model = InterBert.create(cfg, seed=3)
    rng = np.random.default_rng(4)
    for name, t in model.params.items():
        if name.startswith("interaction.layer0."):
            t.values[...] = rng.normal(0, 0.5, size=t.values.shape)
        if name.endswith("ln1.gain") or name.endswith("ln2.gain"):
            t.values[...] = 1.0
        if name.endswith("ln1.bias") or name.endswith("ln2.bias"):
            t.values[...] = 0.0
    x = rng.normal(size=(5, 4))
    layout = build_layout(1, 3)
    got = model.interaction_forward(Tensor(x), layout).values
    want = naive_encoder_layer(x, model.params, "interaction.layer0.",
                               layout.key_bias(), 1, cfg.ln_eps)
    assert np.max(np.abs(got - want)) < 1e-10


def test_interaction_preserves_shape(rng):
    cfg = tiny_config()
    model = InterBert.create(cfg, seed=0)
    x = Tensor(rng.normal(size=(9, cfg.hidden_size)))
    out = model.interaction_forward(x, build_layout(4, 4))
    assert out.shape == x.shape


def test_zeroed_value_and_ffn_weights_give_iterated_ln(rng):
    cfg = tiny_config(num_interaction_layers=2)
    model = InterBert.create(cfg, seed=0)
    for name, t in model.params.items():
        if ".attn.wv" in name or ".attn.wo" in name or ".ffn.w" in name:
            t.values[...] = 0.0
        if ".attn.bv" in name or ".attn.bo" in name or ".ffn.b" in name:
            t.values[...] = 0.0
    x = rng.normal(size=(6, cfg.hidden_size))

    def ln(rows):
        mu = rows.mean(axis=-1, keepdims=True)
        var = ((rows - mu) ** 2).mean(axis=-1, keepdims=True)
        return (rows - mu) / np.sqrt(var + cfg.ln_eps)

    got = model.interaction_forward(Tensor(x), build_layout(2, 3)).values
    want = ln(ln(ln(ln(x))))  # two layers, two normalizations each
    assert np.max(np.abs(got - want)) < 1e-9


# ---------------------------------------------------------------------------
# extraction stack
# ---------------------------------------------------------------------------

def test_extraction_stream_isolation(rng):
    cfg = tiny_config()
    model = InterBert.create(cfg, seed=5)
    layout = build_layout(3, 5)
    fused = rng.normal(size=(9, cfg.hidden_size))
    perturbed = fused.copy()
    perturbed[layout.image_length:, :] += rng.normal(size=(5, cfg.hidden_size))
    out_a = model.extraction_forward(Tensor(fused), layout)
    out_b = model.extraction_forward(Tensor(perturbed), layout)
    assert np.array_equal(out_a.h_image.values, out_b.h_image.values)
    assert not np.allclose(out_a.h_text.values, out_b.h_text.values)


def test_extraction_spans_cover_input(rng):
    cfg = tiny_config()
    model = InterBert.create(cfg, seed=5)
    layout = build_layout(3, 5)
    out = model.extraction_forward(Tensor(rng.normal(size=(9, cfg.hidden_size))), layout)
    assert out.h_image.shape[0] + out.h_text.shape[0] == 9
    assert out.pooled_image.shape == (1, cfg.hidden_size)
    assert out.pooled_text.shape == (1, cfg.hidden_size)


def test_extraction_zeroed_weights_reproduce_spans_up_to_ln(rng):
    cfg = tiny_config(num_extraction_layers=1)
    model = InterBert.create(cfg, seed=0)
    for name, t in model.params.items():
        if name.startswith("extract_") and (".attn.wv" in name or ".attn.wo" in name or ".ffn.w" in name):
            t.values[...] = 0.0
        if name.startswith("extract_") and (".attn.bv" in name or ".attn.bo" in name or ".ffn.b" in name):
            t.values[...] = 0.0
    layout = build_layout(2, 4)
    fused = rng.normal(size=(7, cfg.hidden_size))

    def ln(rows):
        mu = rows.mean(axis=-1, keepdims=True)
        var = ((rows - mu) ** 2).mean(axis=-1, keepdims=True)
        return (rows - mu) / np.sqrt(var + cfg.ln_eps)

    out = model.extraction_forward(Tensor(fused), layout)
    np.testing.assert_allclose(out.h_image.values, ln(ln(fused[:3])), atol=1e-9)
    np.testing.assert_allclose(out.h_text.values, ln(ln(fused[3:])), atol=1e-9)


def test_extraction_rejected_under_single_stream(rng):
    cfg = tiny_config(num_extraction_layers=0, architecture_variant=VARIANT_SINGLE_STREAM)
    model = InterBert.create(cfg, seed=0)
    with pytest.raises(ValueError):
        model.extraction_forward(Tensor(rng.normal(size=(7, 8))), build_layout(2, 4))


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def test_itm_zero_vector_gates_everything(rng):
    model = InterBert.create(tiny_config(), seed=0)
    zero = Tensor(np.zeros((1, 8)))
    a = model.itm_score(zero, Tensor(rng.normal(size=(1, 8)))).item()
    b = model.itm_score(zero, Tensor(rng.normal(size=(1, 8)))).item()
    assert a == b


def test_itm_symmetry(rng):
    model = InterBert.create(tiny_config(), seed=0)
    u = Tensor(rng.normal(size=(1, 8)))
    v = Tensor(rng.normal(size=(1, 8)))
    assert model.itm_score(u, v).item() == model.itm_score(v, u).item()


def test_itm_hand_mlp():
    cfg = tiny_config(hidden_size=2, num_heads=1, ffn_size=2)
    model = InterBert.create(cfg, seed=0)
    p = model.params
    p["heads.itm.w1"].values[...] = np.array([[1.0, 0.0], [0.0, 1.0]])
    p["heads.itm.b1"].values[...] = 0.0
    p["heads.itm.w2"].values[...] = np.array([[2.0], [-1.0]])
    p["heads.itm.b2"].values[...] = 0.5
    u, v = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])
    gated = u * v  # [3, -2]
    gelu = lambda x: x * 0.5 * (1 + math.erf(x / math.sqrt(2)))
    want = 2.0 * gelu(3.0) - 1.0 * gelu(-2.0) + 0.5
    got = model.itm_score(Tensor(u), Tensor(v)).item()
    assert abs(got - want) < 1e-12


def test_msm_logits_shapes_and_zero_weights(rng):
    cfg = tiny_config()
    model = InterBert.create(cfg, seed=0)
    h = Tensor(rng.normal(size=(6, cfg.hidden_size)))
    out = model.msm_logits(h)
    assert out.shape == (6, cfg.vocab_size)
    model.params["heads.msm.w"].values[...] = 0.0
    model.params["heads.msm.b"].values[...] = 0.0
    logits = model.msm_logits(h)
    loss = nt.cross_entropy_logits(logits, [5] * 6)
    assert abs(loss.item() - math.log(cfg.vocab_size)) < 1e-12


def test_msm_tied_weights(rng):
    cfg = tiny_config(tie_msm_weights=True)
    model = InterBert.create(cfg, seed=0)
    assert "heads.msm.w" not in model.params
    h = rng.normal(size=(4, cfg.hidden_size))
    got = model.msm_logits(Tensor(h)).values
    want = h @ model.params["embed.token_table"].values.T + model.params["heads.msm.b"].values
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_mrm_logits_exclude_summary(rng):
    cfg = tiny_config()
    model = InterBert.create(cfg, seed=0)
    h = Tensor(rng.normal(size=(5, cfg.hidden_size)))  # summary + 4 objects
    out = model.mrm_logits(h)
    assert out.shape == (4, cfg.num_object_classes)


def test_mrm_single_class_forced_zero_loss(rng):
    cfg = tiny_config(num_object_classes=1)
    model = InterBert.create(cfg, seed=0)
    h = Tensor(rng.normal(size=(3, cfg.hidden_size)))
    loss = nt.cross_entropy_logits(model.mrm_logits(h), [0, 0])
    assert loss.item() == 0.0  # log softmax of a single class


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def test_forward_deterministic(rng):
    model = InterBert.create(tiny_config(), seed=0)
    inputs = tiny_inputs(rng)
    a = model.forward(**inputs)
    b = model.forward(**inputs)
    assert np.array_equal(a.pooled_image.values, b.pooled_image.values)
    assert np.array_equal(a.h_text.values, b.h_text.values)


def test_forward_padding_invariance(rng):
    cfg = tiny_config()
    model = InterBert.create(cfg, seed=0)
    inputs = tiny_inputs(rng, m=3, n_tokens=5)
    plain = model.forward(**inputs)

    # pad with one junk object and two junk tokens, masked out
    padded_tokens = np.concatenate([inputs["tokens"], [0, 0]])
    padded_features = np.concatenate([inputs["features"], rng.normal(size=(1, cfg.object_feature_dim))])
    padded_bboxes = np.concatenate([inputs["bboxes"], [[0, 0, 1, 1]]])
    padded = model.forward(
        tokens=padded_tokens,
        features=padded_features,
        bboxes=padded_bboxes,
        width=100, height=100,
        text_valid=np.array([True] * 5 + [False] * 2),
        object_valid=np.array([True] * 3 + [False]),
    )
    assert np.max(np.abs(padded.h_image.values[:4] - plain.h_image.values)) < 1e-8
    assert np.max(np.abs(padded.h_text.values[:5] - plain.h_text.values)) < 1e-8
    assert np.max(np.abs(padded.pooled_image.values - plain.pooled_image.values)) < 1e-8


def test_forward_ignores_padded_value_changes(rng):
    cfg = tiny_config()
    model = InterBert.create(cfg, seed=1)
    inputs = tiny_inputs(rng, m=2, n_tokens=4)
    text_valid = np.array([True] * 4 + [False])
    object_valid = np.array([True, True, False])
    base = dict(
        tokens=np.concatenate([inputs["tokens"], [0]]),
        features=np.concatenate([inputs["features"], np.zeros((1, cfg.object_feature_dim))]),
        bboxes=np.concatenate([inputs["bboxes"], [[0, 0, 1, 1]]]),
        width=100, height=100, text_valid=text_valid, object_valid=object_valid,
    )
    out_a = model.forward(**base)
    altered = dict(base)
    altered["tokens"] = base["tokens"].copy()
    altered["tokens"][-1] = 7  # junk token id at a padded position
    altered["features"] = base["features"].copy()
    altered["features"][-1] = rng.normal(size=cfg.object_feature_dim)
    out_b = model.forward(**altered)
    # valid-position outputs are unchanged well within 1e-8
    assert np.max(np.abs(out_a.h_text.values[:4] - out_b.h_text.values[:4])) < 1e-8
    assert np.max(np.abs(out_a.h_image.values[:3] - out_b.h_image.values[:3])) < 1e-8


def test_single_stream_variant_shapes(rng):
    cfg = tiny_config(num_extraction_layers=0, architecture_variant=VARIANT_SINGLE_STREAM)
    model = InterBert.create(cfg, seed=0)
    inputs = tiny_inputs(rng, m=3, n_tokens=5)
    out = model.forward(**inputs)
    assert out.h_image.shape == (4, cfg.hidden_size)
    assert out.h_text.shape == (5, cfg.hidden_size)
    assert out.pooled_image.shape == (1, cfg.hidden_size)


def test_masked_feature_blackout(rng):
    """Replacing the original features of a masked object changes nothing:
    the model only ever sees the zeroed row."""
    corpus = synth_corpus(seed=3, num_images=4, num_classes=6, feature_dim=6)
    cfg = tiny_config(object_feature_dim=6, vocab_size=corpus.vocab.size,
                      num_object_classes=6)
    model = InterBert.create(cfg, seed=0)
    mask_cfg = MaskingConfig(anchor_prob=0.9)
    pair = corpus.pairs[0]
    gen = np.random.default_rng(8)
    sample = mask_pair(pair, corpus.vocab, gen, mask_cfg)
    assert sample.plan.image_positions, "fixture needs at least one masked object"

    out_a = model.forward(**sample.model_inputs())
    # corrupt the pre-mask original; re-apply the same plan
    from interbert.masking import apply_masks

    corrupted = pair.features.copy()
    for position in sample.plan.image_positions:
        corrupted[position] = rng.normal(size=6) * 100
    gen2 = np.random.default_rng(8)
    _, refeats, _, _ = apply_masks(sample.raw_tokens, corrupted, sample.plan, corpus.vocab, gen2)
    out_b = model.forward(tokens=sample.tokens, features=refeats, bboxes=sample.bboxes,
                          width=sample.width, height=sample.height)
    assert np.array_equal(out_a.h_image.values, out_b.h_image.values)
    assert np.array_equal(out_a.h_text.values, out_b.h_text.values)


# ---------------------------------------------------------------------------
# gradients through the whole network
# ---------------------------------------------------------------------------

def full_model_loss(model, sample_inputs, msm_targets, mrm_targets, itm_label):
    out = model.forward(**sample_inputs)
    msm = nt.cross_entropy_logits(model.msm_logits(out.h_text), msm_targets)
    mrm = nt.cross_entropy_logits(model.mrm_logits(out.h_image), mrm_targets)
    logit = nt.reshape(model.itm_score(out.pooled_image, out.pooled_text), (1,))
    itm = nt.binary_cross_entropy_logits(logit, [float(itm_label)])
    return nt.add(nt.add(msm, mrm), itm)


def test_full_model_gradcheck(rng):
    # init_std 0.5 puts the network at a generic point where attention is
    # non-degenerate, so no sampled coordinate has a vanishing gradient
    # that finite-difference roundoff could swamp
    cfg = tiny_config(init_std=0.5)
    model = InterBert.create(cfg, seed=9)
    inputs = tiny_inputs(rng, m=4, n_tokens=6, config=cfg)
    msm_targets = np.array([-1, 8, -1, 30, -1, -1])
    mrm_targets = np.array([-1, 2, 4, -1])

    def loss_fn():
        return full_model_loss(model, inputs, msm_targets, mrm_targets, 1)

    err = finite_diff_check(loss_fn, model.params, step=1e-5, sample_count=200, seed=11)
    assert err < 1e-4, f"full-model gradient mismatch: {err}"


def test_checkpoint_round_trip_through_model(tmp_path, rng):
    from interbert.numerics import save_checkpoint

    cfg = tiny_config()
    model = InterBert.create(cfg, seed=4)
    path = tmp_path / "model.ibt"
    save_checkpoint(path, model.params)
    clone = InterBert.from_checkpoint(cfg, path)
    inputs = tiny_inputs(rng)
    a = model.forward(**inputs)
    b = clone.forward(**inputs)
    assert np.array_equal(a.pooled_text.values, b.pooled_text.values)
