from __future__ import annotations

import numpy as np
import pytest

from mixedprefix.autodiff import Graph, RngStream, Tensor, gradient_check
from mixedprefix.errors import ContractViolation, ShapeError, TrainingDiverged
from mixedprefix.lm import (
    AdamW,
    AdamWConfig,
    LmConfig,
    LmModel,
    PrefixActivations,
    TrainingBudget,
    collate,
    generate,
    lm_forward,
    mean_nll,
    nll_per_token,
    pretrain_backbone,
)
from mixedprefix.lm.model import sequence_nll
from mixedprefix.lm.training import ensure_finite


def test_logits_shape(backbone):
    out = lm_forward(backbone, Graph(grad_enabled=False), np.array([[2, 4, 5], [2, 6, 3]]))
    assert out.logits.shape == (2, 3, backbone.config.vocab_size)


def test_attention_is_causal(backbone):
    a = lm_forward(backbone, Graph(grad_enabled=False), np.array([[2, 4, 5, 6]])).logits.value
    b = lm_forward(backbone, Graph(grad_enabled=False), np.array([[2, 4, 5, 9]])).logits.value
    assert np.array_equal(a[0, :3], b[0, :3])
    assert not np.array_equal(a[0, 3], b[0, 3])


def test_prefix_changes_every_position(backbone):
    g = Graph(grad_enabled=False)
    D = backbone.config.d_model
    rng = RngStream(0, "prefix")
    prefix = PrefixActivations.from_arrays(g, [rng.normal(0, 1, (1, 2, D))], [rng.normal(0, 1, (1, 2, D))])
    ids = np.array([[2, 4, 5]])
    with_prefix = lm_forward(backbone, g, ids, prefix).logits.value
    without = lm_forward(backbone, Graph(grad_enabled=False), ids).logits.value
    assert not np.any(np.all(np.isclose(with_prefix, without), axis=-1))


def test_sequence_plus_prefix_must_fit(backbone):
    g = Graph(grad_enabled=False)
    D = backbone.config.d_model
    prefix = PrefixActivations.from_arrays(g, [np.zeros((1, 4, D))], [np.zeros((1, 4, D))])
    ids = np.full((1, backbone.config.max_seq - 3), 4)
    with pytest.raises(ShapeError):
        lm_forward(backbone, g, ids, prefix)


def test_prefix_with_wrong_width_is_rejected(backbone):
    g = Graph(grad_enabled=False)
    prefix = PrefixActivations.from_arrays(g, [np.zeros((1, 2, 3))], [np.zeros((1, 2, 3))])
    with pytest.raises(ShapeError):
        lm_forward(backbone, g, np.array([[2, 4]]), prefix)


def test_token_outside_vocabulary(backbone):
    with pytest.raises(ShapeError):
        lm_forward(backbone, Graph(), np.array([[2, backbone.config.vocab_size]]))


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        LmConfig(vocab_size=10, d_model=10, n_heads=3)


def test_backbone_gradients_match_finite_differences(lm_config):
    model = LmModel.init(lm_config, RngStream(1, "gradcheck")).unfreeze()
    for t in model.params.values():
        t.data += RngStream(2, t.name or "").normal(0.0, 0.2, t.shape)
    batch = collate([[2, 4, 5, 6, 3], [2, 7, 3]])

    def loss(g, nodes):
        return nll_per_token(lm_forward(model, g, batch.inputs).logits, batch.targets)

    report = gradient_check(loss, model.params, tol=1e-4, atol=1e-8, max_elements=6)
    assert report.passed, report.summary()


def test_padding_does_not_change_per_sequence_nll(backbone):
    short = [2, 4, 5, 3]
    alone = mean_nll(backbone, [short])
    batch = collate([short, [2, 4, 5, 6, 7, 8, 3]])
    g = Graph(grad_enabled=False)
    logits = lm_forward(backbone, g, batch.inputs).logits.value
    sums, counts = sequence_nll(logits, batch.targets)
    assert counts[0] == 3
    assert sums[0] / counts[0] == pytest.approx(alone, rel=1e-12)


def test_greedy_generation_is_deterministic_and_stops(backbone):
    a = generate(backbone, None, [2], 10)
    b = generate(backbone, None, [2], 10)
    assert a == b
    assert len(a) <= 11
    full = generate(backbone, None, [2], 100)
    assert len(full) <= backbone.config.max_seq


def test_temperature_sampling_reproduces_under_the_same_stream(backbone):
    a = generate(backbone, None, [2], 8, "temperature", RngStream(5, "gen"), 1.5)
    b = generate(backbone, None, [2], 8, "temperature", RngStream(5, "gen"), 1.5)
    assert a == b
    with pytest.raises(ValueError):
        generate(backbone, None, [2], 8, "temperature", None)


def test_eos_stops_generation(backbone):
    first = generate(backbone, None, [2], 1)[-1]
    out = generate(backbone, None, [2], 10, eos_id=first)
    assert out == [2, first]


def test_pretraining_lowers_validation_nll_and_freezes(lm_config):
    model = LmModel.init(lm_config, RngStream(0, "pretrain"))
    train = [[2, 4, 5, 6, 3]] * 32
    result = pretrain_backbone(
        model,
        train,
        train[:4],
        AdamWConfig(lr=0.01),
        TrainingBudget(max_epochs=20, max_steps=60, batch_size=8),
        RngStream(0, "pretrain/train"),
    )
    assert result.final_val_nll < result.initial_val_nll
    assert model.frozen
    with pytest.raises(ContractViolation):
        pretrain_backbone(model, train)


def test_adamw_only_touches_given_gradients():
    a = Tensor(np.ones(3), requires_grad=True, name="a")
    b = Tensor(np.ones(3), requires_grad=True, name="b")
    opt = AdamW({"a": a, "b": b}, AdamWConfig(lr=0.1, weight_decay=0.0))
    opt.step({"a": np.ones(3)})
    assert np.all(a.data < 1.0)
    assert np.array_equal(b.data, np.ones(3))
    assert opt.steps == {"a": 1}


def test_non_finite_loss_raises_with_snapshot():
    params = {"w": Tensor(np.ones(2), requires_grad=True, name="w")}
    with pytest.raises(TrainingDiverged) as info:
        ensure_finite(float("nan"), 7, params)
    assert info.value.step == 7
    assert np.array_equal(info.value.last_good["w"], np.ones(2))


def test_pretraining_is_reproducible_under_the_same_seed(lm_config):
    train = [[2, 4, 5, 6, 3], [2, 7, 8, 3], [2, 9, 4, 4, 3]] * 8
    budget = TrainingBudget(max_epochs=3, max_steps=12, batch_size=4)

    def run():
        model = LmModel.init(lm_config, RngStream(3, "pretrain"))
        pretrain_backbone(model, train, train[:3], AdamWConfig(lr=0.01), budget, RngStream(3, "pretrain/train"))
        return model.checksums()

    assert run() == run()


def test_prefix_at_one_layer_leaves_lower_layers_alone(lm_config):
    model = LmModel.init(lm_config.model_copy(update={"n_layers": 2}), RngStream(0, "two-layer")).freeze()
    D = model.config.d_model
    rng = RngStream(0, "layer-prefix")
    keys = [rng.normal(0, 1, (1, 2, D)) for _ in range(2)]
    values = [rng.normal(0, 1, (1, 2, D)) for _ in range(2)]
    moved = [keys[0], keys[1] + 1.0]
    ids = np.array([[2, 4, 5]])
    ga, gb = Graph(grad_enabled=False), Graph(grad_enabled=False)
    a = lm_forward(model, ga, ids, PrefixActivations.from_arrays(ga, keys, values))
    b = lm_forward(model, gb, ids, PrefixActivations.from_arrays(gb, moved, values))
    assert np.array_equal(a.hidden[0].value, b.hidden[0].value)
    assert np.array_equal(a.hidden[1].value, b.hidden[1].value)
    assert not np.allclose(a.hidden[2].value, b.hidden[2].value)


def test_all_zero_prefix_still_changes_the_logits(backbone):
    g = Graph(grad_enabled=False)
    D = backbone.config.d_model
    prefix = PrefixActivations.from_arrays(g, [np.zeros((1, 2, D))], [np.zeros((1, 2, D))])
    ids = np.array([[2, 4, 5]])
    with_prefix = lm_forward(backbone, g, ids, prefix).logits.value
    without = lm_forward(backbone, Graph(grad_enabled=False), ids).logits.value
    assert not np.allclose(with_prefix, without)
