from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from lq_adapter_desk.engine import tensor as T
from lq_adapter_desk.engine.adapter import (
    LQ0_NAME,
    LearnableQueryState,
    LQAdapterModel,
    count_by_component,
    decay_group_count,
    extract,
    inject,
    model_layout,
    param_count,
)
from lq_adapter_desk.engine.attention import AttentionParams, LayerNorm, Linear
from lq_adapter_desk.engine.errors import CheckpointError, ConfigError
from lq_adapter_desk.engine.gradcheck import check_function, perturb_gates
from lq_adapter_desk.engine.spatial_prior import MultiScaleTokens
from lq_adapter_desk.engine.tensor import Tape, Tensor


def _image(size: int = 32, seed: int = 0) -> Tensor:
    return Tensor(np.random.default_rng(seed).uniform(size=(1, size, size)))


def _randomized(model: LQAdapterModel, seed: int = 0) -> LQAdapterModel:
    """Every trainable tensor (norms included) replaced by random values."""
    rng = np.random.default_rng(seed)
    names = model.params.trainable_names()
    return model.with_params(
        model.params.replace({name: rng.normal(0.0, 0.5, size=model.params[name].shape) for name in names})
    )


def _ln(x, store, prefix, eps=1e-6):
    centered = x - x.mean(axis=-1, keepdims=True)
    xhat = centered / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    return xhat * store[f"{prefix}.gain"].data + store[f"{prefix}.bias"].data


def _attn(q_src, kv_src, store, prefix, heads):
    def lin(x, name):
        return x @ store[f"{prefix}.{name}.weight"].data + store[f"{prefix}.{name}.bias"].data

    q, k, v = lin(q_src, "q"), lin(kv_src, "k"), lin(kv_src, "v")
    d = q.shape[1] // heads
    out = np.zeros_like(q)
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        logits = q[:, cols] @ k[:, cols].T / np.sqrt(d)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        out[:, cols] = (w / w.sum(axis=1, keepdims=True)) @ v[:, cols]
    return lin(out, "o")


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _reference_extract(f_vit, f_sp, lq, injected, store, prefix, heads):
    ext = f"{prefix}.extractor"
    gathered = _attn(_ln(f_sp, store, f"{ext}.norm_sp"), _ln(f_vit, store, f"{ext}.norm_vit"), store, f"{ext}.attn", heads)
    h = _ln(gathered, store, f"{ext}.ffn_norm")
    hidden = _gelu(h @ store[f"{ext}.ffn.fc1.weight"].data + store[f"{ext}.ffn.fc1.bias"].data)
    sp = gathered + hidden @ store[f"{ext}.ffn.fc2.weight"].data + store[f"{ext}.ffn.fc2.bias"].data

    lqp = f"{prefix}.lq"
    lq_bar = _attn(_ln(lq, store, f"{lqp}.norm_lq"), _ln(injected, store, f"{lqp}.norm_vit"), store, f"{lqp}.gather", heads)
    lq_next = lq + _attn(_ln(lq_bar, store, f"{lqp}.norm_gathered"), _ln(sp, store, f"{lqp}.norm_sp"), store, f"{lqp}.refine", heads)

    wb = f"{lqp}.writeback"
    update = _attn(_ln(sp, store, f"{wb}.norm_sp"), _ln(lq_next, store, f"{wb}.norm_lq"), store, f"{wb}.attn", heads)
    return sp + update * store[f"{wb}.rho"].data, lq_next


def test_vit_path_equals_bare_backbone_at_init(make_config):
    model = LQAdapterModel.create(make_config())
    image = _image()

    _, tokens = model.forward(image)

    assert np.array_equal(tokens.data, model.backbone(image).data)


def test_lq_on_and_off_forwards_are_bitwise_identical_at_init(make_config):
    on = LQAdapterModel.create(make_config())
    off = LQAdapterModel.create(make_config(lq_blocks=()))
    image = _image(seed=3)

    sp_on, tokens_on = on.forward(image)
    sp_off, tokens_off = off.forward(image)

    assert np.array_equal(sp_on.data.data, sp_off.data.data)
    assert np.array_equal(tokens_on.data, tokens_off.data)
    assert np.array_equal(on.predict(image).data, off.predict(image).data)


def test_lq_disabled_extract_is_plain_extractor(make_config):
    model = _randomized(LQAdapterModel.create(make_config(lq_blocks=())))
    rng = np.random.default_rng(1)
    f_vit, sp = rng.normal(size=(4, 8)), rng.normal(size=(5, 8))
    f_sp = MultiScaleTokens(Tensor(sp), (0, 4), ((2, 2), (1, 1)))

    out, lq = extract(Tensor(f_vit), f_sp, None, model.blocks[0])

    store, ext = model.params, "adapter.blocks.0.extractor"
    gathered = _attn(_ln(sp, store, f"{ext}.norm_sp"), _ln(f_vit, store, f"{ext}.norm_vit"), store, f"{ext}.attn", 2)
    hidden = _gelu(_ln(gathered, store, f"{ext}.ffn_norm") @ store[f"{ext}.ffn.fc1.weight"].data + store[f"{ext}.ffn.fc1.bias"].data)
    expected = gathered + hidden @ store[f"{ext}.ffn.fc2.weight"].data + store[f"{ext}.ffn.fc2.bias"].data

    assert lq is None
    assert np.abs(out.data.data - expected).max() < 1e-10


def test_extract_matches_straight_line_reference(make_config):
    model = _randomized(LQAdapterModel.create(make_config(lq_count=3)), seed=2)
    rng = np.random.default_rng(4)
    f_vit, injected, sp, lq = (rng.normal(size=shape) for shape in ((4, 8), (4, 8), (5, 8), (3, 8)))
    f_sp = MultiScaleTokens(Tensor(sp), (0, 4), ((2, 2), (1, 1)))

    out, lq_next = extract(
        Tensor(f_vit), f_sp, LearnableQueryState(Tensor(lq)), model.blocks[1], injected=Tensor(injected)
    )
    sp_ref, lq_ref = _reference_extract(f_vit, sp, lq, injected, model.params, "adapter.blocks.1", 2)

    assert np.abs(out.data.data - sp_ref).max() < 1e-10
    assert np.abs(lq_next.queries.data - lq_ref).max() < 1e-10
    assert out.offsets == f_sp.offsets


def test_zero_writeback_gate_leaves_spatial_features_unchanged(make_config):
    model = _randomized(LQAdapterModel.create(make_config()))
    model = model.with_params(model.params.replace({"adapter.blocks.0.lq.writeback.rho": np.zeros(8)}))
    rng = np.random.default_rng(5)
    f_vit = Tensor(rng.normal(size=(4, 8)))
    f_sp = MultiScaleTokens(Tensor(rng.normal(size=(21, 8))), (0, 16, 20), ((4, 4), (2, 2), (1, 1)))
    lq = LearnableQueryState(Tensor(rng.normal(size=(4, 8))))
    block = model.blocks[0]

    with_lq, lq_next = extract(f_vit, f_sp, lq, block)
    without_lq, _ = extract(f_vit, f_sp, None, dataclasses.replace(block, queries=None))

    assert np.array_equal(with_lq.data.data, without_lq.data.data)
    assert not np.array_equal(lq_next.queries.data, lq.queries.data)


def test_extract_requires_query_state_for_enabled_block(make_config):
    model = LQAdapterModel.create(make_config())
    f_sp = MultiScaleTokens(Tensor(np.ones((21, 8))), (0, 16, 20), ((4, 4), (2, 2), (1, 1)))

    with pytest.raises(ConfigError, match="no query state"):
        extract(Tensor(np.ones((4, 8))), f_sp, None, model.blocks[0])


def test_inject_with_zero_gate_is_identity(make_config):
    model = _randomized(LQAdapterModel.create(make_config()))
    model = model.with_params(model.params.replace({"adapter.blocks.0.injector.gamma": np.zeros(8)}))
    rng = np.random.default_rng(6)
    f_vit = Tensor(rng.normal(size=(4, 8)))
    f_sp = MultiScaleTokens(Tensor(rng.normal(size=(21, 8))), (0, 16, 20), ((4, 4), (2, 2), (1, 1)))

    assert np.array_equal(inject(f_vit, f_sp, model.blocks[0]).data, f_vit.data)


def test_inject_single_token_closed_form(make_config):
    block = LQAdapterModel.create(make_config()).blocks[0]
    eye = Linear(Tensor(np.eye(8)), Tensor(np.zeros(8)))
    unit = LayerNorm(Tensor(np.ones(8)), Tensor(np.zeros(8)))
    gamma = np.linspace(-1.0, 1.0, 8)
    injector = dataclasses.replace(
        block.injector,
        gamma=Tensor(gamma),
        norm_vit=unit,
        norm_sp=unit,
        attn=AttentionParams(eye, eye, eye, eye, 2),
    )
    block = dataclasses.replace(block, injector=injector)
    rng = np.random.default_rng(7)
    f_vit, sp = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))

    out = inject(Tensor(f_vit), MultiScaleTokens(Tensor(sp), (0,), ((1, 1),)), block)

    normed = (sp - sp.mean()) / np.sqrt(((sp - sp.mean()) ** 2).mean() + 1e-6)
    assert np.abs(out.data - (f_vit + gamma * normed)).max() < 1e-12


def test_inject_gate_gradient_matches_finite_differences(make_config):
    block = _randomized(LQAdapterModel.create(make_config())).blocks[0]
    rng = np.random.default_rng(8)
    f_vit = Tensor(rng.normal(size=(4, 8)))
    f_sp = MultiScaleTokens(Tensor(rng.normal(size=(21, 8))), (0, 16, 20), ((4, 4), (2, 2), (1, 1)))
    weights = Tensor(rng.normal(size=(4, 8)))

    def loss(gamma):
        injector = dataclasses.replace(block.injector, gamma=gamma)
        return T.sum_all(T.mul(inject(f_vit, f_sp, dataclasses.replace(block, injector=injector)), weights))

    assert check_function(loss, [rng.normal(size=8)], points=8) < 1e-4


def test_forward_shapes_match_formulas(make_config):
    model = LQAdapterModel.create(make_config(image_size=64))

    f_sp, tokens = model.forward(_image(64))

    assert tokens.shape == (64 * 64 // 256, 8)
    assert f_sp.data.shape == (64 * 64 // 64 + 64 * 64 // 256 + 64 * 64 // 1024, 8)


def test_forward_is_deterministic(make_config):
    image = _image(seed=9)

    first = perturb_gates(LQAdapterModel.create(make_config()), seed=1).predict(image)
    second = perturb_gates(LQAdapterModel.create(make_config()), seed=1).predict(image)

    assert np.array_equal(first.data, second.data)


def test_param_count_matches_hand_sum(make_config):
    config = make_config(layers=1, num_blocks=1, lq_count=2)
    d, ff, t, p = 8, 16, 4, 16

    def linear(fan_in, fan_out):
        return fan_in * fan_out + fan_out

    def conv(c_in, c_out, k):
        return c_out * c_in * k * k + c_out

    norm = 2 * d
    attn = 4 * linear(d, d)
    ffn = linear(d, ff) + linear(ff, d)

    frozen = conv(1, d, p) + t * d + (norm + attn + norm + ffn)
    spm = conv(3, d // 2, 3) + conv(d // 2, d // 2, 3) + conv(d // 2, d, 3) + 2 * conv(d, d, 3) + 3 * conv(d, d, 1)
    injector = d + 2 * norm + attn
    extractor = 3 * norm + attn + ffn
    lq_path = 4 * norm + 2 * attn
    writeback = d + 2 * norm + attn
    head = linear(3 * d, d) + linear(d, 4)
    trainable = spm + 2 * d + injector + extractor + lq_path + writeback + head

    assert param_count(LQAdapterModel.create(config)) == (trainable, frozen)
    assert (trainable, frozen) == (4104, 2688)


def test_freezing_everything_leaves_nothing_trainable(make_config):
    model = LQAdapterModel.create(make_config())

    trainable, frozen = param_count(model.with_params(model.params.with_all_frozen()))

    assert trainable == 0
    assert frozen == sum(spec.size for spec in model.params.specs)


def test_enabling_lq_on_one_more_block_adds_one_lq_path(make_config):
    one = param_count(LQAdapterModel.create(make_config(lq_blocks=(0,))))[0]
    two = param_count(LQAdapterModel.create(make_config(lq_blocks=(0, 1))))[0]

    norm, attn = 16, 4 * (8 * 8 + 8)
    assert two - one == (4 * norm + 2 * attn) + (8 + 2 * norm + attn)


def test_writeback_flag_controls_its_parameters(make_config):
    names_on = {spec.name for spec in model_layout(make_config())}
    names_off = {spec.name for spec in model_layout(make_config(lq_writeback=False))}

    assert names_on - names_off == {name for name in names_on if ".lq.writeback." in name}
    assert LQ0_NAME in names_off
    assert LQ0_NAME not in {spec.name for spec in model_layout(make_config(lq_blocks=()))}


def test_component_counts_cover_every_parameter(make_config):
    model = LQAdapterModel.create(make_config())

    components = count_by_component(model.params)

    assert sum(components.values()) == sum(param_count(model))
    assert set(components) == {"backbone", "spatial_prior", "injector", "extractor", "learnable_queries", "head"}


def test_decay_groups_run_from_spatial_prior_to_head(make_config):
    config = make_config(layers=4, num_blocks=2)
    groups = {spec.name: spec.group for spec in model_layout(config)}

    assert decay_group_count(config) == 2
    assert groups["spm.stem.0.kernel"] == 0
    assert groups["adapter.blocks.0.injector.gamma"] == 0
    assert groups["adapter.blocks.1.injector.gamma"] == 1
    assert groups["head.fc2.bias"] == 1


def _lq_gradients(model: LQAdapterModel, image: Tensor) -> dict[str, np.ndarray]:
    weights = Tensor(np.random.default_rng(11).normal(size=4))
    with Tape() as tape:
        grads = tape.backward(T.sum_all(T.mul(model.predict(image), weights)))
    named = model.params.named_gradients(grads)
    return {name: grad for name, grad in named.items() if ".lq." in name or name == LQ0_NAME}


def test_every_lq_parameter_receives_gradient_with_writeback(make_config):
    model = perturb_gates(LQAdapterModel.create(make_config()), seed=2)

    grads = _lq_gradients(model, _image(seed=10))

    assert grads
    # softmax ignores a shared shift of the logits, so key biases carry no gradient
    dead = [name for name, grad in grads.items() if not name.endswith(".k.bias") and not np.any(grad != 0.0)]
    assert dead == []


def test_lq_parameters_are_gradient_dead_without_writeback(make_config):
    model = perturb_gates(LQAdapterModel.create(make_config(lq_writeback=False)), seed=2)

    grads = _lq_gradients(model, _image(seed=10))

    assert grads
    assert all(not np.any(grad) for grad in grads.values())


def test_replace_shares_untouched_tensors(make_config):
    store = LQAdapterModel.create(make_config()).params

    updated = store.replace({"head.fc2.bias": np.ones(4)})

    assert updated["head.fc2.bias"] is not store["head.fc2.bias"]
    assert np.array_equal(updated["head.fc2.bias"].data, np.ones(4))
    assert all(updated[name] is store[name] for name in store if name != "head.fc2.bias")
    assert updated.trainable_names() == store.trainable_names()
    with pytest.raises(CheckpointError, match="does not match declared"):
        store.replace({"head.fc2.bias": np.ones(3)})
