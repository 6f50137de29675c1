import numpy as np
import pytest

from sapt import autograd as ag
from sapt.autograd import Value
from sapt.errors import ContractError, NumericError, UsageError
from sapt.optim import AdamW
from sapt.pet import (PetConfig, apply_gradient_step, combine_blocks, copy_block, deserialize,
                      load_block, new_block, save_block, serialize, single)


def _blocks(model, kind, n, rng=None):
    cfg = PetConfig(kind=kind, prompt_length=3, rank=2)
    out = [new_block(kind, cfg, i + 1, 0, model) for i in range(n)]
    if rng is not None:
        for b in out:
            for v in b.pet_values():
                v.data[:] = rng.normal(size=v.shape)
    return out


@pytest.mark.parametrize("kind", ["prompt", "lora"])
@pytest.mark.parametrize("mode", ["literal", "effective"])
def test_one_hot_combination_is_the_block(small_model, rng, kind, mode):
    blocks = _blocks(small_model, kind, 3, rng)
    agg = combine_blocks(blocks, Value([0.0, 1.0, 0.0]), mode)
    if kind == "prompt":
        assert np.array_equal(agg.prompt.data, blocks[1].params["prompt"].data)
    elif mode == "literal":
        for s, (A, B) in agg.lora.items():
            assert np.array_equal(A.data, blocks[1].params[f"{s}.A"].data)
            assert np.array_equal(B.data, blocks[1].params[f"{s}.B"].data)
    else:
        for s, D in agg.delta.items():
            b = blocks[1]
            expect = b.params[f"{s}.A"].data.T @ b.params[f"{s}.B"].data.T
            assert np.array_equal(D.data, expect)


def test_identical_blocks_any_weights(small_model, rng):
    b = _blocks(small_model, "prompt", 1, rng)[0]
    twin = copy_block(b, 2)
    agg = combine_blocks([b, twin], Value([0.3, 0.7]))
    np.testing.assert_allclose(agg.prompt.data, b.params["prompt"].data, atol=1e-15)


def test_prompt_mean_example(small_model):
    b1, b2 = _blocks(small_model, "prompt", 2)
    b1.params["prompt"] = ag.param([[2.0]])
    b2.params["prompt"] = ag.param([[4.0]])
    assert combine_blocks([b1, b2], Value([0.5, 0.5])).prompt.data.tolist() == [[3.0]]


@pytest.mark.parametrize("kind", ["prompt", "lora"])
def test_combination_is_linear_in_weights(small_model, rng, kind):
    blocks = _blocks(small_model, kind, 3, rng)
    u, v, alpha = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3)), 0.3
    mix = combine_blocks(blocks, Value(alpha * u + (1 - alpha) * v)).tensors()
    cu, cv = combine_blocks(blocks, Value(u)).tensors(), combine_blocks(blocks, Value(v)).tensors()
    for k in mix:
        assert np.max(np.abs(mix[k].data - (alpha * cu[k].data + (1 - alpha) * cv[k].data))) < 1e-12


def test_batched_weights_match_row_by_row(small_model, rng):
    blocks = _blocks(small_model, "lora", 2, rng)
    W = rng.dirichlet(np.ones(2), size=4)
    batched = combine_blocks(blocks, Value(W)).tensors()
    for r in range(4):
        row = combine_blocks(blocks, Value(W[r])).tensors()
        for k in row:
            np.testing.assert_allclose(batched[k].data[r], row[k].data, atol=1e-15)


def test_combination_errors(small_model):
    p = _blocks(small_model, "prompt", 1)[0]
    lo = _blocks(small_model, "lora", 1)[0]
    with pytest.raises(UsageError):
        combine_blocks([p, lo], Value([0.5, 0.5]))
    with pytest.raises(NumericError):
        combine_blocks([p, copy_block(p, 2)], Value([0.7, 0.7]))
    with pytest.raises(NumericError):
        combine_blocks([p, copy_block(p, 2)], Value([1.2, -0.2]))
    with pytest.raises(UsageError):
        combine_blocks([], Value([]))


def test_gradient_flows_to_weights_and_blocks(small_model, rng):
    blocks = _blocks(small_model, "prompt", 2, rng)
    w = ag.param([0.4, 0.6])
    target = Value(rng.normal(size=(3, 16)))
    ag.backward((combine_blocks(blocks, w).prompt * target).sum())
    assert w.grad is not None and blocks[0].params["prompt"].grad is not None


def test_fresh_lora_is_zero_delta(small_model):
    b = _blocks(small_model, "lora", 1)[0]
    for s in b.sites():
        assert not b.params[f"{s}.B"].data.any()
        assert np.std(b.params[f"{s}.A"].data) == pytest.approx(0.02, rel=0.3)


def test_new_block_is_seeded(small_model):
    cfg = PetConfig(kind="lora")
    a, b = new_block("lora", cfg, 2, 5, small_model), new_block("lora", cfg, 2, 5, small_model)
    assert a.digest() == b.digest()
    assert new_block("lora", cfg, 2, 6, small_model).digest() != a.digest()


def test_prompt_rows_come_from_the_vocabulary(small_model):
    b = new_block("prompt", PetConfig(prompt_length=10), 1, 0, small_model)
    table = small_model.params["tok_emb"].data
    for row in b.params["prompt"].data:
        assert any(np.array_equal(row, t) for t in table[4:])


def test_key_scale(small_model):
    keys = np.stack([new_block("prompt", PetConfig(), i, 0, small_model).key.data for i in range(1, 60)])
    assert keys.shape[1] == 16
    assert keys.var() == pytest.approx(1 / 16, rel=0.3)


def test_reused_task_index(small_model):
    with pytest.raises(UsageError):
        new_block("prompt", PetConfig(), 1, 0, small_model, used_indices=[1])


@pytest.mark.parametrize("kind", ["prompt", "lora"])
def test_serialize_round_trip_is_bitwise(small_model, rng, kind):
    b = _blocks(small_model, kind, 1, rng)[0]
    b.freeze()
    back = deserialize(serialize(b))
    assert back.digest() == b.digest() and back.frozen and back.kind == kind


def test_block_store_round_trip(small_model, rng, tmp_path):
    b = _blocks(small_model, "lora", 1, rng)[0]
    save_block(tmp_path, b)
    back = load_block(tmp_path, 1)
    assert np.array_equal(back.key.data, b.key.data)
    for k, v in b.params.items():
        assert np.array_equal(back.params[k].data, v.data.astype(np.float32).astype(np.float64))


def test_frozen_block_rejects_updates(small_model, rng):
    b = _blocks(small_model, "prompt", 1, rng)[0]
    b.freeze()
    with pytest.raises(ContractError):
        apply_gradient_step(b, 0.1)
    opt = AdamW(b.pet_values(), lr=0.1)
    with pytest.raises(ContractError):
        opt.step()
    with pytest.raises(ValueError):
        b.params["prompt"].data[0, 0] = 1.0


def test_single_uses_block_tensors(small_model):
    b = _blocks(small_model, "lora", 1)[0]
    pet = single(b)
    assert all(pet.lora[s][0] is b.params[f"{s}.A"] for s in b.sites())
