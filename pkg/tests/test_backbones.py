import math

import numpy as np
import pytest

from deltaplug.backbones import ToyformerConfig, build_toyformer
from deltaplug.errors import ConfigError, TokenIndexError
from deltaplug.modtree import named_parameters, named_submodules, parameter_count, snapshot

from conftest import fixed_batch


def declared_param_count(c):
    """Shape-sum oracle from the architecture description."""
    lin = lambda i, o: i * o + o
    ln = 2 * c.d_model
    emb = c.vocab * c.d_model + c.max_len * c.d_model + ln
    layer = 4 * lin(c.d_model, c.d_model) + lin(c.d_model, c.d_ff) + lin(c.d_ff, c.d_model) + 2 * ln
    return emb + c.n_layers * layer + lin(c.d_model, c.d_model) + lin(c.d_model, c.n_classes)


def test_determinism():
    a = snapshot(build_toyformer(ToyformerConfig(seed=1), "A"), trainable_only=False)
    b = snapshot(build_toyformer(ToyformerConfig(seed=1), "A"), trainable_only=False)
    assert a.bit_equal(b)
    c = snapshot(build_toyformer(ToyformerConfig(seed=2), "A"), trainable_only=False)
    assert not a.bit_equal(c)


def test_convention_paths(model_a, model_b):
    assert "encoder.layer.0.attention.self.query" in dict(named_submodules(model_a))
    assert "encoder.block.0.layer.0.SelfAttention.q" in dict(named_submodules(model_b))
    tails_a = {p.rsplit(".", 1)[-1] for p, _ in named_submodules(model_a)}
    tails_b = {p.rsplit(".", 1)[-1] for p, _ in named_submodules(model_b)}
    assert not {"query", "key", "value"} & tails_b
    assert not {"q", "k", "v", "o"} & tails_a


@pytest.mark.parametrize("cfg", [
    ToyformerConfig(), ToyformerConfig(d_model=8, n_heads=2, d_ff=5, n_layers=3, vocab=11, max_len=7, n_classes=3),
])
def test_parameter_count_matches_shape_sum(cfg):
    a, b = build_toyformer(cfg, "A"), build_toyformer(cfg, "B")
    assert parameter_count(a) == declared_param_count(cfg) == parameter_count(b)


def test_default_total():
    assert parameter_count(build_toyformer(ToyformerConfig(), "A")) == 20834


def test_initialization_ranges(model_a):
    for key, t in named_parameters(model_a):
        if key.endswith("LayerNorm.weight"):
            assert np.all(t.data == 1.0)
        elif key.endswith("bias"):
            assert np.all(t.data == 0.0)
        else:
            assert np.all(np.abs(t.data) <= 0.1)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        build_toyformer(ToyformerConfig(d_model=30, n_heads=4))
    with pytest.raises(ConfigError):
        build_toyformer(ToyformerConfig(n_layers=0))
    with pytest.raises(ConfigError):
        build_toyformer(ToyformerConfig(), "C")


def test_forward_shapes_and_errors(model_a):
    ids, mask = fixed_batch()
    assert model_a(ids, mask).shape == (4, 2)
    with pytest.raises(TokenIndexError):
        model_a(np.full((1, 3), 64))
    with pytest.raises(TokenIndexError):
        model_a(np.zeros((1, 17), dtype=int))


@pytest.mark.parametrize("conv", ["A", "B"])
def test_identical_rows_and_permutation(conv):
    m = build_toyformer(ToyformerConfig(seed=4), conv)
    row = np.array([[1, 5, 9, 2]])
    out = m(np.repeat(row, 3, axis=0)).data
    assert out[0].tobytes() == out[1].tobytes() == out[2].tobytes()

    ids, mask = fixed_batch()
    perm = np.array([2, 0, 3, 1])
    base = m(ids, mask).data
    permuted = m(ids[perm], mask[perm]).data
    assert np.allclose(permuted, base[perm], rtol=0, atol=1e-14)
    assert m(ids, mask).data.tobytes() == base.tobytes()


def test_padding_is_ignored(model_a):
    ids = np.array([[1, 4, 5, 7, 7]])
    mask = np.array([[True, True, True, False, False]])
    other = ids.copy()
    other[0, 3:] = [20, 33]
    assert np.allclose(model_a(ids, mask).data, model_a(other, mask).data, atol=1e-12)


# ---------------------------------------------------------------- scalar oracle

def _lin(W, b, x):
    return [sum(x[i] * W[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]


def _ln(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, v in enumerate(x)]


def _gelu(x):
    return 0.5 * x * (1 + math.tanh(0.7978845608 * (x + 0.044715 * x ** 3)))


def scalar_forward(params, ids, keep):
    """One-layer, one-head BERT-style forward with explicit loops over positions."""
    P = {k: v.tolist() for k, v in params.items()}
    L = "encoder.layer.0."
    seq = len(ids)
    h = [_ln([a + b for a, b in zip(P["embeddings.word_embeddings.weight"][t],
                                    P["embeddings.position_embeddings.weight"][i])],
             P["embeddings.LayerNorm.weight"], P["embeddings.LayerNorm.bias"]) for i, t in enumerate(ids)]
    lin = lambda name, x: _lin(P[name + ".weight"], P[name + ".bias"], x)
    q = [lin(L + "attention.self.query", x) for x in h]
    k = [lin(L + "attention.self.key", x) for x in h]
    v = [lin(L + "attention.self.value", x) for x in h]
    d = len(h[0])
    ctx = []
    for i in range(seq):
        scores = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) if keep[j] else -1e9
                  for j in range(seq)]
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        z = sum(e)
        ctx.append([sum(e[j] / z * v[j][c] for j in range(seq)) for c in range(d)])
    a = [_ln([x + y for x, y in zip(lin(L + "attention.output.dense", ctx[i]), h[i])],
             P[L + "attention.output.LayerNorm.weight"], P[L + "attention.output.LayerNorm.bias"])
         for i in range(seq)]
    f = [[_gelu(u) for u in lin(L + "intermediate.dense", x)] for x in a]
    out = [_ln([x + y for x, y in zip(lin(L + "output.dense", f[i]), a[i])],
               P[L + "output.LayerNorm.weight"], P[L + "output.LayerNorm.bias"]) for i in range(seq)]
    pooled = [math.tanh(u) for u in lin("pooler.dense", out[0])]
    return lin("classifier", pooled)


def test_tiny_model_matches_scalar_oracle():
    cfg = ToyformerConfig(d_model=2, n_heads=1, d_ff=3, n_layers=1, vocab=5, max_len=4, n_classes=2, seed=3)
    m = build_toyformer(cfg, "A")
    # make LayerNorm gains/biases non-trivial so they are exercised
    rng = np.random.default_rng(0)
    for k, t in named_parameters(m):
        if "LayerNorm" in k or k.endswith("bias"):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
    params = {k: t.data for k, t in named_parameters(m)}
    ids = np.array([[1, 3, 0], [2, 2, 4]])
    keep = np.array([[True, True, False], [True, True, True]])
    got = m(ids, keep).data
    for r in range(2):
        want = scalar_forward(params, ids[r].tolist(), keep[r].tolist())
        assert np.max(np.abs(got[r] - np.array(want))) <= 1e-10
