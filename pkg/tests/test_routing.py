import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltaplug import tensor as T
from deltaplug.backbones import Linear, build_toyformer, ToyformerConfig
from deltaplug.deltas import BitfitModule, LoraModule
from deltaplug.errors import NotAttachedError, RoutingError
from deltaplug.modtree import ModuleNode, get_by_path, set_trainable
from deltaplug.routing import MergeOp, Route, install, installed, uninstall, wrapped_forward
from deltaplug.tensor import Tensor

from conftest import central_difference, fixed_batch


class Doubler(ModuleNode):
    def forward(self, h):
        return T.scale(h, 2.0)


class Times(ModuleNode):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, h):
        return T.scale(h, self.c)


class Zero(ModuleNode):
    def forward(self, h):
        return T.scale(h, 0.0)


class Const(ModuleNode):
    def __init__(self, v):
        super().__init__()
        self.v = Tensor(v)

    def forward(self, h):
        return T.expand_leading(self.v, h.shape[:-1])


def test_scalar_toy_routes():
    x = Tensor([1.0])
    node = Doubler()
    install(node, Times(3.0), Route.PARALLEL, MergeOp.ADD)
    assert node(x).data.tolist() == [5.0]
    uninstall(node, node.wrapped.entries[0].delta)

    d = Times(3.0)
    install(node, d, Route.INPUT, MergeOp.ADD)  # 2 * (1 + 3)
    assert node(x).data.tolist() == [8.0]
    uninstall(node, d)

    install(node, d, Route.OUTPUT, MergeOp.ADD)  # 2 + 3*2
    assert node(x).data.tolist() == [8.0]
    uninstall(node, d)

    install(node, d, Route.OUTPUT, MergeOp.REPLACE)  # 3*2
    assert node(x).data.tolist() == [6.0]
    uninstall(node, d)
    assert node(x).data.tolist() == [2.0]


@pytest.mark.parametrize("route", list(Route))
def test_zero_delta_is_neutral(route, model_a):
    ids, mask = fixed_batch()
    base = model_a(ids, mask).data.tobytes()
    for path in ["encoder.layer.0.attention.self.query", "encoder.layer.1.attention.output.dense", "pooler.dense"]:
        install(get_by_path(model_a, path), Zero(), route, MergeOp.ADD, path)
    assert model_a(ids, mask).data.tobytes() == base


def test_parallel_lora_equals_weight_merge():
    rng = np.random.default_rng(0)
    lin = Linear(6, 5, rng)
    lin.bias.data[...] = rng.uniform(-1, 1, 5)
    lora = LoraModule(6, 5, 3, 6.0, rng)
    lora.lora_B.data[...] = rng.uniform(-1, 1, (3, 5))
    install(lin, lora, Route.PARALLEL)
    h = rng.uniform(-1, 1, (2, 4, 6))
    merged = lin.weight.data + 2.0 * lora.lora_A.data @ lora.lora_B.data
    want = np.einsum("bsi,io->bso", h, merged) + lin.bias.data
    assert np.max(np.abs(lin(Tensor(h)).data - want)) <= 1e-10


def test_uninstall_restores_and_errors(model_a):
    ids, mask = fixed_batch()
    base = model_a(ids, mask).data.tobytes()
    node = get_by_path(model_a, "encoder.layer.0.attention.output.dense")
    d = Const(np.full(32, 0.3))
    install(node, d, Route.OUTPUT)
    assert model_a(ids, mask).data.tobytes() != base
    uninstall(node, d)
    assert "forward" not in node.__dict__ and node.wrapped is None
    assert model_a(ids, mask).data.tobytes() == base
    with pytest.raises(NotAttachedError):
        uninstall(node, d)
    with pytest.raises(NotAttachedError):
        wrapped_forward(node, Tensor(np.zeros((1, 32))))


def test_remove_first_of_two_equals_second_alone():
    def make():
        return build_toyformer(ToyformerConfig(seed=5), "A")

    ids, mask = fixed_batch()
    path = "encoder.layer.1.intermediate.dense"
    d1, d2 = Const(np.full(64, 0.2)), Times(0.5)
    m = make()
    node = get_by_path(m, path)
    install(node, d1, Route.OUTPUT)
    install(node, d2, Route.OUTPUT)
    uninstall(node, d1)
    assert installed(node) == [d2]

    ref = make()
    install(get_by_path(ref, path), Times(0.5), Route.OUTPUT)
    assert m(ids, mask).data.tobytes() == ref(ids, mask).data.tobytes()


def test_add_shape_mismatch_names_path_route_and_shapes():
    node = Doubler()
    install(node, Const(np.zeros(3)), Route.OUTPUT, MergeOp.ADD, path="x.y")
    with pytest.raises(RoutingError) as e:
        node(Tensor(np.zeros((2, 4))))
    msg = str(e.value)
    assert "x.y" in msg and "output" in msg and "(2, 4)" in msg and "(2, 3)" in msg


def test_wrapper_keeps_metadata():
    node = Linear(2, 2, np.random.default_rng(0))
    install(node, Zero(), Route.OUTPUT)
    assert node.forward.__name__ == "forward"
    assert node.forward.__doc__ == Linear.forward.__doc__


def test_lora_b_gradient_nonzero_when_frozen(model_a):
    set_trainable(model_a, False)
    node = get_by_path(model_a, "encoder.layer.0.attention.self.query")
    lora = LoraModule(32, 32, 4, 4.0, np.random.default_rng(0))
    install(node, lora, Route.PARALLEL)
    ids, mask = fixed_batch()
    labels = np.array([0, 1, 1, 0])

    def loss_value():
        with T.no_grad():
            return T.cross_entropy(model_a(ids, mask), labels).item()

    T.backward(T.cross_entropy(model_a(ids, mask), labels))
    assert np.abs(lora.lora_B.grad).max() > 0
    coords = [(0, 0), (1, 5), (3, 31)]
    num = central_difference(loss_value, lora.lora_B.data, coords=coords)
    for c in coords:
        assert lora.lora_B.grad[c] == pytest.approx(num[c], rel=1e-4)


def test_bitfit_gradient_is_output_gradient_summed():
    rng = np.random.default_rng(3)
    lin = Linear(4, 3, rng)
    w = rng.uniform(-1, 1, (2, 5, 3))
    h = Tensor(rng.uniform(-1, 1, (2, 5, 4)))
    bf = BitfitModule(3)
    install(lin, bf, Route.OUTPUT)

    def f():
        with T.no_grad():
            return float((T.tanh(lin(h)).data * w).sum())

    T.backward(T.tsum(T.mul(T.tanh(lin(h)), Tensor(w))))
    num = central_difference(f, bf.bias.data)
    out = np.tanh(h.data @ lin.weight.data + lin.bias.data)
    dout = w * (1 - out ** 2)
    assert np.allclose(bf.bias.grad, num, rtol=1e-6, atol=1e-10)
    assert np.allclose(bf.bias.grad, dout.sum(axis=(0, 1)), rtol=0, atol=1e-12)


def test_stacked_bitfit_shifts_by_sum():
    rng = np.random.default_rng(1)
    lin = Linear(3, 3, rng)
    h = Tensor(rng.uniform(-1, 1, (2, 3)))
    base = lin(h).data
    b1, b2 = BitfitModule(3), BitfitModule(3)
    b1.bias.data[...] = [0.1, 0.2, 0.3]
    b2.bias.data[...] = [1.0, -1.0, 0.5]
    install(lin, b1, Route.OUTPUT)
    install(lin, b2, Route.OUTPUT)
    assert np.allclose(lin(h).data, base + np.array([1.1, -0.8, 0.8]), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(list(Route)), st.sampled_from(list(Route)), st.integers(0, 1000))
def test_add_merges_commute(r1, r2, seed):
    rng = np.random.default_rng(seed)
    c1, c2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    h = Tensor(rng.uniform(-1, 1, (2, 3)))
    W = rng.uniform(-1, 1, (3, 3))

    def run(order):
        lin = Linear(3, 3, np.random.default_rng(0))
        lin.weight.data[...] = W
        for c, r in order:
            install(lin, Const(c), r)
        return lin(h).data

    a = run([(c1, r1), (c2, r2)])
    b = run([(c2, r2), (c1, r1)])
    if Route.INPUT not in (r1, r2) or r1 == r2:
        assert np.max(np.abs(a - b)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 3), st.sampled_from(list(Route))), max_size=12))
def test_any_sequence_ending_empty_restores(ops):
    rng = np.random.default_rng(0)
    lin = Linear(3, 3, rng)
    h = Tensor(rng.uniform(-1, 1, (2, 3)))
    base = lin(h).data.tobytes()
    pool = [Const(np.full(3, 0.1 * (i + 1))) for i in range(4)]
    live = []
    for add, i, route in ops:
        d = pool[i]
        if add and d not in live:
            install(lin, d, route)
            live.append(d)
        elif not add and d in live:
            uninstall(lin, d)
            live.remove(d)
    for d in list(live):
        uninstall(lin, d)
    assert lin(h).data.tobytes() == base
    assert "forward" not in lin.__dict__


def test_replace_merges_wrap_outside_adds():
    from deltaplug.deltas import PrefixModule
    rng = np.random.default_rng(2)
    h = Tensor(rng.uniform(-1, 1, (2, 5, 4)))
    prefix = PrefixModule(4, 3, 6, 6, np.random.default_rng(0))
    lora = LoraModule(4, 4, 2, 2.0, np.random.default_rng(1))
    lora.lora_B.data[...] = rng.uniform(-1, 1, (2, 4))

    outs = []
    for order in ([(prefix, Route.OUTPUT, MergeOp.REPLACE), (lora, Route.PARALLEL, MergeOp.ADD)],
                  [(lora, Route.PARALLEL, MergeOp.ADD), (prefix, Route.OUTPUT, MergeOp.REPLACE)]):
        lin = Linear(4, 4, np.random.default_rng(9))
        for d, r, mg in order:
            install(lin, d, r, mg)
        outs.append(lin(h).data)
    assert outs[0].shape == (2, 8, 4)
    assert outs[0].tobytes() == outs[1].tobytes()
    assert np.array_equal(outs[0][:, :3], np.broadcast_to(prefix.rows().data, (2, 3, 4)))
