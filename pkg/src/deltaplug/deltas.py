"""Delta modules (LoRA, Adapter, BitFit, Prefix) and runtime shape capture."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CaptureError, ConfigError, DimensionError, InitError
from .modtree import ModuleNode, get_by_path
from .tensor import Tensor

INIT_RANGE = 0.1

DEFAULT_HYPERPARAMS = {
    "lora": {"rank": 4, "alpha": 4.0},
    "adapter": {"bottleneck": 8, "activation": "gelu"},
    "bitfit": {},
    "prefix": {"prefix_len": 4, "prefix_dp": 16, "prefix_mid": 16},
}
DELTA_TYPES = tuple(DEFAULT_HYPERPARAMS)

# Which delta types size themselves from hidden states seen at run time.
RUNTIME_INIT = {"lora": False, "adapter": True, "bitfit": False, "prefix": True}


def hyperparams_for(kind, overrides=None):
    if kind not in DEFAULT_HYPERPARAMS:
        raise ConfigError(f"unknown delta type {kind!r}; expected one of {DELTA_TYPES}")
    hp = dict(DEFAULT_HYPERPARAMS[kind])
    for key, value in (overrides or {}).items():
        if key not in hp:
            raise ConfigError(f"{kind} has no hyperparameter {key!r}")
        hp[key] = value
    return hp


def _uniform(rng, shape):
    return Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class DeltaModule(ModuleNode):
    is_delta = True
    delta_type = None

    def _check_features(self, h, expected):
        if h.shape[-1] != expected:
            raise DimensionError(
                f"{self.delta_type} expects trailing dim {expected}, got hidden state {h.shape}"
            )


class LoraModule(DeltaModule):
    """Low-rank update ``scale * h_in @ A @ B`` with ``B`` zero at init."""

    delta_type = "lora"

    def __init__(self, d_in, d_out, rank, alpha, rng):
        super().__init__()
        self.d_in = d_in
        self.scale = float(alpha) / rank
        self.add_param("lora_A", _uniform(rng, (d_in, rank)))
        self.add_param("lora_B", _zeros((rank, d_out)))

    def forward(self, h):
        self._check_features(h, self.d_in)
        return T.scale(T.matmul(T.matmul(h, self.lora_A), self.lora_B), self.scale)


class AdapterModule(DeltaModule):
    """Bottleneck ``act(h W1 + b1) W2 + b2``; W2 and b2 start at zero."""

    delta_type = "adapter"

    def __init__(self, d, bottleneck, activation, rng):
        super().__init__()
        if activation not in ("gelu", "relu"):
            raise ConfigError(f"adapter activation must be gelu or relu, got {activation!r}")
        self.d = d
        self.activation = activation
        self.add_param("W1", _uniform(rng, (d, bottleneck)))
        self.add_param("bias1", _zeros(bottleneck))
        self.add_param("W2", _zeros((bottleneck, d)))
        self.add_param("bias2", _zeros(d))

    def forward(self, h):
        self._check_features(h, self.d)
        act = T.ACTIVATIONS[self.activation]
        mid = act(T.matmul(h, self.W1) + self.bias1)
        return T.matmul(mid, self.W2) + self.bias2


class BitfitModule(DeltaModule):
    delta_type = "bitfit"

    def __init__(self, d):
        super().__init__()
        self.d = d
        self.add_param("bias", _zeros(d))

    def forward(self, h):
        self._check_features(h, self.d)
        return T.expand_leading(self.bias, h.shape[:-1])


class PrefixModule(DeltaModule):
    """Prepends ``MLP(p)`` rows to a key/value projection output.

    The MLP is ``tanh(p W1 + b1) W2 + b2``; one prefix is shared across the batch.
    """

    delta_type = "prefix"

    def __init__(self, d_out, prefix_len, prefix_dp, prefix_mid, rng):
        super().__init__()
        self.d = d_out
        self.add_param("prefix", _uniform(rng, (prefix_len, prefix_dp)))
        self.add_param("mlp_W1", _uniform(rng, (prefix_dp, prefix_mid)))
        self.add_param("mlp_b1", _zeros(prefix_mid))
        self.add_param("mlp_W2", _uniform(rng, (prefix_mid, d_out)))
        self.add_param("mlp_b2", _zeros(d_out))

    def rows(self):
        mid = T.tanh(T.matmul(self.prefix, self.mlp_W1) + self.mlp_b1)
        return T.matmul(mid, self.mlp_W2) + self.mlp_b2

    def forward(self, h):
        self._check_features(h, self.d)
        return T.concat_rows(T.expand_leading(self.rows(), h.shape[:-2]), h)


@dataclass
class ShapeRecord:
    """Observed last-axis extents: ``{path: (d_in, d_out)}``."""

    dims: dict

    def __getitem__(self, path):
        return self.dims[path]

    def __contains__(self, path):
        return path in self.dims


def _last_dim(x):
    return x.shape[-1] if hasattr(x, "shape") and len(x.shape) else None


def capture_shapes(model, target_paths, pseudo_input=None):
    """Run one throw-away forward and record each target's feature dims."""
    if pseudo_input is None:
        pseudo_input = model.pseudo_input()
    seen = {}
    patched = []
    for path in target_paths:
        node = get_by_path(model, path)
        saved = node.__dict__.get("forward")
        inner = node.forward

        def observer(h, *args, _inner=inner, _path=path, **kwargs):
            out = _inner(h, *args, **kwargs)
            seen[_path] = (_last_dim(h), _last_dim(out))
            return out

        node.forward = observer
        patched.append((node, saved))
    try:
        with T.no_grad():
            model(*pseudo_input)
    finally:
        for node, saved in reversed(patched):
            if saved is None:
                del node.__dict__["forward"]
            else:
                node.forward = saved
    dims = {}
    for path in target_paths:
        if path not in seen:
            raise CaptureError(f"sub-module {path!r} was never executed by the pseudo forward pass")
        d_in, d_out = seen[path]
        if not d_in or not d_out:
            raise CaptureError(f"sub-module {path!r} produced no feature dims: {seen[path]}")
        dims[path] = (d_in, d_out)
    return ShapeRecord(dims)


def create_delta(kind, hyperparams=None, param_shapes=None, dims=None, seed=0):
    """Allocate a delta module.

    ``param_shapes`` (the target node's ``{name: shape}``) sizes LoRA and
    BitFit; ``dims`` (``(d_in, d_out)`` from :func:`capture_shapes`) sizes
    Adapter and Prefix.
    """
    hp = hyperparams_for(kind, hyperparams)
    rng = np.random.default_rng(seed)
    if RUNTIME_INIT[kind]:
        if dims is None:
            raise InitError(f"{kind} needs observed hidden-state shapes; run capture_shapes first")
        d_out = dims[1]
        if kind == "adapter":
            return AdapterModule(d_out, int(hp["bottleneck"]), hp["activation"], rng)
        return PrefixModule(d_out, int(hp["prefix_len"]), int(hp["prefix_dp"]), int(hp["prefix_mid"]), rng)
    param_shapes = param_shapes or {}
    if kind == "lora":
        w = param_shapes.get("weight")
        if w is None or len(w) != 2:
            raise InitError(f"lora needs a 2-d weight on the target, got {param_shapes}")
        return LoraModule(w[0], w[1], int(hp["rank"]), hp["alpha"], rng)
    b = param_shapes.get("bias")
    if b is None or len(b) != 1:
        raise InitError(f"bitfit needs a bias vector on the target, got {param_shapes}")
    return BitfitModule(b[0])


def delta_forward(module, h):
    return module(h)
