"""Delta objects: construction, attach/detach, freezing and delta-only checkpoints.

Construction resolves the modified modules by name, allocates one delta
module per matched sub-module (observing hidden-state shapes with a pseudo
forward pass where the type needs it) and records the route each module
takes. Nothing touches the backbone until :func:`attach`.
"""

import json
import os
from collections import Counter
from dataclasses import dataclass, field

from .addressing import AddressPattern, resolve
from .deltas import (DELTA_TYPES, RUNTIME_INIT, capture_shapes, create_delta,
                     hyperparams_for)
from .errors import (ConfigError, EmptyMatchError, FormatError, MissingConfigError,
                     PlacementError, ShapeError, StateError, StrictLoadError)
from .modtree import (RESERVED_DELTAS, Container, ParameterSnapshot, get_by_path,
                      join, named_parameters, named_submodules, set_trainable)
from .routing import MergeOp, Route, install, uninstall

CONFIG_FORMAT_VERSION = 1
CONFIG_FILE = "config.json"
DELTA_FILE = "delta.bin"

COMMON_NAMES = ("attn.q", "attn.k", "attn.v", "attn.proj", "ff.w1", "ff.w2", "layer_norm")

ROUTES = {
    "lora": (Route.PARALLEL, MergeOp.ADD),
    "adapter": (Route.OUTPUT, MergeOp.ADD),
    "bitfit": (Route.OUTPUT, MergeOp.ADD),
    "prefix": (Route.OUTPUT, MergeOp.REPLACE),
}

DEFAULT_POSITIONS = {
    "lora": ["attn.q", "attn.v"],
    "adapter": ["attn.proj", "ff.w2"],
    "bitfit": list(COMMON_NAMES),
    "prefix": ["attn.k", "attn.v"],
}


@dataclass
class NameMapping:
    """Common sub-module names -> model-specific address patterns, per convention."""

    conventions: dict

    def __post_init__(self):
        for conv, table in self.conventions.items():
            missing = [n for n in COMMON_NAMES if n not in table]
            if missing:
                raise ConfigError(f"convention {conv!r} lacks common names {missing}")

    def pattern(self, convention, common_name):
        table = self.conventions.get(convention)
        if table is None:
            raise ConfigError(f"no name mapping registered for convention {convention!r}")
        if common_name not in table:
            raise ConfigError(f"unknown common name {common_name!r}; expected one of {COMMON_NAMES}")
        return table[common_name]

    def common_name(self, convention, path):
        for name in COMMON_NAMES:
            if AddressPattern(self.pattern(convention, name)).matcher()(path):
                return name
        return None

    def position(self, convention, path):
        """``(common_name, layer_index)`` of a path, or None."""
        name = self.common_name(convention, path)
        if name is None:
            return None
        layer = next((int(s) for s in path.split(".") if s.isdigit()), None)
        return name, layer


NAME_MAPPING = NameMapping({
    "A": {
        "attn.q": "attention.self.query",
        "attn.k": "attention.self.key",
        "attn.v": "attention.self.value",
        "attn.proj": "attention.output.dense",
        "ff.w1": "intermediate.dense",
        "ff.w2": r"re:encoder\.layer\.\d+\.output\.dense",
        "layer_norm": "output.LayerNorm",
    },
    "B": {
        "attn.q": "SelfAttention.q",
        "attn.k": "SelfAttention.k",
        "attn.v": "SelfAttention.v",
        "attn.proj": "SelfAttention.o",
        "ff.w1": "DenseReluDense.wi",
        "ff.w2": "DenseReluDense.wo",
        "layer_norm": "layer_norm",
    },
})


@dataclass
class DeltaConfig:
    delta_type: str
    modified_modules: list = None
    hyperparams: dict = field(default_factory=dict)
    common_naming: bool = False

    def __post_init__(self):
        if self.delta_type not in DELTA_TYPES:
            raise ConfigError(f"unknown delta type {self.delta_type!r}; expected one of {DELTA_TYPES}")
        self.hyperparams = hyperparams_for(self.delta_type, self.hyperparams)
        if self.modified_modules is not None:
            self.modified_modules = [str(p) for p in self.modified_modules]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        unknown = set(d) - {"delta_type", "modified_modules", "hyperparams", "common_naming"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "delta_type" not in d:
            raise ConfigError("config needs a delta_type")
        return cls(d["delta_type"], d.get("modified_modules"), d.get("hyperparams") or {},
                   bool(d.get("common_naming", False)))

    def to_dict(self):
        return {
            "format_version": CONFIG_FORMAT_VERSION,
            "delta_type": self.delta_type,
            "modified_modules": self.modified_modules,
            "common_naming": self.common_naming,
            "hyperparams": self.hyperparams,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e


def auto_default(delta_type):
    if delta_type not in DEFAULT_POSITIONS:
        raise ConfigError(f"unknown delta type {delta_type!r}; expected one of {DELTA_TYPES}")
    return DeltaConfig(delta_type, list(DEFAULT_POSITIONS[delta_type]), {}, common_naming=True)


@dataclass
class Binding:
    path: str
    module: object
    route: Route
    merge: MergeOp
    position: tuple = None
    slot: str = None

    def key_prefix(self):
        # Keys as they appear when this object is the only one attached.
        return f"{self.path}.{RESERVED_DELTAS}.{self.module.delta_type}_0"


@dataclass
class DeltaObject:
    config: DeltaConfig
    model: object
    bindings: list
    attached: bool = False
    # Backbone parameters (e.g. a task head) swapped in while attached.
    extras: dict = field(default_factory=dict)
    _displaced: dict = field(default_factory=dict, repr=False)

    @property
    def delta_type(self):
        return self.config.delta_type

    def parameters(self):
        return [(f"{b.key_prefix()}.{name}", t) for b in self.bindings for name, t in b.module.params.items()]

    def num_params(self):
        return sum(t.size for _, t in self.parameters())

    def snapshot(self):
        return ParameterSnapshot({k: t.data.copy() for k, t in self.parameters()})

    def attach(self, model=None):
        attach(self, model)

    def detach(self, model=None):
        detach(self, model)


def _expand_patterns(config, model):
    """Return ``[(label, raw_pattern)]`` after applying the common-name mapping."""
    modules = config.modified_modules
    common = config.common_naming
    if modules is None:
        modules, common = DEFAULT_POSITIONS[config.delta_type], True
    if not modules:
        raise ConfigError("modified_modules is empty")
    if common:
        return [(name, NAME_MAPPING.pattern(model.convention, name)) for name in modules]
    return [(p, p) for p in modules]


def _inside_deltas(path):
    return RESERVED_DELTAS in path.split(".")


def build(config, model, seed=0):
    """Construct a detached :class:`DeltaObject` for ``model``."""
    if isinstance(config, dict):
        config = DeltaConfig.from_dict(config)
    kind = config.delta_type
    labelled = _expand_patterns(config, model)
    res = resolve(model, [raw for _, raw in labelled])
    for label, raw in labelled:
        if not [p for p in res.per_pattern[raw] if not _inside_deltas(p)]:
            raise EmptyMatchError(f"pattern {label!r} matched no sub-module")
    paths = [p for p in res.union if not _inside_deltas(p)]

    convention = getattr(model, "convention", None)
    if kind == "prefix":
        allowed = set()
        if convention in NAME_MAPPING.conventions:
            allowed = set(resolve(model, [NAME_MAPPING.pattern(convention, n) for n in ("attn.k", "attn.v")]).union)
        bad = [p for p in paths if p not in allowed]
        if bad:
            raise PlacementError(f"prefix tuning only attaches to attention key/value projections; got {bad[0]!r}")

    dims = capture_shapes(model, paths) if RUNTIME_INIT[kind] else None
    route, merge = ROUTES[kind]
    bindings = []
    for i, path in enumerate(paths):
        node = get_by_path(model, path)
        module = create_delta(
            kind, config.hyperparams,
            param_shapes={name: t.shape for name, t in node.params.items()},
            dims=dims[path] if dims else None,
            seed=(seed, i),
        )
        position = NAME_MAPPING.position(convention, path) if convention in NAME_MAPPING.conventions else None
        bindings.append(Binding(path, module, route, merge, position))
    return DeltaObject(config, model, bindings)


def _check_model(obj, model):
    if model is not None and model is not obj.model:
        raise StateError("delta object was built for a different model instance")
    return obj.model


def attach(obj, model=None):
    model = _check_model(obj, model)
    if obj.attached:
        raise StateError("delta object is already attached")
    done = []
    try:
        for b in obj.bindings:
            node = get_by_path(model, b.path)
            install(node, b.module, b.route, b.merge, path=b.path)
            done.append(b)
            holder = node.children.get(RESERVED_DELTAS) or node.add_child(RESERVED_DELTAS, Container())
            i = 0
            while f"{obj.delta_type}_{i}" in holder.children:
                i += 1
            b.slot = f"{obj.delta_type}_{i}"
            holder.add_child(b.slot, b.module)
    except Exception:
        for b in reversed(done):
            _unbind(model, b)
        raise
    params = dict(named_parameters(model))
    obj._displaced = {k: params[k].data.copy() for k in obj.extras}
    for k, arr in obj.extras.items():
        params[k].data[...] = arr
    obj.attached = True


def _unbind(model, b):
    node = get_by_path(model, b.path)
    uninstall(node, b.module)
    holder = node.children.get(RESERVED_DELTAS)
    if holder is not None and b.slot in holder.children and holder.children[b.slot] is b.module:
        holder.remove_child(b.slot)
        if not holder.children:
            node.remove_child(RESERVED_DELTAS)
    b.slot = None


def detach(obj, model=None):
    model = _check_model(obj, model)
    if not obj.attached:
        raise StateError("delta object is not attached")
    for b in reversed(obj.bindings):
        _unbind(model, b)
    params = dict(named_parameters(model))
    for k, arr in obj._displaced.items():
        params[k].data[...] = arr
    obj._displaced = {}
    obj.attached = False


def freeze(model, exclude=(RESERVED_DELTAS,), set_state_dict=False):
    """Freeze everything outside ``exclude``; returns how many tensors changed."""
    n = set_trainable(model, False, list(exclude))
    if set_state_dict:
        model.state_dict_trainable_only = True
    return n


def _extra_parameters(model, extra_modules):
    if not extra_modules:
        return {}
    roots = resolve(model, list(extra_modules)).union
    out = {}
    for path, node in named_submodules(model):
        if _inside_deltas(path):
            continue
        if any(path == r or path.startswith(r + ".") for r in roots):
            for name, t in node.params.items():
                out[join(path, name)] = t.data.copy()
    return out


def save_finetuned(obj, model, directory, extra_modules=()):
    """Write ``config.json`` and ``delta.bin``.

    ``extra_modules`` adds backbone sub-modules (e.g. a task head) to the
    checkpoint; they are swapped in and out with the delta on reload.
    """
    _check_model(obj, model)
    os.makedirs(directory, exist_ok=True)
    config = obj.config
    if config.modified_modules is None:
        config = DeltaConfig(config.delta_type, DEFAULT_POSITIONS[config.delta_type],
                             config.hyperparams, common_naming=True)
    entries = {k: t.data.copy() for k, t in obj.parameters()}
    entries.update(_extra_parameters(model, extra_modules))
    cfg_path = os.path.join(directory, CONFIG_FILE)
    bin_path = os.path.join(directory, DELTA_FILE)
    try:
        with open(cfg_path, "w", encoding="utf-8") as f:
            f.write(config.to_json())
        ParameterSnapshot(entries).save(bin_path)
    except OSError as e:
        raise OSError(f"failed writing checkpoint to {directory!r}: {e}") from e


def _split_key(key):
    head, sep, tail = key.partition(f".{RESERVED_DELTAS}.")
    return (head, tail) if sep else (None, None)


def _translate_keys(snap, obj):
    """Re-address saved delta keys through common-name positions."""
    by_position = {}
    counts = Counter()
    for b in obj.bindings:
        if b.position is None:
            return None
        counts[b.position] += 1
        by_position[b.position + (counts[b.position],)] = b
    saved_paths = sorted({_split_key(k)[0] for k in snap.keys() if _split_key(k)[0] is not None})
    for convention in NAME_MAPPING.conventions:
        positions = [NAME_MAPPING.position(convention, p) for p in saved_paths]
        if None in positions:
            continue
        seen = Counter()
        mapping = {}
        for path, pos in zip(saved_paths, positions):
            seen[pos] += 1
            b = by_position.get(pos + (seen[pos],))
            if b is None:
                break
            mapping[path] = b.key_prefix()
        else:
            if len(mapping) != len(obj.bindings):
                continue
            out = {}
            for key in snap.keys():
                path, tail = _split_key(key)
                if path is None:
                    out[key] = snap[key]
                else:
                    out[mapping[path] + "." + tail.partition(".")[2]] = snap[key]
            return ParameterSnapshot(out)
    return None


def from_finetuned(directory, model, seed=0):
    """Rebuild a delta object from a checkpoint directory and attach it."""
    cfg_path = os.path.join(directory, CONFIG_FILE)
    bin_path = os.path.join(directory, DELTA_FILE)
    if not os.path.isfile(cfg_path):
        raise MissingConfigError(f"no {CONFIG_FILE} in {directory!r}")
    if not os.path.isfile(bin_path):
        raise FormatError(f"no {DELTA_FILE} in {directory!r}")
    with open(cfg_path, encoding="utf-8") as f:
        config = DeltaConfig.from_json(f.read())
    obj = build(config, model, seed=seed)
    snap = ParameterSnapshot.load(bin_path)

    own = dict(obj.parameters())
    if config.common_naming and not any(k in own for k in snap.keys()):
        translated = _translate_keys(snap, obj)
        if translated is not None:
            snap = translated

    backbone = {k: t for k, t in named_parameters(model) if not _inside_deltas(k)}
    extras = {}
    for key in snap.keys():
        arr = snap[key]
        target = own.get(key) if key in own else backbone.get(key)
        if target is None:
            raise StrictLoadError(f"strict load failed: unexpected key {key!r}")
        if target.shape != arr.shape:
            raise ShapeError(f"shape mismatch for {key!r}: model {target.shape} vs checkpoint {arr.shape}")
        if key not in own:
            extras[key] = arr.copy()
    missing = [k for k in own if k not in snap]
    if missing:
        raise StrictLoadError(f"strict load failed: missing key {missing[0]!r}")
    for key, t in own.items():
        t.data[...] = snap[key]
    obj.extras = extras
    attach(obj, model)
    return obj
