"""Named module trees, parameter snapshots and the ODLT checkpoint format."""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NotFoundError, ShapeError, StrictLoadError

MAGIC = b"ODLT"
FORMAT_VERSION = 1
RESERVED_DELTAS = "deltas"


class ModuleNode:
    """A node of the sub-module tree.

    Subclasses implement ``forward``; calling the node dispatches through
    ``self.forward`` so an instance-level override (installed by the routing
    layer) takes effect without touching the class.
    """

    def __init__(self):
        self.local_name = type(self).__name__
        self._children = {}
        self._params = {}
        self.wrapped = None

    def add_child(self, name, node):
        if not name or "." in name:
            raise ValueError(f"invalid child name {name!r}")
        if name in self._children:
            raise ValueError(f"child {name!r} already registered")
        node.local_name = name
        self._children[name] = node
        return node

    def remove_child(self, name):
        return self._children.pop(name)

    def add_param(self, name, tensor):
        if not name or "." in name:
            raise ValueError(f"invalid parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    @property
    def children(self):
        return self._children

    @property
    def params(self):
        return self._params

    def __getattr__(self, name):
        d = self.__dict__
        if "_children" in d and name in d["_children"]:
            return d["_children"][name]
        if "_params" in d and name in d["_params"]:
            return d["_params"][name]
        raise AttributeError(f"{type(self).__name__!s} has no attribute {name!r}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, h, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} has no forward")

    def __repr__(self):
        return f"{type(self).__name__}({self.local_name!r})"


class Container(ModuleNode):
    """Holds children only; has no forward of its own."""


def join(prefix, name):
    return f"{prefix}.{name}" if prefix else name


def named_submodules(root):
    """Depth-first preorder ``(path, node)`` list; the root has path ``""``."""
    out = []
    stack = [("", root)]
    while stack:
        path, node = stack.pop()
        out.append((path, node))
        for name, child in reversed(list(node.children.items())):
            stack.append((join(path, name), child))
    return out


def named_parameters(root):
    return [
        (join(path, pname), t)
        for path, node in named_submodules(root)
        for pname, t in node.params.items()
    ]


def get_by_path(root, path):
    if path == "":
        return root
    node = root
    walked = []
    for seg in path.split("."):
        child = node.children.get(seg)
        if child is None:
            raise NotFoundError(path, ".".join(walked))
        walked.append(seg)
        node = child
    return node


def parameter_count(root):
    return sum(t.size for _, t in named_parameters(root))


def set_trainable(root, flag, exclude=()):
    """Set ``requires_grad`` on every parameter outside subtrees matched by ``exclude``.

    Exclusion patterns use tail matching (see :mod:`deltaplug.addressing`).
    Returns how many parameter tensors changed flag.
    """
    from .addressing import resolve

    skip = resolve(root, list(exclude)).union if exclude else []
    skip_prefixes = tuple(skip)
    changed = 0
    for path, node in named_submodules(root):
        if any(path == s or path.startswith(s + ".") for s in skip_prefixes):
            continue
        for t in node.params.values():
            if t.requires_grad != bool(flag):
                t.requires_grad = bool(flag)
                changed += 1
    return changed


@dataclass
class ParameterSnapshot:
    """Ordered ``full_param_path -> float64 array`` map, keys sorted."""

    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = {k: np.array(self.entries[k], dtype=np.float64) for k in sorted(self.entries)}

    def keys(self):
        return list(self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key):
        return self.entries[key]

    @property
    def num_floats(self):
        return sum(a.size for a in self.entries.values())

    def bit_equal(self, other):
        if self.keys() != other.keys():
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    def to_bytes(self):
        manifest = json.dumps(
            [{"key": k, "shape": list(a.shape)} for k, a in self.entries.items()]
        ).encode("utf-8")
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(manifest)), manifest]
        parts += [a.astype("<f8").tobytes() for a in self.entries.values()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < 16 or buf[:4] != MAGIC:
            raise FormatError(f"bad magic bytes {bytes(buf[:4])!r}, expected {MAGIC!r}")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}")
        (mlen,) = struct.unpack_from("<Q", buf, 8)
        start = 16 + mlen
        if start > len(buf):
            raise FormatError("truncated manifest")
        try:
            manifest = json.loads(bytes(buf[16:start]).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"unreadable manifest: {e}") from e
        entries = {}
        offset = start
        for item in manifest:
            shape = tuple(item["shape"])
            n = int(np.prod(shape, dtype=np.int64))
            end = offset + 8 * n
            if end > len(buf):
                raise FormatError(f"truncated payload for {item['key']!r}")
            entries[item["key"]] = np.frombuffer(buf[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            offset = end
        if offset != len(buf):
            raise FormatError(f"{len(buf) - offset} trailing bytes after payload")
        return cls(entries)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def snapshot(root, trainable_only=None):
    """Snapshot parameters; ``trainable_only=None`` defers to a prior ``freeze(set_state_dict=True)``."""
    if trainable_only is None:
        trainable_only = getattr(root, "state_dict_trainable_only", False)
    return ParameterSnapshot({
        key: t.data.copy()
        for key, t in named_parameters(root)
        if t.requires_grad or not trainable_only
    })


@dataclass
class LoadReport:
    missing: list
    unexpected: list


def load_snapshot(root, snap, strict=True):
    params = dict(named_parameters(root))
    missing = [k for k in sorted(params) if k not in snap]
    unexpected = [k for k in snap.keys() if k not in params]
    if strict and (missing or unexpected):
        first = (missing or unexpected)[0]
        kind = "missing" if missing else "unexpected"
        raise StrictLoadError(f"strict load failed: {kind} key {first!r} "
                              f"({len(missing)} missing, {len(unexpected)} unexpected)")
    for key, arr in snap.entries.items():
        t = params.get(key)
        if t is not None and t.shape != arr.shape:
            raise ShapeError(f"shape mismatch for {key!r}: model {t.shape} vs snapshot {arr.shape}")
    for key, arr in snap.entries.items():
        t = params.get(key)
        if t is not None:
            t.data[...] = arr
    return LoadReport(missing, unexpected)
