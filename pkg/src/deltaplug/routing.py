"""Dynamic tensor re-routing.

A target node's ``forward`` is replaced, on the instance only, by a wrapper
that splices a delta module into the hidden-state flow along one of three
routes:

* ``INPUT``     h_in  <- merge(h_in, delta(h_in)), then the original forward
* ``OUTPUT``    h_out <- merge(h_out, delta(h_out))
* ``PARALLEL``  h_out <- merge(h_out, delta(h_in))

``merge`` is either addition or replacement by the delta output. Several
deltas may sit on one node. Add-merge deltas wrap each other in attachment
order (the first installed is innermost); Replace-merge deltas always sit
outside all Add-merge ones, so a prefix prepended to a projection's output
is never fed to, or summed with, an additive delta sized for the tokens.
"""

import enum
import functools
from dataclasses import dataclass, field

from . import tensor as T
from .errors import NotAttachedError, RoutingError


class Route(enum.Enum):
    INPUT = "input"
    OUTPUT = "output"
    PARALLEL = "parallel"


class MergeOp(enum.Enum):
    ADD = "add"
    REPLACE = "replace"


@dataclass
class Entry:
    delta: object
    route: Route
    merge: MergeOp


@dataclass
class Interception:
    path: str
    saved: object  # instance-level forward present before wrapping, if any
    original: object
    entries: list = field(default_factory=list)

    def ordered(self):
        adds = [e for e in self.entries if e.merge is MergeOp.ADD]
        return adds + [e for e in self.entries if e.merge is MergeOp.REPLACE]

    def compose(self):
        fn = self.original
        for entry in self.ordered():
            fn = _wrap_one(fn, entry, self.path, self.original)
        return fn


def _merge(h, d, entry, path):
    if entry.merge is MergeOp.REPLACE:
        return d
    if h.shape != d.shape:
        raise RoutingError(
            f"cannot add delta output at {path!r} (route {entry.route.value}): "
            f"hidden state {h.shape} vs delta {d.shape}"
        )
    return T.add(h, d)


def _wrap_one(inner, entry, path, original):
    delta, route = entry.delta, entry.route

    if route is Route.INPUT:
        def wrapper(h, *args, **kwargs):
            return inner(_merge(h, delta(h), entry, path), *args, **kwargs)
    elif route is Route.OUTPUT:
        def wrapper(h, *args, **kwargs):
            out = inner(h, *args, **kwargs)
            return _merge(out, delta(out), entry, path)
    else:
        def wrapper(h, *args, **kwargs):
            out = inner(h, *args, **kwargs)
            return _merge(out, delta(h), entry, path)

    return functools.wraps(original)(wrapper)


def install(node, delta, route, merge=MergeOp.ADD, path=None):
    route, merge = Route(route), MergeOp(merge)
    ic = node.wrapped
    if ic is None:
        ic = Interception(path if path is not None else node.local_name,
                          node.__dict__.get("forward"), node.forward)
        node.wrapped = ic
    ic.entries.append(Entry(delta, route, merge))
    node.forward = ic.compose()


def uninstall(node, delta):
    ic = node.wrapped
    idx = None
    if ic is not None:
        idx = next((i for i, e in enumerate(ic.entries) if e.delta is delta), None)
    if idx is None:
        raise NotAttachedError(f"delta {delta!r} is not installed on {node!r}")
    del ic.entries[idx]
    if ic.entries:
        node.forward = ic.compose()
        return
    if ic.saved is None:
        del node.__dict__["forward"]
    else:
        node.forward = ic.saved
    node.wrapped = None


def installed(node):
    return [e.delta for e in node.wrapped.entries] if node.wrapped else []


def wrapped_forward(node, h, *args, **kwargs):
    if node.wrapped is None:
        raise NotAttachedError(f"{node!r} carries no interception")
    return node.forward(h, *args, **kwargs)
