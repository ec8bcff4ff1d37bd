"""Compact text rendering of a module tree.

Runs of consecutively numbered siblings with identical structure (names,
parameter shapes, trainable flags, delta markers) are folded into one entry
``name.[i-j]``. Markers: ``[d]`` delta-related node, ``[t]`` trainable
parameter.
"""

import json
import re
from dataclasses import dataclass, field

from .modtree import RESERVED_DELTAS

_RANGE = re.compile(r"^\[(\d+)-(\d+)\]$")


@dataclass
class ParamLine:
    name: str
    shape: tuple
    trainable: bool


@dataclass
class TreeView:
    segments: list
    delta: bool
    params: list = field(default_factory=list)
    children: list = field(default_factory=list)

    @property
    def name(self):
        return ".".join(self.segments)

    def to_dict(self):
        return {
            "name": self.name,
            "segments": list(self.segments),
            "delta": self.delta,
            "params": [{"name": p.name, "shape": list(p.shape), "trainable": p.trainable} for p in self.params],
            "children": [c.to_dict() for c in self.children],
        }

    def count(self):
        return 1 + sum(c.count() for c in self.children)


def is_delta_node(node, local_name):
    return (local_name == RESERVED_DELTAS or getattr(node, "is_delta", False)
            or node.wrapped is not None)


def _signature(node, name):
    return (
        name if not name.isdigit() else "#",
        is_delta_node(node, name),
        tuple((p, t.shape, t.requires_grad) for p, t in node.params.items()),
        tuple((n, _signature(c, n)) for n, c in node.children.items()),
    )


def _view(node, name):
    view = TreeView(
        [name],
        is_delta_node(node, name),
        [ParamLine(p, t.shape, t.requires_grad) for p, t in node.params.items()],
    )
    items = list(node.children.items())
    i = 0
    while i < len(items):
        cname, child = items[i]
        j = i
        if cname.isdigit():
            sig = _signature(child, cname)
            while (j + 1 < len(items) and items[j + 1][0].isdigit()
                   and int(items[j + 1][0]) == int(items[j][0]) + 1
                   and _signature(items[j + 1][1], items[j + 1][0]) == sig):
                j += 1
        cv = _view(child, cname)
        if j > i:
            cv.segments = [f"[{cname}-{items[j][0]}]"]
        view.children.append(cv)
        i = j + 1
    # A parameterless node whose children folded into one range absorbs it.
    if (not view.params and len(view.children) == 1 and len(items) > 1
            and _RANGE.match(view.children[0].segments[-1])):
        only = view.children[0]
        view.segments = view.segments + only.segments
        view.delta = view.delta or only.delta
        view.params = only.params
        view.children = only.children
    return view


def build_view(root):
    return _view(root, getattr(root, "local_name", "root"))


def _render(view, depth, lines):
    marks = " [d]" if view.delta else ""
    params = ", ".join(
        f"{p.name}:[{','.join(str(d) for d in p.shape)}]{'[t]' if p.trainable else ''}" for p in view.params
    )
    lines.append("  " * depth + view.name + marks + (f"  {params}" if params else ""))
    for c in view.children:
        _render(c, depth + 1, lines)


def structure_graph(root):
    """Return ``(text, TreeView)``."""
    view = build_view(root)
    lines = []
    _render(view, 0, lines)
    return "\n".join(lines) + "\n", view


def export_view(root):
    return build_view(root).to_dict()


def export_json(root):
    return json.dumps(export_view(root), indent=2)


def _segment_options(seg):
    m = _RANGE.match(seg)
    if m:
        return [str(k) for k in range(int(m.group(1)), int(m.group(2)) + 1)]
    return [seg]


def expand_paths(doc):
    """Re-expand an exported document into its DFS path list (root is ``""``)."""
    out = [""]

    def emit(node, segs, base):
        if not segs:
            for child in node["children"]:
                emit(child, child["segments"], base)
            return
        for opt in _segment_options(segs[0]):
            path = f"{base}.{opt}" if base else opt
            out.append(path)
            emit(node, segs[1:], path)

    # The root's own name is not part of any path.
    emit(doc, doc["segments"][1:], "")
    return out
