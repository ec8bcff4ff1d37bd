"""Name-based addressing of sub-modules.

Two pattern kinds are understood:

* ``"output.dense"`` -- tail match: the pattern's dot-segments must equal the
  trailing segments of a module path. A full path is the degenerate case.
* ``"re:encoder\\.layer\\.0\\..*"`` -- regular expression that must match the
  entire path.

Matching is on whole segments only, so ``"query"`` never matches
``"special_query_x"``.
"""

import re
from dataclasses import dataclass, field

from .errors import PatternError
from .modtree import named_submodules

REGEX_PREFIX = "re:"


@dataclass(frozen=True)
class AddressPattern:
    raw: str

    def __post_init__(self):
        if not self.raw:
            raise PatternError("empty pattern")
        if self.kind == "path" and any(seg == "" for seg in self.raw.split(".")):
            raise PatternError(f"pattern {self.raw!r} has an empty segment")

    @property
    def kind(self):
        return "regex" if self.raw.startswith(REGEX_PREFIX) else "path"

    @property
    def segments(self):
        return tuple(self.raw.split("."))

    def compile(self):
        expr = self.raw[len(REGEX_PREFIX):]
        try:
            return re.compile(expr)
        except re.error as e:
            raise PatternError(f"invalid regex {expr!r} at position {e.pos}: {e.msg}", e.pos) from e

    def matcher(self):
        """Return a predicate over full paths."""
        if self.kind == "regex":
            rx = self.compile()
            return lambda path: rx.fullmatch(path) is not None
        segs = self.segments
        n = len(segs)

        def match(path):
            if not path:
                return False
            parts = path.split(".")
            return len(parts) >= n and tuple(parts[-n:]) == segs

        return match


def as_pattern(p):
    return p if isinstance(p, AddressPattern) else AddressPattern(p)


@dataclass
class Resolution:
    per_pattern: dict = field(default_factory=dict)
    union: list = field(default_factory=list)


def enumerate_paths(root):
    return [path for path, _ in named_submodules(root)]


def resolve(root, patterns):
    patterns = [as_pattern(p) for p in patterns]
    matchers = [(p.raw, p.matcher()) for p in patterns]
    paths = enumerate_paths(root)
    res = Resolution({raw: [] for raw, _ in matchers})
    seen = set()
    for path in paths:
        for raw, m in matchers:
            if m(path):
                res.per_pattern[raw].append(path)
                if path not in seen:
                    seen.add(path)
                    res.union.append(path)
    return res
