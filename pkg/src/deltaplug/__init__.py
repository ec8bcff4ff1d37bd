"""Plug-in delta tuning for toy transformer backbones."""

from .addressing import AddressPattern, enumerate_paths, resolve
from .backbones import ToyformerConfig, build_toyformer
from .deltas import capture_shapes, create_delta
from .lifecycle import (DeltaConfig, DeltaObject, NAME_MAPPING, attach, auto_default, build,
                        detach, freeze, from_finetuned, save_finetuned)
from .modtree import (ModuleNode, ParameterSnapshot, get_by_path, load_snapshot,
                      named_parameters, named_submodules, set_trainable, snapshot)
from .routing import MergeOp, Route, install, uninstall
from .tensor import Tensor, backward, no_grad
from .vis import export_view, structure_graph

__version__ = "0.1.0"
