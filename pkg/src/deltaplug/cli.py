"""Command-line entry point: ``deltaplug {vis,count,train,multitask}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import lifecycle as lc
from .backbones import ToyformerConfig, build_toyformer
from .errors import DeltaPlugError
from .modtree import named_parameters, snapshot
from .tasks import TASKS, TaskSpec, accuracy, make_splits, predict, sgd_train
from .vis import structure_graph

class CommandFailed(Exception):
    pass


def add_model_args(p):
    p.add_argument("--model", choices=["A", "B"], default="A", help="naming convention of the toy backbone")
    p.add_argument("--model-seed", type=int, default=1)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--n-classes", type=int, default=2)


def model_from_args(args):
    cfg = ToyformerConfig(args.d_model, args.n_heads, args.d_ff, args.n_layers, args.vocab,
                          args.max_len, args.n_classes, args.model_seed)
    return build_toyformer(cfg, args.model)


def delta_config(spec):
    """``spec`` is a delta type name or a path to a config JSON file."""
    if spec in lc.DEFAULT_POSITIONS:
        return lc.auto_default(spec)
    if os.path.isfile(spec):
        with open(spec, encoding="utf-8") as f:
            return lc.DeltaConfig.from_json(f.read())
    raise CommandFailed(f"--delta {spec!r} is neither a delta type nor a config file")


def maybe_attach(model, spec, seed=0):
    if spec in (None, "none", "full"):
        return None
    obj = lc.build(delta_config(spec), model, seed=seed)
    obj.attach(model)
    return obj


def count_report(model, obj):
    total = sum(t.size for k, t in named_parameters(model) if ".deltas." not in f".{k}")
    delta = obj.num_params() if obj else 0
    per_binding = []
    if obj:
        for b in obj.bindings:
            per_binding.append({
                "path": b.path,
                "position": b.position[0] if b.position else None,
                "params": sum(t.size for t in b.module.params.values()),
            })
    return {"total_params": total, "delta_params": delta, "ratio": delta / total, "bindings": per_binding}


def cmd_vis(args):
    model = model_from_args(args)
    maybe_attach(model, args.delta)
    text, _ = structure_graph(model)
    sys.stdout.write(text)


def cmd_count(args):
    model = model_from_args(args)
    obj = maybe_attach(model, args.delta)
    rep = count_report(model, obj)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return
    print(f"|theta|       = {rep['total_params']}")
    print(f"|delta theta| = {rep['delta_params']}")
    print(f"ratio         = {rep['ratio']:.6f}")
    for b in rep["bindings"]:
        print(f"  {b['path']}  {b['params']}")


def head_patterns(train_pooler):
    return ["classifier", "pooler"] if train_pooler else ["classifier"]


def cmd_train(args):
    model = model_from_args(args)
    spec = TaskSpec(args.task, length=args.length, seed=args.seed, n_train=args.n_train, n_test=args.n_test)
    train, test = make_splits(spec)
    obj = maybe_attach(model, args.delta, seed=args.seed)
    heads = head_patterns(args.train_pooler)
    if args.delta != "full":
        lc.freeze(model, exclude=[lc.RESERVED_DELTAS] + heads, set_state_dict=True)
    frozen_before = {k: t.data.copy() for k, t in named_parameters(model) if not t.requires_grad}
    lr = args.lr

    try:
        result = sgd_train(model, train, args.steps, lr, seed=args.seed, batch_size=args.batch_size)
    except FloatingPointError as e:
        raise CommandFailed(f"training diverged: {e}") from e

    params = dict(named_parameters(model))
    changed = [k for k, before in frozen_before.items() if params[k].data.tobytes() != before.tobytes()]
    if changed:
        raise CommandFailed(f"frozen parameter {changed[0]!r} changed during training")

    counts = count_report(model, obj)
    report = {
        "task": args.task,
        "delta": args.delta,
        "steps": args.steps,
        "lr": lr,
        "seed": args.seed,
        "losses": result.losses,
        "train_acc": accuracy(model, train),
        "test_acc": accuracy(model, test),
        "total_params": counts["total_params"],
        "delta_params": counts["delta_params"],
        "ratio": counts["ratio"],
        "wall_time": result.wall_time,
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        if obj is not None:
            lc.save_finetuned(obj, model, args.out, extra_modules=heads)
        else:
            snapshot(model, trainable_only=True).save(os.path.join(args.out, "trainable.bin"))
    print(f"task={args.task} delta={args.delta} steps={args.steps} lr={lr} "
          f"final_loss={result.losses[-1]:.4f} train_acc={report['train_acc']:.3f} "
          f"test_acc={report['test_acc']:.3f} |delta theta|={report['delta_params']} "
          f"ratio={report['ratio']:.4f} wall={result.wall_time:.1f}s")
    return report


def load_inputs(path):
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = data.get("inputs")
    if not isinstance(data, list) or not data or not all(isinstance(r, list) and r for r in data):
        raise CommandFailed(f"{path}: expected a non-empty JSON list of token-id lists")
    return [np.asarray(r, dtype=np.int64) for r in data]


def classify(model, ids):
    return int(predict(model, ids[None, :])[0])


def cmd_multitask(args):
    """One shared backbone; each (input, task) attaches, classifies, detaches."""
    if len(args.delta_dir) < 2:
        raise CommandFailed("multitask needs at least two --delta-dir entries")
    inputs = load_inputs(args.inputs)
    model = model_from_args(args)
    before = snapshot(model, trainable_only=False)

    objects = []
    for d in args.delta_dir:
        obj = lc.from_finetuned(d, model)
        obj.detach(model)
        objects.append(obj)

    rows = []
    for i, ids in enumerate(inputs):
        for d, obj in zip(args.delta_dir, objects):
            obj.attach(model)
            pred = classify(model, ids)
            obj.detach(model)
            rows.append({"input": i, "delta_dir": d, "prediction": pred})

    if not snapshot(model, trainable_only=False).bit_equal(before):
        raise CommandFailed("backbone parameters differ after the multitask loop")

    # Isolation oracle: each task alone on its own fresh backbone.
    for d in dict.fromkeys(args.delta_dir):
        solo = model_from_args(args)
        lc.from_finetuned(d, solo)
        for row in rows:
            if row["delta_dir"] == d and classify(solo, inputs[row["input"]]) != row["prediction"]:
                raise CommandFailed(f"prediction for input {row['input']} with {d!r} differs from isolated run")

    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return rows


def build_parser():
    parser = argparse.ArgumentParser(prog="deltaplug", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vis", help="print the collapsed module tree")
    add_model_args(p)
    p.add_argument("--delta", default=None, help="delta type or config JSON to attach first")
    p.set_defaults(func=cmd_vis)

    p = sub.add_parser("count", help="report |theta|, |delta theta| and their ratio")
    add_model_args(p)
    p.add_argument("--delta", default="none")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="delta-tune on a synthetic task")
    add_model_args(p)
    p.add_argument("--delta", default="lora", help="delta type, config JSON, 'none' (head only) or 'full'")
    p.add_argument("--task", choices=TASKS, default="parity")
    p.add_argument("--length", type=int, default=TaskSpec.length)
    p.add_argument("--n-train", type=int, default=TaskSpec.n_train)
    p.add_argument("--n-test", type=int, default=TaskSpec.n_test)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-pooler", action="store_true", help="keep the pooler trainable too")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("multitask", help="serve several task deltas on one backbone")
    add_model_args(p)
    p.add_argument("--delta-dir", action="append", default=[], required=True)
    p.add_argument("--inputs", required=True, help="JSON list of token-id lists")
    p.set_defaults(func=cmd_multitask)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CommandFailed, DeltaPlugError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
