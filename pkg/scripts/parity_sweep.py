"""Learning-rate sweep on the parity task for each delta type.

This is the calibration run behind the pinned settings in
tests/test_acceptance.py (criterion 10). Prints one line per run and a
best-per-type summary.

    python3 scripts/parity_sweep.py
    python3 scripts/parity_sweep.py --deltas bitfit --lrs 0.1 1 3 --steps 1000
"""

import argparse
import itertools
import json

import deltaplug as dp
from deltaplug.tasks import TaskSpec, accuracy, make_splits, sgd_train


def run(delta, lr, steps, length, model_seed, data_seed, train_pooler):
    model = dp.build_toyformer(dp.ToyformerConfig(seed=model_seed), "A")
    if delta != "none":
        dp.build(dp.auto_default(delta), model, seed=data_seed).attach(model)
    exclude = ["deltas", "classifier"] + (["pooler"] if train_pooler else [])
    dp.freeze(model, exclude=exclude)
    train, test = make_splits(TaskSpec("parity", length=length, seed=data_seed))
    try:
        res = sgd_train(model, train, steps, lr, seed=data_seed)
    except FloatingPointError:
        return None
    return {"train_acc": accuracy(model, train), "test_acc": accuracy(model, test),
            "final_loss": res.losses[-1], "wall_time": round(res.wall_time, 2)}


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--deltas", nargs="+", default=["none", "bitfit", "lora", "adapter"])
    p.add_argument("--lrs", nargs="+", type=float, default=[0.1, 0.5, 1.0, 2.0])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--length", type=int, default=3)
    p.add_argument("--model-seeds", nargs="+", type=int, default=[1])
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--train-pooler", action="store_true")
    args = p.parse_args()

    best = {}
    for delta, lr, ms in itertools.product(args.deltas, args.lrs, args.model_seeds):
        r = run(delta, lr, args.steps, args.length, ms, args.data_seed, args.train_pooler)
        row = {"delta": delta, "lr": lr, "model_seed": ms, **(r or {"diverged": True})}
        print(json.dumps(row), flush=True)
        if r and (delta not in best or r["train_acc"] > best[delta]["train_acc"]):
            best[delta] = row
    print("\nbest train accuracy per delta type:")
    for delta, row in best.items():
        print(f"  {delta:8s} lr={row['lr']:<5} train={row['train_acc']:.3f} test={row['test_acc']:.3f}")


if __name__ == "__main__":
    main()
