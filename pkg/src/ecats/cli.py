"""Command-line entry point: ecats {gen-data, build-bank, train, eval, explain}.

All randomness derives from --seed through named sub-streams (data, bank,
split, train). Each command writes a ``run.json`` next to its outputs with
the resolved arguments, so a run can be repeated with ``--config run.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (TrainConfig, load_checkpoint, predict, save_checkpoint, save_history,
                         split_stratified, train)
from .concepts import BankConfig, ConceptBank, build_concept_bank
from .datasets import CruiseConfig, MaritimeConfig, gen_cruise, gen_maritime
from .explain import explain_global, explain_local, robustness_report, separation, write_json, write_report
from .stl import render
from .trajectory import SchemaError, load_csv, save_csv, sub_seed

log = logging.getLogger("ecats")


class UsageError(Exception):
    pass


def _need_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input not found: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {p}: {e}") from e
    return p


def _record(out: Path, args, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
    meta = {"version": __version__, "args": cfg}
    meta.update(extra or {})
    write_json(meta, out / "run.json")


# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    out = _out_dir(args.out)
    seed = sub_seed(args.seed, "data")
    if args.dataset == "cruise":
        cfg = CruiseConfig(n_traj=args.n_traj or CruiseConfig.n_traj,
                           n_outliers=CruiseConfig.n_outliers if args.n_outliers is None else args.n_outliers)
        data = gen_cruise(cfg, seed)
    else:
        cfg = MaritimeConfig(n_traj=args.n_traj or MaritimeConfig.n_traj)
        data = gen_maritime(cfg, seed)
    save_csv(data, out / "data.csv")
    with open(out / "tags.csv", "w") as fh:
        fh.write("traj_id,tag\n")
        fh.writelines(f"{i},{t}\n" for i, t in zip(data.ids, data.tags))
    if not args.no_plots:
        from .plotting import dataset_plot
        for v in range(data.trajectories[0].n_dims):
            dataset_plot(data, out / f"data_x{v}.svg", var=v)
    _record(out, args, {"data_seed": seed, "dataset_config": asdict(cfg)})
    print(f"wrote {len(data)} trajectories to {out / 'data.csv'}")


def cmd_build_bank(args) -> None:
    data = load_csv(_need_file(args.data))
    out = _out_dir(args.out)
    seed = sub_seed(args.seed, "bank")
    cfg = BankConfig(max_nodes=args.max_nodes, tau=args.tau, bank_size=args.bank_size,
                     basis_size=args.basis_size, probe_size=args.probe_size,
                     embed_dim=args.embed_dim, seed=seed)
    bank = build_concept_bank(cfg, data)
    bank.save(out)
    _record(out, args, {"bank_seed": seed, "digest": bank.digest()})
    print(f"bank of {len(bank)} concepts (pool {bank.metadata['pool_size']}, d={bank.embed_dim}) in {out}")


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, learning_rate=args.lr, seeds=tuple(range(args.seeds)),
                       batch_size=args.batch_size, optimizer=args.optimizer, d_att=args.d_att,
                       hidden=args.hidden, test_fraction=args.test_fraction)


def cmd_train(args) -> None:
    data = load_csv(_need_file(args.data))
    bank = ConceptBank.load(_need_file(args.bank))
    out = _out_dir(args.out)
    cfg = _train_config(args)
    tr, te = split_stratified(data, cfg.test_fraction, sub_seed(args.seed, "split"))
    write_json({"train": [data.ids[i] for i in tr], "test": [data.ids[i] for i in te]}, out / "split.json")
    trainset = data.subset(tr)
    histories = {}
    for k in cfg.seeds:
        s = sub_seed(args.seed, "train", k)
        params, hist = train(trainset, bank, cfg, seed=s)
        save_checkpoint(params, out / f"model_{k}.csv", {"train_seed": s, "seed_index": k,
                                                         "bank_digest": bank.digest(),
                                                         "config": asdict(cfg)})
        save_history(hist, out / f"history_{k}.csv")
        histories[k] = hist
        print(f"seed {k}: final loss {hist[-1]['loss']:.4f}, train accuracy {hist[-1]['accuracy']:.3f}")
    if not args.no_plots:
        from .plotting import history_plot
        history_plot(histories, out / "history.svg")
    _record(out, args, {"n_models": len(cfg.seeds)})


def _models(model_dir: Path) -> list[Path]:
    paths = sorted(model_dir.glob("model_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise UsageError(f"no model_*.csv checkpoints in {model_dir}")
    return paths


def _split(model_dir: Path, data) -> tuple[list[int], list[int]]:
    split = json.loads(_need_file(model_dir / "split.json").read_text())
    pos = {tid: i for i, tid in enumerate(data.ids)}
    try:
        return [pos[t] for t in split["train"]], [pos[t] for t in split["test"]]
    except KeyError as e:
        raise UsageError(f"trajectory {e} of the training split is missing from the data file") from e


def cmd_eval(args) -> None:
    data = load_csv(_need_file(args.data))
    bank = ConceptBank.load(_need_file(args.bank))
    model_dir = _need_file(args.model)
    out = _out_dir(args.out)
    _, te = _split(model_dir, data)
    test = data.subset(te)
    accs = []
    for path in _models(model_dir):
        params, _ = load_checkpoint(path)
        accs.append(predict(params, test, bank).accuracy(test.y))
    metrics = {"accuracy_mean": float(np.mean(accs)), "accuracy_std": float(np.std(accs)),
               "per_seed": accs, "n_test": len(te)}
    write_json(metrics, out / "metrics.json")
    _record(out, args)
    print(f"test accuracy {metrics['accuracy_mean']:.4f} +- {metrics['accuracy_std']:.4f} over {len(accs)} seeds")


def cmd_explain(args) -> None:
    if (args.traj_id is None) == (args.cls is None):
        raise UsageError("give exactly one of --traj-id or --class")
    data = load_csv(_need_file(args.data))
    bank = ConceptBank.load(_need_file(args.bank))
    model_dir = _need_file(args.model)
    out = _out_dir(args.out)
    params, _ = load_checkpoint(_need_file(model_dir / f"model_{args.model_index}.csv"))
    pred = predict(params, data, bank)
    kw = dict(sim_threshold=args.sim_threshold, outlier_fraction=args.outlier_fraction)
    if args.traj_id is not None:
        if args.traj_id not in data.ids:
            raise UsageError(f"unknown trajectory id {args.traj_id!r}")
        i = data.ids.index(args.traj_id)
        expl = explain_local(pred.attention[i], data.trajectories[i], bank, k_top=args.k_top,
                             predicted_class=int(pred.labels[i]), reference=data,
                             trajectory_id=args.traj_id, **kw)
        label, stem = expl.predicted_class, f"local_{args.traj_id}"
    else:
        locs = [explain_local(a, x, bank, k_top=args.k_top, predicted_class=int(y), trajectory_id=tid,
                              sim_threshold=args.sim_threshold)
                for a, x, y, tid in zip(pred.attention, data.trajectories, pred.labels, data.ids)]
        expl = explain_global(locs, args.cls, bank, reference=data, k_top=args.k_top, **kw)
        label, stem = args.cls, f"global_{args.cls}"
    report = robustness_report(expl.formula, data)
    own, other = separation(report, label)
    doc = expl.to_json()
    doc["separation"] = {"own_positive": own, "other_negative": other}
    write_json(doc, out / f"{stem}.json")
    write_report(report, out / f"{stem}_robustness.csv")
    if not args.no_plots:
        from .plotting import robustness_scatter
        robustness_scatter(report, out / f"{stem}_robustness.svg", render(expl.formula))
    _record(out, args)
    print(render(expl.formula))
    print(f"own class rho>0: {own:.3f}, other class rho<0: {other:.3f}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecats", description="STL concept-based anomaly detection for trajectories")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag values; explicit flags override it")
    common.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--no-plots", action="store_true", help="skip SVG output")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--dataset", choices=["cruise", "maritime"], default="cruise")
    g.add_argument("--n-traj", type=int)
    g.add_argument("--n-outliers", type=int)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-bank", parents=[common], help="build the STL concept bank")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--max-nodes", type=int, default=3)
    b.add_argument("--tau", type=float, default=0.9)
    b.add_argument("--bank-size", type=int, default=256)
    b.add_argument("--basis-size", type=int, default=5000)
    b.add_argument("--probe-size", type=int, default=1000)
    b.add_argument("--embed-dim", type=int, default=30)
    b.set_defaults(func=cmd_build_bank)

    t = sub.add_parser("train", parents=[common], help="train one classifier per seed")
    t.add_argument("--data", required=True)
    t.add_argument("--bank", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-5)
    t.add_argument("--seeds", type=int, default=5, help="number of initialisation seeds")
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--d-att", type=int, default=32)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--test-fraction", type=float, default=0.3)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="test accuracy mean and std over seeds")
    e.add_argument("--data", required=True)
    e.add_argument("--bank", required=True)
    e.add_argument("--model", required=True, help="directory written by train")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", parents=[common], help="local (--traj-id) or global (--class) explanation")
    x.add_argument("--data", required=True)
    x.add_argument("--bank", required=True)
    x.add_argument("--model", required=True)
    x.add_argument("--model-index", type=int, default=0)
    x.add_argument("--out", required=True)
    x.add_argument("--traj-id")
    x.add_argument("--class", dest="cls", type=int, choices=[0, 1])
    x.add_argument("--k-top", type=int, default=3)
    x.add_argument("--sim-threshold", type=float, default=0.9)
    x.add_argument("--outlier-fraction", type=float, default=0.05)
    x.set_defaults(func=cmd_explain)
    return p


def _parse(parser: argparse.ArgumentParser, argv):
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known_pre, _ = pre.parse_known_args(argv)
    if known_pre.config:
        path = Path(known_pre.config)
        if not path.exists():
            raise UsageError(f"input not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from e
        cfg = cfg.get("args", cfg)  # a run.json is accepted as-is
        choices = parser._subparsers._group_actions[0].choices  # noqa: SLF001
        command = next((a for a in argv if a in choices), None)
        if command is not None:
            subparser = choices[command]
            dests = {a.dest for a in subparser._actions}  # noqa: SLF001
            unknown = set(cfg) - dests - {"command"}
            if unknown:
                raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
            subparser.set_defaults(**{k: v for k, v in cfg.items() if k in dests and k != "config"})
            for a in subparser._actions:  # noqa: SLF001
                if a.dest in cfg:
                    a.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except (UsageError, SchemaError, OSError) as e:
        print(f"ecats: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, ArithmeticError) as e:
        print(f"ecats: computation failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
