"""``packmil`` command line: data generation, packing statistics, training, evaluation, checks.

Exit codes: 0 ok, 1 usage error, 2 data/validation error, 3 training fault.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import TrainingFault
from .config import Config, ConfigError, UnknownKeyError, parse_config_text, task_defaults
from .data import FeatureFormatError, ManifestError, PersistenceError, generate_synthetic_dataset, load_bags, load_manifest
from .gradcheck import run_suites
from .masks import build_masks
from .model import AbmilParams, aggregate_main, load_checkpoint, save_checkpoint
from .packing import (
    adapt_pack_length,
    bag_rng,
    layout_padding_ratio,
    pack_sequences,
    packed_utilization,
    pad_to_max_utilization,
    plan_packs,
    split_instances,
)
from .trainer import PackTrainer, build_model, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAULT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Override(argparse.Action):
    """Collect config overrides in command-line order so the last flag wins."""

    def __init__(self, *args, key=None, **kwargs):
        self.key = key
        super().__init__(*args, **kwargs)

    def __call__(self, parser, namespace, value, option_string=None):
        if self.key is None:
            key, sep, raw = value.partition("=")
            if not sep or not key:
                raise UsageError(f"--set expects key=value, got {value!r}")
        else:
            key, raw = self.key, value
        namespace.overrides = [*(namespace.overrides or []), (key.strip(), raw)]
        if self.dest != "overrides":
            setattr(namespace, self.dest, value)


def _common(p: argparse.ArgumentParser, *, length=False, task=True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", action=_Override, key="train.seed", help="random seed")
    if task:
        p.add_argument("--task", action=_Override, key="data.task", choices=("grading", "subtyping", "survival"))
    if length:
        p.add_argument("-L", dest="pack_length", action=_Override, key="train.pack_length", help="pack length")
    p.add_argument("--set", dest="overrides", action=_Override, default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. loss.lambda=0.5")
    p.add_argument("--report", nargs="?", const="-", metavar="PATH",
                   help="write key=value summary (stdout if no path)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="packmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic feature dataset and manifest")
    _common(p)
    p.add_argument("--out", default="data", help="output directory")

    p = sub.add_parser("pack-stats", help="padding statistics of a manifest's bags")
    _common(p, length=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("-r", dest="split_ratio", action=_Override, key="train.split_ratio", help="discard ratio r")
    p.add_argument("--fixed-group", type=int, metavar="N", help="also report fixed N-bags-per-pack packing")
    p.add_argument("--batch-size", type=int, default=0, help="bags per packing call (0 = all)")

    p = sub.add_parser("train", help="train on a manifest (or on synthetic data from the config)")
    _common(p, length=True)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint", help="where to save the best model")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    _common(p, length=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    _common(p, task=False)
    p.add_argument("--cases", type=int, default=50)

    p = sub.add_parser("bench", help="token utilization and throughput: packed vs pad-to-max")
    _common(p, length=True, task=False)
    p.add_argument("--bags", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--sigma", type=float, default=1.0, help="log-normal sigma of bag lengths")
    p.add_argument("--dim", type=int, default=16)
    return parser


def resolve_config(args) -> Config:
    """Task recipe, then config file, then flags in the order given."""
    task = None
    for key, raw in args.overrides:
        if key == "data.task":
            task = raw
    cfg = task_defaults(task) if task else Config()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        parse_config_text(text, cfg)
    for key, raw in args.overrides:
        cfg.set(key, raw)
    return cfg.validate()


def _emit(report: dict, args, out) -> None:
    if args.report is None:
        return
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(report.items()))
    if args.report == "-":
        out.write(text)
    else:
        Path(args.report).write_text(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return "na"
    return str(v)


def _say(args, out, msg: str) -> None:
    # human-readable text goes to stdout unless a key=value report is taking it
    if args.report != "-":
        out.write(msg + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg: Config, out) -> int:
    manifest = generate_synthetic_dataset(cfg.data, cfg.train.seed, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    _say(args, out, f"wrote {len(manifest)} bags to {args.out} "
                    f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    n = np.array([r.n_patches for r in manifest.rows])
    _emit({"bags": len(manifest), "dim": cfg.data.dim, "task": cfg.task, "manifest": str(Path(args.out) / "manifest.csv"),
           "len_min": int(n.min()), "len_max": int(n.max()), "len_mean": float(n.mean()),
           **{f"split_{k}": v for k, v in counts.items()}}, args, out)
    return EXIT_OK


def _histogram(lengths: np.ndarray) -> list[tuple[int, int, int]]:
    edges = 2 ** np.arange(int(np.floor(np.log2(max(lengths.min(), 1)))), int(np.ceil(np.log2(lengths.max() + 1))) + 1)
    counts, _ = np.histogram(lengths, bins=edges)
    return [(int(a), int(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


def cmd_pack_stats(args, cfg: Config, out) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    lengths = np.array([r.n_patches for r in manifest.rows], dtype=np.int64)
    L, r = cfg.train.pack_length, cfg.train.split_ratio
    if r > 0:
        # main-branch lengths after the per-bag Bernoulli split
        kept = []
        for i, n in enumerate(lengths):
            s = split_instances(int(n), r, min_keep=min(cfg.train.min_patches, int(n)), seed=None,
                                rng=bag_rng(cfg.train.seed, i))
            kept.append(len(s.kept))
        lengths = np.array(kept, dtype=np.int64)
    bs = args.batch_size or len(lengths)
    chunks = [lengths[i:i + bs] for i in range(0, len(lengths), bs)]

    def stats(max_bags):
        packs = filled = slots = 0
        for c in chunks:
            L_eff = adapt_pack_length(c, L)
            plan = plan_packs([min(int(n), L_eff) for n in c], L_eff, max_bags)
            packs += len(plan)
            filled += sum(s.length for segs in plan for s in segs)
            slots += len(plan) * L_eff
        return packs, 1.0 - filled / slots

    report = {"bags": len(lengths), "L": L, "r": r, "batch_size": bs}
    report["packs"], report["padding_adaptive"] = stats(None)
    _say(args, out, f"{len(lengths)} bags, L={L}, r={r}: {report['packs']} packs, "
                    f"adaptive padding ratio {report['padding_adaptive']:.4f}")
    if args.fixed_group:
        if args.fixed_group < 1:
            raise UsageError("--fixed-group must be >= 1")
        report["packs_fixed"], report["padding_fixed"] = stats(args.fixed_group)
        report["fixed_group"] = args.fixed_group
        _say(args, out, f"fixed-group-{args.fixed_group}: {report['packs_fixed']} packs, "
                        f"padding ratio {report['padding_fixed']:.4f}")
    _say(args, out, "length histogram:")
    for lo, hi, c in _histogram(lengths):
        _say(args, out, f"  [{lo:>5}, {hi:>5})  {c:>6}  {'#' * int(np.ceil(60 * c / len(lengths)))}")
    _emit(report, args, out)
    return EXIT_OK


def _load_data(args, cfg: Config):
    if args.manifest:
        manifest = load_manifest(args.manifest, max_grade=cfg.data.n_classes - 1,
                                 n_subtypes=cfg.data.n_classes, time_bins=cfg.data.time_bins)
        bags = {s: load_bags(manifest, s, cfg.data.dim) for s in ("train", "val", "test")}
        tasks = {b.label.task for bs in bags.values() for b in bs}
        if tasks - {cfg.task}:
            raise ManifestError(f"manifest holds {sorted(tasks)} labels but the configured task is {cfg.task}")
        return bags
    from .data import synthesize_bags

    all_bags, splits = synthesize_bags(cfg.data, cfg.train.seed)
    return {s: [b for b, t in zip(all_bags, splits) if t == s] for s in ("train", "val", "test")}


def _metric_report(prefix: str, rep) -> dict:
    return {f"{prefix}_{k}": v for k, v in rep.as_dict().items() if v is not None}


def cmd_train(args, cfg: Config, out) -> int:
    bags = _load_data(args, cfg)
    if not bags["train"]:
        raise ManifestError("no training bags")
    trainer = PackTrainer(cfg, bags["train"][0].dim)
    t0 = time.perf_counter()
    fit = trainer.fit(bags["train"], bags["val"])
    elapsed = time.perf_counter() - t0
    report = {"best_epoch": fit.best_epoch, "best_val_metric": fit.best_metric, "epochs_run": len(fit.history),
              "final_loss": fit.history[-1]["loss"], "task": cfg.task, "seconds": elapsed}
    for h in fit.history:
        _say(args, out, f"epoch {h['epoch']:>3}  lr {h['lr']:.2e}  loss {h['loss']:.5f}  val {h['val_metric']:.4f}")
    if bags["test"]:
        rep = evaluate(bags["test"], trainer.model, cfg)
        report.update(_metric_report("test", rep))
        _say(args, out, "test: " + ", ".join(f"{k} {v:.4f}" for k, v in rep.as_dict().items() if v is not None))
    if args.checkpoint:
        save_checkpoint(trainer.model.state(), args.checkpoint)
        report["checkpoint"] = args.checkpoint
        _say(args, out, f"saved best model (epoch {fit.best_epoch}) to {args.checkpoint}")
    _emit(report, args, out)
    return EXIT_OK


def cmd_eval(args, cfg: Config, out) -> int:
    manifest = load_manifest(args.manifest, max_grade=cfg.data.n_classes - 1,
                             n_subtypes=cfg.data.n_classes, time_bins=cfg.data.time_bins)
    bags = load_bags(manifest, args.split, cfg.data.dim)
    if not bags:
        raise ManifestError(f"manifest has no {args.split} bags")
    model = build_model(cfg, bags[0].dim)
    try:
        model.load_state(load_checkpoint(args.checkpoint))
    except ValueError as exc:
        raise FeatureFormatError(str(exc)) from exc
    rep = evaluate(bags, model, cfg)
    _say(args, out, f"{args.split} ({len(bags)} bags): "
                    + ", ".join(f"{k} {v:.4f}" for k, v in rep.as_dict().items() if v is not None))
    _emit({"bags": len(bags), "split": args.split, **_metric_report(args.split, rep)}, args, out)
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config, out) -> int:
    results = run_suites(args.cases, seed=cfg.train.seed)
    report = {}
    for r in results:
        _say(args, out, f"{'PASS' if r.passed else 'FAIL'}  {r.name:<16} max rel err {r.max_rel_err:.3e}  ({r.n_cases} cases)")
        report[f"{r.name}_max_rel_err"] = r.max_rel_err
        report[f"{r.name}_pass"] = int(r.passed)
    ok = all(r.passed for r in results)
    report["all_pass"] = int(ok)
    _emit(report, args, out)
    return EXIT_OK if ok else EXIT_FAULT


def _forward_tokens_per_s(batches, dim, params, packed: bool, L: int) -> float:
    """Real tokens per second through the attention aggregator (forward only)."""
    rng = np.random.default_rng(0)
    tokens = 0
    t0 = time.perf_counter()
    for c in batches:
        bags = [rng.normal(size=(n, dim)) for n in c]
        if packed:
            batch = pack_sequences(bags, L)
            for pack in batch.packs:
                aggregate_main(pack.features, build_masks(pack.bag_ids, len(bags)), params)
            tokens += batch.n_tokens
        else:
            m = max(c)
            for x in bags:
                # pad-to-max: every bag costs the batch maximum
                n = x.shape[0]
                padded = np.zeros((m, dim))
                padded[:n] = x
                aggregate_main(padded, build_masks((np.arange(m) < n).astype(np.int64), 1), params)
                tokens += n
    return tokens / (time.perf_counter() - t0)


def cmd_bench(args, cfg: Config, out) -> int:
    if args.bags < 1 or args.batch_size < 1:
        raise UsageError("--bags and --batch-size must be >= 1")
    rng = np.random.default_rng(cfg.train.seed)
    lengths = np.clip(np.round(rng.lognormal(np.log(200), args.sigma, args.bags)), 16, 4096).astype(int).tolist()
    L, bs = cfg.train.pack_length, args.batch_size
    arr = np.asarray(lengths, dtype=np.float64)
    cv = float(arr.std() / arr.mean())
    u_pad = pad_to_max_utilization(lengths, bs)
    u_pack = packed_utilization(lengths, bs, L)
    batches = [lengths[i:i + bs] for i in range(0, min(len(lengths), 20 * bs), bs)]
    params = AbmilParams.init(args.dim, 2, d_attn=32, rng=np.random.default_rng(0))
    tps_pad = _forward_tokens_per_s(batches, args.dim, params, False, L)
    tps_pack = _forward_tokens_per_s(batches, args.dim, params, True, L)
    report = {"bags": args.bags, "batch_size": bs, "L": L, "cv": cv, "utilization_pad_to_max": u_pad,
              "utilization_packed": u_pack, "utilization_gain": u_pack / u_pad,
              "padding_ratio_whole_set": layout_padding_ratio(lengths, L),
              "tokens_per_s_pad_to_max": tps_pad, "tokens_per_s_packed": tps_pack}
    _say(args, out, f"{args.bags} bags, lognormal sigma {args.sigma} (CV {cv:.2f}), bs {bs}, L {L}")
    _say(args, out, f"token utilization: pad-to-max {u_pad:.3f}, packed {u_pack:.3f} ({u_pack / u_pad:.2f}x)")
    _say(args, out, f"aggregator forward: pad-to-max {tps_pad:,.0f} real tokens/s, packed {tps_pack:,.0f} real tokens/s")
    _emit(report, args, out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pack-stats": cmd_pack_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def run(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        err.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=err,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg, out)
    except (UsageError, UnknownKeyError) as exc:
        err.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except TrainingFault as exc:
        err.write(f"training fault: {exc}\n")
        return EXIT_FAULT
    except (ConfigError, ManifestError, FeatureFormatError, PersistenceError, ValueError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
