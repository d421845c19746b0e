"""``mvfuse`` command line: gen-data, train, eval, probe, report.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric abort.
Only ``eval`` writes to stdout (one JSON object); everything else logs to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import checkpoint as ck
from . import gradprobe
from . import trainer as tr
from .config import MODES, RunConfig, dump_config, load_config, with_corpus
from .datagen import PARTITIONS, generate_corpus, load_corpus, save_corpus
from .errors import ConfigError, CorpusIOError, NumericAbort

log = logging.getLogger("mvfuse")

REPORT_COLUMNS = ("epoch", "conflict_fraction", "global_cos", "g_fbank_mean",
                  "g_fbank_frac_above_1", "n_probes")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw  # bare strings are convenient on a shell
    return out


def cmd_gen_data(args) -> int:
    rc = load_config(args.config, _overrides(args.set))
    corpus = generate_corpus(rc.corpus)
    meta = save_corpus(corpus, args.out)
    lo, hi = corpus.unit_range
    log.info("wrote corpus to %s", args.out)
    for name in PARTITIONS:
        log.info("  %-5s %5d examples  sha256 %s", name, meta["partitions"][name]["count"],
                 meta["partitions"][name]["sha256"][:16])
    if corpus.codebook is not None:
        log.info("  codebook k=%d distortion %.6g after %d iterations", corpus.codebook.k,
                 corpus.codebook.distortions[-1], corpus.codebook.iterations)
    log.info("  unit view range [%.6g, %.6g]", lo, hi)
    return 0


def _load_run_config(args, corpus) -> RunConfig:
    over = _overrides(args.set)
    if args.mode:
        over["train.mode"] = args.mode
    if args.noise:
        over["train.noise"] = args.noise
    rc = load_config(args.config, over)
    # the corpus on disk is authoritative for data-shape keys
    return with_corpus(rc, corpus.spec)


def cmd_train(args) -> int:
    corpus = load_corpus(args.data)
    rc = _load_run_config(args, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(rc))
    init = ck.load(args.init_from).params if args.init_from else None
    baseline = None
    if args.baseline:
        path = Path(args.baseline) / "summary.json"
        try:
            baseline = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CorpusIOError(f"{path}: cannot read baseline summary ({exc})") from None
    try:
        res = tr.train_run(rc, corpus, out, init_params=init)
    except NumericAbort as exc:
        dump = out / "nan_dump.json"
        dump.write_text(json.dumps(exc.dump, indent=1, sort_keys=True) + "\n")
        log.error("%s (diagnostics in %s)", exc, dump)
        return 4
    summary = dict(res.summary)
    if baseline is not None:
        summary["baseline"] = str(args.baseline)
        summary.update(tr.speedup(baseline, summary))
    tr.write_summary(summary, out)
    log.info("%s: best valid acc %.4f at epoch %s, avg10 test acc %.4f",
             rc.train.mode, summary["best_valid_accuracy"], summary["epochs_to_best"],
             summary["avg10_test_accuracy"])
    if baseline is not None and summary["speedup"] is not None:
        log.info("speedup vs baseline: x%.2f (epochs-to-best)", summary["speedup"])
    return 0


def _ckpt_context(ckpt: ck.Checkpoint, path, corpus):
    try:
        rc = RunConfig.from_dict(ckpt.meta["config"])
    except KeyError:
        raise CorpusIOError(f"{path}: checkpoint has no embedded config") from None
    rc = with_corpus(rc, corpus.spec)
    unit_range = tuple(ckpt.meta.get("unit_range") or corpus.unit_range)
    return rc, rc.model_config(corpus.spec), unit_range


def cmd_eval(args) -> int:
    ckpt = ck.load(args.ckpt)
    corpus = load_corpus(args.data)
    rc, mcfg, unit_range = _ckpt_context(ckpt, args.ckpt, corpus)
    loss, acc = tr.evaluate(ckpt.params, corpus.partition(args.partition), rc, mcfg,
                            paper_inference=args.paper_inference, seed=args.seed,
                            unit_range=unit_range)
    print(json.dumps({"loss": loss, "accuracy": acc, "partition": args.partition,
                      "paper_inference": args.paper_inference}, sort_keys=True))
    return 0


def cmd_probe(args) -> int:
    ckpt = ck.load(args.ckpt)
    corpus = load_corpus(args.data)
    rc, mcfg, _ = _ckpt_context(ckpt, args.ckpt, corpus)
    part = corpus.partition(args.partition)
    snap = gradprobe.per_view_gradients(ckpt.params, part.batch(np.arange(min(args.examples, len(part)))), mcfg)
    for ls in snap.per_layer:
        log.info("%-8s cos %s  |g_fbank| %.4g  |g_unit| %.4g", ls.name,
                 "n/a" if ls.cos is None else f"{ls.cos:+.4f}", ls.norm_fbank, ls.norm_unit)
    log.info("global cos %s, conflict fraction %.3f, gate target %.4f", snap.global_cos,
             snap.conflict_fraction, gradprobe.gate_target(snap, rc.gate.scale))
    if args.out:
        Path(args.out).write_text(json.dumps({
            "global_cos": snap.global_cos, "conflict_fraction": snap.conflict_fraction,
            "layers": [vars(ls) for ls in snap.per_layer]}, indent=1) + "\n")
    return 0


# -- report ---------------------------------------------------------------------

def _read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise CorpusIOError(f"{path}: cannot read ({exc.strerror or exc})") from None


def _num(s):
    return None if s in ("", None) else float(s)


def build_report(run_dir) -> list[gradprobe.ReportRow]:
    run = Path(run_dir)
    grads = _read_csv(run / "grads.csv")
    gates = _read_csv(run / "gates.csv")
    snaps = [SimpleNamespace(epoch=int(r["epoch"]), global_cos=_num(r["cos_theta"]),
                             conflict_fraction=float(r["conflict_fraction"]))
             for r in grads if r["layer"] == gradprobe.GLOBAL]
    recs = [{"epoch": int(r["epoch"]), "g_fbank_mean": float(r["g_fbank_mean"]),
             "g_fbank_frac_above_1": float(r["g_fbank_frac_above_1"])} for r in gates]
    return gradprobe.conflict_report(snaps, recs)


def write_report_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([tr._fmt(getattr(r, c)) for c in REPORT_COLUMNS])


def svg_line_plot(xs, ys, title: str, ylabel: str, width=480, height=300) -> str:
    """A bare polyline plot; points with ``None`` y are skipped."""
    pts = [(float(x), float(y)) for x, y in zip(xs, ys) if y is not None]
    left, right, top, bottom = 60, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0 = x1 = y0 = y1 = 0.0
    x1 = x1 if x1 > x0 else x0 + 1
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    sx = lambda x: left + (x - x0) / (x1 - x0) * pw
    sy = lambda y: top + (y1 - y) / (y1 - y0) * ph
    poly = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-size="10">{y1:.3g}</text>',
        f'<text x="{left - 6}" y="{top + ph}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{left}" y="{height - 22}" font-size="10">{x0:g}</text>',
        f'<text x="{left + pw}" y="{height - 22}" text-anchor="end" font-size="10">{x1:g}</text>',
        f'<text x="{left + pw / 2}" y="{height - 6}" text-anchor="middle" font-size="11">epoch</text>',
        f'<text x="14" y="{top + ph / 2}" font-size="11" transform="rotate(-90 14 {top + ph / 2})" '
        f'text-anchor="middle">{ylabel}</text>',
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{poly}"/>',
        "</svg>", ""])


def cmd_report(args) -> int:
    run = Path(args.run)
    rows = build_report(run)
    write_report_csv(rows, run / "report.csv")
    log.info("wrote %s (%d probed epochs)", run / "report.csv", len(rows))
    if args.svg:
        epochs = [r.epoch for r in rows]
        for col, label in (("conflict_fraction", "conflicting layers"),
                           ("global_cos", "cos(g_fbank, g_unit)"),
                           ("g_fbank_mean", "mean g_fbank"),
                           ("g_fbank_frac_above_1", "fraction g_fbank > 1")):
            svg = svg_line_plot(epochs, [getattr(r, col) for r in rows], col, label)
            (run / f"report_{col}.svg").write_text(svg)
    return 0


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic two-view corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init-from", metavar="CKPT")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--noise", choices=("sum", "replace"))
    t.add_argument("--baseline", metavar="RUN_DIR")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (JSON on stdout)")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--partition", default="test", choices=PARTITIONS)
    e.add_argument("--paper-inference", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="per-view gradient statistics for a checkpoint")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--partition", default="valid", choices=PARTITIONS)
    pr.add_argument("--examples", type=int, default=32)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    r = sub.add_parser("report", help="conflict and gate curves for a run")
    r.add_argument("--run", required=True)
    r.add_argument("--svg", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except NumericAbort as exc:
        log.error("numeric abort: %s", exc)
        return 4
    except (CorpusIOError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
