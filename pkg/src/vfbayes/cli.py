"""Command-line front end for the two-stage pipeline.

A run directory holds everything produced for one dataset and one model::

    run.cfg             key = value record of the model, data path and seeds
    stage1/             pool_<id>.csv and psi_<id>.npz (retained random effects)
    stage2/             chain_<c>.csv, summary.csv, theta_indices.npz
    recovered/          recovered_<id>.npz
    evaluation/         ppp.csv, dic.csv, report.txt

Progress goes to standard error; results go to files (and short summaries
to standard output).

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_io, evaluation, stage1, stage2
from .distributions import RngStream, stream_key
from .model import ModelVariant

log = logging.getLogger("vfbayes")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def read_config(path) -> dict:
    """Plain ``key = value`` file; ``#`` starts a comment; keys use dashes or underscores."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def write_kv(path, items: dict) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {v}\n")


def _merge_config(args, parser) -> None:
    """Fill options left unset on the command line from ``--config``; flags win."""
    if not getattr(args, "config", None):
        return
    conf = read_config(args.config)
    for key, raw in conf.items():
        key = "inp" if key == "in" else key
        if not hasattr(args, key) or key in ("config", "command"):
            raise UsageError(f"unknown configuration key {key!r}")
        if getattr(args, key) is not None:
            continue
        action = next((a for a in parser._actions if a.dest == key), None)
        conv = action.type if action is not None and action.type is not None else str
        try:
            value = conv(raw)
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"bad value for {key}: {raw!r} ({exc})") from None
        if isinstance(action, argparse._AppendAction):
            value = [value]
        setattr(args, key, value)


def _positive(name):
    def conv(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1")
        return v
    return conv


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _model(text):
    try:
        return ModelVariant.parse(text)
    except (ValueError, KeyError):
        raise argparse.ArgumentTypeError(f"model must be 1, 2 or 3, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vfbayes", description="Two-stage Bayesian hierarchical models for visual-field series.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug-level progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value file; command-line flags win")
        if seed:
            p.add_argument("--seed", type=int, help="random seed (mandatory)")
        return p

    p = common(sub.add_parser("simulate", help="generate a synthetic dataset with its truth record"))
    p.add_argument("--model", type=_model)
    p.add_argument("--truth", choices=sorted(data_io.TRUTH_PRESETS), help="truth preset")
    p.add_argument("--individuals", type=int)
    p.add_argument("--visits", type=int, help="visits per eye")
    p.add_argument("--out", help="output directory")

    p = common(sub.add_parser("fit-stage1", help="fit every individual separately"))
    p.add_argument("--in", dest="inp", help="dataset CSV")
    p.add_argument("--out", help="run directory")
    p.add_argument("--model", type=_model)
    p.add_argument("--preset", choices=sorted(stage1.PRESETS))
    p.add_argument("--iterations", type=_positive("iterations"))
    p.add_argument("--burn-in", type=_nonneg)
    p.add_argument("--thin", type=_positive("thin"))
    p.add_argument("--jobs", type=int, help="worker processes (default: all cores)")

    p = common(sub.add_parser("fit-stage2", help="combine stage-1 pools into population estimates"))
    p.add_argument("--in", dest="inp", help="run directory holding stage1/")
    p.add_argument("--out", help="run directory (default: --in)")
    p.add_argument("--iterations", type=_positive("iterations"))
    p.add_argument("--burn-in", type=_nonneg)
    p.add_argument("--thin", type=_positive("thin"))
    p.add_argument("--chains", type=int)

    p = common(sub.add_parser("recover-effects", help="regenerate random effects for the stage-2 draws"))
    p.add_argument("--in", dest="inp", help="run directory")
    p.add_argument("--out", help="run directory (default: --in)")
    p.add_argument("--draws", type=_positive("draws"), help="stage-2 draws to use (default 1000)")
    p.add_argument("--iterations", type=_positive("iterations"), help="inner chain length (default 500)")

    p = common(sub.add_parser("evaluate", help="posterior predictive checks and DIC"))
    p.add_argument("--in", dest="inp", action="append", help="run directory (repeatable)")
    p.add_argument("--model", type=_model, help="expected model of the run(s)")
    p.add_argument("--draws", type=_positive("draws"), help="draws for recovery and PPC (default 1000)")

    p = common(sub.add_parser("summarize", help="print stage-2 summaries"), seed=False)
    p.add_argument("--in", dest="inp", action="append", help="run directory (repeatable)")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + ("in" if n == "inp" else n.replace("_", "-")) for n in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _outdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not path.is_dir():
        raise OSError(f"output path {path} is not a directory")
    return path


def _run_info(run: Path) -> dict:
    cfg = run / "run.cfg"
    if not cfg.exists():
        raise FileNotFoundError(f"{run} is not a run directory (no run.cfg)")
    return read_config(cfg)


def _update_run_info(run: Path, **items) -> None:
    cfg = run / "run.cfg"
    info = read_config(cfg) if cfg.exists() else {}
    info.update({k: str(v) for k, v in items.items()})
    write_kv(cfg, info)


def _load_data(info: dict):
    return data_io.ingest(info["data"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    _require(args, "seed", "individuals", "visits", "out")
    if args.individuals < 1 or args.visits < 1:
        raise UsageError("--individuals and --visits must be >= 1")
    preset = args.truth or ("model1" if args.model == ModelVariant.MODEL1 else "table2")
    conf = dict(data_io.TRUTH_PRESETS[preset])
    if args.model is not None:
        conf["model"] = int(args.model)
    truth_cfg = data_io.TruthConfig(**conf)
    out = _outdir(args.out)
    rng = RngStream(args.seed, stream_key("simulate")).generator()
    records, truth = data_io.simulate(truth_cfg, args.individuals, args.visits, rng)
    records.write(out / "data.csv")
    truth.write(out / "truth.txt")
    n = len(records.rows)
    cens = sum(r.sensitivity_db == 0 for r in records.rows)
    print(f"wrote {n} rows for {args.individuals} individuals ({args.visits} visits per eye) to {out / 'data.csv'}")
    print(f"censoring rate {cens / n:.4f}; truth record {out / 'truth.txt'}")
    return EXIT_OK


def cmd_fit_stage1(args) -> int:
    _require(args, "seed", "inp", "out")
    overrides = {k: getattr(args, k) for k in ("iterations", "burn_in", "thin") if getattr(args, k) is not None}
    model = args.model if args.model is not None else ModelVariant.MODEL3
    cfg = stage1.Stage1Config.preset(args.preset or "desk", model=model, keep_effects=True, **overrides)
    data = data_io.ingest(args.inp)
    run = _outdir(args.out)
    log.info("stage 1: %d individuals, model %d, %d iterations", len(data), int(model), cfg.iterations)
    results = stage1.fit_all(data, cfg, seed=args.seed, jobs=args.jobs if args.jobs is not None else 0)
    stage1.write_pools(results, run / "stage1")
    stage1.write_effects(results, run / "stage1")
    _update_run_info(run, model=int(model), data=Path(args.inp).resolve(), stage1_dir=(run / "stage1").resolve(),
                     stage1_seed=args.seed,
                     stage1_iterations=cfg.iterations, stage1_burn_in=cfg.burn_in, stage1_thin=cfg.thin)
    for ind, r in results.items():
        rates = ", ".join(f"{k} {v:.2f}" for k, v in r.acceptance.items())
        print(f"{ind}: {r.pool.retained_count} draws" + (f"; acceptance {rates}" if rates else ""))
    return EXIT_OK


def _stage_dir(run: Path, info: dict, stage: str) -> Path:
    return Path(info.get(f"{stage}_dir", run / stage))


def _load_pools(run: Path, info: dict, data) -> dict:
    pools = stage1.read_pools(_stage_dir(run, info, "stage1"))
    missing = [d.individual_id for d in data if d.individual_id not in pools]
    if missing:
        raise FileNotFoundError(f"missing stage-1 pools for individuals: {', '.join(map(str, missing))}")
    return {d.individual_id: pools[d.individual_id] for d in data}


def cmd_fit_stage2(args) -> int:
    _require(args, "seed", "inp")
    run = Path(args.inp)
    info = _run_info(run)
    data = _load_data(info)
    pools = _load_pools(run, info, data)
    kw = {k: getattr(args, k) for k in ("iterations", "burn_in", "thin", "chains") if getattr(args, k) is not None}
    cfg = stage2.Stage2Config(**kw)
    result = stage2.run_stage2(pools, cfg, args.seed)
    out = _outdir(args.out) if args.out else run
    if out != run:
        _update_run_info(out, **info)
    stage2.write_chains(result, out / "stage2")
    _update_run_info(out, stage2_seed=args.seed, stage2_dir=(out / "stage2").resolve())
    print(f"{'parameter':<22}{'mean':>12}{'sd':>12}{'ci2.5':>12}{'ci97.5':>12}{'rhat':>8}")
    for r in result.summary():
        print(f"{r['parameter']:<22}{r['mean']:>12.5g}{r['sd']:>12.5g}{r['ci2.5']:>12.5g}"
              f"{r['ci97.5']:>12.5g}{r['rhat']:>8.3f}")
    return EXIT_OK


def _recover(run: Path, info: dict, data, seed: int, draws: int | None, iterations: int | None, out: Path):
    pools = _load_pools(run, info, data)
    result = stage2.read_chains(_stage_dir(run, info, "stage2"), pools)
    kw = {k: v for k, v in (("n_draws", draws), ("iterations", iterations)) if v is not None}
    if iterations is not None and iterations < evaluation.RecoveryConfig.adapt_until:
        kw["adapt_until"] = iterations // 2
    cfg = evaluation.RecoveryConfig(**kw)
    recovered = evaluation.recover_all(result, data, cfg, seed)
    evaluation.write_recovered(recovered, out / "recovered")
    return recovered


def cmd_recover(args) -> int:
    _require(args, "seed", "inp")
    run = Path(args.inp)
    info = _run_info(run)
    data = _load_data(info)
    out = _outdir(args.out) if args.out else run
    if out != run:
        _update_run_info(out, **info)
    recovered = _recover(run, info, data, args.seed, args.draws, args.iterations, out)
    _update_run_info(out, recovered_dir=(out / "recovered").resolve())
    n = next(iter(recovered.values())).n_draws if recovered else 0
    print(f"recovered random effects for {len(recovered)} individuals over {n} stage-2 draws")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "seed", "inp")
    reports = []
    for path in args.inp:
        run = Path(path)
        info = _run_info(run)
        model = ModelVariant(int(info["model"]))
        if args.model is not None and args.model != model:
            raise UsageError(f"{run} holds a model {int(model)} fit, not model {int(args.model)}")
        data = _load_data(info)
        effects = stage1.read_effects(_stage_dir(run, info, "stage1"))
        missing = [d.individual_id for d in data if d.individual_id not in effects]
        if missing:
            raise FileNotFoundError(f"missing stage-1 effects for individuals: {', '.join(missing)}")
        ppc_rng = RngStream(args.seed, stream_key("ppc")).generator()
        ppp = evaluation.ppc_report(data, effects, model, ppc_rng, max_draws=args.draws or 1000)
        recovered = evaluation.read_recovered(_stage_dir(run, info, "recovered"))
        if any(d.individual_id not in recovered for d in data):
            print(f"note: no recovered effects in {run}; running recovery with default settings", file=sys.stderr)
            recovered = _recover(run, info, data, args.seed, args.draws, None, run)
        recovered = {d.individual_id: recovered[d.individual_id] for d in data}
        dic = evaluation.compute_dic(recovered, data, model)
        out = _outdir(run / "evaluation")
        label = f"model{int(model)}"
        ppp.to_csv(out / "ppp.csv")
        dic.to_csv(out / "dic.csv", label)
        text = "\n".join([ppp.text(label), dic.text(label)]) + "\n"
        (out / "report.txt").write_text(text)
        sys.stdout.write(text)
        reports.append((str(run), int(model), dic.dic))
    if len(reports) > 1:
        print("DIC ordering (best first):")
        for run, model, dic in sorted(reports, key=lambda r: r[2]):
            print(f"  model {model}  {dic:.2f}  {run}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    _require(args, "inp")
    for path in args.inp:
        run = Path(path)
        info = _run_info(run)
        rows = stage2.read_summary(_stage_dir(run, info, "stage2") / "summary.csv")
        print(f"# {run} (model {info.get('model', '?')})")
        print(f"{'parameter':<14}{'mean':>12}{'sd':>12}{'ci2.5':>12}{'ci97.5':>12}{'rhat':>8}")
        for r in rows:
            if r["parameter"] in stage2.REPORTED:
                print(f"{r['parameter']:<14}{r['mean']:>12.5g}{r['sd']:>12.5g}{r['ci2.5']:>12.5g}"
                      f"{r['ci97.5']:>12.5g}{r['rhat']:>8.3f}")
        report = run / "evaluation" / "report.txt"
        if report.exists():
            sys.stdout.write(report.read_text())
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit-stage1": cmd_fit_stage1, "fit-stage2": cmd_fit_stage2,
            "recover-effects": cmd_recover, "evaluate": cmd_evaluate, "summarize": cmd_summarize}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        _merge_config(args, sub)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vfbayes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, data_io.IngestError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"vfbayes: I/O error: {msg}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"vfbayes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"vfbayes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
