"""Command-line front end over the experiment harness.

Subcommands mirror the pipeline stages: ``gen`` writes datasets,
``train`` writes anchor and task checkpoints, ``fisher`` attaches
curvature diagonals to them, ``merge`` applies one catalog method, and
``remove``, ``diagnose``, ``sweep``, ``oracle-check``, and ``report``
run the higher-level protocols.  Everything an experiment needs lives in
one JSON config (see :class:`gradmerge.harness.ExperimentSpec`); the
flags ``--seed``, ``--out``, and ``--config`` are accepted by every
subcommand.

Exit codes: 0 on success, 1 on validation or usage errors, 2 on numeric
failures (including a failing oracle suite).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .diagnostics import MISMATCH_TABLE_HEADER, mismatch_table_csv, mismatch_vs_error_table
from .errors import ConfigError, GradmergeError, MissingCurvatureError
from .harness import (
    TIES_MASK,
    ExperimentSpec,
    build_diagnostic_fixture,
    default_removal_spec,
    default_spec,
    estimate_anchor_h0,
    estimate_task_curvature,
    evaluate_params,
    fixture_from_state,
    gen_tasks,
    load_spec,
    merge_checkpoints,
    parse_h0_source,
    resolve_seed,
    run_addition,
    run_pipeline,
    run_removal,
    sweep_alpha,
)
from .merging import ADDITION_METHODS, MergeInputs, merged_checkpoint
from .models import save_dataset
from .oracles import oracle_summary, oracle_table_csv, run_oracle_suite
from .params import Checkpoint, load_checkpoint, save_checkpoint

__all__ = ["cli", "main", "build_parser"]

#: Methods whose merge reads curvature diagonals from the checkpoints.
_CURVATURE_METHODS = ("fa", "fa1", "ours")


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as ConfigError (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--seed", type=int, default=argparse.SUPPRESS, help="override the config seed"
    )
    common.add_argument(
        "--out", default=argparse.SUPPRESS, help="output directory (default: ./out)"
    )
    common.add_argument(
        "--config", default=argparse.SUPPRESS, help="JSON experiment config file"
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    """The full subcommand parser; shared flags work before or after the verb."""
    common = _common_flags()
    parser = _Parser(prog="gradmerge", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        return p

    add("gen", _cmd_gen, "synthesize and write per-task train/test datasets")
    p = add("train", _cmd_train, "train the anchor and per-task fine-tunes")
    p.add_argument("--h0", default=None, help="anchor curvature source, e.g. identity:2.0")
    p = add("fisher", _cmd_fisher, "attach curvature diagonals to trained checkpoints")
    p.add_argument("--h0", default=None, help="anchor curvature source, e.g. identity:2.0")
    p = add("merge", _cmd_merge, "merge saved checkpoints with one catalog method")
    p.add_argument("--method", required=True, choices=ADDITION_METHODS)
    p.add_argument("--alpha", type=float, default=1.0, help="uniform task weight")
    p = add("remove", _cmd_remove, "subtract a task block and compare to retraining")
    p.add_argument("--h0", default=None, help="anchor curvature source, e.g. identity:2.0")
    p = add("diagnose", _cmd_diagnose, "emit the gradient-mismatch diagnostic table")
    p.add_argument("--alpha", type=float, default=1.0, help="uniform task weight")
    p.add_argument("--h0", default=None, help="anchor curvature source, e.g. identity:2.0")
    p = add("sweep", _cmd_sweep, "trace aggregate metrics across the weight grid")
    p.add_argument("--h0", default=None, help="anchor curvature source, e.g. identity:2.0")
    p = add("oracle-check", _cmd_oracle_check, "run the independent numeric oracle suite")
    p.add_argument("--fixtures", type=int, default=50, help="fixtures per oracle family")
    p = add("report", _cmd_report, "full addition run plus diagnostics in one shot")
    p.add_argument("--alpha", type=float, default=1.0, help="uniform task weight")
    p.add_argument("--h0", default=None, help="anchor curvature source, e.g. identity:2.0")
    return parser


def _spec_for(args, removal: bool = False) -> ExperimentSpec:
    config = getattr(args, "config", None)
    if config is not None:
        spec = load_spec(config)
    else:
        spec = default_removal_spec() if removal else default_spec()
    h0 = getattr(args, "h0", None)
    if h0:
        spec = dataclasses.replace(
            spec, anchor=dataclasses.replace(spec.anchor, source=parse_h0_source(h0))
        )
    return spec


def _seed_for(args, spec: ExperimentSpec) -> int:
    return resolve_seed(spec, getattr(args, "seed", None))


def _out_dir(args) -> Path:
    return Path(getattr(args, "out", None) or "out")


def _cmd_gen(args) -> int:
    spec = _spec_for(args)
    seed = _seed_for(args, spec)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    sets = gen_tasks(spec, seed)
    for t, ds in enumerate(sets[: spec.n_tasks]):
        save_dataset(ds, out / f"task{t}.json")
    for t, ds in enumerate(sets[spec.n_tasks :]):
        save_dataset(ds, out / f"task{t}_test.json")
    print(f"wrote {2 * spec.n_tasks} datasets to {out}")
    return 0


def _cmd_train(args) -> int:
    spec = _spec_for(args)
    seed = _seed_for(args, spec)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    state = run_pipeline(spec, seed)
    stripped = Checkpoint.of(
        state.anchor.params, None, state.anchor.anchor_id, state.anchor.meta
    )
    save_checkpoint(stripped, out / "anchor")
    for t, ck in enumerate(state.tasks, start=1):
        save_checkpoint(Checkpoint.of(ck.params, None, ck.anchor_id, ck.meta), out / f"task{t}")
    print(f"wrote anchor and {len(state.tasks)} task checkpoints to {out}")
    return 0


def _cmd_fisher(args) -> int:
    spec = _spec_for(args)
    seed = _seed_for(args, spec)
    out = _out_dir(args)
    sets = gen_tasks(spec, seed)
    trains = sets[: spec.n_tasks]
    anchor = load_checkpoint(out / "anchor")
    h0 = estimate_anchor_h0(spec, anchor.params, trains[0])
    save_checkpoint(
        Checkpoint.of(anchor.params, h0, anchor.anchor_id, anchor.meta), out / "anchor"
    )
    for t in range(1, spec.n_tasks):
        ck = load_checkpoint(out / f"task{t}")
        curv = estimate_task_curvature(spec, ck.params, trains[t])
        save_checkpoint(Checkpoint.of(ck.params, curv, ck.anchor_id, ck.meta), out / f"task{t}")
    print(f"attached curvature to anchor and {spec.n_tasks - 1} task checkpoints in {out}")
    return 0


def _cmd_merge(args) -> int:
    spec = _spec_for(args)
    seed = _seed_for(args, spec)
    out = _out_dir(args)
    stems = ["anchor"] + [f"task{t}" for t in range(1, spec.n_tasks)]
    loaded = {stem: load_checkpoint(out / stem) for stem in stems}
    if args.method in _CURVATURE_METHODS:
        for stem in stems:
            if loaded[stem].curvature is None:
                raise MissingCurvatureError(
                    f"checkpoint {str(out / stem)!r} has no curvature diagonal; "
                    "run the fisher step first"
                )
    anchor = loaded["anchor"]
    tasks = [loaded[stem] for stem in stems[1:]]
    params = merge_checkpoints(anchor, tasks, spec.anchor.delta, args.method, args.alpha)
    inputs = MergeInputs(
        anchor, tuple((float(args.alpha), ck) for ck in tasks), spec.anchor.delta
    )
    save_checkpoint(merged_checkpoint(args.method, inputs, params), out / f"merged-{args.method}")
    tests = gen_tasks(spec, seed)[spec.n_tasks :]
    eval_sets = tests[1:] if len(tests) > 1 else tests[:1]
    outcome = evaluate_params(spec, args.method, args.alpha, params, eval_sets)
    print(
        f"merged-{args.method} alpha={args.alpha!r}: "
        f"avg {outcome.metric} {outcome.avg!r}, true avg {outcome.true_avg!r}"
    )
    return 0


def _cmd_remove(args) -> int:
    spec = _spec_for(args, removal=True)
    seed = _seed_for(args, spec)
    result = run_removal(spec, _out_dir(args), seed)
    for method in spec.methods:
        print(f"{method}: distance to retrain {result.dists[method]!r}")
    print(f"anchor: distance to retrain {result.dists['anchor']!r}")
    return 0


def _cmd_diagnose(args) -> int:
    spec = _spec_for(args)
    seed = _seed_for(args, spec)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    fixture = build_diagnostic_fixture(spec, seed, alpha=args.alpha)
    rows = mismatch_vs_error_table(list(spec.methods), [fixture], mask=TIES_MASK)
    (out / "report.csv").write_text(mismatch_table_csv(rows))
    print(f"wrote {len(rows)} diagnostic rows to {out / 'report.csv'}")
    return 0


def _cmd_sweep(args) -> int:
    spec = _spec_for(args)
    seed = _seed_for(args, spec)
    result = sweep_alpha(spec, _out_dir(args), seed)
    for method, points in result.series.items():
        best_alpha, best = max(points, key=lambda p: p[1] if result.metric == "accuracy" else -p[1])
        print(f"{method}: best {result.metric} {best!r} at alpha={best_alpha!r}")
    return 0


def _cmd_oracle_check(args) -> int:
    seed = resolve_seed(default_spec(), getattr(args, "seed", None))
    results = run_oracle_suite(seed=seed, n_fixtures=args.fixtures)
    print(oracle_table_csv(results), end="")
    print(oracle_summary(results))
    if getattr(args, "out", None) is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_table.csv").write_text(oracle_table_csv(results))
    return 0 if all(r.passed for r in results) else 2


def _cmd_report(args) -> int:
    spec = _spec_for(args)
    seed = _seed_for(args, spec)
    out = _out_dir(args)
    state = run_pipeline(spec, seed)
    result = run_addition(spec, out, seed, alpha=args.alpha, state=state)
    fixture = fixture_from_state(state, result.target.params, args.alpha)
    rows = mismatch_vs_error_table(list(spec.methods), [fixture], mask=TIES_MASK)
    (out / "report.csv").write_text(mismatch_table_csv(rows))
    for label in list(spec.methods) + ["all-data", "anchor"]:
        outcome = result.outcomes[label]
        print(f"{label}: avg {outcome.metric} {outcome.avg!r}, true avg {outcome.true_avg!r}")
    print(f"wrote summary.csv, report.csv, and checkpoints to {out}")
    return 0


def cli(argv=None) -> int:
    """Parse and dispatch; returns the process exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except SystemExit as exc:  # --help and friends
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 1
    except GradmergeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
