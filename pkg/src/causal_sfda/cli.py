"""``causal-sfda`` command line.

Exit codes: 0 success, 1 runtime or verification failure, 2 input or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import (ConfigError, RunConfig, ScenarioDescriptor, load_config, read_descriptor, scenario_spec,
                     write_config, write_descriptor)
from .data import (SETTINGS, ManifestError, ScenarioSpec, SyntheticDomainSpec, build_scenario, generate_domain_pair,
                   generate_domain_sequence, generate_variants, load_manifest, write_manifest)
from .evaluation import (OPEN_THRESHOLD, ResultsError, continual_protocol, evaluate_scenario, format_unification,
                         merge_results, pseudo_label_dynamics, read_results, unification_csv, unification_metrics,
                         write_results)
from .gradcheck import REL_TOL, gradient_suite
from .mi_oracle import DEFAULT_SWEEP_SEED, lemma1_sweep, theorem1_sweep
from .models import CheckpointError, TargetModel, ToyVilEncoder, load_checkpoint, save_checkpoint
from .trainer import TrainingError, adapt, seed_from_env, train_source

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(args, default: int = 0) -> int:
    return args.seed if args.seed is not None else seed_from_env(default)


# -- synth ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = _seed(args)
    setting = args.setting
    extra = args.extra_classes if args.extra_classes is not None else (2 if setting == "open" else 0)
    try:
        spec = SyntheticDomainSpec(n_classes=args.n_classes, dim=args.dim, rotation=args.rotation,
                                   samples_per_class=args.samples_per_class, extra_classes=extra)
    except ValueError as exc:
        raise InputError(f"invalid synthetic spec: {exc}") from None
    cs = args.source_classes or tuple(range(spec.n_classes))
    ct = args.target_classes or (tuple(range(spec.n_classes + extra)) if setting == "open" else cs)
    scen = ScenarioSpec(setting, cs, ct, args.split_ratio)
    try:
        scen.check_relation()
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if scen.source_classes != tuple(range(len(scen.source_classes))):
        raise InputError("source classes must be 0..k-1")
    if max(ct) >= spec.n_classes + extra:
        raise InputError(f"target classes {ct} exceed the {spec.n_classes + extra} generated classes")

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        source, target = generate_domain_pair(spec, seed)
        write_manifest(out / "source.manifest", source)
        write_manifest(out / "target.manifest", target)
        variants = []
        if setting == "sf-oodg":
            for v in generate_variants(spec, seed):
                name = f"variant-{v.domain}.manifest"
                write_manifest(out / name, v)
                variants.append(name)
        write_descriptor(out / "scenario.ini",
                         ScenarioDescriptor(spec, seed, scen, "source.manifest", "target.manifest", tuple(variants)))
        cfg = RunConfig()
        cfg = replace(cfg, scenario=replace(cfg.scenario, setting=setting, variants=tuple(variants),
                                            descriptor="scenario.ini", source_classes=scen.source_classes,
                                            target_classes=scen.target_classes, split_ratio=args.split_ratio),
                      run=replace(cfg.run, out="run")).with_seed(seed)
        write_config(out / "config.ini", cfg)
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc}") from None
    print(f"synth: setting={setting} seed={seed} C_s={list(scen.source_classes)} C_t={list(scen.target_classes)}")
    print(f"  {out / 'source.manifest'} ({len(source)} rows), {out / 'target.manifest'} ({len(target)} rows)")
    for name in variants:
        print(f"  {out / name}")
    print(f"  {out / 'scenario.ini'}, {out / 'config.ini'}")
    return EXIT_OK


# -- adapt / eval ----------------------------------------------------------------------

def _load_inputs(cfg: RunConfig):
    """Manifests, scenario and encoder described by ``cfg``."""
    sc = cfg.scenario
    try:
        source = load_manifest(sc.source_manifest)
        target = load_manifest(sc.target_manifest)
        variants = [load_manifest(p) for p in sc.variants]
    except ManifestError as exc:
        raise InputError(str(exc)) from None
    if source.dim != target.dim:
        raise InputError(f"source has {source.dim} features but target has {target.dim}")
    spec = scenario_spec(cfg)
    try:
        scenario = build_scenario((source, target), spec, cfg.seed, variants or None)
        adapt_set = scenario.target
        if spec.setting == "sf-oodg":
            adapt_set = build_scenario((source, target), replace(scenario.spec, setting="closed"), cfg.seed).target
    except ValueError as exc:
        raise InputError(f"scenario: {exc}") from None
    known = scenario.known_classes
    if tuple(known) != tuple(range(len(known))):
        raise InputError("source classes must be 0..k-1")
    vil = cfg.vil
    if sc.descriptor:
        try:
            desc = read_descriptor(sc.descriptor)
        except ConfigError as exc:
            raise InputError(str(exc)) from None
        if desc.synthetic.n_classes != len(known) or desc.synthetic.dim != source.dim:
            raise InputError(f"{sc.descriptor}: synthetic spec does not match the manifests")
        enc = ToyVilEncoder.for_synthetic(desc.synthetic, desc.seed, vil.width, vil.anchor_noise, vil.temperature)
    else:
        enc = ToyVilEncoder.from_class_names(source.class_names[:len(known)], source.dim, vil.width, cfg.seed,
                                             vil.temperature)
    return scenario, adapt_set, enc


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_adapt(args) -> int:
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out).resolve() if args.out else Path(cfg.run.out)
    scenario, adapt_set, enc = _load_inputs(cfg)
    k = len(scenario.known_classes)
    if cfg.model.checkpoint:
        try:
            source_model = load_checkpoint(cfg.model.checkpoint)["model"]
        except (OSError, CheckpointError) as exc:
            raise InputError(f"{cfg.model.checkpoint}: {exc}") from None
        if source_model.n_classes != k or source_model.in_dim != adapt_set.dim:
            raise InputError(f"{cfg.model.checkpoint}: model shape does not match the scenario")
    else:
        base = TargetModel(adapt_set.dim, k, cfg.model.hidden, cfg.model.depth, cfg.seed)
        source_model = train_source(base, scenario.source, cfg.source)
    history = adapt(source_model, adapt_set, enc, cfg.adapt)

    try:
        history.write(out)
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc}") from None
    save_checkpoint(out / "source_checkpoint.bin", source_model, history.class_names, cfg.seed)
    write_config(out / "config.ini", cfg)
    scores = evaluate_scenario(history.model, scenario, threshold=cfg.eval.open_threshold)
    meta = {"seed": str(cfg.seed), "config": str(Path(args.config).resolve()),
            "open_threshold": repr(cfg.eval.open_threshold)}
    write_results(out / "results.tsv", [(cfg.eval.method, scores.setting, scores.score)], meta)
    _write_rows(out / "evaluation.csv", ["metric", "value"], [(k, repr(v)) for k, v in scores.metrics.items()])
    (out / "pseudo_labels.csv").write_text(pseudo_label_dynamics(history).to_csv())
    reads = adapt_set.label_reads
    reads.setdefault("optimization", 0)
    (out / "label_audit.txt").write_text("".join(f"{ctx} = {n}\n" for ctx, n in sorted(reads.items())))

    print(f"adapt: setting={scores.setting} seed={cfg.seed} out={out}")
    print(f"  target accuracy {history.initial_target_acc:.1f} -> {history.final_target_acc:.1f}"
          f"  pseudo-labels {history.initial_pseudo_acc:.1f} -> {history.epochs[-1]['pseudo_acc']:.1f}"
          if history.epochs else f"  target accuracy {history.initial_target_acc:.1f} (no epochs)")
    for note in scores.notes:
        print(f"  {note}")
    print(f"  {scores.setting} score {scores.score:.1f}; label reads during optimization: "
          f"{reads.get('optimization', 0)}; wall clock {history.wall_clock:.1f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.continual:
        return _eval_continual(args)
    if not args.runs:
        raise InputError("eval needs run directories (or --continual)")
    rows = []
    for run in map(Path, args.runs):
        try:
            cfg = load_config(run / "config.ini")
            adapted = load_checkpoint(run / "checkpoint.bin")["model"]
            source = load_checkpoint(run / "source_checkpoint.bin")["model"]
        except (ConfigError, OSError, CheckpointError) as exc:
            raise InputError(f"{run}: {exc}") from None
        scenario, _, _ = _load_inputs(cfg)
        thr = args.threshold if args.threshold is not None else cfg.eval.open_threshold
        before = evaluate_scenario(source, scenario, threshold=thr)
        after = evaluate_scenario(adapted, scenario, threshold=thr)
        print(f"{run}  [{after.setting}]")
        for note in after.notes:
            print(f"  {note}")
        for key, value in after.metrics.items():
            if key == "threshold":
                continue
            print(f"  {key:<22}source {before.metrics[key]:6.1f}   adapted {value:6.1f}")
            rows.append((str(run), after.setting, key, repr(before.metrics[key]), repr(value)))
    if args.out:
        _write_rows(Path(args.out), ["run", "setting", "metric", "source", "adapted"], rows)
    return EXIT_OK


def _eval_continual(args) -> int:
    seed = _seed(args)
    if args.domains < 2:
        raise InputError("--domains must be at least 2")
    spec = SyntheticDomainSpec()
    rotations = [k * args.rotation_step for k in range(args.domains)]
    domains = generate_domain_sequence(spec, rotations, seed)
    enc = ToyVilEncoder.for_synthetic(spec, seed)
    report = continual_protocol(domains, enc, seed=seed)
    print(f"continual: {args.domains} domains, rotation step {args.rotation_step:g} rad, seed {seed}")
    print(report.format())
    if args.out:
        Path(args.out).write_text(report.to_csv())
    return EXIT_OK


# -- verify ----------------------------------------------------------------------------

def cmd_verify(args) -> int:
    seed = _seed(args, DEFAULT_SWEEP_SEED)
    if args.trials < 1 or args.grad_trials < 0:
        raise InputError("--trials must be >= 1 and --grad-trials >= 0")
    l1 = lemma1_sweep(args.trials, seed)
    t1 = theorem1_sweep(args.trials, seed)
    grads = gradient_suite(args.grad_trials, fault=args.inject_fault) if args.grad_trials else []
    bad = [g for g in grads if not g.ok]
    worst = max((g.rel_error for g in grads), default=0.0)
    tol = f"{REL_TOL:.0e}".replace("e-0", "e-")
    grad_text = f"all < {tol}" if not bad else f"{len(bad)}/{len(grads)} over {tol}"
    print(f"{l1.summary()}, {t1.summary()}, grad: {grad_text} (max {worst:.2e})")
    if args.dump:
        d = Path(args.dump)
        d.mkdir(parents=True, exist_ok=True)
        l1.to_csv(d / "lemma1.csv")
        t1.to_csv(d / "theorem1.csv")
        _write_rows(d / "grad.csv", ["loss", "argument", "trial", "rel_error"],
                    [(g.loss, g.argument, g.trial, repr(g.rel_error)) for g in grads])
    failures = [f"lemma1 trial {t.trial}" for t in l1.trials if not t.holds]
    failures += [f"theorem1 trial {t.trial}" for t in t1.trials if not t.holds]
    failures += [f"grad {g.loss}/{g.argument} trial {g.trial}: {g.rel_error:.2e}" for g in bad]
    for f in failures[:20]:
        print(f"FAIL {f}")
    if len(failures) > 20:
        print(f"... and {len(failures) - 20} more")
    return EXIT_FAIL if failures else EXIT_OK


# -- report ----------------------------------------------------------------------------

def _results_paths(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(p.rglob("*.tsv"))
        elif p.is_file():
            found.append(p)
        else:
            raise InputError(f"{p}: no such file or directory")
    if not found:
        raise InputError(f"no results files found in {', '.join(map(str, paths))}")
    return found


def cmd_report(args) -> int:
    try:
        files = [read_results(p) for p in _results_paths(args.paths)]
        table = merge_results(files)
    except ResultsError as exc:
        raise InputError(str(exc)) from None
    thresholds = sorted({f.metadata.get("open_threshold", "unspecified") for f in files})
    print(f"# {len(files)} results file(s); open-set score is known-class accuracy after "
          f"max-probability rejection; thresholds used: {'; '.join(thresholds)} "
          f"(this package defaults to {OPEN_THRESHOLD:g})")
    width = max(len(m) for m in table.methods)
    print("Scores".ljust(width) + "".join(s.rjust(12) for s in table.settings))
    for m in table.methods:
        cells = [f"{table.scores[(m, s)]:.1f}" if (m, s) in table.scores else "-" for s in table.settings]
        print(m.ljust(width) + "".join(c.rjust(12) for c in cells))
    print()
    if table.missing() or len(table.settings) < 2:
        print("unification metrics need every method scored in at least two common settings")
        if args.out:
            _write_rows(Path(args.out), ["method", "setting", "score"], [(m, s, repr(v)) for m, s, v in table.records()])
        return EXIT_OK
    metrics = unification_metrics(table)
    print(format_unification(metrics, table.settings))
    text = unification_csv(metrics, table.settings)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print()
        print(text, end="")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causal-sfda", description="Source-free domain adaptation on toy domains.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write source/target manifests, a scenario descriptor and a config")
    s.add_argument("--out", default="synth", help="output directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--setting", choices=SETTINGS, default="closed")
    s.add_argument("--source-classes", type=_int_list, default=())
    s.add_argument("--target-classes", type=_int_list, default=())
    s.add_argument("--n-classes", type=int, default=5)
    s.add_argument("--extra-classes", type=int, help="unknown target classes (default 2 for open, else 0)")
    s.add_argument("--dim", type=int, default=SyntheticDomainSpec.dim)
    s.add_argument("--rotation", type=float, default=math.pi / 2, help="target style rotation in radians")
    s.add_argument("--samples-per-class", type=int, default=SyntheticDomainSpec.samples_per_class)
    s.add_argument("--split-ratio", type=float, default=0.9)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("adapt", help="train (or load) a source model and adapt it")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--out", help="run directory (overrides [run] out)")
    a.set_defaults(func=cmd_adapt)

    v = sub.add_parser("verify", help="information-theory sweeps and gradient checks")
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--grad-trials", type=int, default=50)
    v.add_argument("--seed", type=int)
    v.add_argument("--dump", help="directory for per-trial CSVs")
    v.add_argument("--inject-fault", choices=("vmi", "reweight", "pmi", "ec", "un", "sce", "ic"),
                   help="flip one loss's analytic gradient (negative control)")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("eval", help="score run directories, or run the continual protocol")
    e.add_argument("runs", nargs="*")
    e.add_argument("--threshold", type=float, help="open-set rejection threshold")
    e.add_argument("--continual", action="store_true")
    e.add_argument("--domains", type=int, default=4)
    e.add_argument("--rotation-step", type=float, default=math.pi / 6)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="CSV output path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="unification table from results files")
    r.add_argument("paths", nargs="+", help="results files or directories")
    r.add_argument("--out", help="CSV output path (printed when omitted)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
