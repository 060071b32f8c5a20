"""Command-line entry point: ``stylemaml <command> [options]``.

Commands map onto the pipeline phases (gen-data, pretrain, meta, adapt, eval,
plot) plus ``run`` for the whole pipeline in one run directory and
``init-config`` to write the default configuration file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import evaluation, meta
from .config import RunConfig
from .core import (
    CheckpointError,
    ConfigError,
    DataError,
    PhaseError,
    child_rng,
    load_checkpoint,
    save_checkpoint,
    set_deterministic,
)
from .syndata import SyntheticWorld, export_corpus, load_corpus, make_corpus

log = logging.getLogger("stylemaml")

EXIT_CONFIG, EXIT_PHASE, EXIT_DATA, EXIT_EXISTS = 2, 3, 4, 5


class OutputExists(RuntimeError):
    pass


def _claim(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise OutputExists(f"refusing to overwrite {existing} (use --force)")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.loads("")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _save_ckpt(ckpt, path: Path) -> None:
    save_checkpoint(ckpt, path)
    load_checkpoint(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg: RunConfig, out: Path, force: bool = False) -> Path:
    _claim([out / "manifest.json"], force)
    corpora = make_corpus(cfg.generator)
    export_corpus(corpora, cfg.generator, out)
    log.info("corpus written to %s (%s)", out, {k: len(v) for k, v in corpora.items()})
    return out


def cmd_pretrain(cfg: RunConfig, corpus_dir: Path, out: Path, steps: int | None = None, force: bool = False) -> Path:
    targets = [out / "theta_0.ckpt", out / "theta_T.ckpt", out / "metrics.jsonl"]
    _claim(targets, force)
    corpora, gcfg = load_corpus(corpus_dir)
    world = SyntheticWorld(gcfg)
    mcfg = _with_generator(cfg, gcfg).resolved_model(world)
    out.mkdir(parents=True, exist_ok=True)
    metrics = meta.MetricsLog(out / "metrics.jsonl")
    steps = cfg.pipeline.pretrain_steps if steps is None else steps
    theta0, theta_t = meta.pretrain(
        corpora["pretrain"], mcfg, cfg.train, steps, corpora["meta_val"], metrics, cfg.pipeline.pretrain_log_every
    )
    _save_ckpt(theta0, targets[0])
    _save_ckpt(theta_t, targets[1])
    return targets[1]


def cmd_meta(cfg: RunConfig, corpus_dir: Path, ckpt_path: Path, out: Path, iters: int | None = None, force: bool = False) -> Path:
    targets = [out / "theta_M.ckpt", out / "metrics.jsonl"]
    _claim(targets, force)
    theta_t = load_checkpoint(ckpt_path)
    theta_t.require_phase("theta_T")
    corpora, _ = load_corpus(corpus_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = meta.MetricsLog(out / "metrics.jsonl")
    reset = meta.reset_speaker_lut(theta_t, cfg.train.seed, cfg.train.lut_reset_std)
    iters = cfg.pipeline.meta_iters if iters is None else iters
    theta_m, info = meta.meta_train(reset, corpora["meta_train"], corpora["meta_val"], cfg.train, iters, metrics)
    _save_ckpt(theta_m, targets[0])
    (out / "meta_summary.json").write_text(json.dumps(info, indent=1))
    return targets[0]


def cmd_adapt(
    cfg: RunConfig,
    corpus_dir: Path,
    ckpt_path: Path,
    speaker: int,
    out: Path,
    baseline: bool = False,
    steps: int | None = None,
    snapshots: Sequence[int] | None = None,
    force: bool = False,
) -> Path:
    ckpt = load_checkpoint(ckpt_path)
    mode = "baseline" if baseline else "meta"
    if baseline and ckpt.phase_tag != "theta_T":
        raise PhaseError(f"--baseline adapts from a theta_T checkpoint, got {ckpt.phase_tag!r}")
    if not baseline and ckpt.phase_tag != "theta_M":
        raise PhaseError(f"meta-mode adaptation needs a theta_M checkpoint, got {ckpt.phase_tag!r}")
    corpora, _ = load_corpus(corpus_dir)
    steps = cfg.pipeline.adapt_steps if steps is None else steps
    marks = tuple(cfg.pipeline.snapshots if snapshots is None else snapshots)
    targets = [out / f"adapted_{mode}_s{speaker}.ckpt", out / "metrics.jsonl"]
    _claim(targets, force)

    pool = [u for u in corpora["meta_test"].utterances if u.speaker_id == speaker]
    if not pool:
        known = sorted({u.speaker_id for split in corpora.values() for u in split.utterances})
        if speaker in known:
            meta.check_uncontaminated(ckpt, [u for split in corpora.values() for u in split.utterances if u.speaker_id == speaker][:1])
        raise DataError(f"speaker {speaker} has no meta_test utterances")
    idx = child_rng(cfg.train.seed, "adapt-samples", speaker).choice(len(pool), size=cfg.train.n_shots, replace=False)
    samples = [pool[i] for i in sorted(idx)]
    out.mkdir(parents=True, exist_ok=True)
    metrics = meta.MetricsLog(out / "metrics.jsonl")
    final, trace, snaps = meta.adapt(ckpt, samples, steps, cfg.train, mode, marks, metrics)
    for step, ck in snaps.items():
        _save_ckpt(ck, out / f"adapted_{mode}_s{speaker}_step{step:05d}.ckpt")
    _save_ckpt(final, targets[0])
    return targets[0]


def cmd_eval(
    cfg: RunConfig, corpus_dir: Path, meta_ckpt: Path, base_ckpt: Path, out: Path, steps: int | None = None, force: bool = False
) -> Path:
    targets = [out / "curves.json", out / "summary.json", out / "metrics.jsonl"]
    _claim(targets, force)
    theta_m = load_checkpoint(meta_ckpt)
    theta_t = load_checkpoint(base_ckpt)
    corpora, gcfg = load_corpus(corpus_dir)
    world = SyntheticWorld(gcfg)
    out.mkdir(parents=True, exist_ok=True)
    metrics = meta.MetricsLog(out / "metrics.jsonl")
    steps = cfg.pipeline.adapt_steps if steps is None else steps
    marks = sorted({0, *[int(s) for s in cfg.pipeline.snapshots if int(s) <= steps]})
    curves = evaluation.run_adaptation_experiment(
        theta_m,
        theta_t,
        corpora["meta_test"],
        world,
        cfg.train,
        steps=steps,
        seeds=cfg.pipeline.eval_seeds,
        marks=marks,
        n_probe_texts=cfg.pipeline.probe_texts,
        metrics=metrics,
        log_every=cfg.pipeline.adapt_log_every,
    )
    evaluation.save_curves(curves, targets[0])
    probe = 100 if 100 in marks else marks[len(marks) // 2]
    summary = evaluation.summarize(curves, probe_step=probe)
    targets[1].write_text(json.dumps(summary, indent=1))
    return targets[0]


def cmd_plot(curves_path: Path, out: Path, force: bool = False) -> list[Path]:
    from .plotting import plot_curves

    curves = evaluation.load_curves(curves_path)
    _claim([out / "adaptation_cross.png"], force)
    return plot_curves(curves, out)


def cmd_run(cfg: RunConfig, run_dir: Path, force: bool = False) -> Path:
    """Whole pipeline in one run directory with a frozen copy of the config."""
    run_dir.mkdir(parents=True, exist_ok=True)
    _claim([run_dir / "config.cfg"], force)
    cfg.save(run_dir / "config.cfg")
    corpus = cmd_gen_data(cfg, run_dir / "corpus", force)
    theta_t = cmd_pretrain(cfg, corpus, run_dir / "pretrain", force=force)
    theta_m = cmd_meta(cfg, corpus, theta_t, run_dir / "meta", force=force)
    curves = cmd_eval(cfg, corpus, theta_m, theta_t, run_dir / "eval", force=force)
    cmd_plot(curves, run_dir / "plots", force)
    return run_dir


def _with_generator(cfg: RunConfig, gcfg) -> RunConfig:
    import dataclasses

    return dataclasses.replace(cfg, generator=gcfg)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stylemaml", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="flat key = value config file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override generator and training seeds")
        sp.add_argument("--out", type=Path, required=out_required)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    sp = sub.add_parser("init-config", help="write the default configuration")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--force", action="store_true")

    common(sub.add_parser("gen-data", help="render the synthetic corpus splits"))

    sp = sub.add_parser("pretrain", help="multi-speaker pretraining -> theta_T")
    common(sp)
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("meta", help="meta-learn the speaker parameters -> theta_M")
    common(sp)
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--ckpt", type=Path, required=True, help="theta_T checkpoint")
    sp.add_argument("--steps", type=int, help="meta iterations")

    sp = sub.add_parser("adapt", help="few-shot adaptation to one held-out speaker")
    common(sp)
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--speaker", type=int, required=True)
    sp.add_argument("--baseline", action="store_true", help="start from theta_T with a fresh random LUT entry")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--snapshots", type=lambda s: [int(x) for x in s.split(",") if x], help="comma-separated steps")

    sp = sub.add_parser("eval", help="meta vs baseline adaptation curves on all test speakers")
    common(sp)
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--meta-ckpt", type=Path, required=True)
    sp.add_argument("--base-ckpt", type=Path, required=True)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("plot", help="render adaptation-curve figures")
    sp.add_argument("--curves", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--force", action="store_true")

    common(sub.add_parser("run", help="gen-data, pretrain, meta, eval and plot in one run directory"), out_required=False)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    set_deterministic()
    try:
        if args.command == "init-config":
            _claim([args.out], args.force)
            RunConfig().save(args.out)
            result = args.out
        elif args.command == "plot":
            result = cmd_plot(args.curves, args.out, args.force)
        else:
            cfg = _config(args)
            if args.command == "gen-data":
                result = cmd_gen_data(cfg, args.out, args.force)
            elif args.command == "pretrain":
                result = cmd_pretrain(cfg, args.corpus, args.out, args.steps, args.force)
            elif args.command == "meta":
                result = cmd_meta(cfg, args.corpus, args.ckpt, args.out, args.steps, args.force)
            elif args.command == "adapt":
                result = cmd_adapt(
                    cfg, args.corpus, args.ckpt, args.speaker, args.out, args.baseline, args.steps, args.snapshots, args.force
                )
            elif args.command == "eval":
                result = cmd_eval(cfg, args.corpus, args.meta_ckpt, args.base_ckpt, args.out, args.steps, args.force)
            else:
                result = cmd_run(cfg, args.out or Path(cfg.output_dir), args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PhaseError, CheckpointError) as exc:
        print(f"phase/checkpoint error: {exc}", file=sys.stderr)
        return EXIT_PHASE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OutputExists as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_EXISTS
    if isinstance(result, list):
        for r in result:
            print(r)
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
