"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
abort. Every subcommand writes ``config.resolved`` into its output dir.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from sbevloc import config as config_mod
from sbevloc.bev import project, save_pgm
from sbevloc.dataset_io import (
    load_poses_kitti,
    load_scan_dir,
    load_scan_kitti,
    save_poses_kitti,
    save_scan_kitti,
    scan_paths,
)
from sbevloc.errors import ConfigError, DataError, NumericalError, SbevlocError
from sbevloc.evaluation import (
    LocRecord,
    ambiguity_profile,
    describe_all,
    localization_eval,
    loop_closure_eval,
    recall_at_1,
    write_ambiguity_csv,
    write_pr_csv,
    write_summary_csv,
)
from sbevloc.localization import LocalizationDatabase, build_database, localize, results_csv
from sbevloc.model import ModelParams, init_params

log = logging.getLogger("sbevloc")
SUBCOMMANDS = ("synth", "project", "train", "build-db", "localize", "eval-loop", "eval-global",
               "ambiguity", "benchmark", "ablation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, output: bool = True) -> None:
    p.add_argument("--config", help="plain-text config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    p.add_argument("--workers", type=int, default=1, help="parallel workers (1 = reference mode)")
    if output:
        p.add_argument("-o", "--output", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sbevloc", description="Self-supervised BEV LiDAR localization")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic world, scans and poses")
    _common(p)
    p = sub.add_parser("project", help="write BEV images of scans as PGM")
    _common(p)
    p.add_argument("--scans", required=True, help="scan file or directory")
    p = sub.add_parser("train", help="train on unlabeled scans")
    _common(p)
    p.add_argument("--scans", required=True, help="directory of scans")
    p.add_argument("--init", help="checkpoint to start from")
    p = sub.add_parser("build-db", help="build a keyframe database")
    _common(p)
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("localize", help="localize query scans against a database")
    _common(p)
    p.add_argument("--scans", required=True)
    p.add_argument("--database", required=True)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval-loop", help="loop-closure evaluation of a sequence")
    _common(p)
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval-global", help="global localization evaluation")
    _common(p)
    p.add_argument("--scans", required=True, help="query scans")
    p.add_argument("--poses", required=True, help="query ground-truth poses")
    p.add_argument("--database", required=True)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("ambiguity", help="descriptor distance versus geographic distance")
    _common(p)
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("benchmark", help="synthetic train-and-evaluate experiment (desk-scale defaults)")
    _common(p)
    p = sub.add_parser("ablation", help="benchmark every loss variant")
    _common(p)
    return parser


def _load_params(path: str) -> ModelParams:
    return ModelParams.load(path)


def _scans(path: str):
    p = Path(path)
    return load_scan_dir(p) if p.is_dir() else [load_scan_kitti(p)]


def _images(path: str, cfg):
    bev = cfg.bev()
    return [project(s, bev) for s in _scans(path)]


def cmd_synth(args, cfg, out: Path) -> None:
    from sbevloc.experiment import make_sequence

    seq = make_sequence(cfg)
    seq.world.save(out / "world.txt")
    scan_dir = out / "scans"
    scan_dir.mkdir(exist_ok=True)
    for i, s in enumerate(seq.scans):
        save_scan_kitti(scan_dir / f"{i:06d}.bin", s)
    save_poses_kitti(out / "poses.txt", seq.trajectory.poses)
    log.info("wrote %d scans to %s", len(seq.scans), scan_dir)


def cmd_project(args, cfg, out: Path) -> None:
    src = Path(args.scans)
    paths = scan_paths(src) if src.is_dir() else [src]
    bev = cfg.bev()
    for p in paths:
        save_pgm(out / f"{p.stem}.pgm", project(load_scan_kitti(p), bev))


def cmd_train(args, cfg, out: Path) -> None:
    from sbevloc.training import train

    images = _images(args.scans, cfg)
    init = _load_params(args.init) if args.init else init_params(cfg.model(), cfg["model.seed"])
    res = train(images, cfg.model(), cfg.triplet(), cfg.loss(), cfg.train(), out, cfg.bev(), cfg.fast(),
                init=init, dry_run=cfg["train.dry_run"], workers=args.workers)
    log.info("trained %d steps, %d scans skipped", len(res.step_log), res.skipped)


def cmd_build_db(args, cfg, out: Path) -> None:
    images = _images(args.scans, cfg)
    traj = load_poses_kitti(args.poses)
    db = build_database(images, traj.poses, _load_params(args.checkpoint), cfg.bev(), cfg.fast(), cfg.loc())
    db.save(out / "database.sbdb")
    log.info("database with %d keyframes", len(db))


def _localize_all(images, db, params, cfg):
    return [(i, localize(img, db, params, cfg.bev(), cfg.fast(), cfg.loc())) for i, img in enumerate(images)]


def cmd_localize(args, cfg, out: Path) -> None:
    results = _localize_all(_images(args.scans, cfg), LocalizationDatabase.load(args.database),
                            _load_params(args.checkpoint), cfg)
    (out / "localize.csv").write_text(results_csv(results), encoding="utf-8")


def cmd_eval_loop(args, cfg, out: Path) -> int:
    images = _images(args.scans, cfg)
    traj = load_poses_kitti(args.poses)
    rep = loop_closure_eval(images, traj.poses, _load_params(args.checkpoint), cfg.eval(), cfg.fast(), cfg.loc())
    summary = {"queries": rep.n_queries, "positive_possible": rep.n_possible,
               "mean_trans_error": rep.mean_trans_error, "mean_rot_error": rep.mean_rot_error}
    if rep.pr is not None:
        write_pr_csv(out / "pr.csv", rep.pr)
        summary.update({"ap": rep.pr.ap, "max_f1": rep.pr.max_f1, "r_percent": rep.pr.r_percent})
    write_summary_csv(out / "summary.csv", summary)
    if rep.error:
        log.error("%s", rep.error)
        return 2
    return 0


def cmd_eval_global(args, cfg, out: Path) -> None:
    images = _images(args.scans, cfg)
    traj = load_poses_kitti(args.poses)
    results = _localize_all(images, LocalizationDatabase.load(args.database), _load_params(args.checkpoint), cfg)
    records = [LocRecord(traj.poses[i], r.database_pose, r.t_global, r.pose_ok) for i, r in results]
    s = localization_eval(records, cfg.eval())
    write_summary_csv(out / "summary.csv", {
        "recall_at_1": recall_at_1([(r.query_pose, r.matched_pose) for r in records], cfg.eval()),
        "success_rate": s.success_rate, "mean_trans_error": s.mean_trans_error,
        "mean_rot_error": s.mean_rot_error, "queries": s.n_queries,
    })
    (out / "localize.csv").write_text(results_csv(results), encoding="utf-8")


def cmd_ambiguity(args, cfg, out: Path) -> None:
    images = _images(args.scans, cfg)
    traj = load_poses_kitti(args.poses)
    descs, _ = describe_all(images, _load_params(args.checkpoint))
    write_ambiguity_csv(out / "ambiguity.csv", ambiguity_profile(cfg["eval.query_index"], traj.poses, descs))


def cmd_benchmark(args, cfg, out: Path) -> None:
    from sbevloc.experiment import run_benchmark

    m = run_benchmark(cfg, out, args.workers)
    print(f"recall@1 {m['recall_at_1']:.1f} (untrained {m['recall_at_1_untrained']:.1f})")


def cmd_ablation(args, cfg, out: Path) -> None:
    from sbevloc.experiment import run_ablation

    for row in run_ablation(cfg, out, workers=args.workers):
        print(f"{row['loss']}: recall@1 {row['recall_at_1']:.1f}")


COMMANDS = {
    "synth": cmd_synth, "project": cmd_project, "train": cmd_train, "build-db": cmd_build_db,
    "localize": cmd_localize, "eval-loop": cmd_eval_loop, "eval-global": cmd_eval_global,
    "ambiguity": cmd_ambiguity, "benchmark": cmd_benchmark, "ablation": cmd_ablation,
}


def validate(cfg) -> None:
    """Build every typed section once so bad values fail as config errors."""
    for section in (cfg.bev, cfg.fast, cfg.triplet, cfg.model, cfg.loss, cfg.train, cfg.loc, cfg.eval):
        try:
            section()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"sbevloc: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        base = None
        if args.command in ("benchmark", "ablation"):
            from sbevloc.experiment import benchmark_config

            base = benchmark_config()
        cfg = config_mod.load(args.config, base).override(args.set)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        validate(cfg)
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.resolved")
        code = COMMANDS[args.command](args, cfg, out)
        return int(code or 0)
    except ConfigError as exc:
        print(f"sbevloc: config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"sbevloc: numerical abort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (DataError, SbevlocError, OSError) as exc:
        print(f"sbevloc: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
