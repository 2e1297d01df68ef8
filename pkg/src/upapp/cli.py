"""Command-line pipeline: staged commands over one output directory.

Exit codes: 0 success, 2 configuration error, 3 input parse failure,
4 missing prerequisite, 5 empty result.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .annotate import Method, Scoring, annotate_all, read_annotations, write_annotations
from .artifacts import atomic_write_text, fmt, sha256_file
from .config import METHODS, PipelineConfig, default_config_text, load_config
from .evaluation import (
    EvaluationReport,
    evaluate,
    format_report_human,
    format_report_kv,
    log_based_priors,
    parse_logs,
)
from .exceptions import (
    ConfigError,
    EmptyIndex,
    EmptyInput,
    EmptyPairs,
    GeometryParseError,
    NoLogs,
    NoStops,
    SchemaMismatch,
)
from .ingest import (
    CATEGORIES,
    build_place_index,
    filter_noise,
    index_from_geojson,
    load_category_rules,
    parse_trajectories,
    places_to_geojson,
    read_features,
    DEFAULT_RULES,
    TrajectorySchema,
)
from .priors import (
    PriorTables,
    build_priors,
    read_joint_table,
    read_prior_table,
    write_joint_table,
    write_prior_table,
)
from .sequence import build_sequences, decode_all, learn_transitions, read_transitions, write_transitions
from .stops import (
    StopSource,
    attach_candidates,
    detect_stops,
    format_candidates,
    format_stops,
    read_candidates,
    read_stops,
)

log = logging.getLogger("upapp")

EXIT_CONFIG, EXIT_PARSE, EXIT_MISSING, EXIT_EMPTY = 2, 3, 4, 5

# staged artifact names, relative to the output directory
TRAJECTORIES = "trajectories.csv"
PLACES = "places.geojson"
STOPS = "stops.csv"
CANDIDATES = "candidates.csv"
PRIORS = "priors"
ANNOTATIONS = "annotations"
EVALUATION = "evaluation"
FIGURES = "figures"
MANIFEST = "manifest.json"


class StageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.tz = cfg.tz
        self._pool = None

    # -- plumbing -----------------------------------------------------------

    @contextmanager
    def pool(self):
        if self.cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.threads) as ex:
                self._pool = ex
                try:
                    yield ex
                finally:
                    self._pool = None
        else:
            yield None

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def require(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise StageError(EXIT_MISSING, f"missing prerequisite {p}; run the earlier stage first")
        return p

    def record(self, stage: str, rows: dict, seconds: float, inputs: dict[str, Path] | None = None, outputs=()) -> None:
        mpath = self.path(MANIFEST)
        manifest = json.loads(mpath.read_text(encoding="utf-8")) if mpath.exists() else {}
        manifest["tool"] = "upapp"
        manifest["version"] = __version__
        manifest["config"] = self.cfg.snapshot()
        manifest.setdefault("inputs", {})
        for name, p in (inputs or {}).items():
            manifest["inputs"][name] = {"path": str(p), "sha256": sha256_file(p)}
        manifest.setdefault("stages", {})[stage] = {"rows": rows, "seconds": round(seconds, 3)}
        out = manifest.setdefault("outputs", {})
        for p in outputs:
            out[str(Path(p).relative_to(self.out))] = sha256_file(p)
        atomic_write_text(mpath, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def index(self):
        return index_from_geojson(self.require(PLACES))

    def stops_with_candidates(self):
        index = self.index()
        stops = read_stops(self.require(STOPS))
        return read_candidates(self.require(CANDIDATES), stops, index), index

    def priors(self) -> PriorTables:
        d = self.require(PRIORS, "duration.csv")
        t = self.require(PRIORS, "time.csv")
        j = self.path(PRIORS, "joint.csv")
        return PriorTables(read_prior_table(d), read_prior_table(t), read_joint_table(j) if j.exists() else None)

    # -- stages -------------------------------------------------------------

    def ingest(self) -> None:
        t0 = time.perf_counter()
        cfg = self.cfg
        if cfg.trajectories is None:
            raise ConfigError("input.trajectories is not set")
        if cfg.pois is None and cfg.rois is None:
            raise ConfigError("set input.pois and/or input.rois")
        inputs = {"trajectories": cfg.trajectories}
        for name in ("pois", "rois", "rules"):
            if getattr(cfg, name) is not None:
                inputs[name] = getattr(cfg, name)
        for name, p in inputs.items():
            if not p.is_file():
                raise StageError(EXIT_PARSE, f"cannot read {name} file {p}: no such file")

        try:
            trajs, stats = parse_trajectories(cfg.trajectories, cfg.schema, self.tz)
        except (SchemaMismatch, EmptyInput, UnicodeDecodeError) as exc:
            raise StageError(EXIT_PARSE, f"{cfg.trajectories}: {exc}") from exc
        raw_points = sum(len(t) for t in trajs)
        if cfg.noise_filter:
            trajs = [filter_noise(t, cfg.max_speed_kmh, cfg.min_angle_deg) for t in trajs]
        kept = sum(len(t) for t in trajs)

        rules = DEFAULT_RULES
        try:
            if cfg.rules is not None:
                rules = load_category_rules(cfg.rules)
        except ValueError as exc:
            raise StageError(EXIT_PARSE, str(exc)) from exc
        features = {}
        for name in ("pois", "rois"):
            p = getattr(cfg, name)
            if p is None:
                features[name] = []
                continue
            try:
                features[name] = read_features(p)
            except (ValueError, GeometryParseError, UnicodeDecodeError) as exc:
                raise StageError(EXIT_PARSE, f"{p}: {exc}") from exc
        try:
            index = build_place_index(features["pois"], features["rois"], rules)
        except EmptyIndex as exc:
            raise StageError(EXIT_PARSE, f"{exc} (pois: {cfg.pois}, rois: {cfg.rois})") from exc

        lines = ["user,time,lat,lon"]
        for t in trajs:
            for ts, lat, lon in zip(t.times.tolist(), t.lats.tolist(), t.lons.tolist()):
                lines.append(f"{t.user_id},{ts},{lat!r},{lon!r}")
        tpath = atomic_write_text(self.path(TRAJECTORIES), "\n".join(lines) + "\n")
        ppath = atomic_write_text(self.path(PLACES), json.dumps(places_to_geojson(index), sort_keys=True) + "\n")
        rows = {
            "rows": stats.rows,
            "skipped_rows": stats.skipped,
            "duplicate_rows": stats.duplicates,
            "points": raw_points,
            "points_kept": kept,
            "trajectories": len(trajs),
            "places": len(index),
            **{f"places.{c.value}": index.count(c) for c in CATEGORIES},
            **{f"features.{k}": v for k, v in index.stats.items()},
        }
        self.record("ingest", rows, time.perf_counter() - t0, inputs, [tpath, ppath])
        log.info("ingest: %d points kept of %d, %d places", kept, raw_points, len(index))

    def detect_stops(self) -> None:
        t0 = time.perf_counter()
        tpath = self.require(TRAJECTORIES)
        index = self.index()
        schema = TrajectorySchema(time_format="epoch")
        try:
            trajs, _ = parse_trajectories(tpath, schema, self.tz)
        except EmptyInput:
            trajs = []
        p = self.cfg.stops
        with self.pool() as pool:
            stops = detect_stops(trajs, p, pool)
            attach = lambda s: attach_candidates(s, index, p.search_radius, p.radius_floor)
            swc = list(pool.map(attach, stops)) if pool else [attach(s) for s in stops]
        spath = atomic_write_text(self.path(STOPS), format_stops(stops))
        cpath = atomic_write_text(self.path(CANDIDATES), format_candidates(swc))
        rows = {"stops": len(stops), "with_candidates": sum(bool(s.candidates) for s in swc)}
        for src in StopSource:
            rows[src.value] = sum(s.source is src for s in stops)
        self.record("detect-stops", rows, time.perf_counter() - t0, outputs=[spath, cpath])
        log.info("detect-stops: %s", rows)

    def build_priors(self) -> None:
        from .plotting import plot_prior

        t0 = time.perf_counter()
        swc, index = self.stops_with_candidates()
        cfg = self.cfg
        try:
            tables = build_priors(swc, index, cfg.scheme, self.tz, joint=cfg.joint, exclusive=cfg.exclusive)
        except NoStops as exc:
            raise StageError(EXIT_EMPTY, f"cannot build priors: {exc}") from exc
        transitions = learn_transitions(build_sequences(swc, self.tz), index, cfg.alpha)
        outs = []
        for name, table in (("duration", tables.duration), ("time", tables.time)):
            p = self.path(PRIORS, f"{name}.csv")
            write_prior_table(table, p, cfg.floor, cfg.scheme)
            outs += [p, p.with_name(p.name + ".meta")]
            outs.append(plot_prior(table, self.path(FIGURES, f"prior_{name}.png")))
        if tables.joint is not None:
            p = self.path(PRIORS, "joint.csv")
            write_joint_table(tables.joint, p, cfg.floor)
            outs += [p, p.with_name(p.name + ".meta")]
        p = self.path(PRIORS, "transitions.csv")
        write_transitions(transitions, p)
        outs += [p, p.with_name(p.name + ".meta")]
        rows = {
            "stops_used": int(tables.duration.bin_counts.sum()),
            "transition_pairs": transitions.pairs,
            **{f"support.{c.value}": int(tables.duration.support[c.index].sum()) for c in CATEGORIES},
        }
        self.record("build-priors", rows, time.perf_counter() - t0, outputs=outs)
        log.info("build-priors: %s", rows)

    def annotate(self, method: str) -> None:
        methods = METHODS if method == "all" else (method,)
        swc, index = self.stops_with_candidates()
        for m in methods:
            t0 = time.perf_counter()
            scoring = Scoring.for_method(
                m,
                spatial=self.cfg.spatial,
                scheme=self.cfg.scheme,
                tz=self.tz,
                floor=self.cfg.floor,
                radius_floor=self.cfg.stops.radius_floor,
            )
            priors = None
            if scoring.use_temporal:
                priors = self.priors()
                if scoring.joint and priors.joint is None:
                    raise StageError(EXIT_MISSING, "the joint method needs priors/joint.csv (priors.joint = true)")
            with self.pool() as pool:
                ann = annotate_all(swc, priors, index, scoring, pool)
                if Method(m) is Method.UPAPP_HMM:
                    ann = decode_all(ann, read_transitions(self.require(PRIORS, "transitions.csv")), self.tz, pool)
            p = self.path(ANNOTATIONS, f"{m}.csv")
            vp = self.path(ANNOTATIONS, f"{m}_candidates.csv") if self.cfg.verbose_candidates else None
            write_annotations(ann, p, vp)
            annotated = sum(a.chosen is not None for a in ann)
            rows = {"stops": len(ann), "annotated": annotated, "no_candidates": len(ann) - annotated}
            self.record(f"annotate:{m}", rows, time.perf_counter() - t0, outputs=[p] + ([vp] if vp else []))
            log.info("annotate %s: %s", m, rows)

    def evaluate(self) -> None:
        from .plotting import plot_accuracy, plot_prior_comparison

        t0 = time.perf_counter()
        if self.cfg.logs is None:
            raise StageError(EXIT_MISSING, "input.logs is not set; evaluation needs activity logs")
        if not self.cfg.logs.is_file():
            raise StageError(EXIT_MISSING, f"activity log file {self.cfg.logs} does not exist")
        try:
            logs, skipped = parse_logs(self.cfg.logs, self.tz)
        except SchemaMismatch as exc:
            raise StageError(EXIT_PARSE, f"{self.cfg.logs}: {exc}") from exc
        done = [m for m in METHODS if self.path(ANNOTATIONS, f"{m}.csv").exists()]
        if not done:
            raise StageError(EXIT_MISSING, f"no annotations under {self.path(ANNOTATIONS)}; run annotate first")
        reports: dict[str, EvaluationReport] = {}
        outs = []
        for m in done:
            ann = read_annotations(self.path(ANNOTATIONS, f"{m}.csv"))
            try:
                r = evaluate(ann, logs, m, self.cfg.min_overlap, self.tz)
            except EmptyPairs as exc:
                raise StageError(EXIT_EMPTY, f"{m}: no stop matched an activity log entry") from exc
            reports[m] = r
            outs.append(atomic_write_text(self.path(EVALUATION, f"{m}.txt"), format_report_human(r)))
            outs.append(atomic_write_text(self.path(EVALUATION, f"{m}.kv"), format_report_kv(r)))
        header = ["method", *(c.value for c in CATEGORIES), "OA", "AA"]
        lines = [",".join(header)]
        for m, r in reports.items():
            accs = [fmt(r.accuracy[c]) if c in r.accuracy else "" for c in CATEGORIES]
            lines.append(",".join([m, *accs, fmt(r.overall), fmt(r.average)]))
        outs.append(atomic_write_text(self.path(EVALUATION, "accuracy.csv"), "\n".join(lines) + "\n"))
        outs.append(plot_accuracy(reports, self.path(FIGURES, "accuracy.png")))

        try:
            from_logs = log_based_priors(logs, self.cfg.scheme, self.tz)
        except NoLogs:
            from_logs = None
        if from_logs is not None:
            for name, table in (("duration", from_logs.duration), ("time", from_logs.time)):
                p = self.path(EVALUATION, f"log_prior_{name}.csv")
                write_prior_table(table, p, self.cfg.floor, self.cfg.scheme)
                outs += [p, p.with_name(p.name + ".meta")]
            if self.path(PRIORS, "duration.csv").exists():
                learned = self.priors()
                for name in ("duration", "time"):
                    outs.append(
                        plot_prior_comparison(
                            getattr(learned, name), getattr(from_logs, name),
                            self.path(FIGURES, f"prior_vs_logs_{name}.png"),
                        )
                    )
        rows = {"log_entries": len(logs), "log_rows_skipped": skipped}
        for m, r in reports.items():
            rows[f"{m}.overall"] = round(r.overall, 6)
            rows[f"{m}.average"] = round(r.average, 6)
            rows[f"{m}.matched"] = r.matched
        self.record("evaluate", rows, time.perf_counter() - t0, {"logs": self.cfg.logs}, outs)
        for m, r in reports.items():
            log.info("evaluate %s: OA %.3f AA %.3f", m, r.overall, r.average)

    def run_all(self, method: str) -> None:
        self.ingest()
        self.detect_stops()
        self.build_priors()
        self.annotate(method)
        if self.cfg.logs is not None:
            self.evaluate()


def _fixture(args) -> int:
    from .synthetic import FixtureConfig, generate_fixture

    out = Path(args.out or "fixture")
    paths = generate_fixture(out, FixtureConfig(seed=args.seed if args.seed is not None else FixtureConfig.seed))
    text = default_config_text().replace("trajectories = \n", "trajectories = trajectories.csv\n")
    text = text.replace("pois = \n", "pois = pois.geojson\n").replace("rois = \n", "rois = rois.geojson\n")
    text = text.replace("logs = \n", "logs = logs.csv\n").replace("out = out\n", "out = run\n")
    text = text.replace("method = upapp\n", "method = all\n")
    atomic_write_text(out / "config.ini", text)
    for name, p in paths.items():
        print(f"{name}: {p}")
    print(f"config: {out / 'config.ini'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="INI configuration file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--method", default=argparse.SUPPRESS, choices=METHODS + ("all",))
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for synthetic fixtures")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(
        prog="upapp", description="Annotate GPS stops with visited place categories.", parents=[common]
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("ingest", "parse trajectories and places"),
        ("detect-stops", "extract stops and their candidate places"),
        ("build-priors", "learn duration, time and transition priors"),
        ("annotate", "choose the visited place of every stop"),
        ("evaluate", "score annotations against activity logs"),
        ("run-all", "run every stage in order"),
        ("synth", "write a synthetic fixture (trajectories, places, logs, config)"),
        ("show-config", "print the default configuration"),
    ):
        sub.add_parser(name, help=help_text, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    for name in ("config", "out", "method", "threads", "seed"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if args.command == "show-config":
        sys.stdout.write(default_config_text())
        return 0
    if args.command == "synth":
        return _fixture(args)

    overrides: dict[str, dict[str, str]] = {"run": {}}
    if args.out is not None:
        overrides["run"]["out"] = str(Path(args.out).resolve())
    if args.method is not None:
        overrides["run"]["method"] = args.method
    if args.threads is not None:
        overrides["run"]["threads"] = str(args.threads)
    try:
        cfg = load_config(args.config, overrides=overrides)
        pipe = Pipeline(cfg)
        if args.command == "annotate" or args.command == "run-all":
            getattr(pipe, args.command.replace("-", "_"))(cfg.method)
        else:
            getattr(pipe, args.command.replace("-", "_"))()
    except ConfigError as exc:
        print(f"upapp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"upapp: {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
