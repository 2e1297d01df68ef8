"""Pipeline configuration: INI sections, environment overrides, validation.

Precedence, lowest first: built-in defaults, the config file, environment
variables named ``UPAPP_<SECTION>_<KEY>``, command-line flags.
"""

from __future__ import annotations

import configparser
import io
import os
import re
from dataclasses import dataclass, field
from datetime import timedelta, timezone, tzinfo
from pathlib import Path
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

from .exceptions import ConfigError
from .ingest import TrajectorySchema
from .priors import BinScheme
from .spatial import SpatialParams
from .stops import StopParams

DEFAULTS: dict[str, dict[str, str]] = {
    "input": {"trajectories": "", "pois": "", "rois": "", "logs": "", "rules": ""},
    "schema": {"user": "user", "time": "time", "lat": "lat", "lon": "lon", "time_format": "iso", "delimiter": ","},
    "noise": {"enabled": "true", "max_speed_kmh": "180", "min_angle_deg": "30"},
    "stops": {
        "d1": "100", "t1": "600", "d2": "200", "t2": "1200", "d3": "200",
        "d_merge": "90", "t_merge": "540", "radius_floor": "15",
    },
    "spatial": {"search_radius": "200", "p_r": "0.5"},
    "priors": {
        "duration_edges": "0, 30, 90, 180, 300, 1440", "early_hours": "6", "smoothing_window": "3",
        "floor": "1e-6", "exclusive": "false", "joint": "true",
    },
    "sequence": {"alpha": "1e-3"},
    "evaluation": {"min_overlap": "0.5"},
    "run": {"timezone": "UTC", "method": "upapp", "threads": "1", "out": "out", "seed": "0", "verbose_candidates": "true"},
}

METHODS = ("spatial-only", "spatiotemporal", "upapp", "upapp-hmm", "upapp-joint")


def parse_timezone(text: str) -> tzinfo:
    """``UTC``, an IANA name, or a fixed offset such as ``+08:00``."""
    text = text.strip()
    if text.upper() in ("UTC", "Z"):
        return timezone.utc
    m = re.fullmatch(r"([+-])(\d{1,2}):?(\d{2})?", text)
    if m:
        sign = -1 if m.group(1) == "-" else 1
        delta = timedelta(hours=int(m.group(2)), minutes=int(m.group(3) or 0))
        return timezone(sign * delta)
    try:
        return ZoneInfo(text)
    except (ZoneInfoNotFoundError, ValueError) as exc:
        raise ConfigError(f"unknown timezone {text!r}") from exc


@dataclass
class PipelineConfig:
    trajectories: Path | None = None
    pois: Path | None = None
    rois: Path | None = None
    logs: Path | None = None
    rules: Path | None = None
    schema: TrajectorySchema = TrajectorySchema()
    noise_filter: bool = True
    max_speed_kmh: float = 180.0
    min_angle_deg: float = 30.0
    stops: StopParams = StopParams()
    spatial: SpatialParams = SpatialParams()
    scheme: BinScheme = BinScheme()
    floor: float = 1e-6
    exclusive: bool = False
    joint: bool = True
    alpha: float = 1e-3
    min_overlap: float = 0.5
    timezone_name: str = "UTC"
    method: str = "upapp"
    threads: int = 1
    out: Path = Path("out")
    seed: int = 0
    verbose_candidates: bool = True
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    @property
    def tz(self) -> tzinfo:
        return parse_timezone(self.timezone_name)

    def snapshot(self) -> dict[str, dict[str, str]]:
        """Effective settings as section -> key -> text, for the run manifest."""
        return {s: dict(sorted(v.items())) for s, v in sorted(self.raw.items())}


def _layer(path: Path | None, env: dict[str, str]) -> tuple[configparser.ConfigParser, Path]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.resolve().parent
        unknown = [s for s in cp.sections() if s not in DEFAULTS]
        if unknown:
            raise ConfigError(f"{path}: unknown section(s) {unknown}")
        for s in DEFAULTS:
            extra = [k for k in cp[s] if k not in DEFAULTS[s]]
            if extra:
                raise ConfigError(f"{path}: unknown key(s) {extra} in [{s}]")
    for name, value in env.items():
        if not name.startswith("UPAPP_"):
            continue
        rest = name[len("UPAPP_"):].lower()
        for s in DEFAULTS:
            if rest.startswith(s + "_") and rest[len(s) + 1:] in DEFAULTS[s]:
                cp[s][rest[len(s) + 1:]] = value
                break
    return cp, base


def _path(cp, key: str, base: Path) -> Path | None:
    text = cp["input"][key].strip()
    if not text:
        return None
    p = Path(text).expanduser()
    return p if p.is_absolute() else base / p


def load_config(path=None, env: dict[str, str] | None = None, overrides: dict[str, dict[str, str]] | None = None) -> PipelineConfig:
    """Build and validate a PipelineConfig; raises ConfigError on any problem."""
    cp, base = _layer(path, dict(os.environ) if env is None else env)
    for s, kv in (overrides or {}).items():
        for k, v in kv.items():
            cp[s][k] = str(v)
    try:
        num = lambda s, k: float(cp[s][k])
        schema = TrajectorySchema(
            user=cp["schema"]["user"], time=cp["schema"]["time"], lat=cp["schema"]["lat"], lon=cp["schema"]["lon"],
            time_format=cp["schema"]["time_format"], delimiter=cp["schema"]["delimiter"] or ",",
        )
        if schema.time_format not in ("iso", "epoch"):
            raise ConfigError("schema.time_format must be 'iso' or 'epoch'")
        stops = StopParams(
            d1=num("stops", "d1"), t1=num("stops", "t1"), d2=num("stops", "d2"), t2=num("stops", "t2"),
            d3=num("stops", "d3"), d_merge=num("stops", "d_merge"), t_merge=num("stops", "t_merge"),
            search_radius=num("spatial", "search_radius"), radius_floor=num("stops", "radius_floor"),
        )
        for k, v in vars(stops).items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive, got {v}")
        if not stops.search_radius > stops.d_merge:
            raise ConfigError("search_radius must exceed d_merge")
        p_r = num("spatial", "p_r")
        if not 0.0 < p_r < 1.0:
            raise ConfigError(f"p_r must lie in (0, 1), got {p_r}")
        spatial = SpatialParams(p_r=p_r, search_radius=stops.search_radius)
        edges = tuple(float(e) for e in cp["priors"]["duration_edges"].replace(",", " ").split())
        scheme = BinScheme(
            duration_edges=edges,
            early_hours=int(cp["priors"]["early_hours"]),
            smoothing_window=int(cp["priors"]["smoothing_window"]),
        )
        floor = num("priors", "floor")
        if not 0.0 < floor < 1.0:
            raise ConfigError("priors.floor must lie in (0, 1)")
        alpha = num("sequence", "alpha")
        if alpha < 0:
            raise ConfigError("sequence.alpha must be >= 0")
        min_overlap = num("evaluation", "min_overlap")
        if not 0.0 < min_overlap <= 1.0:
            raise ConfigError("evaluation.min_overlap must lie in (0, 1]")
        method = cp["run"]["method"].strip()
        if method not in METHODS + ("all",):
            raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)} or all")
        threads = int(cp["run"]["threads"])
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        parse_timezone(cp["run"]["timezone"])
        out = Path(cp["run"]["out"]).expanduser()
        cfg = PipelineConfig(
            trajectories=_path(cp, "trajectories", base),
            pois=_path(cp, "pois", base),
            rois=_path(cp, "rois", base),
            logs=_path(cp, "logs", base),
            rules=_path(cp, "rules", base),
            schema=schema,
            noise_filter=cp["noise"].getboolean("enabled"),
            max_speed_kmh=num("noise", "max_speed_kmh"),
            min_angle_deg=num("noise", "min_angle_deg"),
            stops=stops,
            spatial=spatial,
            scheme=scheme,
            floor=floor,
            exclusive=cp["priors"].getboolean("exclusive"),
            joint=cp["priors"].getboolean("joint"),
            alpha=alpha,
            min_overlap=min_overlap,
            timezone_name=cp["run"]["timezone"].strip(),
            method=method,
            threads=threads,
            out=out if out.is_absolute() else base / out,
            seed=int(cp["run"]["seed"]),
            verbose_candidates=cp["run"].getboolean("verbose_candidates"),
            raw={s: dict(cp[s]) for s in DEFAULTS},
        )
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc
    return cfg


def default_config_text() -> str:
    """The defaults rendered as an INI file."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
