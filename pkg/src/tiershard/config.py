"""Pipeline configuration: one JSON document, paths relative to a work directory."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

from .stats import HardwareProfile, calibrate_latencies
from .trace import EmbTableSpec, SyntheticTraceConfig
from .tt import TTShape

BACKENDS = ("exact", "heuristic")
ABLATION_LEVELS = (1, 2, 3)

DEFAULT_PATHS = {
    "trace": "trace.bin",
    "stats": "stats.json",
    "plan": "plan_l{ablation}.json",
    "remap": "remap_l{ablation}.bin",
    "report": "report_l{ablation}",
    "comparison": "comparison",
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    workdir: Path
    trace: SyntheticTraceConfig
    profile: HardwareProfile = field(default_factory=HardwareProfile)
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))
    tt_rank: int = 4
    tt_cores: int = 3
    max_step: int = 100
    backend: str = "heuristic"
    ablation: int = 3
    mlp_top: list[int] = field(default_factory=list)
    mlp_bottom: list[int] = field(default_factory=list)
    calibrate: bool = False
    transfer_ns: float = 0.0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.ablation not in ABLATION_LEVELS:
            raise ConfigError(f"ablation must be one of {ABLATION_LEVELS}, got {self.ablation!r}")
        unknown = set(self.paths) - set(DEFAULT_PATHS)
        if unknown:
            raise ConfigError(f"unknown path keys {sorted(unknown)}")

    def path(self, key: str, ablation: int | None = None) -> Path:
        name = self.paths.get(key, DEFAULT_PATHS[key])
        return self.workdir / name.format(ablation=self.ablation if ablation is None else ablation)

    def report_paths(self, ablation: int | None = None) -> tuple[Path, Path]:
        base = self.path("report", ablation)
        return base.with_name(base.name + ".csv"), base.with_name(base.name + ".json")

    def level_profile(self, specs: Sequence[EmbTableSpec]) -> HardwareProfile:
        """Profile for the configured sharding level, with optional analytic calibration.

        Level 2 drops the compressed tier, level 1 keeps only the SSD. When
        calibrating, the TT lookup latency uses the largest table's shape.
        """
        prof = self.profile
        if self.calibrate:
            big = max(specs, key=lambda s: (s.row_len * s.dim, s.table_id))
            shape = TTShape.for_table(big.row_len, big.dim, self.tt_cores, self.tt_rank)
            prof = calibrate_latencies(prof, shape, self.mlp_top or None, self.mlp_bottom or None)
        if self.ablation <= 2:
            prof = replace(prof, cap_bram=0.0)
        if self.ablation == 1:
            prof = replace(prof, cap_dram=0.0)
        return prof


def from_dict(doc: dict, workdir: Path) -> PipelineConfig:
    try:
        tt = doc.get("tt", {})
        mlp = doc.get("mlp", {})
        return PipelineConfig(
            workdir=Path(workdir) / doc.get("workdir", "."),
            trace=SyntheticTraceConfig.from_dict(doc["trace"]),
            profile=HardwareProfile.from_dict(doc.get("profile", {})),
            paths={**DEFAULT_PATHS, **doc.get("paths", {})},
            tt_rank=int(tt.get("rank", 4)),
            tt_cores=int(tt.get("cores", 3)),
            max_step=int(doc.get("max_step", 100)),
            backend=doc.get("backend", "heuristic"),
            ablation=int(doc.get("ablation", 3)),
            mlp_top=[int(v) for v in mlp.get("top", [])],
            mlp_bottom=[int(v) for v in mlp.get("bottom", [])],
            calibrate=bool(mlp.get("calibrate", False)),
            transfer_ns=float(doc.get("transfer_ns", 0.0)),
        )
    except KeyError as e:
        raise ConfigError(f"missing config field {e}") from None
    except TypeError as e:
        raise ConfigError(f"bad config field: {e}") from None


def load_config(path: str | Path, workdir: str | Path | None = None) -> PipelineConfig:
    """Read a config file; relative paths resolve against ``workdir`` or the file's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(doc, Path(workdir) if workdir is not None else path.parent)


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture config (``tiny`` or ``powerlaw``)."""
    res = resources.files("tiershard") / "fixtures" / f"{name}.json"
    if not res.is_file():
        raise ConfigError(f"no bundled fixture named {name!r}")
    return Path(str(res))
