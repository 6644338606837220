"""Experiment configuration: YAML in, validated dataclasses out.

Unknown keys are rejected so typos surface instead of silently falling back
to defaults.  :func:`effective_dict` returns the fully resolved config that
is written next to every output directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .forward import SphereConfig

DEFAULT_K_LIST = (0, 1, 2, 5, 10, 20)
MODELS = ("DYN", "IND", "STS")


class ConfigError(ValueError):
    pass


@dataclass
class ImportPaths:
    leadfield: str
    graph: str
    positions: str | None = None
    orientations: str | None = None
    sphere_radius: float | None = None


@dataclass
class GeometrySection:
    mode: str = "synthetic"
    sphere: SphereConfig = field(default_factory=SphereConfig)
    imports: ImportPaths | None = None


@dataclass
class DynamicsSection:
    phi: float = 0.95
    lam: float = 1.0
    # None -> 1 - phi**2 for every source
    nu: float | list | None = None


@dataclass
class AnalysisSection:
    k: list = field(default_factory=lambda: list(DEFAULT_K_LIST))
    models: list = field(default_factory=lambda: list(MODELS))
    tolerance: float | None = None
    memory_budget_mb: float = 512.0


@dataclass
class StsSection:
    delta: float = 4e-3
    psi: float = 204.8
    T: int | None = None
    t: int | None = None
    padding: int = 10


@dataclass
class OracleSection:
    sensor_count: int = 10
    source_count: int = 20
    T: int = 200_000
    seed: int = 1
    geometry_seed: int = 0
    lags: list = field(default_factory=lambda: [1, 2])
    offsets: list = field(default_factory=lambda: [0, 2, -2])
    rtol: float = 0.05
    batches: int = 50
    # sensor noise variance as a multiple of the mean per-sensor signal power
    noise_ratio: float = 1.0


@dataclass
class ExperimentConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    sts: StsSection = field(default_factory=StsSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    output_dir: str = "out"

    def validate(self, base_dir: Path | None = None) -> "ExperimentConfig":
        ks = self.analysis.k
        if not ks or any(int(k) != k or k < 0 for k in ks):
            raise ConfigError("analysis.k must be a nonempty list of nonnegative integers")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigError("analysis.k must be strictly increasing")
        bad = [m for m in self.analysis.models if m not in MODELS]
        if bad:
            raise ConfigError(f"unknown model(s) {bad}; choose from {MODELS}")
        if not 0 < self.dynamics.phi < 1:
            raise ConfigError("dynamics.phi must lie in (0, 1)")
        if not self.dynamics.lam > 0:
            raise ConfigError("dynamics.lambda must be positive")
        if not (self.sts.delta > 0 and self.sts.psi > 0):
            raise ConfigError("sts.delta and sts.psi must be positive")
        if self.oracle.T < 2:
            raise ConfigError("oracle.T must be at least 2")
        if self.geometry.mode not in ("synthetic", "import"):
            raise ConfigError("geometry.mode must be 'synthetic' or 'import'")
        if self.geometry.mode == "import":
            imp = self.geometry.imports
            if imp is None:
                raise ConfigError("geometry.mode 'import' needs a geometry.import section")
            for name in ("leadfield", "graph", "positions", "orientations"):
                path = getattr(imp, name)
                if path is None:
                    continue
                resolved = (Path(path) if base_dir is None else base_dir / path).resolve()
                if not resolved.exists():
                    raise ConfigError(f"geometry.import.{name}: file not found: {resolved}")
                setattr(imp, name, str(resolved))
        return self

    def sts_window(self) -> tuple[int, int]:
        k_max = max(self.analysis.k)
        T = self.sts.T if self.sts.T is not None else 2 * k_max + 1 + 2 * self.sts.padding
        t = self.sts.t if self.sts.t is not None else (T + 1) // 2
        if t - k_max < 1 or t + k_max > T:
            raise ConfigError(f"STS window t={t} +/- {k_max} does not fit in [1, {T}]")
        return T, t


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    top = {"geometry", "dynamics", "analysis", "sts", "oracle", "output_dir"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    geo = dict(data.get("geometry") or {})
    sphere = _build(SphereConfig, geo.pop("sphere", None), "geometry.sphere")
    imports = geo.pop("import", None)
    imports = _build(ImportPaths, imports, "geometry.import") if imports is not None else None
    geometry = _build(GeometrySection, geo, "geometry")
    geometry.sphere, geometry.imports = sphere, imports
    dyn = dict(data.get("dynamics") or {})
    if "lambda" in dyn:
        dyn["lam"] = dyn.pop("lambda")
    return ExperimentConfig(
        geometry=geometry,
        dynamics=_build(DynamicsSection, dyn, "dynamics"),
        analysis=_build(AnalysisSection, data.get("analysis"), "analysis"),
        sts=_build(StsSection, data.get("sts"), "sts"),
        oracle=_build(OracleSection, data.get("oracle"), "oracle"),
        output_dir=str(data.get("output_dir", "out")),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data).validate(path.parent)


def effective_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    geo = d["geometry"]
    geo["import"] = geo.pop("imports")
    d["dynamics"]["lambda"] = d["dynamics"].pop("lam")
    return d


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the effective config; the output directory does not affect results and is left out."""
    d = effective_dict(cfg)
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(effective_dict(cfg), sort_keys=False))
