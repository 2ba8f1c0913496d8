"""Experiment configuration: TOML sections ``grid``, ``physics``, ``data``, ``time``, ``output``.

Every field has a default, so a config file only needs the keys it changes.
Emitting a config and parsing it back yields an equal object.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grid import Grid, make_grid
from .harness import check_ab
from .propagators import KINDS, PotentialSpec

SEED_KINDS = ("toeplitz", "rank-one", "file")
POTENTIAL_KINDS = ("none",) + tuple(k for k in KINDS if k != "custom")
FORMATS = ("csv", "json", "bin")


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    d: int = 1
    n: int = 1024
    L: float = 80.0


@dataclass
class PhysicsConfig:
    hbar: float = 0.5
    hbars: list = field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125])
    potential: str = "regularized-coulomb"
    kappa: float = 0.02
    width: float = 1.0
    sigma: float = 1.6
    a: float = 0.036
    b: float = 0.04
    fidelity: bool = False
    literal_coherent: bool = False


@dataclass
class DataConfig:
    seed: str = "toeplitz"
    sq: float = 0.5
    sp: float = 0.5
    q0: float = 0.0
    p0: float = 0.0
    mass: float = 1.0
    p_n: int = 256
    p_L: float = 16.0
    stride_q: int = 0
    stride_p: int = 0
    tol: float = 1e-8
    width: float = 1.0
    path: str = ""
    rng_seed: int = 0


@dataclass
class TimeConfig:
    T: float = 10.0
    dt: float = 0.05
    stride: int = 20
    window: list = field(default_factory=lambda: [5.0, 40.0])
    phase_rule: str = "midpoint"


@dataclass
class OutputConfig:
    directory: str = "runs/default"
    formats: list = field(default_factory=lambda: ["csv", "json"])


@dataclass
class IdentitySection:
    """Identity-suite knobs; lattice and hbar come from ``grid`` and ``physics``."""

    t_mdfm: float = 2.0
    t_j: float = 2.0
    t_density: float = 1.0
    T: float = 1.0
    steps: list = field(default_factory=lambda: [8, 16, 32])
    amp: float = 0.5
    width: float = 2.0
    pairs: str = "all"
    rank: int = 2
    packet_width: float = 1.0
    momentum: float = 0.5


SECTIONS = {"grid": GridConfig, "physics": PhysicsConfig, "data": DataConfig,
            "time": TimeConfig, "output": OutputConfig, "identities": IdentitySection}


@dataclass
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    identities: IdentitySection = field(default_factory=IdentitySection)

    # -- parsing ---------------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, kind in SECTIONS.items():
            block = raw.get(name, {})
            if not isinstance(block, dict):
                raise ConfigError(f"[{name}] must be a table")
            known = {f.name: f for f in fields(kind)}
            extra = set(block) - set(known)
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
            vals = {}
            for key, value in block.items():
                default = getattr(kind(), key)
                vals[key] = _coerce(name, key, value, default)
            parts[name] = kind(**vals)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        return cls.from_text(text)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_text(self) -> str:
        return tomli_w.dumps(self.to_dict())

    # -- validation --------------------------------------------------------------
    def validate(self) -> None:
        g, ph, da, ti, out = self.grid, self.physics, self.data, self.time, self.output
        if g.d not in (1, 2, 3):
            raise ConfigError("grid.d must be 1, 2 or 3")
        try:
            make_grid(g.d, g.n, g.L)
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from exc
        for h in [ph.hbar] + list(ph.hbars):
            if not 0 < h <= 1:
                raise ConfigError(f"hbar values must lie in (0, 1], got {h}")
        if any(b >= a for a, b in zip(ph.hbars, ph.hbars[1:])):
            raise ConfigError("physics.hbars must be strictly descending")
        if ph.potential not in POTENTIAL_KINDS:
            raise ConfigError(f"physics.potential must be one of {POTENTIAL_KINDS}")
        if ph.width <= 0:
            raise ConfigError("physics.width must be positive")
        try:
            check_ab(ph.a, ph.b)
        except ValueError as exc:
            raise ConfigError(f"physics: {exc}") from exc
        if g.d == 3 and ph.fidelity and not 1.5 < ph.sigma < 2:
            raise ConfigError("physics.sigma must lie in (3/2, 2) in d = 3 fidelity mode")
        if ph.sigma <= 0:
            raise ConfigError("physics.sigma must be positive")
        if da.seed not in SEED_KINDS:
            raise ConfigError(f"data.seed must be one of {SEED_KINDS}")
        if da.seed == "file" and not da.path:
            raise ConfigError("data.path is required for file seeds")
        if da.seed == "toeplitz" and g.d > 2:
            raise ConfigError("Toeplitz seeds are supported for d <= 2")
        if min(da.sq, da.sp, da.width, da.mass, da.p_L, da.tol) <= 0:
            raise ConfigError("data widths, mass, p_L and tol must be positive")
        if da.stride_q < 0 or da.stride_p < 0:
            raise ConfigError("data strides must be >= 0 (0 selects the default)")
        try:
            make_grid(g.d, da.p_n, da.p_L)
        except ValueError as exc:
            raise ConfigError(f"data p lattice: {exc}") from exc
        if ti.T <= 0 or ti.dt <= 0 or ti.stride < 1:
            raise ConfigError("time.T and time.dt must be positive and time.stride >= 1")
        if len(ti.window) != 2 or not 0 <= ti.window[0] < ti.window[1]:
            raise ConfigError("time.window must be [t_min, t_max] with t_min < t_max")
        if ti.phase_rule not in ("midpoint", "left"):
            raise ConfigError("time.phase_rule must be 'midpoint' or 'left'")
        idc = self.identities
        if len(idc.steps) < 2 or any(not isinstance(m, int) or m < 1 for m in idc.steps):
            raise ConfigError("identities.steps must list at least two positive integers")
        if idc.pairs not in ("all", "diagonal", "none"):
            raise ConfigError("identities.pairs must be 'all', 'diagonal' or 'none'")
        if idc.rank < 1:
            raise ConfigError("identities.rank must be >= 1")
        bad = set(out.formats) - set(FORMATS)
        if bad:
            raise ConfigError(f"unknown output formats {sorted(bad)}")

    # -- derived objects -----------------------------------------------------------
    def make_grid(self) -> Grid:
        return make_grid(self.grid.d, self.grid.n, self.grid.L)

    def potential_spec(self) -> PotentialSpec:
        ph = self.physics
        if ph.potential == "none":
            return PotentialSpec.gaussian(0.0, ph.width)
        if ph.potential == "gaussian":
            return PotentialSpec.gaussian(ph.kappa, ph.width)
        return PotentialSpec.regularized_coulomb(ph.kappa)

    def identity_config(self):
        from .identities import IdentityConfig

        kw = asdict(self.identities)
        kw["steps"] = tuple(kw["steps"])
        return IdentityConfig(d=self.grid.d, n=self.grid.n, L=self.grid.L, hbar=self.physics.hbar, **kw)

    def stamp_times(self) -> list[float]:
        """Snapshot times of a run: every ``stride`` steps up to ``T``."""
        ti = self.time
        spacing = ti.stride * ti.dt
        m = int(round(ti.T / spacing))
        out = [round(j * spacing, 12) for j in range(m + 1)]
        if abs(out[-1] - ti.T) > 1e-9:
            out.append(float(ti.T))
        return out


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        if default and isinstance(default[0], float):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{where} must be a list of numbers")
            return [float(v) for v in value]
        return list(value)
    return value
