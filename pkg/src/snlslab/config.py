"""Simulation parameters and the ``key = value`` configuration format.

Configuration files are INI-style documents read with :mod:`configparser`.
The ``[model]``, ``[noise]`` and ``[run]`` sections fill a :class:`SimConfig`;
any other section holds subcommand parameters.  Every key can be overridden
through an environment variable ``SNLS_<SECTION>_<KEY>``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields

__all__ = ["SimConfig", "ExperimentConfig", "parse_config", "load_config", "ConfigError"]

ENV_PREFIX = "SNLS_"

SCHEMES = ("strang-splitting", "exponential-rk")
GROWTH_NAMES = ("log1p", "loglog", "identity")


class ConfigError(ValueError):
    """Raised when a configuration cannot be parsed or validated."""


@dataclass(frozen=True)
class SimConfig:
    """Parameters shared by every simulation.

    ``noise_decay=None`` selects amplitudes ``(1 + lambda)^{-(s+1)/2}``;
    ``noise_scale`` multiplies all amplitudes.  ``oversampling=None`` picks an
    alias-free collocation grid for odd integer ``p``.
    """

    d: int = 1
    N: int = 8
    p: float = 7.0
    s: float = 2.0
    eps: float = 0.1
    alpha: float = 0.5
    dt: float = 1e-3
    T: float = 1.0
    seed: int = 0
    oversampling: float | None = None
    scheme: str = "strang-splitting"
    full_shell: bool = True
    nonlinear: bool = True
    xi: str = "log1p"
    rho_squared: bool = False
    noise_decay: float | None = None
    noise_scale: float = 1.0
    taming_factor: float = 10.0
    taming_depth: int = 8
    local_time_constant: float = 1.0

    def __post_init__(self):
        errs = []
        if self.d not in (1, 2, 3):
            errs.append("d must be 1, 2 or 3")
        if self.N < 1:
            errs.append("N must be >= 1")
        if not self.p >= 3:
            errs.append("p must be >= 3")
        if not self.s >= 2:
            errs.append("s must be >= 2")
        if not 0 < self.eps < 0.5:
            errs.append("eps must lie in (0, 1/2)")
        if not self.dt > 0:
            errs.append("dt must be positive")
        if not 0 <= self.alpha <= 1:
            errs.append("alpha must lie in [0, 1]")
        if not self.T >= 0:
            errs.append("T must be nonnegative")
        if self.scheme not in SCHEMES:
            errs.append(f"scheme must be one of {SCHEMES}")
        if self.xi not in GROWTH_NAMES:
            errs.append(f"xi must be one of {GROWTH_NAMES}")
        if self.noise_scale < 0:
            errs.append("noise_scale must be nonnegative")
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def s_minus(self) -> float:
        return self.s - self.eps

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


# which section each SimConfig field is written to
_SECTION_OF = {
    "d": "model", "N": "model", "p": "model", "s": "model", "eps": "model",
    "oversampling": "model", "scheme": "model", "full_shell": "model",
    "nonlinear": "model", "local_time_constant": "model",
    "alpha": "noise", "xi": "noise", "rho_squared": "noise",
    "noise_decay": "noise", "noise_scale": "noise",
    "dt": "run", "T": "run", "seed": "run",
    "taming_factor": "run", "taming_depth": "run",
}
SIM_SECTIONS = ("model", "noise", "run")


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", "auto", "") and name in ("oversampling", "noise_decay"):
        return None
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if isinstance(default, float) or default is None:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    return raw


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """A parsed configuration: the simulation block plus free sections."""

    sim: SimConfig = field(default_factory=SimConfig)
    sections: dict = field(default_factory=dict)

    def get(self, section: str, key: str, default=None, kind=None):
        """Typed lookup in a free section; ``kind`` is float, int, bool, str or list."""
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        try:
            if kind is None:
                return raw
            if kind is bool:
                return _convert(key, raw, False)
            if kind is list:
                return [float(v) for v in raw.replace(",", " ").split()]
            return kind(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot read {raw!r}") from None

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in SIM_SECTIONS:
            cp.add_section(sec)
        for f in fields(SimConfig):
            cp.set(_SECTION_OF[f.name], f.name, _format(getattr(self.sim, f.name)))
        for sec in sorted(self.sections):
            cp.add_section(sec)
            for key in sorted(self.sections[sec]):
                cp.set(sec, key, self.sections[sec][key])
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_config(text: str, env: dict | None = None) -> ExperimentConfig:
    """Parse configuration text, applying ``SNLS_<SECTION>_<KEY>`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if env:
        for name, value in env.items():
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX):]
            sec, _, key = rest.partition("_")
            if not key:
                continue
            sec = sec.lower()
            if not cp.has_section(sec):
                cp.add_section(sec)
            # keys are case sensitive (N vs n); match an existing spelling
            known = {k.lower(): k for k in cp.options(sec)}
            known.update({f.name.lower(): f.name for f in fields(SimConfig)
                          if _SECTION_OF[f.name] == sec})
            cp.set(sec, known.get(key.lower(), key.lower()), value)
    defaults = SimConfig()
    values = {}
    sections = {}
    for sec in cp.sections():
        if sec in SIM_SECTIONS:
            for key, raw in cp.items(sec):
                if key not in _SECTION_OF or _SECTION_OF[key] != sec:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                values[key] = _convert(key, raw, getattr(defaults, key))
        else:
            sections[sec] = dict(cp.items(sec))
    try:
        sim = SimConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(sim=sim, sections=sections)


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    """Read a configuration file; ``env`` defaults to ``os.environ``."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, os.environ if env is None else env)
