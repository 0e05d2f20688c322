"""Run configuration: flat ``section.key = value`` text with validation.

Lines starting with ``#`` and blank lines are ignored.  Segment lists use
``x0 y0 x1 y1`` per segment, separated by ``;``; tractions attach a value
with ``x0 y0 x1 y1 : gx gy``.  Environment variables ``CE_SECTION_KEY``
override the keys of the text, e.g. ``CE_ADAPTIVE_MAX_STEPS=4``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .adaptive import AdaptiveConfig
from .femcore import ElasticityCoefficients
from .mesh import Segment, Tag, build_rect_mesh, segment_tag_rule
from .problem import ContactProblem, constant_field, piecewise_traction

MODES = ("adaptive", "uniform-study", "single-solve", "verify")
ENV_PREFIX = "CE_"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry when there is one."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _floats(n: int | None = None):
    def conv(text: str):
        vals = tuple(float(x) for x in text.split())
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} numbers, got {len(vals)}")
        return vals
    return conv


def _segments(text: str):
    out = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        out.append(_floats(4)(chunk))
    return tuple(out)


def _tractions(text: str):
    out = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        seg, sep, val = chunk.partition(":")
        if not sep:
            raise ValueError("traction entries read 'x0 y0 x1 y1 : gx gy'")
        out.append((_floats(4)(seg), _floats(2)(val)))
    return tuple(out)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _choice(*options):
    def conv(text: str):
        v = text.strip()
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return conv


_REQUIRED = object()

# key -> (converter, default)
SCHEMA = {
    "run.mode": (_choice(*MODES), "adaptive"),
    "geometry.rect": (_floats(4), None),
    "geometry.nx": (int, 4),
    "geometry.ny": (int, 2),
    "geometry.mesh": (str, ""),
    "geometry.dirichlet": (_segments, ()),
    "geometry.contact": (_segments, ()),
    "material.young": (float, _REQUIRED),
    "material.poisson": (float, _REQUIRED),
    "load.body_force": (_floats(2), (0.0, 0.0)),
    "load.traction": (_tractions, ()),
    "nitsche.gamma0": (float, _REQUIRED),
    "nitsche.delta_init": (float, _REQUIRED),
    "nitsche.delta_shrink": (float, 0.5),
    "nitsche.degree": (int, 1),
    "nitsche.newton_max_iters": (int, 50),
    "adaptive.gamma_reg": (float, 0.04),
    "adaptive.gamma_lin": (float, 0.08),
    "adaptive.fraction": (float, 0.06),
    "adaptive.max_steps": (int, 11),
    "adaptive.max_reg_rounds": (int, 40),
    "adaptive.stopping": (_choice("global", "local"), "global"),
    "adaptive.gamma_reg_local": (_optional_float, None),
    "adaptive.gamma_lin_local": (_optional_float, None),
    "adaptive.evenness_ratio": (float, 3.0),
    "adaptive.trace_constant": (_optional_float, None),
    "adaptive.abs_floor": (float, 1e-12),
    "verify.reference_levels": (int, 5),
    "verify.reference_degree": (int, 2),
    "verify.uniform_steps": (int, 3),
    "verify.lifting": (_choice("none", "degree", "refined"), "refined"),
    "output.directory": (str, "out"),
    "output.meshes": (_bool, True),
    "output.fields": (_bool, True),
    "output.estimators": (_bool, True),
}


@dataclass(frozen=True)
class RunConfig:
    """Validated settings of one run; ``values`` maps every schema key to its value."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def mode(self) -> str:
        return self.values["run.mode"]

    def with_overrides(self, **items) -> "RunConfig":
        """Copy with keys replaced; names use ``__`` for the dot."""
        vals = dict(self.values)
        for k, v in items.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key}", key)
            vals[key] = v
        return _validated(vals)

    def coefficients(self) -> ElasticityCoefficients:
        return ElasticityCoefficients.plane_strain(self["material.young"], self["material.poisson"])

    def adaptive_config(self, threads: int = 1) -> AdaptiveConfig:
        v = self.values
        return AdaptiveConfig(
            gamma0=v["nitsche.gamma0"], delta_init=v["nitsche.delta_init"],
            delta_shrink=v["nitsche.delta_shrink"], gamma_reg=v["adaptive.gamma_reg"],
            gamma_lin=v["adaptive.gamma_lin"], fraction=v["adaptive.fraction"],
            max_steps=v["adaptive.max_steps"], stopping=v["adaptive.stopping"],
            gamma_reg_local=v["adaptive.gamma_reg_local"], gamma_lin_local=v["adaptive.gamma_lin_local"],
            evenness_ratio=v["adaptive.evenness_ratio"], newton_max_iters=v["nitsche.newton_max_iters"],
            max_reg_rounds=v["adaptive.max_reg_rounds"], trace_constant=v["adaptive.trace_constant"],
            threads=threads, abs_floor=v["adaptive.abs_floor"],
        )

    def problem(self, base_dir: Path | None = None) -> ContactProblem:
        """Build the mesh and data; the mesh file path is relative to ``base_dir``."""
        v = self.values
        segs = [Segment(s[:2], s[2:], Tag.DIRICHLET) for s in v["geometry.dirichlet"]]
        segs += [Segment(s[:2], s[2:], Tag.CONTACT) for s in v["geometry.contact"]]
        if v["geometry.mesh"]:
            from .io import read_mesh

            path = Path(v["geometry.mesh"])
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            mesh = read_mesh(path)
        else:
            mesh = build_rect_mesh(v["geometry.nx"], v["geometry.ny"], v["geometry.rect"],
                                   segment_tag_rule(segs))
        traction = piecewise_traction([(Segment(s[:2], s[2:], Tag.NEUMANN), g) for s, g in v["load.traction"]])
        return ContactProblem(mesh, self.coefficients(), constant_field(v["load.body_force"]), traction,
                              v["nitsche.degree"], v["material.young"])


def _validated(vals: dict) -> RunConfig:
    missing = [k for k, (_, d) in SCHEMA.items() if vals.get(k, d) is _REQUIRED]
    if not vals.get("geometry.mesh") and vals.get("geometry.rect") is None:
        missing.insert(0, "geometry.rect")
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing), missing[0])

    def check(ok: bool, key: str, what: str):
        if not ok:
            raise ConfigError(f"{key} {what}, got {vals[key]!r}", key)

    check(vals["material.young"] > 0, "material.young", "must be positive")
    check(-1.0 < vals["material.poisson"] < 0.5, "material.poisson", "must lie in (-1, 0.5)")
    check(vals["nitsche.degree"] in (1, 2), "nitsche.degree", "must be 1 or 2")
    check(vals["geometry.nx"] >= 1 and vals["geometry.ny"] >= 1, "geometry.nx", "and geometry.ny must be >= 1")
    if vals["geometry.rect"] is not None:
        x0, x1, y0, y1 = vals["geometry.rect"]
        check(x1 > x0 and y1 > y0, "geometry.rect", "must read 'x0 x1 y0 y1' with x0 < x1 and y0 < y1")
    check(vals["verify.reference_levels"] >= 1, "verify.reference_levels", "must be >= 1")
    check(vals["verify.reference_degree"] in (1, 2), "verify.reference_degree", "must be 1 or 2")
    check(vals["verify.uniform_steps"] >= 3, "verify.uniform_steps", "must be >= 3 to fit a rate")
    cfg = RunConfig(vals)
    try:
        cfg.adaptive_config()
    except ValueError as exc:
        name = str(exc).split()[0]
        key = next((k for k in SCHEMA if k.endswith("." + name)), None)
        raise ConfigError(str(exc), key) from None
    return cfg


def _env_key(var: str) -> str:
    rest = var[len(ENV_PREFIX):].lower()
    section, _, key = rest.partition("_")
    return f"{section}.{key}"


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    """Parse and validate configuration text.

    Parameters
    ----------
    text : str
        ``section.key = value`` lines.
    env : mapping, optional
        Environment; entries named ``CE_<SECTION>_<KEY>`` override the text.

    Raises
    ------
    ConfigError
        On malformed lines, unknown or repeated keys, missing required keys
        and out-of-range values.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key.count(".") != 1:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'", key or None)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key}", key)
        if key in raw:
            raise ConfigError(f"key {key} given twice", key)
        raw[key] = value.strip()
    for var, value in sorted((env or {}).items()):
        if not var.startswith(ENV_PREFIX):
            continue
        key = _env_key(var)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key} (from environment variable {var})", key)
        raw[key] = value
    vals = {}
    for key, (conv, default) in SCHEMA.items():
        if key in raw:
            try:
                vals[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}", key) from None
        else:
            vals[key] = default
    return _validated(vals)


def load_config(path, env: dict | None = None) -> RunConfig:
    """Read a config file, applying ``os.environ`` overrides unless ``env`` is given."""
    return parse_config(Path(path).read_text(), os.environ if env is None else env)


def shipped_config(name: str = "paper_section7.cfg") -> Path:
    """Path of a configuration file distributed with the package."""
    return Path(str(resources.files("contact_equilibrate") / "data" / name))
