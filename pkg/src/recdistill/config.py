"""INI-style run configuration: mixture, schedule, rectifier, distillation.

Unknown sections or keys fail fast with a diagnostic naming them, so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .rectify import MARGINAL_SOURCES, POSTERIOR_SOURCES, Rectifier, TargetMarginal
from .worldmodel import PoseLabeledMixture, Renderer

_KNOWN_KEYS = {
    "mixture": {"components", "num_categories"},
    "schedule": {"num_steps", "beta_min", "beta_max"},
    "rectifier": {"target", "posterior_source", "marginal_source", "epsilon_floor", "fd_step"},
    "distill": {
        "method", "eta1", "eta2", "iters", "particles", "dim", "init_scale",
        "bnf_n_i", "grad_norm_align", "control_category", "omega_kind",
        "n_t", "n_ema", "snapshot_every", "pose_probs", "renderer", "renderer_angles",
    },
    "demo": {"grid_lo", "grid_hi", "grid_points", "times"},
}


@dataclass(frozen=True)
class RunSpec:
    """Parsed configuration for the CLI drivers."""

    mixture: PoseLabeledMixture
    num_steps: int
    beta_min: float
    beta_max: float
    rectifier: Rectifier | None
    distill: dict                     # DistillConfig kwargs + particle-init keys
    demo: dict                        # rectify-demo grid settings


def _floats(text: str) -> np.ndarray:
    return np.array([float(tok) for tok in text.split()])


def _parse_mixture(section) -> PoseLabeledMixture:
    num_categories = int(section.get("num_categories", "2"))
    weights, means, covs, cats = [], [], [], []
    for line in section["components"].strip().splitlines():
        fields = [f.strip() for f in line.split("|")]
        if len(fields) != 4:
            raise ConfigurationError(
                f"component line needs 'weight | mean | cov | category', got {line.strip()!r}"
            )
        weights.append(float(fields[0]))
        means.append(_floats(fields[1]))
        covs.append(_floats(fields[2]))
        cats.append(int(fields[3]))
    d = means[0].size
    return PoseLabeledMixture(
        weights=np.array(weights),
        means=np.stack(means),
        covs=np.stack([c.reshape(d, d) for c in covs]),
        category_of=np.array(cats),
        num_categories=num_categories,
    )


def _parse_target(text: str, k: int) -> TargetMarginal:
    if text.strip() == "uniform":
        return TargetMarginal.uniform(k)
    return TargetMarginal(_floats(text))


def _parse_rectifier(section, k: int) -> Rectifier:
    kwargs = {"target": _parse_target(section.get("target", "uniform"), k)}
    if "posterior_source" in section:
        kwargs["posterior_source"] = section["posterior_source"].strip()
    if "marginal_source" in section:
        kwargs["marginal_source"] = section["marginal_source"].strip()
    if "epsilon_floor" in section:
        kwargs["epsilon_floor"] = float(section["epsilon_floor"])
    if "fd_step" in section:
        kwargs["fd_step"] = float(section["fd_step"])
    try:
        return Rectifier(**kwargs)
    except ValueError as exc:
        raise ConfigurationError(f"[rectifier] {exc}") from exc


def _parse_distill(section, k: int) -> dict:
    out = {
        "method": section.get("method", "usd").strip(),
        "particles": int(section.get("particles", "16")),
        "dim": int(section.get("dim", "1")),
        "init_scale": float(section.get("init_scale", "1.0")),
    }
    for key, cast in [
        ("eta1", float), ("eta2", float), ("iters", int), ("bnf_n_i", int),
        ("n_t", int), ("n_ema", int), ("snapshot_every", int),
    ]:
        if key in section:
            out[key] = cast(section[key])
    if "grad_norm_align" in section:
        out["grad_norm_align"] = section.getboolean("grad_norm_align")
    if "control_category" in section and section["control_category"].strip():
        out["control_category"] = int(section["control_category"])
    if "omega_kind" in section:
        out["omega_kind"] = section["omega_kind"].strip()
    if "pose_probs" in section and section["pose_probs"].strip() != "uniform":
        out["pose_probs"] = _floats(section["pose_probs"])
    angles = tuple(_floats(section.get("renderer_angles", "")))
    out["renderer"] = Renderer(kind=section.get("renderer", "identity").strip(), angles=angles)
    return out


def _parse_demo(section) -> dict:
    return {
        "grid_lo": float(section.get("grid_lo", "-8.0")),
        "grid_hi": float(section.get("grid_hi", "8.0")),
        "grid_points": int(section.get("grid_points", "801")),
        "times": [int(tok) for tok in section.get("times", "50 300 700").split()],
    }


def parse_config(path) -> RunSpec:
    """Read and validate a run configuration file."""
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"cannot read config file {path}")
    for name in parser.sections():
        if name not in _KNOWN_KEYS:
            raise ConfigurationError(f"unknown config section [{name}]")
        unknown = set(parser[name]) - _KNOWN_KEYS[name]
        if unknown:
            raise ConfigurationError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    if "mixture" not in parser or "components" not in parser["mixture"]:
        raise ConfigurationError("config needs a [mixture] section with a 'components' key")
    mixture = _parse_mixture(parser["mixture"])
    sched = parser["schedule"] if "schedule" in parser else {}
    rectifier = None
    if "rectifier" in parser:
        rectifier = _parse_rectifier(parser["rectifier"], mixture.num_categories)
    distill = _parse_distill(parser["distill"] if "distill" in parser else {}, mixture.num_categories)
    demo = _parse_demo(parser["demo"] if "demo" in parser else {})
    return RunSpec(
        mixture=mixture,
        num_steps=int(sched.get("num_steps", "1000")),
        beta_min=float(sched.get("beta_min", "1e-4")),
        beta_max=float(sched.get("beta_max", "0.02")),
        rectifier=rectifier,
        distill=distill,
        demo=demo,
    )
