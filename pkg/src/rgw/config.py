"""Versioned JSON configuration for the workbench."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources

from .lattice import Scales, validate_scales
from .operators import ModelParams

SCHEMA = "rgw-config/1"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def default_document():
    text = resources.files("rgw").joinpath("data/default.json").read_text()
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class WorkbenchConfig:
    doc: dict

    @property
    def lattice(self):
        return self.doc["lattice"]

    @property
    def physics(self):
        return self.doc["physics"]

    @property
    def seed(self):
        return int(self.doc["seeds"]["base"])

    def params(self, **over):
        ph = dict(self.physics, **over)
        return ModelParams(e=ph["e"], m=ph["m"], mu=ph["mu"], a=ph["a"], L=self.lattice["L"],
                           N=ph["N"], M=ph["M"], wilson_r=ph["r_wilson"])

    def scales(self):
        lt = self.lattice
        return Scales(lt["M0"], lt["M1"], lt["R0"])

    def tol(self, check_id):
        return float(self.doc["thresholds"]["tolerances"][check_id])

    @property
    def roughness(self):
        return float(self.doc["thresholds"]["smallness"])

    def with_seed(self, seed):
        doc = copy.deepcopy(self.doc)
        doc["seeds"]["base"] = int(seed)
        return WorkbenchConfig(doc)


def validate(doc):
    """Every violated constraint of the document, as a list of messages."""
    problems = []
    if doc.get("schema") != SCHEMA:
        problems.append(f"schema must be {SCHEMA!r}, got {doc.get('schema')!r}")
    for block in ("lattice", "physics", "thresholds", "seeds"):
        if not isinstance(doc.get(block), dict):
            problems.append(f"missing block {block!r}")
    if problems:
        return problems
    lt, ph = doc["lattice"], doc["physics"]
    need = {"lattice": ("side", "L", "M0", "M1", "R0", "walk_side", "walk_M0", "r_loc"),
            "physics": ("e", "m", "mu", "a", "r_wilson", "N", "M")}
    for block, keys in need.items():
        for k in keys:
            if k not in doc[block]:
                problems.append(f"{block}.{k} missing")
    if "base" not in doc["seeds"]:
        problems.append("seeds.base missing")
    if "smallness" not in doc["thresholds"] or "tolerances" not in doc["thresholds"]:
        problems.append("thresholds need 'smallness' and 'tolerances'")
    if problems:
        return problems
    L = lt["L"]
    if not isinstance(L, int) or L < 1 or L % 2 == 0:
        problems.append(f"lattice.L={L} must be a positive odd integer")
        return problems
    for key in ("side", "walk_side"):
        if lt[key] <= 0 or lt[key] % L:
            problems.append(f"lattice.{key}={lt[key]} must be a positive multiple of L={L}")
    problems += [f"lattice: {p}" for p in validate_scales(lt["side"], L, Scales(lt["M0"], lt["M1"], lt["R0"]))]
    if lt["walk_M0"] % 2 == 0 or lt["walk_side"] % lt["walk_M0"]:
        problems.append(f"lattice.walk_M0={lt['walk_M0']} must be odd and divide walk_side")
    if lt["r_loc"] <= 0:
        problems.append("lattice.r_loc must be positive")
    if not 0 < ph["e"] * float(L) ** (-ph["N"] / 2) < 1:
        problems.append("physics: need 0 < e0 < 1")
    if ph["mu"] <= 0:
        problems.append("physics.mu must be positive")
    if ph["a"] <= 0:
        problems.append("physics.a must be positive")
    if ph["N"] < 0 or ph["M"] < 0:
        problems.append("physics.N and physics.M must be non-negative")
    if not 0 < doc["thresholds"]["smallness"] < 1:
        problems.append("thresholds.smallness must lie in (0, 1)")
    for k, v in doc["thresholds"]["tolerances"].items():
        if not isinstance(v, (int, float)) or v < 0:
            problems.append(f"thresholds.tolerances.{k} must be a non-negative number")
    return problems


def load_config(path=None, overrides=None):
    """Load ``path`` over the shipped defaults; raise ``ConfigError`` listing all problems."""
    doc = default_document()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError([f"config file {path} not found"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
        if not isinstance(user, dict):
            raise ConfigError(["config must be a JSON object"])
        doc = _merge(doc, user)
    if overrides:
        doc = _merge(doc, overrides)
    problems = validate(doc)
    if problems:
        raise ConfigError(problems)
    return WorkbenchConfig(doc)
