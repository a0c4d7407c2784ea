"""YAML experiment configurations and their translation into problems.

Schema (keys not listed are rejected)::

    name: str
    problem: lq-abstract | parabolic-1d | parabolic-2d
    mode: deterministic | tree
    time: {horizon: float > 0, steps: int >= 1}
    seed: int                                   # default 0
    control: optimal | zero                     # default optimal
    coefficients: {...}                         # see below
    dim, control_dim: int                       # lq-abstract only
    perturbation: float                         # lq-abstract: l += c log(1 + |y|^2)
    coercivity_lambda: float                    # lq-abstract, default 1
    mesh: {n: int >= 2}                         # parabolic only
    bounds: {kappa: float, K: float}            # parabolic only
    continuation: {step_delta, picard_tol, max_picard}
    checks: [assumptions, optimality, contraction, duality, oracle, convergence]
    reference: {kind: closed_form, c, tol_y0, tol_cost, tol_u}
             | {kind: heat_decay, max_l2_error}
    optimality: {directions: int, eps: float, suboptimal: int}
    sweep: {parameter: steps | mesh, levels: [int], expected_order, order_tolerance}

Coefficients are numbers, expression strings (see :mod:`bsee_control.expr`)
or nested lists of those for matrix/vector data. LQ keys: A B D G xi M Q N h
(scalars are multiples of the identity). Parabolic keys: a b c nu g xi.
"""

import copy
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from . import expr as _expr
from .continuation import ContinuationConfig
from .gelfand import Field
from .lq import as_field, lq_problem
from .parabolic import Coefficient, ParabolicProblem, assemble
from .lattice import TimeGrid

KINDS = ("lq-abstract", "parabolic-1d", "parabolic-2d")
MODES = ("deterministic", "tree")
SUITES = ("assumptions", "optimality", "contraction", "duality", "oracle", "convergence")
LQ_KEYS = ("A", "B", "D", "G", "xi", "M", "Q", "N", "h")
PARABOLIC_KEYS = ("a", "b", "c", "nu", "g", "xi")
TOP_KEYS = {"name", "problem", "mode", "time", "seed", "control", "coefficients", "dim",
            "control_dim", "perturbation", "coercivity_lambda", "mesh", "bounds", "continuation",
            "checks", "reference", "optimality", "sweep"}


class ConfigError(ValueError):
    pass


def _line_map(text):
    """Map dotted key paths to 1-based line numbers."""
    out = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                out[p] = k.start_mark.line + 1
                walk(v, p)

    try:
        walk(yaml.compose(text, Loader=yaml.SafeLoader), "")
    except yaml.YAMLError:
        pass
    return out


@dataclass
class ExperimentConfig:
    name: str
    problem: str
    mode: str
    horizon: float
    steps: int
    seed: int = 0
    control: str = "optimal"
    coefficients: dict = field(default_factory=dict)
    dim: int = 1
    control_dim: int = None
    perturbation: float = 0.0
    coercivity_lambda: float = 1.0
    mesh_n: int = None
    kappa: float = 1.0
    K: float = 1.0
    continuation: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    reference: dict = None
    optimality: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    source: str = ""

    def as_dict(self):
        d = {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__ if k != "source"}
        return d

    def continuation_config(self):
        c = self.continuation
        return ContinuationConfig(step_delta=c.get("step_delta"),
                                  picard_tol=float(c.get("picard_tol", 1e-9)),
                                  max_picard=int(c.get("max_picard", 200)), seed=self.seed)

    def with_overrides(self, **kw):
        new = copy.deepcopy(self)
        for k, v in kw.items():
            if v is not None:
                setattr(new, k, v)
        return new


def shipped_configs():
    base = resources.files("bsee_control") / "configs"
    return sorted(p.name[:-5] for p in base.iterdir() if p.name.endswith(".yaml"))


def resolve(path_or_name):
    """A file path, or the name of a shipped config."""
    if os.path.exists(path_or_name):
        return str(path_or_name)
    name = os.path.basename(path_or_name)
    name = name[:-5] if name.endswith(".yaml") else name
    cand = resources.files("bsee_control") / "configs" / f"{name}.yaml"
    if cand.is_file():
        return str(cand)
    raise ConfigError(f"no config file or shipped config named {path_or_name!r} "
                      f"(shipped: {', '.join(shipped_configs())})")


def load(path_or_name):
    path = resolve(path_or_name)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return loads(text, source=path)


def loads(text, source="<string>"):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{source}:{where} YAML parse error: {getattr(exc, 'problem', exc)}") from None
    lines = _line_map(text)

    def fail(key, msg):
        ln = lines.get(key)
        raise ConfigError(f"{source}:{' line ' + str(ln) if ln else ''} field '{key}': {msg}")

    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    for k in raw:
        if k not in TOP_KEYS:
            fail(k, "unknown field")

    def get(key, kind, default=None, required=False):
        node = raw
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                if required:
                    fail(key, "missing")
                return default
            node = node[part]
        if kind is not None:
            ok = isinstance(node, kind) and not (kind in (int, (int, float)) and isinstance(node, bool))
            if not ok:
                fail(key, f"expected {getattr(kind, '__name__', 'number')}, got {node!r}")
        return node

    num = (int, float)
    cfg = ExperimentConfig(
        name=get("name", str, "experiment"),
        problem=get("problem", str, required=True),
        mode=get("mode", str, "deterministic"),
        horizon=float(get("time.horizon", num, required=True)),
        steps=get("time.steps", int, required=True),
        seed=get("seed", int, 0),
        control=get("control", str, "optimal"),
        coefficients=dict(get("coefficients", dict, {}) or {}),
        dim=get("dim", int, 1),
        control_dim=get("control_dim", int, None),
        perturbation=float(get("perturbation", num, 0.0)),
        coercivity_lambda=float(get("coercivity_lambda", num, 1.0)),
        mesh_n=get("mesh.n", int, None),
        kappa=float(get("bounds.kappa", num, 1.0)),
        K=float(get("bounds.K", num, 1.0)),
        continuation=dict(get("continuation", dict, {}) or {}),
        checks=list(get("checks", list, list(SUITES))),
        reference=get("reference", dict, None),
        optimality=dict(get("optimality", dict, {}) or {}),
        sweep=dict(get("sweep", dict, {}) or {}),
        source=source,
    )
    if cfg.problem not in KINDS:
        fail("problem", f"must be one of {', '.join(KINDS)}")
    if cfg.mode not in MODES:
        fail("mode", f"must be one of {', '.join(MODES)}")
    if cfg.control not in ("optimal", "zero"):
        fail("control", "must be 'optimal' or 'zero'")
    if cfg.horizon <= 0:
        fail("time.horizon", "must be positive")
    if cfg.steps < 1:
        fail("time.steps", "must be >= 1")
    for s in cfg.checks:
        if s not in SUITES:
            fail("checks", f"unknown suite {s!r} (known: {', '.join(SUITES)})")
    for k in cfg.continuation:
        if k not in ("step_delta", "picard_tol", "max_picard"):
            fail(f"continuation.{k}", "unknown field")
    keys = LQ_KEYS if cfg.problem == "lq-abstract" else PARABOLIC_KEYS
    for k, v in cfg.coefficients.items():
        if k not in keys:
            fail(f"coefficients.{k}", f"unknown coefficient (allowed: {' '.join(keys)})")
        try:
            _parse_tree(v)
        except _expr.ExprError as exc:
            fail(f"coefficients.{k}", str(exc))
    if cfg.problem != "lq-abstract":
        if cfg.mesh_n is None:
            fail("mesh.n", "missing")
        if cfg.mesh_n < 2:
            fail("mesh.n", "must be >= 2")
    ref = cfg.reference
    if ref is not None and ref.get("kind") not in ("closed_form", "heat_decay"):
        fail("reference.kind", "must be closed_form or heat_decay")
    return cfg


def _parse_tree(v):
    if isinstance(v, list):
        return [_parse_tree(e) for e in v]
    return _expr.parse(v)


# problem construction ------------------------------------------------------------

def _lq_field(value, shape, key):
    tree = _parse_tree(value)
    flat = np.array(tree, dtype=object)
    exprs = [e for e in flat.ravel() if isinstance(e, _expr.Expr)]
    if any(e.uses_space for e in exprs):
        raise ConfigError(f"coefficients.{key}: lq-abstract data cannot depend on x")
    if not exprs:
        return as_field(np.array(tree, dtype=float), shape)

    def evaluate(t, W):
        W = np.atleast_1d(np.asarray(W, dtype=float))
        vals = [np.broadcast_to(e(t=t, W=W) if isinstance(e, _expr.Expr) else e, W.shape)
                for e in flat.ravel()]
        arr = np.stack(vals, axis=-1).reshape(W.shape + flat.shape)
        if flat.ndim == 0 and len(shape) == 2:
            arr = arr[..., None, None] * np.eye(shape[0])
        elif flat.ndim == 0:
            arr = np.broadcast_to(arr[..., None], W.shape + shape)
        return arr

    if any(e.uses_path for e in exprs):
        return Field.of_path(evaluate, shape)
    if any(e.uses_time for e in exprs):
        return Field.of_time(lambda t: evaluate(t, 0.0)[0], shape)
    return Field.constant(evaluate(0.0, 0.0)[0])


def _parabolic_coef(value, d, kind, key):
    """Coefficient(t, W, x) for a scalar ('s'), vector ('v') or matrix ('m') slot."""
    tree = _parse_tree(value)
    flat = np.array(tree, dtype=object)
    exprs = [e for e in flat.ravel() if isinstance(e, _expr.Expr)]
    if d == 1 and any("x2" in e.variables for e in exprs):
        raise ConfigError(f"coefficients.{key}: x2 is not available in 1-D")
    if flat.ndim and kind == "s":
        raise ConfigError(f"coefficients.{key}: expected a scalar")
    if not exprs:
        return np.array(tree, dtype=float)

    def func(t, W, x):
        P = len(x)
        x2 = x[:, 1] if d == 2 else 0.0
        vals = [np.broadcast_to(e(t=t, W=W, x1=x[:, 0], x2=x2) if isinstance(e, _expr.Expr) else e, (P,))
                for e in flat.ravel()]
        return np.stack(vals, axis=-1).reshape((P,) + flat.shape)

    return Coefficient(func, time=any(e.uses_time for e in exprs), path=any(e.uses_path for e in exprs))


def build_problem(cfg, mode=None, steps=None, mesh_n=None, strict=False):
    """ControlProblem for the config (overrides for mode, N and meshN)."""
    mode = mode or cfg.mode
    steps = steps or cfg.steps
    co = cfg.coefficients
    if cfg.problem == "lq-abstract":
        n = cfg.dim
        m = cfg.control_dim or n
        shapes = dict(A=(n, n), B=(n, n), D=(n, m), G=(n,), xi=(n,), M=(n, n), Q=(n, n), N=(m, m))
        defaults = dict(A=0.0, B=0.0, D=1.0, G=0.0, xi=1.0, M=1.0, Q=1.0, N=1.0)
        kw = {k: _lq_field(co.get(k, defaults[k]), shapes[k], k) for k in shapes}
        h = np.array(co.get("h", 1.0), dtype=float)
        return lq_problem(n, m, h=h, horizon=cfg.horizon, steps=steps, mode=mode,
                          perturbation=cfg.perturbation, coercivity_lambda=cfg.coercivity_lambda,
                          name=cfg.name, **kw)
    d = 1 if cfg.problem == "parabolic-1d" else 2
    slots = dict(a="m", b="v", c="s", nu="s", g="s", xi="s")
    kw = {k: _parabolic_coef(co[k], d, slots[k], k) for k in slots if k in co}
    if "xi" not in kw:
        kw["xi"] = Coefficient(lambda t, W, x: np.prod(np.sin(np.pi * x), axis=-1))
    prob = ParabolicProblem(d, mesh_n or cfg.mesh_n, kappa=cfg.kappa, K=cfg.K, **kw)
    return assemble(prob, TimeGrid(cfg.horizon, steps), mode=mode, strict=strict, name=cfg.name)
