"""Configuration files, desk-scale scenario builders, output writers and the CLI.

A scenario is a mesh file plus a TOML configuration.  Boundary values are
arithmetic expressions over ``x, y, z, t`` and the names in ``[params]``;
see :class:`Expression` for the grammar.
"""

from __future__ import annotations

import ast
import csv
import io
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import click
import numpy as np
import tomli
import tomli_w
from numpy.typing import NDArray

from .constitutive import (
    LinearMaterial,
    MagnetoHyperelasticMaterial,
    MaterialError,
    axes_to_rotation,
    epoxy,
    isotropic_voigt,
    piezo_d_to_T,
    pzt5h,
    rotate_material,
    voigt_to_full,
)
from .coupling import CoupledState, CouplingError, run, solve_static
from .em_solver import EMState, PotentialBC, recover_EB
from .fem_core import NewtonError, SingularMatrixError
from .mesh import Mesh, MeshError, add_region_facets, box_mesh, extract_submesh, load_mesh, rectangle_mesh, save_mesh
from .tm_solver import NodalBC, TMState, Traction

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key path of the offending entry."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# --------------------------------------------------------------------------
# Expressions

_FUNCS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
}
_CONSTANTS = {"pi": math.pi}
_VARIABLES = ("x", "y", "z", "t")
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class Expression:
    """Arithmetic expression evaluated on arrays of points.

    Grammar: numbers, the variables ``x y z t``, the constant ``pi``, names
    from ``params``, binary ``+ - * / **``, unary ``+ -``, parentheses and
    calls of ``sin cos tan exp log sqrt tanh abs`` with one argument.
    Anything else is rejected when the expression is built.
    """

    def __init__(self, source: str | float | int, params: dict[str, float] | None = None, path: str = ""):
        self.source = source if isinstance(source, str) else repr(float(source))
        self.params = dict(params or {})
        self.path = path
        try:
            tree = ast.parse(self.source.strip(), mode="eval")
        except SyntaxError as exc:
            raise ConfigError(path, f"cannot parse expression {self.source!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node: ast.AST) -> None:
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ConfigError(self.path, f"only numeric literals are allowed, got {node.value!r}")
        elif isinstance(node, ast.Name):
            if node.id not in _VARIABLES and node.id not in _CONSTANTS and node.id not in self.params:
                raise ConfigError(self.path, f"unknown name '{node.id}' in expression {self.source!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ConfigError(self.path, f"operator {type(node.op).__name__} is not allowed")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ConfigError(self.path, f"operator {type(node.op).__name__} is not allowed")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                raise ConfigError(self.path, f"unknown function in expression {self.source!r}")
            if len(node.args) != 1 or node.keywords:
                raise ConfigError(self.path, f"function '{node.func.id}' takes exactly one argument")
            self._check(node.args[0])
        else:
            raise ConfigError(self.path, f"construct {type(node).__name__} is not allowed in expressions")

    def _eval(self, node: ast.AST, env: dict) -> Any:
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else val
        return _FUNCS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, x: NDArray[np.float64], t: float) -> NDArray[np.float64]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        env = dict(_CONSTANTS)
        env.update(self.params)
        for k, name in enumerate(("x", "y", "z")):
            env[name] = x[:, k] if k < x.shape[1] else np.zeros(n)
        env["t"] = float(t)
        with np.errstate(all="ignore"):
            val = np.asarray(self._eval(self._tree, env), dtype=np.float64)
        return np.broadcast_to(val, (n,)).copy()

    def is_constant(self) -> bool:
        return not any(isinstance(n, ast.Name) and n.id in _VARIABLES for n in ast.walk(self._tree))

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"


class VectorExpression:
    """Three expressions evaluated together, giving ``(n, 3)``."""

    def __init__(self, sources, params=None, path: str = ""):
        if len(sources) != 3:
            raise ConfigError(path, "needs exactly three components")
        self.parts = [Expression(s, params, f"{path}[{k}]") for k, s in enumerate(sources)]

    def __call__(self, x, t):
        return np.column_stack([p(x, t) for p in self.parts])


# --------------------------------------------------------------------------
# Configuration


@dataclass
class TimeConfig:
    dt: float
    t_max: float
    preload: bool = False
    sub_iterations: int = 1
    ramp_steps: int = 10


@dataclass
class BodyConfig:
    regions: list[int]
    mode: str = "tm"
    motion: list[str] | None = None
    body_force: list[str] = field(default_factory=lambda: ["0", "0", "0"])
    heat_source: str = "0"
    include_em: bool = True


@dataclass
class MaterialConfig:
    kind: str
    poling: list[float] | None = None
    values: dict[str, Any] = field(default_factory=dict)


@dataclass
class PotentialConfig:
    marker: int
    value: str


@dataclass
class DisplacementConfig:
    marker: int
    component: int
    value: str


@dataclass
class TemperatureConfig:
    marker: int
    value: str


@dataclass
class TractionConfig:
    marker: int
    value: list[str]


@dataclass
class ProbeConfig:
    name: str
    point: list[float]
    quantities: list[str]


@dataclass
class OutputConfig:
    csv: str = "results.csv"
    vtk_every: int = 0


@dataclass
class ScenarioConfig:
    """Everything needed to set up and run a scenario (SI units)."""

    name: str
    mesh: str
    time: TimeConfig
    body: BodyConfig | None = None
    params: dict[str, float] = field(default_factory=dict)
    materials: dict[int, MaterialConfig] = field(default_factory=dict)
    potential: list[PotentialConfig] = field(default_factory=list)
    vector_potential: list[str] | None = None
    displacement: list[DisplacementConfig] = field(default_factory=list)
    temperature: list[TemperatureConfig] = field(default_factory=list)
    traction: list[TractionConfig] = field(default_factory=list)
    probe: list[ProbeConfig] = field(default_factory=list)
    output: OutputConfig = field(default_factory=OutputConfig)


MATERIAL_KINDS = ("pzt5h", "epoxy", "linear", "magnetohyperelastic")
_LINEAR_SCALARS = ("rho0", "c_heat", "kappa", "sigma_el", "peltier", "h_conv", "T_ref")
_MATERIAL_KEYS = {
    "pzt5h": _LINEAR_SCALARS,
    "epoxy": _LINEAR_SCALARS,
    "linear": _LINEAR_SCALARS + ("E", "nu", "alpha", "chi_el", "d"),
    "magnetohyperelastic": ("mu_shear", "B_s", "alpha_tilde", "n", "q_coef", "r_coef", "kappa_vol", "rho0"),
}
_QUANTITIES = {"u": 3, "v": 3, "T": 1, "phi": 1, "A": 3, "E": 3, "B": 3}
_COMPONENTS = {"x": 0, "y": 1, "z": 2}


class _Reader:
    """Typed access to one TOML table with unknown keys rejected."""

    def __init__(self, table: Any, path: str):
        if not isinstance(table, dict):
            raise ConfigError(path, "expected a table")
        self.table = table
        self.path = path
        self.used: set[str] = set()

    def _key(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind: str, default: Any = ..., *, length: int | None = None):
        self.used.add(key)
        if key not in self.table:
            if default is ...:
                raise ConfigError(self._key(key), "missing required key")
            return default
        return _convert(self.table[key], kind, self._key(key), length)

    def finish(self) -> None:
        extra = sorted(set(self.table) - self.used)
        if extra:
            raise ConfigError(self._key(extra[0]), "unknown key")


def _convert(val: Any, kind: str, path: str, length: int | None = None) -> Any:
    if kind == "float":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(path, f"expected a number, got {val!r}")
        return float(val)
    if kind == "int":
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(path, f"expected an integer, got {val!r}")
        return int(val)
    if kind == "bool":
        if not isinstance(val, bool):
            raise ConfigError(path, f"expected true or false, got {val!r}")
        return val
    if kind == "str":
        if not isinstance(val, str):
            raise ConfigError(path, f"expected a string, got {val!r}")
        return val
    if kind == "expr":
        if isinstance(val, bool) or not isinstance(val, (str, int, float)):
            raise ConfigError(path, f"expected an expression, got {val!r}")
        return val if isinstance(val, str) else repr(float(val))
    if kind.startswith("list:"):
        if not isinstance(val, list):
            raise ConfigError(path, f"expected an array, got {val!r}")
        if length is not None and len(val) != length:
            raise ConfigError(path, f"expected {length} entries, got {len(val)}")
        sub = kind[5:]
        return [_convert(v, sub, f"{path}[{k}]") for k, v in enumerate(val)]
    raise AssertionError(kind)


def _component(val: Any, path: str) -> int:
    if isinstance(val, str) and val in _COMPONENTS:
        return _COMPONENTS[val]
    if isinstance(val, int) and not isinstance(val, bool) and 0 <= val <= 2:
        return int(val)
    raise ConfigError(path, f"component must be 0, 1, 2 or x, y, z, got {val!r}")


def _material_value(val: Any, key: str, path: str) -> Any:
    if key == "d":
        rows = _convert(val, "list:list:float", path, 3)
        if any(len(r) != 6 for r in rows):
            raise ConfigError(path, "piezoelectric d needs 3 rows of 6 entries")
        return rows
    return _convert(val, "float", path)


def config_from_dict(data: dict) -> ScenarioConfig:
    """Validate a parsed TOML document and build the configuration."""
    top = _Reader(data, "")
    sc = _Reader(_section(data, "scenario"), "scenario")
    top.used.add("scenario")
    name = sc.get("name", "str")
    sc.finish()

    msh = _Reader(_section(data, "mesh"), "mesh")
    top.used.add("mesh")
    mesh_path = msh.get("path", "str")
    msh.finish()

    tr = _Reader(_section(data, "time"), "time")
    top.used.add("time")
    time = TimeConfig(
        dt=tr.get("dt", "float"),
        t_max=tr.get("t_max", "float"),
        preload=tr.get("preload", "bool", False),
        sub_iterations=tr.get("sub_iterations", "int", 1),
        ramp_steps=tr.get("ramp_steps", "int", 10),
    )
    tr.finish()
    if time.dt <= 0:
        raise ConfigError("time.dt", "must be positive")
    if time.t_max < 0:
        raise ConfigError("time.t_max", "must be nonnegative")
    if time.sub_iterations < 1 or time.ramp_steps < 1:
        raise ConfigError("time", "sub_iterations and ramp_steps must be at least 1")

    params: dict[str, float] = {}
    if "params" in data:
        top.used.add("params")
        pr = _Reader(data["params"], "params")
        for key in list(pr.table):
            if key in _VARIABLES or key in _CONSTANTS or key in _FUNCS or not key.isidentifier():
                raise ConfigError(f"params.{key}", "name is reserved or not an identifier")
            params[key] = pr.get(key, "float")
        pr.finish()

    materials: dict[int, MaterialConfig] = {}
    if "materials" in data:
        top.used.add("materials")
        if not isinstance(data["materials"], dict):
            raise ConfigError("materials", "expected a table")
        for key, tab in data["materials"].items():
            path = f"materials.{key}"
            try:
                region = int(key)
            except ValueError:
                raise ConfigError(path, "material tables are keyed by integer region markers") from None
            mr = _Reader(tab, path)
            kind = mr.get("kind", "str")
            if kind not in MATERIAL_KINDS:
                raise ConfigError(f"{path}.kind", f"unknown material kind '{kind}'")
            poling = None
            if kind != "magnetohyperelastic":
                poling = mr.get("poling", "list:float", None, length=3)
            values = {}
            for k in sorted(mr.table):
                if k in ("kind", "poling"):
                    continue
                if k not in _MATERIAL_KEYS[kind]:
                    raise ConfigError(f"{path}.{k}", f"unknown key for material kind '{kind}'")
                mr.used.add(k)
                values[k] = _material_value(mr.table[k], k, f"{path}.{k}")
            if kind == "linear":
                for need in ("rho0", "E", "nu"):
                    if need not in values:
                        raise ConfigError(f"{path}.{need}", "missing required key")
            mr.finish()
            materials[region] = MaterialConfig(kind, poling, values)

    body = None
    if "body" in data:
        top.used.add("body")
        br = _Reader(data["body"], "body")
        body = BodyConfig(
            regions=br.get("regions", "list:int"),
            mode=br.get("mode", "str", "tm"),
            motion=br.get("motion", "list:expr", None, length=3),
            body_force=br.get("body_force", "list:expr", ["0", "0", "0"], length=3),
            heat_source=br.get("heat_source", "expr", "0"),
            include_em=br.get("include_em", "bool", True),
        )
        br.finish()
        if body.mode not in ("tm", "motion", "rest"):
            raise ConfigError("body.mode", f"must be tm, motion or rest, got '{body.mode}'")
        if body.mode == "motion" and body.motion is None:
            raise ConfigError("body.motion", "required when mode is 'motion'")
        if not body.regions:
            raise ConfigError("body.regions", "needs at least one region")

    def table_list(key: str) -> list[_Reader]:
        if key not in data:
            return []
        top.used.add(key)
        val = data[key]
        if not isinstance(val, list):
            raise ConfigError(key, "expected an array of tables ([[" + key + "]])")
        return [_Reader(v, f"{key}[{k}]") for k, v in enumerate(val)]

    potential = []
    for r in table_list("potential"):
        potential.append(PotentialConfig(r.get("marker", "int"), r.get("value", "expr")))
        r.finish()
    vector_potential = None
    if "vector_potential" in data:
        top.used.add("vector_potential")
        vr = _Reader(data["vector_potential"], "vector_potential")
        vector_potential = vr.get("value", "list:expr", length=3)
        vr.finish()
    displacement = []
    for r in table_list("displacement"):
        r.used.add("component")
        if "component" not in r.table:
            raise ConfigError(f"{r.path}.component", "missing required key")
        comp = _component(r.table["component"], f"{r.path}.component")
        displacement.append(DisplacementConfig(r.get("marker", "int"), comp, r.get("value", "expr")))
        r.finish()
    temperature = []
    for r in table_list("temperature"):
        temperature.append(TemperatureConfig(r.get("marker", "int"), r.get("value", "expr")))
        r.finish()
    traction = []
    for r in table_list("traction"):
        traction.append(TractionConfig(r.get("marker", "int"), r.get("value", "list:expr", length=3)))
        r.finish()
    probe = []
    for r in table_list("probe"):
        p = ProbeConfig(r.get("name", "str"), r.get("point", "list:float"), r.get("quantities", "list:str"))
        r.finish()
        if not p.name.isidentifier():
            raise ConfigError(f"{r.path}.name", f"probe name must be an identifier, got '{p.name}'")
        for q in p.quantities:
            if q not in _QUANTITIES:
                raise ConfigError(f"{r.path}.quantities", f"unknown quantity '{q}'")
        probe.append(p)
    names = [p.name for p in probe]
    if len(set(names)) != len(names):
        raise ConfigError("probe", "probe names must be unique")

    output = OutputConfig()
    if "output" in data:
        top.used.add("output")
        orr = _Reader(data["output"], "output")
        output = OutputConfig(orr.get("csv", "str", "results.csv"), orr.get("vtk_every", "int", 0))
        orr.finish()
    top.finish()

    cfg = ScenarioConfig(name, mesh_path, time, body, params, materials, potential, vector_potential,
                         displacement, temperature, traction, probe, output)
    _check_expressions(cfg)
    return cfg


def _section(data: dict, key: str) -> Any:
    if key not in data:
        raise ConfigError(key, "missing required section")
    return data[key]


def _check_expressions(cfg: ScenarioConfig) -> None:
    p = cfg.params
    for k, item in enumerate(cfg.potential):
        Expression(item.value, p, f"potential[{k}].value")
    if cfg.vector_potential is not None:
        VectorExpression(cfg.vector_potential, p, "vector_potential.value")
    for k, item in enumerate(cfg.displacement):
        Expression(item.value, p, f"displacement[{k}].value")
    for k, item in enumerate(cfg.temperature):
        Expression(item.value, p, f"temperature[{k}].value")
    for k, item in enumerate(cfg.traction):
        VectorExpression(item.value, p, f"traction[{k}].value")
    if cfg.body is not None:
        VectorExpression(cfg.body.body_force, p, "body.body_force")
        Expression(cfg.body.heat_source, p, "body.heat_source")
        if cfg.body.motion is not None:
            VectorExpression(cfg.body.motion, p, "body.motion")


def parse_config(path: str | Path) -> ScenarioConfig:
    """Read and validate a TOML scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from None
    return parse_config_text(text)


def parse_config_text(text: str) -> ScenarioConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("", f"TOML syntax error: {exc}") from None
    return config_from_dict(data)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out: dict[str, Any] = {"scenario": {"name": cfg.name}, "mesh": {"path": cfg.mesh}, "time": asdict(cfg.time)}
    if cfg.params:
        out["params"] = dict(cfg.params)
    if cfg.body is not None:
        b = asdict(cfg.body)
        if b["motion"] is None:
            del b["motion"]
        out["body"] = b
    if cfg.materials:
        mats = {}
        for region in sorted(cfg.materials):
            m = cfg.materials[region]
            tab: dict[str, Any] = {"kind": m.kind}
            if m.poling is not None:
                tab["poling"] = list(m.poling)
            tab.update(m.values)
            mats[str(region)] = tab
        out["materials"] = mats
    for key in ("potential", "displacement", "temperature", "traction", "probe"):
        items = getattr(cfg, key)
        if items:
            out[key] = [asdict(i) for i in items]
    if cfg.vector_potential is not None:
        out["vector_potential"] = {"value": list(cfg.vector_potential)}
    out["output"] = asdict(cfg.output)
    return out


def serialize_config(cfg: ScenarioConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


# --------------------------------------------------------------------------
# Materials


def build_material(mc: MaterialConfig):
    """Material object for one region block."""
    v = dict(mc.values)
    try:
        if mc.kind == "magnetohyperelastic":
            return MagnetoHyperelasticMaterial(**v)
        scalars = {k: v.pop(k) for k in _LINEAR_SCALARS if k in v}
        if mc.kind == "pzt5h":
            mat = pzt5h()
        elif mc.kind == "epoxy":
            mat = epoxy()
        else:
            C = voigt_to_full(isotropic_voigt(v.pop("E"), v.pop("nu")))
            d = np.asarray(v.pop("d", np.zeros((3, 6))), dtype=np.float64)
            chi = v.pop("chi_el", 0.0)
            mat = LinearMaterial(rho0=scalars.pop("rho0"), C=C, C_symmetric=True,
                                 alpha=v.pop("alpha", 0.0) * np.eye(3), Ttilde=piezo_d_to_T(C, d),
                                 chi_el=chi * np.eye(3))
        for k, val in scalars.items():
            setattr(mat, k, val)
        mat.__post_init__()
        if mc.poling is not None:
            mat = rotate_material(mat, axes_to_rotation(mc.poling))
        return mat
    except (TypeError, MaterialError) as exc:
        raise ConfigError("materials", f"invalid {mc.kind} parameters: {exc}") from None


# --------------------------------------------------------------------------
# Setup and running


@dataclass
class Probe:
    name: str
    quantity: str
    node: int
    body: bool

    @property
    def columns(self) -> list[str]:
        n = _QUANTITIES[self.quantity]
        if n == 1:
            return [f"{self.quantity}_{self.name}"]
        return [f"{self.quantity}_{self.name}_{c}" for c in "xyz"]


@dataclass
class Simulation:
    config: ScenarioConfig
    mesh: Mesh
    state: CoupledState
    probes: list[Probe]

    @property
    def columns(self) -> list[str]:
        return ["t"] + [c for p in self.probes for c in p.columns]


def _facet_nodes(mesh: Mesh, marker: int) -> NDArray[np.int64]:
    return np.unique(mesh.facets[mesh.facet_marker == marker])


def setup(cfg: ScenarioConfig, mesh: Mesh | None = None, base_dir: str | Path = ".") -> Simulation:
    """Build the coupled state described by ``cfg``.

    Every referenced region and facet marker must exist.  Probes attach to
    the nearest node at setup (a body node for ``u``, ``v`` and ``T``).
    """
    if mesh is None:
        try:
            mesh = load_mesh(Path(base_dir) / cfg.mesh)
        except (OSError, MeshError) as exc:
            raise ConfigError("mesh.path", str(exc)) from None
    p = cfg.params
    regions = set(np.unique(mesh.cell_region).tolist())
    facet_markers = set(np.unique(mesh.facet_marker).tolist())
    for region in cfg.materials:
        if region not in regions:
            raise ConfigError(f"materials.{region}", f"region {region} does not exist in the mesh")
    for k, item in enumerate(cfg.potential):
        if item.marker not in facet_markers:
            raise ConfigError(f"potential[{k}].marker", f"facet marker {item.marker} does not exist in the mesh")

    submap = None
    materials = {}
    if cfg.body is not None:
        for r in cfg.body.regions:
            if r not in regions:
                raise ConfigError("body.regions", f"region {r} does not exist in the mesh")
            if r not in cfg.materials:
                raise ConfigError("body.regions", f"region {r} has no material block")
        materials = {r: build_material(cfg.materials[r]) for r in cfg.body.regions}
        submap = extract_submesh(mesh, cfg.body.regions)
    child_markers = set() if submap is None else set(np.unique(submap.child.facet_marker).tolist())
    for key in ("displacement", "temperature", "traction"):
        for k, item in enumerate(getattr(cfg, key)):
            if submap is None:
                raise ConfigError(f"{key}[{k}]", "needs a [body] section")
            if item.marker not in child_markers:
                raise ConfigError(f"{key}[{k}].marker", f"facet marker {item.marker} does not exist on the body")

    dt = cfg.time.dt
    phi_bcs = [PotentialBC(_facet_nodes(mesh, item.marker), Expression(item.value, p)) for item in cfg.potential]
    A_bnd = None if cfg.vector_potential is None else VectorExpression(cfg.vector_potential, p)
    em = EMState.zeros(mesh, dt, phi_bcs=phi_bcs, A_boundary=A_bnd)

    tm = None
    motion = None
    if submap is not None:
        from .em_solver import BodyState

        em.body = BodyState.at_rest(submap, materials)
        em.__post_init__()
        child = submap.child
        if cfg.body.mode == "tm":
            u_bcs = [NodalBC(_facet_nodes(child, d.marker), d.component, _constant_or_fn(Expression(d.value, p)))
                     for d in cfg.displacement]
            if mesh.dim == 2:
                u_bcs.append(NodalBC(np.arange(child.n_nodes), 2, 0.0))
            T_bcs = [NodalBC(_facet_nodes(child, d.marker), 0, _constant_or_fn(Expression(d.value, p)))
                     for d in cfg.temperature]
            tractions = [Traction(d.marker, VectorExpression(d.value, p)) for d in cfg.traction]
            tm = TMState.at_rest(submap, materials, dt, u_bcs=u_bcs, T_bcs=T_bcs, tractions=tractions,
                                 body_force=_vector_or_fn(VectorExpression(cfg.body.body_force, p)),
                                 heat_source=_constant_or_fn(Expression(cfg.body.heat_source, p)),
                                 include_em=cfg.body.include_em, ramp_steps=cfg.time.ramp_steps)
        elif cfg.body.mode == "motion":
            motion = VectorExpression(cfg.body.motion, p)
    state = CoupledState(em, tm, dt, motion=motion, sub_iterations=cfg.time.sub_iterations)

    probes = []
    ref = mesh.nodes
    for pc in cfg.probe:
        pt = np.zeros(mesh.dim)
        pt[: min(mesh.dim, len(pc.point))] = pc.point[: mesh.dim]
        for q in pc.quantities:
            body_q = q in ("u", "v", "T")
            if body_q:
                if submap is None:
                    raise ConfigError(f"probe.{pc.name}", f"quantity '{q}' needs a body")
                node = int(np.argmin(np.linalg.norm(submap.child.nodes - pt, axis=1)))
            else:
                node = int(np.argmin(np.linalg.norm(ref - pt, axis=1)))
            probes.append(Probe(pc.name, q, node, body_q))
    return Simulation(cfg, mesh, state, probes)


def _constant_or_fn(expr: Expression):
    if expr.is_constant():
        return float(expr(np.zeros((1, 3)), 0.0)[0])
    return expr


def _vector_or_fn(expr: VectorExpression):
    if all(part.is_constant() for part in expr.parts):
        return expr(np.zeros((1, 3)), 0.0)[0]
    return expr


def nodal_fields(state: CoupledState) -> dict[str, NDArray[np.float64]]:
    """Point data on the full mesh: ``u, v, T, phi, A, E, B``."""
    em = state.em
    mesh = em.mesh
    n = mesh.n_nodes
    out = {"u": np.zeros((n, 3)), "v": np.zeros((n, 3)), "T": np.zeros(n)}
    submap = state.submap
    if submap is not None:
        pn = submap.parent_node_of_child
        if state.body_u is not None:
            out["u"][pn] = state.body_u
        out["v"] = em.v.copy()
        out["T"] = np.array(em.body.T, dtype=np.float64, copy=True)
        if state.tm is not None and state.tm.thermal:
            out["T"][pn] = state.tm.T.nodal()[:, 0]
    out["phi"] = em.phi.nodal()[:, 0].copy()
    out["A"] = em.A.nodal().copy()
    E, B = recover_EB(em.phi, em.A, em.A.coeffs0, em.dt)
    out["E"] = E.nodal().copy()
    out["B"] = B.nodal().copy()
    return out


def observe(sim: Simulation) -> dict[str, float]:
    state = sim.state
    row: dict[str, float] = {}
    em = state.em
    E = B = None
    for pr in sim.probes:
        if pr.body:
            if pr.quantity == "u":
                val = state.body_u[pr.node] if state.body_u is not None else np.zeros(3)
            elif pr.quantity == "v":
                val = em.v[state.submap.parent_node_of_child[pr.node]]
            else:
                if state.tm is not None and state.tm.thermal:
                    val = state.tm.T.nodal()[pr.node, 0]
                else:
                    val = em.body.T[state.submap.parent_node_of_child[pr.node]]
        elif pr.quantity == "phi":
            val = em.phi.coeffs[pr.node]
        elif pr.quantity == "A":
            val = em.A.nodal()[pr.node]
        else:
            if E is None:
                # histories are already rotated after a step, so use the stored rate slot
                Ef, Bf = recover_EB(em.phi, em.A, em.A.coeffs00, em.dt)
                E, B = Ef.nodal(), Bf.nodal()
            val = (E if pr.quantity == "E" else B)[pr.node]
        vals = np.atleast_1d(np.asarray(val, dtype=np.float64))
        for col, v in zip(pr.columns, vals):
            row[col] = float(v)
    return row


def run_simulation(sim: Simulation, steps: int | None = None, static: bool = False,
                   on_step: Callable[[Simulation], None] | None = None) -> list[dict]:
    """Run a configured simulation and return one observation row per step.

    ``static`` solves for static equilibrium at the start time and returns a
    single row.  Otherwise an optional static preload is solved first and
    the time loop runs ``steps`` steps (default: up to ``time.t_max``).
    """
    state = sim.state
    cfg = sim.config
    if static:
        solve_static(state, ramp_steps=cfg.time.ramp_steps)
        row = {"t": state.t}
        row.update(observe(sim))
        return [row]
    if cfg.time.preload:
        solve_static(state, ramp_steps=cfg.time.ramp_steps)
    n = steps if steps is not None else max(0, math.ceil((cfg.time.t_max - state.t) / state.dt - 1e-9))
    rows = []

    def observer(_state):
        if on_step is not None:
            on_step(sim)
        return observe(sim)

    for r in run(state, state.t + n * state.dt, [observer]) if n > 0 else []:
        r.pop("step")
        rows.append(r)
    return rows


# --------------------------------------------------------------------------
# Output


def format_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([repr(float(r[c])) for c in columns])
    return buf.getvalue()


def write_csv(rows: list[dict], path: str | Path, columns: list[str] | None = None) -> None:
    """Observation log; the header is ``t`` then probe columns (header only if empty)."""
    if columns is None:
        columns = ["t"] + sorted({k for r in rows for k in r} - {"t"}) if rows else ["t"]
    Path(path).write_text(format_csv(rows, columns))


_VTK_CELL_TYPE = {2: 5, 3: 10}


def format_vtk(mesh: Mesh, point_data: dict[str, NDArray[np.float64]], title: str = "emsi") -> str:
    """Legacy ASCII unstructured grid with scalar and vector point data."""
    n = mesh.n_nodes
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    pts = np.zeros((n, 3))
    pts[:, : mesh.dim] = mesh.nodes
    lines.append(f"POINTS {n} double")
    lines += [f"{p[0]!r} {p[1]!r} {p[2]!r}" for p in pts.tolist()]
    nv = mesh.cells.shape[1]
    lines.append(f"CELLS {mesh.n_cells} {mesh.n_cells * (nv + 1)}")
    lines += [f"{nv} " + " ".join(str(int(i)) for i in c) for c in mesh.cells]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += [str(_VTK_CELL_TYPE[mesh.dim])] * mesh.n_cells
    lines.append(f"CELL_DATA {mesh.n_cells}")
    lines.append("SCALARS region int 1")
    lines.append("LOOKUP_TABLE default")
    lines += [str(int(r)) for r in mesh.cell_region]
    if point_data:
        lines.append(f"POINT_DATA {n}")
    for name, arr in point_data.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [repr(v) for v in arr.tolist()]
        else:
            lines.append(f"VECTORS {name} double")
            lines += [f"{v[0]!r} {v[1]!r} {v[2]!r}" for v in arr.reshape(n, 3).tolist()]
    return "\n".join(lines) + "\n"


def write_vtk(state: CoupledState, path: str | Path) -> None:
    """Dump the current placement with ``u, T, phi, A, E, B`` as point data."""
    fields = nodal_fields(state)
    data = {k: fields[k] for k in ("u", "T", "phi", "A", "E", "B")}
    Path(path).write_text(format_vtk(state.mesh, data, title=f"t = {state.t!r}"))


# --------------------------------------------------------------------------
# Desk-scale scenarios


def graded_axis(fine: NDArray[np.float64], lo: float, hi: float, growth: float = 1.5) -> NDArray[np.float64]:
    """Extend sorted ``fine`` coordinates to ``[lo, hi]`` with geometrically growing spacing."""
    fine = np.asarray(fine, dtype=np.float64)
    left, right = [], []
    h, x = fine[1] - fine[0], fine[0]
    while True:
        h *= growth
        if x - h <= lo + 0.5 * h:
            break
        x -= h
        left.append(x)
    h, x = fine[-1] - fine[-2], fine[-1]
    while True:
        h *= growth
        if x + h >= hi - 0.5 * h:
            break
        x += h
        right.append(x)
    pts = [lo] + left[::-1] + fine.tolist() + right + [hi]
    return np.array(pts)


def _uniform(a: float, b: float, n: int) -> NDArray[np.float64]:
    return np.linspace(a, b, n + 1)


def _join(*parts) -> NDArray[np.float64]:
    return np.unique(np.round(np.concatenate(parts), 15))


def _box(xs, ys, zs, region_fn, dim: int) -> Mesh:
    if dim == 2:
        return rectangle_mesh(xs, ys, region=lambda c: region_fn(c[:, 0], c[:, 1], None))
    return box_mesh(xs, ys, zs, region=lambda c: region_fn(c[:, 0], c[:, 1], c[:, 2]))


def _mark(mesh: Mesh, regions, rule) -> Mesh:
    return add_region_facets(mesh, regions, lambda c: rule(c[:, 0], c[:, 1], c[:, 2] if c.shape[1] > 2 else None))


def _near(a, b, tol):
    return np.abs(a - b) < tol


FAN_DEFAULTS = {"V": 50e3, "f": 50.0, "Lp": 20e-3, "Lb": 10e-3, "h": 0.5e-3, "w": 5e-3}


def _piezo_fan(refine: int, dim: int, params: dict, waveform: str):
    Lp, Lb, h, w = params["Lp"], params["Lb"], params["h"], params["w"]
    L = Lp + Lb
    nx = 60 * refine if dim == 2 else 6 * refine
    ny = 2 * refine if dim == 2 else 1
    xs = graded_axis(_join(_uniform(0.0, Lp, 2 * nx // 3), _uniform(Lp, L, nx // 3)), -2 * L, 3 * L)
    ys = graded_axis(_uniform(-h, h, 2 * ny), -2 * L, 2 * L)
    zs = graded_axis(_uniform(-w / 2, w / 2, 2), -2 * L, 2 * L) if dim == 3 else None
    tol = 1e-9

    def region(x, y, z):
        inside = (np.abs(y) < h) & (x > 0) & (x < L)
        if z is not None:
            inside &= np.abs(z) < w / 2
        r = np.ones(x.shape, dtype=np.int64)
        r[inside & (x < Lp) & (y > 0)] = 2
        r[inside & (x < Lp) & (y < 0)] = 3
        r[inside & (x > Lp)] = 4
        return r

    mesh = _box(xs, ys, zs, region, dim)

    def facets(x, y, z):
        m = np.zeros(x.shape, dtype=np.int64)
        m[_near(y, h, tol) & (x < Lp)] = 11
        m[_near(y, -h, tol) & (x < Lp)] = 12
        m[_near(x, 0.0, tol)] = 13
        m[_near(x, L, tol)] = 14
        return m

    mesh = _mark(mesh, (2, 3, 4), facets)
    wave = "" if waveform == "dc" else "*sin(2*pi*f*t)"
    cfg = ScenarioConfig(
        name="piezo_fan",
        mesh="mesh.txt",
        time=TimeConfig(dt=1.0 / (20 * params["f"]), t_max=1.0 / params["f"]),
        body=BodyConfig(regions=[2, 3, 4]),
        params=dict(params),
        materials={
            2: MaterialConfig("pzt5h", [0.0, 1.0, 0.0]),
            3: MaterialConfig("pzt5h", [0.0, -1.0, 0.0]),
            4: MaterialConfig("epoxy"),
        },
        potential=[PotentialConfig(11, "V/2" + wave), PotentialConfig(12, "-V/2" + wave)],
        displacement=[DisplacementConfig(13, c, "0") for c in range(dim)],
        probe=[ProbeConfig("tip", [L, 0.0, 0.0], ["u"]), ProbeConfig("gap", [L / 2, 2 * h, 0.0], ["phi", "E"])],
    )
    return mesh, cfg


MRE_DEFAULTS = {"B0": 0.5, "nu": 0.1, "tau": 10e3, "L": 10e-3, "W": 10e-3, "h": 1e-3}


def _mre_plate(refine: int, dim: int, params: dict):
    """Clamped square plate; the plane variant is the top view (thickness along z)."""
    L, W, h = params["L"], params["W"], params["h"]
    n = 10 * refine if dim == 2 else 4 * refine
    xs = graded_axis(_uniform(0.0, L, n), -2 * L, 3 * L)
    ys = graded_axis(_uniform(0.0, W, n), -2 * W, 3 * W)
    zs = graded_axis(_uniform(0.0, h, 1), -2 * L, 2 * L) if dim == 3 else None
    tol = 1e-9

    def region(x, y, z):
        inside = (x > 0) & (x < L) & (y > 0) & (y < W)
        if z is not None:
            inside &= (z > 0) & (z < h)
        return np.where(inside, 2, 1)

    mesh = _box(xs, ys, zs, region, dim)

    def facets(x, y, z):
        m = np.zeros(x.shape, dtype=np.int64)
        m[_near(x, 0.0, tol)] = 13
        m[_near(x, L, tol)] = 14
        return m

    mesh = _mark(mesh, 2, facets)
    period = 1.0 / params["nu"]
    # in-plane shear of the free edge; the box variant bends the plate along z
    shear = ["0", "tau", "0"] if dim == 2 else ["0", "0", "tau"]
    cfg = ScenarioConfig(
        name="mre_plate",
        mesh="mesh.txt",
        time=TimeConfig(dt=period / 40, t_max=period, preload=True),
        body=BodyConfig(regions=[2]),
        params=dict(params),
        materials={2: MaterialConfig("magnetohyperelastic")},
        vector_potential=["0", "x*B0*sin(2*pi*nu*t)", "0"],
        displacement=[DisplacementConfig(13, c, "0") for c in range(dim)],
        traction=[TractionConfig(14, shear)],
        probe=[ProbeConfig("tip", [L, W, h], ["u", "B"])],
    )
    return mesh, cfg


BOARD_DEFAULTS = {
    "V": 12.0, "f": 1.0, "W": 10e-3, "t_te": 0.2e-3, "t_board": 0.5e-3, "t_chip": 0.1e-3, "depth": 5e-3,
    "sigma_chip": 1e2, "sigma_te": 10.0, "peltier": 2e-4, "h_top": 1e5,
}


def _thermo_board(refine: int, dim: int, params: dict):
    W, a, b, c, d = params["W"], params["t_te"], params["t_board"], params["t_chip"], params["depth"]
    y1, y2, y3 = a, a + b, a + b + c
    nx = 20 * refine if dim == 2 else 5 * refine
    ys_body = _join(_uniform(0, y1, refine), _uniform(y1, y2, 2 * refine), _uniform(y2, y3, refine))
    xs = graded_axis(_uniform(0.0, W, nx), -W, 2 * W)
    ys = graded_axis(ys_body, -W / 2, W / 2 + y3)
    zs = graded_axis(_uniform(0.0, d, 2), -d, 2 * d) if dim == 3 else None
    tol = 1e-9

    def region(x, y, z):
        inside = (x > 0) & (x < W)
        if z is not None:
            inside &= (z > 0) & (z < d)
        r = np.ones(x.shape, dtype=np.int64)
        r[inside & (y > 0) & (y < y1)] = 2
        r[inside & (y > y1) & (y < y2)] = 3
        r[inside & (y > y2) & (y < y3)] = 4
        return r

    mesh = _box(xs, ys, zs, region, dim)

    def facets(x, y, z):
        m = np.zeros(x.shape, dtype=np.int64)
        m[_near(y, 0.0, tol)] = 23
        m[_near(x, 0.0, tol) & (y > y2)] = 21
        m[_near(x, W, tol) & (y > y2)] = 22
        return m

    mesh = _mark(mesh, (2, 3, 4), facets)
    h_top = params["h_top"]
    cfg = ScenarioConfig(
        name="thermo_board",
        mesh="mesh.txt",
        time=TimeConfig(dt=1.0 / (20 * params["f"]), t_max=1.0 / params["f"]),
        body=BodyConfig(regions=[2, 3, 4]),
        params=dict(params),
        materials={
            2: MaterialConfig("linear", None, {"rho0": 7700.0, "E": 100e9, "nu": 0.3, "alpha": 0.0, "chi_el": 10.0,
                                                "c_heat": 200.0, "kappa": 1.5, "sigma_el": params["sigma_te"],
                                                "peltier": params["peltier"]}),
            3: MaterialConfig("epoxy", None, {"h_conv": h_top}),
            4: MaterialConfig("linear", None, {"rho0": 8900.0, "E": 110e9, "nu": 0.34, "alpha": 0.0, "c_heat": 385.0,
                                                "kappa": 400.0, "sigma_el": params["sigma_chip"], "h_conv": h_top}),
        },
        potential=[PotentialConfig(21, "V*sin(2*pi*f*t)"), PotentialConfig(22, "-V*sin(2*pi*f*t)")],
        displacement=[DisplacementConfig(23, c, "0") for c in range(dim)],
        temperature=[TemperatureConfig(23, "300")],
        probe=[ProbeConfig("sheet_top", [W / 2, y1, d / 2], ["phi", "T"]),
               ProbeConfig("sheet_bottom", [W / 2, 0.0, d / 2], ["phi", "T"]),
               ProbeConfig("chip", [W / 2, y3, d / 2], ["T"])],
    )
    return mesh, cfg


SCENARIOS = ("piezo_fan", "mre_plate", "thermo_board")
_DEFAULTS = {"piezo_fan": FAN_DEFAULTS, "mre_plate": MRE_DEFAULTS, "thermo_board": BOARD_DEFAULTS}


def build_scenario(name: str, scale: str = "desk", *, refine: int = 1, dim: int = 2,
                   waveform: str = "sin", **params) -> tuple[Mesh, ScenarioConfig]:
    """Generated mesh and configuration of a desk-scale scenario.

    ``dim=2`` gives the one-cell-thick plane variant (``refine`` scales the
    resolution), ``dim=3`` a coarse box mesh.  Keyword parameters override
    the scenario defaults listed in ``FAN_DEFAULTS``, ``MRE_DEFAULTS`` and
    ``BOARD_DEFAULTS``.  ``waveform="dc"`` gives the fan a constant voltage.
    """
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario '{name}', expected one of {', '.join(SCENARIOS)}")
    if scale != "desk":
        raise ValueError("only the desk scale is available")
    if dim not in (2, 3) or refine < 1:
        raise ValueError("dim must be 2 or 3 and refine at least 1")
    unknown = set(params) - set(_DEFAULTS[name])
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    p = {k: float(v) for k, v in {**_DEFAULTS[name], **params}.items()}
    if name == "piezo_fan":
        if waveform not in ("sin", "dc"):
            raise ValueError("waveform must be 'sin' or 'dc'")
        return _piezo_fan(refine, dim, p, waveform)
    if name == "mre_plate":
        return _mre_plate(refine, dim, p)
    return _thermo_board(refine, dim, p)


def emit_scenario(mesh: Mesh, cfg: ScenarioConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, directory / cfg.mesh)
    path = directory / "config.toml"
    path.write_text(serialize_config(cfg))
    return path


# --------------------------------------------------------------------------
# Command line

_SOLVER_ERRORS = (CouplingError, NewtonError, SingularMatrixError, MeshError, MaterialError)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to standard error.")
def main(verbose: bool) -> None:
    """Coupled electromagneto-thermomechanical simulations."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("run")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--steps", type=int, default=None, help="Number of time steps (default: up to t_max).")
@click.option("--static", is_flag=True, help="Solve static equilibrium at the start time only.")
def run_cmd(config: str, out_dir: str | None, steps: int | None, static: bool) -> None:
    """Run the scenario described by CONFIG."""
    try:
        cfg = parse_config(config)
        sim = setup(cfg, base_dir=Path(config).parent)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    out = Path(out_dir) if out_dir else Path(config).parent / "output"
    out.mkdir(parents=True, exist_ok=True)
    every = cfg.output.vtk_every

    def dump(s: Simulation) -> None:
        if every > 0 and s.state.steps % every == 0:
            write_vtk(s.state, out / f"state_{s.state.steps:05d}.vtk")

    try:
        rows = run_simulation(sim, steps, static, on_step=dump)
    except _SOLVER_ERRORS as exc:
        click.echo(f"solver failure: {exc}", err=True)
        sys.exit(EXIT_SOLVER)
    write_csv(rows, out / cfg.output.csv, sim.columns)
    write_vtk(sim.state, out / "final.vtk")
    for event in sim.state.events:
        click.echo(f"event: {event}")
    click.echo(f"{len(rows)} rows written to {out / cfg.output.csv}")


@main.command("scenario")
@click.argument("name", type=click.Choice(SCENARIOS))
@click.option("--emit", "emit_dir", type=click.Path(file_okay=False), required=True, help="Directory for mesh and config.")
@click.option("--refine", type=int, default=1, show_default=True)
@click.option("--dim", type=click.Choice(["2", "3"]), default="2", show_default=True)
@click.option("--dc", is_flag=True, help="Constant fan voltage instead of a sinusoid.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a scenario parameter.")
def scenario_cmd(name: str, emit_dir: str, refine: int, dim: str, dc: bool, overrides: tuple[str, ...]) -> None:
    """Write the generated mesh and configuration of a desk-scale scenario."""
    params = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        try:
            if not sep:
                raise ValueError
            params[key.strip()] = float(value)
        except ValueError:
            click.echo(f"config error: --set expects KEY=NUMBER, got '{item}'", err=True)
            sys.exit(EXIT_CONFIG)
    try:
        mesh, cfg = build_scenario(name, refine=refine, dim=int(dim), waveform="dc" if dc else "sin", **params)
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    path = emit_scenario(mesh, cfg, emit_dir)
    click.echo(f"wrote {path} ({mesh.n_nodes} nodes, {mesh.n_cells} cells)")


@main.command("verify")
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="CSV report path.")
@click.option("--quick", is_flag=True, help="Skip the manufactured-solution convergence study.")
def verify_cmd(report: str | None, quick: bool) -> None:
    """Run the verification oracles and print a pass/fail table."""
    from .verification import run_suite

    results = run_suite(quick=quick)
    width = max(len(r.name) for r in results)
    for r in results:
        click.echo(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.value:.3e} (limit {r.limit:.1e})")
    if report:
        Path(report).write_text(_report_csv(results))
    sys.exit(EXIT_OK if all(r.passed for r in results) else EXIT_SOLVER)


def _report_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["check", "value", "limit", "passed"])
    for r in results:
        writer.writerow([r.name, repr(float(r.value)), repr(float(r.limit)), int(r.passed)])
    return buf.getvalue()


if __name__ == "__main__":
    main()
