"""Presets, error norms, convergence rates, configuration and result files."""
from __future__ import annotations

import configparser
import csv
import math
import re
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import fe, geometry
from .adapt import AdaptConfig, StudyRecord
from .assembly import ExactSolution, ProblemSpec, constant
from .solver import SolverConfig

PRESETS = ("circle_10", "circle_1000", "circle_reversed", "square", "lshape", "flower")

# initial (background, immersed) levels per preset
DEFAULT_LEVELS = {
    "circle_10": (3, 2),
    "circle_1000": (3, 2),
    "circle_reversed": (3, 2),
    "square": (4, 2),
    "lshape": (4, 2),
    "flower": (4, 2),
}


class UnknownPreset(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


def _radial(a, b, c):
    """u = (a - b r^2) / c and its gradient."""

    def u(x, y):
        return (a - b * (x * x + y * y)) / c

    def grad(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return np.stack([-2 * b * x / c, -2 * b * y / c], axis=-1)

    return u, grad


def _circle_exact(outer, inner, immersed):
    u1, g1 = outer
    u2, g2 = inner

    def _ins(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return np.asarray(geometry.inside(immersed, np.stack([x, y], axis=-1))).reshape(x.shape)

    def u(x, y):
        ins = _ins(x, y)
        return np.where(ins, u2(x, y), u1(x, y))

    def grad_u(x, y):
        ins = _ins(x, y)
        return np.where(ins[..., None], g2(x, y), g1(x, y))

    return ExactSolution(u, grad_u, u2, g2), u1, g1


# (beta, beta2, outer (a, b, c), inner (a, b, c)) with u = (a - b r^2) / c
_CIRCLE_DATA = {
    "circle_10": (1.0, 10.0, (4, 1, 4), (31, 1, 40)),
    "circle_1000": (1.0, 1000.0, (4, 1, 4), (3001, 1, 4000)),
    "circle_reversed": (10.0, 1.0, (4, 1, 40), (13, 10, 40)),
}


@dataclass
class Preset:
    name: str
    problem: ProblemSpec
    levels: tuple[int, int]
    u1: object = None
    grad_u1: object = None

    @property
    def has_exact(self) -> bool:
        return self.problem.exact is not None


def get_preset(name: str, element_pair: str = "Q1-(Q1+B)-P0") -> Preset:
    if name not in PRESETS:
        raise UnknownPreset(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    if name in _CIRCLE_DATA:
        beta, beta2, outer, inner = _CIRCLE_DATA[name]
        bg = geometry.rectangle(-1.4, 1.4, -1.4, 1.4)
        im = geometry.circle((0.0, 0.0), 1.0)
        exact, u1, g1 = _circle_exact(_radial(*outer), _radial(*inner), im)
        pb = ProblemSpec(bg, im, constant(beta), constant(beta2), constant(1.0), constant(1.0),
                         element_pair, exact=exact, dirichlet=u1, name=name)
        return Preset(name, pb, DEFAULT_LEVELS[name], u1, g1)
    if name == "square":
        bg = geometry.rectangle(0.0, 6.0, 0.0, 6.0)
        im = geometry.square(math.e, 1.0 + math.pi)
    elif name == "lshape":
        bg = geometry.rectangle(0.0, 6.0, 0.0, 6.0)
        im = geometry.lshape((1.0, 3.0, 1.0, 3.0), (2.0, 3.0, 2.0, 3.0))
    else:
        bg = geometry.rectangle(-2.0, 3.0, -2.0, 3.0)
        im = geometry.flower((0.0, 0.0), 1.0, 0.1, 5)
    pb = ProblemSpec(bg, im, constant(1.0), constant(10.0), constant(1.0), constant(1.0),
                     element_pair, name=name)
    return Preset(name, pb, DEFAULT_LEVELS[name])


# -- error norms -------------------------------------------------------------------


def _cell_errors(forest, layout, coeffs, exact_u, exact_grad, rule, cells=None):
    ids = layout.cell_ids if cells is None else cells
    X = forest.cell_vertices(ids)
    x, _, det = fe.map_cells(X, rule.points)
    wdet = det * rule.weights
    val, grad = fe.evaluate_on_cells(layout, X, layout.row_of(ids), rule.points, coeffs)
    ev = exact_u(x[..., 0], x[..., 1])
    eg = exact_grad(x[..., 0], x[..., 1])
    l2 = (wdet * (val - ev) ** 2).sum(axis=1)
    h1 = (wdet * np.sum((grad - eg) ** 2, axis=-1)).sum(axis=1)
    return l2, h1


def error_norms(state, exact: ExactSolution, rule: fe.QuadratureRule | None = None) -> dict:
    """L2 norms and H1 seminorms of u - u_h on the background mesh (against
    the extended exact u) and of u2 - u_2h on the immersed mesh."""
    rule = rule or fe.gauss_tensor(fe.COUPLING_ORDER)
    d = state.disc
    l2u, h1u = _cell_errors(d.forest1, d.layout1, state.u, exact.u, exact.grad_u, rule)
    l2v, h1v = _cell_errors(d.forest2, d.layout2, state.u2, exact.u2, exact.grad_u2, rule)
    out = {
        "l2_u": math.sqrt(l2u.sum()),
        "semi_u": math.sqrt(h1u.sum()),
        "l2_u2": math.sqrt(l2v.sum()),
        "semi_u2": math.sqrt(h1v.sum()),
    }
    out["h1_u"] = math.hypot(out["l2_u"], out["semi_u"])
    out["h1_u2"] = math.hypot(out["l2_u2"], out["semi_u2"])
    return out


def record_errors(state, exact, eta_total=None) -> dict:
    """Error columns of a StudyRecord (err_h1_u is the seminorm, err_h1_u2 the full norm)."""
    e = error_norms(state, exact)
    cols = {
        "err_l2_u": e["l2_u"],
        "err_h1_u": e["semi_u"],
        "err_l2_u2": e["l2_u2"],
        "err_h1_u2": e["h1_u2"],
    }
    if eta_total is not None:
        denom = e["semi_u"] + e["h1_u2"]
        cols["eff_index"] = eta_total / denom if denom > 0 else math.nan
    return cols


def eoc(records, values=None, k: int = 4) -> float | dict:
    """Least-squares slope of log(error) against log(N^(1/2)) over the last k records.

    With ``values`` (one error per record) returns that slope; otherwise a
    dict of slopes for every error column.  O(h) corresponds to -1.
    """
    if len(records) < 3:
        raise ValueError("need at least 3 records to estimate a convergence order")
    k = min(k, len(records))
    tail = list(records)[-k:]
    n = np.array([r if isinstance(r, (int, float, np.integer)) else r.n_total for r in tail], float)
    x = np.log(np.sqrt(n))

    def slope(v):
        v = np.asarray(v, dtype=float)[-k:]
        return float(np.polyfit(x, np.log(v), 1)[0])

    if values is not None:
        return slope(values)
    cols = ("err_l2_u", "err_h1_u", "err_l2_u2", "err_h1_u2")
    return {c: slope([getattr(r, c) for r in tail]) for c in cols}


def volume_density(problem: ProblemSpec) -> float:
    """-(beta/beta2 * f2 - f) for constant data."""
    b, b2 = problem.beta(0.0, 0.0), problem.beta2(0.0, 0.0)
    return float(-(b / b2 * problem.f2(0.0, 0.0) - problem.f(0.0, 0.0)))


def lambda_diagnostic(state, preset: Preset) -> float:
    """h-weighted L2 distance of lambda_h to the volume density, away from the interface."""
    d = state.disc
    if preset.problem.immersed.shape != "circle":
        raise ValueError("lambda diagnostic needs a circle preset")
    target = volume_density(preset.problem)
    ids = d.layout_l.cell_ids
    X = d.forest2.cell_vertices(ids)
    h = d.forest2.diameters(ids)
    dist = geometry.distance_to_boundary(preset.problem.immersed, X.reshape(-1, 2)).reshape(-1, 4)
    away = dist.min(axis=1) > 1e-9
    area = d.forest2.areas(ids)
    lam = state.lam[d.layout_l.cell_to_dofs[:, 0]]
    return float(np.sqrt(np.sum((h**2 * area * (lam - target) ** 2)[away])))


# -- configuration -----------------------------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass
class ProblemConfig:
    preset: str = "circle_10"
    element_pair: str = "Q1-(Q1+B)-P0"
    level1: int = -1
    level2: int = -1


@dataclass
class OutputConfig:
    directory: str = "results"
    csv: str = "study.csv"
    vtk: bool = False
    summary: bool = True


@dataclass
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTIONS = {"problem": ProblemConfig, "adapt": AdaptConfig, "solver": SolverConfig, "output": OutputConfig}


def _convert(raw: str, kind):
    if kind in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw.strip()


def _line_of(lines, section, key):
    current = None
    for i, line in enumerate(lines, start=1):
        s = line.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"^{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return i
    return 0


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` text with [problem], [adapt], [solver], [output] sections."""
    lines = text.splitlines()
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as err:
        raise ConfigError(f"line {err.lineno}: key outside of a section") from err
    except configparser.ParsingError as err:
        lineno = err.errors[0][0] if err.errors else 0
        raise ConfigError(f"line {lineno}: cannot parse {err.errors[0][1] if err.errors else ''}") from err
    except configparser.Error as err:
        raise ConfigError(f"line {getattr(err, 'lineno', 0)}: {err}") from err
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"line {_section_line(lines, section)}: unknown section [{section}]")
        known = {f.name: f.type for f in dc_fields(_SECTIONS[section])}
        values[section] = {}
        for key, raw in cp.items(section):
            line = _line_of(lines, section, key)
            if key not in known:
                raise ConfigError(f"line {line}: unknown key {key!r} in [{section}]")
            kind = known[key]
            kind = {"int": int, "float": float, "bool": bool, "str": str}.get(str(kind), kind)
            try:
                values[section][key] = _convert(raw, kind)
            except ValueError as err:
                raise ConfigError(f"line {line}: {key}: {err}") from err
    cfg = RunConfig()
    try:
        cfg.problem = ProblemConfig(**values.get("problem", {}))
        cfg.adapt = AdaptConfig(**values.get("adapt", {}))
        cfg.solver = SolverConfig(**values.get("solver", {}))
        cfg.output = OutputConfig(**values.get("output", {}))
    except ValueError as err:
        key = _offending_key(str(err), values)
        line = _line_of(lines, key[0], key[1]) if key else 0
        raise ConfigError(f"line {line}: {err}") from err
    return cfg


def _section_line(lines, section):
    for i, line in enumerate(lines, start=1):
        if line.strip() == f"[{section}]":
            return i
    return 0


def _offending_key(message, values):
    for section, kv in values.items():
        for key in kv:
            if key in message:
                return section, key
    return None


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


# -- output ------------------------------------------------------------------------


def write_csv(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = StudyRecord.columns()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            w.writerow([getattr(r, c) for c in cols])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _vertex_count(layout):
    return int(layout.cell_to_dofs[:, :4].max()) + 1 if len(layout.cell_ids) else 0


def write_vtk(path, layout, coeffs, point_name, cell_data: dict) -> Path:
    """Legacy ASCII unstructured grid of the vertex DoFs (quad cells, type 9)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nv = _vertex_count(layout)
    pts = layout.node_points[:nv]
    conn = layout.cell_to_dofs[:, :4]
    n = len(conn)
    out = ["# vtk DataFile Version 3.0", "fictifem", "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {nv} double"]
    out += [f"{x:.16g} {y:.16g} 0" for x, y in pts]
    out.append(f"CELLS {n} {5 * n}")
    out += ["4 " + " ".join(str(int(v)) for v in row) for row in conn]
    out.append(f"CELL_TYPES {n}")
    out += ["9"] * n
    out.append(f"POINT_DATA {nv}")
    out += [f"SCALARS {point_name} double 1", "LOOKUP_TABLE default"]
    out += [f"{v:.16g}" for v in np.asarray(coeffs)[:nv]]
    if cell_data:
        out.append(f"CELL_DATA {n}")
        for name, vals in cell_data.items():
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [f"{v:.16g}" for v in np.asarray(vals, dtype=float)]
    path.write_text("\n".join(out) + "\n")
    return path


def write_state_vtk(directory, cycle, state, fields) -> tuple[Path, Path]:
    d = state.disc
    f1, f2 = fields
    lam = state.lam[d.layout_l.cell_to_dofs[:, 0]]
    p1 = write_vtk(Path(directory) / f"background_{cycle:03d}.vtk", d.layout1, state.u, "u",
                   {"eta": f1.eta, "osc": f1.osc, "lambda": np.zeros(len(f1.eta))})
    p2 = write_vtk(Path(directory) / f"immersed_{cycle:03d}.vtk", d.layout2, state.u2, "u2",
                   {"eta": f2.eta, "osc": f2.osc, "lambda": lam})
    return p1, p2
