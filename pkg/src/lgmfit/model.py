"""Model files, data tables, latent layout, and observation design.

A model is a JSON document (or an equivalent in-memory dictionary) naming a
response column, fixed-effect terms, latent components, an observation family
and control options. This module parses and validates that document, loads
CSV data, and assembles the latent layout plus the sparse observation design
A such that the linear predictor is eta = A x.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError, ModelSpecError
from .families import (
    Family,
    ObservationAux,
    get_family,
    validate_support,
)
from .gmrf import (
    COMPONENT_KINDS,
    AdjacencyGraph,
    ComponentStructure,
    build_component,
    read_graph,
)
from .priors import PriorSpec, make_prior
from .sparsela import SparseSym

MISSING_MARKERS = ("", "NA")

# Hyperparameter catalog per component kind: (key, transform, display pattern,
# default prior name, default prior params). Order matches the theta order
# expected by assemble_component_precision.
_COMPONENT_HYPER = {
    "iid": (("prec", "log", "Precision for %s", "pc.prec", (1.0, 0.01)),),
    "rw1": (("prec", "log", "Precision for %s", "pc.prec", (1.0, 0.01)),),
    "rw2": (("prec", "log", "Precision for %s", "pc.prec", (1.0, 0.01)),),
    "ar1": (
        ("prec", "log", "Precision for %s", "pc.prec", (1.0, 0.01)),
        ("rho", "fisher", "Rho for %s", "pc.cor1", (0.9, 0.9)),
    ),
    "bym": (
        ("prec.iid", "log", "Precision for %s (iid component)",
         "pc.prec", (1.0, 0.01)),
        ("prec.spatial", "log", "Precision for %s (spatial component)",
         "pc.prec", (1.0, 0.01)),
    ),
    "bym2": (
        ("prec", "log", "Precision for %s", "pc.prec", (1.0, 0.01)),
        ("phi", "logit", "Phi for %s", "pc", (0.5, 0.5)),
    ),
    "generic0": (("prec", "log", "Precision for %s", "pc.prec", (1.0, 0.01)),),
}

_INTERNAL_PREFIX = {"log": "Log ", "fisher": "Rho_intern for ",
                    "logit": "Logit ", "identity": ""}

_FAMILY_HYPER_KEY = {"gaussian": "prec", "nbinomial": "size",
                     "gamma": "shape", "beta": "prec"}

_TOP_KEYS = ("response", "fixed", "random", "family", "E", "Ntrials",
             "control", "safe")
_RANDOM_KEYS = ("id", "model", "hyper", "constr", "scale.model", "scale_model",
                "cyclic", "graph", "Q", "A.local", "A_local")
_HYPER_KEYS = ("prior", "param", "initial", "fixed")
_FAMILY_KEYS = ("name", "link", "hyper")
_CONTROL_KEYS = ("compute", "fixed_prec", "fixed_prec_intercept",
                 "int_dz", "int_diff_logdens")
_COMPUTE_KEYS = ("dic", "waic", "cpo", "config", "return_marginals")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperSetting:
    """One hyperparameter's configuration from the model file."""

    prior: PriorSpec
    initial: float | None = None  # internal scale; None -> engine default 0
    fixed: bool = False


@dataclass(frozen=True)
class HyperParam:
    """A fully resolved hyperparameter descriptor."""

    key: str             # short name within its owner ("prec", "rho", "phi")
    name: str            # display name, natural scale
    name_internal: str   # display name, internal scale
    transform: str       # internal-scale transform (log / fisher / logit)
    prior: PriorSpec
    initial: float = 0.0  # optimizer start, internal scale
    fixed: bool = False
    context: tuple | None = None  # extra prior context (bym2 spectrum)


@dataclass(frozen=True)
class ComputeFlags:
    dic: bool = False
    waic: bool = False
    cpo: bool = False
    config: bool = True
    return_marginals: bool = True


@dataclass(frozen=True)
class ControlOptions:
    compute: ComputeFlags = ComputeFlags()
    fixed_prec: float = 0.001
    fixed_prec_intercept: float = 0.001
    int_dz: float = 0.75
    int_diff_logdens: float = 3.0


@dataclass(frozen=True)
class RandomSpec:
    """One latent component as declared in the model file."""

    id: str
    model: str
    hyper: tuple  # ((key, HyperSetting), ...) in catalog order
    constr: bool = False
    scale_model: bool = False
    cyclic: bool = False
    graph: object = None    # path string or AdjacencyGraph
    Q: object = None        # path string, SparseSym, or scipy sparse
    A_local: object = None  # path string or scipy sparse


@dataclass(frozen=True)
class ModelSpec:
    """A parsed and validated model document."""

    response: str
    fixed: tuple = ()
    random: tuple = ()
    family: str = "gaussian"
    link: str | None = None
    family_hyper: tuple = ()  # () or ((key, HyperSetting),)
    E: str | None = None
    Ntrials: str | None = None
    control: ControlOptions = ControlOptions()
    safe: bool = True


@dataclass
class DataTable:
    """A typed column store read from CSV (or a pandas frame).

    Numeric columns are float arrays with NaN marking missing cells; text
    columns are object arrays with None marking missing cells.
    """

    n_rows: int
    names: tuple
    columns: dict

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise DataError("data has no column %r (columns: %s)"
                            % (name, ", ".join(self.names)))
        return self.columns[name]

    def numeric_column(self, name: str) -> np.ndarray:
        col = self.column(name)
        if col.dtype != np.float64:
            raise DataError("column %r is not numeric" % name)
        return col

    @classmethod
    def from_pandas(cls, df) -> "DataTable":
        names = tuple(str(c) for c in df.columns)
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in data frame")
        columns = {}
        for raw, name in zip(df.columns, names):
            values = df[raw].to_numpy()
            if values.dtype.kind in "ifub":
                columns[name] = np.asarray(values, dtype=float)
            else:
                cells = ["" if v is None or (isinstance(v, float) and math.isnan(v))
                         else str(v) for v in values]
                columns[name] = _classify_column(name, cells)
        return cls(n_rows=len(df), names=names, columns=columns)


@dataclass(frozen=True)
class LayoutBlock:
    name: str     # "fixed" or the component id
    offset: int
    length: int


@dataclass(frozen=True)
class LatentLayout:
    """Partition of the latent vector: fixed block first, then components."""

    N: int
    blocks: tuple
    names: tuple  # element names, length N

    def block(self, name: str) -> LayoutBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


@dataclass(frozen=True)
class BoundComponent:
    """A latent component bound to data: structure plus design info."""

    id: str
    structure: ComponentStructure
    hyper: tuple  # (HyperParam, ...)
    A_local: object = None  # scipy csr or None


@dataclass(frozen=True)
class Model:
    """Everything the inference engine needs, bound and validated."""

    spec: ModelSpec
    data: DataTable
    family: Family
    aux: ObservationAux
    y: np.ndarray                 # response, NaN = missing (predictive row)
    layout: LatentLayout
    X: np.ndarray                 # n_obs x p fixed-effect design
    A: sp.csr_matrix              # n_obs x N global design, eta = A x
    components: tuple             # (BoundComponent, ...)
    hypers: tuple                 # family hypers first, then per component
    prior_diag: np.ndarray        # fixed-effect prior precisions, length p

    @property
    def n_obs(self) -> int:
        return self.data.n_rows

    @property
    def n_hyper(self) -> int:
        return len(self.hypers)

    @property
    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.y)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _check_keys(obj: dict, allowed, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ModelSpecError("%s: unknown key %r (allowed: %s)"
                                 % (path, key, ", ".join(allowed)))


def _expect(obj, types, path: str, what: str):
    if not isinstance(obj, types):
        raise ModelSpecError("%s: expected %s, got %s"
                             % (path, what, type(obj).__name__))
    return obj


def _expect_bool(obj, path: str) -> bool:
    return _expect(obj, bool, path, "a boolean")


def _expect_str(obj, path: str) -> str:
    return _expect(obj, str, path, "a string")


def _expect_number(obj, path: str) -> float:
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ModelSpecError("%s: expected a number, got %s"
                             % (path, type(obj).__name__))
    return float(obj)


def parse_model_spec(text: str) -> ModelSpec:
    """Parse a JSON model document into a validated ModelSpec."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSpecError("model file is not valid JSON: %s" % exc)
    return normalize_model(obj)


def normalize_model(obj) -> ModelSpec:
    """Validate a model dictionary and apply defaults.

    Accepts the same structure as the JSON document; graph/Q/A.local values
    may additionally be in-memory objects when called from library code.
    """
    _expect(obj, dict, "model", "an object")
    _check_keys(obj, _TOP_KEYS, "model")
    if "response" not in obj:
        raise ModelSpecError("model: missing required key 'response'")
    response = _expect_str(obj["response"], "response")

    fixed = obj.get("fixed", [])
    _expect(fixed, list, "fixed", "a list of term names")
    fixed = tuple(_expect_str(t, "fixed[%d]" % i) for i, t in enumerate(fixed))
    seen = set()
    for i, term in enumerate(fixed):
        if term in seen:
            raise ModelSpecError("fixed[%d]: duplicate term %r" % (i, term))
        seen.add(term)

    family, link, family_hyper = _parse_family(obj.get("family", "gaussian"))

    raw_random = obj.get("random", [])
    _expect(raw_random, list, "random", "a list of components")
    random = tuple(_parse_random(entry, "random[%d]" % i)
                   for i, entry in enumerate(raw_random))
    ids = set()
    for i, comp in enumerate(random):
        if comp.id in ids:
            raise ModelSpecError("random[%d].id: duplicate component id %r"
                                 % (i, comp.id))
        ids.add(comp.id)

    E = Ntrials = None
    if "E" in obj:
        E = _expect_str(obj["E"], "E")
        if family != "poisson":
            raise ModelSpecError("E: only allowed with the poisson family")
    if "Ntrials" in obj:
        Ntrials = _expect_str(obj["Ntrials"], "Ntrials")
        if family != "binomial":
            raise ModelSpecError("Ntrials: only allowed with the binomial family")
    if family == "binomial" and Ntrials is None:
        raise ModelSpecError("family 'binomial' requires an Ntrials column")

    control = _parse_control(obj.get("control", {}))
    safe = _expect_bool(obj.get("safe", True), "safe")

    return ModelSpec(response=response, fixed=fixed, random=random,
                     family=family, link=link, family_hyper=family_hyper,
                     E=E, Ntrials=Ntrials, control=control, safe=safe)


def _parse_family(raw):
    if isinstance(raw, str):
        name, link, hyper_obj = raw, None, {}
    else:
        _expect(raw, dict, "family", "a family name or object")
        _check_keys(raw, _FAMILY_KEYS, "family")
        if "name" not in raw:
            raise ModelSpecError("family: missing required key 'name'")
        name = _expect_str(raw["name"], "family.name")
        link = (_expect_str(raw["link"], "family.link")
                if "link" in raw else None)
        hyper_obj = raw.get("hyper", {})
        _expect(hyper_obj, dict, "family.hyper", "an object")
    try:
        fam = get_family(name, link)
    except ModelSpecError as exc:
        raise ModelSpecError("family: %s" % exc)

    if fam.n_hyper == 0:
        if hyper_obj:
            raise ModelSpecError(
                "family.hyper: family %r has no hyperparameters" % name)
        return name, link, ()
    key = _FAMILY_HYPER_KEY[name]
    prior_name, prior_params, initial = fam.hyper_default
    default = HyperSetting(prior=make_prior(prior_name, prior_params),
                           initial=None if initial == 0.0 else initial)
    setting = default
    for k, v in hyper_obj.items():
        if k != key:
            raise ModelSpecError(
                "family.hyper: unknown hyperparameter %r for family %r "
                "(expected %r)" % (k, name, key))
        setting = _parse_hyper_setting(v, default, "family.hyper.%s" % k)
    return name, link, ((key, setting),)


def _parse_hyper_setting(raw, default: HyperSetting, path: str) -> HyperSetting:
    _expect(raw, dict, path, "an object")
    _check_keys(raw, _HYPER_KEYS, path)
    prior = default.prior
    if "prior" in raw or "param" in raw:
        name = (_expect_str(raw["prior"], path + ".prior")
                if "prior" in raw else prior.name)
        params = raw.get("param", [])
        if "param" in raw:
            _expect(params, list, path + ".param", "a list of numbers")
        try:
            prior = make_prior(name, params)
        except ModelSpecError as exc:
            raise ModelSpecError("%s: %s" % (path, exc))
    initial = default.initial
    if "initial" in raw:
        initial = _expect_number(raw["initial"], path + ".initial")
    fixed = default.fixed
    if "fixed" in raw:
        fixed = _expect_bool(raw["fixed"], path + ".fixed")
    return HyperSetting(prior=prior, initial=initial, fixed=fixed)


def _parse_random(raw, path: str) -> RandomSpec:
    _expect(raw, dict, path, "an object")
    _check_keys(raw, _RANDOM_KEYS, path)
    for a, b in (("scale.model", "scale_model"), ("A.local", "A_local")):
        if a in raw and b in raw:
            raise ModelSpecError("%s: give either %r or %r, not both"
                                 % (path, a, b))
    if "id" not in raw:
        raise ModelSpecError("%s: missing required key 'id'" % path)
    if "model" not in raw:
        raise ModelSpecError("%s: missing required key 'model'" % path)
    cid = _expect_str(raw["id"], path + ".id")
    kind = _expect_str(raw["model"], path + ".model")
    if kind not in COMPONENT_KINDS:
        raise ModelSpecError("%s.model: unknown model %r (choose from %s)"
                             % (path, kind, ", ".join(COMPONENT_KINDS)))
    constr = _expect_bool(raw.get("constr", False), path + ".constr")
    scale_model = _expect_bool(raw.get("scale.model", raw.get("scale_model", False)),
                               path + ".scale.model")
    cyclic = _expect_bool(raw.get("cyclic", False), path + ".cyclic")
    graph = raw.get("graph")
    Q = raw.get("Q")
    A_local = raw.get("A.local", raw.get("A_local"))

    if cyclic and kind not in ("rw1", "rw2"):
        raise ModelSpecError("%s.cyclic: only valid for rw1/rw2" % path)
    if scale_model and kind in ("iid", "ar1", "generic0"):
        raise ModelSpecError("%s.scale.model: does not apply to %r"
                             % (path, kind))
    if kind in ("bym", "bym2"):
        if graph is None:
            raise ModelSpecError("%s: model %r requires 'graph'" % (path, kind))
        if A_local is not None:
            raise ModelSpecError("%s: A.local is not supported for %r"
                                 % (path, kind))
    elif graph is not None:
        raise ModelSpecError("%s.graph: only valid for bym/bym2" % path)
    if kind == "generic0":
        if Q is None:
            raise ModelSpecError("%s: model 'generic0' requires 'Q'" % path)
    elif Q is not None:
        raise ModelSpecError("%s.Q: only valid for generic0" % path)
    if graph is not None and not isinstance(graph, (str, AdjacencyGraph)):
        raise ModelSpecError("%s.graph: expected a file path or adjacency graph"
                             % path)
    if Q is not None and not isinstance(Q, (str, SparseSym)) and not sp.issparse(Q):
        raise ModelSpecError("%s.Q: expected a file path or sparse matrix" % path)
    if (A_local is not None and not isinstance(A_local, str)
            and not sp.issparse(A_local)):
        raise ModelSpecError("%s: A.local expects a file path or sparse matrix"
                             % path)

    catalog = _COMPONENT_HYPER[kind]
    raw_hyper = raw.get("hyper", {})
    _expect(raw_hyper, dict, path + ".hyper", "an object")
    valid = tuple(entry[0] for entry in catalog)
    for k in raw_hyper:
        if k not in valid:
            raise ModelSpecError(
                "%s.hyper: unknown hyperparameter %r for model %r (valid: %s)"
                % (path, k, kind, ", ".join(valid)))
    hyper = []
    for key, _, _, prior_name, prior_params in catalog:
        default = HyperSetting(prior=make_prior(prior_name, prior_params))
        if key in raw_hyper:
            setting = _parse_hyper_setting(raw_hyper[key], default,
                                           "%s.hyper.%s" % (path, key))
        else:
            setting = default
        hyper.append((key, setting))
    return RandomSpec(id=cid, model=kind, hyper=tuple(hyper), constr=constr,
                      scale_model=scale_model, cyclic=cyclic, graph=graph,
                      Q=Q, A_local=A_local)


def _parse_control(raw) -> ControlOptions:
    _expect(raw, dict, "control", "an object")
    _check_keys(raw, _CONTROL_KEYS, "control")
    compute_raw = raw.get("compute", {})
    _expect(compute_raw, dict, "control.compute", "an object")
    _check_keys(compute_raw, _COMPUTE_KEYS, "control.compute")
    flags = {k: _expect_bool(v, "control.compute.%s" % k)
             for k, v in compute_raw.items()}
    compute = ComputeFlags(**flags)
    opts = {}
    for key in ("fixed_prec", "fixed_prec_intercept", "int_dz",
                "int_diff_logdens"):
        if key in raw:
            value = _expect_number(raw[key], "control.%s" % key)
            if value <= 0:
                raise ModelSpecError("control.%s: must be positive" % key)
            opts[key] = value
    return ControlOptions(compute=compute, **opts)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def serialize_model_spec(spec: ModelSpec) -> str:
    """Render a ModelSpec back to canonical JSON (fully populated form)."""
    out = {"response": spec.response, "fixed": list(spec.fixed)}
    out["random"] = [_serialize_random(comp, i)
                     for i, comp in enumerate(spec.random)]
    fam = {"name": spec.family}
    if spec.link is not None:
        fam["link"] = spec.link
    if spec.family_hyper:
        fam["hyper"] = {k: _serialize_hyper(s) for k, s in spec.family_hyper}
    out["family"] = fam
    if spec.E is not None:
        out["E"] = spec.E
    if spec.Ntrials is not None:
        out["Ntrials"] = spec.Ntrials
    c = spec.control
    out["control"] = {
        "compute": {k: getattr(c.compute, k) for k in _COMPUTE_KEYS},
        "fixed_prec": c.fixed_prec,
        "fixed_prec_intercept": c.fixed_prec_intercept,
        "int_dz": c.int_dz,
        "int_diff_logdens": c.int_diff_logdens,
    }
    out["safe"] = spec.safe
    return json.dumps(out, indent=2) + "\n"


def _serialize_random(comp: RandomSpec, i: int) -> dict:
    entry = {"id": comp.id, "model": comp.model}
    entry["hyper"] = {k: _serialize_hyper(s) for k, s in comp.hyper}
    entry["constr"] = comp.constr
    entry["scale.model"] = comp.scale_model
    entry["cyclic"] = comp.cyclic
    for key, value in (("graph", comp.graph), ("Q", comp.Q),
                       ("A.local", comp.A_local)):
        if value is None:
            continue
        if not isinstance(value, str):
            raise ModelSpecError(
                "random[%d].%s: in-memory objects cannot be serialized to JSON"
                % (i, key))
        entry[key] = value
    return entry


def _serialize_hyper(setting: HyperSetting) -> dict:
    out = {"prior": setting.prior.name, "param": list(setting.prior.params)}
    if setting.initial is not None:
        out["initial"] = setting.initial
    if setting.fixed:
        out["fixed"] = True
    return out


# ---------------------------------------------------------------------------
# data loading
# ---------------------------------------------------------------------------

def load_table(path) -> DataTable:
    """Read a CSV file with a header row into typed columns.

    Empty cells and the literal "NA" become missing markers. A column is
    numeric when every non-missing cell parses as a number; mixing numeric
    and non-numeric cells in one column is an error.
    """
    try:
        fh = open(path, newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise DataError("cannot read %s: %s" % (path, exc))
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("%s: empty file" % path)
        rows = [row for row in reader if row]
    names = tuple(h.strip() for h in header)
    if any(not n for n in names):
        raise DataError("%s: empty column name in header" % path)
    if len(set(names)) != len(names):
        raise DataError("%s: duplicate column names in header" % path)
    for k, row in enumerate(rows):
        if len(row) != len(names):
            raise DataError("%s: row %d has %d fields, expected %d"
                            % (path, k + 2, len(row), len(names)))
    columns = {}
    for j, name in enumerate(names):
        cells = [row[j].strip() for row in rows]
        columns[name] = _classify_column(name, cells)
    return DataTable(n_rows=len(rows), names=names, columns=columns)


def _classify_column(name: str, cells) -> np.ndarray:
    """Type one column: all-numeric -> float with NaN, else text with None."""
    numeric = []
    n_num = 0
    for cell in cells:
        if cell in MISSING_MARKERS:
            numeric.append(np.nan)
            continue
        try:
            numeric.append(float(cell))
            n_num += 1
        except ValueError:
            numeric.append(None)
    n_data = sum(1 for c in cells if c not in MISSING_MARKERS)
    if n_data == 0 or n_num == n_data:
        return np.array([np.nan if v is None else v for v in numeric],
                        dtype=float)
    if n_num > 0:
        bad = next(c for c, v in zip(cells, numeric)
                   if c not in MISSING_MARKERS and v is None)
        raise DataError("column %r mixes numeric and non-numeric values "
                        "(e.g. %r): non-numeric cell in numeric column"
                        % (name, bad))
    out = np.empty(len(cells), dtype=object)
    for k, cell in enumerate(cells):
        out[k] = None if cell in MISSING_MARKERS else cell
    return out


def _load_triplets(path):
    """Read a sparse-matrix CSV with header i,j,value (1-based indices)."""
    table = load_table(path)
    for col in ("i", "j", "value"):
        if col not in table.names:
            raise DataError("%s: matrix file needs columns i,j,value" % path)
    ii = table.numeric_column("i")
    jj = table.numeric_column("j")
    vv = table.numeric_column("value")
    if np.any(np.isnan(ii)) or np.any(np.isnan(jj)) or np.any(np.isnan(vv)):
        raise DataError("%s: matrix file has missing entries" % path)
    if (np.any(ii != np.round(ii)) or np.any(jj != np.round(jj))
            or np.any(ii < 1) or np.any(jj < 1)):
        raise DataError("%s: matrix indices must be integers >= 1" % path)
    return ii.astype(int) - 1, jj.astype(int) - 1, vv


def _resolve_path(value: str, base_dir) -> str:
    if base_dir is not None and not os.path.isabs(value):
        return os.path.join(base_dir, value)
    return value


def _load_Q(value, base_dir, path: str) -> SparseSym:
    if isinstance(value, SparseSym):
        return value
    if sp.issparse(value):
        return SparseSym.from_scipy(value)
    ii, jj, vv = _load_triplets(_resolve_path(value, base_dir))
    n = int(max(ii.max(), jj.max())) + 1
    try:
        return SparseSym.from_triplets(n, ii, jj, vv)
    except (ValueError, DataError) as exc:
        raise ModelSpecError("%s.Q: %s" % (path, exc))


def _load_A_local(value, base_dir, n_obs: int, path: str) -> sp.csr_matrix:
    if sp.issparse(value):
        mat = value.tocsr()
    else:
        ii, jj, vv = _load_triplets(_resolve_path(value, base_dir))
        shape = (int(ii.max()) + 1, int(jj.max()) + 1)
        mat = sp.coo_matrix((vv, (ii, jj)), shape=shape).tocsr()
    if mat.shape[0] != n_obs:
        raise ModelSpecError("%s: A.local has %d rows, expected %d observations"
                             % (path, mat.shape[0], n_obs))
    return mat


# ---------------------------------------------------------------------------
# binding: layout and design assembly
# ---------------------------------------------------------------------------

def _component_index(data: DataTable, cid: str, m: int | None, path: str):
    """Validate a 1-based index column; return 0-based indices and size."""
    col = data.numeric_column(cid)
    if np.any(np.isnan(col)):
        raise DataError("%s: index column %r has missing entries" % (path, cid))
    if np.any(col != np.round(col)):
        raise DataError("%s: index column %r must be integer-valued"
                        % (path, cid))
    idx = col.astype(int)
    if np.any(idx == 0):
        raise DataError("%s: index column %r contains 0; component ids are "
                        "1-based" % (path, cid))
    if np.any(idx < 1):
        raise DataError("%s: index column %r has entries < 1" % (path, cid))
    if m is None:
        m = int(idx.max())
    elif idx.max() > m:
        raise DataError("%s: index column %r has entry %d but the component "
                        "has size %d" % (path, cid, idx.max(), m))
    return idx - 1, m


def _bind_component(comp: RandomSpec, data: DataTable, base_dir,
                    path: str) -> BoundComponent:
    data.column(comp.id)  # the id column must exist in every case
    graph = comp.graph
    if isinstance(graph, str):
        graph = read_graph(_resolve_path(graph, base_dir))
    Q_user = _load_Q(comp.Q, base_dir, path) if comp.Q is not None else None
    A_local = None
    if comp.A_local is not None:
        A_local = _load_A_local(comp.A_local, base_dir, data.n_rows, path)

    if comp.model in ("bym", "bym2"):
        m = graph.n
        _component_index(data, comp.id, m, path)
    elif comp.model == "generic0":
        m = Q_user.n
        if A_local is not None:
            if A_local.shape[1] != m:
                raise ModelSpecError(
                    "%s: A.local has %d columns but Q has size %d"
                    % (path, A_local.shape[1], m))
        else:
            _component_index(data, comp.id, m, path)
    else:
        if A_local is not None:
            m = A_local.shape[1]
        else:
            _, m = _component_index(data, comp.id, None, path)

    structure = build_component(
        comp.model, m=m, graph=graph, cyclic=comp.cyclic, constr=comp.constr,
        scale_model=comp.scale_model, Q_user=Q_user)

    hyper = []
    for (key, setting), entry in zip(comp.hyper, _COMPONENT_HYPER[comp.model]):
        _, transform, pattern, _, _ = entry
        context = None
        if comp.model == "bym2" and key == "phi":
            context = tuple(float(g) for g in structure.spectrum)
        name = pattern % comp.id
        hyper.append(HyperParam(
            key=key, name=name,
            name_internal=_internal_name(transform, name),
            transform=transform, prior=setting.prior,
            initial=0.0 if setting.initial is None else setting.initial,
            fixed=setting.fixed, context=context))
    return BoundComponent(id=comp.id, structure=structure,
                          hyper=tuple(hyper), A_local=A_local)


def _internal_name(transform: str, name: str) -> str:
    if transform == "log":
        return "Log " + name[0].lower() + name[1:]
    if transform == "fisher":
        return name.replace("Rho for", "Rho_intern for")
    if transform == "logit":
        return "Logit " + name[0].lower() + name[1:]
    return name


def _family_hypers(spec: ModelSpec, fam: Family) -> tuple:
    if fam.n_hyper == 0:
        return ()
    (key, setting), = spec.family_hyper
    return (HyperParam(
        key=key, name=fam.hyper_label, name_internal=fam.hyper_label_internal,
        transform="log", prior=setting.prior,
        initial=0.0 if setting.initial is None else setting.initial,
        fixed=setting.fixed),)


def _element_names(comp: BoundComponent) -> list:
    cs = comp.structure
    if cs.kind in ("bym", "bym2"):
        return (["%s:b:%d" % (comp.id, k + 1) for k in range(cs.m)]
                + ["%s:u:%d" % (comp.id, k + 1) for k in range(cs.m)])
    return ["%s:%d" % (comp.id, k + 1) for k in range(cs.size)]


def build_layout_and_design(spec: ModelSpec, data: DataTable, base_dir=None):
    """Bind a spec to data: latent layout, designs, and bound components."""
    n = data.n_rows
    p = len(spec.fixed)

    X = np.empty((n, p))
    names = []
    for j, term in enumerate(spec.fixed):
        if term == "1":
            X[:, j] = 1.0
            names.append("(Intercept)")
        else:
            col = data.numeric_column(term)
            if np.any(np.isnan(col)):
                raise DataError("fixed term %r has missing entries" % term)
            X[:, j] = col
            names.append(term)

    components = tuple(
        _bind_component(comp, data, base_dir, "random[%d]" % i)
        for i, comp in enumerate(spec.random))

    blocks = [LayoutBlock(name="fixed", offset=0, length=p)]
    offset = p
    for comp in components:
        blocks.append(LayoutBlock(name=comp.id, offset=offset,
                                  length=comp.structure.size))
        names.extend(_element_names(comp))
        offset += comp.structure.size
    layout = LatentLayout(N=offset, blocks=tuple(blocks), names=tuple(names))

    # global design with explicit entries for every term (zeros retained so
    # each observation row carries one stored entry per fixed term and per
    # indexed component)
    rows = [np.repeat(np.arange(n), p)]
    cols = [np.tile(np.arange(p), n)]
    vals = [X.ravel()]
    for comp, block in zip(components, blocks[1:]):
        if comp.A_local is not None:
            local = comp.A_local.tocoo()
            rows.append(local.row)
            cols.append(local.col + block.offset)
            vals.append(local.data)
        else:
            idx, _ = _component_index(data, comp.id, comp.structure.m, comp.id)
            rows.append(np.arange(n))
            cols.append(idx + block.offset)
            vals.append(np.ones(n))
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, layout.N)).tocsr()

    return layout, X, A, components


def build_model(spec: ModelSpec, data, base_dir=None) -> Model:
    """Validate a spec against data and assemble the bound model."""
    if not isinstance(data, DataTable):
        data = DataTable.from_pandas(data)

    fam = get_family(spec.family, spec.link)
    y = data.numeric_column(spec.response).copy()

    for name in data.names:
        if name == spec.response:
            continue
        col = data.columns[name]
        if col.dtype == np.float64:
            missing = np.isnan(col)
        else:
            missing = np.array([v is None for v in col])
        if missing.any():
            raise DataError("column %r has missing entries; missing values "
                            "are only allowed in the response column %r"
                            % (name, spec.response))

    E = data.numeric_column(spec.E) if spec.E else None
    Ntrials = data.numeric_column(spec.Ntrials) if spec.Ntrials else None
    aux = ObservationAux.for_n(data.n_rows, E=E, Ntrials=Ntrials)

    mask = ~np.isnan(y)
    if mask.any():
        validate_support(fam, y[mask],
                         ObservationAux(E=aux.E[mask], Ntrials=aux.Ntrials[mask]))

    layout, X, A, components = build_layout_and_design(spec, data, base_dir)

    hypers = list(_family_hypers(spec, fam))
    for comp in components:
        hypers.extend(comp.hyper)

    prior_diag = np.array([
        spec.control.fixed_prec_intercept if term == "1"
        else spec.control.fixed_prec
        for term in spec.fixed])

    return Model(spec=spec, data=data, family=fam, aux=aux, y=y,
                 layout=layout, X=X, A=A, components=components,
                 hypers=tuple(hypers), prior_diag=prior_diag)


def load_model(model_path, data_path) -> Model:
    """Convenience wrapper: read a model JSON and a data CSV, then bind."""
    try:
        with open(model_path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ModelSpecError("cannot read %s: %s" % (model_path, exc))
    spec = parse_model_spec(text)
    data = load_table(data_path)
    return build_model(spec, data, base_dir=os.path.dirname(
        os.path.abspath(model_path)))
