"""File formats: observation CSVs, run configuration and model archives."""
import base64
import configparser
import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ParameterVector
from .conditioner import DDSFShape
from .flow import build_triangular_map
from .likelihood import FitConfig, FittedModel, ModelSpec, TraceRow
from .types import SpatialDataset, StandardizationTransform

__all__ = [
    "ParseError",
    "ConfigError",
    "ArchiveError",
    "read_table",
    "read_observations",
    "read_locations",
    "write_table",
    "write_observations",
    "RunConfig",
    "load_config",
    "save_model",
    "load_model",
    "ARCHIVE_FORMAT",
    "ARCHIVE_VERSION",
]

ARCHIVE_FORMAT = "nafgp-model"
ARCHIVE_VERSION = 1


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ArchiveError(ValueError):
    pass


# -- CSV ---------------------------------------------------------------------


def read_table(path) -> Tuple[List[str], np.ndarray]:
    """Read a header + numeric rows CSV, skipping '#' comments and blank lines.

    Errors name the file and 1-based line number.
    """
    header = None
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = next(csv.reader([stripped]))
            if header is None:
                header = [f.strip() for f in fields]
                if len(header) < 1 or any(not h for h in header):
                    raise ParseError(f"{path}:{lineno}: empty column name in header")
                if len(set(header)) != len(header):
                    raise ParseError(f"{path}:{lineno}: duplicate column name in header")
                continue
            if len(fields) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
            try:
                vals = [float(f) for f in fields]
            except ValueError:
                bad = next(f for f in fields if not _is_float(f))
                raise ParseError(f"{path}:{lineno}: not a number: {bad.strip()!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if header is None:
        raise ParseError(f"{path}: no header row")
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return header, np.array(rows, dtype=float)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_observations(path) -> SpatialDataset:
    """Coordinate columns followed by one value column."""
    header, arr = read_table(path)
    if len(header) < 2:
        raise ParseError(f"{path}: need at least one coordinate column and a value column")
    try:
        return SpatialDataset(arr[:, :-1], arr[:, -1], tuple(header[:-1]))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def read_locations(path, d: Optional[int] = None) -> Tuple[List[str], np.ndarray]:
    """Coordinate-only CSV; with ``d`` given the column count must match."""
    header, arr = read_table(path)
    if d is not None and arr.shape[1] != d:
        raise ParseError(f"{path}: expected {d} coordinate columns, got {arr.shape[1]}")
    return header, arr


def write_table(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    """Write columns with shortest round-trip float formatting."""
    cols = [np.asarray(c, dtype=float).ravel() for c in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(list(header))
        for row in zip(*cols):
            wr.writerow([repr(float(v)) for v in row])


def write_observations(path, locations, values, axis_names=None, value_name="value") -> None:
    locs = np.atleast_2d(locations)
    names = list(axis_names) if axis_names else [f"s{i + 1}" for i in range(locs.shape[1])]
    write_table(path, names + [value_name], list(locs.T) + [values])


# -- configuration -----------------------------------------------------------


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in s.replace(" ", "").split(",") if x)


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _nodes(s: str) -> Optional[np.ndarray]:
    s = s.strip()
    if not s:
        return None
    return np.array([_floats(p) for p in s.split(";") if p.strip()])


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip() == "" else float(s)


def _choice(*options):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


# section -> key -> (parser, default text)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "model": {
        "kind": (_choice("naf", "stat", "nonstat"), "naf"),
    },
    "flow": {
        "stages": (int, "2"),
        "sublayers": (int, "5"),
        "width": (int, "16"),
        "hidden": (_ints, "100,100,100,100,100"),
        "activation": (_choice("tanh", "sigmoid"), "tanh"),
        "init_scale": (float, "0.01"),
    },
    "matern": {
        "sigma": (_opt_float, ""),
        "range": (_opt_float, ""),
        "smoothness": (_opt_float, ""),
        "sigma_eps": (_opt_float, ""),
    },
    "nonstat": {
        "nodes": (_nodes, ""),
        "bandwidth": (_opt_float, ""),
    },
    "fit": {
        "tol": (float, "1e-3"),
        "max_outer": (int, "50"),
        "flow_steps": (int, "200"),
        "cov_steps": (int, "200"),
        "flow_lr": (float, "1e-3"),
        "cov_lr": (float, "1e-2"),
        "seed": (int, "0"),
        "standardize": (_choice("yes", "no"), "no"),
    },
    "simulate": {
        "lo": (float, "-0.5"),
        "hi": (float, "0.5"),
        "counts": (_ints, "101,101"),
        "warping": (_choice("spiral", "identity"), "spiral"),
        "a": (float, "2.0"),
        "b": (float, "4.0"),
        "sigma": (float, "1.0"),
        "range": (float, "0.1"),
        "smoothness": (float, "1.5"),
        "nugget_var": (float, "0.01"),
        "n": (int, "2000"),
        "seed": (int, "0"),
    },
    "predict": {
        "target_kind": (_choice("process", "data"), "process"),
        "lo": (_floats, ""),
        "hi": (_floats, ""),
        "counts": (_ints, ""),
    },
}


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, object]]

    def __getitem__(self, key: str):
        section, name = key.split(".")
        return self.values[section][name]

    def set(self, key: str, value) -> None:
        section, name = key.split(".")
        self.values[section][name] = value

    def fit_config(self) -> FitConfig:
        from .covariance import MaternParams
        f = self.values["fit"]
        m = self.values["matern"]
        phi = None
        if any(m[k] is not None for k in ("sigma", "range", "smoothness")):
            if any(m[k] is None for k in ("sigma", "range", "smoothness")):
                raise ConfigError("matern: give all of sigma, range, smoothness or none")
            phi = MaternParams(m["sigma"], m["range"], m["smoothness"])
        return FitConfig(tol=f["tol"], max_outer=f["max_outer"], flow_steps=f["flow_steps"],
                         cov_steps=f["cov_steps"], flow_lr=f["flow_lr"], cov_lr=f["cov_lr"],
                         seed=f["seed"], init_phi=phi, init_sigma_eps=m["sigma_eps"],
                         init_bandwidth=self.values["nonstat"]["bandwidth"])

    def model_spec(self, d: int) -> ModelSpec:
        kind = self["model.kind"]
        if kind == "naf":
            fl = self.values["flow"]
            shape = DDSFShape.uniform(fl["sublayers"], fl["width"])
            T = build_triangular_map(d, stages=fl["stages"], shape=shape, hidden=fl["hidden"],
                                     rng=np.random.default_rng(self["fit.seed"]),
                                     init_scale=fl["init_scale"], activation=fl["activation"])
            return ModelSpec("naf", flow=T)
        if kind == "nonstat":
            from .likelihood import default_nodes
            nodes = self["nonstat.nodes"]
            return ModelSpec("nonstat", nodes=default_nodes(d) if nodes is None else nodes)
        return ModelSpec("stat")


def default_config() -> RunConfig:
    return RunConfig({sec: {k: parse(dflt) for k, (parse, dflt) in keys.items()}
                      for sec, keys in SCHEMA.items()})


def load_config(path: Optional[str] = None, text: Optional[str] = None) -> RunConfig:
    """Parse an INI file over the defaults; unknown sections or keys are errors."""
    cfg = default_config()
    if path is None and text is None:
        return cfg
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        if text is not None:
            cp.read_string(text, source=path or "<config>")
        else:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            try:
                cfg.values[sec][key] = SCHEMA[sec][key][0](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key} = {raw!r}: {exc}") from exc
    return cfg


# -- model archive -----------------------------------------------------------


def _enc(a) -> dict:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(obj) -> np.ndarray:
    return np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8").reshape(obj["shape"]).copy()


def data_fingerprint(data: SpatialDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.locations, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(data.values, dtype="<f8").tobytes())
    return h.hexdigest()


def model_to_dict(model: FittedModel, transform: Optional[StandardizationTransform] = None) -> dict:
    spec = model.spec
    arch = {"kind": spec.kind}
    if spec.kind == "naf":
        arch["flow"] = spec.flow.architecture()
    if spec.kind == "nonstat":
        arch["nodes"] = _enc(spec.nodes)
    return {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "architecture": arch,
        "schema": model.params.schema(),
        "parameters": _enc(model.params.values),
        "data": {
            "locations": _enc(model.data.locations),
            "values": _enc(model.data.values),
            "axis_names": list(model.data.axis_names) if model.data.axis_names else None,
            "sha256": data_fingerprint(model.data),
        },
        "standardization": None if transform is None else
        {"mins": _enc(transform.mins), "maxs": _enc(transform.maxs)},
        "fit": {
            "converged": model.converged,
            "n_outer": model.n_outer,
            "loglik": repr(model.loglik),
            "trace": [[r.iteration, r.stage, repr(r.loglik), repr(r.delta_norm), r.accepted, repr(r.lr)]
                      for r in model.trace],
        },
    }


def save_model(path, model: FittedModel, transform: Optional[StandardizationTransform] = None) -> None:
    """Write a self-describing JSON archive (byte-stable for equal models)."""
    text = json.dumps(model_to_dict(model, transform), indent=1, sort_keys=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def _rebuild_spec(arch: dict) -> ModelSpec:
    kind = arch["kind"]
    if kind == "naf":
        fa = arch["flow"]
        shape = DDSFShape(tuple(fa["inner"]), tuple(fa["outer"]))
        T = build_triangular_map(fa["d"], stages=fa["stages"], shape=shape, hidden=fa["hidden"],
                                 init_scale=0.0, activation=fa["activation"])
        return ModelSpec("naf", flow=T)
    if kind == "nonstat":
        return ModelSpec("nonstat", nodes=_dec(arch["nodes"]))
    return ModelSpec(kind)


def load_model(path) -> Tuple[FittedModel, Optional[StandardizationTransform]]:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"cannot read model archive {path}: {exc}") from exc
    if obj.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError(f"{path} is not a model archive")
    if obj.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: archive version {obj.get('version')} is not supported "
                           f"(expected {ARCHIVE_VERSION})")
    spec = _rebuild_spec(obj["architecture"])
    pv = ParameterVector.from_schema(obj["schema"], _dec(obj["parameters"]))
    dd = obj["data"]
    names = tuple(dd["axis_names"]) if dd["axis_names"] else None
    data = SpatialDataset(_dec(dd["locations"]), _dec(dd["values"]), names)
    if data_fingerprint(data) != dd["sha256"]:
        raise ArchiveError(f"{path}: training data fingerprint mismatch")
    fit = obj["fit"]
    trace = [TraceRow(int(i), s, float(l), float(dn), int(a), float(lr))
             for i, s, l, dn, a, lr in fit["trace"]]
    model = FittedModel(spec, pv, data, trace, bool(fit["converged"]), int(fit["n_outer"]))
    st = obj.get("standardization")
    transform = None if st is None else StandardizationTransform(_dec(st["mins"]), _dec(st["maxs"]))
    return model, transform
