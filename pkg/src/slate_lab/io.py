"""Model container files and experiment configuration.

Container layout
----------------
Every parameter set (trained model, learned policy, oracle, session split) is
stored as a tagged container holding a small header and named dense arrays.

* JSON form: one object with ``format``, ``version``, ``tag``, ``dims``,
  ``variant``, ``meta`` and ``arrays`` (each ``{"dtype", "shape", "data"}``).
* Binary form: ``b"SLAB"``, ``uint32`` version, ``uint32`` header length, the
  JSON header (arrays described by dtype/shape/offset only), then the raw
  little-endian array bytes in row-major order.

Both forms round-trip float64 values bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .core import DataError, ModelParams, SlateLabError, Variant
from .environment import OracleConfig, OracleEnv
from .policy import SoftmaxPolicyParams

MAGIC = b"SLAB"
CONTAINER_VERSION = 1
TAGS = ("prr", "policy", "oracle", "session")
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class ConfigError(SlateLabError, ValueError):
    pass


@dataclass
class Container:
    tag: str
    arrays: dict[str, np.ndarray]
    dims: dict[str, int] = field(default_factory=dict)
    variant: str | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.tag not in TAGS:
            raise DataError(f"unknown container tag {self.tag!r}")


def _dtype_code(a: np.ndarray) -> str:
    if np.issubdtype(a.dtype, np.integer):
        return "i8"
    if np.issubdtype(a.dtype, np.floating):
        return "f8"
    raise DataError(f"unsupported array dtype {a.dtype}")


def _header(c: Container) -> dict:
    return {"format": "slate-lab-container", "version": CONTAINER_VERSION, "tag": c.tag,
            "dims": c.dims, "variant": c.variant, "meta": c.meta}


def save_container(c: Container, path: str | Path, fmt: str | None = None) -> None:
    """Write ``c``; the format follows ``fmt`` or else the file suffix
    (``.json`` means JSON, anything else binary)."""
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "binary")
    if fmt == "json":
        obj = _header(c)
        obj["arrays"] = {}
        for name, a in c.arrays.items():
            code = _dtype_code(a)
            obj["arrays"][name] = {"dtype": code, "shape": list(a.shape),
                                   "data": np.asarray(a, dtype=_DTYPES[code]).ravel().tolist()}
        path.write_text(json.dumps(obj), encoding="utf-8")
        return
    if fmt != "binary":
        raise ValueError(f"unknown container format {fmt!r}")
    head = _header(c)
    head["arrays"] = []
    blobs = []
    offset = 0
    for name, a in c.arrays.items():
        code = _dtype_code(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        head["arrays"].append({"name": name, "dtype": code, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    hb = json.dumps(head).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_container(path: str | Path, expect_tag: str | None = None) -> Container:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    try:
        if raw[:4] == MAGIC:
            version, hlen = struct.unpack("<II", raw[4:12])
            head = json.loads(raw[12:12 + hlen].decode("utf-8"))
            body = memoryview(raw)[12 + hlen:]
            arrays = {}
            for spec in head["arrays"]:
                dt = np.dtype(_DTYPES[spec["dtype"]])
                count = int(np.prod(spec["shape"], dtype=np.int64))
                a = np.frombuffer(body, dtype=dt, count=count, offset=spec["offset"])
                arrays[spec["name"]] = a.reshape(spec["shape"]).astype(dt.newbyteorder("="))
        else:
            head = json.loads(raw.decode("utf-8"))
            version = head.get("version")
            arrays = {name: np.asarray(spec["data"], dtype=_DTYPES[spec["dtype"]]).reshape(spec["shape"])
                      .astype(np.dtype(_DTYPES[spec["dtype"]]).newbyteorder("="))
                      for name, spec in head["arrays"].items()}
    except (ValueError, KeyError, TypeError, struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: not a valid container ({exc})") from None
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    c = Container(head["tag"], arrays, head.get("dims", {}), head.get("variant"), head.get("meta", {}))
    if expect_tag is not None and c.tag not in ((expect_tag,) if isinstance(expect_tag, str) else expect_tag):
        raise DataError(f"{path}: expected a {expect_tag!r} container, found {c.tag!r}")
    return c


# --------------------------------------------------------------------------
# Typed wrappers


def model_container(params: ModelParams, meta: dict | None = None) -> Container:
    dims = {"P": params.num_items, "d": params.dim, "d_y": params.dim_y, "d_z": params.dim_z,
            "K_max": params.k_max}
    return Container("prr", dict(params.arrays()), dims, params.variant.value, dict(meta or {}))


def policy_container(params: SoftmaxPolicyParams, meta: dict | None = None) -> Container:
    dims = {"P": params.num_items, "d": params.beta.shape[1], "d_z": params.Xi.shape[1]}
    return Container("policy", {"Xi": params.Xi, "beta": params.beta}, dims, None, dict(meta or {}))


def oracle_container(env: OracleEnv) -> Container:
    c = model_container(env.params, {"oracle_config": env.config.to_dict()})
    c.tag = "oracle"
    return c


def container_to_params(c: Container) -> ModelParams | SoftmaxPolicyParams:
    if c.tag in ("prr", "oracle"):
        return ModelParams.from_arrays(c.arrays, Variant(c.variant or "full"))
    if c.tag == "policy":
        return SoftmaxPolicyParams(c.arrays["Xi"], c.arrays["beta"])
    raise DataError(f"container tag {c.tag!r} holds no parameters")


def container_to_oracle(c: Container) -> OracleEnv:
    if c.tag != "oracle":
        raise DataError(f"expected an oracle container, found {c.tag!r}")
    cfg = c.meta["oracle_config"]
    return OracleEnv(OracleConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}),
                     ModelParams.from_arrays(c.arrays, Variant.FULL))


def save_params(params: ModelParams | SoftmaxPolicyParams, path: str | Path, meta: dict | None = None) -> None:
    c = model_container(params, meta) if isinstance(params, ModelParams) else policy_container(params, meta)
    save_container(c, path)


def load_params(path: str | Path) -> ModelParams | SoftmaxPolicyParams:
    return container_to_params(load_container(path, ("prr", "policy", "oracle")))


# --------------------------------------------------------------------------
# Experiment configuration


def config_schema() -> dict:
    return json.loads(resources.files("slate_lab").joinpath("config.schema.json").read_text(encoding="utf-8"))


DEFAULTS: dict[str, Any] = {
    "seed": 42,
    "oracle": {},
    "logging_policy": "uniform",
    "train": {},
    "sweep": {
        "num_items": [1000],
        "k_max": [2, 8],
        "logging_policies": ["uniform", "topkpop"],
        "methods": ["prr", "prr-reward", "prr-rank", "prr-bias", "ips", "iips", "topk-iips"],
        "n_train": 100_000,
    },
    "abtest": {"n_test": 100_000, "policy_decide": "sample"},
    "bench": {"num_items": [1000, 2000, 4000, 8000], "n": 20_000, "k_max": 4,
              "methods": ["prr", "prr-rank", "ips"], "epochs": 2, "logging_policy": "uniform"},
    "session": {"hide_fraction": 0.5, "k_max": 4, "dim_z": 64, "n_train": 100_000},
    "decide": {"index": "exact", "recall": 0.9},
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "per_method":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_config(doc: dict) -> dict:
    """Check ``doc`` against the published schema and fill defaults."""
    import jsonschema

    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None
    return _merge(DEFAULTS, doc)


def load_config(path: str | Path | None) -> dict:
    """Read a YAML (or JSON, which is a YAML subset) config; ``None`` gives defaults."""
    if path is None:
        return validate_config({})
    import yaml

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return validate_config(doc or {})


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def oracle_config(cfg: dict, **override) -> OracleConfig:
    o = {**cfg.get("oracle", {}), **override}
    o.setdefault("seed", cfg.get("seed", 42))
    return OracleConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in o.items()})
