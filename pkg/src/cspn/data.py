"""Datasets, schemas, CSV/PGM/IDX I/O, evidence masks and synthetic generators."""

from __future__ import annotations

import gzip
import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._rng import make_rng

TYPES = ("binary", "count", "continuous", "categorical")
ROLES = ("Y", "X")
FAMILY_OF_TYPE = {"binary": "bernoulli", "count": "poisson", "continuous": "gaussian", "categorical": "categorical"}
BENCHMARK_ENV = "CSPN_DATA_DIR"
BENCHMARK_SPLITS = {"train": "ts", "valid": "valid", "test": "test"}


class DataError(ValueError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f'col "{column}"')
        super().__init__(", ".join(where) + ": " + message if where else message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class Column:
    name: str
    type: str
    role: str
    num_classes: int | None = None

    def __post_init__(self):
        if self.type not in TYPES:
            raise DataError(f"unknown column type {self.type!r}", column=self.name)
        if self.role not in ROLES:
            raise DataError(f"unknown role {self.role!r}", column=self.name)
        if self.type == "categorical" and (self.num_classes is None or self.num_classes < 2):
            raise DataError("categorical column needs at least 2 classes", column=self.name)

    @property
    def family(self) -> str:
        return FAMILY_OF_TYPE[self.type]

    @property
    def type_text(self) -> str:
        return f"categorical({self.num_classes})" if self.type == "categorical" else self.type

    def check(self, values: np.ndarray) -> np.ndarray:
        """Boolean mask of entries that violate the declared type."""
        bad = ~np.isfinite(values)
        if self.type == "binary":
            bad |= (values != 0) & (values != 1)
        elif self.type == "count":
            bad |= (values < 0) | (values != np.floor(values))
        elif self.type == "categorical":
            bad |= (values < 0) | (values >= self.num_classes) | (values != np.floor(values))
        return bad


_TYPE_RE = re.compile(r"^(binary|count|continuous|categorical\((\d+)\))$")


@dataclass(frozen=True)
class Schema:
    columns: tuple

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")

    def __len__(self):
        return len(self.columns)

    @property
    def names(self) -> list:
        return [c.name for c in self.columns]

    @property
    def y_indices(self) -> list:
        return [i for i, c in enumerate(self.columns) if c.role == "Y"]

    @property
    def x_indices(self) -> list:
        return [i for i, c in enumerate(self.columns) if c.role == "X"]

    @classmethod
    def parse(cls, text: str) -> "Schema":
        cols = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DataError(f"schema line {lineno}: expected name,type,role")
            name, typ, role = parts
            m = _TYPE_RE.match(typ)
            if m is None:
                raise DataError(f"schema line {lineno}: unknown type {typ!r}")
            if m.group(2) is not None:
                cols.append(Column(name, "categorical", role, int(m.group(2))))
            else:
                cols.append(Column(name, typ, role))
        return cls(tuple(cols))

    def dumps(self) -> str:
        return "".join(f"{c.name},{c.type_text},{c.role}\n" for c in self.columns)

    @classmethod
    def uniform(cls, names, type_: str, roles, num_classes=None) -> "Schema":
        return cls(tuple(Column(n, type_, r, num_classes) for n, r in zip(names, roles)))

    def with_x(self, x_indices) -> "Schema":
        xs = set(x_indices)
        return Schema(tuple(replace(c, role="X" if i in xs else "Y") for i, c in enumerate(self.columns)))


@dataclass(frozen=True, eq=False)
class Dataset:
    values: np.ndarray
    schema: Schema
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim == 1:
            v = v.reshape(-1, len(self.schema)) if len(self.schema) else v.reshape(0, 0)
        if v.ndim != 2 or v.shape[1] != len(self.schema):
            raise DataError(f"{v.shape[-1] if v.ndim else 0} columns but schema declares {len(self.schema)}")
        for j, col in enumerate(self.schema.columns):
            bad = np.flatnonzero(col.check(v[:, j]))
            if bad.size:
                raise DataError(f"value {_fmt(v[bad[0], j])} violates type {col.type_text}", row=int(bad[0]) + 1, column=col.name)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.values[:, self.schema.y_indices]

    @property
    def x(self) -> np.ndarray:
        return self.values[:, self.schema.x_indices]

    @property
    def y_columns(self) -> list:
        return [self.schema.columns[i] for i in self.schema.y_indices]

    @property
    def x_columns(self) -> list:
        return [self.schema.columns[i] for i in self.schema.x_indices]

    @property
    def families(self) -> list:
        return [c.family for c in self.y_columns]

    def rows(self, index) -> "Dataset":
        return Dataset(self.values[index], self.schema, dict(self.metadata))

    def with_x(self, x_indices) -> "Dataset":
        return Dataset(self.values, self.schema.with_x(x_indices), dict(self.metadata))


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


# -- CSV ------------------------------------------------------------------------


def read_schema(path) -> Schema:
    try:
        return Schema.parse(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read schema {path}: {e.strerror}") from None


def load_csv(path, schema=None, header: bool | None = None) -> Dataset:
    """Strict CSV parse against a schema (a Schema or a sidecar file path).

    ``header=None`` treats the first line as a header exactly when it equals
    the schema's column names. Row numbers in errors count data rows from 1.
    ``schema=None`` means every column is binary and a target (benchmark
    default).
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    lines = text.splitlines()
    if schema is not None and not isinstance(schema, Schema):
        schema = read_schema(schema)
    first = [t.strip() for t in lines[0].split(",")] if lines else []
    if schema is None:
        d = len(first)
        schema = Schema.uniform([f"v{i}" for i in range(d)], "binary", ["Y"] * d)
    if header is None:
        header = first == schema.names
    elif header and first != schema.names:
        raise DataError(f"header {first} does not match schema names {schema.names}")
    body = lines[1:] if header else lines
    d = len(schema)
    out = np.empty((len(body), d))
    nrow = 0
    for line in body:
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != d:
            raise DataError(f"{len(fields)} fields, schema has {d}", row=nrow + 1)
        for j, tok in enumerate(fields):
            try:
                out[nrow, j] = float(tok)
            except ValueError:
                raise DataError(f"cannot parse {tok.strip()!r}", row=nrow + 1, column=schema.columns[j].name) from None
        nrow += 1
    return Dataset(out[:nrow], schema, {"source": str(path), "rows": nrow})


def save_csv(data: Dataset, path, schema_path=None, header: bool = True) -> None:
    """Integer-typed columns as integers, reals as shortest round-trip decimals."""
    cols = data.schema.columns
    with open(path, "w", newline="") as f:
        if header:
            f.write(",".join(data.schema.names) + "\n")
        for row in data.values:
            f.write(",".join(_fmt(v) if c.type != "continuous" else repr(float(v)) for v, c in zip(row, cols)) + "\n")
    if schema_path is not None:
        Path(schema_path).write_text(data.schema.dumps())


# -- evidence masks and benchmark files -------------------------------------------


@dataclass(frozen=True)
class EvidenceMask:
    """Which columns are evidence X: explicit ``columns`` or a seeded ``fraction``.

    With a fraction the columns are permuted by numpy's PCG64 generator seeded
    through SeedSequence(seed) (``Generator.permutation``) and the first
    ``ceil(fraction * d)`` become X.
    """

    fraction: float | None = None
    columns: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.fraction is None) == (self.columns is None):
            raise ValueError("give exactly one of fraction or columns")
        if self.fraction is not None and not 0 < self.fraction < 1:
            raise ValueError("evidence fraction must lie in (0, 1)")

    def x_indices(self, d: int) -> list:
        if self.columns is not None:
            idx = sorted(int(c) for c in self.columns)
            if any(c < 0 or c >= d for c in idx):
                raise ValueError("evidence column out of range")
        else:
            k = math.ceil(self.fraction * d)
            idx = sorted(int(c) for c in make_rng(self.seed).permutation(d)[:k])
        if len(idx) >= d:
            raise ValueError("evidence mask leaves no target columns")
        return idx

    def apply(self, data: Dataset) -> Dataset:
        return data.with_x(self.x_indices(len(data.schema)))


def benchmark_root(root=None) -> Path | None:
    root = root or os.environ.get(BENCHMARK_ENV)
    return Path(root) if root else None


def load_benchmark(name: str, split: str = "train", mask: EvidenceMask | None = None, root=None) -> Dataset:
    """Binary benchmark file ``<root>/<name>.{ts,valid,test}.data`` (comma separated 0/1).

    ``root`` defaults to the CSPN_DATA_DIR environment variable; files may
    also live in a ``<root>/<name>/`` subdirectory.
    """
    base = benchmark_root(root)
    if base is None:
        raise DataError(f"no benchmark directory; set {BENCHMARK_ENV}")
    fname = f"{name}.{BENCHMARK_SPLITS[split]}.data"
    for cand in (base / fname, base / name / fname):
        if cand.exists():
            data = load_csv(cand, None, header=False)
            data.metadata["benchmark"] = name
            return mask.apply(data) if mask is not None else data
    raise DataError(f"benchmark file {fname} not found under {base}")


def split_rows(data: Dataset, fractions=(0.8, 0.2), seed=0) -> list:
    """Seeded row shuffle cut into consecutive pieces with the given fractions."""
    if abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("fractions must sum to 1")
    perm = make_rng(seed).permutation(data.n)
    cuts = np.round(np.cumsum(fractions)[:-1] * data.n).astype(int)
    return [data.rows(np.sort(p)) for p in np.split(perm, cuts)]


# -- synthetic generators ---------------------------------------------------------


def _continuous(ny, nx, y_prefix="y", x_prefix="x") -> Schema:
    return Schema(tuple([Column(f"{y_prefix}{i}", "continuous", "Y") for i in range(ny)] + [Column(f"{x_prefix}{i}", "continuous", "X") for i in range(nx)]))


def _ci_pair(rng, n, noise=0.5):
    x = rng.normal(size=n)
    y = np.column_stack([np.sin(x) + noise * rng.normal(size=n), np.cos(x) + noise * rng.normal(size=n)])
    return np.column_stack([y, x]), _continuous(2, 1), {"partition": [[0], [1]], "independent_pairs": [(0, 1)], "dependent_pairs": []}


def _dependent_pair(rng, n, noise=0.1):
    x = rng.normal(size=n)
    y1 = np.sin(x) + rng.normal(size=n)
    y2 = y1 + noise * rng.normal(size=n)
    return np.column_stack([y1, y2, x]), _continuous(2, 1), {"partition": [[0, 1]], "independent_pairs": [], "dependent_pairs": [(0, 1)]}


def _two_blob_gating(rng, n, num_y=3, num_x=2, separation=4.0):
    """Blob z ~ Bernoulli(1/2) sets both X's location and the Y distribution.

    Given z, the binary Y are independent Bernoulli with blob-specific rates.
    """
    z = rng.integers(0, 2, n)
    centers = np.zeros((2, num_x))
    centers[1, 0] = separation
    x = centers[z] + rng.normal(size=(n, num_x))
    rates = np.array([np.linspace(0.1, 0.3, num_y), np.linspace(0.9, 0.7, num_y)])
    y = (rng.random((n, num_y)) < rates[z]).astype(float)
    schema = Schema(tuple([Column(f"y{i}", "binary", "Y") for i in range(num_y)] + [Column(f"x{i}", "continuous", "X") for i in range(num_x)]))
    return np.column_stack([y, x]), schema, {"component": z.tolist(), "rates": rates.tolist(), "centers": centers.tolist()}


def _poisson_glm(rng, n, coeffs=(0.5, -0.3, 0.2)):
    """y ~ Poisson(exp([x; 1] . coeffs)), x ~ N(0, I); coefficients intercept-last."""
    coeffs = np.asarray(coeffs, dtype=float)
    x = rng.normal(size=(n, coeffs.size - 1))
    y = rng.poisson(np.exp(x @ coeffs[:-1] + coeffs[-1]))
    schema = Schema(tuple([Column("y0", "count", "Y")] + [Column(f"x{i}", "continuous", "X") for i in range(coeffs.size - 1)]))
    return np.column_stack([y, x]), schema, {"coeffs": coeffs.tolist()}


def _block_factorized(rng, n, groups=((0, 2), (1, 3)), num_x=2, coupling=1.0, noise=0.5, binary=False):
    """Each label group shares a latent h_g = x_{g mod d} + coupling * N(0,1).

    y_j = h_g + noise * N(0,1) (thresholded at 0 when ``binary``). Latents are
    independent across groups, so groups are conditionally independent given
    X while labels inside a group are conditionally dependent.
    """
    num_y = sum(len(g) for g in groups)
    x = rng.normal(size=(n, num_x))
    y = np.empty((n, num_y))
    for g, members in enumerate(groups):
        h = x[:, g % num_x] + coupling * rng.normal(size=n)
        for j in members:
            y[:, j] = h + noise * rng.normal(size=n)
    if binary:
        y = (y > 0).astype(float)
    ytype = "binary" if binary else "continuous"
    schema = Schema(tuple([Column(f"y{i}", ytype, "Y") for i in range(num_y)] + [Column(f"x{i}", "continuous", "X") for i in range(num_x)]))
    partition = sorted((sorted(int(v) for v in g) for g in groups), key=lambda g: g[0])
    return np.column_stack([y, x]), schema, {"partition": partition}


GENERATORS = {
    "ci_pair": _ci_pair,
    "dependent_pair": _dependent_pair,
    "two_blob_gating": _two_blob_gating,
    "poisson_glm": _poisson_glm,
    "block_factorized": _block_factorized,
}


def make_synthetic(spec, seed=0, n: int = 500, **params) -> Dataset:
    """Draw ``n`` rows from a named generator; ground truth goes to metadata."""
    if isinstance(spec, dict):
        params = {**{k: v for k, v in spec.items() if k not in ("name", "n")}, **params}
        n = spec.get("n", n)
        spec = spec["name"]
    if spec not in GENERATORS:
        raise ValueError(f"unknown generator {spec!r}; expected one of {sorted(GENERATORS)}")
    values, schema, truth = GENERATORS[spec](make_rng(seed), n, **params)
    return Dataset(values, schema, {"generator": spec, "seed": seed, "n": n, "params": params, **truth})


def ar_count_series(length: int, dim: int = 4, seed=0, persistence: float = 0.6, base: float = 1.5):
    """Poisson autoregression with log intensity ``b + A log1p(c_{t-1})``.

    ``A`` couples each site to itself and its ring neighbour and is scaled to
    spectral radius ``persistence`` so the chain is stable.
    """
    rng = make_rng(seed)
    a = np.diag(rng.uniform(0.5, 1.0, dim))
    a += np.roll(np.diag(rng.uniform(0.2, 0.5, dim)), 1, axis=1)
    a *= persistence / max(abs(np.linalg.eigvals(a)))
    b = base * (1 - persistence) + rng.normal(scale=0.2, size=dim)
    out = np.empty((length, dim))
    c = rng.poisson(np.exp(base), size=dim).astype(float)
    for t in range(length):
        c = rng.poisson(np.exp(b + a @ np.log1p(c))).astype(float)
        out[t] = c
    return out


def next_step_pairs(series) -> Dataset:
    """Rows (y = series[t+1], x = series[t]) for t = 0..n-2, all count columns."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 2 or series.shape[0] < 2:
        raise ValueError("need an n x d series with n >= 2")
    d = series.shape[1]
    schema = Schema(tuple([Column(f"y{i}", "count", "Y") for i in range(d)] + [Column(f"x{i}", "count", "X") for i in range(d)]))
    return Dataset(np.column_stack([series[1:], series[:-1]]), schema, {"generator": "next_step"})


# -- images ---------------------------------------------------------------------


def _pgm_tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while pos < len(buf) and chr(buf[pos]).isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not chr(buf[pos]).isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        out.append(buf[start:pos].decode("ascii"))
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5) as an (h, w) integer array; 16-bit samples are big-endian."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(buf) - pos < need:
        raise DataError(f"{path}: pixel data truncated")
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def write_pgm(path, image, maxval: int = 255) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or np.any(img < 0) or np.any(img > maxval):
        raise DataError("PGM image must be 2-D with values in [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(np.round(img).astype(dtype).tobytes())


_IDX_TYPES = {0x08: "u1", 0x09: "i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """IDX array file (optionally gzip-compressed), as used by standard digit archives."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0 or buf[2] not in _IDX_TYPES:
        raise DataError(f"{path}: bad IDX magic")
    ndim = buf[3]
    dims = tuple(int.from_bytes(buf[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    dtype = np.dtype(_IDX_TYPES[buf[2]])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(buf) - offset < count * dtype.itemsize:
        raise DataError(f"{path}: IDX data truncated")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes[arr.dtype.newbyteorder("=")]
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(bytes([0, 0, code, arr.ndim]))
        for s in arr.shape:
            f.write(int(s).to_bytes(4, "big"))
        f.write(arr.astype(_IDX_TYPES[code]).tobytes())
