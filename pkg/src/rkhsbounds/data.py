"""Observation storage with repeated-input grouping, sampling, and CSV I/O.

A dataset holds d distinct input sites, each carrying one or more scalar
outputs taken at that exact location.  The grouping implicitly defines the
0/1 replication operator that maps per-site values to per-observation values;
it is never materialized as a matrix — ``group_sizes`` determines it fully.

CSV format: numeric columns ``x_1,...,x_n,y``, UTF-8, ``.`` decimal
separator, LF or CRLF line endings, optional header, ``#`` comment lines
ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Inputs closer than this fraction of the domain-box diagonal are treated as
# the same measurement location (exact float equality is fragile after file
# round-trips).
MERGE_RTOL = 1e-9


@dataclass(frozen=True)
class HyperParams:
    """Function-class complexity bound and measurement-noise bound.

    ``gamma`` bounds the RKHS norm of the unknown function; ``delta_bar``
    bounds the magnitude of every additive noise realization.
    """

    gamma: float
    delta_bar: float

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not np.isfinite(self.delta_bar) or self.delta_bar < 0:
            raise ValueError(f"delta_bar must be nonnegative, got {self.delta_bar}")


@dataclass(frozen=True)
class SelectionShape:
    """Group sizes (n_1, ..., n_d); row i of the implied operator repeats
    component i of a site vector n_i times.  All sizes equal to one is the
    identity."""

    group_sizes: tuple

    def __post_init__(self):
        if len(self.group_sizes) == 0 or any(n < 1 for n in self.group_sizes):
            raise ValueError("group sizes must be positive integers")

    @property
    def num_sites(self) -> int:
        return len(self.group_sizes)

    @property
    def num_outputs(self) -> int:
        return int(sum(self.group_sizes))


def selection_apply(shape: SelectionShape, c) -> np.ndarray:
    """Replicate the site vector ``c`` to observation length, group order kept."""
    arr = np.asarray(c, dtype=float).ravel()
    if arr.size != shape.num_sites:
        raise ValueError(
            f"site vector has length {arr.size}, expected {shape.num_sites}"
        )
    return np.repeat(arr, shape.group_sizes)


def selection_site_index(shape: SelectionShape) -> np.ndarray:
    """Site index of every observation row (length num_outputs)."""
    return np.repeat(np.arange(shape.num_sites), shape.group_sizes)


class DomainError(ValueError):
    """A point lies outside the declared domain box."""


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of input sites with grouped outputs.

    Fields
    ------
    inputs : (d, n) array of pairwise-distinct input sites.
    output_groups : tuple of d 1-D arrays; group i holds the outputs observed
        at ``inputs[i]`` in acquisition order.
    domain_box : (n, 2) array of [lo, hi] per input dimension.
    """

    inputs: np.ndarray
    output_groups: tuple
    domain_box: np.ndarray

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        box = np.asarray(self.domain_box, dtype=float).reshape(-1, 2)
        groups = tuple(np.atleast_1d(np.asarray(g, dtype=float)) for g in self.output_groups)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "domain_box", box)
        object.__setattr__(self, "output_groups", groups)
        if inputs.shape[0] != len(groups):
            raise ValueError("one output group per input site is required")
        if inputs.shape[1] != box.shape[0]:
            raise ValueError("domain box dimension does not match inputs")
        if any(g.size == 0 for g in groups):
            raise ValueError("every output group must be non-empty")
        if np.any(box[:, 1] < box[:, 0]):
            raise ValueError("domain box must satisfy lo <= hi per dimension")
        eps = 1e-12 * max(1.0, float(np.max(np.abs(box))))
        if np.any(inputs < box[None, :, 0] - eps) or np.any(inputs > box[None, :, 1] + eps):
            raise DomainError("all inputs must lie inside the domain box")
        if inputs.shape[0] > 1:
            tol = merge_tolerance(box)
            diff = inputs[:, None, :] - inputs[None, :, :]
            dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
            np.fill_diagonal(dist, np.inf)
            if float(dist.min()) <= tol:
                raise ValueError(
                    "input sites closer than the merge tolerance; group their "
                    "outputs instead of duplicating the site"
                )

    @property
    def num_sites(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_outputs(self) -> int:
        return int(sum(g.size for g in self.output_groups))

    @property
    def selection(self) -> SelectionShape:
        return SelectionShape(tuple(int(g.size) for g in self.output_groups))

    @property
    def stacked_outputs(self) -> np.ndarray:
        """All outputs as one vector, groups concatenated in site order."""
        return np.concatenate(self.output_groups)

    def output_bands(self):
        """Per-site interval [max(y_i) - db, min(y_i) + db] pre-images.

        Returns the per-site (group_max, group_min) pair; the noise bound is
        applied by callers.
        """
        gmax = np.array([float(np.max(g)) for g in self.output_groups])
        gmin = np.array([float(np.min(g)) for g in self.output_groups])
        return gmax, gmin

    def fingerprint(self) -> int:
        """Cheap content hash used to detect stale precomputations."""
        h = hash((self.inputs.tobytes(), self.domain_box.tobytes()))
        for g in self.output_groups:
            h = hash((h, g.tobytes()))
        return h


def merge_tolerance(domain_box) -> float:
    """Distance below which two inputs count as the same location."""
    box = np.asarray(domain_box, dtype=float).reshape(-1, 2)
    diag = float(np.linalg.norm(box[:, 1] - box[:, 0]))
    return MERGE_RTOL * max(diag, 1.0)


def empty_dataset(domain_box) -> Dataset:
    """Zero-site dataset placeholder; use :func:`add_sample` to populate."""
    box = np.asarray(domain_box, dtype=float).reshape(-1, 2)
    # Represented as a 0-row inputs array; Dataset validation requires >= 1
    # group, so build directly.
    ds = object.__new__(Dataset)
    object.__setattr__(ds, "inputs", np.zeros((0, box.shape[0])))
    object.__setattr__(ds, "output_groups", ())
    object.__setattr__(ds, "domain_box", box)
    return ds


def add_sample(ds: Dataset, x, y: float) -> Dataset:
    """Return a new dataset with observation (x, y) added.

    If ``x`` is within the merge tolerance of an existing site the output is
    appended to that site's group; otherwise a new site is created.  The
    original dataset is unchanged and existing groups keep their order.
    """
    box = ds.domain_box
    q = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if q.size != box.shape[0]:
        raise ValueError(f"point has dimension {q.size}, expected {box.shape[0]}")
    eps = 1e-12 * max(1.0, float(np.max(np.abs(box))))
    if np.any(q < box[:, 0] - eps) or np.any(q > box[:, 1] + eps):
        raise DomainError(f"point {q.tolist()} lies outside the domain box")
    if ds.num_sites:
        dist = np.linalg.norm(ds.inputs - q[None, :], axis=1)
        j = int(np.argmin(dist))
        if float(dist[j]) <= merge_tolerance(box):
            groups = list(ds.output_groups)
            groups[j] = np.append(groups[j], float(y))
            return Dataset(ds.inputs, tuple(groups), box)
        inputs = np.vstack([ds.inputs, q[None, :]])
        groups = ds.output_groups + (np.array([float(y)]),)
        return Dataset(inputs, groups, box)
    return Dataset(q[None, :], (np.array([float(y)]),), box)


def dataset_from_arrays(X, y, domain_box) -> Dataset:
    """Group raw (X, y) rows into a dataset, merging coincident inputs."""
    pts = np.atleast_2d(np.asarray(X, dtype=float))
    vals = np.asarray(y, dtype=float).ravel()
    if pts.shape[0] != vals.size:
        raise ValueError("one output per input row is required")
    ds = empty_dataset(domain_box)
    for row, val in zip(pts, vals):
        ds = add_sample(ds, row, val)
    return ds


class CsvFormatError(ValueError):
    """Malformed dataset CSV (bad arity, non-numeric field, or empty file)."""


def load_csv(path, domain_box=None, has_header: str = "auto",
             input_dim: int | None = None) -> Dataset:
    """Load a dataset from ``x_1,...,x_n,y`` rows.

    Rows whose inputs fall within the merge tolerance are grouped; group
    order is first-appearance order.  ``domain_box`` defaults to the bounding
    box of the loaded inputs.  ``has_header`` is "auto" (skip the first line
    if any of its fields is non-numeric), "yes", or "no".
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    rows = []
    numbers = []
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            rows.append((lineno, line))
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    start = 0
    if has_header == "yes":
        start = 1
    elif has_header == "auto":
        fields = rows[0][1].split(",")
        try:
            [float(f) for f in fields]
        except ValueError:
            start = 1
    if start >= len(rows):
        raise CsvFormatError(f"{path}: no data rows after header")
    arity = None
    for lineno, line in rows[start:]:
        fields = [f.strip() for f in line.split(",")]
        if arity is None:
            arity = len(fields)
            if arity < 2:
                raise CsvFormatError(
                    f"{path}: row {lineno}: need at least two columns (x, y)"
                )
            if input_dim is not None and arity != input_dim + 1:
                raise CsvFormatError(
                    f"{path}: row {lineno}: expected {input_dim + 1} columns, "
                    f"found {arity}"
                )
        elif len(fields) != arity:
            raise CsvFormatError(
                f"{path}: row {lineno}: expected {arity} columns, found {len(fields)}"
            )
        try:
            numbers.append([float(f) for f in fields])
        except ValueError as exc:
            raise CsvFormatError(f"{path}: row {lineno}: {exc}") from None
    table = np.asarray(numbers, dtype=float)
    X, y = table[:, :-1], table[:, -1]
    if domain_box is None:
        lo = X.min(axis=0)
        hi = X.max(axis=0)
        domain_box = np.stack([lo, hi], axis=1)
    return dataset_from_arrays(X, y, domain_box)


def save_csv(path, ds: Dataset):
    """Write a dataset back out in the same row format (one row per output)."""
    site = selection_site_index(ds.selection)
    y = ds.stacked_outputs
    with open(path, "w", encoding="utf-8") as fh:
        for obs, i in enumerate(site):
            coords = ",".join(repr(float(v)) for v in ds.inputs[i])
            fh.write(f"{coords},{y[obs]!r}\n")


def sample_inputs(strategy: str, count: int, domain_box, seed=None) -> np.ndarray:
    """Generate input sites: an equidistant lattice or i.i.d. uniform draws.

    Grid sampling requires ``count`` to be a perfect n-th power for an n-D
    box; the lattice includes the box corners.  Uniform sampling is
    reproducible from ``seed``.
    """
    box = np.asarray(domain_box, dtype=float).reshape(-1, 2)
    n = box.shape[0]
    if count < 1:
        raise ValueError("count must be positive")
    if strategy == "grid":
        k = round(count ** (1.0 / n))
        if k**n != count:
            # the float root can land one off for large powers
            for cand in (k - 1, k + 1):
                if cand >= 1 and cand**n == count:
                    k = cand
                    break
            else:
                raise ValueError(
                    f"grid sampling in {n}-D needs a perfect {n}-th power, got {count}"
                )
        axes = [np.linspace(box[i, 0], box[i, 1], k) for i in range(n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)
    if strategy in ("uniform", "uniform-random"):
        rng = np.random.default_rng(seed)
        return rng.uniform(box[:, 0], box[:, 1], size=(count, n))
    raise ValueError(f"unknown sampling strategy {strategy!r}")


# Clipped-Gaussian noise uses a standard deviation such that draws land in
# the +-delta_bar band with 99% probability before clipping.
CLIP_SIGMA_FACTOR = 2.58


def corrupt_outputs(values, noise_model: str, delta_bar: float, seed=None) -> np.ndarray:
    """Add bounded measurement noise to ``values``.

    ``uniform``: i.i.d. Uniform[-delta_bar, delta_bar].
    ``clipped-gaussian``: zero-mean Gaussian with standard deviation
    ``delta_bar / 2.58``, clipped to [-delta_bar, delta_bar].

    Every realization satisfies |noise| <= delta_bar; results are
    reproducible from ``seed``.
    """
    if delta_bar < 0:
        raise ValueError("delta_bar must be nonnegative")
    vals = np.asarray(values, dtype=float)
    if delta_bar == 0:
        return vals.copy()
    rng = np.random.default_rng(seed)
    if noise_model == "uniform":
        noise = rng.uniform(-delta_bar, delta_bar, size=vals.shape)
    elif noise_model == "clipped-gaussian":
        noise = rng.normal(0.0, delta_bar / CLIP_SIGMA_FACTOR, size=vals.shape)
        noise = np.clip(noise, -delta_bar, delta_bar)
    else:
        raise ValueError(f"unknown noise model {noise_model!r}")
    return vals + noise
