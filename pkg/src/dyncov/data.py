"""Dataset container, synthetic generators, CSV ingestion, and CV splitting.

Both generators are pure functions of their seed and parameters. The input
axis of each synthetic study is a design choice (the underlying construction
only fixes the number of observations), so the grid is configurable: study 1
uses an evenly spaced grid on [0, span] and study 2 a fixed spacing per
observation, making one correlation on-off cycle (two 50-observation blocks)
span 100 * spacing on the input axis.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gp import chol_jitter
from .kernels import Rbf
from .streams import substream
from .wishart import LatentState, sigma_path


@dataclass
class Dataset:
    """Observations with optional generating truth.

    x : (n,) real inputs, any spacing, not necessarily sorted
    y : (n, d) observed rows
    truth : optional (n, d, d) generating covariance path
    meta : generator parameters and bookkeeping (JSON-serializable)
    """

    x: np.ndarray
    y: np.ndarray
    truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 1:
            raise ValueError("x must be one-dimensional")
        if self.y.ndim != 2 or self.y.shape[0] != self.x.shape[0]:
            raise ValueError(
                f"y must be (n, d) with n = {self.x.shape[0]}, got {self.y.shape}"
            )
        if not np.all(np.isfinite(self.x)):
            raise ValueError("x contains non-finite values")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("y contains non-finite values")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=float)
            n, d = self.y.shape
            if self.truth.shape != (n, d, d):
                raise ValueError(
                    f"truth must be (n, d, d) = ({n}, {d}, {d}), "
                    f"got {self.truth.shape}"
                )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dimension(self) -> int:
        return self.y.shape[1]

    def to_json(self) -> dict:
        out = {"x": self.x.tolist(), "y": self.y.tolist(), "meta": self.meta}
        if self.truth is not None:
            out["truth"] = self.truth.tolist()
        return out

    @staticmethod
    def from_json(obj: dict) -> "Dataset":
        return Dataset(
            x=np.asarray(obj["x"], dtype=float),
            y=np.asarray(obj["y"], dtype=float),
            truth=(np.asarray(obj["truth"], dtype=float)
                   if obj.get("truth") is not None else None),
            meta=dict(obj.get("meta", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @staticmethod
    def load(path) -> "Dataset":
        return Dataset.from_json(json.loads(Path(path).read_text()))


def generate_sim1(
    seed: int,
    n: int = 300,
    d: int = 3,
    v: int = 4,
    lengthscale: float = 0.35,
    span: float = 1.0,
) -> Dataset:
    """Smoothly varying ground truth: latent GP draws squared into a path.

    Draws d*v independent GP paths with a squared-exponential kernel on an
    evenly spaced grid over [0, span], builds the covariance path with an
    identity scale factor, and samples one observation row per input from a
    zero-mean Gaussian with that covariance.
    """
    xs = np.linspace(0.0, span, n)
    rng = substream(seed, "sim1-latents")
    factor = chol_jitter(Rbf(lengthscale).gram(xs), name="latent gram matrix")
    f = (rng.standard_normal((d * v, n)) @ factor.lower.T).reshape(d, v, n)
    state = LatentState(
        f=f,
        theta=np.array([lengthscale]),
        scale_chol=np.eye(d),
        noise_diag=np.zeros(d),
    )
    truth = sigma_path(state)
    y_rng = substream(seed, "sim1-observations")
    chols = np.linalg.cholesky(truth)
    eps = y_rng.standard_normal((n, d))
    y = np.einsum("ijk,ik->ij", chols, eps)
    meta = {
        "generator": "sim1",
        "seed": seed,
        "n": n,
        "d": d,
        "dof": v,
        "lengthscale": lengthscale,
        "span": span,
    }
    return Dataset(x=xs, y=y, truth=truth, meta=meta)


def sim2_truth(
    n: int = 600, d: int = 3, period: int = 50, high: float = 0.8
) -> np.ndarray:
    """Deterministic block-switching path: unit variances, off-diagonals
    alternating between 0 and `high` every `period` observations (first block
    at 0)."""
    truth = np.tile(np.eye(d), (n, 1, 1))
    blocks = (np.arange(n) // period) % 2
    off = np.where(blocks == 1, high, 0.0)
    mask = ~np.eye(d, dtype=bool)
    truth[:, mask] += off[:, None] * np.ones(mask.sum())
    return truth


def generate_sim2(
    seed: int,
    n: int = 600,
    d: int = 3,
    period: int = 50,
    high: float = 0.8,
    spacing: float = 1.0 / 300.0,
) -> Dataset:
    """Rapid state-switching ground truth with a train/test split recorded.

    The truth path is deterministic (see `sim2_truth`); only the observations
    depend on the seed. Metadata records the first-half/second-half split and
    the input-axis length of one full on-off cycle (2 * period * spacing).
    """
    truth = sim2_truth(n=n, d=d, period=period, high=high)
    xs = np.arange(n) * spacing
    rng = substream(seed, "sim2-observations")
    chols = np.linalg.cholesky(truth)
    eps = rng.standard_normal((n, d))
    y = np.einsum("ijk,ik->ij", chols, eps)
    meta = {
        "generator": "sim2",
        "seed": seed,
        "n": n,
        "d": d,
        "period": period,
        "high": high,
        "spacing": spacing,
        "n_train": n // 2,
        "n_test": n - n // 2,
        "cycle_x": 2 * period * spacing,
    }
    return Dataset(x=xs, y=y, truth=truth, meta=meta)


def load_csv(
    path,
    x_column: str,
    value_columns: list[str],
    downsample_every: int = 1,
    delimiter: str = ",",
) -> Dataset:
    """Read (x, values) columns from a delimited file with a header row.

    Rows with any empty cell among the requested columns are dropped (the
    count lands in meta["dropped_rows"]); a non-numeric cell raises a parse
    error naming the file line. With downsample_every = k, every k-th row of
    the surviving sequence is kept, starting at the first.
    """
    if downsample_every < 1:
        raise ValueError("downsample_every must be >= 1")
    if not value_columns:
        raise ValueError("need at least one value column")
    path = Path(path)
    xs: list[float] = []
    rows: list[list[float]] = []
    dropped = 0
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle, delimiter=delimiter)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file, expected a header row")
        missing = [c for c in [x_column, *value_columns]
                   if c not in reader.fieldnames]
        if missing:
            raise ValueError(
                f"{path}: columns {missing} not found in header {reader.fieldnames}"
            )
        for record in reader:
            line_no = reader.line_num
            cells = [record.get(x_column), *(record.get(c) for c in value_columns)]
            if any(c is None or c.strip() == "" for c in cells):
                dropped += 1
                continue
            try:
                values = [float(c) for c in cells]
            except ValueError as exc:
                raise ValueError(f"{path}: line {line_no}: {exc}") from None
            xs.append(values[0])
            rows.append(values[1:])
    kept = slice(None, None, downsample_every)
    x = np.asarray(xs, dtype=float)[kept]
    y = np.asarray(rows, dtype=float).reshape(len(rows), len(value_columns))[kept]
    meta = {
        "source": str(path),
        "x_column": x_column,
        "value_columns": list(value_columns),
        "downsample_every": downsample_every,
        "dropped_rows": dropped,
        "rows_before_downsample": len(rows),
    }
    return Dataset(x=x, y=y, meta=meta)


@dataclass(frozen=True)
class CvFold:
    """Half-open index ranges: train [0, train_end), test [train_end, test_end)."""

    train_end: int
    test_end: int

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(0, self.train_end)

    @property
    def test_indices(self) -> np.ndarray:
        return np.arange(self.train_end, self.test_end)


@dataclass(frozen=True)
class CvPlan:
    folds: tuple[CvFold, ...]


def expanding_cv(n: int, fold_count: int = 10, test_len: int = 10) -> CvPlan:
    """Expanding-window splitter: fold f trains on the first f * (n // fold_count)
    rows and tests on the next test_len rows (truncated at n on the last fold).

    Every fold must have at least one test row; otherwise the data is too
    short for the requested plan.
    """
    if fold_count < 1 or test_len < 1:
        raise ValueError("fold_count and test_len must be >= 1")
    step = n // fold_count
    if step < 1:
        raise ValueError(f"n = {n} is too small for {fold_count} folds")
    folds = []
    for f in range(1, fold_count + 1):
        train_end = f * step
        test_end = min(train_end + test_len, n)
        if test_end <= train_end:
            raise ValueError(
                f"fold {f} has no test rows: n = {n}, fold_count = {fold_count}, "
                f"test_len = {test_len}"
            )
        folds.append(CvFold(train_end=train_end, test_end=test_end))
    return CvPlan(folds=tuple(folds))


def subtract_ema(y, window: int = 10) -> np.ndarray:
    """Approximate detrending helper: subtract a causal exponential moving
    average (of the past, excluding the present row) from each column. Opt-in;
    the smoothing window is a tuning choice, not an estimate."""
    from .wishart import EmaMean

    y = np.asarray(y, dtype=float)
    return y - EmaMean(window=window).values(y)
