"""Model configuration, logged datasets, and their on-disk formats.

Task ids and actions are 0-based in memory. The JSONL and CSV files use
1-based ids; conversion happens only in the readers and writers below.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ._validation import (
    NORM_TOL,
    ConfigurationError,
    check_features,
    check_spd,
    check_vector,
    max_row_norm,
    spd_inverse,
)


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; the message names the file and line."""


@dataclass(frozen=True, eq=False)
class HierModelConfig:
    """Known parameters of the two-level linear-Gaussian model.

    mu_* ~ N(mu_q, sigma_q), theta_s ~ N(mu_*, sigma_0), Y ~ N(phi^T theta_s, sigma^2).
    """

    mu_q: NDArray[np.float64]
    sigma_q: NDArray[np.float64]
    sigma_0: NDArray[np.float64]
    sigma: float

    def __post_init__(self):
        mu_q = np.atleast_1d(np.asarray(self.mu_q, dtype=np.float64))
        d = mu_q.shape[0]
        object.__setattr__(self, "mu_q", check_vector(mu_q, d, "mu_q"))
        object.__setattr__(self, "sigma_q", check_spd(self.sigma_q, d, "sigma_q"))
        object.__setattr__(self, "sigma_0", check_spd(self.sigma_0, d, "sigma_0"))
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ConfigurationError(f"sigma must be > 0, got {self.sigma}")
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def d(self) -> int:
        return self.mu_q.shape[0]

    @cached_property
    def prec_0(self) -> NDArray[np.float64]:
        """Sigma_0^-1, computed once per config."""
        return spd_inverse(self.sigma_0)

    @cached_property
    def prec_q(self) -> NDArray[np.float64]:
        return spd_inverse(self.sigma_q)

    @classmethod
    def isotropic(cls, d: int, sigma_q: float, sigma_0: float, sigma: float, mu_q=None):
        """Scales are standard deviations: Sigma_q = sigma_q^2 I, Sigma_0 = sigma_0^2 I."""
        mu_q = np.zeros(d) if mu_q is None else mu_q
        eye = np.eye(d)
        return cls(mu_q, sigma_q**2 * eye, sigma_0**2 * eye, sigma)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "mu_q": self.mu_q.tolist(),
            "sigma_q": self.sigma_q.tolist(),
            "sigma_0": self.sigma_0.tolist(),
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "HierModelConfig":
        return cls(
            np.asarray(obj["mu_q"], dtype=float),
            np.asarray(obj["sigma_q"], dtype=float),
            np.asarray(obj["sigma_0"], dtype=float),
            float(obj["sigma"]),
        )


@dataclass(frozen=True)
class LoggedRecord:
    task_id: int
    features: tuple[float, ...]
    action: int
    reward: float


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    """Column-oriented log of (task, action, features, reward) interactions."""

    tasks: NDArray[np.int64]
    actions: NDArray[np.int64]
    features: NDArray[np.float64]
    rewards: NDArray[np.float64]
    m: int
    d: int
    K: int = 1
    check_norms: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.m < 1 or self.d < 1 or self.K < 1:
            raise ConfigurationError(f"m, d, K must be positive, got {(self.m, self.d, self.K)}")
        feats = check_features(np.asarray(self.features, dtype=float).reshape(-1, self.d), self.d)
        n = feats.shape[0]
        tasks = np.asarray(self.tasks, dtype=np.int64).reshape(n)
        actions = np.asarray(self.actions, dtype=np.int64).reshape(n)
        rewards = np.asarray(self.rewards, dtype=np.float64).reshape(n)
        if n and (tasks.min() < 0 or tasks.max() >= self.m):
            raise ConfigurationError(f"task ids must lie in [0, {self.m})")
        if n and (actions.min() < 0 or actions.max() >= self.K):
            raise ConfigurationError(f"actions must lie in [0, {self.K})")
        if not np.all(np.isfinite(rewards)):
            raise ConfigurationError("rewards contain non-finite values")
        if self.check_norms and max_row_norm(feats) > 1 + NORM_TOL:
            bad = int(np.argmax(np.linalg.norm(feats, axis=1)))
            raise ConfigurationError(f"record {bad} has feature norm > 1")
        for name, val in (("tasks", tasks), ("actions", actions), ("features", feats), ("rewards", rewards)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @classmethod
    def empty(cls, m: int, d: int, K: int = 1) -> "LoggedDataset":
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros((0, d)), np.zeros(0), m, d, K)

    @classmethod
    def from_records(cls, records: Iterable[LoggedRecord], m: int, d: int, K: int = 1, **kw):
        records = list(records)
        return cls(
            np.array([r.task_id for r in records], dtype=np.int64),
            np.array([r.action for r in records], dtype=np.int64),
            np.array([r.features for r in records], dtype=float).reshape(len(records), d),
            np.array([r.reward for r in records], dtype=float),
            m,
            d,
            K,
            **kw,
        )

    def records(self) -> Iterator[LoggedRecord]:
        for t, a, x, y in zip(self.tasks, self.actions, self.features, self.rewards):
            yield LoggedRecord(int(t), tuple(float(v) for v in x), int(a), float(y))

    def task_counts(self) -> NDArray[np.int64]:
        return np.bincount(self.tasks, minlength=self.m)

    def subset(self, task_id: int) -> "LoggedDataset":
        """Records of a single task, relabelled as task 0 of a one-task dataset."""
        idx = self.tasks == task_id
        return LoggedDataset(
            np.zeros(int(idx.sum()), int), self.actions[idx], self.features[idx],
            self.rewards[idx], 1, self.d, self.K, self.check_norms,
        )

    def permuted(self, order: ArrayLike) -> "LoggedDataset":
        order = np.asarray(order)
        return LoggedDataset(
            self.tasks[order], self.actions[order], self.features[order],
            self.rewards[order], self.m, self.d, self.K, self.check_norms,
        )

    def header(self) -> dict:
        return {"m": self.m, "d": self.d, "K": self.K}


# ---------------------------------------------------------------- file formats


def dumps_jsonl(dataset: LoggedDataset) -> str:
    lines = [json.dumps(dataset.header())]
    for t, a, x, y in zip(dataset.tasks, dataset.actions, dataset.features, dataset.rewards):
        rec = {"task_id": int(t) + 1, "action": int(a) + 1, "features": x.tolist(), "reward": float(y)}
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def write_dataset(dataset: LoggedDataset, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        text = dumps_csv(dataset)
    else:
        text = dumps_jsonl(dataset)
    path.write_text(text)


def dumps_csv(dataset: LoggedDataset) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(dataset.header()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "action", "reward"] + [f"f{i + 1}" for i in range(dataset.d)])
    for t, a, x, y in zip(dataset.tasks, dataset.actions, dataset.features, dataset.rewards):
        w.writerow([int(t) + 1, int(a) + 1, repr(float(y))] + [repr(float(v)) for v in x])
    return buf.getvalue()


def _parse_header(obj, where: str) -> tuple[int, int, int]:
    try:
        m, d = int(obj["m"]), int(obj["d"])
        K = int(obj.get("K", 1))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{where}: header must carry integer m, d, K") from exc
    return m, d, K


def loads_jsonl(text: str, source: str = "<string>") -> LoggedDataset:
    lines = text.splitlines()
    header = None
    tasks, actions, feats, rewards = [], [], [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{where}: malformed JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise DatasetFormatError(f"{where}: expected a JSON object")
        if header is None:
            if "task_id" in obj:
                raise DatasetFormatError(f"{where}: missing header line with m, d, K")
            header = _parse_header(obj, where)
            continue
        try:
            x = [float(v) for v in obj["features"]]
            t, a, y = int(obj["task_id"]), int(obj["action"]), float(obj["reward"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{where}: bad record ({exc})") from exc
        if len(x) != header[1]:
            raise DatasetFormatError(f"{where}: expected {header[1]} features, got {len(x)}")
        tasks.append(t - 1)
        actions.append(a - 1)
        feats.append(x)
        rewards.append(y)
    if header is None:
        raise DatasetFormatError(f"{source}: empty dataset file (no header)")
    m, d, K = header
    try:
        return LoggedDataset(
            np.array(tasks, dtype=np.int64), np.array(actions, dtype=np.int64),
            np.array(feats, dtype=float).reshape(-1, d), np.array(rewards), m, d, K,
        )
    except ConfigurationError as exc:
        raise DatasetFormatError(f"{source}: {exc}") from exc


def loads_csv(text: str, source: str = "<string>") -> LoggedDataset:
    lines = text.splitlines()
    header = None
    if lines and lines[0].startswith("#"):
        try:
            header = _parse_header(json.loads(lines[0][1:]), f"{source}:1")
        except json.JSONDecodeError:
            header = None
        body_start = 1
    else:
        body_start = 0
    reader = csv.reader(lines[body_start:])
    try:
        cols = next(reader)
    except StopIteration as exc:
        raise DatasetFormatError(f"{source}: missing CSV column header") from exc
    fcols = [c for c in cols if c.startswith("f")]
    needed = {"task_id", "action", "reward"}
    if not needed <= set(cols):
        raise DatasetFormatError(f"{source}: CSV needs columns task_id, action, reward, f1..fd")
    pos = {c: i for i, c in enumerate(cols)}
    fidx = [pos[f"f{i + 1}"] for i in range(len(fcols))]
    rows = []
    for offset, row in enumerate(reader):
        lineno = body_start + 2 + offset
        try:
            rows.append((
                int(row[pos["task_id"]]) - 1, int(row[pos["action"]]) - 1,
                [float(row[i]) for i in fidx], float(row[pos["reward"]]),
            ))
        except (IndexError, ValueError) as exc:
            raise DatasetFormatError(f"{source}:{lineno}: bad CSV row ({exc})") from exc
    d = len(fidx)
    if header is None:
        m = max((r[0] for r in rows), default=0) + 1
        K = max((r[1] for r in rows), default=0) + 1
    else:
        m, hd, K = header
        if hd != d:
            raise DatasetFormatError(f"{source}: header d={hd} but {d} feature columns")
    try:
        return LoggedDataset(
            np.array([r[0] for r in rows], dtype=np.int64),
            np.array([r[1] for r in rows], dtype=np.int64),
            np.array([r[2] for r in rows], dtype=float).reshape(-1, d),
            np.array([r[3] for r in rows], dtype=float), m, d, K,
        )
    except ConfigurationError as exc:
        raise DatasetFormatError(f"{source}: {exc}") from exc


def read_dataset(path: str | Path) -> LoggedDataset:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".csv":
        return loads_csv(text, str(path))
    return loads_jsonl(text, str(path))
