"""Synthetic multi-domain datasets, leave-one-domain-out splits and text I/O.

Every generator is a pure function of its arguments: each domain draws from
its own child seed, so datasets are reproducible bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

FORMAT_TAG = "con2em-dataset v1"


@dataclass
class Domain:
    domain_id: int
    X: np.ndarray
    y: np.ndarray


@dataclass
class DomainDataset:
    domains: list[Domain]
    generator: str
    seed: int
    n_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate domain ids {ids}")
        dims = {d.X.shape[1] for d in self.domains}
        if len(dims) > 1:
            raise ValueError(f"domains disagree on input_dim: {sorted(dims)}")

    @property
    def input_dim(self) -> int:
        return self.domains[0].X.shape[1]

    @property
    def domain_ids(self) -> list[int]:
        return [d.domain_id for d in self.domains]

    def domain(self, domain_id: int) -> Domain:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(f"unknown domain id {domain_id}")


def _domain_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


# -- generators --------------------------------------------------------------
def gen_shifted_blobs(n_domains: int = 4, n_classes: int = 3, n_per_cell: int = 200,
                      input_dim: int = 8, shift_scale: float = 6.0, seed: int = 0,
                      class_sep: float = 1.0, rotation_per_shift: float = 0.02) -> DomainDataset:
    """Gaussian class blobs, moved by a per-domain rotation and translation.

    Class centers are drawn once from ``N(0, class_sep^2 I)``. Domain ``d``
    maps every center ``c`` to ``R_d c + t_d`` where ``|t_d| = shift_scale``
    (mutually orthogonal directions while ``n_domains <= input_dim``) and
    ``R_d`` is a random rotation by an angle of ``rotation_per_shift *
    shift_scale``. Instances are the moved center plus unit Gaussian noise, so
    every class forms one cluster per domain.
    """
    if n_domains < 2 or n_classes < 2 or input_dim < 2 or n_per_cell < 1:
        raise ValueError("need n_domains, n_classes, input_dim >= 2 and n_per_cell >= 1")
    if shift_scale < 0:
        raise ValueError("shift_scale must be non-negative")
    base = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    centers = base.normal(0.0, class_sep, (n_classes, input_dim))
    if n_domains <= input_dim:
        q, _ = np.linalg.qr(base.standard_normal((input_dim, input_dim)))
        directions = q[:, :n_domains].T
    else:
        directions = base.standard_normal((n_domains, input_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    domains, transforms = [], []
    for d, rng in enumerate(_domain_rngs(seed, n_domains)):
        skew = rng.standard_normal((input_dim, input_dim))
        skew = skew - skew.T
        skew /= np.linalg.norm(skew, 2)  # unit rotation rate
        rot = expm(rotation_per_shift * shift_scale * skew)
        shift = shift_scale * directions[d]
        moved = centers @ rot.T + shift
        y = _balanced_labels(n_per_cell * n_classes, n_classes)
        X = moved[y] + rng.standard_normal((len(y), input_dim))
        domains.append(Domain(d, X, y))
        transforms.append({"translation": shift.tolist(),
                           "angle": rotation_per_shift * shift_scale})
    meta = {"n_per_cell": n_per_cell, "shift_scale": shift_scale, "class_sep": class_sep,
            "centers": centers.tolist(), "transforms": transforms}
    return DomainDataset(domains, "shifted_blobs", seed, n_classes, meta)


def two_moons(n: int, noise_std: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Interleaved half circles centered at the origin; label = moon id."""
    y = _balanced_labels(n, 2)
    t = rng.uniform(0.0, np.pi, n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    X = np.where(y[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
    X = X + noise_std * rng.standard_normal((n, 2))
    return X, y


def rotation_2d(degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def gen_rotated_moons(angles=(0, 15, 30, 45), n_per_domain: int = 400, noise_std: float = 0.1,
                      seed: int = 0) -> DomainDataset:
    """One two-moons sample per domain, rotated about the origin by the domain's angle."""
    angles = [float(a) for a in angles]
    if len(angles) < 2:
        raise ValueError("need at least two angles")
    if len(set(angles)) != len(angles):
        raise ValueError(f"duplicate angles {angles}")
    domains = []
    for d, (angle, rng) in enumerate(zip(angles, _domain_rngs(seed, len(angles)))):
        X, y = two_moons(n_per_domain, noise_std, rng)
        domains.append(Domain(d, X @ rotation_2d(angle).T, y))
    meta = {"angles": angles, "n_per_domain": n_per_domain, "noise_std": noise_std}
    return DomainDataset(domains, "rotated_moons", seed, 2, meta)


def gen_correlation_flip(rates=(0.9, 0.8, -0.9), n_per_domain: int = 1000, seed: int = 0,
                         n_signal: int = 2, signal_mean: float = 0.48) -> DomainDataset:
    """Binary task with weak invariant features and one spurious feature.

    The ``n_signal`` invariant features are ``(2y - 1) * signal_mean`` plus
    unit noise in every domain. The last feature is a binary "color" that
    equals the label with probability ``(1 + rate) / 2``, so its correlation
    with the label flips sign across domains with positive and negative rates.
    """
    rates = [float(r) for r in rates]
    if len(rates) < 2:
        raise ValueError("need at least two domains")
    if any(not -1.0 <= r <= 1.0 for r in rates):
        raise ValueError(f"rates must lie in [-1, 1], got {rates}")
    domains = []
    for d, (rate, rng) in enumerate(zip(rates, _domain_rngs(seed, len(rates)))):
        y = _balanced_labels(n_per_domain, 2)
        signal = (2.0 * y[:, None] - 1.0) * signal_mean + rng.standard_normal((n_per_domain, n_signal))
        agree = rng.random(n_per_domain) < (1.0 + rate) / 2.0
        color = np.where(agree, y, 1 - y).astype(np.float64)
        domains.append(Domain(d, np.column_stack([signal, color]), y))
    meta = {"rates": rates, "n_per_domain": n_per_domain, "n_signal": n_signal,
            "signal_mean": signal_mean}
    return DomainDataset(domains, "correlation_flip", seed, 2, meta)


GENERATORS = {
    "shifted_blobs": gen_shifted_blobs,
    "rotated_moons": gen_rotated_moons,
    "correlation_flip": gen_correlation_flip,
}


def generate(name: str, params: dict) -> DomainDataset:
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return fn(**params)


# -- splits ------------------------------------------------------------------
@dataclass
class SplitPlan:
    target_domain: int
    train: dict[int, np.ndarray]
    val: dict[int, np.ndarray]
    seed: int

    @property
    def source_domains(self) -> list[int]:
        return sorted(self.train)


def _val_quota(class_counts: np.ndarray, frac: float) -> np.ndarray:
    """Per-class validation counts summing to round(frac * n), by largest remainder."""
    exact = frac * class_counts
    quota = np.floor(exact).astype(int)
    missing = int(round(frac * class_counts.sum())) - quota.sum()
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[:missing]] += 1
    return quota


def split_lodo(dataset: DomainDataset, target_domain: int, seed: int = 0,
               val_frac: float = 0.2) -> SplitPlan:
    """Hold out ``target_domain``; split each source 80/20, stratified by class."""
    if target_domain not in dataset.domain_ids:
        raise KeyError(f"unknown domain id {target_domain}")
    train, val = {}, {}
    sources = [d for d in dataset.domains if d.domain_id != target_domain]
    for dom, rng in zip(sources, _domain_rngs(seed, len(sources))):
        classes = np.arange(dataset.n_classes)
        members = [np.flatnonzero(dom.y == k) for k in classes]
        quota = _val_quota(np.array([len(m) for m in members]), val_frac)
        tr, va = [], []
        for m, q in zip(members, quota):
            perm = rng.permutation(m)
            va.append(perm[:q])
            tr.append(perm[q:])
        train[dom.domain_id] = np.sort(np.concatenate(tr))
        val[dom.domain_id] = np.sort(np.concatenate(va))
    return SplitPlan(target_domain, train, val, seed)


# -- columnar text format ------------------------------------------------------
def dumps_dataset(dataset: DomainDataset) -> str:
    """Serialize to '#'-prefixed header lines followed by CSV rows.

    Header keys: format, generator, seed, n_classes, input_dim, metadata (JSON).
    Rows: ``domain,label,x0,...,x{D-1}`` with floats at 17 significant digits.
    """
    buf = io.StringIO()
    buf.write(f"# format: {FORMAT_TAG}\n")
    buf.write(f"# generator: {dataset.generator}\n")
    buf.write(f"# seed: {dataset.seed}\n")
    buf.write(f"# n_classes: {dataset.n_classes}\n")
    buf.write(f"# input_dim: {dataset.input_dim}\n")
    buf.write(f"# metadata: {json.dumps(dataset.metadata, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["domain", "label"] + [f"x{i}" for i in range(dataset.input_dim)])
    for dom in dataset.domains:
        for x, y in zip(dom.X, dom.y):
            writer.writerow([dom.domain_id, int(y)] + [format(v, ".17g") for v in x])
    return buf.getvalue()


def loads_dataset(text: str) -> DomainDataset:
    header: dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition(":")
        header[key.strip()] = value.strip()
        i += 1
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"not a {FORMAT_TAG} file")
    rows = list(csv.reader(lines[i + 1:]))
    input_dim = int(header["input_dim"])
    by_domain: dict[int, tuple[list, list]] = {}
    for row in rows:
        if len(row) != input_dim + 2:
            raise ValueError(f"row has {len(row)} fields, expected {input_dim + 2}")
        xs, ys = by_domain.setdefault(int(row[0]), ([], []))
        ys.append(int(row[1]))
        xs.append([float(v) for v in row[2:]])
    domains = [Domain(d, np.array(xs, dtype=np.float64).reshape(-1, input_dim), np.array(ys, dtype=np.int64))
               for d, (xs, ys) in by_domain.items()]
    return DomainDataset(domains, header["generator"], int(header["seed"]), int(header["n_classes"]),
                         json.loads(header["metadata"]))


def save_dataset(dataset: DomainDataset, path) -> None:
    Path(path).write_text(dumps_dataset(dataset))


def load_dataset(path) -> DomainDataset:
    return loads_dataset(Path(path).read_text())


__all__ = [
    "Domain",
    "DomainDataset",
    "SplitPlan",
    "gen_shifted_blobs",
    "gen_rotated_moons",
    "gen_correlation_flip",
    "two_moons",
    "generate",
    "GENERATORS",
    "split_lodo",
    "dumps_dataset",
    "loads_dataset",
    "save_dataset",
    "load_dataset",
]
