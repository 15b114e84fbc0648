"""Encoder + instance classifier trained jointly with the distribution-level branch.

One call to :meth:`Trainer.step` runs a full iteration: encode the batch,
compute per-instance and per-cell Gaussian statistics, update the momentum
bank, build Universum-mixed and mixup distributions, evaluate the
distribution loss, resample pseudo-instances for the instance loss, and take
an Adam step on ``L_ins + beta * L_dis``.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .augment import resample_many, sample_mixup_pairs
from .autodiff import Adam, Tensor, ValidationError, concat, one_hot, scale, softmax_cross_entropy, stack
from .data import DomainDataset, SplitPlan, split_lodo
from .kernel import DEFAULT_LADDER, KernelConfig, ProjectionHead, classify_many, median_heuristic
from .layers import MLP, Linear
from .stats import StatsBank, StatsHeads, aggregate_by_cell, momentum_update, per_instance_stats

METHODS = ("erm", "erm_mixup", "con2em")
CHECKPOINT_VERSION = 1

# independent generator streams; keys are part of the determinism contract
_STREAMS = {"encoder": 0, "classifier": 1, "stats": 2, "head": 3, "adapter": 4,
            "batch": 10, "dist_mixup": 11, "resample": 12, "input_mixup": 13}


@dataclass
class TrainConfig:
    method: str = "con2em"
    lr: float = 5e-5
    batch_size: int = 32
    alpha: float = 0.2
    beta: float = 1e-2
    rho: float = 0.95
    lambda_mix: float = 0.5
    max_iters: int = 5000
    seed: int = 0
    latent_dim: int = 16
    stats_dim: int = 16
    hidden_dim: int = 32
    dist_loss: bool = True
    dist_mixup: bool = True
    resample: bool = True
    warmup: bool = True
    bandwidth_ladder: tuple[float, ...] = DEFAULT_LADDER
    eval_every: int = 100
    log_every: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("lr", "batch_size", "alpha", "latent_dim", "stats_dim", "hidden_dim",
                     "eval_every", "log_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta < 0 or self.max_iters < 0:
            raise ValueError("beta and max_iters must be non-negative")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if not 0.0 < self.lambda_mix < 1.0:
            raise ValueError(f"lambda_mix must lie in (0, 1), got {self.lambda_mix}")
        self.bandwidth_ladder = tuple(float(c) for c in self.bandwidth_ladder)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bandwidth_ladder"] = list(self.bandwidth_ladder)
        return d


@dataclass
class TrainRecord:
    iter: int
    L_ins: float
    L_dis: float
    L_total: float
    beta: float
    train_acc: float
    val_acc: float | None = None
    wall_ms: float = 0.0

    def to_json(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_ms")
        return d


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray  # source index 0..N-1


class Con2EMModel:
    """Encoder, instance classifier, statistics heads and projection head.

    Each part draws its initial weights from its own stream, so the encoder
    and classifier start identically whichever method is trained.
    """

    def __init__(self, input_dim: int, n_classes: int, n_domains: int, cfg: TrainConfig):
        rngs = {k: np.random.default_rng([cfg.seed, v]) for k, v in _STREAMS.items()}
        self.n_classes, self.n_domains = n_classes, n_domains
        self.encoder = MLP([input_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.latent_dim], rngs["encoder"])
        self.classifier = Linear(cfg.latent_dim, n_classes, rngs["classifier"])
        self.stats_heads = StatsHeads(cfg.latent_dim, cfg.stats_dim, rngs["stats"])
        self.projection_head = ProjectionHead(n_domains * n_classes, n_classes, rngs["head"])
        self.adapter = None if cfg.stats_dim == cfg.latent_dim else Linear(cfg.stats_dim, cfg.latent_dim, rngs["adapter"])

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.encoder.layers):
            out[f"encoder.{i}.weight"], out[f"encoder.{i}.bias"] = layer.weight, layer.bias
        out["classifier.weight"], out["classifier.bias"] = self.classifier.weight, self.classifier.bias
        for name in ("fc_mu", "fc_logvar"):
            lin = getattr(self.stats_heads, name)
            out[f"stats.{name}.weight"], out[f"stats.{name}.bias"] = lin.weight, lin.bias
        out["head.weight"], out["head.bias"] = self.projection_head.weight, self.projection_head.bias
        if self.adapter is not None:
            out["adapter.weight"], out["adapter.bias"] = self.adapter.weight, self.adapter.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def encode(self, x) -> Tensor:
        return self.encoder(x if isinstance(x, Tensor) else Tensor(x))

    def logits(self, x) -> Tensor:
        return self.classifier(self.encode(x))

    def classify_latent(self, latent: Tensor) -> Tensor:
        """Instance classifier applied to stats-space pseudo-latents."""
        if self.adapter is not None:
            latent = self.adapter(latent)
        return self.classifier(latent)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x).data, axis=1)


def evaluate(model: Con2EMModel, X, y) -> float:
    """Fraction of instances where argmax of the instance classifier equals the label."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(model.predict(np.asarray(X, dtype=np.float64)) == y))


# -- losses --------------------------------------------------------------------
def instance_loss(real_logits: Tensor, real_labels, pseudo_logits: Tensor | None = None,
                  pseudo_labels=None) -> Tensor:
    """Cross-entropy summed over real and pseudo instances, divided by the real count."""
    n_classes = real_logits.shape[1]
    n_real = real_logits.shape[0]
    loss = softmax_cross_entropy(real_logits, one_hot(real_labels, n_classes))
    if pseudo_logits is not None and pseudo_logits.shape[0] > 0:
        pseudo = softmax_cross_entropy(pseudo_logits, one_hot(pseudo_labels, n_classes))
        loss = loss + scale(pseudo, pseudo_logits.shape[0] / n_real)
    return loss


def distribution_loss(observed_logits: Tensor, observed_labels, generated_logits: Tensor,
                      generated_labels, mixup_logits: Tensor | None = None,
                      mixup_targets: np.ndarray | None = None) -> Tensor:
    """Mean CE over observed cells + mean CE over Universum-mixed cells (+ mixup soft CE)."""
    n_classes = observed_logits.shape[1]
    loss = softmax_cross_entropy(observed_logits, one_hot(observed_labels, n_classes))
    loss = loss + softmax_cross_entropy(generated_logits, one_hot(generated_labels, n_classes))
    if mixup_logits is not None:
        loss = loss + softmax_cross_entropy(mixup_logits, mixup_targets)
    return loss


# -- batching ------------------------------------------------------------------
class StratifiedSampler:
    """Draws batches with (near) equal counts per (domain, class) cell.

    ``pools[(d, k)]`` are row indices into the pooled training arrays. Each
    cell is consumed as a reshuffled cycle so every instance is visited once
    per pass over that cell.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, domain: np.ndarray, batch_size: int,
                 rng: np.random.Generator):
        self.X, self.y, self.domain = X, y, domain
        self.batch_size, self.rng = batch_size, rng
        keys = sorted(set(zip(domain.tolist(), y.tolist())))
        self.pools = {key: np.flatnonzero((domain == key[0]) & (y == key[1])) for key in keys}
        self.keys = keys
        self._queues = {key: np.empty(0, dtype=np.int64) for key in keys}

    def _take(self, key, n: int) -> np.ndarray:
        out = []
        while n > 0:
            q = self._queues[key]
            if len(q) == 0:
                q = self.rng.permutation(self.pools[key])
            out.append(q[:n])
            self._queues[key] = q[n:]
            n -= len(out[-1])
        return np.concatenate(out)

    def sample(self) -> Batch:
        g = len(self.keys)
        counts = np.full(g, self.batch_size // g)
        extra = self.batch_size - counts.sum()
        if extra:
            counts[self.rng.choice(g, extra, replace=False)] += 1
        rows = np.concatenate([self._take(key, c) for key, c in zip(self.keys, counts) if c > 0])
        return Batch(self.X[rows], self.y[rows], self.domain[rows])


# -- trainer -------------------------------------------------------------------
class Trainer:
    """Holds the model, momentum bank, optimizer and generator streams of one run."""

    def __init__(self, model: Con2EMModel, cfg: TrainConfig, warmup_iters: int = 0):
        self.model, self.cfg = model, cfg
        self.bank = StatsBank(model.n_domains, model.n_classes, cfg.stats_dim, cfg.rho)
        self.kernel: KernelConfig | None = None
        self.optimizer = Adam(model.parameters(), lr=cfg.lr)
        self.rngs = {k: np.random.default_rng([cfg.seed, v]) for k, v in _STREAMS.items()}
        self.warmup_iters = warmup_iters if cfg.warmup else 0
        self.iteration = 0

    @property
    def n_generated_per_cell(self) -> int:
        return math.ceil(self.cfg.batch_size / self.bank.n_cells)

    def _effective_beta(self) -> float:
        if self.cfg.method != "con2em" or not self.cfg.dist_loss or self.kernel is None:
            return 0.0
        return self.cfg.beta

    def _maybe_freeze_bandwidths(self) -> None:
        if self.kernel is None and self.bank.complete and self.iteration >= self.warmup_iters:
            self.kernel = KernelConfig.from_base(median_heuristic(self.bank), self.cfg.bandwidth_ladder)

    def step(self, batch: Batch) -> TrainRecord:
        start = time.perf_counter()
        cfg, model = self.cfg, self.model
        self.iteration += 1
        if cfg.method == "erm_mixup":
            L_ins, acc = self._mixup_instance_loss(batch)
            L_dis_value, beta, total = 0.0, 0.0, L_ins
        else:
            z = model.encode(batch.x)
            logits = model.classifier(z)
            acc = float(np.mean(np.argmax(logits.data, axis=1) == batch.y))
            L_dis, pseudo = None, (None, None)
            if cfg.method == "con2em":
                L_dis, pseudo = self._distribution_branch(z, batch)
            L_ins = instance_loss(logits, batch.y, *pseudo)
            beta = self._effective_beta()
            L_dis_value = 0.0 if L_dis is None else L_dis.item()
            total = L_ins + scale(L_dis, beta) if (L_dis is not None and beta > 0) else L_ins

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        record = TrainRecord(self.iteration, L_ins.item(), L_dis_value, total.item(), beta, acc)
        if abs(record.L_total - (record.L_ins + beta * record.L_dis)) > 1e-12:
            raise ArithmeticError("loss additivity violated")
        record.wall_ms = 1e3 * (time.perf_counter() - start)
        return record

    def _mixup_instance_loss(self, batch: Batch) -> tuple[Tensor, float]:
        rng = self.rngs["input_mixup"]
        gamma = rng.beta(self.cfg.alpha, self.cfg.alpha)
        perm = rng.permutation(len(batch.y))
        x = gamma * batch.x + (1.0 - gamma) * batch.x[perm]
        onehot = one_hot(batch.y, self.model.n_classes)
        targets = gamma * onehot + (1.0 - gamma) * onehot[perm]
        logits = self.model.logits(x)
        acc = float(np.mean(np.argmax(logits.data, axis=1) == batch.y))
        return softmax_cross_entropy(logits, targets), acc

    def _distribution_branch(self, z: Tensor, batch: Batch):
        cfg, model, bank = self.cfg, self.model, self.bank
        mu_i, sigma_i = per_instance_stats(z, model.stats_heads)
        fresh = aggregate_by_cell(mu_i, sigma_i, batch.y, batch.domain)
        momentum_update(bank, fresh)
        self._maybe_freeze_bandwidths()

        # Cells for generation: batch statistics where present, bank otherwise.
        by_cell = {(c.domain, c.cls): c for c in fresh}
        cur_mu, cur_sigma, cur_labels = [], [], []
        for d in range(bank.n_domains):
            for k in range(bank.n_classes):
                if (d, k) in by_cell:
                    cur_mu.append(by_cell[d, k].mu)
                    cur_sigma.append(by_cell[d, k].sigma)
                elif bank.initialized[d, k]:
                    cur_mu.append(Tensor(bank.mu[d, k]))
                    cur_sigma.append(Tensor(bank.sigma[d, k]))
                else:
                    continue
                cur_labels.append(k)
        cur_mu, cur_sigma = stack(cur_mu), stack(cur_sigma)
        cur_labels = np.array(cur_labels)

        mask = bank.initialized.reshape(-1)
        u_mu = bank.mu.reshape(bank.n_cells, -1)[mask].mean(axis=0)
        u_sigma = bank.sigma.reshape(bank.n_cells, -1)[mask].mean(axis=0)
        lam = cfg.lambda_mix
        aug_mu = scale(cur_mu, lam) + (1.0 - lam) * u_mu
        aug_sigma = scale(cur_sigma, lam) + (1.0 - lam) * u_sigma

        L_dis = None
        if cfg.dist_loss and self.kernel is not None:
            obs_mu = stack([c.mu for c in fresh])
            obs_sigma = stack([c.sigma for c in fresh])
            groups = [(obs_mu, obs_sigma), (aug_mu, aug_sigma)]
            mix_targets = None
            if cfg.dist_mixup and len(cur_labels) >= 2:
                rng = self.rngs["dist_mixup"]
                pairs = sample_mixup_pairs(len(cur_labels), bank.n_cells, rng)
                gamma = rng.beta(cfg.alpha, cfg.alpha, len(pairs))[:, None]
                a, b = pairs[:, 0], pairs[:, 1]
                mix_mu = cur_mu[a] * gamma + cur_mu[b] * (1.0 - gamma)
                mix_sigma = cur_sigma[a] * gamma + cur_sigma[b] * (1.0 - gamma)
                onehot = one_hot(cur_labels, model.n_classes)
                mix_targets = gamma * onehot[a] + (1.0 - gamma) * onehot[b]
                groups.append((mix_mu, mix_sigma))
            logits = classify_many(concat([g[0] for g in groups]), concat([g[1] for g in groups]),
                                   bank, self.kernel, model.projection_head)
            n_obs, n_aug = len(fresh), len(cur_labels)
            L_dis = distribution_loss(
                logits[:n_obs], [c.cls for c in fresh],
                logits[n_obs:n_obs + n_aug], cur_labels,
                logits[n_obs + n_aug:] if mix_targets is not None else None, mix_targets)

        pseudo = (None, None)
        if cfg.resample:
            samples, labels = resample_many(aug_mu, aug_sigma, cur_labels, self.n_generated_per_cell,
                                            self.rngs["resample"])
            pseudo = (model.classify_latent(samples), labels)
        return L_dis, pseudo


# -- fit -----------------------------------------------------------------------
@dataclass
class SourceData:
    X: np.ndarray
    y: np.ndarray
    domain: np.ndarray


def _pool(dataset: DomainDataset, index: dict[int, np.ndarray], sources: list[int]) -> SourceData:
    Xs, ys, ds = [], [], []
    for s, domain_id in enumerate(sources):
        dom = dataset.domain(domain_id)
        rows = index[domain_id]
        Xs.append(dom.X[rows])
        ys.append(dom.y[rows])
        ds.append(np.full(len(rows), s))
    return SourceData(np.concatenate(Xs), np.concatenate(ys).astype(np.int64), np.concatenate(ds))


@dataclass
class FitResult:
    model: Con2EMModel
    trainer: Trainer
    log: list[TrainRecord]
    best_val_acc: float
    best_iter: int
    split: SplitPlan
    best_bank: StatsBank | None = None
    final_state: dict = field(default_factory=dict)


def fit(dataset: DomainDataset, cfg: TrainConfig, target_domain: int | None = None,
        split: SplitPlan | None = None, split_seed: int = 0) -> FitResult:
    """Train for ``cfg.max_iters`` iterations and keep the best-validation weights.

    The held-out ``target_domain`` (default: the last domain) is never touched.
    Validation runs every ``cfg.eval_every`` iterations and after the last one
    on the pooled 20% source split; the returned model carries the weights with
    the highest validation accuracy (earliest wins ties).
    """
    if target_domain is None:
        target_domain = dataset.domain_ids[-1]
    if split is None:
        split = split_lodo(dataset, target_domain, split_seed)
    sources = split.source_domains
    if len(sources) < 2:
        raise ValueError("need at least two source domains")
    train = _pool(dataset, split.train, sources)
    val = _pool(dataset, split.val, sources)
    if len(val.y) == 0:
        raise ValueError("validation split is empty")

    model = Con2EMModel(dataset.input_dim, dataset.n_classes, len(sources), cfg)
    epoch = math.ceil(len(train.y) / cfg.batch_size)
    trainer = Trainer(model, cfg, warmup_iters=epoch)
    sampler = StratifiedSampler(train.X, train.y, train.domain, cfg.batch_size, trainer.rngs["batch"])

    log: list[TrainRecord] = []
    best_acc, best_iter = -1.0, 0
    best_state, best_bank = model.state_dict(), trainer.bank.copy()
    if cfg.max_iters == 0:
        return FitResult(model, trainer, log, evaluate(model, val.X, val.y), 0, split, best_bank)

    for t in range(1, cfg.max_iters + 1):
        record = trainer.step(sampler.sample())
        if t % cfg.eval_every == 0 or t == cfg.max_iters:
            record.val_acc = evaluate(model, val.X, val.y)
            if record.val_acc > best_acc:
                best_acc, best_iter = record.val_acc, t
                best_state, best_bank = model.state_dict(), trainer.bank.copy()
        log.append(record)

    final_state = model.state_dict()
    model.load_state_dict(best_state)
    return FitResult(model, trainer, log, best_acc, best_iter, split, best_bank, final_state)


# -- checkpoints -----------------------------------------------------------------
def save_checkpoint(path, model: Con2EMModel, cfg: TrainConfig, bank: StatsBank | None = None,
                    kernel: KernelConfig | None = None, rng_states: dict | None = None,
                    input_dim: int | None = None) -> None:
    """Write an ``.npz`` checkpoint.

    Layout (version 1): ``param/<name>`` arrays for every model parameter,
    ``bank/mu``, ``bank/sigma``, ``bank/initialized``, ``bank/rho``,
    ``bandwidths`` (empty when not frozen), and ``meta`` holding a JSON string
    with ``version``, ``input_dim``, ``n_classes``, ``n_domains``, the training
    config and generator states.
    """
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    if bank is not None:
        arrays.update({f"bank/{k}": v for k, v in bank.state_dict().items()})
    arrays["bandwidths"] = np.array(kernel.bandwidths if kernel else [], dtype=np.float64)
    if input_dim is None:
        input_dim = model.encoder.layers[0].in_features
    meta = {"version": CHECKPOINT_VERSION, "input_dim": input_dim, "n_classes": model.n_classes,
            "n_domains": model.n_domains, "config": cfg.to_dict(), "rng_states": rng_states or {}}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(model, cfg, bank, kernel, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = TrainConfig.from_dict(meta["config"])
        model = Con2EMModel(meta["input_dim"], meta["n_classes"], meta["n_domains"], cfg)
        model.load_state_dict({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        bank = None
        if "bank/mu" in z.files:
            bank = StatsBank.from_state({k[len("bank/"):]: z[k] for k in z.files if k.startswith("bank/")})
        bw = z["bandwidths"]
        kernel = KernelConfig(bw.tolist()) if bw.size else None
    return model, cfg, bank, kernel, meta


def rng_states(trainer: Trainer) -> dict:
    return {k: copy.deepcopy(r.bit_generator.state) for k, r in trainer.rngs.items()}


def restore_rng_states(trainer: Trainer, states: dict) -> None:
    for k, s in states.items():
        trainer.rngs[k].bit_generator.state = s


def write_log(path, log: list[TrainRecord], every: int = 1, timing: bool = False) -> None:
    """Newline-delimited JSON, one record per logged iteration (plus every eval)."""
    with open(Path(path), "w") as fh:
        for r in log:
            if r.iter % every == 0 or r.val_acc is not None:
                fh.write(json.dumps(r.to_json(timing), sort_keys=True) + "\n")


def read_log(path) -> list[TrainRecord]:
    with open(path) as fh:
        return [TrainRecord(**json.loads(line)) for line in fh if line.strip()]


__all__ = [
    "METHODS",
    "TrainConfig",
    "TrainRecord",
    "Batch",
    "Con2EMModel",
    "Trainer",
    "StratifiedSampler",
    "FitResult",
    "instance_loss",
    "distribution_loss",
    "evaluate",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "rng_states",
    "restore_rng_states",
    "write_log",
    "read_log",
    "ValidationError",
]
