"""Adam training of the embedding network (similarity loss) or the flow
classification baseline, with early stopping on a validation manifest."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flow_io, network, synth
from .kernels import cross_pixel_loss, loss_gradients

log = logging.getLogger(__name__)

SIMILARITY = "similarity"
BASELINE = "baseline"
DEFAULT_LR = {SIMILARITY: 1e-4, BASELINE: 1e-2}


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step rejected")
        self.name = name


@dataclass(frozen=True)
class TrainConfig:
    loss: str = SIMILARITY
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    n_s: int = 512
    max_steps: int = 2000
    val_interval: int = 100
    patience: int = 5
    seed: int = 0
    M: float = flow_io.DEFAULT_M
    flip: bool = False

    def __post_init__(self):
        if self.loss not in DEFAULT_LR:
            raise ValueError(f"loss must be one of {sorted(DEFAULT_LR)}")
        if self.lr is None:
            object.__setattr__(self, "lr", DEFAULT_LR[self.loss])
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.loss == SIMILARITY and self.n_s < 2:
            raise ValueError("similarity loss needs n_s >= 2")
        if self.n_s < 1 or self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("n_s, batch_size must be >= 1 and max_steps >= 0")
        if self.val_interval < 1 or self.patience < 0:
            raise ValueError("val_interval must be >= 1 and patience >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass(frozen=True)
class LogRecord:
    step: int
    train_loss: float
    val_loss: float
    sigma_sq: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def append(self, rec: LogRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("log steps must be strictly increasing")
        self.records.append(rec)

    def to_csv(self) -> str:
        rows = ["step,train_loss,val_loss,sigma_sq"]
        rows += [f"{r.step},{r.train_loss!r},{r.val_loss!r},{r.sigma_sq!r}" for r in self.records]
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class TrainingScene:
    image: np.ndarray
    flow: np.ndarray  # normalized, (H, W, 2)
    masks: np.ndarray

    def flipped(self) -> "TrainingScene":
        flow = self.flow[:, ::-1].copy()
        flow[..., 0] = -flow[..., 0]
        return TrainingScene(self.image[:, ::-1].copy(), flow, self.masks[:, ::-1].copy())


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True once more than
    ``patience`` consecutive checks fail to improve on it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if val_loss < self.best:
            self.best, self.bad = val_loss, 0
            return True, False
        self.bad += 1
        return False, self.bad > self.patience


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * state.m.get(name, 0.0) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, 0.0) + (1.0 - cfg.beta2) * (g * g)
        new_params[name] = p - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


def sigma_sq(params) -> float:
    return math.exp(2.0 * float(params["kernel.rho"][0]))


def _rho(params) -> float:
    return float(params["kernel.rho"][0])


def similarity_loss_grads(image, nflow, coords, params) -> tuple[float, dict]:
    fp = network.forward(image, coords, params)
    flows = nflow[coords[:, 0], coords[:, 1]]
    lg = loss_gradients(flows, fp.embeddings, _rho(params))
    grads = network.network_backward(image, coords, params, lg.d_embeddings, fp)
    grads["kernel.rho"] = np.array([lg.d_rho])
    return lg.loss, grads


def similarity_loss(image, nflow, coords, params) -> float:
    emb = network.forward(image, coords, params).embeddings
    return cross_pixel_loss(nflow[coords[:, 0], coords[:, 1]], emb, _rho(params))


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def classification_loss(logits_x, logits_y, bins) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean over pixels of CE(x bins) + CE(y bins); returns loss and logit gradients."""
    n = len(bins)
    rows = np.arange(n)
    lsx, lsy = _log_softmax(logits_x), _log_softmax(logits_y)
    loss = -(lsx[rows, bins[:, 0]].sum() + lsy[rows, bins[:, 1]].sum()) / n
    dx, dy = np.exp(lsx), np.exp(lsy)
    dx[rows, bins[:, 0]] -= 1.0
    dy[rows, bins[:, 1]] -= 1.0
    return float(loss), dx / n, dy / n


def baseline_loss_grads(image, nflow, coords, params) -> tuple[float, dict]:
    fp = network.forward(image, coords, params, with_head=False)
    bins = flow_io.discretize_values(nflow[coords[:, 0], coords[:, 1]])
    lx, ly = network.classifier_logits(fp.hypercolumns, params)
    loss, dlx, dly = classification_loss(lx, ly, bins)
    grads, d_h = network.classifier_backward(fp.hypercolumns, dlx, dly, params)
    grads.update(network.backward_from_hypercolumns(fp, d_h, params))
    return loss, grads


def baseline_loss(image, nflow, coords, params) -> float:
    fp = network.forward(image, coords, params, with_head=False)
    bins = flow_io.discretize_values(nflow[coords[:, 0], coords[:, 1]])
    return classification_loss(*network.classifier_logits(fp.hypercolumns, params), bins)[0]


def _sample_for(image, n_s, seed) -> np.ndarray:
    return network.sample_pixels(image.shape[0], image.shape[1], n_s, seed).coords


def _batch_step(loss_grads, batch, params, state, cfg, sample_seed):
    if not batch:
        raise ValueError("batch must be non-empty")
    total, acc = 0.0, None
    # reduce in index order for bit-reproducibility
    for i, (image, nflow) in enumerate(batch):
        coords = _sample_for(image, cfg.n_s, np.random.SeedSequence([*np.atleast_1d(sample_seed).tolist(), i]))
        loss, grads = loss_grads(image, nflow, coords, params)
        total += loss
        if acc is None:
            acc = grads
        else:
            for k in acc:
                acc[k] = acc[k] + grads[k]
    scale = 1.0 / len(batch)
    acc = {k: acc[k] * scale for k in params}
    params, state = adam_step(params, acc, state, cfg)
    return params, state, total * scale


def similarity_step(batch, params, state, cfg: TrainConfig, sample_seed=0):
    """Mean cross-pixel loss over ``batch`` of (image, normalized flow) pairs and one Adam step."""
    return _batch_step(similarity_loss_grads, batch, params, state, cfg, sample_seed)


def baseline_step(batch, params, state, cfg: TrainConfig, sample_seed=0):
    return _batch_step(baseline_loss_grads, batch, params, state, cfg, sample_seed)


def prepare_scene(scene: synth.Scene, M: float) -> TrainingScene:
    return TrainingScene(scene.image, flow_io.normalize_values(scene.flow.data, M), scene.masks)


def load_manifest_scenes(manifest, M: float) -> list[TrainingScene]:
    entries = synth.read_manifest(manifest)
    if not entries:
        raise ValueError(f"empty manifest: {manifest}")
    return [prepare_scene(synth.load_scene(*e), M) for e in entries]


def init_model(cfg: TrainConfig):
    if cfg.loss == SIMILARITY:
        return network.init_params(cfg.seed)
    return network.init_baseline_params(cfg.seed)


def train_scenes(cfg: TrainConfig, train_set, val_set, params=None):
    """Train on in-memory scenes; returns ``(best_params, TrainLog)``."""
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    if params is None:
        params = init_model(cfg)
    loss_grads = similarity_loss_grads if cfg.loss == SIMILARITY else baseline_loss_grads
    loss_fn = similarity_loss if cfg.loss == SIMILARITY else baseline_loss
    val_coords = [
        _sample_for(s.image, cfg.n_s, np.random.SeedSequence([cfg.seed, 3, i])) for i, s in enumerate(val_set)
    ]

    def val_loss(p):
        return float(np.mean([loss_fn(s.image, s.flow, c, p) for s, c in zip(val_set, val_coords)]))

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    order: list[int] = []
    state = AdamState()
    tlog = TrainLog()
    best_params, stopper = params, EarlyStopping(cfg.patience)
    running: list[float] = []
    for step in range(1, cfg.max_steps + 1):
        batch = []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(train_set)))
            scene = train_set[order.pop()]
            if cfg.flip and rng.random() < 0.5:
                scene = scene.flipped()
            batch.append((scene.image, scene.flow))
        params, state, loss = _batch_step(loss_grads, batch, params, state, cfg, (cfg.seed, 2, step))
        running.append(loss)
        if step % cfg.val_interval == 0 or step == cfg.max_steps:
            vl = val_loss(params)
            s2 = sigma_sq(params) if "kernel.rho" in params else float("nan")
            tlog.append(LogRecord(step, float(np.mean(running)), vl, s2))
            log.info("step %d train %.6f val %.6f sigma^2 %.6g", step, running[-1], vl, s2)
            running = []
            improved, stop = stopper.update(vl)
            if improved:
                best_params = params
            if stop:
                break
    return best_params, tlog


def train(cfg: TrainConfig, train_manifest, val_manifest):
    train_entries = synth.read_manifest(train_manifest)
    val_entries = synth.read_manifest(val_manifest)
    if not train_entries:
        raise ValueError(f"empty manifest: {train_manifest}")
    if not val_entries:
        raise ValueError(f"empty manifest: {val_manifest}")
    overlap = {p.resolve() for e in train_entries for p in e} & {p.resolve() for e in val_entries for p in e}
    if overlap:
        raise ValueError(f"validation set overlaps training set (e.g. {sorted(overlap)[0]})")
    train_set = [prepare_scene(synth.load_scene(*e), cfg.M) for e in train_entries]
    val_set = [prepare_scene(synth.load_scene(*e), cfg.M) for e in val_entries]
    return train_scenes(cfg, train_set, val_set)


def run_training(cfg: TrainConfig, train_manifest, val_manifest, out_dir) -> tuple[Path, Path]:
    params, tlog = train(cfg, train_manifest, val_manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, csv = out / "model.cpm", out / "train_log.csv"
    network.save_checkpoint(params, ckpt)
    csv.write_text(tlog.to_csv())
    return ckpt, csv


def scene_margin(scene, params, n_s: int, seed, features: str = "embedding") -> float:
    coords = _sample_for(scene.image, n_s, seed)
    if features == "embedding":
        if network.is_baseline(params):
            raise ValueError("baseline checkpoints have no embedding head; use hypercolumn features")
        feats = network.forward(scene.image, coords, params).embeddings
    elif features == "hypercolumn":
        feats = network.forward(scene.image, coords, params, with_head=False).hypercolumns
        feats = feats + 1e-12  # all-zero ReLU hypercolumns would have no direction
    else:
        raise ValueError(f"unknown feature kind {features!r}")
    return synth.grouping_margin(feats, scene.masks[coords[:, 0], coords[:, 1]])


def evaluate_grouping_run(params, eval_manifest, n_s: int = 512, seed: int = 0, features: str = "embedding"):
    """Grouping margin per held-out scene; returns ``(mean, per_scene)``."""
    entries = synth.read_manifest(eval_manifest)
    if not entries:
        raise ValueError(f"empty manifest: {eval_manifest}")
    margins = [
        scene_margin(synth.load_scene(*e), params, n_s, np.random.SeedSequence([seed, i]), features)
        for i, e in enumerate(entries)
    ]
    return float(np.mean(margins)), margins
