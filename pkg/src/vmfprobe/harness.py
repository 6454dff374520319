"""Training loop, experiment protocols and run bookkeeping."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import data as Dt
from . import diff as D
from . import evaluation as E
from .losses import LossBreakdown, LossHyper, kappa_reg_loss, mc_infonce_loss, simclr_loss, total_loss_tensor
from .model import Encoder, EncoderConfig, embed, init

CONFIG_VERSION = 1
METHODS = ("ours", "mc_infonce", "deterministic")
OPTIMIZERS = ("adam", "sgd")


class ConfigError(ValueError):
    pass


class NumericalAbort(FloatingPointError):
    """Non-finite loss; ``last_good`` names the checkpoint that was kept."""

    def __init__(self, message: str, last_good: Path | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    version: int = CONFIG_VERSION
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    lambda_align: float = 0.05
    lambda_reg: float = 0.005
    temperature: float = 0.5
    method: str = "ours"
    seed: int = 0
    # data: either a dataset directory or generator settings
    dataset: str | None = None
    classes: int = 10
    n_per_class: int = 200
    data_seed: int = 0
    difficulty: float = 0.5  # per-sample quality spread of the generated training set
    # encoder
    trunk_widths: tuple = (256,)
    embed_dim: int = 128
    head_width: int = 64
    dropout: float = 0.0
    # misc
    mc_samples: int = 64
    checkpoint_every: int = 50
    augment: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        object.__setattr__(self, "augment", dict(self.augment))
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} is not supported (expected {CONFIG_VERSION})")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (the contrastive loss needs negatives)")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.checkpoint_every < 1 or self.mc_samples < 1:
            raise ConfigError("checkpoint_every and mc_samples must be >= 1")
        try:
            self.hyper
            Dt.AugmentConfig.from_dict(self.augment)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def hyper(self) -> LossHyper:
        return LossHyper(self.lambda_align, self.lambda_reg, self.temperature)

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(input_dim, self.trunk_widths, self.embed_dim, self.head_width, self.dropout, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "version" not in d:
            raise ConfigError('config needs a "version" field')
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)


def run_id(payload: dict) -> str:
    """Short content hash of a JSON-able payload."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunRecord:
    losses: list[LossBreakdown]
    wall_time: float
    checkpoint: Path | None
    config: TrainConfig
    run_id: str
    encoder: Encoder | None = None


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr: float = 1e-3):
        self.lr = lr

    def step(self, params, grads) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


def load_training_data(config: TrainConfig) -> Dt.Dataset:
    if config.dataset:
        return Dt.load_dataset(config.dataset)
    return Dt.generate_dataset(config.n_per_class, config.classes, config.data_seed, difficulty=config.difficulty)


def _flat(images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1)


def step_loss(encoder: Encoder, config: TrainConfig, x1: np.ndarray, x2: np.ndarray, rng: np.random.Generator):
    """Record one step on a fresh tape; returns ``(loss, breakdown, param_leaves, tape)``."""
    tape = D.Tape()
    leaves = [tape.leaf(p, requires_grad=True) for p in encoder.params]
    drop = rng if config.dropout > 0 else None
    e1 = encoder.forward(tape.constant(x1), leaves, drop)
    e2 = encoder.forward(tape.constant(x2), leaves, drop)
    hyper = config.hyper
    if config.method == "ours":
        loss, parts = total_loss_tensor(e1, e2, hyper)
    elif config.method == "deterministic":
        loss = simclr_loss(e1.mu, e2.mu, hyper.temperature)
        parts = LossBreakdown(0.0, 0.0, loss.item(), loss.item(), hyper)
    else:
        mc = mc_infonce_loss(e1, e2, config.mc_samples, hyper.temperature, int(rng.integers(2**63)))
        reg = kappa_reg_loss(e1.kappa, e2.kappa, hyper.lambda_reg)
        loss = D.add(mc, reg)
        parts = LossBreakdown(0.0, reg.item(), mc.item(), loss.item(), hyper)
    return loss, parts, leaves, tape


def _mean_breakdown(parts: list[LossBreakdown], hyper: LossHyper) -> LossBreakdown:
    cols = np.array([[p.align, p.reg, p.contrastive, p.total] for p in parts])
    a, r, c, t = cols.mean(axis=0)
    return LossBreakdown(float(a), float(r), float(c), float(t), hyper)


def losses_csv(losses: list[LossBreakdown]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "align", "reg", "contrastive", "total"])
    for i, p in enumerate(losses, 1):
        w.writerow([i, repr(p.align), repr(p.reg), repr(p.contrastive), repr(p.total)])
    return buf.getvalue()


def train(config: TrainConfig, out_dir=None, dataset: Dt.Dataset | None = None, log=None) -> RunRecord:
    """Fit an encoder; with ``out_dir`` set, write ``losses.csv`` and checkpoints there.

    A non-finite step loss raises :class:`NumericalAbort`; the most recent
    finite-epoch checkpoint is kept as ``checkpoints/last_good.ckpt``.
    """
    t0 = time.perf_counter()
    ds = dataset if dataset is not None else load_training_data(config)
    images = ds.images.astype(np.float64)
    n = len(ds)
    if n < 2:
        raise ConfigError("training set needs at least 2 images")
    encoder = init(config.encoder_config(images[0].size))
    aug = Dt.AugmentConfig.from_dict(config.augment)
    shuffle_rng, aug_rng, step_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
    opt = Adam(encoder.params, config.learning_rate) if config.optimizer == "adam" else SGD(encoder.params, config.learning_rate)
    rid = run_id(config.to_dict())
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out else None
    last_good = None
    history: list[LossBreakdown] = []

    def save(name: str) -> Path:
        return checkpoint.save(encoder, ckpt_dir / name)

    if out:
        last_good = save("last_good.ckpt")
    bs = min(config.batch_size, n)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        parts = []
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            if idx.size < 2:
                continue
            views = Dt.augment_batch(np.concatenate([images[idx], images[idx]]), aug_rng, aug)
            x1, x2 = _flat(views[: idx.size]), _flat(views[idx.size :])
            loss, bd, leaves, tape = step_loss(encoder, config, x1, x2, step_rng)
            if not math.isfinite(bd.total):
                msg = f"non-finite loss at epoch {epoch} (align={bd.align}, reg={bd.reg}, contrastive={bd.contrastive})"
                raise NumericalAbort(msg, last_good)
            D.backward(tape, loss)
            grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
            opt.step(encoder.params, grads)
            parts.append(bd)
        epoch_loss = _mean_breakdown(parts, config.hyper)
        history.append(epoch_loss)
        if log:
            log(f"epoch {epoch:4d}  total {epoch_loss.total:.5f}  align {epoch_loss.align:.5f}  reg {epoch_loss.reg:.5f}")
        if out and all(np.all(np.isfinite(p)) for p in encoder.params):
            if epoch % config.checkpoint_every == 0:
                last_good = save(f"epoch_{epoch:04d}.ckpt")
                save("last_good.ckpt")
    final = None
    if out:
        final = save("final.ckpt")
        (out / "losses.csv").write_text(losses_csv(history))
    return RunRecord(history, time.perf_counter() - t0, final, config, rid, encoder)


# ---------------------------------------------------------------- experiments


def _split_alternate(ds: Dt.Dataset) -> tuple[Dt.Dataset, Dt.Dataset]:
    """Even-indexed images form the reference split, odd-indexed the query split."""
    a = Dt.Dataset(ds.images[0::2], ds.labels[0::2], dict(ds.meta))
    b = Dt.Dataset(ds.images[1::2], ds.labels[1::2], dict(ds.meta))
    return a, b


def _corruption_seed(seed: int, kind: str, severity: int) -> int:
    return int(np.random.SeedSequence([seed, Dt.CORRUPTIONS.index(kind), severity]).generate_state(1)[0])


def _severity_table(specs, test_images, score, seed) -> dict:
    table = {}
    for spec in specs:
        imgs = Dt.corrupt_batch(test_images, spec, _corruption_seed(seed, spec.kind, spec.severity))
        table[(spec.kind, spec.severity)] = float(np.mean(score(imgs)))
    return table


def _correlate(table: dict) -> tuple[dict, dict]:
    sp, pe = {}, {}
    for kind in Dt.CORRUPTIONS:
        pts = sorted((s, v) for (k, s), v in table.items() if k == kind)
        if len(pts) < 2:
            continue
        sev, vals = zip(*pts)
        try:
            sp[kind] = E.spearman(sev, vals)
            pe[kind] = E.pearson(sev, vals)
        except E.UndefinedCorrelation:
            sp[kind] = pe[kind] = float("nan")
    return sp, pe


def corruption_report(table: dict, score_name: str) -> E.MetricsReport:
    sp, pe = _correlate(table)
    finite = [v for v in sp.values() if not math.isnan(v)]
    summary = {
        "mean_spearman": float(np.mean(finite)) if finite else float("nan"),
        "kinds_at_or_below_-0.8": int(sum(v <= -0.8 for v in finite)),
    }
    meta = {"score": score_name, "severity_levels": "0..5 (0 = clean)", "aggregation": "mean over test split"}
    report = E.MetricsReport(sp, pe, table, summary=summary, meta=meta)
    report.validate()
    return report


def evaluate_corruption_correlation(encoder: Encoder, test: Dt.Dataset, manifest, seed: int = 0) -> E.MetricsReport:
    """Mean kappa per (kind, severity) and its rank correlation with severity."""
    return corruption_report(_severity_table(manifest, test.images, lambda x: embed(encoder, x)[1], seed), "kappa")


def mc_dropout_uncertainty(encoder: Encoder, images, passes: int = 16, seed: int = 0) -> np.ndarray:
    """Replicate variance of ``mu`` over stochastic forward passes (dropout on)."""
    if encoder.config.dropout <= 0:
        raise ConfigError("MC dropout needs an encoder trained with dropout > 0")
    rng = np.random.default_rng(seed)
    reps = np.stack([embed(encoder, images, dropout_rng=rng)[0] for _ in range(passes)], axis=1)
    return E.replicate_variance_uncertainty(reps)


def ensemble_uncertainty(encoders: list[Encoder], images) -> np.ndarray:
    reps = np.stack([embed(e, images)[0] for e in encoders], axis=1)
    return E.replicate_variance_uncertainty(reps)


def evaluate_corruption_baseline(score, test: Dt.Dataset, manifest, name: str, seed: int = 0) -> E.MetricsReport:
    """Same protocol with an arbitrary per-image uncertainty ``score`` (higher = less certain)."""
    return corruption_report(_severity_table(manifest, test.images, score, seed), name)


def _standardize(ref: np.ndarray, *xs: np.ndarray):
    mean, sd = ref.mean(axis=0), ref.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return [(x - mean) / sd for x in (ref, *xs)]


def evaluate_ood(encoder: Encoder, in_set: Dt.Dataset, out_set: Dt.Dataset, k: int = 5) -> E.MetricsReport:
    """AUROC for out-of-domain detection from k-NN distance, -kappa, and both.

    The in-domain set is split alternately into a reference bank and
    in-domain queries. Features are the mean directions, z-scored per
    dimension over the bank; kappa is z-scored over the bank before it
    is appended.
    """
    if len(in_set) < 2 * k or len(out_set) == 0:
        raise ValueError("in-domain set too small for the reference bank or out-domain set empty")
    bank, queries = _split_alternate(in_set)
    fb, kb, _ = embed(encoder, bank.images)
    fq, kq, _ = embed(encoder, queries.images)
    fo, ko, _ = embed(encoder, out_set.images)
    fb, fq, fo = _standardize(fb, fq, fo)
    labels = np.concatenate([np.zeros(len(kq)), np.ones(len(ko))])
    feat_score = np.concatenate([E.knn_distance_score(fb, fq, k), E.knn_distance_score(fb, fo, k)])
    cb = E.kappa_feature_concat(fb, kb, kb)
    cq = E.kappa_feature_concat(fq, kq, kb)
    co = E.kappa_feature_concat(fo, ko, kb)
    cat_score = np.concatenate([E.knn_distance_score(cb, cq, k), E.knn_distance_score(cb, co, k)])
    kappa_score = -np.concatenate([kq, ko])
    report = E.MetricsReport(
        auroc={
            "features": E.auroc(feat_score, labels),
            "kappa": E.auroc(kappa_score, labels),
            "features+kappa": E.auroc(cat_score, labels),
        },
        summary={
            "n_in": int(len(kq)),
            "n_out": int(len(ko)),
            "n_bank": int(len(kb)),
            "mean_kappa_in": float(kq.mean()),
            "mean_kappa_out": float(ko.mean()),
        },
        meta={"k": k, "features": "mean directions, z-scored over the bank"},
    )
    report.validate()
    return report


def evaluate_failure_analysis(
    encoder: Encoder,
    labeled: Dt.Dataset,
    k: int = 5,
    iterations: int = 50,
    draw: int = 100,
    seed: int = 0,
) -> E.MetricsReport:
    """Compare kappa of probe-correct and probe-wrong test points.

    A k-NN probe on the even-indexed half labels the odd-indexed half.
    Correctness labels are also shuffled once as a null control.
    """
    probe_set, test = _split_alternate(labeled)
    fp, _, _ = embed(encoder, probe_set.images)
    ft, kt, _ = embed(encoder, test.images)
    fp, ft = _standardize(fp, ft)
    pred = E.knn_predict(fp, probe_set.labels, ft, k)
    correct = pred == test.labels
    n_right, n_wrong = int(correct.sum()), int((~correct).sum())
    summary = {"n_correct": n_right, "n_wrong": n_wrong, "probe_error": n_wrong / len(correct)}
    meta = {"k": k, "iterations": iterations, "draw": draw, "seed": seed}
    if n_wrong == 0:
        meta["status"] = "skipped: empty misclassified group"
        return E.MetricsReport(summary=summary, meta=meta)
    pvals = E.bootstrap_group_test(kt[correct], kt[~correct], iterations, draw, seed)
    shuffled = np.random.default_rng(seed + 1).permutation(correct)
    null = E.bootstrap_group_test(kt[shuffled], kt[~shuffled], iterations, draw, seed + 2)
    summary.update(
        {
            "mean_kappa_correct": float(kt[correct].mean()),
            "mean_kappa_wrong": float(kt[~correct].mean()),
            "median_p": float(np.median(pvals)),
            "shuffled_median_p": float(np.median(null)),
            "shuffled_above_0.05": int(sum(p > 0.05 for p in null)),
        }
    )
    meta["status"] = "ok"
    report = E.MetricsReport(mw_p_values=pvals, summary=summary, meta=meta)
    report.validate()
    return report


def gradient_report(trials: int = 100, seed: int = 0, n: int = 4, dim: int = 8, h: float = 1e-5) -> dict:
    """Worst relative errors of tape gradients against central differences and closed forms.

    Inputs follow the encoder's output path: ``mu = v / |v|`` and
    ``kappa = softplus(r)`` for random raw ``v`` and ``r``.
    """
    from . import losses as L

    rng = np.random.default_rng(seed)
    hyper = LossHyper()
    shapes = [(n, dim), (n,), (n, dim), (n,)]

    def batches(flat):
        v1, r1, v2, r2 = D.unflatten(flat, shapes)
        return (D.l2_normalize_rows(v1), D.softplus(r1)), (D.l2_normalize_rows(v2), D.softplus(r2))

    objectives = {
        "align": lambda f: L.alignment_loss(*batches(f), hyper.lambda_align),
        "reg": lambda f: (lambda e1, e2: L.kappa_reg_loss(e1[1], e2[1], hyper.lambda_reg))(*batches(f)),
        "contrastive": lambda f: (lambda e1, e2: L.simclr_loss(e1[0], e2[0], hyper.temperature))(*batches(f)),
        "total": lambda f: L.total_loss_tensor(*batches(f), hyper)[0],
    }
    worst = {name: 0.0 for name in objectives}
    worst_mu = worst_kappa = 0.0
    for _ in range(trials):
        point = np.concatenate(
            [rng.normal(size=n * dim), rng.normal(1.0, 1.5, n), rng.normal(size=n * dim), rng.normal(1.0, 1.5, n)]
        )
        for name, f in objectives.items():
            worst[name] = max(worst[name], D.gradient_check(f, point, h))
        mu1, mu2 = (v / np.linalg.norm(v) for v in rng.normal(size=(2, dim)))
        k1, k2 = rng.uniform(0.1, 50.0, 2)
        tape = D.Tape()
        tm1, tk1 = tape.leaf(mu1[None], True), tape.leaf([k1], True)
        loss = L.alignment_loss((tm1, tk1), (mu2[None], [k2]), hyper.lambda_align)
        D.backward(tape, loss)
        g_mu, g_k = L.analytic_alignment_gradients((mu1, k1), (mu2, k2), hyper.lambda_align)
        worst_mu = max(worst_mu, float(np.max(np.abs(tm1.grad[0] - g_mu) / np.maximum(np.abs(g_mu), 1e-300))))
        worst_kappa = max(worst_kappa, abs(tk1.grad[0] - g_k) / max(abs(g_k), 1e-300))
    return {
        "trials": trials,
        "batch": n,
        "dim": dim,
        "finite_difference_max_rel_error": worst,
        "closed_form_max_rel_error": {"mu": worst_mu, "kappa": float(worst_kappa)},
    }
