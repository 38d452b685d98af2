"""ENN pretraining, the alternating WGAN/ENN loop, and baseline trainers."""
from __future__ import annotations

import contextlib
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from evuq import autodiff as ad
from evuq import losses, metrics
from evuq.autodiff import AdamState, Tape, Tensor, TrainingError
from evuq.config import TrainConfig, substream
from evuq.data import Dataset
from evuq.models import (Classifier, Discriminator, Generator, classifier_spec, critic_spec,
                         generator_spec)

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "dist", "critic_loss", "generator_loss", "enn_loss",
              "id_vacuity", "gen_vacuity")
EPOCH_FIELDS = ("epoch", "loss", "train_accuracy")


@dataclass
class IterRecord:
    iteration: int
    dist: float
    critic_loss: float
    generator_loss: float
    enn_loss: float
    id_vacuity: float
    gen_vacuity: float
    wall_clock: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    critic_steps: int = 0
    generator_steps: int = 0
    enn_steps: int = 0
    converged_at: int | None = None

    def append(self, rec: IterRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration indices must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def series(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def write_csv(self, path):
        """One row per generator iteration. Wall-clock is kept out so reruns are byte-identical."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([r.iteration] + [repr(float(getattr(r, k))) for k in LOG_FIELDS[1:]])


def write_epoch_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_FIELDS)
        for h in history:
            w.writerow([h["epoch"], repr(h["loss"]), repr(h["train_accuracy"])])


def moving_average(x, window) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size < window:
        return np.empty(0)
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def convergence_check(log_or_series, window: int, tol: float) -> bool:
    """Relative plateau test between the last two non-overlapping ``window``-length averages."""
    x = log_or_series.series("dist") if isinstance(log_or_series, TrainLog) else np.asarray(log_or_series)
    if x.size < 2 * window:
        return False
    last = float(np.mean(x[-window:]))
    prev = float(np.mean(x[-2 * window:-window]))
    return abs(last - prev) < tol * max(1.0, abs(prev))


# --------------------------------------------------------------------------
# construction helpers
# --------------------------------------------------------------------------

def build_classifier(cfg: TrainConfig, head="evidence", input_dim=2, k=3) -> Classifier:
    spec = classifier_spec(input_dim, k, cfg.classifier_hidden, head, cfg.evidence_activation)
    return Classifier(spec, substream(cfg.seed, f"init.classifier.{head}"))


def build_gan(cfg: TrainConfig, data_dim=2):
    g = Generator(generator_spec(data_dim, cfg.latent_dim, cfg.generator_hidden),
                  substream(cfg.seed, "init.generator"), init_gain=cfg.generator_init_gain)
    d = Discriminator(critic_spec(data_dim, cfg.critic_hidden), substream(cfg.seed, "init.critic"))
    return g, d


def _onehot(labels, k):
    return np.eye(k, dtype=np.float32)[labels]


def _check_finite(value, phase, iteration):
    if not np.isfinite(value):
        raise TrainingError(f"{phase} diverged (non-finite value) at iteration {iteration}",
                            iteration=iteration, phase=phase)


@contextlib.contextmanager
def _phase(name, iteration):
    """Tag errors raised inside a training phase with where they happened."""
    try:
        yield
    except TrainingError as exc:
        if exc.phase is not None:
            raise
        raise TrainingError(f"{name} diverged at iteration {iteration}: {exc}", iteration=iteration,
                            phase=name) from None


def _step(params, grads, state, phase, iteration, sign=1.0, weight_decay=0.0):
    if sign != 1.0 or weight_decay:
        grads = [sign * g + weight_decay * p.data for g, p in zip(grads, params)]
    try:
        ad.adam_step(params, grads, state, iteration=iteration)
    except TrainingError as exc:
        raise TrainingError(f"{phase}: {exc}", iteration=iteration, phase=phase) from None


# --------------------------------------------------------------------------
# supervised trainers
# --------------------------------------------------------------------------

def _fit_supervised(c: Classifier, train_set: Dataset, cfg: TrainConfig, epochs: int, loss_kind: str,
                    phase: str, history=None, weight_decay=0.0, optimizer=None) -> Classifier:
    if epochs <= 0:
        return c
    rng = substream(cfg.seed, f"shuffle.{phase}")
    state = optimizer if optimizer is not None else AdamState(c.params, lr=cfg.lr)
    x_all = train_set.features
    y_all = _onehot(train_set.labels, train_set.k)
    n = len(train_set)
    m = min(cfg.m, n)
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n - m + 1, m):
            idx = perm[start:start + m]
            with _phase(phase, step), Tape() as tape:
                if loss_kind == "enn":
                    loss = losses.enn_sq_loss(c(Tensor(x_all[idx])), y_all[idx])
                else:
                    loss = losses.cross_entropy_loss(c.logits(Tensor(x_all[idx])), y_all[idx])
                grads = ad.backward(tape, loss.node, c.params)
            _check_finite(loss.value, phase, step)
            _step(c.params, grads, state, phase, step, weight_decay=weight_decay)
            total += loss.value
            batches += 1
            step += 1
        if history is not None:
            history.append({"epoch": epoch, "loss": total / max(batches, 1),
                            "train_accuracy": metrics.accuracy(c, train_set)})
    if history:
        log.info("%s: %d epochs, final loss %.4f, train accuracy %.4f", phase, epochs,
                 history[-1]["loss"], history[-1]["train_accuracy"])
    return c


def pretrain_enn(classifier: Classifier, train_set: Dataset, cfg: TrainConfig, history=None) -> Classifier:
    """Fit the evidential classifier on the squared Dirichlet loss alone."""
    return _fit_supervised(classifier, train_set, cfg, cfg.pretrain_epochs, "enn", "pretrain", history)


def train_baseline_enn(classifier: Classifier, train_set: Dataset, cfg: TrainConfig, history=None) -> Classifier:
    return pretrain_enn(classifier, train_set, cfg, history)


def train_baseline_softmax(classifier: Classifier, train_set: Dataset, cfg: TrainConfig,
                           history=None) -> Classifier:
    """Softmax classifier with cross-entropy and L2 weight decay."""
    return _fit_supervised(classifier, train_set, cfg, cfg.pretrain_epochs, "xent", "l2", history,
                           weight_decay=cfg.weight_decay)


# --------------------------------------------------------------------------
# alternating WGAN / ENN training
# --------------------------------------------------------------------------

@dataclass
class WennState:
    classifier: Classifier
    generator: Generator
    critic: Discriminator
    opt_classifier: AdamState
    opt_generator: AdamState
    opt_critic: AdamState
    log: TrainLog


def _digests(*models):
    return tuple(m.digest() for m in models)


def train_wenn(classifier: Classifier, generator: Generator, critic: Discriminator, train_set: Dataset,
               cfg: TrainConfig, callback=None) -> WennState:
    """Alternate ``n_d`` critic steps, one generator ascent step and ``n_e`` ENN steps.

    The Wasserstein estimate is taken on the last critic batch after the
    critic updates and before the generator update. Stops when the estimate
    plateaus (after ``min_g_iters``) or at ``max_g_iters``.
    """
    rng_batch = substream(cfg.seed, "batch")
    rng_latent = substream(cfg.seed, "latent")
    rng_gp = substream(cfg.seed, "gp")
    x_all = train_set.features
    y_all = _onehot(train_set.labels, train_set.k)
    n = len(train_set)
    m = cfg.m
    opt_c = AdamState(classifier.params, lr=cfg.lr)
    opt_g = AdamState(generator.params, lr=cfg.generator_rate, beta1=cfg.gan_beta1, beta2=cfg.gan_beta2)
    opt_d = AdamState(critic.params, lr=cfg.critic_rate, beta1=cfg.gan_beta1, beta2=cfg.gan_beta2)
    tlog = TrainLog()
    t0 = time.perf_counter()

    def id_batch():
        idx = rng_batch.choice(n, size=m, replace=n < m)
        return x_all[idx], y_all[idx]

    def fake_batch():
        z = generator.sample_latent(rng_latent, m)
        return generator(Tensor(z)).data

    for it in range(cfg.max_g_iters):
        # critic
        if cfg.check_phases:
            before = _digests(classifier, generator)
        for _ in range(cfg.n_d):
            x_real, _y = id_batch()
            x_fake = fake_batch()
            with _phase("critic", it), Tape() as tape:
                c_loss = losses.critic_loss(critic, x_real, x_fake, cfg.lipschitz_mode, cfg.lambda_gp,
                                            cfg.clip_c, rng=rng_gp)
                grads = ad.backward(tape, c_loss.node, critic.params)
            _check_finite(c_loss.value, "critic", it)
            _step(critic.params, grads, opt_d, "critic", it)
            if cfg.lipschitz_mode == "clip":
                ad.clip_weights(critic.params, cfg.clip_c)
            tlog.critic_steps += 1
        if cfg.check_phases:
            assert _digests(classifier, generator) == before, "critic step touched classifier/generator"
        dist = losses.wasserstein_estimate(critic, x_real, x_fake)
        _check_finite(dist, "critic", it)

        # generator (ascent)
        if cfg.check_phases:
            before = _digests(classifier, critic)
        z = generator.sample_latent(rng_latent, m)
        with _phase("gen", it), Tape() as tape:
            g_obj = losses.generator_loss(critic, classifier, generator, z, cfg.generator_beta)
            grads = ad.backward(tape, g_obj.node, generator.params)
        _check_finite(g_obj.value, "gen", it)
        _step(generator.params, grads, opt_g, "gen", it, sign=-1.0)
        tlog.generator_steps += 1
        if cfg.check_phases:
            assert _digests(classifier, critic) == before, "generator step touched classifier/critic"

        # classifier
        if cfg.check_phases:
            before = _digests(generator, critic)
        enn_value = float("nan")
        id_vac = gen_vac = float("nan")
        for _ in range(cfg.n_e):
            x_in, y_in = id_batch()
            x_out = fake_batch()
            if cfg.enn_update == "combined":
                with _phase("enn", it), Tape() as tape:
                    a_in = classifier(Tensor(x_in))
                    a_out = classifier(Tensor(x_out))
                    e_loss = losses.regularized_enn_loss(a_in, y_in, a_out, cfg.beta)
                    grads = ad.backward(tape, e_loss.node, classifier.params)
                _check_finite(e_loss.value, "enn", it)
                _step(classifier.params, grads, opt_c, "enn", it)
            else:
                with _phase("enn", it), Tape() as tape:
                    a_in = classifier(Tensor(x_in))
                    e_loss = losses.enn_sq_loss(a_in, y_in)
                    grads = ad.backward(tape, e_loss.node, classifier.params)
                _check_finite(e_loss.value, "enn", it)
                _step(classifier.params, grads, opt_c, "enn", it)
                with _phase("enn", it), Tape() as tape:
                    a_out = classifier(Tensor(x_out))
                    v_loss = losses.mean_vacuity(a_out)
                    grads = ad.backward(tape, v_loss.node, classifier.params)
                _step(classifier.params, grads, opt_c, "enn", it, sign=-cfg.beta)
            enn_value = e_loss.value
            id_vac = _mean_vac(a_in.data)
            gen_vac = _mean_vac(a_out.data)
            tlog.enn_steps += 1
        if cfg.check_phases:
            assert _digests(generator, critic) == before, "ENN step touched generator/critic"
        if cfg.n_e == 0:
            x_in, _ = id_batch()
            id_vac = _mean_vac(classifier.predict(x_in))
            gen_vac = _mean_vac(classifier.predict(x_fake))

        tlog.append(IterRecord(it, dist, c_loss.value, g_obj.value, enn_value, id_vac, gen_vac,
                               time.perf_counter() - t0))
        if callback is not None:
            callback(it, tlog)
        if it + 1 >= cfg.min_g_iters and convergence_check(tlog, cfg.conv_window, cfg.conv_tol):
            tlog.converged_at = it
            log.info("dist converged at iteration %d", it)
            break
    return WennState(classifier, generator, critic, opt_c, opt_g, opt_d, tlog)


def _mean_vac(alpha: np.ndarray) -> float:
    return float(np.mean(alpha.shape[1] / alpha.astype(np.float64).sum(axis=1)))
